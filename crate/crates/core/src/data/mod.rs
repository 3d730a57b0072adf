//! Feature datasets: the on-disk manifest + TRKF files, and a synthetic
//! generator.
//!
//! A dataset directory holds `manifest.json` and one TRKF file per tracklet:
//!
//! ```json
//! {
//!   "version": 1,
//!   "layout": {"kind": "vector", "dim": 2048},
//!   "tracklets": [
//!     {"identity": 17, "camera": 0, "path": "t00000.trkf", "frames": 24, "query": true}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest. A `vector` layout expects files of
//! shape `[frames, dim]`; a `map` layout (`{"kind": "map", "width": w,
//! "height": h, "channels": c}`) expects `[frames, w, h, c]`. Identities may
//! be arbitrary integers and are re-indexed to `0..n` on load.

pub mod format;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregators::FrameShape;
use crate::error::{Error, Result};
use crate::retrieval::Meta;
use crate::sampling::Tracklet;

pub use format::Dtype;
pub use synth::{generate_synthetic, SynthConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    Vector {
        dim: usize,
    },
    Map {
        width: usize,
        height: usize,
        channels: usize,
    },
}

impl Layout {
    pub fn frame_shape(&self) -> FrameShape {
        match *self {
            Layout::Vector { dim } => FrameShape::vector(dim),
            Layout::Map {
                width,
                height,
                channels,
            } => FrameShape {
                width,
                height,
                channels,
            },
        }
    }

    /// Tensor shape of a tracklet with `frames` frames.
    pub fn tracklet_shape(&self, frames: usize) -> Vec<usize> {
        match *self {
            Layout::Vector { dim } => vec![frames, dim],
            Layout::Map {
                width,
                height,
                channels,
            } => vec![frames, width, height, channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_shape().dims().contains(&0) {
            return Err(Error::config(format!("layout dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletEntry {
    pub identity: u64,
    pub camera: usize,
    pub path: PathBuf,
    pub frames: usize,
    #[serde(default)]
    pub query: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub layout: Layout,
    pub tracklets: Vec<TrackletEntry>,
}

/// Tracklets with contiguous identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: Layout,
    pub tracklets: Vec<Tracklet>,
    /// Indices into `tracklets` used as queries; the gallery is every
    /// tracklet.
    pub queries: Vec<usize>,
    /// Original identity of each contiguous label.
    pub identity_ids: Vec<u64>,
}

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.identity_ids.len()
    }

    pub fn num_frames(&self) -> usize {
        self.tracklets.iter().map(Tracklet::len).sum()
    }

    pub fn meta(&self, index: usize) -> Meta {
        let t = &self.tracklets[index];
        Meta {
            identity: t.identity,
            camera: t.camera,
        }
    }

    pub fn gallery_meta(&self) -> Vec<Meta> {
        (0..self.tracklets.len()).map(|i| self.meta(i)).collect()
    }

    pub fn query_meta(&self) -> Vec<Meta> {
        self.queries.iter().map(|&i| self.meta(i)).collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    manifest.layout.validate()?;
    if manifest.tracklets.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "manifest lists no tracklets".into(),
        });
    }
    Ok(manifest)
}

/// Loads a manifest and all its feature files. `path` may be the manifest
/// itself or the directory holding `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest = read_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let labels: BTreeMap<u64, usize> = manifest
        .tracklets
        .iter()
        .map(|t| t.identity)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let mut tracklets = Vec::with_capacity(manifest.tracklets.len());
    let mut queries = Vec::new();
    for (i, entry) in manifest.tracklets.iter().enumerate() {
        let file = root.join(&entry.path);
        let frames = format::read_tensor(&file)?;
        let expected = manifest.layout.tracklet_shape(entry.frames);
        if frames.shape() != expected {
            return Err(Error::Format {
                path: file,
                message: format!(
                    "tracklet {i} (identity {}): expected shape {expected:?}, found {:?}",
                    entry.identity,
                    frames.shape()
                ),
            });
        }
        tracklets.push(Tracklet::new(labels[&entry.identity], entry.camera, frames)?);
        if entry.query {
            queries.push(i);
        }
    }
    Ok(Dataset {
        layout: manifest.layout,
        tracklets,
        queries,
        identity_ids: labels.into_keys().collect(),
    })
}

/// Writes `dir/manifest.json` and one `tNNNNN.trkf` per tracklet.
pub fn write_dataset(dir: &Path, dataset: &Dataset, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.tracklets.len());
    for (i, t) in dataset.tracklets.iter().enumerate() {
        let name = PathBuf::from(format!("t{i:05}.trkf"));
        format::write_tensor(&dir.join(&name), &t.frames, dtype)?;
        entries.push(TrackletEntry {
            identity: dataset.identity_ids[t.identity],
            camera: t.camera,
            path: name,
            frames: t.len(),
            query: dataset.queries.contains(&i),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        layout: dataset.layout,
        tracklets: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
