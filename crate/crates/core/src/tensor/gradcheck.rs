//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_EPSILON: f64 = 1e-5;

/// Gradient magnitudes below this are treated as this value when
/// normalizing errors, so leaves with an identically zero gradient compare
/// in absolute terms.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub name: String,
    /// `max |analytic - numeric|` over the leaf, divided by the leaf's
    /// largest gradient magnitude (floored at [`SCALE_FLOOR`]).
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
    /// Set when evaluation hit a non-finite value or another error.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.leaves.iter().all(|l| l.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return write!(f, "FAILED: {msg}");
        }
        for l in &self.leaves {
            writeln!(f, "{:<24} {:.3e}", l.name, l.max_rel_error)?;
        }
        Ok(())
    }
}

fn evaluate<F>(leaves: &[(String, Tensor)], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.value(loss)
        .item()
        .ok_or_else(|| Error::invalid("grad_check: builder did not return a scalar"))
}

/// Compares the tape gradient of `build` against central finite differences
/// for every element of every leaf.
pub fn grad_check<F>(leaves: &[(String, Tensor)], tolerance: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    match run(leaves, &build) {
        Ok(checks) => GradCheckReport {
            leaves: checks,
            tolerance,
            failure: None,
        },
        Err(e) => GradCheckReport {
            leaves: Vec::new(),
            tolerance,
            failure: Some(e.to_string()),
        },
    }
}

fn run<F>(leaves: &[(String, Tensor)], build: &F) -> Result<Vec<LeafCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf recorded as param").clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[li].1.data()[i];
            work[li].1.data_mut()[i] = orig + FD_EPSILON;
            let plus = evaluate(&work, build)?;
            work[li].1.data_mut()[i] = orig - FD_EPSILON;
            let minus = evaluate(&work, build)?;
            work[li].1.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * FD_EPSILON);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(SCALE_FLOOR, f64::max);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        out.push(LeafCheck {
            name: leaves[li].0.clone(),
            max_rel_error: err / scale,
        });
    }
    Ok(out)
}
