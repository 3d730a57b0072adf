use super::*;
use crate::aggregators::{AggregatorConfig, PoolMode, Readout, RnnCell, RnnConfig};
use crate::data::{generate_synthetic, Layout, SynthConfig};

fn tiny_data() -> (Dataset, Dataset) {
    generate_synthetic(&SynthConfig {
        num_identities: 12,
        tracklets_per_identity: 4,
        frames_per_tracklet: 8,
        layout: Layout::Vector { dim: 8 },
        ..SynthConfig::default()
    })
    .unwrap()
}

fn avg() -> AggregatorConfig {
    AggregatorConfig::Pooling { mode: PoolMode::Avg }
}

fn config(head: AggregatorConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        sampler: SamplerConfig {
            p: 4,
            k: 2,
            t: 4,
            seed: 3,
        },
        steps,
        ..TrainConfig::new(ModelConfig::new(head))
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (train_set, _) = tiny_data();
    let cfg = TrainConfig {
        learning_rate: Some(0.0),
        ..config(avg(), 5)
    };
    let mut t = Trainer::new(&train_set, cfg).unwrap();
    let before = t.params().clone();
    t.run(None, &mut TrainLog::default()).unwrap();
    assert_eq!(t.params(), &before);
    assert_eq!(t.steps_done(), 5);
}

#[test]
fn loss_decreases_on_separable_data() {
    let (train_set, _) = generate_synthetic(&SynthConfig {
        num_identities: 16,
        layout: Layout::Vector { dim: 16 },
        ..SynthConfig::default()
    })
    .unwrap();
    let (_, log) = train(&train_set, None, config(avg(), 200)).unwrap();
    let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
    let first = mean(&log.steps[..10]);
    let last = mean(&log.steps[190..]);
    assert!(last < first, "{last} >= {first}");
}

#[test]
fn identical_runs_give_identical_logs() {
    let (train_set, test_set) = tiny_data();
    let eval = EvalConfig::default();
    let cfg = TrainConfig {
        eval_interval: 5,
        ..config(avg(), 10)
    };
    let (a, la) = train(&train_set, Some((&test_set, &eval)), cfg.clone()).unwrap();
    let (b, lb) = train(&train_set, Some((&test_set, &eval)), cfg).unwrap();
    assert_eq!(serde_json::to_string(&la).unwrap(), serde_json::to_string(&lb).unwrap());
    assert_eq!(la.evals.len(), 2);
    assert_eq!(a, b);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (train_set, _) = tiny_data();
    let head = AggregatorConfig::Rnn(RnnConfig {
        cell: RnnCell::Gru,
        hidden_size: 6,
        readout: Readout::OutputAverage,
    });
    let (full, full_log) = train(&train_set, None, config(head, 12)).unwrap();

    let (half, half_log) = train(&train_set, None, config(head, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half");
    half.save(&path).unwrap();
    let loaded = Checkpoint::load(&path.with_extension("json")).unwrap();
    assert_eq!(loaded, half);
    let mut t = Trainer::resume(&train_set, loaded, config(head, 12)).unwrap();
    let mut rest = TrainLog::default();
    t.run(None, &mut rest).unwrap();

    let joined: Vec<StepRecord> = half_log.steps.into_iter().chain(rest.steps).collect();
    assert_eq!(joined, full_log.steps);
    assert_eq!(t.checkpoint(), full);
}

#[test]
fn resume_rejects_changed_config() {
    let (train_set, _) = tiny_data();
    let (ckpt, _) = train(&train_set, None, config(avg(), 2)).unwrap();
    let changed = TrainConfig {
        learning_rate: Some(1e-2),
        ..config(avg(), 4)
    };
    assert!(Trainer::resume(&train_set, ckpt, changed).is_err());
}

#[test]
fn tampered_sidecar_is_rejected() {
    let (train_set, _) = tiny_data();
    let (ckpt, _) = train(&train_set, None, config(avg(), 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c");
    ckpt.save(&path).unwrap();
    let json = path.with_extension("json");
    let text = std::fs::read_to_string(&json).unwrap().replace("\"seed\": 3", "\"seed\": 4");
    std::fs::write(&json, text).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn divergence_reports_step_and_component() {
    let (train_set, _) = tiny_data();
    let cfg = TrainConfig {
        learning_rate: Some(f64::MAX),
        ..config(avg(), 10)
    };
    let err = train(&train_set, None, cfg).unwrap_err();
    match err {
        Error::Diverged { step, .. } => assert!(step <= 3, "step {step}"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn recurrent_heads_clip_by_default() {
    let head = AggregatorConfig::Rnn(RnnConfig {
        cell: RnnCell::Lstm,
        hidden_size: 4,
        readout: Readout::FinalState,
    });
    let cfg = config(head, 3);
    assert_eq!(cfg.clip_norm(), Some(10.0));
    assert_eq!(cfg.lr(), 1e-4);
    assert_eq!(config(avg(), 1).clip_norm(), None);
    assert_eq!(config(avg(), 1).lr(), 3e-4);
    let tight = TrainConfig {
        grad_clip_norm: Some(1e-6),
        ..cfg
    };
    let (train_set, _) = tiny_data();
    let (_, log) = train(&train_set, None, tight).unwrap();
    assert!(log.steps.iter().all(|s| s.clipped));
}

#[test]
fn invalid_configs_are_rejected() {
    let (train_set, _) = tiny_data();
    for bad in [
        config(avg(), 0),
        TrainConfig {
            learning_rate: Some(-1.0),
            ..config(avg(), 1)
        },
        TrainConfig {
            adam: AdamConfig {
                epsilon: 0.0,
                ..AdamConfig::default()
            },
            ..config(avg(), 1)
        },
    ] {
        assert!(Trainer::new(&train_set, bad).is_err());
    }
}
