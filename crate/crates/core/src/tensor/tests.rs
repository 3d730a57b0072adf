use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn leaf(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::identity(2));
    let out = g.matmul(a, i).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.0; 4]));
    let s = g.softmax(a, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);
}

#[test]
fn identity_time_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 1], vec![5.0, 7.0, 9.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.0]));
    let y = g.time_conv(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn time_conv_zero_padding_keeps_length() {
    // kernel [1, 2, 3] over [1, 1, 1]: edges lose one tap each.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap());
    let w = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.5]));
    let y = g.time_conv(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[5.5, 6.5, 3.5]);
}

#[test]
fn even_time_kernel_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 1]));
    let w = g.constant(Tensor::zeros(&[2, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.time_conv(x, w, b).is_err());
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
    assert!(msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn nan_is_surfaced() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![-1.0]));
    let err = g.log(a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "log", .. }));
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let s = g.sigmoid(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn leaf_gradient_has_leaf_shape_even_when_unused() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 3]));
    let unused = g.param(Tensor::zeros(&[4, 1, 2]));
    let loss = g.sum_all(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().shape(), &[2, 3]);
    assert_eq!(grads.get(unused).unwrap().shape(), &[4, 1, 2]);
    assert!(grads.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn max_ties_route_to_first() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![2.0, 2.0, 1.0]));
    let m = g.max_axis(x, 0).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let leaves = vec![leaf("x", Tensor::vector(vec![0.3, -0.2]))];
    let report = grad_check(&leaves, 1e-4, |g, _| Ok(g.constant(Tensor::scalar(3.0))));
    assert!(report.passed());
    assert_eq!(report.worst(), 0.0);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.param(random(&mut rng, &[4, 3]));
        let w = g.param(random(&mut rng, &[3, 5]));
        let b = g.param(random(&mut rng, &[5]));
        let y = g.affine(x, w, b).unwrap();
        let s = g.softmax(y, 1).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, &[3, 7]).map(|v| v * 30.0));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> crate::Result<Var>>;

/// One finite-difference case per primitive: leaf shapes and a builder.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        })),
        ("affine", vec![vec![3, 4], vec![4, 2], vec![2]], Box::new(|g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            project(g, y, 2)
        })),
        ("time_conv", vec![vec![5, 3], vec![3, 3, 2], vec![2]], Box::new(|g, v| {
            let y = g.time_conv(v[0], v[1], v[2])?;
            project(g, y, 3)
        })),
        ("time_conv_k5_short", vec![vec![2, 2], vec![5, 2, 1], vec![1]], Box::new(|g, v| {
            let y = g.time_conv(v[0], v[1], v[2])?;
            project(g, y, 4)
        })),
        ("spatial_conv", vec![vec![3, 2, 2, 3], vec![2, 2, 3, 4], vec![4]], Box::new(|g, v| {
            let y = g.spatial_conv(v[0], v[1], v[2])?;
            project(g, y, 5)
        })),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            project(g, m, 6)
        })),
        ("scale_add_scalar", vec![vec![4]], Box::new(|g, v| {
            let a = g.scale(v[0], -1.7)?;
            let b = g.add_scalar(a, 0.3)?;
            let c = g.one_minus(b)?;
            project(g, c, 7)
        })),
        ("scale_by_recip", vec![vec![3], vec![]], Box::new(|g, v| {
            let e = g.exp(v[1])?;
            let r = g.recip(e)?;
            let y = g.scale_by(v[0], r)?;
            project(g, y, 8)
        })),
        ("div_by", vec![vec![3], vec![]], Box::new(|g, v| {
            let e = g.exp(v[1])?;
            let y = g.div_by(v[0], e)?;
            project(g, y, 18)
        })),
        ("sigmoid_tanh_exp_log", vec![vec![2, 3]], Box::new(|g, v| {
            let s = g.sigmoid(v[0])?;
            let t = g.tanh(s)?;
            let e = g.exp(t)?;
            let l = g.log(e)?;
            let m = g.mul(l, s)?;
            project(g, m, 9)
        })),
        ("relu", vec![vec![6]], Box::new(|g, v| {
            let r = g.relu(v[0])?;
            project(g, r, 10)
        })),
        ("softmax_axis0", vec![vec![3, 4]], Box::new(|g, v| {
            let s = g.softmax(v[0], 0)?;
            project(g, s, 11)
        })),
        ("softmax_axis1", vec![vec![3, 4]], Box::new(|g, v| {
            let s = g.softmax(v[0], 1)?;
            project(g, s, 12)
        })),
        ("log_softmax", vec![vec![2, 5]], Box::new(|g, v| {
            let s = g.log_softmax(v[0], 1)?;
            project(g, s, 13)
        })),
        ("sum_mean_axis", vec![vec![2, 3, 4]], Box::new(|g, v| {
            let a = g.sum_axis(v[0], 1)?;
            let b = g.mean_axis(a, 0)?;
            project(g, b, 14)
        })),
        ("max_axis", vec![vec![4, 3]], Box::new(|g, v| {
            let m = g.max_axis(v[0], 0)?;
            project(g, m, 15)
        })),
        ("mean_all", vec![vec![3, 2]], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean_all(sq)
        })),
        ("concat_slice", vec![vec![2, 3], vec![2, 2]], Box::new(|g, v| {
            let c = g.concat(&[v[0], v[1], v[0]], 1)?;
            let s = g.slice(c, 1, 2, 4)?;
            let r = g.reshape(s, &[4, 2])?;
            project(g, r, 16)
        })),
        ("pairwise_distance", vec![vec![4, 3]], Box::new(|g, v| {
            let d = g.pairwise_distance(v[0])?;
            project(g, d, 17)
        })),
        ("gather", vec![vec![3, 3]], Box::new(|g, v| {
            let s = g.gather(v[0], &[0, 4, 4, 8, 2])?;
            project(g, s, 18)
        })),
    ]
}

/// Inputs for max/relu are resampled until every kink is at least 1e-3 away.
fn separated(t: &Tensor, name: &str) -> bool {
    match name {
        "relu" => t.data().iter().all(|v| v.abs() >= 1e-3),
        "max_axis" => {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            (0..cols).all(|c| {
                let mut col: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + c]).collect();
                col.sort_by(f64::total_cmp);
                col.windows(2).all(|w| w[1] - w[0] >= 1e-3)
            })
        }
        _ => true,
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 101 + 7);
            let leaves: Vec<(String, Tensor)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut t = random(&mut rng, s);
                    while !separated(&t, name) {
                        t = random(&mut rng, s);
                    }
                    (format!("{name}[{i}]"), t)
                })
                .collect();
            let report = grad_check(&leaves, 1e-4, &build);
            assert!(report.passed(), "{name} seed {seed}: {report}");
        }
    }
}
