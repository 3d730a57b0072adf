//! Slice-level numeric kernels shared by forward and backward rules.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a strided lane, written into `out`.
pub(crate) fn softmax_lane(
    src: &[f64],
    out: &mut [f64],
    base: usize,
    len: usize,
    stride: usize,
) {
    let max = (0..len)
        .map(|j| src[base + j * stride])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for j in 0..len {
        let e = (src[base + j * stride] - max).exp();
        out[base + j * stride] = e;
        sum += e;
    }
    for j in 0..len {
        out[base + j * stride] /= sum;
    }
}

/// Stable log-softmax of a strided lane.
pub(crate) fn log_softmax_lane(
    src: &[f64],
    out: &mut [f64],
    base: usize,
    len: usize,
    stride: usize,
) {
    let max = (0..len)
        .map(|j| src[base + j * stride])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..len).map(|j| (src[base + j * stride] - max).exp()).sum();
    let lse = max + sum.ln();
    for j in 0..len {
        out[base + j * stride] = src[base + j * stride] - lse;
    }
}
