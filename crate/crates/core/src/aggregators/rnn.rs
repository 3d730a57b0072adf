use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Graph, Tensor, Var};

use super::{Readout, RnnCell, RnnConfig};

/// Parameter slots of a single-layer recurrent cell.
///
/// LSTM gate blocks are ordered input, forget, candidate, output; GRU blocks
/// are reset, update, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RnnParams {
    /// `[D_in×G·H]`
    pub w_ih: usize,
    /// `[H×G·H]`
    pub w_hh: usize,
    /// `[G·H]`
    pub b_ih: usize,
    /// `[G·H]`, GRU only (the candidate's recurrent bias sits inside the
    /// reset product).
    pub b_hh: Option<usize>,
}

impl RnnParams {
    pub fn init<R: Rng>(cfg: &RnnConfig, input: usize, params: &mut ParamSet, rng: &mut R) -> Self {
        let h = cfg.hidden_size;
        let k = 1.0 / (h as f64).sqrt();
        match cfg.cell {
            RnnCell::Lstm => {
                let w_ih = params.push_uniform("head.lstm.w_ih", &[input, 4 * h], k, rng);
                let w_hh = params.push_uniform("head.lstm.w_hh", &[h, 4 * h], k, rng);
                let b_ih = params.push_uniform("head.lstm.bias", &[4 * h], k, rng);
                let bias = params.tensors_mut()[b_ih].data_mut();
                bias[h..2 * h].fill(1.0);
                Self {
                    w_ih,
                    w_hh,
                    b_ih,
                    b_hh: None,
                }
            }
            RnnCell::Gru => {
                let w_ih = params.push_uniform("head.gru.w_ih", &[input, 3 * h], k, rng);
                let w_hh = params.push_uniform("head.gru.w_hh", &[h, 3 * h], k, rng);
                let b_ih = params.push_uniform("head.gru.b_ih", &[3 * h], k, rng);
                let b_hh = params.push_uniform("head.gru.b_hh", &[3 * h], k, rng);
                Self {
                    w_ih,
                    w_hh,
                    b_ih,
                    b_hh: Some(b_hh),
                }
            }
        }
    }
}

/// Runs the cell over `frames[T×D]` from a zero state and reads out either
/// `h_T` or the mean of the per-step outputs `o_t = h_t`.
pub fn rnn_aggregate(
    g: &mut Graph,
    cfg: &RnnConfig,
    p: &RnnParams,
    vars: &[Var],
    frames: Var,
) -> Result<Var> {
    let fs = g.shape(frames).to_vec();
    let expected_in = g.shape(vars[p.w_ih])[0];
    if fs.len() != 2 || fs[1] != expected_in {
        return Err(Error::Shape {
            op: "rnn_aggregate",
            lhs: fs,
            rhs: g.shape(vars[p.w_ih]).to_vec(),
        });
    }
    let h = cfg.hidden_size;
    // Input projections for all steps at once: [T×G·H].
    let x_proj = g.affine(frames, vars[p.w_ih], vars[p.b_ih])?;
    let mut hidden = g.constant(Tensor::zeros(&[1, h]));
    let mut outputs = Vec::with_capacity(fs[0]);
    match cfg.cell {
        RnnCell::Lstm => {
            let mut cell = g.constant(Tensor::zeros(&[1, h]));
            for t in 0..fs[0] {
                let xt = g.slice(x_proj, 0, t, 1)?;
                let rec = g.matmul(hidden, vars[p.w_hh])?;
                let z = g.add(xt, rec)?;
                let i_pre = g.slice(z, 1, 0, h)?;
                let f_pre = g.slice(z, 1, h, h)?;
                let c_pre = g.slice(z, 1, 2 * h, h)?;
                let o_pre = g.slice(z, 1, 3 * h, h)?;
                let i = g.sigmoid(i_pre)?;
                let f = g.sigmoid(f_pre)?;
                let cand = g.tanh(c_pre)?;
                let o = g.sigmoid(o_pre)?;
                let kept = g.mul(f, cell)?;
                let written = g.mul(i, cand)?;
                cell = g.add(kept, written)?;
                let squashed = g.tanh(cell)?;
                hidden = g.mul(o, squashed)?;
                outputs.push(hidden);
            }
        }
        RnnCell::Gru => {
            let b_hh = vars[p.b_hh.expect("gru has a recurrent bias")];
            for t in 0..fs[0] {
                let xt = g.slice(x_proj, 0, t, 1)?;
                let rec = g.affine(hidden, vars[p.w_hh], b_hh)?;
                let xr = g.slice(xt, 1, 0, h)?;
                let xz = g.slice(xt, 1, h, h)?;
                let xn = g.slice(xt, 1, 2 * h, h)?;
                let hr = g.slice(rec, 1, 0, h)?;
                let hz = g.slice(rec, 1, h, h)?;
                let hn = g.slice(rec, 1, 2 * h, h)?;
                let r_pre = g.add(xr, hr)?;
                let r = g.sigmoid(r_pre)?;
                let z_pre = g.add(xz, hz)?;
                let z = g.sigmoid(z_pre)?;
                let gated = g.mul(r, hn)?;
                let n_pre = g.add(xn, gated)?;
                let n = g.tanh(n_pre)?;
                let keep = g.one_minus(z)?;
                let fresh = g.mul(keep, n)?;
                let carried = g.mul(z, hidden)?;
                hidden = g.add(fresh, carried)?;
                outputs.push(hidden);
            }
        }
    }
    match cfg.readout {
        Readout::FinalState => g.reshape(hidden, &[h]),
        Readout::OutputAverage => {
            let stacked = g.concat(&outputs, 0)?;
            g.mean_axis(stacked, 0)
        }
    }
}
