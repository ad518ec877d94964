//! Gated recurrent unit over a `[batch, frames, features]` sequence.
//!
//! Gate rows are stacked as (reset, update, candidate). The reset gate scales
//! the previous state before the candidate's recurrent projection:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + W_hn (r ⊙ h) + b_hn)
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use crate::error::{Error, Result};

use super::ops::Op;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GruParams {
    /// `[3 * hidden, features]`
    pub w_ih: Tensor,
    /// `[3 * hidden, hidden]`
    pub w_hh: Tensor,
    /// `[3 * hidden]`
    pub b_ih: Tensor,
    /// `[3 * hidden]`
    pub b_hh: Tensor,
}

impl GruParams {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.w_ih.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let h = self.w_hh.shape().get(1).copied().unwrap_or(0);
        let f = self.w_ih.shape().get(1).copied().unwrap_or(0);
        let ok = self.w_hh.shape() == [3 * h, h]
            && self.w_ih.shape() == [3 * h, f]
            && self.b_ih.shape() == [3 * h]
            && self.b_hh.shape() == [3 * h];
        if !ok {
            return Err(Error::dim(format!(
                "inconsistent GRU weights: w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.b_ih.shape(),
                self.b_hh.shape()
            )));
        }
        Ok(())
    }
}

pub(crate) struct GruTape {
    batch: usize,
    frames: usize,
    features: usize,
    hidden: usize,
    // per step, each [batch, hidden]
    r: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[b, o] = bias[o] + Σ_i x[b, i] · w[row0 + o, i]` for `o < n_out`.
fn project(x: &[f64], w: &[f64], bias: &[f64], row0: usize, n_out: usize, n_in: usize, out: &mut [f64]) {
    let batch = x.len() / n_in;
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[(row0 + o) * n_in..(row0 + o + 1) * n_in];
            out[b * n_out + o] = bias[row0 + o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
}

/// `out[b, i] += Σ_o d[b, o] · w[row0 + o, i]`
fn project_back(d: &[f64], w: &[f64], row0: usize, n_out: usize, n_in: usize, out: &mut [f64]) {
    let batch = d.len() / n_out;
    for b in 0..batch {
        for o in 0..n_out {
            let dv = d[b * n_out + o];
            if dv == 0.0 {
                continue;
            }
            let wr = &w[(row0 + o) * n_in..(row0 + o + 1) * n_in];
            for (acc, wv) in out[b * n_in..(b + 1) * n_in].iter_mut().zip(wr) {
                *acc += dv * wv;
            }
        }
    }
}

/// `dw[row0 + o, i] += Σ_b d[b, o] · x[b, i]`
fn outer_acc(d: &[f64], x: &[f64], row0: usize, n_out: usize, n_in: usize, dw: &mut [f64]) {
    let batch = d.len() / n_out;
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let dv = d[b * n_out + o];
            for (acc, xv) in dw[(row0 + o) * n_in..(row0 + o + 1) * n_in].iter_mut().zip(xr) {
                *acc += dv * xv;
            }
        }
    }
}

/// Runs the recurrence and returns the final hidden state `[batch, hidden]`.
pub fn gru_forward(input: &Tensor, params: &GruParams, h0: &Tensor) -> Result<Tensor> {
    params.check()?;
    let &[batch, frames, features] = input.shape() else {
        return Err(Error::dim(format!("gru input must be [batch, frames, features], got {:?}", input.shape())));
    };
    let hidden = params.hidden();
    if features != params.features() {
        return Err(Error::dim(format!(
            "gru: {features} input features, weights expect {}",
            params.features()
        )));
    }
    if h0.shape() != [batch, hidden] {
        return Err(Error::dim(format!("gru: h0 {:?}, expected [{batch}, {hidden}]", h0.shape())));
    }

    let x = input.data();
    let w_ih = params.w_ih.data();
    let w_hh = params.w_hh.data();
    let b_ih = params.b_ih.data();
    let b_hh = params.b_hh.data();

    let mut tape = GruTape {
        batch,
        frames,
        features,
        hidden,
        r: Vec::with_capacity(frames),
        z: Vec::with_capacity(frames),
        n: Vec::with_capacity(frames),
        h_prev: Vec::with_capacity(frames),
        q: Vec::with_capacity(frames),
    };

    let mut h = h0.to_vec();
    let mut x_t = vec![0.0; batch * features];
    let mut gx = vec![0.0; batch * 3 * hidden];
    let mut gh = vec![0.0; batch * 2 * hidden];
    let mut gn = vec![0.0; batch * hidden];
    for t in 0..frames {
        for b in 0..batch {
            let src = &x[(b * frames + t) * features..(b * frames + t + 1) * features];
            x_t[b * features..(b + 1) * features].copy_from_slice(src);
        }
        project(&x_t, &w_ih, &b_ih, 0, 3 * hidden, features, &mut gx);
        project(&h, &w_hh, &b_hh, 0, 2 * hidden, hidden, &mut gh);

        let mut r = vec![0.0; batch * hidden];
        let mut z = vec![0.0; batch * hidden];
        for b in 0..batch {
            for o in 0..hidden {
                let i = b * hidden + o;
                r[i] = sigmoid(gx[b * 3 * hidden + o] + gh[b * 2 * hidden + o]);
                z[i] = sigmoid(gx[b * 3 * hidden + hidden + o] + gh[b * 2 * hidden + hidden + o]);
            }
        }
        let q: Vec<f64> = r.iter().zip(&h).map(|(r, h)| r * h).collect();
        project(&q, &w_hh, &b_hh, 2 * hidden, hidden, hidden, &mut gn);
        let mut n = vec![0.0; batch * hidden];
        let mut h_next = vec![0.0; batch * hidden];
        for b in 0..batch {
            for o in 0..hidden {
                let i = b * hidden + o;
                n[i] = (gx[b * 3 * hidden + 2 * hidden + o] + gn[i]).tanh();
                h_next[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
            }
        }
        tape.r.push(r);
        tape.z.push(z);
        tape.n.push(n);
        tape.q.push(q);
        tape.h_prev.push(std::mem::replace(&mut h, h_next));
    }
    drop((x, w_ih, w_hh, b_ih, b_hh));

    Ok(Tensor::from_op(
        h,
        vec![batch, hidden],
        Op::Gru(Box::new(tape)),
        vec![
            input.clone(),
            params.w_ih.clone(),
            params.w_hh.clone(),
            params.b_ih.clone(),
            params.b_hh.clone(),
            h0.clone(),
        ],
    ))
}

pub(crate) fn backward(inputs: &[Tensor], tape: &GruTape, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let GruTape {
        batch,
        frames,
        features,
        hidden,
        ..
    } = *tape;
    let x = inputs[0].data();
    let w_ih = inputs[1].data();
    let w_hh = inputs[2].data();

    let mut dx = vec![0.0; x.len()];
    let mut dw_ih = vec![0.0; w_ih.len()];
    let mut dw_hh = vec![0.0; w_hh.len()];
    let mut db_ih = vec![0.0; 3 * hidden];
    let mut db_hh = vec![0.0; 3 * hidden];

    let mut dh = g.to_vec();
    let mut x_t = vec![0.0; batch * features];
    for t in (0..frames).rev() {
        let (r, z, n, h_prev, q) = (&tape.r[t], &tape.z[t], &tape.n[t], &tape.h_prev[t], &tape.q[t]);
        let size = batch * hidden;
        let mut da_r = vec![0.0; size];
        let mut da_z = vec![0.0; size];
        let mut da_n = vec![0.0; size];
        let mut dh_prev = vec![0.0; size];
        for i in 0..size {
            let dn = dh[i] * (1.0 - z[i]);
            let dz = dh[i] * (h_prev[i] - n[i]);
            dh_prev[i] = dh[i] * z[i];
            da_n[i] = dn * (1.0 - n[i] * n[i]);
            da_z[i] = dz * z[i] * (1.0 - z[i]);
        }
        let mut dq = vec![0.0; size];
        project_back(&da_n, &w_hh, 2 * hidden, hidden, hidden, &mut dq);
        for i in 0..size {
            da_r[i] = dq[i] * h_prev[i] * r[i] * (1.0 - r[i]);
            dh_prev[i] += dq[i] * r[i];
        }
        project_back(&da_r, &w_hh, 0, hidden, hidden, &mut dh_prev);
        project_back(&da_z, &w_hh, hidden, hidden, hidden, &mut dh_prev);

        for b in 0..batch {
            let src = &x[(b * frames + t) * features..(b * frames + t + 1) * features];
            x_t[b * features..(b + 1) * features].copy_from_slice(src);
        }
        let mut dx_t = vec![0.0; batch * features];
        for (gate, d) in [&da_r, &da_z, &da_n].into_iter().enumerate() {
            project_back(d, &w_ih, gate * hidden, hidden, features, &mut dx_t);
            outer_acc(d, &x_t, gate * hidden, hidden, features, &mut dw_ih);
            for b in 0..batch {
                for o in 0..hidden {
                    db_ih[gate * hidden + o] += d[b * hidden + o];
                    db_hh[gate * hidden + o] += d[b * hidden + o];
                }
            }
        }
        outer_acc(&da_r, h_prev, 0, hidden, hidden, &mut dw_hh);
        outer_acc(&da_z, h_prev, hidden, hidden, hidden, &mut dw_hh);
        outer_acc(&da_n, q, 2 * hidden, hidden, hidden, &mut dw_hh);
        for b in 0..batch {
            dx[(b * frames + t) * features..(b * frames + t + 1) * features]
                .copy_from_slice(&dx_t[b * features..(b + 1) * features]);
        }
        dh = dh_prev;
    }

    let keep = |i: usize, v: Vec<f64>| inputs[i].requires_grad().then_some(v);
    vec![
        keep(0, dx),
        keep(1, dw_ih),
        keep(2, dw_hh),
        keep(3, db_ih),
        keep(4, db_hh),
        keep(5, dh),
    ]
}
