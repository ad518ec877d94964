//! Differentiable operations over [`Tensor`].
//!
//! Each public function computes its forward value eagerly and, when any input
//! requires gradients, records an [`Op`] holding whatever the backward rule
//! needs.

use crate::error::{Error, Result};

use super::gru::{self, GruTape};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Running statistics update: `new = BN_MOMENTUM * old + (1 - BN_MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Sum,
    MeanStack,
    NarrowRows { start: usize },
    TransposeLast2,
    Reshape,
    Conv1d { stride: usize, padding: usize },
    MaxPool1d { argmax: Vec<usize> },
    BatchNormTrain { xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { inv_std: Vec<f64>, mean: Vec<f64> },
    LeakyRelu { slope: f64 },
    Linear,
    Gru(Box<GruTape>),
    SoftmaxCce { probs: Vec<f64>, labels: Vec<usize> },
    SoftCrossEntropy { probs: Vec<f64>, target: Vec<f64> },
    CosineRows { dots: Vec<f64>, norms_a: Vec<f64>, norms_b: Vec<f64> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Sum => "sum",
            Op::MeanStack => "mean_stack",
            Op::NarrowRows { .. } => "narrow_rows",
            Op::TransposeLast2 => "transpose_last2",
            Op::Reshape => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "maxpool1d",
            Op::BatchNormTrain { .. } => "batchnorm1d_train",
            Op::BatchNormEval { .. } => "batchnorm1d_eval",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Linear => "linear",
            Op::Gru(_) => "gru",
            Op::SoftmaxCce { .. } => "softmax_cce",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::CosineRows { .. } => "cosine_rows",
        }
    }

    /// Gradients of the inputs given the gradient of the output.
    pub(crate) fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let wants = |i: usize| inputs[i].requires_grad();
        match self {
            Op::Add => vec![wants(0).then(|| g.to_vec()), wants(1).then(|| g.to_vec())],
            Op::Sub => vec![
                wants(0).then(|| g.to_vec()),
                wants(1).then(|| g.iter().map(|v| -v).collect()),
            ],
            Op::Mul => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                vec![
                    wants(0).then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                    wants(1).then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::MeanStack => {
                let k = inputs.len() as f64;
                let shared: Vec<f64> = g.iter().map(|v| v / k).collect();
                inputs
                    .iter()
                    .map(|t| t.requires_grad().then(|| shared.clone()))
                    .collect()
            }
            Op::NarrowRows { start } => {
                let width: usize = inputs[0].shape()[1..].iter().product();
                let mut dx = vec![0.0; inputs[0].numel()];
                dx[start * width..start * width + g.len()].copy_from_slice(g);
                vec![Some(dx)]
            }
            Op::TransposeLast2 => {
                let s = inputs[0].shape();
                vec![Some(transpose_last2_raw(g, s[0], out.shape()[1], out.shape()[2]))]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Conv1d { stride, padding } => conv1d_backward(inputs, g, *stride, *padding),
            Op::MaxPool1d { argmax } => {
                let mut dx = vec![0.0; inputs[0].numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                vec![Some(dx)]
            }
            Op::BatchNormTrain { xhat, inv_std } => batchnorm_train_backward(inputs, g, xhat, inv_std),
            Op::BatchNormEval { inv_std, mean } => batchnorm_eval_backward(inputs, g, inv_std, mean),
            Op::LeakyRelu { slope } => {
                let x = inputs[0].data();
                vec![Some(
                    x.iter()
                        .zip(g)
                        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
                        .collect(),
                )]
            }
            Op::Linear => linear_backward(inputs, g),
            Op::Gru(tape) => gru::backward(inputs, tape, g),
            Op::SoftmaxCce { probs, labels } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    dx[row * classes + label] -= scale;
                }
                vec![Some(dx)]
            }
            Op::SoftCrossEntropy { probs, target } => {
                let classes = inputs[0].shape()[1];
                let mut dx = vec![0.0; probs.len()];
                for ((d, p), t) in dx
                    .chunks_mut(classes)
                    .zip(probs.chunks(classes))
                    .zip(target.chunks(classes))
                {
                    let mass: f64 = t.iter().sum();
                    for i in 0..classes {
                        d[i] = g[0] * (p[i] * mass - t[i]);
                    }
                }
                vec![Some(dx)]
            }
            Op::CosineRows { dots, norms_a, norms_b } => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                let width = inputs[0].shape()[1];
                let mut da = wants(0).then(|| vec![0.0; a.len()]);
                let mut db = wants(1).then(|| vec![0.0; b.len()]);
                for row in 0..dots.len() {
                    let (na, nb) = (norms_a[row], norms_b[row]);
                    let cos = dots[row] / (na * nb);
                    let ar = &a[row * width..(row + 1) * width];
                    let br = &b[row * width..(row + 1) * width];
                    if let Some(da) = da.as_mut() {
                        for i in 0..width {
                            da[row * width + i] = g[row] * (br[i] / (na * nb) - cos * ar[i] / (na * na));
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for i in 0..width {
                            db[row * width + i] = g[row] * (ar[i] / (na * nb) - cos * br[i] / (nb * nb));
                        }
                    }
                }
                vec![da, db]
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = zip_with(a, b, |x, y| x + y);
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Add, vec![a.clone(), b.clone()]))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = zip_with(a, b, |x, y| x - y);
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Sub, vec![a.clone(), b.clone()]))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = zip_with(a, b, |x, y| x * y);
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Mul, vec![a.clone(), b.clone()]))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|v| v * c).collect();
    Tensor::from_op(data, a.shape().to_vec(), Op::Scale(c), vec![a.clone()])
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|v| v + c).collect();
    Tensor::from_op(data, a.shape().to_vec(), Op::AddScalar, vec![a.clone()])
}

/// Sum of all elements as a scalar.
pub fn sum(a: &Tensor) -> Tensor {
    let total = a.data().iter().sum();
    Tensor::from_op(vec![total], Vec::new(), Op::Sum, vec![a.clone()])
}

/// Element-wise arithmetic mean of equally shaped tensors.
pub fn mean_stack(items: &[Tensor]) -> Result<Tensor> {
    let Some(first) = items.first() else {
        return Err(Error::InvalidInput("mean of an empty list".into()));
    };
    for t in &items[1..] {
        same_shape(first, t, "mean_stack")?;
    }
    let k = items.len() as f64;
    let mut acc = vec![0.0; first.numel()];
    for t in items {
        acc.iter_mut().zip(t.data().iter()).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(Tensor::from_op(acc, first.shape().to_vec(), Op::MeanStack, items.to_vec()))
}

/// Rows `start..start + len` along the leading axis.
pub fn narrow_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let Some((&rows, rest)) = a.shape().split_first() else {
        return Err(Error::dim("narrow_rows on a scalar"));
    };
    if len == 0 || start + len > rows {
        return Err(Error::dim(format!(
            "rows {start}..{} out of range for {rows}",
            start + len
        )));
    }
    let width: usize = rest.iter().product();
    let data = a.data()[start * width..(start + len) * width].to_vec();
    let mut shape = a.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::from_op(data, shape, Op::NarrowRows { start }, vec![a.clone()]))
}

/// Same values, new shape.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", a.shape())));
    }
    Ok(Tensor::from_op(a.to_vec(), shape.to_vec(), Op::Reshape, vec![a.clone()]))
}

fn transpose_last2_raw(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// `[batch, x, y] -> [batch, y, x]`.
pub fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    let &[batch, rows, cols] = a.shape() else {
        return Err(Error::dim(format!("transpose_last2 needs rank 3, got {:?}", a.shape())));
    };
    let data = transpose_last2_raw(&a.data(), batch, rows, cols);
    Ok(Tensor::from_op(data, vec![batch, cols, rows], Op::TransposeLast2, vec![a.clone()]))
}

pub fn conv1d_output_len(length: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = length + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 1-D cross-correlation without bias.
///
/// `input: [batch, c_in, length]`, `kernel: [c_out, c_in, k]`.
pub fn conv1d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let &[batch, c_in, length] = input.shape() else {
        return Err(Error::dim(format!("conv1d input must be rank 3, got {:?}", input.shape())));
    };
    let &[c_out, k_in, k] = kernel.shape() else {
        return Err(Error::dim(format!("conv1d kernel must be rank 3, got {:?}", kernel.shape())));
    };
    if k_in != c_in {
        return Err(Error::dim(format!(
            "conv1d: input has {c_in} channels, kernel expects {k_in}"
        )));
    }
    let out_len = conv1d_output_len(length, k, stride, padding).ok_or_else(|| {
        Error::dim(format!(
            "conv1d: kernel {k} stride {stride} padding {padding} invalid for length {length}"
        ))
    })?;

    let x = input.data();
    let w = kernel.data();
    let mut y = vec![0.0; batch * c_out * out_len];
    for b in 0..batch {
        for co in 0..c_out {
            let out_row = &mut y[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
            for ci in 0..c_in {
                let in_row = &x[(b * c_in + ci) * length..(b * c_in + ci + 1) * length];
                for j in 0..k {
                    let wv = w[(co * c_in + ci) * k + j];
                    let (t0, t1) = valid_taps(j, length, out_len, stride, padding);
                    if t0 >= t1 {
                        continue;
                    }
                    if stride == 1 {
                        let src = &in_row[t0 + j - padding..t1 + j - padding];
                        for (o, s) in out_row[t0..t1].iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    } else {
                        for t in t0..t1 {
                            out_row[t] += wv * in_row[t * stride + j - padding];
                        }
                    }
                }
            }
        }
    }
    drop((x, w));
    Ok(Tensor::from_op(
        y,
        vec![batch, c_out, out_len],
        Op::Conv1d { stride, padding },
        vec![input.clone(), kernel.clone()],
    ))
}

/// Output positions `t0..t1` for which tap `j` reads inside the unpadded input.
fn valid_taps(j: usize, length: usize, out_len: usize, stride: usize, padding: usize) -> (usize, usize) {
    // need 0 <= t*stride + j - padding < length
    let t0 = if j >= padding { 0 } else { (padding - j).div_ceil(stride) };
    let limit = length + padding; // t*stride + j < limit
    let t1 = if limit > j { ((limit - j - 1) / stride + 1).min(out_len) } else { 0 };
    (t0.min(t1), t1)
}

fn conv1d_backward(inputs: &[Tensor], g: &[f64], stride: usize, padding: usize) -> Vec<Option<Vec<f64>>> {
    let (input, kernel) = (&inputs[0], &inputs[1]);
    let (batch, c_in, length) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (kernel.shape()[0], kernel.shape()[2]);
    let out_len = g.len() / (batch * c_out);
    let x = input.data();
    let w = kernel.data();

    let mut dx = input.requires_grad().then(|| vec![0.0; x.len()]);
    let mut dw = kernel.requires_grad().then(|| vec![0.0; w.len()]);
    for b in 0..batch {
        for co in 0..c_out {
            let g_row = &g[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
            for ci in 0..c_in {
                let in_off = (b * c_in + ci) * length;
                for j in 0..k {
                    let widx = (co * c_in + ci) * k + j;
                    let (t0, t1) = valid_taps(j, length, out_len, stride, padding);
                    if t0 >= t1 {
                        continue;
                    }
                    if let Some(dw) = dw.as_mut() {
                        let mut acc = 0.0;
                        if stride == 1 {
                            let src = &x[in_off + t0 + j - padding..in_off + t1 + j - padding];
                            for (gv, s) in g_row[t0..t1].iter().zip(src) {
                                acc += gv * s;
                            }
                        } else {
                            for t in t0..t1 {
                                acc += g_row[t] * x[in_off + t * stride + j - padding];
                            }
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w[widx];
                        if stride == 1 {
                            let dst = &mut dx[in_off + t0 + j - padding..in_off + t1 + j - padding];
                            for (d, gv) in dst.iter_mut().zip(&g_row[t0..t1]) {
                                *d += wv * gv;
                            }
                        } else {
                            for t in t0..t1 {
                                dx[in_off + t * stride + j - padding] += wv * g_row[t];
                            }
                        }
                    }
                }
            }
        }
    }
    vec![dx, dw]
}

/// Non-overlapping max over windows of the last axis. Ties route to the
/// lowest index.
pub fn maxpool1d(input: &Tensor, window: usize) -> Result<Tensor> {
    let Some(&length) = input.shape().last() else {
        return Err(Error::dim("maxpool1d on a scalar"));
    };
    if window == 0 || length % window != 0 {
        return Err(Error::dim(format!(
            "maxpool1d: length {length} not divisible by window {window}"
        )));
    }
    let x = input.data();
    let n_out = x.len() / window;
    let mut y = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for (w_idx, chunk) in x.chunks_exact(window).enumerate() {
        let mut best = 0;
        for i in 1..window {
            if chunk[i] > chunk[best] {
                best = i;
            }
        }
        y.push(chunk[best]);
        argmax.push(w_idx * window + best);
    }
    drop(x);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = length / window;
    Ok(Tensor::from_op(y, shape, Op::MaxPool1d { argmax }, vec![input.clone()]))
}

/// Batch normalisation over `[batch, channels, length]`, per channel.
///
/// In train mode the batch statistics normalise the input and are folded
/// into `stats`. In eval mode `stats` must already be populated.
pub fn batchnorm1d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut Option<RunningStats>,
    mode: Mode,
) -> Result<Tensor> {
    let &[batch, channels, length] = input.shape() else {
        return Err(Error::dim(format!("batchnorm1d input must be rank 3, got {:?}", input.shape())));
    };
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::dim(format!(
            "batchnorm1d: gamma {:?} / beta {:?} vs {channels} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let x = input.data();
    let gm = gamma.data();
    let bt = beta.data();
    let mut y = vec![0.0; x.len()];
    let count = batch * length;

    match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::dim("batchnorm1d train mode needs batch*length >= 2"));
            }
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let row = &x[(b * channels + c) * length..(b * channels + c + 1) * length];
                    mean[c] += row.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for b in 0..batch {
                for c in 0..channels {
                    let row = &x[(b * channels + c) * length..(b * channels + c + 1) * length];
                    var[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; x.len()];
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * length;
                    for i in off..off + length {
                        xhat[i] = (x[i] - mean[c]) * inv_std[c];
                        y[i] = gm[c] * xhat[i] + bt[c];
                    }
                }
            }
            match stats.as_mut() {
                Some(s) => {
                    for c in 0..channels {
                        s.mean[c] = BN_MOMENTUM * s.mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                        s.var[c] = BN_MOMENTUM * s.var[c] + (1.0 - BN_MOMENTUM) * var[c];
                    }
                }
                None => *stats = Some(RunningStats { mean, var }),
            }
            drop((x, gm, bt));
            Ok(Tensor::from_op(
                y,
                input.shape().to_vec(),
                Op::BatchNormTrain { xhat, inv_std },
                vec![input.clone(), gamma.clone(), beta.clone()],
            ))
        }
        Mode::Eval => {
            let Some(s) = stats.as_ref() else {
                return Err(Error::Numeric(
                    "batchnorm1d eval mode before any running statistics exist".into(),
                ));
            };
            if s.mean.len() != channels {
                return Err(Error::dim("running statistics channel count mismatch"));
            }
            let inv_std: Vec<f64> = s.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * length;
                    for i in off..off + length {
                        y[i] = gm[c] * (x[i] - s.mean[c]) * inv_std[c] + bt[c];
                    }
                }
            }
            let mean = s.mean.clone();
            drop((x, gm, bt));
            Ok(Tensor::from_op(
                y,
                input.shape().to_vec(),
                Op::BatchNormEval { inv_std, mean },
                vec![input.clone(), gamma.clone(), beta.clone()],
            ))
        }
    }
}

fn batchnorm_train_backward(inputs: &[Tensor], g: &[f64], xhat: &[f64], inv_std: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (batch, channels, length) = (inputs[0].shape()[0], inputs[0].shape()[1], inputs[0].shape()[2]);
    let gamma = inputs[1].data();
    let n = (batch * length) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * length;
            for i in off..off + length {
                dgamma[c] += g[i] * xhat[i];
                dbeta[c] += g[i];
            }
        }
    }
    let dx = inputs[0].requires_grad().then(|| {
        let mut dx = vec![0.0; g.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * length;
                // dxhat = g * gamma; sums over the channel are gamma * dbeta and gamma * dgamma.
                let k = gamma[c] * inv_std[c] / n;
                for i in off..off + length {
                    dx[i] = k * (n * g[i] - dbeta[c] - xhat[i] * dgamma[c]);
                }
            }
        }
        dx
    });
    vec![
        dx,
        inputs[1].requires_grad().then_some(dgamma),
        inputs[2].requires_grad().then_some(dbeta),
    ]
}

fn batchnorm_eval_backward(inputs: &[Tensor], g: &[f64], inv_std: &[f64], mean: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (batch, channels, length) = (inputs[0].shape()[0], inputs[0].shape()[1], inputs[0].shape()[2]);
    let x = inputs[0].data();
    let gamma = inputs[1].data();
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * length;
            for i in off..off + length {
                dx[i] = g[i] * gamma[c] * inv_std[c];
                dgamma[c] += g[i] * (x[i] - mean[c]) * inv_std[c];
                dbeta[c] += g[i];
            }
        }
    }
    vec![
        inputs[0].requires_grad().then_some(dx),
        inputs[1].requires_grad().then_some(dgamma),
        inputs[2].requires_grad().then_some(dbeta),
    ]
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_op(data, input.shape().to_vec(), Op::LeakyRelu { slope }, vec![input.clone()])
}

/// `input: [batch, in] · weightᵀ + bias`, `weight: [out, in]`, `bias: [out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[batch, n_in] = input.shape() else {
        return Err(Error::dim(format!("linear input must be rank 2, got {:?}", input.shape())));
    };
    let &[n_out, w_in] = weight.shape() else {
        return Err(Error::dim(format!("linear weight must be rank 2, got {:?}", weight.shape())));
    };
    if w_in != n_in || bias.shape() != [n_out] {
        return Err(Error::dim(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let bv = bias.data();
    let mut y = vec![0.0; batch * n_out];
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            y[b * n_out + o] = bv[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    drop((x, w, bv));
    Ok(Tensor::from_op(
        y,
        vec![batch, n_out],
        Op::Linear,
        vec![input.clone(), weight.clone(), bias.clone()],
    ))
}

fn linear_backward(inputs: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (batch, n_in) = (inputs[0].shape()[0], inputs[0].shape()[1]);
    let n_out = inputs[1].shape()[0];
    let x = inputs[0].data();
    let w = inputs[1].data();
    let dx = inputs[0].requires_grad().then(|| {
        let mut dx = vec![0.0; batch * n_in];
        for b in 0..batch {
            for o in 0..n_out {
                let gv = g[b * n_out + o];
                let wr = &w[o * n_in..(o + 1) * n_in];
                for (d, wv) in dx[b * n_in..(b + 1) * n_in].iter_mut().zip(wr) {
                    *d += gv * wv;
                }
            }
        }
        dx
    });
    let dw = inputs[1].requires_grad().then(|| {
        let mut dw = vec![0.0; n_out * n_in];
        for b in 0..batch {
            let xr = &x[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let gv = g[b * n_out + o];
                for (d, xv) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                    *d += gv * xv;
                }
            }
        }
        dw
    });
    let db = inputs[2].requires_grad().then(|| {
        let mut db = vec![0.0; n_out];
        for row in g.chunks(n_out) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        db
    });
    vec![dx, dw, db]
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for (p, row) in probs.chunks_mut(classes).zip(logits.chunks(classes)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (pi, &l) in p.iter_mut().zip(row) {
            *pi = (l - max).exp();
            total += *pi;
        }
        p.iter_mut().for_each(|pi| *pi /= total);
    }
    probs
}

fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    row.iter().map(move |l| l - lse)
}

/// Row-wise softmax, no graph.
pub fn softmax(logits: &Tensor) -> Result<Vec<f64>> {
    let &[_, classes] = logits.shape() else {
        return Err(Error::dim(format!("softmax needs rank 2, got {:?}", logits.shape())));
    };
    Ok(softmax_rows(&logits.data(), classes))
}

/// Batch-mean categorical cross-entropy of `logits: [batch, classes]`.
pub fn softmax_cce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::dim(format!("softmax_cce needs rank 2, got {:?}", logits.shape())));
    };
    if labels.len() != batch {
        return Err(Error::dim(format!("{} labels for batch {batch}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {classes} classes")));
    }
    let x = logits.data();
    let mut loss = 0.0;
    for (row, &label) in x.chunks(classes).zip(labels) {
        loss -= log_softmax_row(row).nth(label).unwrap();
    }
    loss /= batch as f64;
    let probs = softmax_rows(&x, classes);
    drop(x);
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        Op::SoftmaxCce {
            probs,
            labels: labels.to_vec(),
        },
        vec![logits.clone()],
    ))
}

/// `-Σ_rows Σ_i target[i] · log softmax(logits)[i]`, summed over the batch.
/// `target` is treated as a constant.
pub fn soft_cross_entropy(logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    let &[_, classes] = logits.shape() else {
        return Err(Error::dim(format!("soft_cross_entropy needs rank 2, got {:?}", logits.shape())));
    };
    if target.len() != logits.numel() {
        return Err(Error::dim(format!(
            "soft targets hold {} values, logits {}",
            target.len(),
            logits.numel()
        )));
    }
    let x = logits.data();
    let mut loss = 0.0;
    for (row, t) in x.chunks(classes).zip(target.chunks(classes)) {
        for (lp, ti) in log_softmax_row(row).zip(t) {
            loss -= ti * lp;
        }
    }
    let probs = softmax_rows(&x, classes);
    drop(x);
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        Op::SoftCrossEntropy {
            probs,
            target: target.to_vec(),
        },
        vec![logits.clone()],
    ))
}

/// Row-wise cosine similarity of two `[batch, dim]` tensors, giving `[batch]`.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "cosine_rows")?;
    let &[batch, width] = a.shape() else {
        return Err(Error::dim(format!("cosine_rows needs rank 2, got {:?}", a.shape())));
    };
    let (ad, bd) = (a.data(), b.data());
    let mut dots = Vec::with_capacity(batch);
    let mut norms_a = Vec::with_capacity(batch);
    let mut norms_b = Vec::with_capacity(batch);
    let mut cos = Vec::with_capacity(batch);
    for row in 0..batch {
        let ar = &ad[row * width..(row + 1) * width];
        let br = &bd[row * width..(row + 1) * width];
        let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numeric(format!("cosine similarity of a zero-norm vector (row {row})")));
        }
        let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        cos.push((dot / (na * nb)).clamp(-1.0, 1.0));
        dots.push(dot);
        norms_a.push(na);
        norms_b.push(nb);
    }
    drop((ad, bd));
    Ok(Tensor::from_op(
        cos,
        vec![batch],
        Op::CosineRows { dots, norms_a, norms_b },
        vec![a.clone(), b.clone()],
    ))
}

/// Cosine similarity of two vectors, as a scalar tensor.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "cosine_similarity")?;
    if a.shape().len() != 1 {
        return Err(Error::dim(format!("cosine_similarity needs vectors, got {:?}", a.shape())));
    }
    let n = a.numel();
    let c = cosine_rows(&reshape(a, &[1, n])?, &reshape(b, &[1, n])?)?;
    Ok(sum(&c))
}
