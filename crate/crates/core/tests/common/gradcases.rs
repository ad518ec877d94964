//! Gradient-check instances shared by the gradient and acceptance suites.
//!
//! Each case builds one random instance from a seed and returns the largest
//! relative error between autodiff and central finite differences.

use segagg_core::model::{BlockGroup, Model, ModelConfig};
use segagg_core::numerics::{self as nx, GruParams, Mode, Tensor};
use segagg_core::segmentation::SegmentSpec;
use segagg_core::training::{self, Regime};

use super::*;

pub const INSTANCES: u64 = 20;

pub type Case = (&'static str, fn(u64) -> f64);

fn conv1d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let stride = 1 + (seed as usize % 3);
    let padding = seed as usize % 2;
    let x = param(&mut r, &[2, 3, 9], 1.0);
    let k = param(&mut r, &[4, 3, 3], 1.0);
    let len = nx::conv1d_output_len(9, 3, stride, padding).unwrap();
    let w = constant(&mut r, &[2, 4, len], 1.0);
    gradient_error(&[x.clone(), k.clone()], &|| project(&nx::conv1d(&x, &k, stride, padding).unwrap(), &w))
}

fn maxpool1d(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let x = param(&mut r, &[2, 2, 9], 1.0);
    let w = constant(&mut r, &[2, 2, 3], 1.0);
    gradient_error(&[x.clone()], &|| project(&nx::maxpool1d(&x, 3).unwrap(), &w))
}

fn batchnorm(seed: u64, mode: Mode) -> f64 {
    let mut r = rng(200 + seed);
    let x = param(&mut r, &[3, 2, 4], 1.0);
    let gamma = param(&mut r, &[2], 1.0);
    let beta = param(&mut r, &[2], 1.0);
    let w = constant(&mut r, &[3, 2, 4], 1.0);
    let running = Some(nx::RunningStats {
        mean: vec![0.1, -0.2],
        var: vec![0.5, 1.5],
    });
    gradient_error(&[x.clone(), gamma.clone(), beta.clone()], &|| {
        let mut stats = running.clone();
        project(&nx::batchnorm1d(&x, &gamma, &beta, &mut stats, mode).unwrap(), &w)
    })
}

fn batchnorm1d_train(seed: u64) -> f64 {
    batchnorm(seed, Mode::Train)
}

fn batchnorm1d_eval(seed: u64) -> f64 {
    batchnorm(seed, Mode::Eval)
}

fn leaky_relu(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let x = param(&mut r, &[2, 7], 1.0);
    let w = constant(&mut r, &[2, 7], 1.0);
    gradient_error(&[x.clone()], &|| project(&nx::leaky_relu(&x, 0.3), &w))
}

fn gru(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let (batch, frames, feat, hidden) = (2, 3, 3, 4);
    let x = param(&mut r, &[batch, frames, feat], 1.0);
    let p = GruParams {
        w_ih: param(&mut r, &[3 * hidden, feat], 0.7),
        w_hh: param(&mut r, &[3 * hidden, hidden], 0.7),
        b_ih: param(&mut r, &[3 * hidden], 0.5),
        b_hh: param(&mut r, &[3 * hidden], 0.5),
    };
    let h0 = param(&mut r, &[batch, hidden], 0.5);
    let w = constant(&mut r, &[batch, hidden], 1.0);
    let leaves = [x.clone(), p.w_ih.clone(), p.w_hh.clone(), p.b_ih.clone(), p.b_hh.clone(), h0.clone()];
    gradient_error(&leaves, &|| project(&nx::gru_forward(&x, &p, &h0).unwrap(), &w))
}

fn linear(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let x = param(&mut r, &[3, 4], 1.0);
    let wt = param(&mut r, &[5, 4], 1.0);
    let b = param(&mut r, &[5], 1.0);
    let w = constant(&mut r, &[3, 5], 1.0);
    gradient_error(&[x.clone(), wt.clone(), b.clone()], &|| project(&nx::linear(&x, &wt, &b).unwrap(), &w))
}

fn softmax_cce(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let x = param(&mut r, &[4, 5], 2.0);
    let labels = [seed as usize % 5, 1, 4, 0];
    gradient_error(&[x.clone()], &|| nx::softmax_cce(&x, &labels).unwrap())
}

fn soft_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(700 + seed);
    let x = param(&mut r, &[3, 4], 2.0);
    let target = nx::softmax(&constant(&mut r, &[3, 4], 2.0)).unwrap();
    gradient_error(&[x.clone()], &|| nx::soft_cross_entropy(&x, &target).unwrap())
}

fn cosine_similarity(seed: u64) -> f64 {
    let mut r = rng(800 + seed);
    let a = param(&mut r, &[6], 1.0);
    let b = param(&mut r, &[6], 1.0);
    gradient_error(&[a.clone(), b.clone()], &|| nx::cosine_similarity(&a, &b).unwrap())
}

fn cosine_rows(seed: u64) -> f64 {
    let mut r = rng(900 + seed);
    let a = param(&mut r, &[3, 5], 1.0);
    let b = param(&mut r, &[3, 5], 1.0);
    let w = constant(&mut r, &[3], 1.0);
    gradient_error(&[a.clone(), b.clone()], &|| project(&nx::cosine_rows(&a, &b).unwrap(), &w))
}

fn structural(seed: u64) -> f64 {
    let mut r = rng(1000 + seed);
    let a = param(&mut r, &[4, 2, 3], 1.0);
    let b = param(&mut r, &[4, 2, 3], 1.0);
    let w = constant(&mut r, &[2, 3, 2], 1.0);
    gradient_error(&[a.clone(), b.clone()], &|| {
        let m = nx::mean_stack(&[a.clone(), b.clone(), a.clone()]).unwrap();
        let d = nx::sub(&nx::mul(&m, &b).unwrap(), &nx::scale(&a, 0.5)).unwrap();
        let d = nx::add_scalar(&nx::add(&d, &a).unwrap(), 0.25);
        let t = nx::transpose_last2(&nx::narrow_rows(&d, 1, 2).unwrap()).unwrap();
        project(&t, &w)
    })
}

fn composite(seed: u64) -> f64 {
    let mut r = rng(1100 + seed);
    let x = constant(&mut r, &[2, 1, 27], 1.0);
    let k1 = param(&mut r, &[3, 1, 3], 0.8);
    let gamma = param(&mut r, &[3], 1.0);
    let beta = param(&mut r, &[3], 0.3);
    let k2 = param(&mut r, &[3, 3, 3], 0.5);
    let p = GruParams {
        w_ih: param(&mut r, &[6, 3], 0.5),
        w_hh: param(&mut r, &[6, 2], 0.5),
        b_ih: param(&mut r, &[6], 0.3),
        b_hh: param(&mut r, &[6], 0.3),
    };
    let fw = param(&mut r, &[4, 2], 0.8);
    let fb = param(&mut r, &[4], 0.3);
    let leaves = [
        k1.clone(), gamma.clone(), beta.clone(), k2.clone(),
        p.w_ih.clone(), p.w_hh.clone(), p.b_ih.clone(), p.b_hh.clone(),
        fw.clone(), fb.clone(),
    ];
    gradient_error(&leaves, &|| {
        let h = nx::conv1d(&x, &k1, 3, 0).unwrap();
        let mut stats = None;
        let a = nx::leaky_relu(&nx::batchnorm1d(&h, &gamma, &beta, &mut stats, Mode::Train).unwrap(), 0.3);
        let c = nx::add(&nx::conv1d(&a, &k2, 1, 1).unwrap(), &h).unwrap();
        let pooled = nx::maxpool1d(&c, 3).unwrap();
        let seq = nx::transpose_last2(&pooled).unwrap();
        let hid = nx::gru_forward(&seq, &p, &Tensor::zeros(&[2, 2])).unwrap();
        let logits = nx::linear(&hid, &fw, &fb).unwrap();
        nx::softmax_cce(&logits, &[1, 3]).unwrap()
    })
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_length: 27,
        first_conv_channels: 2,
        block_groups: vec![BlockGroup { blocks: 1, channels: 3 }],
        gru_hidden: 3,
        embedding_dim: 3,
        num_speakers: 4,
        leaky_slope: 0.3,
        segment_heads: 4,
    }
}

fn crops(r: &mut rand_chacha::ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform(r, len, 1.0)).collect()
}

fn params_of(model: &Model) -> Vec<Tensor> {
    model.parameters().into_iter().map(|(_, t)| t).collect()
}

/// Aggregate plus weighted per-segment cross-entropy (W = 0.2) through a full model.
fn segment_aggregation_loss(seed: u64) -> f64 {
    let mut r = rng(1200 + seed);
    let model = Model::build(&tiny_model_config(), seed).unwrap();
    let x = crops(&mut r, 3, 27);
    let labels = [0, 3, 1];
    let spec = SegmentSpec::with_default_overlap(9).unwrap();
    gradient_error(&params_of(&model), &|| {
        training::total_loss(Regime::Sa, &model, None, &x, &labels, Some(&spec), 0.2).unwrap().0
    })
}

/// Distillation loss (1 - cos plus soft labels) of a segmenting student against a frozen teacher.
fn teacher_student_loss(seed: u64) -> f64 {
    let mut r = rng(1300 + seed);
    let cfg = tiny_model_config();
    let teacher = Model::build(&cfg, 1000 + seed).unwrap();
    teacher.embed_waveforms(&crops(&mut r, 4, 27), Mode::Train).unwrap();
    let teacher = teacher.freeze();
    let student = Model::build(&cfg, seed).unwrap();
    let x = crops(&mut r, 2, 27);
    let spec = SegmentSpec::with_default_overlap(9).unwrap();
    gradient_error(&params_of(&student), &|| training::loss_ts(&teacher, &student, &x, Some(&spec)).unwrap())
}

pub const OPS: [Case; 13] = [
    ("conv1d", conv1d),
    ("maxpool1d", maxpool1d),
    ("batchnorm1d (train)", batchnorm1d_train),
    ("batchnorm1d (eval)", batchnorm1d_eval),
    ("leaky_relu", leaky_relu),
    ("gru", gru),
    ("linear", linear),
    ("softmax_cce", softmax_cce),
    ("soft_cross_entropy", soft_cross_entropy),
    ("cosine_similarity", cosine_similarity),
    ("cosine_rows", cosine_rows),
    ("structural ops", structural),
    ("composite network", composite),
];

pub const LOSSES: [Case; 2] = [
    ("segment aggregation loss, W = 0.2", segment_aggregation_loss),
    ("teacher-student loss", teacher_student_loss),
];

/// Largest error over all instances of a case.
pub fn worst(case: fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(case).fold(0.0, f64::max)
}
