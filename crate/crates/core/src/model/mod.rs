//! Raw-waveform speaker embedding network.
//!
//! Layout, for a `[batch, 1, T]` input:
//!
//! ```text
//! conv(k=3, stride 3) -> BN -> LeakyReLU                       T/3
//! block groups: pre-activation residual blocks + MaxPool(3)    T/3^(1+blocks)
//! GRU over frames, last hidden state
//! FC -> embedding
//! FC -> speaker logits   (aggregate head, plus one head per segment index)
//! ```

mod checkpoint;

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numerics::{self as nx, GruParams, Mode, RunningStats, Tensor};

pub use checkpoint::Checkpoint;

/// Pooling window and first-layer stride.
pub const DOWNSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGroup {
    pub blocks: usize,
    pub channels: usize,
}

impl fmt::Display for BlockGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.blocks, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Training crop length in samples.
    pub input_length: usize,
    pub first_conv_channels: usize,
    pub block_groups: Vec<BlockGroup>,
    pub gru_hidden: usize,
    pub embedding_dim: usize,
    pub num_speakers: usize,
    pub leaky_slope: f64,
    /// Separate output layers for segment embeddings, one per segment index.
    pub segment_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(20)
    }
}

impl ModelConfig {
    /// Scaled-down layout: 3^8 samples, 16/32 channels, 2+4 blocks.
    pub fn desk(num_speakers: usize) -> Self {
        Self {
            input_length: 6561,
            first_conv_channels: 16,
            block_groups: vec![
                BlockGroup { blocks: 2, channels: 16 },
                BlockGroup { blocks: 4, channels: 32 },
            ],
            gru_hidden: 32,
            embedding_dim: 32,
            num_speakers,
            leaky_slope: 0.3,
            segment_heads: 4,
        }
    }

    /// Full-size layout: 59049 samples, 128/256 channels, GRU 1024, 6112 speakers.
    pub fn full_scale() -> Self {
        Self {
            input_length: 59049,
            first_conv_channels: 128,
            block_groups: vec![
                BlockGroup { blocks: 2, channels: 128 },
                BlockGroup { blocks: 4, channels: 256 },
            ],
            gru_hidden: 1024,
            embedding_dim: 1024,
            num_speakers: 6112,
            leaky_slope: 0.3,
            segment_heads: 0,
        }
    }

    pub fn num_pools(&self) -> usize {
        self.block_groups.iter().map(|g| g.blocks).sum()
    }

    /// Total temporal downsampling: `3^(1 + pools)`.
    pub fn downsampling_factor(&self) -> usize {
        DOWNSAMPLE.pow(1 + self.num_pools() as u32)
    }

    /// GRU time steps for an input of `length` samples.
    pub fn frames_for(&self, length: usize) -> Result<usize> {
        let factor = self.downsampling_factor();
        if length == 0 || length % factor != 0 {
            return Err(Error::InvalidInput(format!(
                "input length {length} is not a positive multiple of the downsampling factor {factor}"
            )));
        }
        Ok(length / factor)
    }

    pub fn output_channels(&self) -> usize {
        self.block_groups.last().map_or(self.first_conv_channels, |g| g.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let factor = self.downsampling_factor();
        if self.input_length == 0 || self.input_length % factor != 0 {
            return Err(Error::config(format!(
                "model.input_length {} must be a positive multiple of {factor} (3^(1 + {} pools))",
                self.input_length,
                self.num_pools()
            )));
        }
        if self.embedding_dim == 0 || self.gru_hidden == 0 || self.first_conv_channels == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.block_groups.iter().any(|g| g.blocks == 0 || g.channels == 0) {
            return Err(Error::config("block groups need at least one block and one channel"));
        }
        if self.num_speakers < 2 {
            return Err(Error::config("model.num_speakers must be at least 2"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("model.leaky_slope must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("model.input_length", self.input_length);
        kv.insert("model.first_conv_channels", self.first_conv_channels);
        let groups: Vec<String> = self.block_groups.iter().map(ToString::to_string).collect();
        kv.insert("model.block_groups", groups.join(","));
        kv.insert("model.gru_hidden", self.gru_hidden);
        kv.insert("model.embedding_dim", self.embedding_dim);
        kv.insert("model.num_speakers", self.num_speakers);
        kv.insert("model.leaky_slope", self.leaky_slope);
        kv.insert("model.segment_heads", self.segment_heads);
        kv
    }

    /// Reads `model.*` keys over `self`; absent keys keep their current value.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("model.input_length", &mut self.input_length)?;
        kv.read_into("model.first_conv_channels", &mut self.first_conv_channels)?;
        if let Some(groups) = kv.get("model.block_groups") {
            self.block_groups = parse_groups(groups)?;
        }
        kv.read_into("model.gru_hidden", &mut self.gru_hidden)?;
        kv.read_into("model.embedding_dim", &mut self.embedding_dim)?;
        kv.read_into("model.num_speakers", &mut self.num_speakers)?;
        kv.read_into("model.leaky_slope", &mut self.leaky_slope)?;
        kv.read_into("model.segment_heads", &mut self.segment_heads)?;
        Ok(())
    }

    pub const KEYS: [&'static str; 8] = [
        "model.input_length",
        "model.first_conv_channels",
        "model.block_groups",
        "model.gru_hidden",
        "model.embedding_dim",
        "model.num_speakers",
        "model.leaky_slope",
        "model.segment_heads",
    ];
}

fn parse_groups(text: &str) -> Result<Vec<BlockGroup>> {
    text.split(',')
        .map(|item| {
            let (blocks, channels) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::config(format!("block group `{item}` is not `<blocks>x<channels>`")))?;
            let num = |s: &str| {
                usize::from_str(s.trim()).map_err(|e| Error::config(format!("block group `{item}`: {e}")))
            };
            Ok(BlockGroup {
                blocks: num(blocks)?,
                channels: num(channels)?,
            })
        })
        .collect()
}

/// Which output layer to apply to an embedding batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Aggregate,
    Segment(usize),
}

struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    stats: RefCell<Option<RunningStats>>,
}

impl BatchNorm {
    fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::parameter(vec![1.0; channels], &[channels])?,
            beta: Tensor::parameter(vec![0.0; channels], &[channels])?,
            stats: RefCell::new(None),
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        nx::batchnorm1d(x, &self.gamma, &self.beta, &mut self.stats.borrow_mut(), mode)
    }
}

struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nx::linear(x, &self.weight, &self.bias)
    }
}

struct ResBlock {
    /// Absent on the very first block, whose input is already normalised.
    pre_norm: Option<BatchNorm>,
    conv1: Tensor,
    mid_norm: BatchNorm,
    conv2: Tensor,
    /// 1x1 convolution when the channel count changes.
    projection: Option<Tensor>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, mode: Mode, slope: f64) -> Result<Tensor> {
        let h = match &self.pre_norm {
            Some(bn) => nx::leaky_relu(&bn.forward(x, mode)?, slope),
            None => x.clone(),
        };
        let h = nx::conv1d(&h, &self.conv1, 1, 1)?;
        let h = nx::leaky_relu(&self.mid_norm.forward(&h, mode)?, slope);
        let h = nx::conv1d(&h, &self.conv2, 1, 1)?;
        let skip = match &self.projection {
            Some(k) => nx::conv1d(x, k, 1, 0)?,
            None => x.clone(),
        };
        nx::maxpool1d(&nx::add(&h, &skip)?, DOWNSAMPLE)
    }
}

/// A parameterised embedding network with its output heads.
pub struct Model {
    config: ModelConfig,
    stem_conv: Tensor,
    stem_norm: BatchNorm,
    blocks: Vec<ResBlock>,
    gru: GruParams,
    embedding: Dense,
    aggregate_head: Dense,
    segment_heads: Vec<Dense>,
    frozen: bool,
}

struct Init(ChaCha8Rng);

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.random_range(-bound..bound)).collect();
        Tensor::parameter(data, shape)
    }

    fn dense(&mut self, n_in: usize, n_out: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.uniform(&[n_out, n_in], n_in)?,
            bias: self.uniform(&[n_out], n_in)?,
        })
    }
}

impl Model {
    /// Deterministic construction: equal `(config, seed)` give bit-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
        let c0 = config.first_conv_channels;
        let stem_conv = init.uniform(&[c0, 1, 3], 3)?;
        let stem_norm = BatchNorm::new(c0)?;

        let mut blocks = Vec::new();
        let mut c_in = c0;
        for group in &config.block_groups {
            for _ in 0..group.blocks {
                let c = group.channels;
                let first = blocks.is_empty();
                blocks.push(ResBlock {
                    pre_norm: if first { None } else { Some(BatchNorm::new(c_in)?) },
                    conv1: init.uniform(&[c, c_in, 3], c_in * 3)?,
                    mid_norm: BatchNorm::new(c)?,
                    conv2: init.uniform(&[c, c, 3], c * 3)?,
                    projection: if c != c_in { Some(init.uniform(&[c, c_in, 1], c_in)?) } else { None },
                });
                c_in = c;
            }
        }

        let h = config.gru_hidden;
        let gru = GruParams {
            w_ih: init.uniform(&[3 * h, c_in], h)?,
            w_hh: init.uniform(&[3 * h, h], h)?,
            b_ih: init.uniform(&[3 * h], h)?,
            b_hh: init.uniform(&[3 * h], h)?,
        };
        let embedding = init.dense(h, config.embedding_dim)?;
        let aggregate_head = init.dense(config.embedding_dim, config.num_speakers)?;
        let segment_heads = (0..config.segment_heads)
            .map(|_| init.dense(config.embedding_dim, config.num_speakers))
            .collect::<Result<_>>()?;

        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_norm,
            blocks,
            gru,
            embedding,
            aggregate_head,
            segment_heads,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops all gradient tracking; batch norm always runs on running statistics.
    pub fn freeze(mut self) -> Self {
        for (_, p) in self.parameters() {
            p.set_requires_grad(false);
        }
        self.frozen = true;
        self
    }

    /// Named trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())), &mut |_, _| {});
        out
    }

    fn visit(&self, param: &mut dyn FnMut(&str, &Tensor), norm: &mut dyn FnMut(&str, &BatchNorm)) {
        let mut bn = |name: &str, b: &BatchNorm, param: &mut dyn FnMut(&str, &Tensor)| {
            param(&format!("{name}.gamma"), &b.gamma);
            param(&format!("{name}.beta"), &b.beta);
            norm(name, b);
        };
        param("stem.conv", &self.stem_conv);
        bn("stem.bn", &self.stem_norm, param);
        for (i, block) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            if let Some(pre) = &block.pre_norm {
                bn(&format!("{p}.pre_bn"), pre, param);
            }
            param(&format!("{p}.conv1"), &block.conv1);
            bn(&format!("{p}.mid_bn"), &block.mid_norm, param);
            param(&format!("{p}.conv2"), &block.conv2);
            if let Some(k) = &block.projection {
                param(&format!("{p}.projection"), k);
            }
        }
        param("gru.w_ih", &self.gru.w_ih);
        param("gru.w_hh", &self.gru.w_hh);
        param("gru.b_ih", &self.gru.b_ih);
        param("gru.b_hh", &self.gru.b_hh);
        param("embedding.weight", &self.embedding.weight);
        param("embedding.bias", &self.embedding.bias);
        param("head.aggregate.weight", &self.aggregate_head.weight);
        param("head.aggregate.bias", &self.aggregate_head.bias);
        for (k, h) in self.segment_heads.iter().enumerate() {
            param(&format!("head.segment{k}.weight"), &h.weight);
            param(&format!("head.segment{k}.bias"), &h.bias);
        }
    }

    /// Batch-norm running statistics as `(name, stats)`, `None` before the
    /// first training batch.
    pub fn running_stats(&self) -> Vec<(String, Option<RunningStats>)> {
        let mut out = Vec::new();
        self.visit(&mut |_, _| {}, &mut |name, b| out.push((name.to_string(), b.stats.borrow().clone())));
        out
    }

    fn set_running_stats(&self, name: &str, stats: RunningStats) -> Result<()> {
        let mut found = false;
        let mut bad = false;
        self.visit(&mut |_, _| {}, &mut |n, b| {
            if n == name {
                found = true;
                if b.gamma.numel() == stats.mean.len() && stats.mean.len() == stats.var.len() {
                    *b.stats.borrow_mut() = Some(stats.clone());
                } else {
                    bad = true;
                }
            }
        });
        if !found || bad {
            return Err(Error::dim(format!("running statistics `{name}` do not fit the model")));
        }
        Ok(())
    }

    /// Copies parameter values and running statistics from a model of the same layout.
    pub fn copy_from(&self, other: &Model) -> Result<()> {
        let mine = self.parameters();
        let theirs = other.parameters();
        if mine.len() != theirs.len() {
            return Err(Error::dim("models differ in parameter count"));
        }
        for ((n1, a), (n2, b)) in mine.iter().zip(&theirs) {
            if n1 != n2 || a.shape() != b.shape() {
                return Err(Error::dim(format!("parameter mismatch: {n1} vs {n2}")));
            }
            a.data_mut().copy_from_slice(&b.data());
        }
        for (name, stats) in other.running_stats() {
            if let Some(s) = stats {
                self.set_running_stats(&name, s)?;
            }
        }
        Ok(())
    }

    /// Embeds a `[batch, 1, length]` waveform batch into `[batch, embedding_dim]`.
    ///
    /// `length` must be a positive multiple of the downsampling factor; the
    /// training crop length is one such value. Frozen models always run in
    /// eval mode and record no graph.
    pub fn forward_embedding(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mode = if self.frozen { Mode::Eval } else { mode };
        let &[batch, 1, length] = input.shape() else {
            return Err(Error::dim(format!("waveform batch must be [batch, 1, length], got {:?}", input.shape())));
        };
        self.config.frames_for(length)?;
        let slope = self.config.leaky_slope;

        let mut h = nx::conv1d(input, &self.stem_conv, DOWNSAMPLE, 0)?;
        h = nx::leaky_relu(&self.stem_norm.forward(&h, mode)?, slope);
        for block in &self.blocks {
            h = block.forward(&h, mode, slope)?;
        }
        let seq = nx::transpose_last2(&h)?;
        let h0 = Tensor::zeros(&[batch, self.config.gru_hidden]);
        let hidden = nx::gru_forward(&seq, &self.gru, &h0)?;
        self.embedding.forward(&hidden)
    }

    /// Convenience wrapper over raw sample rows of equal length.
    pub fn embed_waveforms(&self, waveforms: &[Vec<f64>], mode: Mode) -> Result<Tensor> {
        let rows = Tensor::from_rows(waveforms)?;
        let (b, l) = (rows.shape()[0], rows.shape()[1]);
        self.forward_embedding(&Tensor::new(rows.to_vec(), &[b, 1, l])?, mode)
    }

    /// Speaker logits `[batch, num_speakers]` from an embedding batch.
    pub fn forward_logits(&self, embedding: &Tensor, head: Head) -> Result<Tensor> {
        let layer = match head {
            Head::Aggregate => &self.aggregate_head,
            Head::Segment(k) => self.segment_heads.get(k).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "segment head {k} does not exist ({} configured)",
                    self.segment_heads.len()
                ))
            })?,
        };
        layer.forward(embedding)
    }

    pub fn to_checkpoint(&self, meta: KvMap) -> Checkpoint {
        let mut arrays = Vec::new();
        for (name, t) in self.parameters() {
            arrays.push((name, t.shape().to_vec(), t.to_vec()));
        }
        for (name, stats) in self.running_stats() {
            if let Some(s) = stats {
                let c = s.mean.len();
                arrays.push((format!("{name}.running_mean"), vec![c], s.mean));
                arrays.push((format!("{name}.running_var"), vec![c], s.var));
            }
        }
        Checkpoint {
            config: self.config.clone(),
            meta,
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::build(&ckpt.config, 0)?;
        let lookup = |name: &str| ckpt.arrays.iter().find(|(n, _, _)| n == name);
        for (name, t) in model.parameters() {
            let (_, shape, values) =
                lookup(&name).ok_or_else(|| Error::dim(format!("checkpoint lacks parameter `{name}`")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::dim(format!(
                    "checkpoint parameter `{name}` has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(values);
        }
        for (name, _) in model.running_stats() {
            let mean = lookup(&format!("{name}.running_mean"));
            let var = lookup(&format!("{name}.running_var"));
            if let (Some((_, _, m)), Some((_, _, v))) = (mean, var) {
                model.set_running_stats(
                    &name,
                    RunningStats {
                        mean: m.clone(),
                        var: v.clone(),
                    },
                )?;
            }
        }
        Ok(model)
    }
}
