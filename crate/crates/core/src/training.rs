//! Losses, optimiser, batching and the training loop for the three regimes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{Checkpoint, Head, Model, ModelConfig};
use crate::numerics::{self as nx, Mode, Tensor};
use crate::segmentation::{self, draw_segment_length, SegmentPolicy, SegmentSpec};
use crate::synthdata::mix;

pub const PRE_EMPHASIS: f64 = 0.97;

/// First-order high-pass `y[t] = x[t] - coeff * x[t-1]`.
pub fn pre_emphasize(x: &[f64], coeff: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for (t, &v) in x.iter().enumerate() {
        y.push(if t == 0 { v } else { v - coeff * x[t - 1] });
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Baseline,
    Sa,
    SaTs,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Baseline, Regime::Sa, Regime::SaTs];

    /// Weight of the per-segment terms when none is configured.
    pub fn default_segment_weight(self) -> f64 {
        match self {
            Regime::Baseline => 0.0,
            Regime::Sa => 0.2,
            Regime::SaTs => 1.0,
        }
    }

    pub fn segments(self) -> bool {
        !matches!(self, Regime::Baseline)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Baseline => "baseline",
            Regime::Sa => "sa",
            Regime::SaTs => "sa_ts",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "sa" => Ok(Regime::Sa),
            "sa_ts" => Ok(Regime::SaTs),
            other => Err(format!("unknown regime `{other}` (baseline, sa, sa_ts)")),
        }
    }
}

/// Aggregate cross-entropy plus `w` times the sum of per-segment cross-entropies.
///
/// With `w == 0` the aggregate term is returned as is.
pub fn loss_sa(aggregate_logits: &Tensor, segment_logits: &[Tensor], labels: &[usize], w: f64) -> Result<Tensor> {
    if w < 0.0 {
        return Err(Error::InvalidInput(format!("segment weight {w} is negative")));
    }
    let ce_e = nx::softmax_cce(aggregate_logits, labels)?;
    if w == 0.0 {
        return Ok(ce_e);
    }
    if segment_logits.is_empty() {
        return Err(Error::InvalidInput("segment loss weighted but no segment logits given".into()));
    }
    let mut seg_sum = nx::softmax_cce(&segment_logits[0], labels)?;
    for logits in &segment_logits[1..] {
        seg_sum = nx::add(&seg_sum, &nx::softmax_cce(logits, labels)?)?;
    }
    nx::add(&ce_e, &nx::scale(&seg_sum, w))
}

/// The two distillation terms, both summed over the batch.
pub struct TsTerms {
    /// `sum_j (1 - cos(e_T, e_S))`.
    pub cosine: Tensor,
    /// `-sum_j sum_i P_T log P_S`.
    pub soft: Tensor,
}

impl TsTerms {
    pub fn total(&self) -> Result<Tensor> {
        nx::add(&self.cosine, &self.soft)
    }
}

/// Distillation terms from teacher outputs (treated as constants) and
/// student aggregate embedding and logits.
pub fn loss_ts_terms(
    teacher_embedding: &Tensor,
    teacher_probs: &[f64],
    student_embedding: &Tensor,
    student_logits: &Tensor,
) -> Result<TsTerms> {
    if teacher_embedding.shape() != student_embedding.shape() {
        return Err(Error::dim(format!(
            "teacher embedding {:?} and student embedding {:?} differ",
            teacher_embedding.shape(),
            student_embedding.shape()
        )));
    }
    let teacher = teacher_embedding.detach();
    let cos = nx::cosine_rows(&teacher, student_embedding)?;
    let batch = cos.numel() as f64;
    let cosine = nx::add_scalar(&nx::scale(&nx::sum(&cos), -1.0), batch);
    let soft = nx::soft_cross_entropy(student_logits, teacher_probs)?;
    Ok(TsTerms { cosine, soft })
}

/// Embeddings of one batch: the aggregate and, when segmented, each segment index.
pub struct Embedded {
    pub aggregate: Tensor,
    pub segments: Vec<Tensor>,
}

/// Runs a batch of equal-length crops through `model`.
///
/// Without a segment spec every crop is embedded whole. With one, all
/// segments of all crops go through the network as a single batch (segment
/// index major) and are averaged per crop.
pub fn embed_batch(model: &Model, crops: &[Vec<f64>], spec: Option<&SegmentSpec>, mode: Mode) -> Result<Embedded> {
    let Some(spec) = spec else {
        return Ok(Embedded {
            aggregate: model.embed_waveforms(crops, mode)?,
            segments: Vec::new(),
        });
    };
    let sets = crops
        .iter()
        .map(|c| segmentation::segment(c, spec))
        .collect::<Result<Vec<_>>>()?;
    let k = sets[0].len();
    if sets.iter().any(|s| s.len() != k) {
        return Err(Error::InvalidInput("crops in one batch must yield equal segment counts".into()));
    }
    let batch = crops.len();
    let mut rows = Vec::with_capacity(k * batch);
    for i in 0..k {
        for set in &sets {
            rows.push(set.segments[i].clone());
        }
    }
    let all = model.embed_waveforms(&rows, mode)?;
    let segments = (0..k)
        .map(|i| nx::narrow_rows(&all, i * batch, batch))
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedded {
        aggregate: segmentation::aggregate(&segments)?,
        segments,
    })
}

/// Distillation loss of a student SA pipeline against a frozen teacher that
/// sees the whole crop.
pub fn loss_ts(teacher: &Model, student: &Model, crops: &[Vec<f64>], spec: Option<&SegmentSpec>) -> Result<Tensor> {
    let student_out = embed_batch(student, crops, spec, Mode::Train)?;
    let logits = student.forward_logits(&student_out.aggregate, Head::Aggregate)?;
    let (t_emb, t_probs) = teacher_outputs(teacher, crops)?;
    loss_ts_terms(&t_emb, &t_probs, &student_out.aggregate, &logits)?.total()
}

fn teacher_outputs(teacher: &Model, crops: &[Vec<f64>]) -> Result<(Tensor, Vec<f64>)> {
    let emb = teacher.embed_waveforms(crops, Mode::Eval)?.detach();
    let probs = nx::softmax(&teacher.forward_logits(&emb, Head::Aggregate)?)?;
    Ok((emb, probs))
}

/// Per-term values of one training loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub aggregate_ce: f64,
    pub segment_ce: f64,
    pub cosine: f64,
    pub soft: f64,
}

/// The objective of `regime` on one batch. Returns the differentiable total
/// and its parts.
pub fn total_loss(
    regime: Regime,
    model: &Model,
    teacher: Option<&Model>,
    crops: &[Vec<f64>],
    labels: &[usize],
    spec: Option<&SegmentSpec>,
    w: f64,
) -> Result<(Tensor, LossParts)> {
    let spec = if regime.segments() {
        Some(spec.ok_or_else(|| Error::config(format!("regime {regime} needs a segment length")))?)
    } else {
        None
    };
    let teacher = match (regime, teacher) {
        (Regime::SaTs, None) => return Err(Error::config("regime sa_ts needs a teacher checkpoint")),
        (Regime::SaTs, Some(t)) => Some(t),
        _ => None,
    };
    let out = embed_batch(model, crops, spec, Mode::Train)?;
    let agg_logits = model.forward_logits(&out.aggregate, Head::Aggregate)?;
    let mut parts = LossParts::default();

    let w = if regime == Regime::Baseline { 0.0 } else { w };
    let mut seg_logits = Vec::new();
    if w != 0.0 {
        for (k, e) in out.segments.iter().enumerate() {
            seg_logits.push(model.forward_logits(e, Head::Segment(k))?);
        }
    }
    let sa = loss_sa(&agg_logits, &seg_logits, labels, w)?;
    parts.aggregate_ce = nx::softmax_cce(&agg_logits, labels)?.item()?;
    parts.segment_ce = seg_logits
        .iter()
        .try_fold(0.0, |acc, l| -> Result<f64> { Ok(acc + nx::softmax_cce(l, labels)?.item()?) })?;

    let total = match teacher {
        Some(t) => {
            let (t_emb, t_probs) = teacher_outputs(t, crops)?;
            let ts = loss_ts_terms(&t_emb, &t_probs, &out.aggregate, &agg_logits)?;
            parts.cosine = ts.cosine.item()?;
            parts.soft = ts.soft.item()?;
            nx::add(&sa, &ts.total()?)?
        }
        None => sa,
    };
    parts.total = total.item()?;
    Ok((total, parts))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsGradConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Use the running maximum of the second moment. Off gives plain Adam.
    pub amsgrad: bool,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            amsgrad: true,
        }
    }
}

/// AMSGrad with L2-coupled weight decay and bias correction.
pub struct AmsGrad {
    pub config: AmsGradConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_hat: Vec<Vec<f64>>,
}

impl AmsGrad {
    pub fn new(config: AmsGradConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_hat: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn max_second_moment(&self) -> &[Vec<f64>] {
        &self.v_hat
    }

    /// Updates `params` in place from their accumulated gradients; a missing
    /// gradient counts as zero.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("optimiser built for a different parameter list"));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad();
            let mut data = p.data_mut();
            if data.len() != self.m[i].len() {
                return Err(Error::dim(format!("parameter {i} changed size")));
            }
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]) + c.weight_decay * data[j];
                let m = c.beta1 * self.m[i][j] + (1.0 - c.beta1) * g;
                let v = c.beta2 * self.v[i][j] + (1.0 - c.beta2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let second = if c.amsgrad {
                    self.v_hat[i][j] = self.v_hat[i][j].max(v);
                    self.v_hat[i][j]
                } else {
                    v
                };
                data[j] -= c.lr * (m / bc1) / ((second / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// A labelled training utterance.
#[derive(Debug, Clone)]
pub struct Example {
    pub samples: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub crop_length: usize,
}

/// Crops `samples` to `length` from `offset`, zero-padding past the end.
pub fn crop(samples: &[f64], offset: usize, length: usize) -> Vec<f64> {
    let mut out: Vec<f64> = samples.iter().skip(offset).take(length).copied().collect();
    out.resize(length, 0.0);
    out
}

/// Uniformly sampled, randomly cropped and pre-emphasised batch.
pub fn make_batch(corpus: &[Example], spec: BatchSpec, rng: &mut impl Rng) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if corpus.is_empty() || spec.batch_size == 0 || spec.crop_length == 0 {
        return Err(Error::InvalidInput("batch needs a non-empty corpus and positive sizes".into()));
    }
    let mut crops = Vec::with_capacity(spec.batch_size);
    let mut labels = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let ex = &corpus[rng.random_range(0..corpus.len())];
        let slack = ex.samples.len().saturating_sub(spec.crop_length);
        let offset = rng.random_range(0..=slack);
        crops.push(pre_emphasize(&crop(&ex.samples, offset, spec.crop_length), PRE_EMPHASIS));
        labels.push(ex.label);
    }
    Ok((crops, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Segment loss weight; `None` takes the regime default.
    pub segment_weight: Option<f64>,
    pub segment_policy: Option<SegmentPolicy>,
    pub overlap_fraction: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AmsGradConfig,
    pub seed: u64,
    /// Validate every this many steps (and after the last one); 0 disables.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Baseline,
            segment_weight: None,
            segment_policy: None,
            overlap_fraction: 0.1,
            batch_size: 16,
            steps: 2000,
            optimizer: AmsGradConfig::default(),
            seed: 1,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn segment_weight(&self) -> f64 {
        self.segment_weight.unwrap_or(self.regime.default_segment_weight())
    }

    /// Segment length used at evaluation time, `None` for whole-crop systems.
    pub fn eval_segment_length(&self, factor: usize) -> Option<usize> {
        if !self.regime.segments() {
            return None;
        }
        self.segment_policy.and_then(|p| p.shortest(factor))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch_size and steps must be positive"));
        }
        if self.segment_weight() < 0.0 {
            return Err(Error::config("segment weight must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::config("overlap fraction must lie in [0, 1)"));
        }
        if self.regime.segments() {
            let factor = model.downsampling_factor();
            let policy = self
                .segment_policy
                .ok_or_else(|| Error::config(format!("regime {} needs a segment policy", self.regime)))?;
            let lengths = policy.admissible_lengths(factor);
            if lengths.is_empty() {
                return Err(Error::config("segment policy admits no length"));
            }
            for &c in &lengths {
                model.frames_for(c)?;
                if c > model.input_length {
                    return Err(Error::config(format!(
                        "segment length {c} exceeds the crop length {}",
                        model.input_length
                    )));
                }
                let k = SegmentSpec::new(c, segmentation::Overlap::Fraction(self.overlap_fraction))?
                    .count(model.input_length)?;
                if self.segment_weight() > 0.0 && k > model.segment_heads {
                    return Err(Error::config(format!(
                        "segment length {c} gives {k} segments but the model has {} segment heads",
                        model.segment_heads
                    )));
                }
            }
        }
        Ok(())
    }

    fn spec_for(&self, length: usize) -> Result<SegmentSpec> {
        SegmentSpec::new(length, segmentation::Overlap::Fraction(self.overlap_fraction))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub segment_length: usize,
    pub loss: LossParts,
    pub validation_eer: Option<f64>,
    pub elapsed_ms: u128,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "step={} seg_len={} total={:.6} ce_agg={:.6} ce_seg={:.6} ts_cos={:.6} ts_soft={:.6}",
            self.step, self.segment_length, l.total, l.aggregate_ce, l.segment_ce, l.cosine, l.soft
        )?;
        if let Some(e) = self.validation_eer {
            write!(f, " val_eer={e:.4}")?;
        }
        write!(f, " elapsed_ms={}", self.elapsed_ms)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_validation_eer: Option<f64>,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.loss.total)
    }
}

/// Metadata describing how a trained model embeds utterances.
pub fn system_meta(config: &TrainConfig, factor: usize) -> KvMap {
    let mut meta = KvMap::default();
    meta.insert("system.regime", config.regime);
    meta.insert("system.segment_length", config.eval_segment_length(factor).unwrap_or(0));
    meta.insert("system.overlap_fraction", config.overlap_fraction);
    meta
}

/// Trains a fresh model. `validate` maps a model to a validation EER in
/// percent; the lowest value selects the best checkpoint.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    data: &[Example],
    teacher: Option<&Model>,
    validate: Option<&mut dyn FnMut(&Model) -> Result<f64>>,
) -> Result<TrainOutcome> {
    config.validate(model_config)?;
    if config.regime == Regime::SaTs && teacher.is_none() {
        return Err(Error::config("regime sa_ts needs a teacher checkpoint"));
    }
    if let Some(t) = teacher {
        if t.config().embedding_dim != model_config.embedding_dim || t.config().num_speakers != model_config.num_speakers {
            return Err(Error::config("teacher and student differ in embedding or speaker dimension"));
        }
    }
    if let Some(bad) = data.iter().find(|e| e.label >= model_config.num_speakers) {
        return Err(Error::InvalidInput(format!(
            "label {} exceeds the {} configured speakers",
            bad.label, model_config.num_speakers
        )));
    }
    let mut validate = validate;
    let factor = model_config.downsampling_factor();
    let model = Model::build(model_config, mix(config.seed, 0x0001))?;
    let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut opt = AmsGrad::new(config.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x0002));
    let batch_spec = BatchSpec {
        batch_size: config.batch_size,
        crop_length: model_config.input_length,
    };
    let meta = system_meta(config, factor);
    let w = config.segment_weight();
    let started = Instant::now();

    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    for step in 1..=config.steps {
        let seg_len = match (config.regime.segments(), config.segment_policy) {
            (true, Some(SegmentPolicy::Fixed(c))) => c,
            (true, Some(SegmentPolicy::PerBatchRandom { min, max })) => draw_segment_length(min, max, factor, &mut rng)?,
            _ => model_config.input_length,
        };
        let (crops, labels) = make_batch(data, batch_spec, &mut rng)?;
        let spec = if config.regime.segments() { Some(config.spec_for(seg_len)?) } else { None };

        params.iter().for_each(Tensor::zero_grad);
        let (loss, parts) = total_loss(config.regime, &model, teacher, &crops, &labels, spec.as_ref(), w)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        loss.backward()?;
        opt.step(&params)?;

        let due = config.eval_interval > 0 && (step % config.eval_interval == 0 || step == config.steps);
        let mut validation_eer = None;
        if due {
            if let Some(v) = validate.as_mut() {
                let eer = v(&model)?;
                validation_eer = Some(eer);
                if best.as_ref().is_none_or(|(b, _)| eer < *b) {
                    let mut m = meta.clone();
                    m.insert("train.step", step);
                    m.insert("train.validation_eer", format!("{eer:.6}"));
                    best = Some((eer, model.to_checkpoint(m)));
                }
            }
        }
        log.push(LogEntry {
            step,
            segment_length: seg_len,
            loss: parts,
            validation_eer,
            elapsed_ms: started.elapsed().as_millis(),
        });
    }

    let mut last_meta = meta.clone();
    last_meta.insert("train.step", config.steps);
    let last = model.to_checkpoint(last_meta);
    let (best_validation_eer, best) = match best {
        Some((e, c)) => (Some(e), c),
        None => (None, last.clone()),
    };
    Ok(TrainOutcome {
        model,
        best,
        last,
        best_validation_eer,
        log,
    })
}
