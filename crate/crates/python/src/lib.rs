//! Python bindings: model construction and embedding, segmentation,
//! aggregation, losses, EER, corpus synthesis and the experiment pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use segagg_core::evaluation::{self, ScoreSet, System as CoreSystem};
use segagg_core::experiment::{self, Data, ExperimentConfig};
use segagg_core::kv::KvMap;
use segagg_core::model::{Checkpoint, Head, Model as CoreModel, ModelConfig};
use segagg_core::numerics::{Mode, Tensor};
use segagg_core::segmentation::{self, Overlap, SegmentSpec};
use segagg_core::synthdata::{self, CorpusConfig, VoiceConfig};
use segagg_core::training;
use segagg_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Missing { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = *t.shape().last().unwrap_or(&1);
    t.to_vec().chunks(width).map(<[f64]>::to_vec).collect()
}

fn config_from(items: Option<Vec<(String, String)>>, num_speakers: usize) -> PyResult<ModelConfig> {
    let mut cfg = ModelConfig::desk(num_speakers);
    if let Some(items) = items {
        let mut kv = KvMap::default();
        for (k, v) in items {
            kv.insert(format!("model.{k}"), v);
        }
        cfg.apply_kv(&kv).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Embedding network with aggregate and per-segment speaker heads.
#[pyclass(unsendable)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// `config` holds `(key, value)` overrides of the desk layout, e.g.
    /// `[("gru_hidden", "16")]`.
    #[new]
    #[pyo3(signature = (num_speakers=20, seed=0, config=None))]
    fn new(num_speakers: usize, seed: u64, config: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let cfg = config_from(config, num_speakers)?;
        Ok(Self {
            inner: CoreModel::build(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: CoreModel::from_checkpoint(&ckpt).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(KvMap::default()).save(&path).map_err(py_err)
    }

    /// Layout as `(key, value)` text pairs.
    fn config(&self) -> Vec<(String, String)> {
        self.inner
            .config()
            .to_kv()
            .iter()
            .map(|(k, v)| (k.trim_start_matches("model.").to_string(), v.to_string()))
            .collect()
    }

    #[getter]
    fn downsampling_factor(&self) -> usize {
        self.inner.config().downsampling_factor()
    }

    fn num_parameters(&self) -> usize {
        self.inner.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.parameters().into_iter().map(|(n, _)| n).collect()
    }

    /// Embeds equal-length waveforms. Training mode uses batch statistics
    /// (and updates the running ones); eval mode needs them populated.
    #[pyo3(signature = (waveforms, train=false))]
    fn embed(&self, waveforms: Vec<Vec<f64>>, train: bool) -> PyResult<Vec<Vec<f64>>> {
        let mode = if train { Mode::Train } else { Mode::Eval };
        let e = self.inner.embed_waveforms(&waveforms, mode).map_err(py_err)?;
        Ok(rows(&e))
    }

    /// Speaker logits from embeddings; `head` is None for the aggregate head
    /// or a segment index.
    #[pyo3(signature = (embeddings, head=None))]
    fn logits(&self, embeddings: Vec<Vec<f64>>, head: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let e = Tensor::from_rows(&embeddings).map_err(py_err)?;
        let head = head.map_or(Head::Aggregate, Head::Segment);
        Ok(rows(&self.inner.forward_logits(&e, head).map_err(py_err)?))
    }
}

/// A checkpoint plus how it embeds an utterance (whole or segmented).
#[pyclass(unsendable)]
struct System {
    inner: CoreSystem,
}

#[pymethods]
impl System {
    #[staticmethod]
    #[pyo3(signature = (path, name=None))]
    fn load(path: PathBuf, name: Option<String>) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let name = name.unwrap_or_else(|| ckpt.meta.get("system.regime").unwrap_or("system").to_string());
        Ok(Self {
            inner: CoreSystem::from_checkpoint(name, &ckpt).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn segment_length(&self) -> Option<usize> {
        self.inner.segment_length
    }

    /// Aggregated embedding of the first `duration` samples of each waveform.
    fn embed(&self, waveforms: Vec<Vec<f64>>, duration: usize) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[f64]> = waveforms.iter().map(Vec::as_slice).collect();
        self.inner.embed(&refs, duration).map_err(py_err)
    }

    /// Cosine score between an enrolment and a test waveform.
    fn score(&self, enrol: Vec<f64>, test: Vec<f64>, enrol_duration: usize, test_duration: usize) -> PyResult<f64> {
        let a = self.inner.embed(&[&enrol], enrol_duration).map_err(py_err)?;
        let b = self.inner.embed(&[&test], test_duration).map_err(py_err)?;
        evaluation::cosine(&a[0], &b[0]).ok_or_else(|| PyValueError::new_err("zero embedding"))
    }
}

/// Overlapping segments of `x` and their start offsets.
#[pyfunction]
#[pyo3(signature = (x, length, overlap_fraction=0.1))]
fn segment(x: Vec<f64>, length: usize, overlap_fraction: f64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let spec = SegmentSpec::new(length, Overlap::Fraction(overlap_fraction)).map_err(py_err)?;
    let set = segmentation::segment(&x, &spec).map_err(py_err)?;
    Ok((set.segments, set.starts))
}

/// Element-wise mean of segment embeddings.
#[pyfunction]
fn aggregate(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let tensors = embeddings
        .iter()
        .map(|e| Tensor::new(e.clone(), &[e.len()]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    Ok(segmentation::aggregate(&tensors).map_err(py_err)?.to_vec())
}

#[pyfunction]
#[pyo3(signature = (x, coeff=training::PRE_EMPHASIS))]
fn pre_emphasize(x: Vec<f64>, coeff: f64) -> Vec<f64> {
    training::pre_emphasize(&x, coeff)
}

/// Aggregate cross-entropy plus `w` times the per-segment cross-entropies.
#[pyfunction]
fn loss_sa(aggregate_logits: Vec<Vec<f64>>, segment_logits: Vec<Vec<Vec<f64>>>, labels: Vec<usize>, w: f64) -> PyResult<f64> {
    let agg = Tensor::from_rows(&aggregate_logits).map_err(py_err)?;
    let segs = segment_logits
        .iter()
        .map(|s| Tensor::from_rows(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    training::loss_sa(&agg, &segs, &labels, w)
        .and_then(|t| t.item())
        .map_err(py_err)
}

/// Equal error rate in percent and its threshold.
#[pyfunction]
fn compute_eer(targets: Vec<f64>, impostors: Vec<f64>) -> PyResult<(f64, f64)> {
    let e = evaluation::compute_eer(&ScoreSet {
        target: targets,
        impostor: impostors,
    })
    .map_err(py_err)?;
    Ok((e.eer, e.threshold))
}

/// One synthetic utterance of a seeded speaker.
#[pyfunction]
#[pyo3(signature = (master_seed, speaker_id, utterance_seed, duration, sample_rate=4000))]
fn synth_utterance(master_seed: u64, speaker_id: u32, utterance_seed: u64, duration: usize, sample_rate: u32) -> Vec<f64> {
    let voice = VoiceConfig::default();
    let profile = synthdata::make_speaker(master_seed, speaker_id, &voice);
    synthdata::synth_utterance(&profile, utterance_seed, duration, sample_rate, voice.jitter).samples
}

/// Writes a corpus and returns the number of utterances.
#[pyfunction]
#[pyo3(signature = (directory, seed=1, train_speakers=20, val_speakers=5, test_speakers=8, utterances_per_speaker=10))]
fn generate_corpus(
    directory: PathBuf,
    seed: u64,
    train_speakers: u32,
    val_speakers: u32,
    test_speakers: u32,
    utterances_per_speaker: u32,
) -> PyResult<usize> {
    let cfg = CorpusConfig {
        seed,
        train_speakers,
        val_speakers,
        test_speakers,
        utterances_per_speaker,
        ..CorpusConfig::default()
    };
    Ok(synthdata::generate_corpus(&cfg, &directory).map_err(py_err)?.entries.len())
}

/// Runs `generate`, `train`, `evaluate` or `reproduce` for a config file.
/// Returns the report CSV for evaluate/reproduce and the final loss line for train.
#[pyfunction]
#[pyo3(signature = (command, config, checkpoints=None))]
fn run(command: &str, config: PathBuf, checkpoints: Option<Vec<PathBuf>>) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    match command {
        "generate" => {
            let m = experiment::generate(&cfg).map_err(py_err)?;
            Ok(format!("{} utterances", m.entries.len()))
        }
        "train" => {
            let out = experiment::cmd_train(&cfg).map_err(py_err)?;
            Ok(out.log.last().map(ToString::to_string).unwrap_or_default())
        }
        "evaluate" => {
            let ckpts = checkpoints
                .unwrap_or_else(|| cfg.eval.systems.iter().map(|&r| cfg.checkpoint_path(r, "best")).collect());
            let data = Data::load(&cfg).map_err(py_err)?;
            Ok(experiment::evaluate_checkpoints(&cfg, &ckpts, &data).map_err(py_err)?.to_csv())
        }
        "reproduce" => Ok(experiment::reproduce(&cfg).map_err(py_err)?.to_csv()),
        other => Err(PyValueError::new_err(format!(
            "unknown command `{other}` (generate, train, evaluate, reproduce)"
        ))),
    }
}

#[pymodule]
fn segagg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<System>()?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(pre_emphasize, m)?)?;
    m.add_function(wrap_pyfunction!(loss_sa, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(synth_utterance, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
