//! Configuration-driven pipeline: corpus generation, training per regime and
//! evaluation of the systems-by-durations grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{self, Condition, EvalReport, System, TrialSelection, TrialSet};
use crate::kv::KvMap;
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::segmentation::SegmentPolicy;
use crate::synthdata::{self, mix, CorpusConfig, CorpusManifest, Split};
use crate::training::{self, AmsGradConfig, Example, Regime, TrainConfig, TrainOutcome};

/// A duration condition as a fraction of the training crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub fn label(&self) -> String {
        if self.num == self.den {
            "full".into()
        } else {
            format!("{}/{}", self.num, self.den)
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("duration `{s}` is not `full` or `<num>/<den>`"));
        let f = if s == "full" {
            Fraction { num: 1, den: 1 }
        } else {
            let (n, d) = s.split_once('/').ok_or_else(bad)?;
            Fraction {
                num: n.trim().parse().map_err(|_| bad())?,
                den: d.trim().parse().map_err(|_| bad())?,
            }
        };
        if f.num == 0 || f.den == 0 || f.num > f.den {
            return Err(bad());
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub conditions: Vec<Fraction>,
    /// Target and impostor trials per test grid; 0 means every pair.
    pub trials: usize,
    /// Same for the validation probe used to pick the best checkpoint.
    pub validation_trials: usize,
    pub seed: u64,
    /// Systems trained and evaluated by `reproduce`, in row order.
    pub systems: Vec<Regime>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: [(1, 1), (3, 4), (1, 2), (1, 4)]
                .into_iter()
                .map(|(num, den)| Fraction { num, den })
                .collect(),
            trials: 0,
            validation_trials: 200,
            seed: 7,
            systems: Regime::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            report: "report/eer.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// As written; see [`ExperimentConfig::resolve`].
    pub paths: Paths,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::desk(corpus.train_speakers as usize);
        let train = TrainConfig {
            segment_policy: Some(SegmentPolicy::Fixed(model.downsampling_factor())),
            ..TrainConfig::default()
        };
        Self {
            corpus,
            model,
            train,
            eval: EvalConfig::default(),
            paths: Paths::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

const CORPUS_KEYS: [&str; 14] = [
    "corpus.train_speakers",
    "corpus.val_speakers",
    "corpus.test_speakers",
    "corpus.utterances_per_speaker",
    "corpus.sample_rate",
    "corpus.seed",
    "corpus.min_duration",
    "corpus.max_duration",
    "corpus.f0_min",
    "corpus.f0_max",
    "corpus.harmonics",
    "corpus.noise_min",
    "corpus.noise_max",
    "corpus.jitter",
];

const TRAIN_KEYS: [&str; 13] = [
    "train.regime",
    "train.w",
    "train.segment_policy",
    "train.segment_length",
    "train.segment_min",
    "train.segment_max",
    "train.overlap_fraction",
    "train.batch_size",
    "train.steps",
    "train.lr",
    "train.weight_decay",
    "train.seed",
    "train.eval_interval",
];

const OTHER_KEYS: [&str; 8] = [
    "eval.conditions",
    "eval.trials",
    "eval.validation_trials",
    "eval.seed",
    "eval.systems",
    "paths.corpus_dir",
    "paths.checkpoint_dir",
    "paths.report",
];

fn is_known(key: &str) -> bool {
    CORPUS_KEYS.contains(&key) || TRAIN_KEYS.contains(&key) || OTHER_KEYS.contains(&key) || ModelConfig::KEYS.contains(&key)
}

impl ExperimentConfig {
    /// Parses `section.key = value` text over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        if let Some(k) = kv.keys().find(|k| !is_known(k)) {
            return Err(Error::config(format!("unknown key `{k}`")));
        }
        let mut cfg = Self::default();

        let c = &mut cfg.corpus;
        kv.read_into("corpus.train_speakers", &mut c.train_speakers)?;
        kv.read_into("corpus.val_speakers", &mut c.val_speakers)?;
        kv.read_into("corpus.test_speakers", &mut c.test_speakers)?;
        kv.read_into("corpus.utterances_per_speaker", &mut c.utterances_per_speaker)?;
        kv.read_into("corpus.sample_rate", &mut c.sample_rate)?;
        kv.read_into("corpus.seed", &mut c.seed)?;
        kv.read_into("corpus.min_duration", &mut c.min_duration)?;
        kv.read_into("corpus.max_duration", &mut c.max_duration)?;
        kv.read_into("corpus.f0_min", &mut c.voice.f0_min)?;
        kv.read_into("corpus.f0_max", &mut c.voice.f0_max)?;
        kv.read_into("corpus.harmonics", &mut c.voice.harmonics)?;
        kv.read_into("corpus.noise_min", &mut c.voice.noise_min)?;
        kv.read_into("corpus.noise_max", &mut c.voice.noise_max)?;
        kv.read_into("corpus.jitter", &mut c.voice.jitter)?;

        cfg.model.num_speakers = cfg.corpus.train_speakers as usize;
        cfg.model.apply_kv(&kv)?;

        let t = &mut cfg.train;
        kv.read_into("train.regime", &mut t.regime)
            .map_err(|e| Error::config(e.to_string()))?;
        t.segment_weight = match kv.get("train.w") {
            None | Some("auto") => None,
            Some(_) => kv.parsed("train.w")?,
        };
        let policy = kv.get("train.segment_policy").unwrap_or("fixed");
        t.segment_policy = match policy {
            "fixed" => Some(SegmentPolicy::Fixed(
                kv.parsed("train.segment_length")?.unwrap_or(cfg.model.downsampling_factor()),
            )),
            "random" => Some(SegmentPolicy::PerBatchRandom {
                min: kv.require("train.segment_min")?,
                max: kv.require("train.segment_max")?,
            }),
            other => return Err(Error::config(format!("train.segment_policy `{other}` is not fixed or random"))),
        };
        kv.read_into("train.overlap_fraction", &mut t.overlap_fraction)?;
        kv.read_into("train.batch_size", &mut t.batch_size)?;
        kv.read_into("train.steps", &mut t.steps)?;
        kv.read_into("train.lr", &mut t.optimizer.lr)?;
        kv.read_into("train.weight_decay", &mut t.optimizer.weight_decay)?;
        kv.read_into("train.seed", &mut t.seed)?;
        kv.read_into("train.eval_interval", &mut t.eval_interval)?;

        let e = &mut cfg.eval;
        if let Some(list) = kv.get("eval.conditions") {
            e.conditions = list.split(',').map(Fraction::parse).collect::<Result<_>>()?;
        }
        kv.read_into("eval.trials", &mut e.trials)?;
        kv.read_into("eval.validation_trials", &mut e.validation_trials)?;
        kv.read_into("eval.seed", &mut e.seed)?;
        if let Some(list) = kv.get("eval.systems") {
            e.systems = list
                .split(',')
                .map(|s| s.trim().parse::<Regime>().map_err(Error::Config))
                .collect::<Result<_>>()?;
        }

        let p = &mut cfg.paths;
        kv.read_into("paths.corpus_dir", &mut p.corpus_dir)?;
        kv.read_into("paths.checkpoint_dir", &mut p.checkpoint_dir)?;
        kv.read_into("paths.report", &mut p.report)?;

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        if self.model.num_speakers != self.corpus.train_speakers as usize {
            return Err(Error::config(format!(
                "model.num_speakers {} differs from corpus.train_speakers {}",
                self.model.num_speakers, self.corpus.train_speakers
            )));
        }
        self.train.validate(&self.model)?;
        if self.eval.conditions.is_empty() || self.eval.systems.is_empty() {
            return Err(Error::config("eval needs at least one condition and one system"));
        }
        if self.eval.systems.contains(&Regime::SaTs) {
            let base = self.eval.systems.iter().position(|&r| r == Regime::Baseline);
            let ts = self.eval.systems.iter().position(|&r| r == Regime::SaTs);
            if base.is_none() || base > ts {
                return Err(Error::config("eval.systems must list baseline before sa_ts (the teacher)"));
            }
        }
        Ok(())
    }

    /// Canonical text; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut kv = self.model.to_kv();
        let c = &self.corpus;
        kv.insert("corpus.train_speakers", c.train_speakers);
        kv.insert("corpus.val_speakers", c.val_speakers);
        kv.insert("corpus.test_speakers", c.test_speakers);
        kv.insert("corpus.utterances_per_speaker", c.utterances_per_speaker);
        kv.insert("corpus.sample_rate", c.sample_rate);
        kv.insert("corpus.seed", c.seed);
        kv.insert("corpus.min_duration", c.min_duration);
        kv.insert("corpus.max_duration", c.max_duration);
        kv.insert("corpus.f0_min", c.voice.f0_min);
        kv.insert("corpus.f0_max", c.voice.f0_max);
        kv.insert("corpus.harmonics", c.voice.harmonics);
        kv.insert("corpus.noise_min", c.voice.noise_min);
        kv.insert("corpus.noise_max", c.voice.noise_max);
        kv.insert("corpus.jitter", c.voice.jitter);

        let t = &self.train;
        kv.insert("train.regime", t.regime);
        match t.segment_weight {
            Some(w) => kv.insert("train.w", w),
            None => kv.insert("train.w", "auto"),
        }
        match t.segment_policy {
            Some(SegmentPolicy::PerBatchRandom { min, max }) => {
                kv.insert("train.segment_policy", "random");
                kv.insert("train.segment_min", min);
                kv.insert("train.segment_max", max);
            }
            Some(SegmentPolicy::Fixed(c)) => {
                kv.insert("train.segment_policy", "fixed");
                kv.insert("train.segment_length", c);
            }
            None => {}
        }
        kv.insert("train.overlap_fraction", t.overlap_fraction);
        kv.insert("train.batch_size", t.batch_size);
        kv.insert("train.steps", t.steps);
        kv.insert("train.lr", t.optimizer.lr);
        kv.insert("train.weight_decay", t.optimizer.weight_decay);
        kv.insert("train.seed", t.seed);
        kv.insert("train.eval_interval", t.eval_interval);

        let e = &self.eval;
        let conds: Vec<String> = e.conditions.iter().map(Fraction::label).collect();
        kv.insert("eval.conditions", conds.join(","));
        kv.insert("eval.trials", e.trials);
        kv.insert("eval.validation_trials", e.validation_trials);
        kv.insert("eval.seed", e.seed);
        let systems: Vec<String> = e.systems.iter().map(ToString::to_string).collect();
        kv.insert("eval.systems", systems.join(","));

        kv.insert("paths.corpus_dir", self.paths.corpus_dir.display());
        kv.insert("paths.checkpoint_dir", self.paths.checkpoint_dir.display());
        kv.insert("paths.report", self.paths.report.display());
        kv.to_text()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.paths.corpus_dir)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint_dir)
    }

    pub fn report_path(&self) -> PathBuf {
        self.resolve(&self.paths.report)
    }

    pub fn checkpoint_path(&self, regime: Regime, which: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{regime}_{which}.ckpt"))
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.eval
            .conditions
            .iter()
            .map(|f| Condition {
                label: f.label(),
                samples: self.model.input_length * f.num / f.den,
            })
            .collect()
    }

    /// Training settings for `regime`, everything else shared.
    pub fn train_for(&self, regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            ..self.train.clone()
        }
    }

    pub fn optimizer(&self) -> AmsGradConfig {
        self.train.optimizer
    }
}

/// Utterances of an evaluation split with the trials over them.
pub struct TrialData {
    pub names: Vec<String>,
    pub utterances: Vec<Vec<f64>>,
    pub trials: TrialSet,
}

/// Everything the pipeline reads from the corpus.
pub struct Data {
    pub manifest: CorpusManifest,
    pub train: Vec<Example>,
    pub validation: Option<TrialData>,
    pub test: TrialData,
}

fn trial_data(
    dir: &Path,
    manifest: &CorpusManifest,
    split: Split,
    trials: usize,
    seed: u64,
) -> Result<TrialData> {
    let utts = synthdata::load_split(dir, manifest, split)?;
    let speakers: Vec<u32> = utts.iter().map(|u| u.speaker_id).collect();
    let selection = if trials == 0 {
        TrialSelection::Exhaustive
    } else {
        TrialSelection::Balanced(trials)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = evaluation::build_trials(&speakers, selection, &mut rng)?;
    Ok(TrialData {
        names: utts.iter().map(|u| u.path.display().to_string()).collect(),
        utterances: utts.into_iter().map(|u| u.samples).collect(),
        trials,
    })
}

impl Data {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.corpus_dir();
        let manifest = CorpusManifest::load(&dir)?;
        if manifest.train_speakers as usize != cfg.model.num_speakers {
            return Err(Error::config(format!(
                "corpus has {} training speakers but the model expects {}",
                manifest.train_speakers, cfg.model.num_speakers
            )));
        }
        let train = synthdata::load_split(&dir, &manifest, Split::Train)?
            .into_iter()
            .map(|u| Example {
                label: u.speaker_id as usize,
                samples: u.samples,
            })
            .collect();
        let validation = if manifest.val_speakers >= 2 {
            Some(trial_data(
                &dir,
                &manifest,
                Split::Validation,
                cfg.eval.validation_trials,
                mix(cfg.eval.seed, 1),
            )?)
        } else {
            None
        };
        let test = trial_data(&dir, &manifest, Split::Test, cfg.eval.trials, cfg.eval.seed)?;
        Ok(Self {
            manifest,
            train,
            validation,
            test,
        })
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<CorpusManifest> {
    synthdata::generate_corpus(&cfg.corpus, &cfg.corpus_dir())
}

fn system_from(name: &str, ckpt: &Checkpoint) -> Result<System> {
    System::from_checkpoint(name, ckpt)
}

/// Trains one regime on loaded data; validation EER selects the best checkpoint.
pub fn train_regime(cfg: &ExperimentConfig, regime: Regime, data: &Data, teacher: Option<&Model>) -> Result<TrainOutcome> {
    let tc = cfg.train_for(regime);
    let conditions = cfg.conditions();
    let enrol = cfg.model.input_length;
    let mut probe = |model: &Model| -> Result<f64> {
        let val = data.validation.as_ref().expect("probe only built with validation data");
        let meta = training::system_meta(&tc, cfg.model.downsampling_factor());
        let system = system_from(&regime.to_string(), &model.to_checkpoint(meta))?;
        evaluation::mean_eer(&system, &val.utterances, &val.trials, &conditions, enrol)
    };
    let probe: Option<&mut dyn FnMut(&Model) -> Result<f64>> =
        if data.validation.is_some() { Some(&mut probe) } else { None };
    training::train(&cfg.model, &tc, &data.train, teacher, probe)
}

/// Writes `<regime>_best.ckpt`, `<regime>_final.ckpt` and `<regime>_train.log`.
pub fn save_outcome(cfg: &ExperimentConfig, regime: Regime, outcome: &TrainOutcome) -> Result<()> {
    outcome.best.save(&cfg.checkpoint_path(regime, "best"))?;
    outcome.last.save(&cfg.checkpoint_path(regime, "final"))?;
    let mut log = String::new();
    for entry in &outcome.log {
        writeln!(log, "{entry}").unwrap();
    }
    let path = cfg.checkpoint_dir().join(format!("{regime}_train.log"));
    fs::write(&path, log).map_err(|e| Error::io(&path, e))
}

/// Loads the teacher for `sa_ts` from the baseline's best checkpoint.
pub fn load_teacher(cfg: &ExperimentConfig) -> Result<Model> {
    let path = cfg.checkpoint_path(Regime::Baseline, "best");
    if !path.exists() {
        return Err(Error::Missing {
            what: "teacher checkpoint (train the baseline regime first)",
            path,
        });
    }
    Ok(Model::from_checkpoint(&Checkpoint::load(&path)?)?.freeze())
}

/// Trains the configured regime and saves its artefacts.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let regime = cfg.train.regime;
    let teacher = if regime == Regime::SaTs { Some(load_teacher(cfg)?) } else { None };
    let data = Data::load(cfg)?;
    let outcome = train_regime(cfg, regime, &data, teacher.as_ref())?;
    save_outcome(cfg, regime, &outcome)?;
    Ok(outcome)
}

/// Evaluates checkpoints (rows in the given order) and writes the report,
/// the trial list and per-cell score dumps.
pub fn evaluate_checkpoints(cfg: &ExperimentConfig, checkpoints: &[PathBuf], data: &Data) -> Result<EvalReport> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("no checkpoint to evaluate".into()));
    }
    let systems = checkpoints
        .iter()
        .map(|p| {
            let ckpt = Checkpoint::load(p)?;
            let name = ckpt
                .meta
                .get("system.regime")
                .map(str::to_string)
                .unwrap_or_else(|| p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            system_from(&name, &ckpt)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluation::evaluate(
        &systems,
        &data.test.utterances,
        &data.test.trials,
        &cfg.conditions(),
        cfg.model.input_length,
    )?;
    let path = cfg.report_path();
    report.write(&path, &data.test.trials)?;
    let trials_path = path.with_file_name("trials.txt");
    fs::write(&trials_path, evaluation::trials_to_text(&data.test.trials, &data.test.names))
        .map_err(|e| Error::io(&trials_path, e))?;
    Ok(report)
}

/// Full pipeline: corpus, every configured system, then the grid.
pub fn reproduce(cfg: &ExperimentConfig) -> Result<EvalReport> {
    generate(cfg)?;
    let data = Data::load(cfg)?;
    let mut teacher = None;
    let mut checkpoints = Vec::new();
    for &regime in &cfg.eval.systems {
        let outcome = train_regime(cfg, regime, &data, teacher.as_ref())?;
        save_outcome(cfg, regime, &outcome)?;
        if regime == Regime::Baseline {
            teacher = Some(Model::from_checkpoint(&outcome.best)?.freeze());
        }
        checkpoints.push(cfg.checkpoint_path(regime, "best"));
    }
    evaluate_checkpoints(cfg, &checkpoints, &data)
}
