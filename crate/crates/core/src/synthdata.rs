//! Procedural speaker corpus.
//!
//! Each speaker is a harmonic-plus-noise voice: a fundamental frequency, a
//! fixed spectral envelope over its harmonics and a noise floor. Utterances of
//! one speaker differ in pitch jitter, harmonic phases and noise realisation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const PEAK: f64 = 0.9;
const WAVE_MAGIC: &[u8; 4] = b"SAWF";
const MANIFEST: &str = "manifest.txt";

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonics: usize,
    pub noise_min: f64,
    pub noise_max: f64,
    /// Per-utterance relative pitch deviation bound.
    pub jitter: f64,
}

impl Default for VoiceConfig {
    fn default() -> Self {
        Self {
            f0_min: 80.0,
            f0_max: 300.0,
            harmonics: 8,
            noise_min: 0.1,
            noise_max: 0.5,
            jitter: 0.03,
        }
    }
}

impl VoiceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.f0_min > 0.0
            && self.f0_min <= self.f0_max
            && self.harmonics >= 1
            && (0.0..=0.5).contains(&self.noise_min)
            && (0.0..=0.5).contains(&self.noise_max)
            && self.noise_min <= self.noise_max
            && (0.0..1.0).contains(&self.jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid voice ranges: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub f0: f64,
    pub harmonic_weights: Vec<f64>,
    pub noise_floor: f64,
}

/// Deterministic speaker keyed by `(master_seed, speaker_id)`.
pub fn make_speaker(master_seed: u64, speaker_id: u32, config: &VoiceConfig) -> SpeakerProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(master_seed, 0x5EED_0000 + speaker_id as u64));
    let f0 = if config.f0_max > config.f0_min {
        rng.random_range(config.f0_min..config.f0_max)
    } else {
        config.f0_min
    };
    let mut weights: Vec<f64> = (0..config.harmonics).map(|_| rng.random_range(0.0..1.0)).collect();
    let max = weights.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        weights.iter_mut().for_each(|w| *w /= max);
    } else {
        weights[0] = 1.0;
    }
    let noise_floor = if config.noise_max > config.noise_min {
        rng.random_range(config.noise_min..config.noise_max)
    } else {
        config.noise_min
    };
    SpeakerProfile {
        speaker_id,
        f0,
        harmonic_weights: weights,
        noise_floor,
    }
}

/// The random draws behind one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceParams {
    /// Jittered fundamental.
    pub f0: f64,
    pub phases: Vec<f64>,
    pub noise_seed: u64,
}

impl UtteranceParams {
    pub fn draw(profile: &SpeakerProfile, utterance_seed: u64, jitter: f64) -> Self {
        let key = mix(mix(profile.speaker_id as u64, profile.f0.to_bits()), utterance_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let dev = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        let phases = (0..profile.harmonic_weights.len())
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self {
            f0: profile.f0 * (1.0 + dev),
            phases,
            noise_seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Header (`SAWF`, u32 sample rate, u64 length) + f32 little-endian samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.samples.len());
        out.extend_from_slice(WAVE_MAGIC);
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for &s in &self.samples {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != WAVE_MAGIC {
            return Err("missing waveform header".into());
        }
        let sample_rate = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != len * 4 {
            return Err(format!("header says {len} samples, body holds {} bytes", body.len()));
        }
        let samples = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { samples, sample_rate })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            kind: "waveform",
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Renders `duration` samples of a speaker. Harmonics at or above Nyquist are
/// skipped; the result is peak-normalised to [`PEAK`].
pub fn synth_utterance(
    profile: &SpeakerProfile,
    utterance_seed: u64,
    duration: usize,
    sample_rate: u32,
    jitter: f64,
) -> Waveform {
    let params = UtteranceParams::draw(profile, utterance_seed, jitter);
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;

    // unit-RMS harmonic part
    let audible: Vec<(usize, f64, f64)> = profile
        .harmonic_weights
        .iter()
        .zip(&params.phases)
        .enumerate()
        .map(|(i, (&w, &phi))| (i + 1, w, phi))
        .filter(|&(h, w, _)| w > 0.0 && h as f64 * params.f0 < nyquist)
        .collect();
    let power: f64 = audible.iter().map(|(_, w, _)| w * w / 2.0).sum();
    let gain = if power > 0.0 { 1.0 / power.sqrt() } else { 0.0 };

    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let mut samples: Vec<f64> = (0..duration)
        .map(|t| {
            let tt = t as f64 / sr;
            let voiced: f64 = audible
                .iter()
                .map(|&(h, w, phi)| w * (std::f64::consts::TAU * h as f64 * params.f0 * tt + phi).sin())
                .sum();
            let noise: f64 = StandardNormal.sample(&mut noise_rng);
            gain * voiced + profile.noise_floor * noise
        })
        .collect();

    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Waveform { samples, sample_rate }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub train_speakers: u32,
    pub val_speakers: u32,
    pub test_speakers: u32,
    pub utterances_per_speaker: u32,
    pub sample_rate: u32,
    pub seed: u64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub voice: VoiceConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_speakers: 20,
            val_speakers: 5,
            test_speakers: 8,
            utterances_per_speaker: 10,
            sample_rate: 4000,
            seed: 1,
            min_duration: 6561,
            max_duration: 13122,
            voice: VoiceConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn total_speakers(&self) -> u32 {
        self.train_speakers + self.val_speakers + self.test_speakers
    }

    pub fn split_of(&self, speaker_id: u32) -> Option<Split> {
        let (a, b) = (self.train_speakers, self.train_speakers + self.val_speakers);
        match speaker_id {
            id if id < a => Some(Split::Train),
            id if id < b => Some(Split::Validation),
            id if id < self.total_speakers() => Some(Split::Test),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.voice.validate()?;
        if self.train_speakers < 2 || self.test_speakers < 2 || self.utterances_per_speaker < 2 {
            return Err(Error::config(
                "corpus needs at least 2 train and 2 test speakers with at least 2 utterances each",
            ));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration || self.sample_rate == 0 {
            return Err(Error::config("corpus durations or sample rate invalid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub speaker_id: u32,
    pub utterance_seed: u64,
    pub duration: usize,
    /// Relative to the corpus directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub master_seed: u64,
    pub sample_rate: u32,
    pub train_speakers: u32,
    pub val_speakers: u32,
    pub test_speakers: u32,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split_of(&self, speaker_id: u32) -> Option<Split> {
        let cfg = CorpusConfig {
            train_speakers: self.train_speakers,
            val_speakers: self.val_speakers,
            test_speakers: self.test_speakers,
            ..CorpusConfig::default()
        };
        cfg.split_of(speaker_id)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| self.split_of(e.speaker_id) == Some(split))
    }

    /// First id of a split, so labels can be made zero-based.
    pub fn first_speaker(&self, split: Split) -> u32 {
        match split {
            Split::Train => 0,
            Split::Validation => self.train_speakers,
            Split::Test => self.train_speakers + self.val_speakers,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# master_seed = {}", self.master_seed).unwrap();
        writeln!(out, "# sample_rate = {}", self.sample_rate).unwrap();
        writeln!(out, "# train_speakers = {}", self.train_speakers).unwrap();
        writeln!(out, "# val_speakers = {}", self.val_speakers).unwrap();
        writeln!(out, "# test_speakers = {}", self.test_speakers).unwrap();
        for e in &self.entries {
            writeln!(out, "{} {} {} {}", e.speaker_id, e.utterance_seed, e.duration, e.path.display()).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut header = std::collections::HashMap::new();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, seed, dur, path] = fields[..] else {
                return Err(format!("line {}: expected 4 fields", lineno + 1));
            };
            let bad = |what: &str| format!("line {}: bad {what}", lineno + 1);
            entries.push(ManifestEntry {
                speaker_id: id.parse().map_err(|_| bad("speaker id"))?,
                utterance_seed: seed.parse().map_err(|_| bad("utterance seed"))?,
                duration: dur.parse().map_err(|_| bad("duration"))?,
                path: PathBuf::from(path),
            });
        }
        let field = |k: &str| -> std::result::Result<u64, String> {
            header
                .get(k)
                .ok_or_else(|| format!("header lacks `{k}`"))?
                .parse()
                .map_err(|_| format!("header `{k}` is not a number"))
        };
        Ok(Self {
            master_seed: field("master_seed")?,
            sample_rate: field("sample_rate")? as u32,
            train_speakers: field("train_speakers")? as u32,
            val_speakers: field("val_speakers")? as u32,
            test_speakers: field("test_speakers")? as u32,
            entries,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Missing {
                what: "corpus manifest",
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|reason| Error::Format {
            kind: "manifest",
            path,
            reason,
        })
    }
}

/// Writes every utterance and then the manifest under `dir`.
pub fn generate_corpus(config: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    config.validate()?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for speaker_id in 0..config.total_speakers() {
        let split = config.split_of(speaker_id).expect("id within range");
        let split_dir = dir.join(split.dir_name());
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let profile = make_speaker(config.seed, speaker_id, &config.voice);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xD0_0000 + speaker_id as u64));
        for index in 0..config.utterances_per_speaker {
            let utterance_seed = mix(mix(config.seed, speaker_id as u64), index as u64);
            if !seen.insert((speaker_id, utterance_seed)) {
                return Err(Error::InvalidInput(format!(
                    "utterance seed collision for speaker {speaker_id}"
                )));
            }
            let duration = rng.random_range(config.min_duration..=config.max_duration);
            let wave = synth_utterance(&profile, utterance_seed, duration, config.sample_rate, config.voice.jitter);
            let rel = PathBuf::from(split.dir_name()).join(format!("spk{speaker_id:04}_utt{index:03}.sawf"));
            wave.write(&dir.join(&rel))?;
            entries.push(ManifestEntry {
                speaker_id,
                utterance_seed,
                duration,
                path: rel,
            });
        }
    }
    let manifest = CorpusManifest {
        master_seed: config.seed,
        sample_rate: config.sample_rate,
        train_speakers: config.train_speakers,
        val_speakers: config.val_speakers,
        test_speakers: config.test_speakers,
        entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A loaded utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker_id: u32,
    pub path: PathBuf,
    pub samples: Vec<f64>,
}

/// Reads the waveforms of one split.
pub fn load_split(dir: &Path, manifest: &CorpusManifest, split: Split) -> Result<Vec<Utterance>> {
    manifest
        .entries_in(split)
        .map(|e| {
            let wave = Waveform::read(&dir.join(&e.path))?;
            Ok(Utterance {
                speaker_id: e.speaker_id,
                path: e.path.clone(),
                samples: wave.samples,
            })
        })
        .collect()
}
