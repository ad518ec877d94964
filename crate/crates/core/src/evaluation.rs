//! Verification trials, cosine scoring, equal error rate and the result grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::numerics::Mode;
use crate::segmentation::{self, Overlap, SegmentSpec};
use crate::training::{crop, pre_emphasize, PRE_EMPHASIS};

/// Rows embedded per forward pass.
const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    /// Indices into the utterance list the trials were built from.
    pub enrol: usize,
    pub test: usize,
    pub target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialSelection {
    /// Every unordered pair.
    Exhaustive,
    /// Up to `n` target and `n` impostor pairs drawn without replacement.
    Balanced(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.trials.iter().filter(|t| t.target).count();
        (t, self.trials.len() - t)
    }
}

/// Pairs utterances (given by speaker id) into target and impostor trials.
pub fn build_trials(speakers: &[u32], selection: TrialSelection, rng: &mut impl Rng) -> Result<TrialSet> {
    let mut per_speaker = std::collections::BTreeMap::<u32, usize>::new();
    for &s in speakers {
        *per_speaker.entry(s).or_default() += 1;
    }
    let eligible = per_speaker.values().filter(|&&n| n >= 2).count();
    if eligible < 2 {
        return Err(Error::InvalidInput(
            "trials need at least 2 speakers with at least 2 utterances each".into(),
        ));
    }
    let mut targets = Vec::new();
    let mut impostors = Vec::new();
    for a in 0..speakers.len() {
        for b in a + 1..speakers.len() {
            let target = speakers[a] == speakers[b];
            let t = Trial { enrol: a, test: b, target };
            if target {
                targets.push(t);
            } else {
                impostors.push(t);
            }
        }
    }
    let trials = match selection {
        TrialSelection::Exhaustive => targets.into_iter().chain(impostors).collect(),
        TrialSelection::Balanced(n) => {
            if n == 0 {
                return Err(Error::InvalidInput("balanced trial count must be positive".into()));
            }
            targets.shuffle(rng);
            impostors.shuffle(rng);
            targets.truncate(n);
            impostors.truncate(n);
            let mut all: Vec<Trial> = targets.into_iter().chain(impostors).collect();
            all.sort_by_key(|t| (t.enrol, t.test));
            all
        }
    };
    Ok(TrialSet { trials })
}

/// A trained model together with how it turns an utterance into one embedding.
pub struct System {
    pub name: String,
    pub model: Model,
    /// Segment length for aggregated systems; `None` embeds the crop whole.
    pub segment_length: Option<usize>,
    pub overlap_fraction: f64,
}

impl System {
    pub fn from_checkpoint(name: impl Into<String>, ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let seg: usize = ckpt.meta.parsed("system.segment_length")?.unwrap_or(0);
        let overlap = ckpt.meta.parsed("system.overlap_fraction")?.unwrap_or(0.1);
        Ok(Self {
            name: name.into(),
            model: model.freeze(),
            segment_length: (seg > 0).then_some(seg),
            overlap_fraction: overlap,
        })
    }

    fn spec(&self) -> Result<Option<SegmentSpec>> {
        self.segment_length
            .map(|c| SegmentSpec::new(c, Overlap::Fraction(self.overlap_fraction)))
            .transpose()
    }

    /// Number of segments an utterance of `duration` samples is split into.
    pub fn segment_count(&self, duration: usize) -> Result<usize> {
        match self.spec()? {
            Some(spec) => spec.count(duration),
            None => Ok(1),
        }
    }

    /// Embeds the first `duration` samples of each utterance (pre-emphasised).
    pub fn embed(&self, utterances: &[&[f64]], duration: usize) -> Result<Vec<Vec<f64>>> {
        if duration == 0 {
            return Err(Error::InvalidInput("duration must be positive".into()));
        }
        let factor = self.model.config().downsampling_factor();
        let spec = self.spec()?;
        // rows to embed, and for each utterance the range of its rows
        let mut rows = Vec::new();
        let mut owners = Vec::with_capacity(utterances.len());
        for u in utterances {
            let x = pre_emphasize(&crop(u, 0, duration), PRE_EMPHASIS);
            let start = rows.len();
            match &spec {
                Some(spec) => rows.extend(segmentation::segment(&x, spec)?.segments),
                None => {
                    let padded = duration.div_ceil(factor) * factor;
                    rows.push(crop(&x, 0, padded));
                }
            }
            owners.push(start..rows.len());
        }
        let dim = self.model.config().embedding_dim;
        let mut embedded = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(EMBED_CHUNK) {
            let e = self.model.embed_waveforms(chunk, Mode::Eval)?;
            embedded.extend(e.to_vec().chunks(dim).map(<[f64]>::to_vec));
        }
        Ok(owners
            .into_iter()
            .map(|range| {
                let k = range.len() as f64;
                let mut mean = vec![0.0; dim];
                for row in &embedded[range] {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= k);
                mean
            })
            .collect())
    }
}

/// Cosine similarity of two embeddings; `None` when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Scores every trial: enrolment side cropped to `enrol_duration`, test side
/// to `test_duration`. Returns the grouped scores and the per-trial scores in
/// trial order.
pub fn score_trials(
    system: &System,
    utterances: &[Vec<f64>],
    trials: &TrialSet,
    enrol_duration: usize,
    test_duration: usize,
) -> Result<(ScoreSet, Vec<f64>)> {
    let refs: Vec<&[f64]> = utterances.iter().map(Vec::as_slice).collect();
    let enrol = system.embed(&refs, enrol_duration)?;
    let test = if test_duration == enrol_duration {
        enrol.clone()
    } else {
        system.embed(&refs, test_duration)?
    };
    score_embeddings(&enrol, &test, trials)
}

/// Cosine scores of precomputed embeddings.
pub fn score_embeddings(enrol: &[Vec<f64>], test: &[Vec<f64>], trials: &TrialSet) -> Result<(ScoreSet, Vec<f64>)> {
    let mut set = ScoreSet::default();
    let mut all = Vec::with_capacity(trials.len());
    for (i, t) in trials.trials.iter().enumerate() {
        let (Some(a), Some(b)) = (enrol.get(t.enrol), test.get(t.test)) else {
            return Err(Error::InvalidInput(format!("trial {i} refers to a missing utterance")));
        };
        let s = cosine(a, b).ok_or_else(|| Error::Numeric(format!("trial {i}: zero embedding")))?;
        if t.target {
            set.target.push(s);
        } else {
            set.impostor.push(s);
        }
        all.push(s);
    }
    Ok((set, all))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
}

/// False acceptance and false rejection rates at threshold `theta`.
pub fn error_rates(scores: &ScoreSet, theta: f64) -> (f64, f64) {
    let fa = scores.impostor.iter().filter(|&&s| s >= theta).count();
    let fr = scores.target.iter().filter(|&&s| s < theta).count();
    (
        fa as f64 / scores.impostor.len() as f64,
        fr as f64 / scores.target.len() as f64,
    )
}

/// Equal error rate from operating points listed in increasing threshold
/// order, as `(theta, far, frr)`.
///
/// The first exact crossing wins; otherwise the crossing is interpolated
/// linearly between the two bracketing points. The reported threshold is the
/// one minimising `|far - frr|`, the lowest on ties.
pub fn eer_from_points(points: &[(f64, f64, f64)]) -> Eer {
    let mut best = points[0];
    for &p in points {
        if (p.1 - p.2).abs() < (best.1 - best.2).abs() {
            best = p;
        }
    }
    if let Some(&(_, far, _)) = points.iter().find(|p| p.1 == p.2) {
        return Eer {
            eer: 100.0 * far,
            threshold: best.0,
        };
    }
    let cross = points
        .windows(2)
        .find(|w| w[0].1 - w[0].2 > 0.0 && w[1].1 - w[1].2 < 0.0)
        .expect("far - frr goes from 1 to -1");
    let (a, b) = (cross[0], cross[1]);
    let (da, db) = (a.1 - a.2, b.1 - b.2);
    let t = da / (da - db);
    Eer {
        eer: 100.0 * (a.1 + t * (b.1 - a.1)),
        threshold: best.0,
    }
}

/// Sweeps `-inf`, the midpoints of adjacent distinct pooled scores, and `+inf`.
pub fn compute_eer(scores: &ScoreSet) -> Result<Eer> {
    if scores.target.is_empty() || scores.impostor.is_empty() {
        return Err(Error::InvalidInput("EER needs target and impostor scores".into()));
    }
    if scores.target.iter().chain(&scores.impostor).any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut pooled: Vec<f64> = scores.target.iter().chain(&scores.impostor).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(pooled.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(f64::INFINITY);
    let points: Vec<_> = thresholds
        .into_iter()
        .map(|t| {
            let (far, frr) = error_rates(scores, t);
            (t, far, frr)
        })
        .collect();
    Ok(eer_from_points(&points))
}

/// A named test duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub label: String,
    pub samples: usize,
}

impl Condition {
    /// Full, three quarters, half and a quarter of `full` samples.
    pub fn standard(full: usize) -> Vec<Condition> {
        [("full", 4), ("3/4", 3), ("1/2", 2), ("1/4", 1)]
            .into_iter()
            .map(|(label, q)| Condition {
                label: label.to_string(),
                samples: full * q / 4,
            })
            .collect()
    }
}

/// One cell of the result grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub eer: Eer,
    pub targets: usize,
    pub impostors: usize,
    /// Per-trial scores in trial order.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub systems: Vec<String>,
    pub conditions: Vec<Condition>,
    /// `cells[system][condition]`.
    pub cells: Vec<Vec<Cell>>,
}

impl EvalReport {
    pub fn eer(&self, system: usize, condition: usize) -> f64 {
        self.cells[system][condition].eer.eer
    }

    /// Systems as rows, conditions as columns, EER percent with 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system");
        for c in &self.conditions {
            write!(out, ",{}", c.label).unwrap();
        }
        out.push('\n');
        for (name, row) in self.systems.iter().zip(&self.cells) {
            out.push_str(name);
            for cell in row {
                write!(out, ",{:.4}", cell.eer.eer).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Writes the grid to `path` and one `label score` dump per cell next to it.
    pub fn write(&self, path: &Path, trials: &TrialSet) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for (name, row) in self.systems.iter().zip(&self.cells) {
            for (cond, cell) in self.conditions.iter().zip(row) {
                let file = dir.join(format!("scores_{}_{}.txt", sanitize(name), sanitize(&cond.label)));
                let mut text = String::new();
                for (t, s) in trials.trials.iter().zip(&cell.scores) {
                    writeln!(text, "{} {s:?}", u8::from(t.target)).unwrap();
                }
                fs::write(&file, text).map_err(|e| Error::io(&file, e))?;
            }
        }
        Ok(())
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Parses a grid written by [`EvalReport::to_csv`] into `(systems, columns, values)`.
pub fn parse_report_csv(text: &str) -> std::result::Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty report")?;
    let mut cols = header.split(',');
    if cols.next() != Some("system") {
        return Err("header must start with `system`".into());
    }
    let columns: Vec<String> = cols.map(str::to_string).collect();
    let mut systems = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        let mut fields = line.split(',');
        systems.push(fields.next().ok_or("empty row")?.to_string());
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|e| format!("`{f}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if row.len() != columns.len() {
            return Err(format!("row has {} values for {} columns", row.len(), columns.len()));
        }
        values.push(row);
    }
    Ok((systems, columns, values))
}

/// Trial list lines `label enrol_path test_path`.
pub fn trials_to_text(trials: &TrialSet, names: &[String]) -> String {
    let mut out = String::new();
    for t in &trials.trials {
        writeln!(out, "{} {} {}", u8::from(t.target), names[t.enrol], names[t.test]).unwrap();
    }
    out
}

/// Scores every system at every condition. The enrolment side always uses
/// `enrol_duration`.
pub fn evaluate(
    systems: &[System],
    utterances: &[Vec<f64>],
    trials: &TrialSet,
    conditions: &[Condition],
    enrol_duration: usize,
) -> Result<EvalReport> {
    if systems.is_empty() || conditions.is_empty() {
        return Err(Error::InvalidInput("evaluation needs a system and a condition".into()));
    }
    let refs: Vec<&[f64]> = utterances.iter().map(Vec::as_slice).collect();
    let (targets, impostors) = trials.counts();
    let mut cells = Vec::new();
    for system in systems {
        let enrol = system.embed(&refs, enrol_duration)?;
        let mut row = Vec::new();
        for cond in conditions {
            let test = if cond.samples == enrol_duration {
                enrol.clone()
            } else {
                system.embed(&refs, cond.samples)?
            };
            let (set, scores) = score_embeddings(&enrol, &test, trials)?;
            row.push(Cell {
                eer: compute_eer(&set)?,
                targets,
                impostors,
                scores,
            });
        }
        cells.push(row);
    }
    Ok(EvalReport {
        systems: systems.iter().map(|s| s.name.clone()).collect(),
        conditions: conditions.to_vec(),
        cells,
    })
}

/// Mean EER over `conditions`, for checkpoint selection during training.
pub fn mean_eer(
    system: &System,
    utterances: &[Vec<f64>],
    trials: &TrialSet,
    conditions: &[Condition],
    enrol_duration: usize,
) -> Result<f64> {
    let report = evaluate(std::slice::from_ref(system), utterances, trials, conditions, enrol_duration)?;
    Ok(report.cells[0].iter().map(|c| c.eer.eer).sum::<f64>() / conditions.len() as f64)
}
