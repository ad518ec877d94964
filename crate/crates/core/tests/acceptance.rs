//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Positional arguments
//! restrict the run to criteria whose key contains one of them, e.g.
//! `cargo test --release --test acceptance -- eer determinism`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::gradcases::{self, INSTANCES};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::Rng;
use segagg_core::evaluation::{compute_eer, eer_from_points, EvalReport, ScoreSet};
use segagg_core::experiment::{reproduce, ExperimentConfig};
use segagg_core::model::{BlockGroup, Head, Model, ModelConfig};
use segagg_core::numerics::{self as nx, Mode, Tensor};
use segagg_core::segmentation::{aggregate, segment, Overlap, SegmentSpec};
use segagg_core::training::{embed_batch, loss_sa, loss_ts_terms};

type Outcome = Result<String, String>;

struct Criterion {
    key: &'static str,
    title: &'static str,
    run: fn() -> Outcome,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- trend

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FULL_MARGIN: f64 = 2.0;
const BUDGET_SECS_8_CORES: f64 = 30.0 * 60.0;

/// Desk corpus and training budget shared by every seed; only the seeds change.
const TREND_CONFIG: &str = "\
corpus.train_speakers = 20
corpus.val_speakers = 10
corpus.test_speakers = 20
corpus.min_duration = 3300
train.steps = 600
train.eval_interval = 100
eval.validation_trials = 0
eval.systems = baseline,sa
";

fn trend_run(seed: u64, root: &Path) -> Result<EvalReport, String> {
    let dir = root.join(format!("seed{seed}"));
    let text = format!(
        "{TREND_CONFIG}corpus.seed = {seed}\ntrain.seed = {seed}\neval.seed = {seed}\n\
         paths.corpus_dir = {0}/corpus\npaths.checkpoint_dir = {0}/checkpoints\npaths.report = {0}/eer.csv\n",
        dir.display()
    );
    let cfg = ExperimentConfig::parse(&text).map_err(|e| e.to_string())?;
    reproduce(&cfg).map_err(|e| format!("seed {seed}: {e}"))
}

struct TrendResult {
    reports: Vec<(u64, EvalReport)>,
    elapsed: f64,
}

fn trend_results() -> &'static Result<TrendResult, String> {
    static CELL: std::sync::OnceLock<Result<TrendResult, String>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let reports = std::thread::scope(|s| {
            let handles: Vec<_> = SEEDS
                .iter()
                .map(|&seed| {
                    let root = root.path();
                    s.spawn(move || trend_run(seed, root).map(|r| (seed, r)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| "trend worker panicked".to_string())?)
                .collect::<Result<Vec<_>, String>>()
        })?;
        Ok(TrendResult {
            reports,
            elapsed: start.elapsed().as_secs_f64(),
        })
    })
}

fn cell(report: &EvalReport, system: &str, condition: &str) -> Result<f64, String> {
    let s = report.systems.iter().position(|n| n == system).ok_or(format!("no system {system}"))?;
    let c = report
        .conditions
        .iter()
        .position(|c| c.label == condition)
        .ok_or(format!("no condition {condition}"))?;
    Ok(report.eer(s, c))
}

fn full_scale() -> Outcome {
    let trend = trend_results().as_ref().map_err(Clone::clone)?;
    for (seed, r) in &trend.reports {
        let labels: Vec<&str> = r.conditions.iter().map(|c| c.label.as_str()).collect();
        ensure(labels == ["full", "3/4", "1/2", "1/4"], || format!("seed {seed}: columns {labels:?}"))?;
    }
    Ok(format!(
        "absolute numbers not reproducible without the full-scale corpus; desk substitute produced {} grids of {}x4",
        trend.reports.len(),
        trend.reports[0].1.systems.len()
    ))
}

fn trend() -> Outcome {
    let trend = trend_results().as_ref().map_err(Clone::clone)?;
    let mut wins = 0;
    let mut lines = Vec::new();
    let (mut base_full, mut sys_full): (Vec<f64>, BTreeMap<String, Vec<f64>>) = (Vec::new(), BTreeMap::new());
    for (seed, r) in &trend.reports {
        let (b, s) = (cell(r, "baseline", "1/4")?, cell(r, "sa", "1/4")?);
        if s < b {
            wins += 1;
        }
        base_full.push(cell(r, "baseline", "full")?);
        for name in r.systems.iter().filter(|n| n.as_str() != "baseline") {
            sys_full.entry(name.clone()).or_default().push(cell(r, name, "full")?);
        }
        lines.push(format!("seed {seed}: 1/4 baseline {b:.2} sa {s:.2}"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base = mean(&base_full);
    let (best_name, best) = sys_full
        .iter()
        .map(|(n, v)| (n.clone(), mean(v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("no segment-aggregation system in the grid")?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let budget = BUDGET_SECS_8_CORES * 8.0 / cores as f64;
    let detail = format!(
        "{}; sa better at 1/4 in {wins}/{} seeds; mean full EER baseline {base:.2}, {best_name} {best:.2}; \
         {:.0}s on {cores} core(s), budget {budget:.0}s",
        lines.join("; "),
        trend.reports.len(),
        trend.elapsed
    );
    let ok = wins >= 4 && best <= base + FULL_MARGIN && trend.elapsed <= budget;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn gradients() -> Outcome {
    let mut worst = (0.0f64, "");
    for (name, case) in gradcases::OPS.iter().chain(&gradcases::LOSSES) {
        for seed in 0..INSTANCES {
            let err = case(seed);
            ensure(err <= FD_REL_TOL, || format!("{name} seed {seed}: relative error {err:e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Ok(format!(
        "{} operations + {} losses x {INSTANCES} instances, worst {:.2e} ({})",
        gradcases::OPS.len(),
        gradcases::LOSSES.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------- segmentation

fn segmentation() -> Outcome {
    let spec = SegmentSpec::new(2, Overlap::Samples(1)).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..6).map(f64::from).collect();
    let set = segment(&x, &spec).map_err(|e| e.to_string())?;
    ensure(set.len() == 5 && set.starts == [0, 1, 2, 3, 4], || format!("worked example gave {:?}", set.starts))?;

    let mut runner = TestRunner::new_with_rng(
        RunnerConfig {
            cases: 1000,
            failure_persistence: None,
            ..RunnerConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let strategy = (1usize..300).prop_flat_map(|c| (Just(c), c + 1..c + 2000, 0..c));
    runner
        .run(&strategy, |(c, f, overlap)| {
            let spec = SegmentSpec::new(c, Overlap::Samples(overlap)).unwrap();
            let hop = spec.hop().unwrap();
            let x: Vec<f64> = (0..f).map(|i| i as f64).collect();
            let set = segment(&x, &spec).unwrap();
            prop_assert_eq!(set.starts[0], 0);
            prop_assert_eq!(*set.starts.last().unwrap() + c, f);
            let mut covered = vec![false; f];
            for (w, (&s, seg)) in set.starts.windows(2).zip(set.starts.iter().zip(&set.segments)) {
                prop_assert!(w[1] > w[0] && w[1] - w[0] <= hop);
                prop_assert_eq!(seg.as_slice(), &x[s..s + c]);
            }
            for &s in &set.starts {
                covered[s..s + c].iter_mut().for_each(|v| *v = true);
            }
            prop_assert!(covered.iter().all(|&v| v));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("worked example -> 5 segments at 0..4; coverage and end-anchoring hold on 1000 random triples".into())
}

// ---------------------------------------------------------------- aggregation

fn aggregation() -> Outcome {
    let mut r = rng(77);
    let mut worst_perm = 0.0f64;
    for trial in 0..200 {
        let k = 1 + trial % 11;
        let embs: Vec<Tensor> = (0..k).map(|_| constant(&mut r, &[8], 3.0)).collect();
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let shuffled: Vec<Tensor> = order.iter().map(|&i| embs[i].clone()).collect();
        let a = aggregate(&embs).map_err(|e| e.to_string())?.to_vec();
        let b = aggregate(&shuffled).map_err(|e| e.to_string())?.to_vec();
        worst_perm = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst_perm, f64::max);
    }
    ensure(worst_perm <= 1e-12, || format!("permutation changed the mean by {worst_perm:e}"))?;

    let single = constant(&mut r, &[6], 2.0);
    let same = aggregate(std::slice::from_ref(&single)).map_err(|e| e.to_string())?.to_vec();
    ensure(same == single.to_vec(), || "K=1 is not the identity".into())?;

    let mut worst_fd = 0.0f64;
    for k in 1..=8 {
        let embs: Vec<Tensor> = (0..k).map(|_| param(&mut r, &[5], 1.0)).collect();
        let w = constant(&mut r, &[5], 1.0);
        let build = || project(&aggregate(&embs).unwrap(), &w);
        build().backward().map_err(|e| e.to_string())?;
        let expected: Vec<f64> = w.to_vec().iter().map(|v| v / k as f64).collect();
        for e in &embs {
            let g = e.grad().ok_or("segment embedding received no gradient")?;
            let dev = g.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(dev <= 1e-15, || format!("K={k}: autodiff fan-out off 1/K by {dev:e}"))?;
        }
        let numeric = numeric_gradients(&embs, &|| build().item().unwrap(), FD_STEP);
        for n in &numeric {
            worst_fd = worst_fd.max(relative_error(n, &expected));
        }
    }
    ensure(worst_fd <= FD_REL_TOL, || format!("finite-difference fan-out error {worst_fd:e}"))?;
    Ok(format!(
        "permutation max deviation {worst_perm:.1e}; K=1 identity exact; fan-out 1/K for K=1..8, finite differences within {worst_fd:.1e}"
    ))
}

// ---------------------------------------------------------------- EER oracle

/// Every distinct threshold that can change the decision, scanned with
/// per-score counting.
fn oracle_eer(target: &[f64], impostor: &[f64]) -> (f64, f64) {
    let mut values: Vec<f64> = target.iter().chain(impostor).copied().collect();
    values.sort_by(f64::total_cmp);
    let mut distinct: Vec<f64> = Vec::new();
    for v in values {
        if distinct.last() != Some(&v) {
            distinct.push(v);
        }
    }
    let mut thresholds = vec![f64::NEG_INFINITY];
    for i in 1..distinct.len() {
        let (lo, hi) = (distinct[i - 1], distinct[i]);
        thresholds.push(lo + (hi - lo) / 2.0);
    }
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let mut fa = 0usize;
            for &s in impostor {
                if s >= t {
                    fa += 1;
                }
            }
            let mut fr = 0usize;
            for &s in target {
                if s < t {
                    fr += 1;
                }
            }
            (t, fa as f64 / impostor.len() as f64, fr as f64 / target.len() as f64)
        })
        .collect();
    let e = eer_from_points(&points);
    (e.eer, e.threshold)
}

fn eer_oracle() -> Outcome {
    let mut r = rng(2024);
    for set in 0..200 {
        let n_t = r.random_range(1..=50);
        let n_i = r.random_range(1..=100 - n_t);
        // coarse grids give ties, fine ones give distinct scores
        let levels = [5.0, 20.0, 1e6][set % 3];
        let mut draw = |shift: f64| ((r.random_range(-1.0..1.0) + shift) * levels).round() / levels;
        let target: Vec<f64> = (0..n_t).map(|_| draw(0.3)).collect();
        let impostor: Vec<f64> = (0..n_i).map(|_| draw(-0.3)).collect();
        let got = compute_eer(&ScoreSet {
            target: target.clone(),
            impostor: impostor.clone(),
        })
        .map_err(|e| e.to_string())?;
        let want = oracle_eer(&target, &impostor);
        ensure(got.eer.to_bits() == want.0.to_bits() && got.threshold.to_bits() == want.1.to_bits(), || {
            format!("set {set}: got ({}, {}) oracle ({}, {})", got.eer, got.threshold, want.0, want.1)
        })?;
    }
    for n in 1..=20 {
        let target: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.01).collect();
        let impostor: Vec<f64> = (0..n + 3).map(|i| -0.5 + i as f64 * 0.01).collect();
        let e = compute_eer(&ScoreSet { target, impostor }).map_err(|e| e.to_string())?;
        ensure(e.eer == 0.0, || format!("perfect separation gave {}%", e.eer))?;
    }
    Ok("200 random sets (size <= 100, with ties) match the sweep oracle exactly; perfectly separated sets give 0%".into())
}

// ---------------------------------------------------------------- loss reductions

fn tiny_config(heads: usize) -> ModelConfig {
    ModelConfig {
        input_length: 243,
        first_conv_channels: 3,
        block_groups: vec![BlockGroup { blocks: 2, channels: 4 }],
        gru_hidden: 4,
        embedding_dim: 4,
        num_speakers: 5,
        leaky_slope: 0.3,
        segment_heads: heads,
    }
}

fn loss_reductions() -> Outcome {
    let mut r = rng(5);
    for trial in 0..50 {
        let batch = 1 + trial % 6;
        let agg = constant(&mut r, &[batch, 7], 4.0);
        let segs: Vec<Tensor> = (0..3).map(|_| constant(&mut r, &[batch, 7], 4.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..7)).collect();
        let base = nx::softmax_cce(&agg, &labels).and_then(|t| t.item()).map_err(|e| e.to_string())?;
        let sa = loss_sa(&agg, &segs, &labels, 0.0).and_then(|t| t.item()).map_err(|e| e.to_string())?;
        ensure(sa.to_bits() == base.to_bits(), || format!("W=0 gave {sa} against {base}"))?;
    }

    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..10u64 {
        let cfg = tiny_config(0);
        let student = Model::build(&cfg, seed).map_err(|e| e.to_string())?;
        let crops: Vec<Vec<f64>> = (0..3).map(|_| uniform(&mut r, 243, 1.0)).collect();
        student.embed_waveforms(&crops, Mode::Train).map_err(|e| e.to_string())?;
        let teacher = Model::build(&cfg, seed + 100).map_err(|e| e.to_string())?;
        teacher.copy_from(&student).map_err(|e| e.to_string())?;
        let teacher = teacher.freeze();

        let t_emb = teacher.embed_waveforms(&crops, Mode::Eval).map_err(|e| e.to_string())?;
        let probs = nx::softmax(&teacher.forward_logits(&t_emb, Head::Aggregate).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let s_emb = embed_batch(&student, &crops, None, Mode::Eval).map_err(|e| e.to_string())?.aggregate;
        let s_logits = student.forward_logits(&s_emb, Head::Aggregate).map_err(|e| e.to_string())?;
        let terms = loss_ts_terms(&t_emb, &probs, &s_emb, &s_logits).map_err(|e| e.to_string())?;
        let entropy: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let cos = terms.cosine.item().map_err(|e| e.to_string())?.abs();
        let soft = (terms.soft.item().map_err(|e| e.to_string())? - entropy).abs();
        ensure(cos <= 1e-9 && soft <= 1e-9, || format!("seed {seed}: cosine term {cos:e}, soft-label gap {soft:e}"))?;
        worst = (worst.0.max(cos), worst.1.max(soft));
    }
    Ok(format!(
        "W=0 bit-identical to aggregate CCE on 50 batches; self-distillation cosine term <= {:.1e}, soft term within {:.1e} of teacher entropy",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- determinism

const TINY: &str = "\
corpus.train_speakers = 4
corpus.val_speakers = 2
corpus.test_speakers = 3
corpus.utterances_per_speaker = 3
corpus.min_duration = 200
corpus.max_duration = 400
model.input_length = 243
model.first_conv_channels = 4
model.block_groups = 1x4,1x6
model.gru_hidden = 4
model.embedding_dim = 4
model.segment_heads = 4
train.segment_length = 81
train.steps = 6
train.batch_size = 4
train.eval_interval = 3
eval.validation_trials = 10
paths.corpus_dir = corpus
paths.checkpoint_dir = checkpoints
paths.report = report/eer.csv
";

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.extension().is_some_and(|e| e == "log") {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("exp.cfg");
    fs::write(&cfg_path, TINY).map_err(|e| e.to_string())?;
    let run = || -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let cfg = ExperimentConfig::load(&cfg_path).map_err(|e| e.to_string())?;
        reproduce(&cfg).map_err(|e| e.to_string())?;
        let mut files = snapshot(&dir.path().join("checkpoints"))?;
        for (k, v) in snapshot(&dir.path().join("report"))? {
            files.insert(Path::new("report").join(k), v);
        }
        Ok(files)
    };
    let first = run()?;
    let second = run()?;
    let count = |ext: &str| first.keys().filter(|p| p.to_string_lossy().ends_with(ext)).count();
    ensure(count(".ckpt") == 6 && first.keys().any(|p| p.to_string_lossy().contains("scores_")), || {
        format!("unexpected artifact set {:?}", first.keys().collect::<Vec<_>>())
    })?;
    ensure(first.keys().eq(second.keys()), || "artifact sets differ".into())?;
    for (path, bytes) in &first {
        ensure(&second[path] == bytes, || format!("{} differs between runs", path.display()))?;
    }
    Ok(format!(
        "{} checkpoints, {} score dumps and the report byte-identical across two runs",
        count(".ckpt"),
        first.keys().filter(|p| p.to_string_lossy().contains("scores_")).count()
    ))
}

// ---------------------------------------------------------------- driver

const CRITERIA: [Criterion; 8] = [
    Criterion { key: "gradients", title: "gradient correctness", run: gradients },
    Criterion { key: "segmentation", title: "segmentation oracle", run: segmentation },
    Criterion { key: "aggregation", title: "aggregation invariants", run: aggregation },
    Criterion { key: "eer", title: "EER oracle equivalence", run: eer_oracle },
    Criterion { key: "losses", title: "loss reductions", run: loss_reductions },
    Criterion { key: "determinism", title: "determinism", run: determinism },
    Criterion { key: "trend", title: "trend reproduction", run: trend },
    Criterion { key: "full-scale", title: "full-scale EER numbers", run: full_scale },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.key.contains(f.as_str())) {
            println!("SKIP {}", c.title);
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} ({secs:.1}s): {detail}", c.title),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({secs:.1}s): {detail}", c.title);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
