//! End-to-end pipeline, inference timing, λ sweeps and reports.
//!
//! A sweep point runs: prune from the dense teacher, compact, verify the
//! compact model against the masked one, optionally fill, evaluate, and
//! finally time the result against the dense teacher on one thread.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::compactor::{self, CompactPlan, FillSettings};
use crate::config::RunConfig;
use crate::data::{gen_synth, Batch, DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::pruning::{attach_method, density_report, Method};
use crate::trainer::{evaluate, fine_prune, history_csv, train_dense, HistoryRow, PruneRun, TrainOutcome};

pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SPEEDUP_FILE: &str = "accuracy_vs_speedup.csv";
pub const DENSITY_FILE: &str = "accuracy_vs_density.csv";
pub const REPORT_FILE: &str = "report.md";

/// Generates or reads the task split and checks it fits the model.
pub fn load_data(cfg: &RunConfig) -> Result<DataSplit> {
    let data = gen_synth(&cfg.task)?;
    let classes = data.train.n_classes();
    if classes > cfg.model.n_classes {
        return Err(Error::Config(format!(
            "dataset has {classes} labels but model.n_classes = {}",
            cfg.model.n_classes
        )));
    }
    Ok(data)
}

/// Trains the dense model every pruning run starts from (or the large
/// teacher when `large`).
pub fn train_teacher(cfg: &RunConfig, data: &DataSplit, seed: u64, large: bool) -> Result<TrainOutcome> {
    let config = if large { cfg.model.large_teacher() } else { cfg.model.clone() };
    let model = Model::new(config, seed)?;
    train_dense(model, &data.train, &data.dev, cfg.teacher_epochs, seed, &cfg.optim)
}

/// Dense models shared by the points of one seed.
#[derive(Debug, Clone)]
pub struct Teachers {
    pub seed: u64,
    pub base: Model,
    pub base_accuracy: f64,
    pub large: Option<Model>,
}

impl Teachers {
    pub fn train(cfg: &RunConfig, data: &DataSplit, seed: u64) -> Result<Self> {
        let base = train_teacher(cfg, data, seed, false)?;
        let large = if cfg.method_list().iter().any(|m| m.large_teacher()) {
            Some(train_teacher(cfg, data, seed, true)?.best)
        } else {
            None
        };
        Ok(Self {
            seed,
            base_accuracy: base.best_metrics.accuracy,
            base: base.best,
            large,
        })
    }

    /// Distillation teacher for `method`, if it uses one.
    pub fn teacher_for(&self, method: Method) -> Option<&Model> {
        if !method.uses_teacher() {
            None
        } else if method.large_teacher() {
            self.large.as_ref()
        } else {
            Some(&self.base)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSpec {
    pub method: Method,
    pub block_size: Option<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub rewind: bool,
}

impl PointSpec {
    pub fn label(&self) -> String {
        let bs = self.block_size.map_or("def".to_string(), |b| b.to_string());
        format!(
            "{}-b{bs}-l{:.3e}-s{}{}",
            self.method.name(),
            self.lambda,
            self.seed,
            if self.rewind { "-rewind" } else { "" }
        )
    }
}

/// Builds the pruning-run options for `spec`.
pub fn prune_run(cfg: &RunConfig, spec: &PointSpec) -> PruneRun {
    let mut schedule = cfg.schedule;
    schedule.lambda_end = spec.lambda;
    PruneRun {
        schedule,
        reg_unit: cfg.reg_unit(spec.method, spec.block_size),
        alpha: if spec.method.uses_teacher() { cfg.alpha } else { 1.0 },
        temperature: cfg.temperature,
        seed: spec.seed,
        optim: cfg.optim.clone(),
        protected: Vec::new(),
        floor: 0.0,
    }
}

/// Fine-prunes a copy of `start` with the method's pattern attached.
/// With `protect_from`, heads kept by that earlier run are held above the
/// threshold throughout.
pub fn prune_point(
    cfg: &RunConfig,
    data: &DataSplit,
    start: &Model,
    teacher: Option<&Model>,
    spec: &PointSpec,
    protect_from: Option<&Model>,
) -> Result<TrainOutcome> {
    let mut model = start.clone();
    attach_method(&mut model, spec.method, spec.block_size)?;
    let mut run = prune_run(cfg, spec);
    if let Some(first) = protect_from {
        let protection = compactor::rewind(first);
        let (entries, floor) = compactor::protected_entries(&model, &protection)?;
        run.protected = entries;
        run.floor = floor;
    }
    fine_prune(model, teacher, &data.train, &data.dev, &run)
}

/// Result of compacting (and possibly filling) a pruned model.
#[derive(Debug, Clone)]
pub struct Finished {
    pub plan: CompactPlan,
    pub compact: Model,
    pub deviation: f64,
    /// The model that gets evaluated and timed.
    pub model: Model,
    pub filled: bool,
}

pub fn finish_point(
    cfg: &RunConfig,
    data: &DataSplit,
    pruned: &Model,
    teacher: Option<&Model>,
    method: Method,
    seed: u64,
) -> Result<Finished> {
    let plan = compactor::plan(pruned);
    let compact = compactor::compact(pruned, &plan)?;
    let deviation = compactor::verify_equivalence(pruned, &compact, 4, seed)?;
    let (model, filled) = if method.fills() {
        let settings = FillSettings {
            teacher,
            train: &data.train,
            steps: cfg.fill_steps,
            alpha: if teacher.is_some() { cfg.alpha } else { 1.0 },
            temperature: cfg.temperature,
            seed,
            optim: cfg.optim.clone(),
        };
        (compactor::hybrid_fill(pruned, &plan, &settings)?.model, true)
    } else {
        (compact.clone(), false)
    };
    Ok(Finished {
        plan,
        compact,
        deviation,
        model,
        filled,
    })
}

/// `n` dev examples (cycling when the split is smaller) as one batch.
pub fn timing_batch(dev: &Dataset, n: usize) -> Batch {
    let idx: Vec<usize> = (0..n).map(|i| i % dev.len().max(1)).collect();
    dev.batch(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Single-threaded wall-clock forward time: `warmup` discarded runs, then
/// the median of `reps` timed runs.
pub fn time_inference(model: &Model, batch: &Batch, warmup: usize, reps: usize) -> Result<Timing> {
    par::single_threaded(|| {
        for _ in 0..warmup {
            model.logits(batch)?;
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            let out = model.logits(batch)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Timing {
            median_ms: sorted[sorted.len() / 2],
            samples_ms: samples,
        })
    })
}

/// Measured numbers for one successful point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub density: f64,
    pub nonzero: usize,
    pub dense_total: usize,
    pub nonempty_heads: usize,
    pub total_heads: usize,
    /// Total over non-empty heads; `None` when every head is empty.
    pub head_compression: Option<f64>,
    pub ffn_dims: usize,
    pub accuracy: f64,
    /// Accuracy of the masked model before compaction and filling.
    pub masked_accuracy: f64,
    pub teacher_accuracy: f64,
    pub deviation: f64,
    pub latency_ms: f64,
    pub dense_latency_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub label: String,
    pub spec: PointSpec,
    pub metrics: Option<PointMetrics>,
    pub error: Option<String>,
}

/// In-memory outcome of one point, before timing.
#[derive(Debug, Clone)]
pub struct PointRun {
    pub spec: PointSpec,
    pub pruned: Model,
    pub finished: Finished,
    pub masked_accuracy: f64,
    pub accuracy: f64,
    pub history: Vec<HistoryRow>,
}

fn run_one(
    cfg: &RunConfig,
    data: &DataSplit,
    teachers: &Teachers,
    spec: &PointSpec,
    protect_from: Option<&Model>,
) -> Result<PointRun> {
    let teacher = teachers.teacher_for(spec.method);
    let outcome = prune_point(cfg, data, &teachers.base, teacher, spec, protect_from)?;
    let finished = finish_point(cfg, data, &outcome.best, teacher, spec.method, spec.seed)?;
    // measured on the stored model so the checkpoint reproduces it exactly
    let accuracy = evaluate(&finished.model, &data.dev)?.accuracy;
    Ok(PointRun {
        spec: *spec,
        masked_accuracy: outcome.best_metrics.accuracy,
        accuracy,
        pruned: outcome.best,
        finished,
        history: outcome.history,
    })
}

/// Runs a point, plus its rewound twin when `spec.rewind` is set.
pub fn run_point(cfg: &RunConfig, data: &DataSplit, teachers: &Teachers, spec: &PointSpec) -> Vec<(PointSpec, Result<PointRun>)> {
    let plain = PointSpec { rewind: false, ..*spec };
    let first = run_one(cfg, data, teachers, &plain, None);
    if !spec.rewind {
        return vec![(plain, first)];
    }
    let second = match &first {
        Ok(f) => run_one(cfg, data, teachers, spec, Some(&f.pruned)),
        Err(e) => Err(Error::Config(format!("first run failed: {e}"))),
    };
    vec![(plain, first), (*spec, second)]
}

/// One calibration probe: `(lambda, final density)`.
pub type Probe = (f64, f64);

/// Searches a λ whose short run lands near `cfg.target_density`: scale by 4
/// until the target is bracketed, then bisect twice in log space.
pub fn calibrate_lambda(cfg: &RunConfig, data: &DataSplit, teachers: &Teachers, method: Method, block_size: Option<usize>) -> Result<(f64, Vec<Probe>)> {
    let mut short = cfg.clone();
    short.schedule.epochs = cfg.calibration_epochs.max(1);
    let mut probes = Vec::new();
    let mut probe = |lambda: f64| -> Result<f64> {
        let spec = PointSpec {
            method,
            block_size,
            lambda,
            seed: teachers.seed,
            rewind: false,
        };
        let out = prune_point(&short, data, &teachers.base, teachers.teacher_for(method), &spec, None)?;
        let d = density_report(&out.model).density;
        probes.push((lambda, d));
        Ok(d)
    };
    let target = cfg.target_density;
    let start = if cfg.lambda > 0.0 { cfg.lambda } else { 1e-3 };
    let d0 = probe(start)?;
    let (mut lo, mut hi) = (start, start);
    let mut bracketed = false;
    if d0 > target {
        for _ in 0..6 {
            hi *= 4.0;
            if probe(hi)? <= target {
                bracketed = true;
                break;
            }
            lo = hi;
        }
    } else {
        for _ in 0..6 {
            lo /= 4.0;
            if probe(lo)? >= target {
                bracketed = true;
                break;
            }
            hi = lo;
        }
    }
    // an unreachable target (e.g. above the density λ = 0 settles at) keeps
    // the closest probe
    for _ in 0..if bracketed { 2 } else { 0 } {
        let mid = (lo * hi).sqrt();
        if probe(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = probes
        .iter()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .map_or(start, |p| p.0);
    Ok((best, probes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub seed: u64,
    pub accuracy: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub method: Method,
    pub block_size: Option<usize>,
    pub seed: u64,
    pub lambda: f64,
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config: RunConfig,
    pub teachers: Vec<TeacherSummary>,
    pub calibration: Vec<CalibrationSummary>,
    pub points: usize,
    pub failed: usize,
    pub results: Vec<BenchResult>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    checkpoint::write_atomic(path, text.as_bytes())
}

fn run_json(spec: &PointSpec, cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "spec": spec, "config": cfg })
}

/// Trains teachers, runs every point and writes the sweep directory.
/// Failing points are recorded with their error and do not stop the sweep.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<SweepSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = load_data(cfg)?;
    let mut teachers = Vec::new();
    for &seed in &cfg.seeds {
        let t = Teachers::train(cfg, &data, seed)?;
        checkpoint::save(
            &out.join("teachers").join(format!("seed{seed}")),
            &t.base,
            serde_json::json!({ "seed": seed, "role": "teacher" }),
            BTreeMap::from([("accuracy".to_string(), t.base_accuracy)]),
        )?;
        teachers.push(t);
    }
    let mut specs = Vec::new();
    let mut calibration = Vec::new();
    for t in &teachers {
        for method in cfg.method_list() {
            for bs in cfg.block_size_list() {
                let center = if cfg.calibrate && cfg.lambdas.is_empty() {
                    let (l, probes) = calibrate_lambda(cfg, &data, t, method, bs)?;
                    calibration.push(CalibrationSummary {
                        method,
                        block_size: bs,
                        seed: t.seed,
                        lambda: l,
                        probes,
                    });
                    l
                } else {
                    cfg.lambda
                };
                for lambda in cfg.lambda_list(center) {
                    specs.push((
                        t,
                        PointSpec {
                            method,
                            block_size: bs,
                            lambda,
                            seed: t.seed,
                            rewind: cfg.rewind,
                        },
                    ));
                }
            }
        }
    }
    let runs: Vec<(PointSpec, Result<PointRun>)> = par::with_threads(cfg.threads, || {
        par::map(&specs, |(t, spec)| run_point(cfg, &data, t, spec))
            .into_iter()
            .flatten()
            .collect()
    });

    // timing happens after all training so the points do not compete
    let tbatch = timing_batch(&data.dev, cfg.timing.batch);
    let mut teacher_summaries = Vec::new();
    let mut dense_ms = BTreeMap::new();
    for t in &teachers {
        let ms = time_inference(&t.base, &tbatch, cfg.timing.warmup, cfg.timing.reps)?.median_ms;
        dense_ms.insert(t.seed, ms);
        teacher_summaries.push(TeacherSummary {
            seed: t.seed,
            accuracy: t.base_accuracy,
            latency_ms: ms,
        });
    }
    let mut results = Vec::new();
    for (spec, run) in runs {
        let label = spec.label();
        let teacher_acc = teachers.iter().find(|t| t.seed == spec.seed).map_or(f64::NAN, |t| t.base_accuracy);
        let r = run.and_then(|p| {
            let latency = time_inference(&p.finished.model, &tbatch, cfg.timing.warmup, cfg.timing.reps)?.median_ms;
            let dense = dense_ms[&spec.seed];
            let rep = density_report(&p.finished.model);
            let metrics = PointMetrics {
                density: rep.density,
                nonzero: rep.nonzero,
                dense_total: rep.dense_total,
                nonempty_heads: rep.nonempty_heads,
                total_heads: rep.total_heads,
                head_compression: rep.head_compression.is_finite().then_some(rep.head_compression),
                ffn_dims: rep.ffn_dims,
                accuracy: p.accuracy,
                masked_accuracy: p.masked_accuracy,
                teacher_accuracy: teacher_acc,
                deviation: p.finished.deviation,
                latency_ms: latency,
                dense_latency_ms: dense,
                speedup: dense / latency,
            };
            let dir = out.join("points").join(&label);
            let m: BTreeMap<String, f64> = [
                ("accuracy", metrics.accuracy),
                ("density", metrics.density),
                ("speedup", metrics.speedup),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            checkpoint::save(&dir, &p.finished.model, run_json(&spec, cfg), m)?;
            write_text(&dir.join("history.csv"), &history_csv(&p.history))?;
            Ok(metrics)
        });
        results.push(match r {
            Ok(m) => BenchResult {
                label,
                spec,
                metrics: Some(m),
                error: None,
            },
            Err(e) => BenchResult {
                label,
                spec,
                metrics: None,
                error: Some(e.to_string()),
            },
        });
    }
    sort_by_density(&mut results);
    write_results(out, &results)?;
    let summary = SweepSummary {
        config: cfg.clone(),
        teachers: teacher_summaries,
        calibration,
        points: results.len(),
        failed: results.iter().filter(|r| r.error.is_some()).count(),
        results,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::ckpt(out, e.to_string()))?;
    write_text(&out.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}

fn sort_by_density(results: &mut [BenchResult]) {
    results.sort_by(|a, b| {
        let key = |r: &BenchResult| r.metrics.as_ref().map_or(f64::INFINITY, |m| m.density);
        key(a).total_cmp(&key(b)).then_with(|| a.label.cmp(&b.label))
    });
}

pub const TRADEOFF_HEADER: &str = "label,method,block_size,lambda,seed,rewind,status,density,nonzero,nonempty_heads,total_heads,ffn_dims,accuracy,masked_accuracy,teacher_accuracy,latency_ms,dense_latency_ms,speedup";

pub fn tradeoff_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(TRADEOFF_HEADER);
    s.push('\n');
    for r in results {
        let p = &r.spec;
        let bs = p.block_size.map_or(String::new(), |b| b.to_string());
        let _ = write!(s, "{},{},{bs},{},{},{}", r.label, p.method.name(), p.lambda, p.seed, p.rewind);
        match &r.metrics {
            Some(m) => {
                let _ = writeln!(
                    s,
                    ",ok,{},{},{},{},{},{},{},{},{},{},{}",
                    m.density,
                    m.nonzero,
                    m.nonempty_heads,
                    m.total_heads,
                    m.ffn_dims,
                    m.accuracy,
                    m.masked_accuracy,
                    m.teacher_accuracy,
                    m.latency_ms,
                    m.dense_latency_ms,
                    m.speedup
                );
            }
            None => s.push_str(",failed,,,,,,,,,,,\n"),
        }
    }
    s
}

fn write_results(out: &Path, results: &[BenchResult]) -> Result<()> {
    let mut jsonl = String::new();
    for r in results {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::ckpt(out, e.to_string()))?);
        jsonl.push('\n');
    }
    write_text(&out.join(RESULTS_FILE), &jsonl)?;
    write_text(&out.join(TRADEOFF_FILE), &tradeoff_csv(results))
}

pub fn read_results(dir: &Path) -> Result<Vec<BenchResult>> {
    let path = dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::ckpt(&path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// One table row, with the census recomputed from the stored checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub method: String,
    pub block_size: Option<usize>,
    pub lambda: f64,
    pub density: f64,
    pub nonzero: usize,
    pub nonempty_heads: usize,
    pub total_heads: usize,
    pub ffn_dims: usize,
    pub accuracy: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub failed: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn series_name(spec: &PointSpec) -> String {
    let mut s = spec.method.name().to_string();
    if let Some(b) = spec.block_size {
        let _ = write!(s, "-{b}");
    }
    if spec.rewind {
        s.push_str("-rewind");
    }
    s
}

/// Reads a sweep directory and writes the two trade-off curves plus a
/// markdown table. Census numbers come from the point checkpoints, and a
/// disagreement with the recorded results is an error.
pub fn report(dir: &Path) -> Result<Report> {
    let results = read_results(dir)?;
    if results.is_empty() {
        return Err(Error::Config(format!("{} holds no results", dir.display())));
    }
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for r in &results {
        let Some(m) = &r.metrics else {
            failed.push(r.label.clone());
            continue;
        };
        let ckpt = dir.join("points").join(&r.label);
        let loaded = checkpoint::load(&ckpt)?;
        let rep = density_report(&loaded.model);
        if rep.nonzero != m.nonzero || rep.nonempty_heads != m.nonempty_heads || rep.ffn_dims != m.ffn_dims {
            return Err(Error::ckpt(
                &ckpt,
                format!(
                    "census {} nonzero / {} heads / {} dims disagrees with results ({} / {} / {})",
                    rep.nonzero, rep.nonempty_heads, rep.ffn_dims, m.nonzero, m.nonempty_heads, m.ffn_dims
                ),
            ));
        }
        rows.push(ReportRow {
            label: r.label.clone(),
            method: series_name(&r.spec),
            block_size: r.spec.block_size,
            lambda: r.spec.lambda,
            density: rep.density,
            nonzero: rep.nonzero,
            nonempty_heads: rep.nonempty_heads,
            total_heads: rep.total_heads,
            ffn_dims: rep.ffn_dims,
            accuracy: m.accuracy,
            speedup: m.speedup,
        });
    }
    let curve = |key: fn(&ReportRow) -> f64, header: &str| {
        let mut sorted: Vec<&ReportRow> = rows.iter().collect();
        sorted.sort_by(|a, b| a.method.cmp(&b.method).then(key(a).total_cmp(&key(b))));
        let mut s = format!("method,label,{header},accuracy\n");
        for r in sorted {
            let _ = writeln!(s, "{},{},{},{}", r.method, r.label, key(r), r.accuracy);
        }
        s
    };
    let speed = curve(|r| r.speedup, "speedup");
    let dens = curve(|r| r.density, "density");
    let mut table = String::from(
        "| series | lambda | density | nonzero | heads | ffn dims | accuracy | speedup |\n|---|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "| {} | {:.3e} | {:.4} | {} | {}/{} | {} | {:.4} | {:.2} |",
            r.method, r.lambda, r.density, r.nonzero, r.nonempty_heads, r.total_heads, r.ffn_dims, r.accuracy, r.speedup
        );
    }
    if !failed.is_empty() {
        let _ = writeln!(table, "\nfailed points: {}", failed.join(", "));
    }
    let files = vec![dir.join(SPEEDUP_FILE), dir.join(DENSITY_FILE), dir.join(REPORT_FILE)];
    write_text(&files[0], &speed)?;
    write_text(&files[1], &dens)?;
    write_text(&files[2], &table)?;
    Ok(Report { rows, failed, files })
}
