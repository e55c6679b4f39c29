//! `blockprune` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 compacted
//! model failed the equivalence check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use blockprune::bench::{self, PointSpec};
use blockprune::checkpoint;
use blockprune::compactor::{self, FillSettings};
use blockprune::config::RunConfig;
use blockprune::model::Model;
use blockprune::pruning::{density_report, Method};
use blockprune::quantizer::quantize_model;
use blockprune::trainer::{evaluate, history_csv};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "blockprune", version, about = "Block movement pruning for small transformer encoders")]
struct Cli {
    /// Worker threads for parallel evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Finite-value checks after every recorded op.
    #[arg(long, global = true)]
    checked: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// TOML run configuration (unset keys take their defaults).
    #[arg(long, short)]
    config: PathBuf,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Copy)]
struct Common {
    seed: Option<u64>,
    checked: bool,
}

impl Common {
    fn load(&self, path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        cfg.optim.checked |= self.checked;
        Ok(cfg)
    }
}

/// `L:H` pair naming a head.
#[derive(Debug, Clone, Copy)]
struct HeadRef {
    layer: usize,
    head: usize,
}

impl FromStr for HeadRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (l, h) = s.split_once(':').ok_or_else(|| format!("expected L:H, got `{s}`"))?;
        Ok(Self {
            layer: l.trim().parse().map_err(|_| format!("bad layer in `{s}`"))?,
            head: h.trim().parse().map_err(|_| format!("bad head in `{s}`"))?,
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense model that pruning starts from.
    TeacherTrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Train the doubled-width teacher instead.
        #[arg(long)]
        large: bool,
    },
    /// Fine-prune a dense model; trains a teacher first if none is given.
    Prune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Dense checkpoint to start from and distill from.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Separate distillation teacher (e.g. a large one).
        #[arg(long)]
        distill: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        block_size: Option<usize>,
    },
    /// Physically remove empty heads and FFN dims, then verify equivalence.
    Compact {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop a head even if it is non-empty (repeatable).
        #[arg(long = "force-drop-head", value_name = "L:H")]
        force_drop_head: Vec<HeadRef>,
    },
    /// Re-draw masked weights inside the kept structure and fine-tune.
    Fill {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Second pruning run that keeps every head the first run kept.
    Rewind {
        #[command(flatten)]
        config: ConfigArg,
        /// Result of the first run (masked or compacted).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dense model both runs start from.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Int8 weight quantization with per-row scales.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also report dev accuracy of the quantized model.
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Dev accuracy, loss and sparsity census of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Single-threaded latency of a checkpoint against a baseline.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// λ (and block size / method) sweep with timing.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trade-off curves and a summary table from a sweep directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Marks errors that map to exit code 3.
fn is_equivalence(e: &anyhow::Error) -> bool {
    e.chain().any(|c| matches!(c.downcast_ref::<blockprune::Error>(), Some(blockprune::Error::Equivalence { .. })))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    blockprune::par::init_global(cli.threads);
    let common = Common {
        seed: cli.seed,
        checked: cli.checked,
    };
    match run(cli.cmd, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_equivalence(&e) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn load_model(dir: &Path) -> Result<Model> {
    Ok(checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?.model)
}

fn metrics(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn census_json(model: &Model) -> serde_json::Value {
    let r = density_report(model);
    json!({
        "density": r.density,
        "nonzero": r.nonzero,
        "dense_total": r.dense_total,
        "nonempty_heads": r.nonempty_heads,
        "total_heads": r.total_heads,
        "ffn_dims": r.ffn_dims,
    })
}

fn write_history(out: &Path, rows: &[blockprune::trainer::HistoryRow]) -> Result<()> {
    checkpoint::write_atomic(&out.join("history.csv"), history_csv(rows).as_bytes())?;
    Ok(())
}

fn run(cmd: Command, common: Common) -> Result<()> {
    match cmd {
        Command::TeacherTrain { config, out, large } => {
            let cfg = common.load(&config.config)?;
            let seed = cfg.seeds[0];
            let data = bench::load_data(&cfg)?;
            eprintln!("training {} teacher for {} epochs", if large { "large" } else { "base" }, cfg.teacher_epochs);
            let t = bench::train_teacher(&cfg, &data, seed, large)?;
            let acc = t.best_metrics.accuracy;
            checkpoint::save(&out, &t.best, json!({ "role": "teacher", "seed": seed, "large": large }), metrics(&[("accuracy", acc)]))?;
            write_history(&out, &t.history)?;
            print_json(&json!({ "accuracy": acc, "out": out }));
        }
        Command::Prune {
            config,
            out,
            teacher,
            distill,
            method,
            lambda,
            block_size,
        } => {
            let cfg = common.load(&config.config)?;
            let data = bench::load_data(&cfg)?;
            let seed = cfg.seeds[0];
            let start = match &teacher {
                Some(p) => load_model(p)?,
                None => {
                    eprintln!("no --teacher given; training one");
                    let t = bench::train_teacher(&cfg, &data, seed, false)?;
                    checkpoint::save(&out.join("teacher"), &t.best, json!({ "role": "teacher", "seed": seed }), metrics(&[("accuracy", t.best_metrics.accuracy)]))?;
                    t.best
                }
            };
            if start.is_masked() {
                bail!("the starting model already carries masks");
            }
            let spec = PointSpec {
                method: method.unwrap_or(cfg.method),
                block_size: block_size.or(cfg.block_size),
                lambda: lambda.unwrap_or(cfg.lambda),
                seed,
                rewind: false,
            };
            let distill_model = distill.as_deref().map(load_model).transpose()?;
            let teacher_model = if spec.method.uses_teacher() { Some(distill_model.as_ref().unwrap_or(&start)) } else { None };
            eprintln!("pruning: {}", spec.label());
            let o = bench::prune_point(&cfg, &data, &start, teacher_model, &spec, None)?;
            let census = census_json(&o.best);
            checkpoint::save(
                &out,
                &o.best,
                json!({ "role": "pruned", "spec": spec, "config": cfg }),
                metrics(&[("accuracy", o.best_metrics.accuracy), ("density", census["density"].as_f64().unwrap_or(f64::NAN))]),
            )?;
            write_history(&out, &o.history)?;
            print_json(&json!({ "accuracy": o.best_metrics.accuracy, "census": census, "out": out }));
        }
        Command::Compact { ckpt, out, force_drop_head } => {
            let masked = load_model(&ckpt)?;
            let mut plan = compactor::plan(&masked);
            for h in &force_drop_head {
                let lp = plan.layers.get_mut(h.layer).ok_or_else(|| anyhow!("no layer {}", h.layer))?;
                lp.heads.retain(|&x| x != h.head);
            }
            let compact = compactor::compact(&masked, &plan)?;
            let deviation = compactor::verify_equivalence(&masked, &compact, 4, 0)?;
            checkpoint::save(&out, &compact, json!({ "role": "compact", "source": ckpt }), metrics(&[("deviation", deviation)]))?;
            print_json(&json!({ "deviation": deviation, "census": census_json(&compact), "out": out }));
        }
        Command::Fill {
            config,
            ckpt,
            out,
            teacher,
            steps,
        } => {
            let cfg = common.load(&config.config)?;
            let data = bench::load_data(&cfg)?;
            let masked = load_model(&ckpt)?;
            let teacher = teacher.as_deref().map(load_model).transpose()?;
            let plan = compactor::plan(&masked);
            let settings = FillSettings {
                teacher: teacher.as_ref(),
                train: &data.train,
                steps: steps.unwrap_or(cfg.fill_steps),
                alpha: if teacher.is_some() { cfg.alpha } else { 1.0 },
                temperature: cfg.temperature,
                seed: cfg.seeds[0],
                optim: cfg.optim.clone(),
            };
            let filled = compactor::hybrid_fill(&masked, &plan, &settings)?;
            let acc = evaluate(&filled.model, &data.dev)?.accuracy;
            checkpoint::save(&out, &filled.model, json!({ "role": "filled", "source": ckpt }), metrics(&[("accuracy", acc)]))?;
            print_json(&json!({ "accuracy": acc, "filled_entries": filled.entries.len(), "census": census_json(&filled.model), "out": out }));
        }
        Command::Rewind {
            config,
            ckpt,
            teacher,
            out,
            lambda,
        } => {
            let cfg = common.load(&config.config)?;
            let data = bench::load_data(&cfg)?;
            let first = load_model(&ckpt)?;
            let start = load_model(&teacher)?;
            let spec = PointSpec {
                method: cfg.method,
                block_size: cfg.block_size,
                lambda: lambda.unwrap_or(cfg.lambda),
                seed: cfg.seeds[0],
                rewind: true,
            };
            let distill = spec.method.uses_teacher().then_some(&start);
            let o = bench::prune_point(&cfg, &data, &start, distill, &spec, Some(&first))?;
            checkpoint::save(&out, &o.best, json!({ "role": "rewound", "spec": spec }), metrics(&[("accuracy", o.best_metrics.accuracy)]))?;
            write_history(&out, &o.history)?;
            print_json(&json!({ "accuracy": o.best_metrics.accuracy, "census": census_json(&o.best), "out": out }));
        }
        Command::Quantize { ckpt, out, config } => {
            let model = load_model(&ckpt)?;
            let (q, size) = quantize_model(&model)?;
            let mut report = json!({ "size": size, "out": out });
            let mut m = metrics(&[("effective_compression", size.effective_compression)]);
            if let Some(path) = &config {
                let cfg = common.load(path)?;
                let data = bench::load_data(&cfg)?;
                let before = evaluate(&model, &data.dev)?.accuracy;
                let after = evaluate(q.model(), &data.dev)?.accuracy;
                report["accuracy_float"] = json!(before);
                report["accuracy_int8"] = json!(after);
                m.insert("accuracy".into(), after);
            }
            checkpoint::save_quantized(&out, &q, json!({ "role": "quantized", "source": ckpt }), m)?;
            checkpoint::write_atomic(&out.join("size.json"), serde_json::to_string_pretty(&size)?.as_bytes())?;
            print_json(&report);
        }
        Command::Eval { config, ckpt } => {
            let cfg = common.load(&config.config)?;
            let data = bench::load_data(&cfg)?;
            let model = load_model(&ckpt)?;
            let m = evaluate(&model, &data.dev)?;
            print_json(&json!({ "accuracy": m.accuracy, "loss": m.loss, "census": census_json(&model) }));
        }
        Command::Bench { config, ckpt, baseline } => {
            let cfg = common.load(&config.config)?;
            let data = bench::load_data(&cfg)?;
            let model = load_model(&ckpt)?;
            let base = load_model(&baseline)?;
            let batch = bench::timing_batch(&data.dev, cfg.timing.batch);
            let t = cfg.timing;
            let b = bench::time_inference(&base, &batch, t.warmup, t.reps)?.median_ms;
            let c = bench::time_inference(&model, &batch, t.warmup, t.reps)?.median_ms;
            print_json(&json!({ "baseline_ms": b, "latency_ms": c, "speedup": b / c, "batch": t.batch, "reps": t.reps }));
        }
        Command::Sweep { config, out } => {
            let cfg = common.load(&config.config)?;
            let s = bench::sweep(&cfg, &out)?;
            eprintln!("{} points, {} failed; results in {}", s.points, s.failed, out.display());
            print_json(&json!({ "points": s.points, "failed": s.failed, "out": out }));
        }
        Command::Report { dir } => {
            let r = bench::report(&dir)?;
            print!("{}", std::fs::read_to_string(dir.join(bench::REPORT_FILE))?);
            eprintln!("wrote {}", r.files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(", "));
        }
    }
    Ok(())
}
