//! End-to-end acceptance checks, one line per criterion on stderr.
//!
//! Everything runs inside a single test so the desk-scale training runs are
//! shared between criteria and timing is not disturbed by sibling tests.
//! Failures are collected and asserted at the very end so every line prints.
//! Comparisons the criteria call soft (distillation, fill accuracy) print
//! PASS/FAIL but only their exact parts are asserted.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use blockprune::bench::{self, PointSpec, SweepSummary, Teachers};
use blockprune::checkpoint;
use blockprune::compactor::{self, hybrid_fill, plan, verify_equivalence, FillSettings, FilledEntry, EQUIVALENCE_BOUND};
use blockprune::config::RunConfig;
use blockprune::data::{gen_synth, DataSplit, TaskKind, TaskSpec};
use blockprune::model::{Family, Model, ModelConfig};
use blockprune::pruning::{
    attach_method, attach_pattern, balance_lambdas, bindings_of, density_report, expand_mask, nonempty_heads,
    reg_value_and_grad, score_task_grad, BlockKind, BlockPattern, Geometry, Method, RegWeights, DEFAULT_SCORE_INIT,
};
use blockprune::quantizer::quantize_model;
use blockprune::rng::RngState;
use blockprune::trainer::{evaluate, fine_prune, train_dense, OptimConfig, PruneRun, PruneSchedule, TrainOutcome};
use blockprune::{Error, Tensor};

struct Line {
    pass: bool,
    /// The part that must hold even when the whole line is a soft gate.
    hard: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass,
        hard: pass,
        detail: detail.into(),
    }
}

/// A reported comparison whose failure does not fail the suite; `hard`
/// still does.
fn soft_line(hard: bool, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass: hard && pass,
        hard,
        detail: detail.into(),
    }
}

fn say(msg: &str) {
    let _ = writeln!(std::io::stderr(), "{msg}");
}

fn run(id: usize, name: &str, failures: &mut Vec<String>, f: impl FnOnce() -> Line) {
    let t = Instant::now();
    let l = f();
    let tag = if l.pass { "PASS" } else { "FAIL" };
    let soft = if !l.pass && l.hard { " [soft gate, not asserted]" } else { "" };
    say(&format!(
        "[{tag}] {id:>2} {name}: {} ({:.1}s){soft}",
        l.detail,
        t.elapsed().as_secs_f64()
    ));
    if !l.hard {
        failures.push(format!("{id} {name}"));
    }
}

/// Random small geometry: heads, head width and FFN ratio vary.
fn random_config(rng: &mut RngState) -> ModelConfig {
    let n_heads = [1, 2, 4][rng.below(3)];
    let hd = [2, 4, 8][rng.below(3)];
    let d_model = n_heads * hd;
    ModelConfig {
        d_model,
        n_heads,
        d_ff: d_model * [1, 2, 4][rng.below(3)],
        n_layers: 1 + rng.below(2),
        max_len: 8,
        ..ModelConfig::default()
    }
}

fn random_side(rng: &mut RngState, d_model: usize) -> usize {
    let sides: Vec<usize> = [1, 2, 4].into_iter().filter(|s| d_model % s == 0).collect();
    sides[rng.below(sides.len())]
}

fn randomize_scores(m: &mut Model, keep: f64, rng: &mut RngState) {
    for s in &mut m.scores {
        for v in s.values.data_mut() {
            *v = if rng.bernoulli(keep) {
                rng.uniform(0.01, 1.0) as f32
            } else {
                -rng.uniform(0.01, 1.0) as f32
            };
        }
    }
}

fn equivalence_oracle() -> Line {
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    let n = 120;
    for seed in 0..n {
        let mut rng = RngState::new(seed, 1001);
        let cfg = random_config(&mut rng);
        let method = Method::ALL[rng.below(Method::ALL.len())];
        let side = random_side(&mut rng, cfg.d_model);
        let keep = rng.uniform(0.0, 1.0);
        let mut m = Model::<f32>::new(cfg, seed).unwrap();
        attach_method(&mut m, method, Some(side)).unwrap();
        randomize_scores(&mut m, keep, &mut rng);
        let c = compactor::compact(&m, &plan(&m)).unwrap();
        match verify_equivalence(&m, &c, 2, seed) {
            Ok(d) => worst = worst.max(d),
            Err(e) => bad.push(format!("seed {seed}: {e}")),
        }
    }
    // negative: drop a head that still has live weights
    let mut caught = 0;
    let mut tried = 0;
    for seed in 0..20 {
        let mut rng = RngState::new(seed, 1002);
        let cfg = ModelConfig {
            n_heads: 4,
            d_model: 16,
            d_ff: 32,
            n_layers: 2,
            max_len: 8,
            ..ModelConfig::default()
        };
        let mut m = Model::<f32>::new(cfg, seed).unwrap();
        attach_method(&mut m, [Method::Struct, Method::Hybrid][seed as usize % 2], Some(4)).unwrap();
        randomize_scores(&mut m, 0.7, &mut rng);
        let live = nonempty_heads(&m);
        let mut p = plan(&m);
        let Some((l, h)) = live
            .iter()
            .enumerate()
            .find_map(|(l, hs)| hs.iter().position(|&x| x).map(|h| (l, h)))
        else {
            continue;
        };
        p.layers[l].heads.retain(|&x| x != h);
        if p.layers[l].heads.is_empty() {
            continue;
        }
        tried += 1;
        let c = compactor::compact(&m, &p).unwrap();
        if matches!(verify_equivalence(&m, &c, 2, seed), Err(Error::Equivalence { .. })) {
            caught += 1;
        }
    }
    line(
        bad.is_empty() && worst <= EQUIVALENCE_BOUND && tried > 0 && caught == tried,
        format!(
            "{n} random configs, max deviation {worst:.2e} (bound {EQUIVALENCE_BOUND:.0e}), {} failures; live-head drop rejected {caught}/{tried}",
            bad.len()
        ),
    )
}

/// Group sums via one-hot masks from `expand_mask`, so block membership
/// comes from the forward path rather than the gradient code.
fn brute_force_grad(members: &[(Tensor<f64>, Tensor<f64>, (usize, usize))], n_groups: usize) -> Vec<f64> {
    (0..n_groups)
        .map(|g| {
            let onehot = Tensor::from_fn(&[n_groups], |i| if i == g { 1.0 } else { -1.0 });
            members
                .iter()
                .map(|(up, w, block)| {
                    let mask = expand_mask(&onehot, 0.0, (w.rows(), w.cols()), *block).unwrap();
                    up.data()
                        .iter()
                        .zip(w.data())
                        .zip(mask.data())
                        .map(|((a, b), m)| a * b * m)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

fn ste_oracle() -> Line {
    let mut kinds = BTreeSet::new();
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = RngState::new(seed, 2001);
        let cfg = random_config(&mut rng);
        let side = random_side(&mut rng, cfg.d_model).max(2).min(cfg.d_model);
        let unstructured = BlockPattern {
            attention: BlockKind::Unstructured,
            ffn: BlockKind::Unstructured,
        };
        let patterns = [
            unstructured,
            Method::Block.pattern(Some(side)),
            Method::Struct.pattern(None),
        ];
        for pattern in patterns {
            let mut m = Model::<f32>::new(cfg.clone(), seed).unwrap().cast::<f64>();
            attach_pattern(&mut m, pattern, DEFAULT_SCORE_INIT).unwrap();
            for s in 0..m.scores.len() {
                kinds.insert(match m.scores[s].kind {
                    BlockKind::Unstructured => "unstructured",
                    BlockKind::Square { .. } => "square",
                    BlockKind::DimPairedFfn => "dim",
                    BlockKind::HeadBlocks { .. } => "heads",
                });
                let bound: Vec<(Tensor<f64>, Tensor<f64>, (usize, usize))> = bindings_of(&m, s)
                    .into_iter()
                    .map(|(l, f, block)| {
                        let w = m.layers[l].linear(f).weight.clone();
                        let up = common::normal(&mut rng, w.shape());
                        (up, w, block)
                    })
                    .collect();
                let refs: Vec<(&Tensor<f64>, &Tensor<f64>, (usize, usize))> =
                    bound.iter().map(|(u, w, b)| (u, w, *b)).collect();
                let n_groups = m.scores[s].values.len();
                let got = score_task_grad(&refs, n_groups).unwrap();
                let want = brute_force_grad(&bound, n_groups);
                let num: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
                worst = worst.max(num / den);
                cases += 1;
            }
        }
    }
    line(
        cases >= 50 && kinds.len() == 4 && worst <= 1e-6,
        format!("{cases} score tensors over kinds {kinds:?}, max relative error {worst:.2e}"),
    )
}

fn gradient_suite() -> Line {
    let ops = common::op_suite();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for op in &ops {
        let e = common::run_op(op);
        worst = worst.max(e);
        if !(e <= common::TOL) {
            failures.push(op.name.clone());
        }
    }
    let ste = common::ste_mask_oracle();
    line(
        failures.is_empty() && ste <= common::TOL,
        format!(
            "{} ops plus the masked-score path, {} cases each, worst {worst:.2e}, mask path {ste:.2e}; failing {failures:?}",
            ops.len(),
            common::CASES
        ),
    )
}

fn tiny_data() -> DataSplit {
    gen_synth(&TaskSpec {
        train_size: 96,
        dev_size: 48,
        seq_len: 8,
        ..TaskSpec::default()
    })
    .unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 1,
        max_len: 8,
        ..ModelConfig::default()
    }
}

fn tiny_run(lambda_end: f64, optim: &OptimConfig) -> PruneRun {
    PruneRun {
        schedule: PruneSchedule {
            epochs: 2,
            lambda_end,
            ..PruneSchedule::default()
        },
        reg_unit: RegWeights::uniform(1.0),
        alpha: 1.0,
        temperature: 2.0,
        seed: 4,
        optim: optim.clone(),
        protected: Vec::new(),
        floor: 0.0,
    }
}

fn same_history(a: &TrainOutcome, b: &TrainOutcome) -> bool {
    a.history.len() == b.history.len()
        && a.history
            .iter()
            .zip(&b.history)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.accuracy == y.accuracy)
}

fn degenerate_limits() -> Line {
    let data = tiny_data();
    let optim = OptimConfig {
        batch_size: 16,
        log_per_epoch: 6,
        ..OptimConfig::default()
    };
    let base = Model::<f32>::new(tiny_config(), 9).unwrap();

    let prune_with = |kind: BlockKind| {
        let mut m = base.clone();
        attach_pattern(
            &mut m,
            BlockPattern {
                attention: kind,
                ffn: kind,
            },
            DEFAULT_SCORE_INIT,
        )
        .unwrap();
        fine_prune(m, None, &data.train, &data.dev, &tiny_run(0.5, &optim)).unwrap()
    };
    let u = prune_with(BlockKind::Unstructured);
    let s1 = prune_with(BlockKind::Square { size: 1 });
    let square_one = u.model.checksum() == s1.model.checksum() && same_history(&u, &s1);

    let mut masked = base.clone();
    attach_method(&mut masked, Method::Hybrid, Some(4)).unwrap();
    let p = fine_prune(masked, None, &data.train, &data.dev, &tiny_run(0.0, &optim)).unwrap();
    let d = train_dense(base.clone(), &data.train, &data.dev, 2, 4, &optim).unwrap();
    let weights_equal = p
        .model
        .named_params()
        .iter()
        .zip(d.model.named_params())
        .all(|((na, a), (nb, b))| na == &nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let scores_still = p.model.scores.iter().all(|s| s.values.data().iter().all(|&v| v == DEFAULT_SCORE_INIT as f32));
    let zero_lambda = weights_equal && scores_still && same_history(&p, &d) && !d.history.is_empty();

    let mut zero = base.clone().cast::<f64>();
    attach_method(&mut zero, Method::Hybrid, Some(4)).unwrap();
    for s in &mut zero.scores {
        s.values = Tensor::zeros(s.values.shape());
    }
    let groups: usize = zero.scores.iter().map(|s| s.values.len()).sum();
    let lambda = 0.125;
    let (value, _) = reg_value_and_grad(&zero.scores, &RegWeights::uniform(lambda));
    let exact = value == 0.5 * lambda * groups as f64;

    line(
        square_one && zero_lambda && exact,
        format!(
            "square(1) == unstructured bitwise: {square_one}; λ=0 matches dense fine-tuning over {} logged steps: {zero_lambda}; S≡0 regularizer {value} vs 0.5·λ·{groups}: {exact}",
            d.history.len()
        ),
    )
}

fn balance_ratios() -> Line {
    let pattern = Method::Struct.pattern(None);
    let ratio = |g: Geometry| {
        let w = balance_lambdas(1.0, g, pattern);
        w.lambda_att / w.lambda_ffn
    };
    let bert = ratio(Geometry {
        d_model: 768,
        n_heads: 12,
        d_ff: 3072,
    });
    let desk = ratio((&ModelConfig::default()).into());
    line(
        bert == 1.0 / 32.0 && desk == 1.0 / 16.0,
        format!("λ_att/λ_ffn = {bert} on 768/12 heads, {desk} on the default desk geometry"),
    )
}

/// Spearman correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Desk-scale settings for the empirical criteria: the default sweep on a
/// narrower, shallower encoder so the suite finishes in minutes.
fn desk_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            max_len: 18,
            ..ModelConfig::default()
        },
        task: TaskSpec {
            kind: TaskKind::PairDup,
            train_size: 2000,
            dev_size: 1000,
            ..TaskSpec::default()
        },
        method: Method::Hybrid,
        block_size: Some(16),
        teacher_epochs: 8,
        seeds: vec![0, 1, 2],
        ..RunConfig::default()
    };
    cfg.schedule.epochs = 4;
    cfg.optim.log_per_epoch = 1;
    cfg.optim.history_eval = 256;
    cfg
}

struct Desk {
    cfg: RunConfig,
    data: DataSplit,
    summary: SweepSummary,
    sweep_secs: f64,
    teachers: Vec<Teachers>,
}

impl Desk {
    fn build(out: &Path) -> Desk {
        let cfg = desk_config();
        let t = Instant::now();
        let summary = bench::sweep(&cfg, out).unwrap();
        let sweep_secs = t.elapsed().as_secs_f64();
        let data = bench::load_data(&cfg).unwrap();
        let teachers = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let base = checkpoint::load(&out.join("teachers").join(format!("seed{seed}"))).unwrap().model;
                let base_accuracy = evaluate(&base, &data.dev).unwrap().accuracy;
                Teachers {
                    seed,
                    base,
                    base_accuracy,
                    large: None,
                }
            })
            .collect();
        Desk {
            cfg,
            data,
            summary,
            sweep_secs,
            teachers,
        }
    }

    fn center(&self, seed: u64) -> f64 {
        self.summary
            .calibration
            .iter()
            .find(|c| c.seed == seed)
            .map_or(self.cfg.lambda, |c| c.lambda)
    }

    /// `(lambda, density, accuracy, speedup, teacher accuracy)` for one seed,
    /// sorted by λ.
    fn points(&self, seed: u64) -> Vec<(f64, f64, f64, f64, f64)> {
        let mut v: Vec<_> = self
            .summary
            .results
            .iter()
            .filter(|r| r.spec.seed == seed)
            .filter_map(|r| {
                r.metrics
                    .as_ref()
                    .map(|m| (r.spec.lambda, m.density, m.accuracy, m.speedup, m.teacher_accuracy))
            })
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

fn monotonicity(desk: &Desk) -> Line {
    let mut ok = true;
    let mut parts = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &seed in &desk.cfg.seeds {
        let pts = desk.points(seed);
        let n = desk.cfg.lambda_multipliers.len();
        if pts.len() != n {
            ok = false;
            parts.push(format!("seed {seed}: {} of {n} points", pts.len()));
            continue;
        }
        let (first, last) = (pts[0].1, pts[n - 1].1);
        ok &= last < first;
        parts.push(format!(
            "seed {seed} center {:.2e}: {}",
            desk.center(seed),
            pts.iter().map(|p| format!("{:.3}", p.1)).collect::<Vec<_>>().join(", ")
        ));
        // λ enters through its position in the sweep so seeds with
        // different centers pool
        for (i, p) in pts.iter().enumerate() {
            xs.push(i as f64);
            ys.push(p.1);
        }
    }
    let rho = spearman(&xs, &ys);
    ok &= rho <= -0.8 && desk.sweep_secs <= 30.0 * 60.0;
    line(
        ok,
        format!(
            "{}; pooled Spearman ρ {rho:.3}; sweep {:.0}s",
            parts.join("; "),
            desk.sweep_secs
        ),
    )
}

fn tradeoff(desk: &Desk) -> Line {
    let mut ok = true;
    let mut parts = Vec::new();
    for &seed in &desk.cfg.seeds {
        let best = desk
            .points(seed)
            .into_iter()
            .filter(|p| p.1 <= 0.4 && p.2 >= p.4 - 0.03)
            .max_by(|a, b| a.3.total_cmp(&b.3));
        match best {
            Some((l, d, a, s, t)) => {
                ok &= s >= 1.3;
                parts.push(format!(
                    "seed {seed}: λ {l:.2e} density {d:.3} acc {a:.3} (dense {t:.3}) speedup {s:.2}x"
                ));
            }
            None => {
                ok = false;
                parts.push(format!("seed {seed}: no point at density <= 0.4 within 3 points"));
            }
        }
    }
    let empty_head = desk
        .summary
        .results
        .iter()
        .filter_map(|r| r.metrics.as_ref())
        .any(|m| m.nonempty_heads < m.total_heads);
    line(
        ok,
        format!("{}; some head fully emptied: {empty_head}", parts.join("; ")),
    )
}

fn teachers_for(desk: &Desk, seed: u64) -> &Teachers {
    desk.teachers.iter().find(|t| t.seed == seed).unwrap()
}

/// λ two orders of magnitude below the calibrated sweep centers: the onset
/// of pruning, where density sits near its small-λ level.
const MILD_LAMBDA: f64 = 1e-4;

/// Runs on the default desk width (d_model 128, d_ff 512) with two layers;
/// at d_model 64 a 32×32 block is a quarter of a matrix and a single
/// dropped block removes a large part of a projection.
fn block_sizes(desk: &Desk) -> Line {
    let seed = desk.cfg.seeds[0];
    let mut cfg = desk.cfg.clone();
    cfg.model = ModelConfig {
        n_layers: 2,
        max_len: desk.cfg.model.max_len,
        ..ModelConfig::default()
    };
    let t = Teachers::train(&cfg, &desk.data, seed).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for bs in [4, 8, 16, 32] {
        let spec = PointSpec {
            method: Method::Hybrid,
            block_size: Some(bs),
            lambda: MILD_LAMBDA,
            seed,
            rewind: false,
        };
        let (_, r) = bench::run_point(&cfg, &desk.data, &t, &spec).remove(0);
        match r {
            Ok(p) => {
                let d = density_report(&p.finished.model).density;
                ok &= p.accuracy >= t.base_accuracy - 0.01;
                parts.push(format!("{bs}: acc {:.3} density {d:.3}", p.accuracy));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{bs}: {e}"));
            }
        }
    }
    line(
        ok,
        format!(
            "d_model {} x {} layers, λ {MILD_LAMBDA:.0e}, dense {:.3}; {}",
            cfg.model.d_model,
            cfg.model.n_layers,
            t.base_accuracy,
            parts.join(", ")
        ),
    )
}

/// Hybrid pruned at the sweep center, shared by the distillation,
/// quantization and fill checks.
struct CenterRun {
    seed: u64,
    pruned: Model,
    compact: Model,
    compact_accuracy: f64,
}

fn center_runs(desk: &Desk) -> Vec<CenterRun> {
    desk.cfg
        .seeds
        .iter()
        .map(|&seed| {
            let t = teachers_for(desk, seed);
            let spec = PointSpec {
                method: Method::Hybrid,
                block_size: desk.cfg.block_size,
                lambda: desk.center(seed),
                seed,
                rewind: false,
            };
            let out = bench::prune_point(&desk.cfg, &desk.data, &t.base, Some(&t.base), &spec, None).unwrap();
            let compact = compactor::compact(&out.best, &plan(&out.best)).unwrap();
            let compact_accuracy = evaluate(&compact, &desk.data.dev).unwrap().accuracy;
            CenterRun {
                seed,
                pruned: out.best,
                compact,
                compact_accuracy,
            }
        })
        .collect()
}

/// Linear interpolation of `(density, accuracy)` points at `x`, clamped to
/// the end points outside their range.
fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    if x <= p[0].0 {
        return p[0].1;
    }
    for w in p.windows(2) {
        if x <= w[1].0 {
            let t = if w[1].0 > w[0].0 { (x - w[0].0) / (w[1].0 - w[0].0) } else { 0.0 };
            return w[0].1 + t * (w[1].1 - w[0].1);
        }
    }
    p[p.len() - 1].1
}

/// Hybrid at the sweep center against the no-teacher curve (center × ½, 1,
/// 2) read off at the same density.
fn distillation(desk: &Desk, runs: &[CenterRun]) -> Line {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let t = teachers_for(desk, r.seed);
        let curve: Vec<(f64, f64)> = [0.5, 1.0, 2.0]
            .iter()
            .map(|m| {
                let spec = PointSpec {
                    method: Method::HybridNt,
                    block_size: desk.cfg.block_size,
                    lambda: desk.center(r.seed) * m,
                    seed: r.seed,
                    rewind: false,
                };
                let (_, nt) = bench::run_point(&desk.cfg, &desk.data, t, &spec).remove(0);
                let nt = nt.unwrap();
                (density_report(&nt.finished.model).density, nt.accuracy)
            })
            .collect();
        let density = density_report(&r.compact).density;
        let nt_acc = interpolate(&curve, density);
        let delta = r.compact_accuracy - nt_acc;
        wins += (delta >= 0.0) as usize;
        parts.push(format!(
            "seed {}: density {density:.3} acc {:.3} vs {nt_acc:.3} (Δ {delta:+.3}; no-teacher curve {})",
            r.seed,
            r.compact_accuracy,
            curve
                .iter()
                .map(|(d, a)| format!("{d:.3}/{a:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    soft_line(
        true,
        wins >= 2,
        format!("teacher >= no teacher on {wins}/{}; {}", runs.len(), parts.join("; ")),
    )
}

fn quantization(desk: &Desk, runs: &[CenterRun]) -> Line {
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    let mut parts = Vec::new();
    let t = teachers_for(desk, runs[0].seed);
    for (name, src) in [("dense", &t.base), ("hybrid", &runs[0].compact)] {
        let (q, size) = quantize_model(src).unwrap();
        let mut baked = src.clone();
        blockprune::pruning::bake_masks(&mut baked);
        for (l, f, qt) in &q.weights {
            let w = &baked.layers[*l].linear(*f).weight;
            let cols = w.cols();
            for (i, &x) in w.data().iter().enumerate() {
                let s = qt.scales[i / cols];
                let err = (x - qt.values[i] as f32 * s).abs();
                worst_ratio = worst_ratio.max((err / s) as f64);
            }
        }
        // one int8 per weight plus one f32 scale per row
        let expected_bytes: usize = q.weights.iter().map(|(_, _, qt)| qt.shape[0] * qt.shape[1] + 4 * qt.shape[0]).sum();
        ok &= size.quant_bytes == expected_bytes
            && size.dense_bytes == 4 * src.config.dense_linear_params()
            && size.combined_compression == 4.0 * size.pruning_compression
            && size.effective_compression == size.dense_bytes as f64 / size.quant_bytes as f64;
        if name == "dense" {
            ok &= size.pruning_compression == 1.0 && size.combined_compression == 4.0;
        }
        let a = evaluate(src, &desk.data.dev).unwrap().accuracy;
        let b = evaluate(q.model(), &desk.data.dev).unwrap().accuracy;
        ok &= (a - b).abs() <= 0.02;
        parts.push(format!(
            "{name}: pruning {:.2}x -> combined {:.2}x (bytes {:.2}x), acc {a:.3} -> {b:.3}",
            size.pruning_compression, size.combined_compression, size.effective_compression
        ));
    }
    ok &= worst_ratio <= 0.5 * (1.0 + 1e-5);
    line(
        ok,
        format!("max |w - q·s|/s {worst_ratio:.4}; {}", parts.join("; ")),
    )
}

/// Filled positions predicted from the original masks and the plan.
fn expected_fill(masked: &Model, p: &compactor::CompactPlan) -> Vec<FilledEntry> {
    let hd = masked.head_dim();
    let head_index = |heads: &[usize], i: usize| heads[i / hd] * hd + i % hd;
    let mut out = Vec::new();
    for (l, lp) in p.layers.iter().enumerate() {
        for f in Family::ALL {
            let Some(mask) = masked.mask(l, f) else { continue };
            let (rows, cols) = match f {
                Family::Q | Family::K | Family::V => (lp.heads.len() * hd, masked.config.d_model),
                Family::O => (masked.config.d_model, lp.heads.len() * hd),
                Family::Ffn1 => (lp.ffn_dims.len(), masked.config.d_model),
                Family::Ffn2 => (masked.config.d_model, lp.ffn_dims.len()),
            };
            for r in 0..rows {
                for c in 0..cols {
                    let (orow, ocol) = match f {
                        Family::Q | Family::K | Family::V => (head_index(&lp.heads, r), c),
                        Family::O => (r, head_index(&lp.heads, c)),
                        Family::Ffn1 => (lp.ffn_dims[r], c),
                        Family::Ffn2 => (r, lp.ffn_dims[c]),
                    };
                    if mask.at(orow, ocol) == 0.0 {
                        out.push(FilledEntry {
                            layer: l,
                            family: f,
                            row: r,
                            col: c,
                        });
                    }
                }
            }
        }
    }
    out
}

fn hybrid_filled(desk: &Desk, runs: &[CenterRun]) -> Line {
    let mut wins = 0;
    let mut exact = true;
    let mut parts = Vec::new();
    for r in runs {
        let t = teachers_for(desk, r.seed);
        let p = plan(&r.pruned);
        let settings = FillSettings {
            teacher: Some(&t.base),
            train: &desk.data.train,
            steps: desk.cfg.fill_steps,
            alpha: desk.cfg.alpha,
            temperature: desk.cfg.temperature,
            seed: r.seed,
            optim: desk.cfg.optim.clone(),
        };
        let out = hybrid_fill(&r.pruned, &p, &settings).unwrap();
        let mut got = out.entries.clone();
        got.sort();
        let mut want = expected_fill(&r.pruned, &p);
        want.sort();
        // everything outside the filled set is untouched
        let touched: BTreeSet<_> = got.iter().map(|e| (e.layer, e.family, e.row, e.col)).collect();
        let untouched_same = (0..r.compact.layers.len()).all(|l| {
            Family::ALL.iter().all(|&f| {
                let a = &r.compact.layers[l].linear(f).weight;
                let b = &out.filled.layers[l].linear(f).weight;
                let cols = a.cols();
                a.data()
                    .iter()
                    .zip(b.data())
                    .enumerate()
                    .all(|(i, (x, y))| touched.contains(&(l, f, i / cols, i % cols)) || x == y)
            })
        });
        exact &= got == want && untouched_same;
        let filled = evaluate(&out.model, &desk.data.dev).unwrap().accuracy;
        wins += (filled >= r.compact_accuracy) as usize;
        parts.push(format!(
            "seed {}: {} entries, acc {:.3} -> {filled:.3}",
            r.seed,
            got.len(),
            r.compact_accuracy
        ));
    }
    soft_line(
        exact,
        wins >= 2,
        format!(
            "fill positions match kept ∩ masked-off: {exact}; filled >= unfilled on {wins}/{}; {}",
            runs.len(),
            parts.join("; ")
        ),
    )
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    run(1, "equivalence oracle", &mut failures, equivalence_oracle);
    run(2, "straight-through oracle", &mut failures, ste_oracle);
    run(3, "gradient suite", &mut failures, gradient_suite);
    run(4, "degenerate limits", &mut failures, degenerate_limits);
    run(5, "λ balance", &mut failures, balance_ratios);

    let dir = tempfile::tempdir().unwrap();
    let desk = Desk::build(dir.path());
    run(6, "sparsity monotonicity", &mut failures, || monotonicity(&desk));
    run(7, "tradeoff", &mut failures, || tradeoff(&desk));
    run(8, "block sizes", &mut failures, || block_sizes(&desk));
    let runs = center_runs(&desk);
    run(9, "distillation ablation", &mut failures, || distillation(&desk, &runs));
    run(10, "quantization", &mut failures, || quantization(&desk, &runs));
    run(11, "hybrid filled", &mut failures, || hybrid_filled(&desk, &runs));

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
