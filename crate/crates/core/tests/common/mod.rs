//! Finite-difference harness shared by the gradient tests and the
//! acceptance runner.

#![allow(dead_code)]

use blockprune::autodiff::{Tape, Var};
use blockprune::rng::RngState;
use blockprune::Tensor;

pub const CASES: u64 = 20;
pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

/// Norm-wise relative error with an absolute floor for gradients that
/// vanish identically (e.g. key biases, which softmax cancels).
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(n)).max(1e-6)
}

pub type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;
pub type Case = (Vec<Tensor<f64>>, BuildFn);

pub struct OpCase {
    pub name: String,
    pub make: Box<dyn Fn(&mut RngState) -> Case>,
}

/// Reduces a non-scalar output with fixed random weights.
pub fn scalar_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return out;
    }
    let mut rng = RngState::new(seed, 99);
    let w = rng.normal_tensor::<f64>(&shape, 1.0);
    let c = tape.constant(w);
    let m = tape.mul(out, c).unwrap();
    tape.sum(m).unwrap()
}

pub fn eval(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar_loss(&mut tape, out, seed);
    tape.value(loss).data()[0]
}

/// Worst relative error between analytic and central-difference gradients
/// over every input.
pub fn check(inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar_loss(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for e in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= H;
            numeric.push((eval(&plus, build, seed) - eval(&minus, build, seed)) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst error of one op over [`CASES`] random cases.
pub fn run_op(op: &OpCase) -> f64 {
    (0..CASES)
        .map(|seed| {
            let mut rng = RngState::new(seed, 7);
            let (inputs, build) = (op.make)(&mut rng);
            check(inputs, build.as_ref(), seed)
        })
        .fold(0.0, f64::max)
}

fn dims(rng: &mut RngState) -> (usize, usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4))
}

pub fn normal(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

fn op(name: impl Into<String>, make: impl Fn(&mut RngState) -> Case + 'static) -> OpCase {
    OpCase {
        name: name.into(),
        make: Box::new(make),
    }
}

/// Every differentiable tape op, with transpose and broadcast variants.
pub fn op_suite() -> Vec<OpCase> {
    let mut ops = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        ops.push(op(format!("matmul(ta={ta},tb={tb})"), move |rng| {
            let (m, k, n) = dims(rng);
            let a = normal(rng, &if ta { [k, m] } else { [m, k] });
            let b = normal(rng, &if tb { [n, k] } else { [k, n] });
            (vec![a, b], Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb).unwrap()))
        }));
    }
    for (ta, tb) in [(false, false), (false, true), (true, false)] {
        ops.push(op(format!("batched_matmul(ta={ta},tb={tb})"), move |rng| {
            let (m, k, n) = dims(rng);
            let g = 1 + rng.below(3);
            let a = normal(rng, &if ta { [g * k, m] } else { [g * m, k] });
            let b = normal(rng, &if tb { [g * n, k] } else { [g * k, n] });
            (vec![a, b], Box::new(move |t, v| t.batched_matmul(v[0], v[1], g, ta, tb).unwrap()))
        }));
    }
    for bcast in [false, true] {
        ops.push(op(format!("add(broadcast={bcast})"), move |rng| {
            let (r, c, _) = dims(rng);
            let a = normal(rng, &[r, c]);
            let b = if bcast { normal(rng, &[c]) } else { normal(rng, &[r, c]) };
            (vec![a, b], Box::new(|t, v| t.add(v[0], v[1]).unwrap()))
        }));
        ops.push(op(format!("mul(broadcast={bcast})"), move |rng| {
            let (r, c, _) = dims(rng);
            let a = normal(rng, &[r, c]);
            let b = if bcast { normal(rng, &[c]) } else { normal(rng, &[r, c]) };
            (vec![a, b], Box::new(|t, v| t.mul(v[0], v[1]).unwrap()))
        }));
    }
    ops.push(op("masked_weight", |rng| {
        let (r, c, _) = dims(rng);
        let w = normal(rng, &[r, c]);
        let m = Tensor::from_fn(&[r, c], |i| ((i * 7 + 3) % 3 != 0) as u8 as f64);
        (
            vec![w],
            Box::new(move |t, v| {
                let mv = t.constant(m.clone());
                t.masked_weight(v[0], mv).unwrap()
            }),
        )
    }));
    ops.push(op("scale", |rng| {
        let (r, c, _) = dims(rng);
        let f = rng.uniform(-2.0, 2.0);
        (vec![normal(rng, &[r, c])], Box::new(move |t, v| t.scale(v[0], f).unwrap()))
    }));
    // relu inputs are kept away from the kink
    ops.push(op("relu", |rng| {
        let (r, c, _) = dims(rng);
        let x = normal(rng, &[r, c]).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        (vec![x], Box::new(|t, v| t.relu(v[0]).unwrap()))
    }));
    ops.push(op("gelu", |rng| {
        let (r, c, _) = dims(rng);
        (vec![normal(rng, &[r, c]).map(|x| 3.0 * x)], Box::new(|t, v| t.gelu(v[0]).unwrap()))
    }));
    ops.push(op("sigmoid", |rng| {
        let (r, c, _) = dims(rng);
        (vec![normal(rng, &[r, c])], Box::new(|t, v| t.sigmoid(v[0]).unwrap()))
    }));
    ops.push(op("softmax", |rng| {
        let (r, c, _) = dims(rng);
        (vec![normal(rng, &[r, c + 1])], Box::new(|t, v| t.softmax(v[0]).unwrap()))
    }));
    ops.push(op("layer_norm", |rng| {
        let (r, c, _) = dims(rng);
        let c = c + 1;
        let x = normal(rng, &[r, c]);
        let g = normal(rng, &[c]);
        let b = normal(rng, &[c]);
        (vec![x, g, b], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()))
    }));
    ops.push(op("embedding", |rng| {
        let (vocab, d, _) = dims(rng);
        let n = 1 + rng.below(6);
        let ids: Vec<usize> = (0..n).map(|_| rng.below(vocab)).collect();
        (vec![normal(rng, &[vocab, d])], Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()))
    }));
    ops.push(op("cross_entropy", |rng| {
        let (b, c, _) = dims(rng);
        let c = c + 1;
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        (vec![normal(rng, &[b, c])], Box::new(move |t, v| t.cross_entropy(v[0], &labels).unwrap()))
    }));
    ops.push(op("kl_distill", |rng| {
        let (b, c, _) = dims(rng);
        let c = c + 1;
        let teacher = normal(rng, &[b, c]);
        let temp = rng.uniform(0.5, 4.0);
        (vec![normal(rng, &[b, c])], Box::new(move |t, v| t.kl_distill(v[0], &teacher, temp).unwrap()))
    }));
    ops.push(op("sum", |rng| {
        let (r, c, _) = dims(rng);
        (vec![normal(rng, &[r, c])], Box::new(|t, v| t.sum(v[0]).unwrap()))
    }));
    ops.push(op("reshape", |rng| {
        let (r, c, _) = dims(rng);
        (vec![normal(rng, &[r, c])], Box::new(move |t, v| t.reshape(v[0], &[c, r]).unwrap()))
    }));
    ops.push(op("split_heads", |rng| {
        let (b, l, h) = dims(rng);
        let hd = 1 + rng.below(3);
        (vec![normal(rng, &[b * l, h * hd])], Box::new(move |t, v| t.split_heads(v[0], b, l, h).unwrap()))
    }));
    ops.push(op("merge_heads", |rng| {
        let (b, l, h) = dims(rng);
        let hd = 1 + rng.below(3);
        (vec![normal(rng, &[b * h * l, hd])], Box::new(move |t, v| t.merge_heads(v[0], b, l, h).unwrap()))
    }));
    ops
}

/// Straight-through oracle for `ste_mask`: with the mask treated as a
/// continuous input, each score's gradient is the sum of the mask gradient
/// over its block. Returns the worst error over [`CASES`] cases.
pub fn ste_mask_oracle() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = RngState::new(seed, 11);
        let (bm, bn) = (1 + rng.below(3), 1 + rng.below(3));
        let (gr, gc) = (1 + rng.below(3), 1 + rng.below(3));
        let (rows, cols) = (bm * gr, bn * gc);
        let w = normal(&mut rng, &[rows, cols]);
        let x = normal(&mut rng, &[2, cols]);
        let scores = Tensor::from_fn(&[gr * gc], |_| rng.uniform(-1.0, 1.0));
        let mask = blockprune::pruning::expand_mask(&scores, 0.0, (rows, cols), (bm, bn)).unwrap();

        let mut tape = Tape::<f64>::new();
        let sv = tape.param(scores.clone());
        let wv = tape.constant(w.clone());
        let xv = tape.constant(x.clone());
        let m = tape.ste_mask(sv, (rows, cols), (bm, bn), 0.0).unwrap();
        let eff = tape.masked_weight(wv, m).unwrap();
        let y = tape.matmul_t(xv, eff, false, true).unwrap();
        let loss = scalar_loss(&mut tape, y, seed);
        let grads = tape.backward(loss).unwrap();
        let ste = grads.get(sv).unwrap().data().to_vec();

        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let wv = t.constant(w.clone());
            let xv = t.constant(x.clone());
            let eff = t.mul(wv, v[0]).unwrap();
            t.matmul_t(xv, eff, false, true).unwrap()
        };
        let mut numeric = vec![0.0; gr * gc];
        for e in 0..rows * cols {
            let mut plus = mask.clone();
            plus.data_mut()[e] += H;
            let mut minus = mask.clone();
            minus.data_mut()[e] -= H;
            let d = (eval(&[plus], &build, seed) - eval(&[minus], &build, seed)) / (2.0 * H);
            let (i, j) = (e / cols, e % cols);
            numeric[(i / bm) * gc + j / bn] += d;
        }
        worst = worst.max(rel_err(&ste, &numeric));
    }
    worst
}
