//! Analytic gradients against central finite differences in f64.
//!
//! Each op is checked on 20 random cases. The output of the op is reduced
//! to a scalar with fixed random weights so every output element matters.

mod common;

use blockprune::autodiff::Tape;
use blockprune::compactor::random_batches;
use blockprune::model::{Model, ModelConfig};
use blockprune::pruning::{attach_method, Method};
use blockprune::Tensor;
use common::{op_suite, rel_err, run_op, ste_mask_oracle, H, TOL};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for op in op_suite() {
        let err = run_op(&op);
        if !(err <= TOL) {
            failures.push(format!("{}: {err:.3e}", op.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn ste_matches_block_sum_of_mask_gradient() {
    let err = ste_mask_oracle();
    assert!(err <= TOL, "relative error {err:.3e}");
}

fn tiny_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        max_len: 6,
        ..ModelConfig::default()
    };
    Model::<f32>::new(cfg, seed).unwrap().cast::<f64>()
}

fn model_loss(model: &Model<f64>, batch: &blockprune::data::Batch) -> f64 {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false, false);
    let logits = model.forward(&mut tape, &vars, batch, None).unwrap();
    let ce = tape.cross_entropy(logits, &batch.labels).unwrap();
    tape.value(ce).data()[0]
}

/// Whole-model parameter gradients, sampled entries per tensor.
#[test]
fn model_parameter_gradients() {
    for seed in 0..4 {
        let mut model = tiny_model(seed);
        if seed % 2 == 1 {
            attach_method(&mut model, Method::Hybrid, Some(2)).unwrap();
            // push some scores below the threshold so the masks are mixed
            for s in &mut model.scores {
                for (i, v) in s.values.data_mut().iter_mut().enumerate() {
                    if i % 3 == 0 {
                        *v = -0.5;
                    }
                }
            }
        }
        let mut batch = random_batches(256, 5, 3, 1, seed).remove(0);
        batch.labels = vec![0, 1, 1];
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true, false);
        let logits = model.forward(&mut tape, &vars, &batch, None).unwrap();
        let ce = tape.cross_entropy(logits, &batch.labels).unwrap();
        let grads = tape.backward(ce).unwrap();
        let analytic: Vec<Tensor<f64>> = vars.params.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
        let n_params = analytic.len();
        for p in 0..n_params {
            let len = analytic[p].len();
            let picks: Vec<usize> = (0..len.min(6)).map(|i| (i * 7919 + p * 31) % len).collect();
            let mut a = Vec::new();
            let mut n = Vec::new();
            for &e in &picks {
                let mut plus = model.clone();
                plus.params_mut()[p].data_mut()[e] += H;
                let mut minus = model.clone();
                minus.params_mut()[p].data_mut()[e] -= H;
                n.push((model_loss(&plus, &batch) - model_loss(&minus, &batch)) / (2.0 * H));
                a.push(analytic[p].data()[e]);
            }
            let err = rel_err(&a, &n);
            assert!(err <= TOL, "model seed {seed} param {p}: relative error {err:.3e}");
        }
    }
}
