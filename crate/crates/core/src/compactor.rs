//! Structural compaction of masked models, hybrid fill and rewinding.
//!
//! A head is removable when all four of its slices are zero: its queries and
//! keys reduce to biases, its values to the bias slice, and the zero `W_o`
//! slice discards whatever the softmax produced. An FFN dimension whose `W2`
//! column is zero likewise contributes nothing. Cropping such structure
//! leaves the network function unchanged up to float reassociation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result, TensorError};
use crate::model::{Family, Model};
use crate::pruning::{bake_masks, bindings_of, nonempty_heads, DEFAULT_SCORE_INIT};
use crate::rng::{stream, RngState};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{finetune_steps, OptimConfig};

/// Maximum tolerated logit deviation between masked and compact models.
pub const EQUIVALENCE_BOUND: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub ffn_dims: Vec<usize>,
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactPlan {
    pub layers: Vec<LayerPlan>,
}

impl CompactPlan {
    /// Keeps everything the model currently has.
    pub fn identity<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerPlan {
                    ffn_dims: (0..l.d_ff()).collect(),
                    heads: (0..l.n_heads).collect(),
                })
                .collect(),
        }
    }

    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<(), TensorError> {
        if self.layers.len() != model.layers.len() {
            return Err(TensorError::dim(
                "compact",
                format!("plan has {} layers, model {}", self.layers.len(), model.layers.len()),
            ));
        }
        for (l, (p, layer)) in self.layers.iter().zip(&model.layers).enumerate() {
            for (what, idx, bound) in [("ffn", &p.ffn_dims, layer.d_ff()), ("head", &p.heads, layer.n_heads)] {
                if idx.is_empty() {
                    return Err(TensorError::dim("compact", format!("layer {l} keeps no {what}")));
                }
                if !idx.windows(2).all(|w| w[0] < w[1]) {
                    return Err(TensorError::dim("compact", format!("layer {l} {what} indices not sorted/unique")));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
                    return Err(TensorError::Index {
                        op: "compact",
                        index: bad,
                        bound,
                    });
                }
            }
        }
        Ok(())
    }

    /// Linear weights the compact model will hold.
    pub fn predicted_params(&self, d_model: usize, head_dim: usize) -> usize {
        self.layers
            .iter()
            .map(|p| 4 * d_model * head_dim * p.heads.len() + 2 * d_model * p.ffn_dims.len())
            .sum()
    }
}

/// Highest score among entries whose block touches the given rows/cols of
/// the bound weights; `None` when the model has no scores.
fn structure_score<T: Scalar>(model: &Model<T>, layer: usize, fams: &[Family], hit: impl Fn(Family, Range<usize>, Range<usize>) -> bool) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (si, s) in model.scores.iter().enumerate() {
        for (l, f, (bm, bn)) in bindings_of(model, si) {
            if l != layer || !fams.contains(&f) {
                continue;
            }
            let cols = model.layers[l].linear(f).in_features() / bn;
            for (e, v) in s.values.data().iter().enumerate() {
                let (r, c) = (e / cols, e % cols);
                if hit(f, r * bm..(r + 1) * bm, c * bn..(c + 1) * bn) {
                    let v = v.as_f64();
                    best = Some(best.map_or(v, |b| b.max(v)));
                }
            }
        }
    }
    best
}

fn overlaps(a: &Range<usize>, lo: usize, hi: usize) -> bool {
    a.start < hi && lo < a.end
}

fn argmax(values: impl Iterator<Item = Option<f64>>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| match v {
            Some(v) if v > best.1 => (i, v),
            _ => best,
        })
        .0
}

/// Kept FFN dimensions and heads, from the current effective weights.
pub fn plan<T: Scalar>(model: &Model<T>) -> CompactPlan {
    let hd = model.head_dim();
    let heads = nonempty_heads(model);
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let w1 = model.effective_weight(l, Family::Ffn1);
            let w2 = model.effective_weight(l, Family::Ffn2);
            let mut ffn_dims: Vec<usize> = (0..layer.d_ff())
                .filter(|&j| {
                    w1.row(j).iter().any(|x| !x.is_zero()) || (0..w2.rows()).any(|r| !w2.at(r, j).is_zero())
                })
                .collect();
            if ffn_dims.is_empty() {
                let pick = argmax((0..layer.d_ff()).map(|j| {
                    structure_score(model, l, &[Family::Ffn1, Family::Ffn2], |f, rows, cols| {
                        if f == Family::Ffn1 {
                            overlaps(&rows, j, j + 1)
                        } else {
                            overlaps(&cols, j, j + 1)
                        }
                    })
                }));
                ffn_dims.push(pick);
            }
            let mut kept: Vec<usize> = (0..layer.n_heads).filter(|&h| heads[l][h]).collect();
            if kept.is_empty() {
                let pick = argmax((0..layer.n_heads).map(|h| {
                    structure_score(model, l, &Family::ATTENTION, |f, rows, cols| {
                        if f == Family::O {
                            overlaps(&cols, h * hd, (h + 1) * hd)
                        } else {
                            overlaps(&rows, h * hd, (h + 1) * hd)
                        }
                    })
                }));
                kept.push(pick);
            }
            LayerPlan {
                ffn_dims,
                heads: kept,
            }
        })
        .collect();
    CompactPlan { layers }
}

fn head_rows(heads: &[usize], hd: usize) -> Vec<usize> {
    heads.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect()
}

/// Crops a weight-shaped tensor of `family` to the plan's kept structure.
fn crop<T: Scalar>(t: &Tensor<T>, family: Family, p: &LayerPlan, hd: usize) -> Tensor<T> {
    match family {
        Family::Q | Family::K | Family::V => t.select_rows(&head_rows(&p.heads, hd)),
        Family::O => t.select_cols(&head_rows(&p.heads, hd)),
        Family::Ffn1 => t.select_rows(&p.ffn_dims),
        Family::Ffn2 => t.select_cols(&p.ffn_dims),
    }
}

/// Dense model holding only the planned heads and dimensions. Masks are
/// folded into the weights and scores dropped.
pub fn compact<T: Scalar>(model: &Model<T>, plan: &CompactPlan) -> Result<Model<T>> {
    plan.validate(model)?;
    let hd = model.head_dim();
    let mut out = model.clone();
    bake_masks(&mut out);
    for (layer, p) in out.layers.iter_mut().zip(&plan.layers) {
        let rows = head_rows(&p.heads, hd);
        for f in Family::ALL {
            let lin = layer.linear_mut(f);
            lin.weight = crop(&lin.weight, f, p, hd);
            lin.bias = match f {
                Family::Q | Family::K | Family::V => lin.bias.select(&rows),
                Family::Ffn1 => lin.bias.select(&p.ffn_dims),
                _ => lin.bias.clone(),
            };
        }
        layer.n_heads = p.heads.len();
    }
    Ok(out)
}

/// Random token batches for equivalence checks.
pub fn random_batches(vocab: usize, seq: usize, batch: usize, n: usize, seed: u64) -> Vec<Batch> {
    let mut rng = RngState::new(seed, stream::EVAL_BATCHES);
    (0..n)
        .map(|_| {
            let ids: Vec<usize> = (0..batch * seq)
                .map(|i| if i % seq == 0 { crate::data::CLS as usize } else { 3 + rng.below(vocab - 3) })
                .collect();
            Batch {
                valid: vec![true; ids.len()],
                ids,
                labels: vec![0; batch],
                batch,
                seq,
            }
        })
        .collect()
}

/// Largest absolute logit difference over `batches`.
pub fn max_logit_deviation<T: Scalar>(a: &Model<T>, b: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for batch in batches {
        let la = a.logits(batch)?;
        let lb = b.logits(batch)?;
        if la.shape() != lb.shape() {
            return Err(TensorError::dim("verify_equivalence", "logit shapes differ").into());
        }
        worst = worst.max(la.max_abs_diff(&lb));
    }
    Ok(worst)
}

/// Deviation between masked and compact models on `n` random batches;
/// above [`EQUIVALENCE_BOUND`] this is an [`Error::Equivalence`].
pub fn verify_equivalence<T: Scalar>(masked: &Model<T>, compacted: &Model<T>, n: usize, seed: u64) -> Result<f64> {
    let seq = masked.config.max_len.min(32);
    let batches = random_batches(masked.config.vocab_size, seq, 8, n.max(1), seed);
    let deviation = max_logit_deviation(masked, compacted, &batches)?;
    if deviation.is_nan() || deviation > EQUIVALENCE_BOUND {
        return Err(Error::Equivalence {
            deviation,
            bound: EQUIVALENCE_BOUND,
        });
    }
    Ok(deviation)
}

/// A weight entry re-drawn by [`hybrid_fill`], in compact coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FilledEntry {
    pub layer: usize,
    pub family: Family,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct FillOutcome<T: Scalar = f32> {
    /// Compact model after filling, before fine-tuning.
    pub filled: Model<T>,
    /// Compact model after fine-tuning.
    pub model: Model<T>,
    pub entries: Vec<FilledEntry>,
}

#[derive(Debug, Clone)]
pub struct FillSettings<'a, T: Scalar> {
    pub teacher: Option<&'a Model<T>>,
    pub train: &'a Dataset,
    pub steps: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub optim: OptimConfig,
}

/// Re-draws masked-off weights inside the kept structure from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and fine-tunes the compact model.
/// Biases are left as they are.
pub fn hybrid_fill<T: Scalar>(masked: &Model<T>, plan: &CompactPlan, settings: &FillSettings<'_, T>) -> Result<FillOutcome<T>> {
    let hd = masked.head_dim();
    let mut filled = compact(masked, plan)?;
    let mut rng = RngState::new(settings.seed, stream::FILL);
    let mut entries = Vec::new();
    for (l, p) in plan.layers.iter().enumerate() {
        for f in Family::ALL {
            let Some(mask) = masked.mask(l, f) else { continue };
            let mask = crop(&mask, f, p, hd);
            let w = &mut filled.layers[l].linear_mut(f).weight;
            let cols = w.cols();
            let bound = 1.0 / (cols as f64).sqrt();
            for (i, (wv, mv)) in w.data_mut().iter_mut().zip(mask.data()).enumerate() {
                if mv.is_zero() {
                    *wv = T::from_f64_lossy(rng.uniform(-bound, bound));
                    entries.push(FilledEntry {
                        layer: l,
                        family: f,
                        row: i / cols,
                        col: i % cols,
                    });
                }
            }
        }
    }
    let model = finetune_steps(
        filled.clone(),
        settings.teacher,
        settings.train,
        settings.steps,
        settings.alpha,
        settings.temperature,
        settings.seed,
        &settings.optim,
    )?;
    Ok(FillOutcome { filled, model, entries })
}

/// Heads marked as protected for a rewound second run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionMask {
    pub heads: Vec<Vec<bool>>,
}

/// Protects every head the first run kept (guard-kept heads included).
pub fn rewind<T: Scalar>(first: &Model<T>) -> ProtectionMask {
    let p = plan(first);
    ProtectionMask {
        heads: first
            .layers
            .iter()
            .zip(&p.layers)
            .map(|(layer, lp)| (0..layer.n_heads).map(|h| lp.heads.contains(&h)).collect())
            .collect(),
    }
}

/// Score entries overlapping a protected head, as `(score, entry)` pairs,
/// plus the floor they are clamped to (threshold + initial score).
pub fn protected_entries<T: Scalar>(model: &Model<T>, protection: &ProtectionMask) -> Result<(Vec<(usize, usize)>, f64)> {
    if protection.heads.len() != model.layers.len()
        || protection.heads.iter().zip(&model.layers).any(|(p, l)| p.len() != l.n_heads)
    {
        return Err(TensorError::dim("rewind", "protection mask does not match the head census").into());
    }
    let hd = model.head_dim();
    let mut out = Vec::new();
    for (si, s) in model.scores.iter().enumerate() {
        let mut hit = vec![false; s.values.len()];
        for (l, f, (bm, bn)) in bindings_of(model, si) {
            if !f.is_attention() {
                continue;
            }
            let cols = model.layers[l].linear(f).in_features() / bn;
            for (e, flag) in hit.iter_mut().enumerate() {
                let (r, c) = (e / cols, e % cols);
                let span = if f == Family::O { c * bn..(c + 1) * bn } else { r * bm..(r + 1) * bm };
                if protection.heads[l]
                    .iter()
                    .enumerate()
                    .any(|(h, &p)| p && overlaps(&span, h * hd, (h + 1) * hd))
                {
                    *flag = true;
                }
            }
        }
        out.extend(hit.iter().enumerate().filter(|(_, &h)| h).map(|(e, _)| (si, e)));
    }
    Ok((out, model.threshold + DEFAULT_SCORE_INIT))
}
