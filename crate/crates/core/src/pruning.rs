//! Block-partitioned scores, threshold masks and the split regularizer.
//!
//! Every pattern reduces to a grid: a weight `[M, N]` bound to a score vector
//! with block `(bm, bn)` uses score `(i / bm) * (N / bn) + j / bn` for entry
//! `(i, j)`. Square blocks are `(s, s)`; a paired FFN dimension is a full row
//! of `W1` (`(1, d_model)`) together with a full column of `W2`
//! (`(d_model, 1)`) sharing one score vector; a head block is the head's
//! output-row slab of `W_q/W_k/W_v` and input-column slab of `W_o`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result, TensorError};
use crate::model::{Family, Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.0;
/// Initial score: just above the threshold so training starts dense.
pub const DEFAULT_SCORE_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockKind {
    Unstructured,
    Square { size: usize },
    DimPairedFfn,
    HeadBlocks { tied: bool },
}

impl BlockKind {
    /// Weights covered by one score entry in a single matrix.
    pub fn group_size(self, d_model: usize, head_dim: usize) -> usize {
        match self {
            BlockKind::Unstructured => 1,
            BlockKind::Square { size } => size * size,
            // one W1 row plus one W2 column
            BlockKind::DimPairedFfn => 2 * d_model,
            BlockKind::HeadBlocks { .. } => head_dim * d_model,
        }
    }

    fn square_side(self) -> Option<usize> {
        match self {
            BlockKind::Unstructured => Some(1),
            BlockKind::Square { size } => Some(size),
            _ => None,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Unstructured => write!(f, "unstructured"),
            BlockKind::Square { size } => write!(f, "square{size}"),
            BlockKind::DimPairedFfn => write!(f, "dim"),
            BlockKind::HeadBlocks { tied: true } => write!(f, "heads"),
            BlockKind::HeadBlocks { tied: false } => write!(f, "heads-untied"),
        }
    }
}

/// Block kinds for the attention projections and the FFN pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPattern {
    pub attention: BlockKind,
    pub ffn: BlockKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegFamily {
    Attention,
    Ffn,
}

impl From<Family> for RegFamily {
    fn from(f: Family) -> Self {
        if f.is_attention() {
            RegFamily::Attention
        } else {
            RegFamily::Ffn
        }
    }
}

/// Links a weight to the score tensor gating it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBinding {
    pub score: usize,
    pub block: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor<T = f32> {
    pub values: Tensor<T>,
    pub family: RegFamily,
    pub kind: BlockKind,
    pub layer: usize,
    pub label: String,
}

impl<T: Scalar> ScoreTensor<T> {
    pub fn cast<U: Scalar>(&self) -> ScoreTensor<U> {
        ScoreTensor {
            values: self.values.cast(),
            family: self.family,
            kind: self.kind,
            layer: self.layer,
            label: self.label.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda_att: f64,
    pub lambda_ffn: f64,
}

impl RegWeights {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda_att: lambda,
            lambda_ffn: lambda,
        }
    }

    pub fn get(&self, f: RegFamily) -> f64 {
        match f {
            RegFamily::Attention => self.lambda_att,
            RegFamily::Ffn => self.lambda_ffn,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_att: self.lambda_att * factor,
            lambda_ffn: self.lambda_ffn * factor,
        }
    }
}

/// Layer extents relevant to group sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl From<&ModelConfig> for Geometry {
    fn from(c: &ModelConfig) -> Self {
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
        }
    }
}

/// Binary mask `[rows, cols]` for a flat score grid with the given block.
pub fn expand_mask<T: Scalar>(
    scores: &Tensor<T>,
    threshold: f64,
    target: (usize, usize),
    block: (usize, usize),
) -> Result<Tensor<T>, TensorError> {
    let (m, n) = target;
    let (bm, bn) = block;
    if bm == 0 || bn == 0 || m % bm != 0 || n % bn != 0 {
        return Err(TensorError::dim(
            "expand_mask",
            format!("block {block:?} does not tile [{m}, {n}]"),
        ));
    }
    let grid_cols = n / bn;
    if (m / bm) * grid_cols != scores.len() {
        return Err(TensorError::dim(
            "expand_mask",
            format!(
                "{} scores for a {}x{} block grid",
                scores.len(),
                m / bm,
                grid_cols
            ),
        ));
    }
    let s = scores.data();
    let keep: Vec<T> = s
        .iter()
        .map(|&v| if v.as_f64() > threshold { T::one() } else { T::zero() })
        .collect();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let base = (i / bm) * grid_cols;
        data.extend((0..n).map(|j| keep[base + j / bn]));
    }
    Tensor::new(vec![m, n], data)
}

/// Sums of `g` over each block of the grid, in score order.
pub fn block_sums<T: Scalar>(g: &Tensor<T>, block: (usize, usize), grid_cols: usize, n_groups: usize) -> Vec<T> {
    let (bm, bn) = block;
    let n = g.cols();
    let mut out = vec![T::zero(); n_groups];
    for (i, row) in g.data().chunks_exact(n).enumerate() {
        let base = (i / bm) * grid_cols;
        if bn == 1 {
            for (o, &x) in out[base..base + n].iter_mut().zip(row) {
                *o = *o + x;
            }
        } else {
            for (c, chunk) in row.chunks_exact(bn).enumerate() {
                out[base + c] = out[base + c] + chunk.iter().copied().sum::<T>();
            }
        }
    }
    out
}

/// Straight-through score gradient of one score group set: the block sums of
/// `upstream ⊙ W`, accumulated over every matrix bound to the same scores.
pub fn score_task_grad<T: Scalar>(
    members: &[(&Tensor<T>, &Tensor<T>, (usize, usize))],
    n_groups: usize,
) -> Result<Vec<T>, TensorError> {
    let mut out = vec![T::zero(); n_groups];
    for &(upstream, w, block) in members {
        let prod = upstream.zip_map(w, |a, b| a * b)?;
        let grid_cols = w.cols() / block.1;
        if (w.rows() / block.0) * grid_cols != n_groups {
            return Err(TensorError::dim("score_task_grad", "block grid does not match scores"));
        }
        for (o, s) in out.iter_mut().zip(block_sums(&prod, block, grid_cols, n_groups)) {
            *o = *o + s;
        }
    }
    Ok(out)
}

/// `Σ_f λ_f Σ σ(S_f)` and its gradient `λ_f σ'(S)` per score tensor.
pub fn reg_value_and_grad<T: Scalar>(scores: &[ScoreTensor<T>], reg: &RegWeights) -> (f64, Vec<Tensor<T>>) {
    let mut value = 0.0;
    let grads = scores
        .iter()
        .map(|s| {
            let lambda = reg.get(s.family);
            let lt = T::from_f64_lossy(lambda);
            let sum: f64 = s.values.data().iter().map(|&x| sigmoid(x).as_f64()).sum();
            value += lambda * sum;
            s.values.map(|x| {
                let sg = sigmoid(x);
                lt * sg * (T::one() - sg)
            })
        })
        .collect();
    (value, grads)
}

/// λ per family, scaled by the smallest group size over each family's group
/// size so every weight sees the same regularization pressure.
pub fn balance_lambdas(lambda_base: f64, geometry: Geometry, pattern: BlockPattern) -> RegWeights {
    let hd = geometry.d_model / geometry.n_heads;
    let ga = pattern.attention.group_size(geometry.d_model, hd) as f64;
    let gf = pattern.ffn.group_size(geometry.d_model, hd) as f64;
    let gmin = ga.min(gf);
    RegWeights {
        lambda_att: lambda_base * gmin / ga,
        lambda_ffn: lambda_base * gmin / gf,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub density: f64,
    pub per_family: BTreeMap<Family, f64>,
    pub nonzero: usize,
    /// Linear weights of the original dense architecture.
    pub dense_total: usize,
    pub nonempty_heads: usize,
    pub total_heads: usize,
    pub head_compression: f64,
    pub ffn_dims: usize,
}

/// Heads (per layer) with any nonzero effective weight in their four slices.
pub fn nonempty_heads<T: Scalar>(model: &Model<T>) -> Vec<Vec<bool>> {
    let hd = model.head_dim();
    (0..model.layers.len())
        .map(|l| {
            let q = model.effective_weight(l, Family::Q);
            let k = model.effective_weight(l, Family::K);
            let v = model.effective_weight(l, Family::V);
            let o = model.effective_weight(l, Family::O);
            (0..model.layers[l].n_heads)
                .map(|h| {
                    let rows = h * hd..(h + 1) * hd;
                    let in_rows = |w: &Tensor<T>| rows.clone().any(|r| w.row(r).iter().any(|x| !x.is_zero()));
                    in_rows(&q)
                        || in_rows(&k)
                        || in_rows(&v)
                        || (0..o.rows()).any(|r| o.row(r)[rows.clone()].iter().any(|x| !x.is_zero()))
                })
                .collect()
        })
        .collect()
}

pub fn density_report<T: Scalar>(model: &Model<T>) -> DensityReport {
    let census = model.linear_param_census();
    let c = &model.config;
    let dense_total = c.dense_linear_params();
    let per_family = census
        .per_family
        .iter()
        .map(|(&f, count)| {
            let full = c.n_layers
                * if f.is_attention() {
                    c.d_model * c.d_model
                } else {
                    c.d_model * c.d_ff
                };
            (f, count.nonzero as f64 / full as f64)
        })
        .collect();
    let nonempty: usize = nonempty_heads(model).iter().map(|l| l.iter().filter(|&&b| b).count()).sum();
    let total_heads = model.original_heads();
    DensityReport {
        density: census.nonzero as f64 / dense_total as f64,
        per_family,
        nonzero: census.nonzero,
        dense_total,
        nonempty_heads: nonempty,
        total_heads,
        head_compression: if nonempty == 0 {
            f64::INFINITY
        } else {
            total_heads as f64 / nonempty as f64
        },
        ffn_dims: model.layers.iter().map(|l| l.d_ff()).sum(),
    }
}

/// Rows of the method table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Block,
    Hybrid,
    HybridNt,
    Struct,
    HybridFilled,
    HybridFilledLt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Block,
        Method::Hybrid,
        Method::HybridNt,
        Method::Struct,
        Method::HybridFilled,
        Method::HybridFilledLt,
    ];
    pub const DEFAULT_ATTENTION_BLOCK: usize = 32;

    pub fn name(self) -> &'static str {
        match self {
            Method::Block => "block",
            Method::Hybrid => "hybrid",
            Method::HybridNt => "hybrid-nt",
            Method::Struct => "struct",
            Method::HybridFilled => "hybrid-filled",
            Method::HybridFilledLt => "hybrid-filled-lt",
        }
    }

    /// Patterns for this method; `block` overrides the square block side.
    pub fn pattern(self, block: Option<usize>) -> BlockPattern {
        let side = block.unwrap_or(Self::DEFAULT_ATTENTION_BLOCK);
        let square = if side == 1 {
            BlockKind::Unstructured
        } else {
            BlockKind::Square { size: side }
        };
        match self {
            Method::Block => BlockPattern {
                attention: square,
                ffn: square,
            },
            Method::Hybrid | Method::HybridNt | Method::HybridFilled | Method::HybridFilledLt => BlockPattern {
                attention: square,
                ffn: BlockKind::DimPairedFfn,
            },
            Method::Struct => BlockPattern {
                attention: BlockKind::HeadBlocks { tied: true },
                ffn: BlockKind::DimPairedFfn,
            },
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Method::HybridNt
    }

    pub fn large_teacher(self) -> bool {
        self == Method::HybridFilledLt
    }

    pub fn fills(self) -> bool {
        matches!(self, Method::HybridFilled | Method::HybridFilledLt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| {
                Error::Tensor(TensorError::Contract(format!(
                    "unknown method `{s}` (expected one of block, hybrid, hybrid-nt, struct, hybrid-filled, hybrid-filled-lt)"
                )))
            })
    }
}

fn check_square(side: usize) -> Result<()> {
    if side == 0 || !side.is_power_of_two() || side > 32 {
        return Err(Error::Config(format!(
            "square block side {side} must be a power of two in 1..=32"
        )));
    }
    Ok(())
}

/// Creates score tensors (initialised to `s0`) and binds every prunable
/// weight according to `pattern`. Existing scores are replaced.
pub fn attach_pattern<T: Scalar>(model: &mut Model<T>, pattern: BlockPattern, s0: f64) -> Result<()> {
    if s0 <= model.threshold {
        return Err(Error::Config(format!(
            "score init {s0} must exceed threshold {}",
            model.threshold
        )));
    }
    let init = T::from_f64_lossy(s0);
    let hd = model.head_dim();
    let d = model.config.d_model;
    let mut scores: Vec<ScoreTensor<T>> = Vec::new();
    let mut push = |values: Tensor<T>, family: RegFamily, kind: BlockKind, layer: usize, label: String| {
        scores.push(ScoreTensor {
            values,
            family,
            kind,
            layer,
            label,
        });
        scores.len() - 1
    };
    for l in 0..model.layers.len() {
        let heads = model.layers[l].n_heads;
        let d_ff = model.layers[l].d_ff();
        // attention
        match pattern.attention {
            k @ (BlockKind::Unstructured | BlockKind::Square { .. }) => {
                let s = k.square_side().expect("square kind");
                check_square(s)?;
                for f in Family::ATTENTION {
                    let lin = model.layers[l].linear(f);
                    let (m, n) = (lin.out_features(), lin.in_features());
                    if m % s != 0 || n % s != 0 {
                        return Err(Error::Config(format!(
                            "block side {s} does not divide layer {l} {} [{m}, {n}]",
                            f.name()
                        )));
                    }
                    let idx = push(
                        Tensor::full(&[m / s, n / s], init),
                        RegFamily::Attention,
                        k,
                        l,
                        format!("layers.{l}.{}.score", f.name()),
                    );
                    model.layers[l].linear_mut(f).binding = Some(MaskBinding {
                        score: idx,
                        block: (s, s),
                    });
                }
            }
            k @ BlockKind::HeadBlocks { tied } => {
                let mut shared = None;
                for f in Family::ATTENTION {
                    let idx = match (tied, shared) {
                        (true, Some(i)) => i,
                        _ => {
                            let label = if tied {
                                format!("layers.{l}.heads.score")
                            } else {
                                format!("layers.{l}.{}.heads.score", f.name())
                            };
                            let i = push(Tensor::full(&[heads], init), RegFamily::Attention, k, l, label);
                            shared = Some(i);
                            i
                        }
                    };
                    let block = if f == Family::O { (d, hd) } else { (hd, d) };
                    model.layers[l].linear_mut(f).binding = Some(MaskBinding { score: idx, block });
                }
            }
            BlockKind::DimPairedFfn => {
                return Err(Error::Config("dimension blocks apply to the FFN only".into()));
            }
        }
        // feed-forward
        match pattern.ffn {
            k @ (BlockKind::Unstructured | BlockKind::Square { .. }) => {
                let s = k.square_side().expect("square kind");
                check_square(s)?;
                for f in [Family::Ffn1, Family::Ffn2] {
                    let lin = model.layers[l].linear(f);
                    let (m, n) = (lin.out_features(), lin.in_features());
                    if m % s != 0 || n % s != 0 {
                        return Err(Error::Config(format!(
                            "block side {s} does not divide layer {l} {} [{m}, {n}]",
                            f.name()
                        )));
                    }
                    let idx = push(
                        Tensor::full(&[m / s, n / s], init),
                        RegFamily::Ffn,
                        k,
                        l,
                        format!("layers.{l}.{}.score", f.name()),
                    );
                    model.layers[l].linear_mut(f).binding = Some(MaskBinding {
                        score: idx,
                        block: (s, s),
                    });
                }
            }
            BlockKind::DimPairedFfn => {
                let idx = push(
                    Tensor::full(&[d_ff], init),
                    RegFamily::Ffn,
                    BlockKind::DimPairedFfn,
                    l,
                    format!("layers.{l}.ffn.score"),
                );
                model.layers[l].ffn1.binding = Some(MaskBinding {
                    score: idx,
                    block: (1, d),
                });
                model.layers[l].ffn2.binding = Some(MaskBinding {
                    score: idx,
                    block: (d, 1),
                });
            }
            BlockKind::HeadBlocks { .. } => {
                return Err(Error::Config("head blocks apply to attention only".into()));
            }
        }
    }
    model.scores = scores;
    Ok(())
}

/// [`attach_pattern`] for a method-table row.
pub fn attach_method<T: Scalar>(model: &mut Model<T>, method: Method, block: Option<usize>) -> Result<BlockPattern> {
    let pattern = method.pattern(block);
    attach_pattern(model, pattern, DEFAULT_SCORE_INIT)?;
    Ok(pattern)
}

/// Weights bound to score tensor `score`: `(layer, family, block)`.
pub fn bindings_of<T: Scalar>(model: &Model<T>, score: usize) -> Vec<(usize, Family, (usize, usize))> {
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for f in Family::ALL {
            if let Some(b) = layer.linear(f).binding {
                if b.score == score {
                    out.push((l, f, b.block));
                }
            }
        }
    }
    out
}

/// Folds the current masks into the raw weights and drops all scores.
pub fn bake_masks<T: Scalar>(model: &mut Model<T>) {
    for l in 0..model.layers.len() {
        for f in Family::ALL {
            let w = model.effective_weight(l, f);
            let lin = model.layers[l].linear_mut(f);
            lin.weight = w;
            lin.binding = None;
        }
    }
    model.scores.clear();
}
