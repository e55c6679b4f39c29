//! Encoder-only transformer with six prunable linear families per layer.
//!
//! Weights are stored `[out, in]`. The query/key/value projections are
//! head-major along their output axis and the output projection along its
//! input axis, so head `h` owns rows `h*hd..(h+1)*hd` of `W_q/W_k/W_v` and
//! the same range of columns of `W_o`. Layers may carry different head
//! counts and FFN widths once compacted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result, TensorError};
use crate::pruning::{expand_mask, MaskBinding, ScoreTensor};
use crate::rng::{stream, RngState};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Q,
    K,
    V,
    O,
    Ffn1,
    Ffn2,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Q,
        Family::K,
        Family::V,
        Family::O,
        Family::Ffn1,
        Family::Ffn2,
    ];
    pub const ATTENTION: [Family; 4] = [Family::Q, Family::K, Family::V, Family::O];

    pub fn is_attention(self) -> bool {
        !matches!(self, Family::Ffn1 | Family::Ffn2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Q => "q",
            Family::K => "k",
            Family::V => "v",
            Family::O => "o",
            Family::Ffn1 => "ffn1",
            Family::Ffn2 => "ffn2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_layers: 4,
            vocab_size: 256,
            max_len: 64,
            n_classes: 2,
            activation: Activation::Gelu,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if [self.d_model, self.n_heads, self.d_ff, self.n_layers, self.vocab_size, self.max_len]
            .contains(&0)
        {
            return fail("all extents must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff < self.d_model {
            return fail(format!("d_ff {} must be >= d_model {}", self.d_ff, self.d_model));
        }
        if self.n_classes < 2 {
            return fail("need at least two classes".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same depth and head count with doubled width.
    pub fn large_teacher(&self) -> Self {
        Self {
            d_model: self.d_model * 2,
            d_ff: self.d_ff * 2,
            ..self.clone()
        }
    }

    /// Linear-layer weight count of the dense architecture.
    pub fn dense_linear_params(&self) -> usize {
        self.n_layers * (4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = f32> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// A linear map whose weight may be gated by a block mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunableLinear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub family: Family,
    pub binding: Option<MaskBinding>,
}

impl<T: Scalar> PrunableLinear<T> {
    fn init(out: usize, inp: usize, family: Family, rng: &mut RngState) -> Self {
        Self {
            weight: rng.normal_tensor(&[out, inp], (1.0 / inp as f64).sqrt()),
            bias: Tensor::zeros(&[out]),
            family,
            binding: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T = f32> {
    pub q: PrunableLinear<T>,
    pub k: PrunableLinear<T>,
    pub v: PrunableLinear<T>,
    pub o: PrunableLinear<T>,
    pub ffn1: PrunableLinear<T>,
    pub ffn2: PrunableLinear<T>,
    pub ln_attn: LayerNormParams<T>,
    pub ln_ffn: LayerNormParams<T>,
    pub n_heads: usize,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn linear(&self, f: Family) -> &PrunableLinear<T> {
        match f {
            Family::Q => &self.q,
            Family::K => &self.k,
            Family::V => &self.v,
            Family::O => &self.o,
            Family::Ffn1 => &self.ffn1,
            Family::Ffn2 => &self.ffn2,
        }
    }

    pub fn linear_mut(&mut self, f: Family) -> &mut PrunableLinear<T> {
        match f {
            Family::Q => &mut self.q,
            Family::K => &mut self.k,
            Family::V => &mut self.v,
            Family::O => &mut self.o,
            Family::Ffn1 => &mut self.ffn1,
            Family::Ffn2 => &mut self.ffn2,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.ffn1.out_features()
    }
}

/// First-token pooling followed by a projection to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub emb_ln: LayerNormParams<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub classifier: Classifier<T>,
    /// Score tensors referenced by the layers' mask bindings.
    pub scores: Vec<ScoreTensor<T>>,
    pub threshold: f64,
}

/// Tape handles for one registered model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// Every parameter, in [`Model::named_params`] order.
    pub params: Vec<Var>,
    pub scores: Vec<Var>,
}

const PER_LAYER: usize = 16;
const HEAD_PARAMS: usize = 4;

impl ModelVars {
    fn linear(&self, layer: usize, f: Family) -> (Var, Var) {
        let base = HEAD_PARAMS + layer * PER_LAYER;
        let off = match f {
            Family::Q => 0,
            Family::K => 2,
            Family::V => 4,
            Family::O => 6,
            Family::Ffn1 => 10,
            Family::Ffn2 => 12,
        };
        (self.params[base + off], self.params[base + off + 1])
    }

    fn ln_attn(&self, layer: usize) -> (Var, Var) {
        let base = HEAD_PARAMS + layer * PER_LAYER + 8;
        (self.params[base], self.params[base + 1])
    }

    fn ln_ffn(&self, layer: usize) -> (Var, Var) {
        let base = HEAD_PARAMS + layer * PER_LAYER + 14;
        (self.params[base], self.params[base + 1])
    }

    fn classifier(&self) -> (Var, Var) {
        let n = self.params.len();
        (self.params[n - 2], self.params[n - 1])
    }
}

/// Per-family counts of linear-layer weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyCount {
    pub total: usize,
    pub nonzero: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub nonzero: usize,
    pub per_family: BTreeMap<Family, FamilyCount>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed, stream::INIT);
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                q: PrunableLinear::init(d, d, Family::Q, &mut rng),
                k: PrunableLinear::init(d, d, Family::K, &mut rng),
                v: PrunableLinear::init(d, d, Family::V, &mut rng),
                o: PrunableLinear::init(d, d, Family::O, &mut rng),
                ffn1: PrunableLinear::init(config.d_ff, d, Family::Ffn1, &mut rng),
                ffn2: PrunableLinear::init(d, config.d_ff, Family::Ffn2, &mut rng),
                ln_attn: LayerNormParams::new(d),
                ln_ffn: LayerNormParams::new(d),
                n_heads: config.n_heads,
            })
            .collect();
        Ok(Self {
            token_emb: rng.normal_tensor(&[config.vocab_size, d], 0.02),
            pos_emb: rng.normal_tensor(&[config.max_len, d], 0.02),
            emb_ln: LayerNormParams::new(d),
            layers,
            classifier: Classifier {
                weight: rng.normal_tensor(&[config.n_classes, d], (1.0 / d as f64).sqrt()),
                bias: Tensor::zeros(&[config.n_classes]),
            },
            scores: Vec::new(),
            threshold: crate::pruning::DEFAULT_THRESHOLD,
            config,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim()
    }

    pub fn is_masked(&self) -> bool {
        !self.scores.is_empty()
    }

    /// Parameter names and tensors in registration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embeddings.token".into(), &self.token_emb),
            ("embeddings.position".into(), &self.pos_emb),
            ("embeddings.ln.gain".into(), &self.emb_ln.gain),
            ("embeddings.ln.bias".into(), &self.emb_ln.bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("q.weight"), &layer.q.weight),
                (p("q.bias"), &layer.q.bias),
                (p("k.weight"), &layer.k.weight),
                (p("k.bias"), &layer.k.bias),
                (p("v.weight"), &layer.v.weight),
                (p("v.bias"), &layer.v.bias),
                (p("o.weight"), &layer.o.weight),
                (p("o.bias"), &layer.o.bias),
                (p("ln_attn.gain"), &layer.ln_attn.gain),
                (p("ln_attn.bias"), &layer.ln_attn.bias),
                (p("ffn1.weight"), &layer.ffn1.weight),
                (p("ffn1.bias"), &layer.ffn1.bias),
                (p("ffn2.weight"), &layer.ffn2.weight),
                (p("ffn2.bias"), &layer.ffn2.bias),
                (p("ln_ffn.gain"), &layer.ln_ffn.gain),
                (p("ln_ffn.bias"), &layer.ln_ffn.bias),
            ]);
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Mutable parameters in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.token_emb,
            &mut self.pos_emb,
            &mut self.emb_ln.gain,
            &mut self.emb_ln.bias,
        ];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.q.weight,
                &mut layer.q.bias,
                &mut layer.k.weight,
                &mut layer.k.bias,
                &mut layer.v.weight,
                &mut layer.v.bias,
                &mut layer.o.weight,
                &mut layer.o.bias,
                &mut layer.ln_attn.gain,
                &mut layer.ln_attn.bias,
                &mut layer.ffn1.weight,
                &mut layer.ffn1.bias,
                &mut layer.ffn2.weight,
                &mut layer.ffn2.bias,
                &mut layer.ln_ffn.gain,
                &mut layer.ln_ffn.bias,
            ]);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Binary mask currently applied to a linear weight, if it is scored.
    pub fn mask(&self, layer: usize, f: Family) -> Option<Tensor<T>> {
        let lin = self.layers[layer].linear(f);
        lin.binding.map(|b| {
            let shape = lin.weight.shape();
            expand_mask(&self.scores[b.score].values, self.threshold, (shape[0], shape[1]), b.block)
                .expect("binding geometry validated at attach time")
        })
    }

    /// `W ⊙ mask` for scored weights, the raw weight otherwise.
    pub fn effective_weight(&self, layer: usize, f: Family) -> Tensor<T> {
        let w = &self.layers[layer].linear(f).weight;
        match self.mask(layer, f) {
            Some(m) => w.zip_map(&m, |a, b| a * b).expect("mask matches weight"),
            None => w.clone(),
        }
    }

    /// Registers parameters (and scores) as tape leaves.
    pub fn register(&self, tape: &mut Tape<T>, train_params: bool, train_scores: bool) -> ModelVars {
        let params = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if train_params {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let scores = self
            .scores
            .iter()
            .map(|s| {
                if train_scores {
                    tape.param(s.values.clone())
                } else {
                    tape.constant(s.values.clone())
                }
            })
            .collect();
        ModelVars { params, scores }
    }

    fn effective_var(&self, tape: &mut Tape<T>, vars: &ModelVars, layer: usize, f: Family) -> Result<Var> {
        let (w, _) = vars.linear(layer, f);
        let lin = self.layers[layer].linear(f);
        match lin.binding {
            None => Ok(w),
            Some(b) => {
                let shape = lin.weight.shape();
                let mask = tape.ste_mask(vars.scores[b.score], (shape[0], shape[1]), b.block, self.threshold)?;
                Ok(tape.masked_weight(w, mask)?)
            }
        }
    }

    fn linear_on(&self, tape: &mut Tape<T>, vars: &ModelVars, layer: usize, f: Family, x: Var) -> Result<Var> {
        let w = self.effective_var(tape, vars, layer, f)?;
        let (_, b) = vars.linear(layer, f);
        let y = tape.matmul_t(x, w, false, true)?;
        Ok(tape.add(y, b)?)
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: Option<&mut RngState>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                let shape = tape.value(x).shape().to_vec();
                let mask = Tensor::from_fn(&shape, |_| if rng.bernoulli(p) { T::zero() } else { keep });
                let m = tape.constant(mask);
                Ok(tape.mul(x, m)?)
            }
            _ => Ok(x),
        }
    }

    /// Multi-head attention sublayer (before residual and norm).
    pub fn mha_forward(&self, tape: &mut Tape<T>, vars: &ModelVars, layer: usize, x: Var, batch: &Batch) -> Result<Var> {
        let heads = self.layers[layer].n_heads;
        let hd = self.head_dim();
        let (b, l) = (batch.batch, batch.seq);
        let q = self.linear_on(tape, vars, layer, Family::Q, x)?;
        let k = self.linear_on(tape, vars, layer, Family::K, x)?;
        let v = self.linear_on(tape, vars, layer, Family::V, x)?;
        let qs = tape.split_heads(q, b, l, heads)?;
        let ks = tape.split_heads(k, b, l, heads)?;
        let vs = tape.split_heads(v, b, l, heads)?;
        let scores = tape.batched_matmul(qs, ks, b * heads, false, true)?;
        let mut scores = tape.scale(scores, T::from_f64_lossy(1.0 / (hd as f64).sqrt()))?;
        if batch.has_padding() {
            let mut bias = Vec::with_capacity(b * heads * l * l);
            let neg = T::from_f64_lossy(MASKED_LOGIT);
            for bi in 0..b {
                let keys = &batch.valid[bi * l..(bi + 1) * l];
                for _ in 0..heads * l {
                    bias.extend(keys.iter().map(|&ok| if ok { T::zero() } else { neg }));
                }
            }
            let bias = tape.constant(Tensor::new(vec![b * heads * l, l], bias)?);
            scores = tape.add(scores, bias)?;
        }
        let probs = tape.softmax(scores)?;
        let ctx = tape.batched_matmul(probs, vs, b * heads, false, false)?;
        let merged = tape.merge_heads(ctx, b, l, heads)?;
        self.linear_on(tape, vars, layer, Family::O, merged)
    }

    /// Feed-forward sublayer `act(x W1ᵀ + b1) W2ᵀ + b2` (before residual and norm).
    pub fn ffn_forward(&self, tape: &mut Tape<T>, vars: &ModelVars, layer: usize, x: Var) -> Result<Var> {
        let h = self.linear_on(tape, vars, layer, Family::Ffn1, x)?;
        let h = match self.config.activation {
            crate::model::Activation::Gelu => tape.gelu(h)?,
            crate::model::Activation::Relu => tape.relu(h)?,
        };
        self.linear_on(tape, vars, layer, Family::Ffn2, h)
    }

    /// Embeddings → encoder layers → pooled class logits `[batch, n_classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        batch: &Batch,
        mut dropout: Option<&mut RngState>,
    ) -> Result<Var> {
        let (b, l) = (batch.batch, batch.seq);
        if l > self.config.max_len {
            return Err(TensorError::Contract(format!(
                "sequence length {l} exceeds max_len {}",
                self.config.max_len
            ))
            .into());
        }
        if b == 0 || batch.ids.len() != b * l {
            return Err(TensorError::dim("forward", "batch ids do not match batch x seq").into());
        }
        let p = &vars.params;
        let tok = tape.embedding(p[0], &batch.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.embedding(p[1], &positions)?;
        let x = tape.add(tok, pos)?;
        let x = tape.layer_norm(x, p[2], p[3], LN_EPS)?;
        let mut x = self.dropout(tape, x, dropout.as_deref_mut())?;
        for layer in 0..self.layers.len() {
            let a = self.mha_forward(tape, vars, layer, x, batch)?;
            let a = self.dropout(tape, a, dropout.as_deref_mut())?;
            let r = tape.add(x, a)?;
            let (g, bb) = vars.ln_attn(layer);
            x = tape.layer_norm(r, g, bb, LN_EPS)?;
            let f = self.ffn_forward(tape, vars, layer, x)?;
            let f = self.dropout(tape, f, dropout.as_deref_mut())?;
            let r = tape.add(x, f)?;
            let (g, bb) = vars.ln_ffn(layer);
            x = tape.layer_norm(r, g, bb, LN_EPS)?;
        }
        let first: Vec<usize> = (0..b).map(|i| i * l).collect();
        let pooled = tape.embedding(x, &first)?;
        let (w, bias) = vars.classifier();
        let logits = tape.matmul_t(pooled, w, false, true)?;
        Ok(tape.add(logits, bias)?)
    }

    /// Inference-mode logits (no dropout, nothing recorded for backward).
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let vars = self.register(&mut tape, false, false);
        let out = self.forward(&mut tape, &vars, batch, None)?;
        Ok(tape.value(out).clone())
    }

    /// Counts weights of the six prunable families (biases, embeddings,
    /// norms and the classifier are excluded); `nonzero` uses masked weights.
    pub fn linear_param_census(&self) -> Census {
        let mut census = Census::default();
        for l in 0..self.layers.len() {
            for f in Family::ALL {
                let w = self.effective_weight(l, f);
                let entry = census.per_family.entry(f).or_default();
                entry.total += w.len();
                entry.nonzero += w.count_nonzero();
                census.total += w.len();
                census.nonzero += w.count_nonzero();
            }
        }
        census
    }

    /// Total heads of the original architecture.
    pub fn original_heads(&self) -> usize {
        self.config.n_heads * self.config.n_layers
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let lin = |p: &PrunableLinear<T>| PrunableLinear {
            weight: p.weight.cast(),
            bias: p.bias.cast(),
            family: p.family,
            binding: p.binding,
        };
        let ln = |p: &LayerNormParams<T>| LayerNormParams {
            gain: p.gain.cast(),
            bias: p.bias.cast(),
        };
        Model {
            config: self.config.clone(),
            token_emb: self.token_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            emb_ln: ln(&self.emb_ln),
            layers: self
                .layers
                .iter()
                .map(|layer| EncoderLayer {
                    q: lin(&layer.q),
                    k: lin(&layer.k),
                    v: lin(&layer.v),
                    o: lin(&layer.o),
                    ffn1: lin(&layer.ffn1),
                    ffn2: lin(&layer.ffn2),
                    ln_attn: ln(&layer.ln_attn),
                    ln_ffn: ln(&layer.ln_ffn),
                    n_heads: layer.n_heads,
                })
                .collect(),
            classifier: Classifier {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
            scores: self.scores.iter().map(ScoreTensor::cast).collect(),
            threshold: self.threshold,
        }
    }

    /// Order-sensitive digest of every parameter and score bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |t: &Tensor<T>| {
            for x in t.data() {
                let bits = x.as_f64().to_bits();
                h ^= bits;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (_, t) in self.named_params() {
            feed(t);
        }
        for s in &self.scores {
            feed(&s.values);
        }
        h
    }
}
