//! Weight-only int8 quantization with one scale per output row.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::model::{Family, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub values: Vec<i8>,
    pub scales: Vec<f32>,
    pub shape: [usize; 2],
}

impl QuantTensor {
    pub fn bytes(&self) -> usize {
        self.values.len() + 4 * self.scales.len()
    }
}

/// `scale_r = max|W[r,:]| / 127`, `q = round(W / scale_r)` (half away from
/// zero) clamped to ±127. All-zero rows get scale 1.
pub fn quantize_tensor(w: &Tensor<f32>) -> Result<QuantTensor, TensorError> {
    if w.ndim() != 2 {
        return Err(TensorError::dim("quantize", format!("expected 2-D, got {:?}", w.shape())));
    }
    if !w.all_finite() {
        return Err(TensorError::NonFinite { op: "quantize" });
    }
    let (rows, cols) = (w.rows(), w.cols());
    let mut values = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let max = row.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
        scales.push(scale);
        values.extend(row.iter().map(|&x| (x / scale).round().clamp(-127.0, 127.0) as i8));
    }
    Ok(QuantTensor {
        values,
        scales,
        shape: [rows, cols],
    })
}

pub fn dequantize(q: &QuantTensor) -> Tensor<f32> {
    let cols = q.shape[1];
    Tensor::from_fn(&q.shape, |i| q.values[i] as f32 * q.scales[i / cols])
}

/// A model whose six linear families are held as [`QuantTensor`]s.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// Everything that stays float (embeddings, biases, norms, classifier);
    /// its linear weights hold the dequantized values.
    pub float: Model<f32>,
    /// `(layer, family, weights)` in layer-major, family order.
    pub weights: Vec<(usize, Family, QuantTensor)>,
}

impl QuantizedModel {
    /// Float model used for evaluation (dequantize-on-use).
    pub fn model(&self) -> &Model<f32> {
        &self.float
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    /// Linear-weight bytes of the original dense float32 architecture.
    pub dense_bytes: usize,
    /// Linear-weight bytes of the float32 source model as stored.
    pub float_bytes: usize,
    /// Int8 values plus float32 row scales.
    pub quant_bytes: usize,
    /// Dense linear parameters over nonzero linear parameters of the source.
    pub pruning_compression: f64,
    /// `pruning_compression × 4` (float32 → int8 weights).
    pub combined_compression: f64,
    /// `dense_bytes / quant_bytes`, scale overhead and stored zeros included.
    pub effective_compression: f64,
}

/// Quantizes every prunable weight (masks folded in) of `model`.
pub fn quantize_model(model: &Model<f32>) -> Result<(QuantizedModel, SizeReport)> {
    let census = model.linear_param_census();
    let mut float = model.clone();
    crate::pruning::bake_masks(&mut float);
    let mut weights = Vec::new();
    let mut quant_bytes = 0;
    for l in 0..float.layers.len() {
        for f in Family::ALL {
            let lin = float.layers[l].linear_mut(f);
            let q = quantize_tensor(&lin.weight)?;
            lin.weight = dequantize(&q);
            quant_bytes += q.bytes();
            weights.push((l, f, q));
        }
    }
    let dense_params = model.config.dense_linear_params();
    let pruning_compression = dense_params as f64 / census.nonzero.max(1) as f64;
    let report = SizeReport {
        dense_bytes: 4 * dense_params,
        float_bytes: 4 * census.total,
        quant_bytes,
        pruning_compression,
        combined_compression: pruning_compression * 4.0,
        effective_compression: (4 * dense_params) as f64 / quant_bytes as f64,
    };
    Ok((QuantizedModel { float, weights }, report))
}
