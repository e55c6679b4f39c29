//! Directory checkpoints: `config.json` plus a binary `tensors.bin`.
//!
//! `tensors.bin` layout (little-endian): magic `BMP1`, u32 format version,
//! u32 tensor count, then per tensor a u16 name length, the UTF-8 name, u8
//! ndim, ndim × u64 dims, u8 dtype (0 = float32, 1 = int8) and a u64 payload
//! offset measured from the start of the file. Payloads are row-major and
//! start on 64-byte boundaries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, Model, ModelConfig};
use crate::pruning::{BlockKind, MaskBinding, RegFamily, ScoreTensor};
use crate::quantizer::{dequantize, QuantTensor, QuantizedModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BMP1";
pub const FORMAT_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload<'a> {
    F32(&'a [f32]),
    I8(&'a [i8]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OwnedPayload {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: OwnedPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub n_heads: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub label: String,
    pub family: RegFamily,
    pub kind: BlockKind,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingMeta {
    pub layer: usize,
    pub family: Family,
    pub score: usize,
    pub block: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub layers: Vec<LayerMeta>,
    pub threshold: f64,
    pub scores: Vec<ScoreMeta>,
    pub bindings: Vec<BindingMeta>,
    pub quantized: bool,
    /// Free-form description of the run that produced the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

fn write_tensors(path: &Path, tensors: &[(String, Vec<u64>, Payload<'_>)]) -> Result<()> {
    let mut header: Vec<u8> = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let header_len: usize = 12
        + tensors
            .iter()
            .map(|(n, d, _)| 2 + n.len() + 1 + 8 * d.len() + 1 + 8)
            .sum::<usize>();
    let mut offset = header_len.next_multiple_of(ALIGN);
    let mut offsets = Vec::with_capacity(tensors.len());
    for (name, dims, payload) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::ckpt(path, format!("tensor name too long: {name}")))?;
        header.extend_from_slice(&name_len.to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(dims.len() as u8);
        for d in dims {
            header.extend_from_slice(&d.to_le_bytes());
        }
        let (code, bytes) = match payload {
            Payload::F32(v) => (0u8, 4 * v.len()),
            Payload::I8(v) => (1u8, v.len()),
        };
        header.push(code);
        header.extend_from_slice(&(offset as u64).to_le_bytes());
        offsets.push(offset);
        offset = (offset + bytes).next_multiple_of(ALIGN);
    }
    debug_assert_eq!(header.len(), header_len);
    let mut buf = header;
    for ((_, _, payload), &off) in tensors.iter().zip(&offsets) {
        buf.resize(off, 0);
        match payload {
            Payload::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
        }
    }
    write_atomic(path, &buf)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::ckpt(self.path, "truncated header"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a `tensors.bin` file.
pub fn read_tensors(path: &Path) -> Result<Vec<RawTensor>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::ckpt(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ckpt(path, format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::ckpt(path, "tensor name is not UTF-8"))?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let dtype = r.u8()?;
        let offset = r.u64()? as usize;
        let len = dims.iter().product::<u64>() as usize;
        if !offset.is_multiple_of(ALIGN) {
            return Err(Error::ckpt(path, format!("{name}: payload not {ALIGN}-byte aligned")));
        }
        let width = match dtype {
            0 => 4,
            1 => 1,
            other => return Err(Error::ckpt(path, format!("{name}: unknown dtype code {other}"))),
        };
        let bytes = buf
            .get(offset..offset + len * width)
            .ok_or_else(|| Error::ckpt(path, format!("{name}: payload out of bounds")))?;
        let data = if dtype == 0 {
            OwnedPayload::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            OwnedPayload::I8(bytes.iter().map(|&b| b as i8).collect())
        };
        out.push(RawTensor { name, dims, data });
    }
    Ok(out)
}

fn dims_of(t: &Tensor<f32>) -> Vec<u64> {
    t.shape().iter().map(|&d| d as u64).collect()
}

fn meta_for(model: &Model<f32>, quantized: bool, run: serde_json::Value, metrics: BTreeMap<String, f64>) -> CheckpointMeta {
    let mut bindings = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for f in Family::ALL {
            if let Some(b) = layer.linear(f).binding {
                bindings.push(BindingMeta {
                    layer: l,
                    family: f,
                    score: b.score,
                    block: b.block,
                });
            }
        }
    }
    CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        model: model.config.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerMeta {
                n_heads: l.n_heads,
                d_ff: l.d_ff(),
            })
            .collect(),
        threshold: model.threshold,
        scores: model
            .scores
            .iter()
            .map(|s| ScoreMeta {
                label: s.label.clone(),
                family: s.family,
                kind: s.kind,
                layer: s.layer,
            })
            .collect(),
        bindings,
        quantized,
        run,
        metrics,
    }
}

fn linear_name(l: usize, f: Family) -> String {
    format!("layers.{l}.{}.weight", f.name())
}

/// Saves a float model (with scores and masks when it has any).
pub fn save(dir: &Path, model: &Model<f32>, run: serde_json::Value, metrics: BTreeMap<String, f64>) -> Result<()> {
    save_impl(dir, model, None, run, metrics)
}

/// Saves a quantized model: int8 linear weights plus `<name>.scales`.
pub fn save_quantized(dir: &Path, q: &QuantizedModel, run: serde_json::Value, metrics: BTreeMap<String, f64>) -> Result<()> {
    save_impl(dir, &q.float, Some(q), run, metrics)
}

fn save_impl(
    dir: &Path,
    model: &Model<f32>,
    quant: Option<&QuantizedModel>,
    run: serde_json::Value,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let masks: Vec<(String, Tensor<f32>)> = (0..model.layers.len())
        .flat_map(|l| Family::ALL.into_iter().map(move |f| (l, f)))
        .filter_map(|(l, f)| model.mask(l, f).map(|m| (format!("masks.layers.{l}.{}", f.name()), m)))
        .collect();
    let quant_map: BTreeMap<String, &QuantTensor> = quant
        .map(|q| q.weights.iter().map(|(l, f, t)| (linear_name(*l, *f), t)).collect())
        .unwrap_or_default();
    let scale_names: Vec<String> = quant_map.keys().map(|n| format!("{n}.scales")).collect();
    let mut tensors: Vec<(String, Vec<u64>, Payload<'_>)> = Vec::new();
    for (name, t) in model.named_params() {
        match quant_map.get(&name) {
            Some(q) => tensors.push((name, q.shape.iter().map(|&d| d as u64).collect(), Payload::I8(&q.values))),
            None => tensors.push((name, dims_of(t), Payload::F32(t.data()))),
        }
    }
    for ((_, q), sname) in quant_map.iter().zip(&scale_names) {
        tensors.push((sname.clone(), vec![q.scales.len() as u64], Payload::F32(&q.scales)));
    }
    for (i, s) in model.scores.iter().enumerate() {
        tensors.push((format!("scores.{i}"), dims_of(&s.values), Payload::F32(s.values.data())));
    }
    for (name, m) in &masks {
        tensors.push((name.clone(), dims_of(m), Payload::F32(m.data())));
    }
    write_tensors(&dir.join(TENSORS_FILE), &tensors)?;
    let meta = meta_for(model, quant.is_some(), run, metrics);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::ckpt(dir, e.to_string()))?;
    write_atomic(&dir.join(CONFIG_FILE), &json)
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub meta: CheckpointMeta,
    /// Float model; quantized weights come back dequantized.
    pub model: Model<f32>,
    pub quant: Option<QuantizedModel>,
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::ckpt(&path, e.to_string()))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::ckpt(&path, format!("unsupported schema version {}", meta.schema_version)));
    }
    Ok(meta)
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let meta = read_meta(dir)?;
    let bin: PathBuf = dir.join(TENSORS_FILE);
    let raw = read_tensors(&bin)?;
    let mut by_name: BTreeMap<String, RawTensor> = raw.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut model = Model::<f32>::new(meta.model.clone(), 0)?;
    if meta.layers.len() != model.layers.len() {
        return Err(Error::ckpt(dir, "layer count does not match the model config"));
    }
    // reshape the skeleton to the stored per-layer geometry before filling it
    let hd = model.head_dim();
    let d = model.config.d_model;
    for (layer, lm) in model.layers.iter_mut().zip(&meta.layers) {
        let w = lm.n_heads * hd;
        layer.n_heads = lm.n_heads;
        layer.q.weight = Tensor::zeros(&[w, d]);
        layer.k.weight = Tensor::zeros(&[w, d]);
        layer.v.weight = Tensor::zeros(&[w, d]);
        layer.q.bias = Tensor::zeros(&[w]);
        layer.k.bias = Tensor::zeros(&[w]);
        layer.v.bias = Tensor::zeros(&[w]);
        layer.o.weight = Tensor::zeros(&[d, w]);
        layer.ffn1.weight = Tensor::zeros(&[lm.d_ff, d]);
        layer.ffn1.bias = Tensor::zeros(&[lm.d_ff]);
        layer.ffn2.weight = Tensor::zeros(&[d, lm.d_ff]);
    }
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut quant_weights = Vec::new();
    let linear: BTreeMap<String, (usize, Family)> = (0..model.layers.len())
        .flat_map(|l| Family::ALL.into_iter().map(move |f| (linear_name(l, f), (l, f))))
        .collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let raw = by_name.remove(name).ok_or_else(|| Error::ckpt(&bin, format!("missing tensor {name}")))?;
        let shape: Vec<usize> = raw.dims.iter().map(|&d| d as usize).collect();
        if shape != slot.shape() {
            return Err(Error::ckpt(&bin, format!("{name}: shape {shape:?}, expected {:?}", slot.shape())));
        }
        *slot = match raw.data {
            OwnedPayload::F32(v) => Tensor::new(shape, v)?,
            OwnedPayload::I8(values) => {
                let sname = format!("{name}.scales");
                let scales = match by_name.remove(&sname).map(|t| t.data) {
                    Some(OwnedPayload::F32(s)) if s.len() == shape[0] => s,
                    _ => return Err(Error::ckpt(&bin, format!("missing or malformed {sname}"))),
                };
                let q = QuantTensor {
                    values,
                    scales,
                    shape: [shape[0], shape[1]],
                };
                let t = dequantize(&q);
                let &(l, f) = linear
                    .get(name)
                    .ok_or_else(|| Error::ckpt(&bin, format!("{name}: int8 payload on a non-linear tensor")))?;
                quant_weights.push((l, f, q));
                t
            }
        };
    }
    model.threshold = meta.threshold;
    for (i, sm) in meta.scores.iter().enumerate() {
        let name = format!("scores.{i}");
        let raw = by_name.remove(&name).ok_or_else(|| Error::ckpt(&bin, format!("missing tensor {name}")))?;
        let OwnedPayload::F32(v) = raw.data else {
            return Err(Error::ckpt(&bin, format!("{name} must be float32")));
        };
        model.scores.push(ScoreTensor {
            values: Tensor::new(raw.dims.iter().map(|&d| d as usize).collect(), v)?,
            family: sm.family,
            kind: sm.kind,
            layer: sm.layer,
            label: sm.label.clone(),
        });
    }
    for b in &meta.bindings {
        if b.layer >= model.layers.len() || b.score >= model.scores.len() {
            return Err(Error::ckpt(dir, "binding refers to a missing layer or score"));
        }
        let w = model.layers[b.layer].linear(b.family).weight.shape();
        crate::pruning::expand_mask(&model.scores[b.score].values, model.threshold, (w[0], w[1]), b.block)
            .map_err(|e| Error::ckpt(dir, format!("binding geometry: {e}")))?;
        model.layers[b.layer].linear_mut(b.family).binding = Some(MaskBinding {
            score: b.score,
            block: b.block,
        });
    }
    // stored masks must agree with the ones the scores produce
    for l in 0..model.layers.len() {
        for f in Family::ALL {
            let name = format!("masks.layers.{l}.{}", f.name());
            let stored = by_name.remove(&name);
            match (model.mask(l, f), stored) {
                (Some(m), Some(RawTensor { data: OwnedPayload::F32(v), .. })) if m.data() == v.as_slice() => {}
                (None, None) => {}
                _ => return Err(Error::ckpt(&bin, format!("{name} inconsistent with scores"))),
            }
        }
    }
    let quant = meta.quantized.then(|| QuantizedModel {
        float: model.clone(),
        weights: quant_weights,
    });
    Ok(Loaded { meta, model, quant })
}
