//! Byte-level classification datasets: synthetic desk tasks and TSV files.
//!
//! Sequences are fixed length. Token ids are bytes, with three reserved
//! control bytes: [`PAD`], [`CLS`] (always position 0, pooled by the
//! classifier) and [`SEP`] (between the two segments of a pair task).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, RngState};

pub const PAD: u8 = 0;
pub const CLS: u8 = 1;
pub const SEP: u8 = 2;
/// Replacement for reserved bytes found in raw text.
const SUBSTITUTE: u8 = 0x1A;
const NEEDLE: u8 = b'#';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Label 1 iff the needle byte occurs anywhere.
    Needle,
    /// Two segments; label 1 iff they differ in at most `max_edits` positions.
    PairDup,
    /// Label 1 iff uppercase letters outnumber lowercase ones.
    Majority,
    /// `label<TAB>text[<TAB>text2]` lines.
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    pub seq_len: usize,
    /// Number of distinct letters used by the synthetic generators.
    pub alphabet: usize,
    /// Probability that a generator plants a positive example.
    pub positive_rate: f64,
    /// Pair task: substitutions still counted as a near-duplicate.
    pub max_edits: usize,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::PairDup,
            train_size: 4000,
            dev_size: 1000,
            seed: 0,
            seq_len: 18,
            alphabet: 8,
            positive_rate: 0.5,
            max_edits: 1,
            train_path: None,
            dev_path: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("task: {m}")));
        if self.seq_len < 4 {
            return fail("seq_len must be at least 4");
        }
        if self.kind == TaskKind::Tsv {
            if self.train_path.is_none() || self.dev_path.is_none() {
                return fail("tsv tasks need train_path and dev_path");
            }
            return Ok(());
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return fail("split sizes must be positive");
        }
        if !(1..=26).contains(&self.alphabet) || (self.kind == TaskKind::PairDup && self.alphabet < 2) {
            return fail("alphabet must be in 1..=26 (2.. for pairdup)");
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return fail("positive_rate must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u8>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub label_names: Vec<String>,
    pub examples: Vec<Example>,
}

/// A batch flattened to `[batch * seq]` token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// `false` on padding positions (masked out as attention keys).
    pub valid: Vec<bool>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }

    /// Keeps only the listed examples, in order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let mut out = Batch {
            ids: Vec::with_capacity(rows.len() * self.seq),
            valid: Vec::with_capacity(rows.len() * self.seq),
            labels: Vec::with_capacity(rows.len()),
            batch: rows.len(),
            seq: self.seq,
        };
        for &r in rows {
            let span = r * self.seq..(r + 1) * self.seq;
            out.ids.extend_from_slice(&self.ids[span.clone()]);
            out.valid.extend_from_slice(&self.valid[span]);
            out.labels.push(self.labels[r]);
        }
        out
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let seq = self.seq_len;
        let mut ids = Vec::with_capacity(indices.len() * seq);
        let mut valid = Vec::with_capacity(indices.len() * seq);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = &self.examples[i];
            ids.extend(ex.tokens.iter().map(|&t| t as usize));
            valid.extend(ex.tokens.iter().map(|&t| t != PAD));
            labels.push(ex.label);
        }
        Batch {
            ids,
            valid,
            labels,
            batch: indices.len(),
            seq,
        }
    }

    /// Consecutive batches covering the dataset in order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Fraction of examples with label 1.
    pub fn positive_fraction(&self) -> f64 {
        let pos = self.examples.iter().filter(|e| e.label == 1).count();
        pos as f64 / self.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub dev: Dataset,
}

fn letter(rng: &mut RngState, alphabet: usize) -> u8 {
    b'a' + rng.below(alphabet) as u8
}

fn padded(mut tokens: Vec<u8>, len: usize) -> Vec<u8> {
    tokens.truncate(len);
    tokens.resize(len, PAD);
    tokens
}

fn gen_example(spec: &TaskSpec, index: u64) -> Example {
    let mut rng = RngState::new(spec.seed, stream::DATA_BASE + index);
    let len = spec.seq_len;
    match spec.kind {
        TaskKind::Needle => {
            let mut tokens = vec![CLS];
            tokens.extend((1..len).map(|_| letter(&mut rng, spec.alphabet)));
            if rng.bernoulli(spec.positive_rate) {
                let pos = 1 + rng.below(len - 1);
                tokens[pos] = NEEDLE;
            }
            let label = tokens.contains(&NEEDLE) as usize;
            Example { tokens, label }
        }
        TaskKind::PairDup => {
            let seg = (len - 2) / 2;
            let first: Vec<u8> = (0..seg).map(|_| letter(&mut rng, spec.alphabet)).collect();
            let second: Vec<u8> = if rng.bernoulli(spec.positive_rate) {
                let mut s = first.clone();
                let edits = rng.below(spec.max_edits + 1);
                for _ in 0..edits {
                    let pos = rng.below(seg);
                    let shift = 1 + rng.below(spec.alphabet - 1) as u8;
                    s[pos] = b'a' + (s[pos] - b'a' + shift) % spec.alphabet as u8;
                }
                s
            } else {
                (0..seg).map(|_| letter(&mut rng, spec.alphabet)).collect()
            };
            let label = pairdup_label(&first, &second, spec.max_edits);
            let mut tokens = vec![CLS];
            tokens.extend_from_slice(&first);
            tokens.push(SEP);
            tokens.extend_from_slice(&second);
            Example {
                tokens: padded(tokens, len),
                label,
            }
        }
        TaskKind::Majority => {
            // odd number of content tokens so there are no ties
            let n = if (len - 1) % 2 == 1 { len - 1 } else { len - 2 };
            let mut tokens = vec![CLS];
            let mut upper = 0;
            for _ in 0..n {
                let l = letter(&mut rng, spec.alphabet);
                if rng.bernoulli(0.5) {
                    upper += 1;
                    tokens.push(l.to_ascii_uppercase());
                } else {
                    tokens.push(l);
                }
            }
            Example {
                tokens: padded(tokens, len),
                label: (2 * upper > n) as usize,
            }
        }
        TaskKind::Tsv => unreachable!("tsv examples are read from disk"),
    }
}

/// Label rule of the pair task, exposed for audits.
pub fn pairdup_label(first: &[u8], second: &[u8], max_edits: usize) -> usize {
    let diff = first.iter().zip(second).filter(|(a, b)| a != b).count();
    (diff <= max_edits) as usize
}

/// Generates (or, for `tsv`, loads) the train and dev splits.
///
/// Synthetic example `i` is drawn from its own stream, so train uses
/// indices `0..train_size` and dev `train_size..train_size + dev_size`.
pub fn gen_synth(spec: &TaskSpec) -> Result<DataSplit> {
    spec.validate()?;
    if spec.kind == TaskKind::Tsv {
        let train = ingest_tsv(spec.train_path.as_ref().unwrap(), spec.seq_len, None)?;
        let dev = ingest_tsv(
            spec.dev_path.as_ref().unwrap(),
            spec.seq_len,
            Some(&train.label_names),
        )?;
        return Ok(DataSplit { train, dev });
    }
    let make = |range: std::ops::Range<usize>| Dataset {
        seq_len: spec.seq_len,
        label_names: vec!["0".into(), "1".into()],
        examples: range.map(|i| gen_example(spec, i as u64)).collect(),
    };
    Ok(DataSplit {
        train: make(0..spec.train_size),
        dev: make(spec.train_size..spec.train_size + spec.dev_size),
    })
}

fn byte_tokens(text: &str) -> impl Iterator<Item = u8> + '_ {
    text.bytes()
        .map(|b| if b <= SEP { SUBSTITUTE } else { b })
}

/// `[CLS] text [SEP text2]`, truncated and padded to `max_len`.
pub fn encode_text(text: &str, second: Option<&str>, max_len: usize) -> Vec<u8> {
    let mut tokens = vec![CLS];
    tokens.extend(byte_tokens(text));
    if let Some(s) = second {
        tokens.push(SEP);
        tokens.extend(byte_tokens(s));
    }
    padded(tokens, max_len)
}

/// Inverse of [`encode_text`] up to truncation: drops CLS/PAD, SEP becomes a tab.
pub fn decode_tokens(tokens: &[u8]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t != CLS && t != PAD)
        .map(|&t| if t == SEP { b'\t' } else { t })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Reads `label<TAB>text[<TAB>text2]` lines.
///
/// With `labels = None` the label vocabulary is built from the file in
/// order of first appearance; otherwise labels must come from `labels`.
pub fn ingest_tsv(path: impl AsRef<Path>, max_len: usize, labels: Option<&[String]>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = labels.map(<[String]>::to_vec).unwrap_or_default();
    let mut index: HashMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let label = parts.next().unwrap_or_default().trim();
        let Some(body) = parts.next() else {
            return Err(Error::Dataset(format!(
                "{}:{}: expected `label<TAB>text`",
                path.display(),
                lineno + 1
            )));
        };
        if label.is_empty() {
            return Err(Error::Dataset(format!("{}:{}: empty label", path.display(), lineno + 1)));
        }
        let class = match index.get(label) {
            Some(&c) => c,
            None if labels.is_some() => {
                return Err(Error::Dataset(format!(
                    "{}:{}: unknown label `{label}`",
                    path.display(),
                    lineno + 1
                )))
            }
            None => {
                names.push(label.to_string());
                index.insert(label.to_string(), names.len() - 1);
                names.len() - 1
            }
        };
        examples.push(Example {
            tokens: encode_text(body, parts.next(), max_len),
            label: class,
        });
    }
    if examples.is_empty() {
        return Err(Error::Dataset(format!("{}: no examples", path.display())));
    }
    Ok(Dataset {
        seq_len: max_len,
        label_names: names,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            train_size: 200,
            dev_size: 50,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn needle_absent_means_all_negative() {
        let s = TaskSpec {
            positive_rate: 0.0,
            ..spec(TaskKind::Needle)
        };
        let d = gen_synth(&s).unwrap();
        assert!(d.train.examples.iter().all(|e| e.label == 0));
        assert!(d.train.examples.iter().all(|e| !e.tokens.contains(&NEEDLE)));
    }

    #[test]
    fn pairdup_identical_segments_are_positive() {
        assert_eq!(pairdup_label(b"abcab", b"abcab", 0), 1);
        assert_eq!(pairdup_label(b"abcab", b"abcab", 1), 1);
        assert_eq!(pairdup_label(b"abcab", b"abdac", 1), 0);
        let d = gen_synth(&spec(TaskKind::PairDup)).unwrap();
        for e in &d.train.examples {
            let seg = (e.tokens.len() - 2) / 2;
            let (a, b) = (&e.tokens[1..1 + seg], &e.tokens[2 + seg..2 + 2 * seg]);
            assert_eq!(e.tokens[1 + seg], SEP);
            assert_eq!(e.label, pairdup_label(a, b, 1));
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let s = spec(TaskKind::Majority);
        let a = gen_synth(&s).unwrap();
        let b = gen_synth(&s).unwrap();
        assert_eq!(a, b);
        // the dev split is the continuation of the train index range
        let longer = gen_synth(&TaskSpec {
            train_size: 250,
            ..s.clone()
        })
        .unwrap();
        assert_eq!(&longer.train.examples[200..], &a.dev.examples[..]);
    }

    #[test]
    fn label_balance_of_default_generators() {
        for kind in [TaskKind::Needle, TaskKind::PairDup, TaskKind::Majority] {
            let s = TaskSpec {
                kind,
                train_size: 10_000,
                dev_size: 1,
                ..TaskSpec::default()
            };
            let frac = gen_synth(&s).unwrap().train.positive_fraction();
            assert!((0.45..=0.55).contains(&frac), "{kind:?}: {frac}");
        }
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tsv_empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(matches!(ingest_tsv(f.path(), 16, None), Err(Error::Dataset(_))));
    }

    #[test]
    fn tsv_roundtrip_prefix_and_label_vocab() {
        let f = write_tmp("pos\tthe movie was great fun\nneg\tdull\npos\tgood\n");
        let d = ingest_tsv(f.path(), 12, None).unwrap();
        assert_eq!(d.label_names, vec!["pos", "neg"]);
        assert_eq!(d.examples.iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1, 0]);
        let decoded = decode_tokens(&d.examples[0].tokens);
        assert!("the movie was great fun".starts_with(&decoded));
        assert_eq!(decoded.len(), 11);
        assert_eq!(decode_tokens(&d.examples[1].tokens), "dull");
    }

    #[test]
    fn tsv_malformed_line_reports_line_number() {
        let f = write_tmp("a\tok\nno tab here\n");
        let err = ingest_tsv(f.path(), 16, None).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn tsv_unknown_label_with_fixed_vocab() {
        let f = write_tmp("x\tfoo\n");
        let known = vec!["a".to_string()];
        assert!(ingest_tsv(f.path(), 16, Some(&known)).is_err());
    }

    #[test]
    fn batch_padding_flags() {
        let d = Dataset {
            seq_len: 4,
            label_names: vec!["0".into(), "1".into()],
            examples: vec![Example {
                tokens: vec![CLS, b'a', PAD, PAD],
                label: 1,
            }],
        };
        let b = d.batch(&[0]);
        assert_eq!(b.valid, vec![true, true, false, false]);
        assert!(b.has_padding());
    }
}
