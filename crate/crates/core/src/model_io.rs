//! Single-file model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RELNN" 0x01                 magic + format version
//! u32 manifest_len, manifest    UTF-8 JSON: mode, configs, tensor table
//! u32 term_count                vocab, in id order
//!   (u32 byte_len, UTF-8 term)*
//! f32 payload                   tensors in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::finetune::{ModelBundle, ScoringMode};
use crate::grad::Tensor;
use crate::text::Vocab;
use crate::tower::{Dense, Mlp, TowerConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RELNN";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u8,
    pub mode: ScoringMode,
    pub vocab_size: usize,
    pub tower_config: TowerConfig,
    pub click_layers: Vec<usize>,
    pub finetuned_layers: Option<Vec<usize>>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

fn named_tensors(bundle: &ModelBundle) -> Vec<(String, &Tensor<f32>)> {
    let mut out = vec![("embedding".to_owned(), bundle.embedding())];
    let towers = std::iter::once(("click", bundle.click_mlp())).chain(bundle.finetuned_mlp().map(|m| ("finetuned", m)));
    for (prefix, mlp) in towers {
        for (i, layer) in mlp.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &layer.weight));
            out.push((format!("{prefix}.{i}.bias"), &layer.bias));
        }
    }
    out
}

pub fn manifest(bundle: &ModelBundle) -> Manifest {
    let mut offset = 0;
    let tensors = named_tensors(bundle)
        .into_iter()
        .map(|(name, t)| {
            let entry = TensorEntry { name, shape: t.shape().to_vec(), offset };
            offset += 4 * t.numel();
            entry
        })
        .collect();
    Manifest {
        format_version: FORMAT_VERSION,
        mode: bundle.mode(),
        vocab_size: bundle.vocab().len(),
        tower_config: bundle.tower_config().clone(),
        click_layers: bundle.click_mlp().widths(),
        finetuned_layers: bundle.finetuned_mlp().map(Mlp::widths),
        tensors,
        payload_bytes: offset,
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} exceeds 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let named = named_tensors(bundle);
    if named.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite("save_model"));
    }
    let manifest = manifest(bundle);
    let json = serde_json::to_vec(&manifest).map_err(|source| Error::Json { line: 0, source })?;

    let mut out = Vec::with_capacity(16 + json.len() + manifest.payload_bytes);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    push_u32(&mut out, json.len(), "manifest")?;
    out.extend_from_slice(&json);
    push_u32(&mut out, bundle.vocab().len(), "vocab size")?;
    for term in bundle.vocab().terms() {
        push_u32(&mut out, term.len(), "term length")?;
        out.extend_from_slice(term.as_bytes());
    }
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(bundle)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::corrupt(section, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<usize> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn read_mlp(
    prefix: &str,
    widths: &[usize],
    input_width: usize,
    tensors: &mut impl Iterator<Item = (TensorEntry, Tensor<f32>)>,
) -> Result<Mlp<f32>> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut fan_in = input_width;
    for (i, &w) in widths.iter().enumerate() {
        let mut next = |suffix: &str, shape: Vec<usize>| -> Result<Tensor<f32>> {
            let name = format!("{prefix}.{i}.{suffix}");
            match tensors.next() {
                Some((entry, t)) if entry.name == name && entry.shape == shape => Ok(t),
                Some((entry, _)) => Err(Error::corrupt(
                    "tensors",
                    format!("expected {name} {shape:?}, found {} {:?}", entry.name, entry.shape),
                )),
                None => Err(Error::corrupt("tensors", format!("missing {name}"))),
            }
        };
        let weight = next("weight", vec![fan_in, w])?;
        let bias = next("bias", vec![w])?;
        layers.push(Dense { weight, bias });
        fan_in = w;
    }
    Ok(Mlp { layers })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::corrupt("magic", "not a model file"));
    }
    let version = r.take(1, "version")?[0];
    if version != FORMAT_VERSION {
        return Err(Error::corrupt("version", format!("unsupported format version {version}")));
    }
    let len = r.u32("manifest")?;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| Error::corrupt("manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::corrupt("manifest", "format version disagrees with header"));
    }

    let count = r.u32("vocab")?;
    if count != manifest.vocab_size {
        return Err(Error::corrupt("vocab", format!("{count} terms, manifest says {}", manifest.vocab_size)));
    }
    let mut terms = Vec::with_capacity(count.min(bytes.len()));
    for _ in 0..count {
        let n = r.u32("vocab")?;
        let raw = r.take(n, "vocab")?;
        terms.push(String::from_utf8(raw.to_vec()).map_err(|e| Error::corrupt("vocab", e.to_string()))?);
    }
    let vocab = Vocab::from_terms(terms).map_err(|e| Error::corrupt("vocab", e.to_string()))?;

    let payload = &bytes[r.pos..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::corrupt(
            "payload",
            format!("{} payload bytes, manifest says {}", payload.len(), manifest.payload_bytes),
        ));
    }
    let mut expected = 0usize;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel = entry.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let size = numel.and_then(|n| n.checked_mul(4));
        let (Some(numel), Some(size)) = (numel, size) else {
            return Err(Error::corrupt("offsets", format!("{} has an oversized shape", entry.name)));
        };
        if entry.offset != expected || size > payload.len() - expected {
            return Err(Error::corrupt("offsets", format!("{} at offset {} overlaps or overruns", entry.name, entry.offset)));
        }
        let data: Vec<f32> = payload[expected..expected + size]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        debug_assert_eq!(data.len(), numel);
        tensors.push((entry.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected += size;
    }
    if expected != payload.len() {
        return Err(Error::corrupt("offsets", "tensors do not cover the payload"));
    }

    let mut it = tensors.into_iter();
    let embedding = match it.next() {
        Some((entry, t)) if entry.name == "embedding" && t.shape().len() == 2 => t,
        _ => return Err(Error::corrupt("tensors", "first tensor must be the 2-D embedding table")),
    };
    let width = 2 * embedding.cols();
    let click = read_mlp("click", &manifest.click_layers, width, &mut it)?;
    let finetuned = match &manifest.finetuned_layers {
        Some(widths) => Some(read_mlp("finetuned", widths, width, &mut it)?),
        None => None,
    };
    if let Some((entry, _)) = it.next() {
        return Err(Error::corrupt("tensors", format!("unexpected tensor {}", entry.name)));
    }
    ModelBundle::new(vocab, embedding, click, finetuned, manifest.mode, manifest.tower_config)
        .map_err(|e| Error::corrupt("manifest", e.to_string()))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}
