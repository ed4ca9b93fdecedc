//! Versioned on-disk snapshots: backbone checkpoints and tuned prompt files.
//!
//! Both artifacts share one container: a magic tag, a format version, a
//! self-describing JSON header (dimensions, tensor names, shapes), and a raw
//! little-endian f64 payload. Raw bytes make round-trips bit-exact; the
//! header makes files inspectable without this library and lets the loader
//! reject structural mismatches with a named-field diagnostic instead of a
//! garbage read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ebm::{init_ebm, EbmParams, ModelDims};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::prompt::{init_prompt, PromptDims};
use crate::tensor::Tensor;
use crate::tune::PromptSource;

/// Tag opening every backbone checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCX";
/// Tag opening every tuned-prompt file.
pub const PROMPTS_MAGIC: &[u8; 4] = b"DPPX";
/// Current format version for both containers.
pub const FORMAT_VERSION: u32 = 1;

/// Complete training state at a snapshot point. The master seed plus the
/// epoch counter recover every derived RNG stream, so together they are the
/// full RNG state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub params: EbmParams<Tensor>,
    pub optimizer: Adam,
    pub epoch: usize,
    pub seed: u64,
    /// Hash of the run configuration this snapshot was trained under.
    pub fingerprint: String,
}

impl Checkpoint {
    /// Verify this snapshot can serve a run with the given dimensions and
    /// configuration fingerprint, naming every mismatched field otherwise.
    pub fn check_compatible(&self, dims: &ModelDims, fingerprint: &str) -> Result<()> {
        let mut bad = dim_mismatches(&self.dims, dims);
        if self.fingerprint != fingerprint {
            bad.push(format!(
                "config fingerprint ({} vs {})",
                short_hash(&self.fingerprint),
                short_hash(fingerprint)
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "checkpoint does not match the current configuration: {}",
                bad.join(", ")
            )))
        }
    }
}

fn short_hash(h: &str) -> &str {
    if h.len() > 12 { &h[..12] } else { h }
}

fn dim_mismatches(have: &ModelDims, want: &ModelDims) -> Vec<String> {
    macro_rules! diff {
        ($out:ident, $($field:ident),+) => {
            $(if have.$field != want.$field {
                $out.push(format!(
                    concat!(stringify!($field), " ({:?} vs {:?})"),
                    have.$field, want.$field
                ));
            })+
        };
    }
    let mut out = Vec::new();
    diff!(
        out, d, n_layers, k_chunks, l_seq, l_max, n_items, n_behaviors, full_spectrum,
        no_denoise, mean_pool, ln_eps
    );
    out
}

/// A tuned prompt artifact. It is useless without the backbone it was tuned
/// against, so it records that backbone's parameter hash for verification.
#[derive(Clone, Debug)]
pub struct PromptArtifact {
    pub pdims: PromptDims,
    pub source: PromptSource,
    /// `tune::backbone_hash` of the frozen backbone this was trained with.
    pub backbone_hash: String,
}

impl PromptArtifact {
    /// Verify the artifact was tuned against exactly this backbone.
    pub fn check_backbone(&self, hash: &str) -> Result<()> {
        if self.backbone_hash == hash {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "prompt file was tuned against backbone {} but the loaded checkpoint hashes to {}",
                short_hash(&self.backbone_hash),
                short_hash(hash)
            )))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: ModelDims,
    epoch: usize,
    seed: u64,
    fingerprint: String,
    adam: AdamConfig,
    adam_t: u64,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct PromptsHeader {
    pdims: PromptDims,
    backbone_hash: String,
    /// "generated" for a full generator, "static" for bare token matrices.
    variant: String,
    /// For the static variant: total layer-slot count (some slots are absent).
    n_layers: usize,
    tensors: Vec<TensorMeta>,
}

fn meta_of(named: &[(String, &Tensor)]) -> Vec<TensorMeta> {
    named
        .iter()
        .map(|(name, t)| {
            let (rows, cols) = t.shape();
            TensorMeta { name: name.clone(), rows, cols }
        })
        .collect()
}

/// Assemble a container file: magic, version, header length, header JSON,
/// then every tensor's f64s little-endian in header order.
fn encode_container(magic: &[u8; 4], header_json: Vec<u8>, tensors: &[&Tensor]) -> Vec<u8> {
    let payload_len: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header_json.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in tensors {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Cursor over a container's bytes with structural errors on underrun.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, have {}",
                self.at,
                self.bytes.len().saturating_sub(self.at)
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn fill_tensor(&mut self, t: &mut Tensor, meta: &TensorMeta) -> Result<()> {
        if t.shape() != (meta.rows, meta.cols) {
            return Err(Error::Checkpoint(format!(
                "header shape for {} is {}x{} but the model slot is {}x{}",
                meta.name,
                meta.rows,
                meta.cols,
                t.shape().0,
                t.shape().1
            )));
        }
        let raw = self.take(t.len() * 8, &meta.name)?;
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            t.data_mut()[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "{} trailing bytes after the declared payload",
                self.bytes.len() - self.at
            )))
        }
    }
}

/// Open a container: verify magic and version, parse the JSON header, and
/// hand back the header value plus a cursor positioned at the payload.
fn open_container<'a, H: for<'de> Deserialize<'de>>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    kind: &str,
) -> Result<(H, Reader<'a>)> {
    let mut r = Reader { bytes, at: 0 };
    let got_magic = r.take(4, "magic tag")?;
    if got_magic != magic {
        return Err(Error::Checkpoint(format!(
            "not a {kind} file: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(got_magic)
        )));
    }
    let version = u32::from_le_bytes(r.take(4, "format version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported {kind} format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let hbytes = r.take(hlen as usize, "header")?;
    let header = serde_json::from_slice
        ::<H>(hbytes)
        .map_err(|e| Error::Checkpoint(format!("corrupt {kind} header: {e}")))?;
    Ok((header, r))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let named = ckpt.params.named();
    let n_slots = named.len();
    if ckpt.optimizer.m.len() != n_slots || ckpt.optimizer.v.len() != n_slots {
        return Err(Error::Invalid(format!(
            "optimizer has {} moment slots for {} parameter tensors",
            ckpt.optimizer.m.len(),
            n_slots
        )));
    }
    let header = CheckpointHeader {
        dims: ckpt.dims.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        fingerprint: ckpt.fingerprint.clone(),
        adam: ckpt.optimizer.cfg,
        adam_t: ckpt.optimizer.t,
        tensors: meta_of(&named),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    tensors.extend(ckpt.optimizer.m.iter());
    tensors.extend(ckpt.optimizer.v.iter());
    write_atomic(path.as_ref(), &encode_container(CHECKPOINT_MAGIC, header_json, &tensors))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = read_file(path.as_ref())?;
    let (header, mut r): (CheckpointHeader, _) =
        open_container(&bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    header.dims.validate()?;

    // Rebuild the parameter skeleton for these dims, then overwrite every
    // tensor from the payload, insisting the walk matches the header exactly.
    let mut params = init_ebm(&header.dims, 0)?;
    let mut idx = 0;
    let mut fill_err: Option<Error> = None;
    params.for_each_mut(|t, name| {
        if fill_err.is_some() {
            return;
        }
        let Some(meta) = header.tensors.get(idx) else {
            fill_err = Some(Error::Checkpoint(format!(
                "header lists {} tensors but the model walk reached #{} ({name})",
                header.tensors.len(),
                idx
            )));
            return;
        };
        if meta.name != name {
            fill_err = Some(Error::Checkpoint(format!(
                "tensor #{idx} is named {} in the header but {name} in the model walk",
                meta.name
            )));
            return;
        }
        if let Err(e) = r.fill_tensor(t, meta) {
            fill_err = Some(e);
        }
        idx += 1;
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if idx != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} tensors but the model has {idx}",
            header.tensors.len()
        )));
    }

    let shapes: Vec<(usize, usize)> = header.tensors.iter().map(|m| (m.rows, m.cols)).collect();
    let mut optimizer = Adam::new(header.adam, &shapes);
    optimizer.t = header.adam_t;
    for (m, meta) in optimizer.m.iter_mut().zip(&header.tensors) {
        r.fill_tensor(m, meta)?;
    }
    for (v, meta) in optimizer.v.iter_mut().zip(&header.tensors) {
        r.fill_tensor(v, meta)?;
    }
    r.finish()?;

    Ok(Checkpoint {
        dims: header.dims,
        params,
        optimizer,
        epoch: header.epoch,
        seed: header.seed,
        fingerprint: header.fingerprint,
    })
}

pub fn save_prompts(artifact: &PromptArtifact, path: impl AsRef<Path>) -> Result<()> {
    let named = artifact.source.named();
    let (variant, n_layers) = match &artifact.source {
        PromptSource::Generated(_) => ("generated", artifact.pdims.n_layers),
        PromptSource::Static(toks) => ("static", toks.len()),
    };
    let header = PromptsHeader {
        pdims: artifact.pdims.clone(),
        backbone_hash: artifact.backbone_hash.clone(),
        variant: variant.to_string(),
        n_layers,
        tensors: meta_of(&named),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    write_atomic(path.as_ref(), &encode_container(PROMPTS_MAGIC, header_json, &tensors))
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptArtifact> {
    let bytes = read_file(path.as_ref())?;
    let (header, mut r): (PromptsHeader, _) =
        open_container(&bytes, PROMPTS_MAGIC, "prompt-params")?;
    header.pdims.validate()?;

    let source = match header.variant.as_str() {
        "generated" => {
            let mut p = init_prompt(&header.pdims, 0)?;
            let mut idx = 0;
            let mut fill_err: Option<Error> = None;
            p.for_each_mut(|t, name| {
                if fill_err.is_some() {
                    return;
                }
                let Some(meta) = header.tensors.get(idx) else {
                    fill_err = Some(Error::Checkpoint(format!(
                        "header lists {} tensors but the generator walk reached #{idx} ({name})",
                        header.tensors.len()
                    )));
                    return;
                };
                if meta.name != name {
                    fill_err = Some(Error::Checkpoint(format!(
                        "tensor #{idx} is named {} in the header but {name} in the generator walk",
                        meta.name
                    )));
                    return;
                }
                if let Err(e) = r.fill_tensor(t, meta) {
                    fill_err = Some(e);
                }
                idx += 1;
            });
            if let Some(e) = fill_err {
                return Err(e);
            }
            if idx != header.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "header lists {} tensors but the generator has {idx}",
                    header.tensors.len()
                )));
            }
            PromptSource::Generated(p)
        }
        "static" => {
            let mut toks: Vec<Option<Tensor>> = vec![None; header.n_layers];
            for meta in &header.tensors {
                let layer: usize = meta
                    .name
                    .strip_prefix("static.")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| {
                        Error::Checkpoint(format!(
                            "static prompt tensor has unrecognized name {}",
                            meta.name
                        ))
                    })?;
                if layer >= header.n_layers {
                    return Err(Error::Checkpoint(format!(
                        "static prompt names layer {layer} but the header declares {} layers",
                        header.n_layers
                    )));
                }
                let mut t = Tensor::zeros(meta.rows, meta.cols);
                r.fill_tensor(&mut t, meta)?;
                toks[layer] = Some(t);
            }
            PromptSource::Static(toks)
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown prompt-params variant {other:?} (expected generated or static)"
            )))
        }
    };
    r.finish()?;

    Ok(PromptArtifact {
        pdims: header.pdims,
        source,
        backbone_hash: header.backbone_hash,
    })
}
