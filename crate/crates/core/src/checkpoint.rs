//! Checkpoint snapshots, the EMLB binary codec, and parameter-space merging.
//!
//! Layout (little-endian throughout): magic `EMLB`, u32 format version, a
//! u32-length-prefixed JSON header blob (encoder config + training
//! metadata), then the parameter table — u32 count, and per parameter a
//! length-prefixed name, a dtype code (0 = f64, 1 = f32), a u8 rank, u32
//! extents, and the raw payload. Writers always emit f64; readers upcast
//! f32 payloads.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, Model, Param};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMLB";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Training provenance carried inside the header blob.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Producing stage ("pretrain", "finetune", "merge", ...), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub seed: u64,
    /// Hashes of checkpoints this one was initialized from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<String>,
    /// Hashes of the checkpoints averaged into this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merge_sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: EncoderConfig,
    pub params: Vec<Param>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct HeaderBlob {
    encoder: EncoderConfig,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config: model.config().clone(),
            params: model.params().to_vec(),
            meta,
        }
    }

    /// Rebuild the model, validating names and shapes against the config.
    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    /// Serialize to EMLB bytes. Deterministic: the same checkpoint always
    /// produces identical bytes.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let blob = serde_json::to_vec(&HeaderBlob {
            encoder: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Validation(format!("header serialization failed: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(p.shape.len() as u8);
            for &e in &p.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Validation(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {version}"
            )));
        }
        let blob_len = r.u32()? as usize;
        let blob = r.take(blob_len)?;
        let header: HeaderBlob = serde_json::from_slice(blob)
            .map_err(|e| Error::Validation(format!("corrupt header blob: {e}")))?;
        header.encoder.validate()?;

        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let mut names = alloc::collections::BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = core::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Validation("parameter name is not UTF-8".into()))?
                .to_owned();
            if !names.insert(name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate parameter name '{name}'"
                )));
            }
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(numel * 8)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
                        .collect()
                }
                DTYPE_F32 => {
                    let raw = r.take(numel * 4)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("chunked by 4")) as f64)
                        .collect()
                }
                other => {
                    return Err(Error::Validation(format!(
                        "unknown dtype code {other} for parameter '{name}'"
                    )))
                }
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter '{name}' contains non-finite values"
                )));
            }
            params.push(Param { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Validation(format!(
                "{} trailing bytes after parameter table",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            config: header.encoder,
            params,
            meta: header.meta,
        })
    }

    /// SHA-256 of the encoded bytes, the identity used in lineage metadata.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.encode()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Validation("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

// Architecture equality for merging. The init seed is provenance, not
// architecture: diverse checkpoints legitimately differ in it.
fn same_architecture(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.seed = 0;
    b.seed = 0;
    a == b
}

/// Weighted parameter-space average of checkpoints. Weights default to
/// equal, must be nonnegative, and must sum to 1 within 1e-12. Metadata
/// records the source hashes.
pub fn merge_checkpoints(
    checkpoints: &[Checkpoint],
    weights: Option<&[f64]>,
) -> Result<Checkpoint> {
    if checkpoints.len() < 2 {
        return Err(Error::Validation(format!(
            "merging needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let n = checkpoints.len();
    let equal = alloc::vec![1.0 / n as f64; n];
    let weights = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Validation(format!(
                    "{} weights for {n} checkpoints",
                    w.len()
                )));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Validation("weights must be nonnegative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Validation(format!(
                    "weights sum to {sum}, expected 1 within 1e-12"
                )));
            }
            w.to_vec()
        }
        None => equal,
    };

    let first = &checkpoints[0];
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if !same_architecture(&c.config, &first.config) {
            return Err(Error::Validation(format!(
                "checkpoint {i} architecture differs from checkpoint 0"
            )));
        }
        if c.params.len() != first.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint {i} has {} parameters, checkpoint 0 has {}",
                c.params.len(),
                first.params.len()
            )));
        }
        for (p, q) in first.params.iter().zip(&c.params) {
            if p.name != q.name {
                return Err(Error::Validation(format!(
                    "parameter name mismatch: '{}' vs '{}'",
                    p.name, q.name
                )));
            }
            if p.shape != q.shape {
                return Err(Error::Validation(format!(
                    "parameter '{}' shape mismatch: {:?} vs {:?}",
                    p.name, p.shape, q.shape
                )));
            }
        }
    }

    let mut params = Vec::with_capacity(first.params.len());
    for pi in 0..first.params.len() {
        let mut data = alloc::vec![0.0; first.params[pi].data.len()];
        for (c, &w) in checkpoints.iter().zip(&weights) {
            for (acc, &v) in data.iter_mut().zip(&c.params[pi].data) {
                *acc += w * v;
            }
        }
        params.push(Param {
            name: first.params[pi].name.clone(),
            shape: first.params[pi].shape.clone(),
            data,
        });
    }

    let mut merge_sources = Vec::with_capacity(n);
    for c in checkpoints {
        merge_sources.push(c.content_hash()?);
    }
    Ok(Checkpoint {
        version: FORMAT_VERSION,
        config: first.config.clone(),
        params,
        meta: CheckpointMeta {
            stage: Some("merge".into()),
            step: 0,
            seed: first.meta.seed,
            lineage: Vec::new(),
            merge_sources,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionMode;

    fn small_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            rope_base: 10_000.0,
            attention_mode: AttentionMode::Bidirectional,
            vocab_size: 258,
            max_seq_len: 16,
            seed,
        }
    }

    fn checkpoint_with_seed(seed: u64) -> Checkpoint {
        let model = Model::init(small_config(seed)).unwrap();
        Checkpoint::from_model(
            &model,
            CheckpointMeta {
                stage: Some("pretrain".into()),
                step: 3,
                seed,
                ..Default::default()
            },
        )
    }

    /// Constant-valued checkpoint for merge arithmetic tests.
    fn constant_checkpoint(value: f64) -> Checkpoint {
        let mut c = checkpoint_with_seed(1);
        for p in &mut c.params {
            p.data.iter_mut().for_each(|v| *v = value);
        }
        c
    }

    #[test]
    fn encode_decode_round_trip_is_byte_identical() {
        let c = checkpoint_with_seed(9);
        let bytes = c.encode().unwrap();
        let decoded = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(decoded, c);
        let bytes2 = decoded.encode().unwrap();
        assert_eq!(bytes, bytes2);
        // And the model survives reconstruction.
        decoded.to_model().unwrap();
    }

    #[test]
    fn decode_rejects_corruption() {
        let c = checkpoint_with_seed(9);
        let bytes = c.encode().unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad_magic),
            Err(Error::Validation(_))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::decode(truncated),
            Err(Error::Validation(_))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Checkpoint::decode(&trailing),
            Err(Error::Validation(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bad_version),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn merging_two_identical_checkpoints_is_idempotent_within_ulp() {
        let c = checkpoint_with_seed(4);
        let merged = merge_checkpoints(&[c.clone(), c.clone()], None).unwrap();
        for (m, o) in merged.params.iter().zip(&c.params) {
            for (a, b) in m.data.iter().zip(&o.data) {
                // 0.5x + 0.5x rounds to x except possibly the last ulp.
                let ulp = (b.abs() * f64::EPSILON).max(f64::MIN_POSITIVE);
                assert!((a - b).abs() <= ulp, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn merge_arithmetic_examples() {
        // Params 0.0 and 1.0 with equal weights -> 0.5.
        let merged =
            merge_checkpoints(&[constant_checkpoint(0.0), constant_checkpoint(1.0)], None)
                .unwrap();
        assert!(merged.params.iter().all(|p| p.data.iter().all(|&v| v == 0.5)));

        // Six checkpoints valued 1..6, equal weights -> 3.5.
        let six: Vec<Checkpoint> = (1..=6).map(|v| constant_checkpoint(v as f64)).collect();
        let merged = merge_checkpoints(&six, None).unwrap();
        for p in &merged.params {
            for &v in &p.data {
                assert!((v - 3.5).abs() < 1e-12, "{v}");
            }
        }
        // Metadata lists every source.
        assert_eq!(merged.meta.merge_sources.len(), 6);
    }

    #[test]
    fn merge_is_permutation_invariant_within_tolerance() {
        let a = checkpoint_with_seed(1);
        let b = checkpoint_with_seed(2);
        let c = checkpoint_with_seed(3);
        let w = [0.5, 0.3, 0.2];
        let abc = merge_checkpoints(&[a.clone(), b.clone(), c.clone()], Some(&w)).unwrap();
        let cab =
            merge_checkpoints(&[c.clone(), a.clone(), b.clone()], Some(&[0.2, 0.5, 0.3])).unwrap();
        for (p, q) in abc.params.iter().zip(&cab.params) {
            for (x, y) in p.data.iter().zip(&q.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_merge_is_associative() {
        let a = checkpoint_with_seed(1);
        let b = checkpoint_with_seed(2);
        let c = checkpoint_with_seed(3);
        let ab = merge_checkpoints(&[a.clone(), b.clone()], None).unwrap();
        let two_step = merge_checkpoints(&[ab, c.clone()], Some(&[2.0 / 3.0, 1.0 / 3.0])).unwrap();
        let flat = merge_checkpoints(&[a, b, c], None).unwrap();
        for (p, q) in two_step.params.iter().zip(&flat.params) {
            for (x, y) in p.data.iter().zip(&q.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_reduces_to_identity_on_copies() {
        let c = checkpoint_with_seed(6);
        let copies: Vec<Checkpoint> = (0..5).map(|_| c.clone()).collect();
        let merged = merge_checkpoints(&copies, None).unwrap();
        for (m, o) in merged.params.iter().zip(&c.params) {
            for (a, b) in m.data.iter().zip(&o.data) {
                let ulp = (b.abs() * f64::EPSILON).max(f64::MIN_POSITIVE);
                assert!((a - b).abs() <= 2.0 * ulp);
            }
        }
    }

    #[test]
    fn merge_validation_errors() {
        let a = checkpoint_with_seed(1);
        assert!(matches!(
            merge_checkpoints(&[a.clone()], None),
            Err(Error::Validation(_))
        ));

        // Shape mismatch names the parameter.
        let mut b = checkpoint_with_seed(2);
        b.params[3].shape = alloc::vec![2, 32];
        b.params[3].data = alloc::vec![0.0; 64];
        let err = merge_checkpoints(&[a.clone(), b], None).unwrap_err();
        assert!(err.message().contains(&a.params[3].name), "{err}");

        // Different architecture.
        let model = Model::init(EncoderConfig {
            d_model: 16,
            ..small_config(1)
        })
        .unwrap();
        let c = Checkpoint::from_model(&model, CheckpointMeta::default());
        assert!(merge_checkpoints(&[a.clone(), c], None).is_err());

        // Bad weights.
        let b = checkpoint_with_seed(2);
        assert!(merge_checkpoints(&[a.clone(), b.clone()], Some(&[0.5])).is_err());
        assert!(merge_checkpoints(&[a.clone(), b.clone()], Some(&[0.6, 0.5])).is_err());
        assert!(merge_checkpoints(&[a, b], Some(&[-0.2, 1.2])).is_err());
    }

    #[test]
    fn different_init_seeds_are_mergeable() {
        let a = checkpoint_with_seed(1);
        let b = checkpoint_with_seed(2);
        assert!(merge_checkpoints(&[a, b], None).is_ok());
    }
}
