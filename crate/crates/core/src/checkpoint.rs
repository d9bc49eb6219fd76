//! Binary checkpoint format.
//!
//! ```text
//! "HDMAE001"                    8 bytes
//! header length                 u64, little-endian
//! header                        UTF-8 JSON
//! payload                       f32 little-endian, tensors in manifest order
//! ```
//!
//! The manifest lists every parameter by name, then the first moments as
//! `m/<name>`, then the second moments as `v/<name>`, each with its shape and
//! byte offset into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{param_shapes, ModelParams};
use crate::optim::AdamWState;
use crate::rng::RngCursor;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HDMAE001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Data stream at the start of the current epoch's shuffle.
    pub data: RngCursor,
    pub masking: RngCursor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    epoch: u64,
    rng: RngState,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn sections(ckpt: &Checkpoint) -> [(&'static str, &ModelParams); 3] {
    [("", &ckpt.params), ("m/", &ckpt.optimizer.m), ("v/", &ckpt.optimizer.v)]
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (prefix, set) in sections(ckpt) {
        for (name, _, t) in set.fields() {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
        adam_t: ckpt.optimizer.t,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend(header);
    out.extend(payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(integrity(format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(integrity("bad magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[16..];
    if header_len > rest.len() as u64 {
        return Err(integrity(format!(
            "header declares {header_len} bytes, only {} present",
            rest.len()
        )));
    }
    let (head, payload) = rest.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(head).map_err(|e| integrity(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(integrity(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;

    let shapes = param_shapes(&header.config.model);
    let mut expected = Vec::new();
    for prefix in ["", "m/", "v/"] {
        for (name, _, shape) in shapes.fields() {
            expected.push((format!("{prefix}{name}"), shape.clone()));
        }
    }
    if header.tensors.len() != expected.len() {
        return Err(integrity(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(integrity(format!(
                "manifest entry {}{:?} where {name}{shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(integrity(format!("{name}: offset {} should be {offset}", entry.offset)));
        }
        let end = shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|len| offset.checked_add(len))
            .unwrap_or(u64::MAX);
        if end > payload.len() as u64 {
            return Err(integrity(format!(
                "{name}: payload ends at byte {}, tensor needs {end}",
                payload.len()
            )));
        }
        let data = payload[offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != payload.len() as u64 {
        return Err(integrity(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - offset
        )));
    }

    let (enc, dec) = (header.config.model.enc_depth, header.config.model.dec_depth);
    let per = shapes.slot_count();
    let mut it = tensors.into_iter();
    let params = ModelParams::from_slots(enc, dec, it.by_ref().take(per))?;
    let m = ModelParams::from_slots(enc, dec, it.by_ref().take(per))?;
    let v = ModelParams::from_slots(enc, dec, it)?;
    if v.fields().iter().any(|f| f.2.data().iter().any(|&x| !(x >= 0.0))) {
        return Err(integrity("negative or NaN second moment"));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer: AdamWState { m, v, t: header.adam_t },
        step: header.step,
        epoch: header.epoch,
        rng: header.rng,
    })
}

/// Writes through a sibling temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_checkpoint(ckpt)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::{self, Purpose};

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model.enc_depth = 1;
        config.model.dec_depth = 1;
        let params = init_params::<f32>(&config.model, 9).unwrap();
        let mut optimizer = AdamWState::new(&params);
        optimizer.m.head_b.data_mut()[0] = -0.25;
        optimizer.v.head_b.data_mut()[0] = 0.5;
        optimizer.t = 3;
        let r = rng::stream(9, Purpose::Masking);
        Checkpoint {
            config,
            params,
            optimizer,
            step: 3,
            epoch: 1,
            rng: RngState {
                data: RngCursor::capture(1, &r),
                masking: RngCursor::capture(2, &r),
            },
        }
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let c = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_an_integrity_error() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 7, 15, 16, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Integrity(_))),
                "cut at {cut}"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_checkpoint(&longer), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let text = String::from_utf8_lossy(&bytes[16..80]).to_string();
        assert!(text.starts_with("{\"format_version\":1,"), "{text}");
        let mut bad = bytes.clone();
        bad[16 + "{\"format_version\":".len()] = b'7';
        let err = decode_checkpoint(&bad).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }
}
