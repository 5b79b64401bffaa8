//! Checkpoint files.
//!
//! Layout: `DSEG`, format version (u32 LE), header length (u32 LE), a UTF-8
//! JSON header `{config, tensors: [{name, shape, offset}]}`, then the tensor
//! payloads as f32 LE in manifest order. Offsets count bytes from the start
//! of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamTree;
use crate::unet::{ModelConfig, ModelParams};

pub const MAGIC: [u8; 4] = *b"DSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let named = params.named();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: cfg.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize, what: &str) -> Result<u32, CheckpointError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CheckpointError::Truncated(format!("missing {what}")))
}

/// Parse the preamble and header, returning the header and the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    let magic = bytes
        .get(..4)
        .ok_or_else(|| CheckpointError::Truncated("missing magic".into()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.try_into().unwrap()));
    }
    let version = u32_at(bytes, 4, "version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = u32_at(bytes, 8, "header length")? as usize;
    let header = bytes.get(12..12 + len).ok_or_else(|| {
        CheckpointError::Truncated(format!("header needs {len} bytes, {} present", bytes.len().saturating_sub(12)))
    })?;
    let header: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, &bytes[12 + len..]))
}

/// Decode, checking the manifest against the model `expected` implies.
pub fn decode_as(bytes: &[u8], expected: &ModelConfig) -> Result<ModelParams> {
    let (header, payload) = decode_header(bytes)?;
    let mut params = ModelParams::init(expected, 0)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut slots = params.leaves_mut();
    if header.tensors.len() != slots.len() {
        return Err(CheckpointError::TensorCount {
            expected: slots.len(),
            found: header.tensors.len(),
        }
        .into());
    }
    let mut end = 0u64;
    let mut last_payload = 0u64;
    for ((entry, slot), name) in header.tensors.iter().zip(slots.iter_mut()).zip(&names) {
        if &entry.name != name {
            return Err(CheckpointError::Name {
                expected: name.clone(),
                found: entry.name.clone(),
            }
            .into());
        }
        if entry.shape != slot.shape() {
            return Err(CheckpointError::ShapeDisagreement {
                name: entry.name.clone(),
                expected: slot.shape().to_vec(),
                found: entry.shape.clone(),
            }
            .into());
        }
        let start = entry.offset;
        let stop = start + 4 * slot.numel() as u64;
        if start < end || stop > payload.len() as u64 {
            return Err(CheckpointError::Bounds {
                name: entry.name.clone(),
                start,
                end: stop,
                payload: payload.len() as u64,
            }
            .into());
        }
        let raw = &payload[start as usize..stop as usize];
        for (x, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap());
        }
        end = stop;
        last_payload = last_payload.max(stop);
    }
    if last_payload != payload.len() as u64 {
        return Err(CheckpointError::Truncated(format!(
            "payload holds {} bytes, manifest accounts for {last_payload}",
            payload.len()
        ))
        .into());
    }
    Ok(params)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let (header, _) = decode_header(bytes)?;
    header.config.validate()?;
    let params = decode_as(bytes, &header.config)?;
    Ok((params, header.config))
}

pub fn save(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, encode(params, cfg)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Load weights into the architecture `cfg` describes, rejecting any
/// tensor whose shape disagrees.
pub fn load_as(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    decode_as(&std::fs::read(path).map_err(|e| Error::io(path, e))?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bits(t: &Tensor) -> Vec<u32> {
        t.data().iter().map(|x| x.to_bits()).collect()
    }

    fn model() -> (ModelParams, ModelConfig) {
        let cfg = ModelConfig::micro(32, 4);
        (ModelParams::init(&cfg, 3).unwrap(), cfg)
    }

    fn set_header(bytes: &[u8], f: impl FnOnce(&mut CheckpointHeader)) -> Vec<u8> {
        let (mut h, payload) = decode_header(bytes).unwrap();
        f(&mut h);
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (p, cfg) = model();
        let bytes = encode(&p, &cfg).unwrap();
        let (q, cfg2) = decode(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        for (a, b) in p.leaves().iter().zip(q.leaves()) {
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode(&q, &cfg2).unwrap(), bytes);
    }

    #[test]
    fn layout_prefix() {
        let (p, cfg) = model();
        let bytes = encode(&p, &cfg).unwrap();
        assert_eq!(&bytes[..4], b"DSEG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let (h, payload) = decode_header(&bytes).unwrap();
        assert_eq!(payload.len(), 4 * crate::params::count(&p));
        assert!(h.tensors.windows(2).all(|w| w[0].offset < w[1].offset));
        assert_eq!(h.tensors[0].name, "embed.w");
    }

    #[test]
    fn header_errors() {
        let (p, cfg) = model();
        let bytes = encode(&p, &cfg).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode(&bad),
            Err(Error::Checkpoint(CheckpointError::Version { found: 2, expected: 1 }))
        ));
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(CheckpointError::Truncated(_) | CheckpointError::Bounds { .. }))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn corrupt_offset_is_a_bounds_error() {
        let (p, cfg) = model();
        let bytes = encode(&p, &cfg).unwrap();
        for delta in [-4i64, 1_000_000] {
            let bad = set_header(&bytes, |h| {
                let e = &mut h.tensors[3];
                e.offset = (e.offset as i64 + delta) as u64;
            });
            match decode(&bad) {
                Err(Error::Checkpoint(CheckpointError::Bounds { name, .. })) => {
                    assert_eq!(name, decode_header(&bytes).unwrap().0.tensors[3].name)
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let (p, cfg) = model();
        let bytes = encode(&p, &cfg).unwrap();
        let other = ModelConfig {
            num_classes: 3,
            ..cfg.clone()
        };
        match decode_as(&bytes, &other) {
            Err(Error::Checkpoint(CheckpointError::ShapeDisagreement { name, expected, found })) => {
                assert_eq!(name, "head.w");
                assert_eq!(expected, vec![4, 3]);
                assert_eq!(found, vec![4, 2]);
            }
            other => panic!("{other:?}"),
        }
        let fewer = ModelConfig { num_skips: 1, ..cfg };
        assert!(matches!(
            decode_as(&bytes, &fewer),
            Err(Error::Checkpoint(CheckpointError::TensorCount { .. }))
        ));
    }

    #[test]
    fn renamed_tensor_is_rejected() {
        let (p, cfg) = model();
        let bytes = encode(&p, &cfg).unwrap();
        let bad = set_header(&bytes, |h| h.tensors[0].name = "embed.x".into());
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::Name { .. }))));
    }
}
