//! Model checkpoints: `u32` header length, a UTF-8 JSON header, then the
//! parameters as little-endian `f32`.

use std::collections::HashMap;
use std::path::Path;

use msrt_core::nn::Module;
use msrt_core::{Model, CLASS_NAMES};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, ParseError};

pub const FORMAT: &str = "msrt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `model` with the config that produced it.
pub fn encode(model: &Model, config: &RunConfig) -> Vec<u8> {
    let mut named = Vec::new();
    model.named_params("", &mut named);
    let mut tensors = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (name, p) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &x in p.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Rebuilds the model described by the header and fills in its weights.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Model), ParseError> {
    if bytes.len() < 4 {
        return Err(ParseError::new(
            bytes.len() as u64,
            format!("truncated: expected 4-byte header length, found {} bytes", bytes.len()),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if hlen > body.len() {
        return Err(ParseError::new(
            0,
            format!("header length {hlen} exceeds the {} bytes that follow", body.len()),
        ));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| ParseError::new(4, format!("invalid header JSON: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(ParseError::new(
            4,
            format!("unsupported checkpoint {} v{}", header.format, header.version),
        ));
    }
    header
        .config
        .validate()
        .map_err(|e| ParseError::new(4, format!("embedded config: {e}")))?;
    let mut model =
        Model::new(header.config.model.clone()).map_err(|e| ParseError::new(4, format!("embedded config: {e}")))?;

    let payload_start = 4 + hlen;
    let payload = &body[hlen..];
    let directory: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if directory.len() != header.tensors.len() {
        return Err(ParseError::new(4, "duplicate tensor names in directory"));
    }

    let mut named = Vec::new();
    model.named_params("", &mut named);
    if named.len() != header.tensors.len() {
        return Err(ParseError::new(
            4,
            format!("directory lists {} tensors, model has {}", header.tensors.len(), named.len()),
        ));
    }
    let mut spans = Vec::with_capacity(named.len());
    let mut total = 0u128;
    for (name, p) in &named {
        let entry = directory
            .get(name.as_str())
            .ok_or_else(|| ParseError::new(4, format!("tensor `{name}` missing from directory")))?;
        if entry.shape != p.shape() {
            return Err(ParseError::new(
                4,
                format!("tensor `{name}`: shape {:?}, model expects {:?}", entry.shape, p.shape()),
            ));
        }
        let start = entry.offset as u128;
        let end = start + 4 * p.len() as u128;
        if end > payload.len() as u128 {
            return Err(ParseError::new(
                payload_start as u64 + entry.offset,
                format!("tensor `{name}` ends at payload byte {end}, payload has {}", payload.len()),
            ));
        }
        total += end - start;
        spans.push((start as usize, end as usize));
    }
    if total != payload.len() as u128 {
        return Err(ParseError::new(
            payload_start as u64,
            format!("payload holds {} bytes, directory accounts for {total}", payload.len()),
        ));
    }

    let mut params = Vec::new();
    model.params_mut(&mut params);
    for (p, &(start, end)) in params.into_iter().zip(&spans) {
        for (dst, chunk) in p.data_mut().iter_mut().zip(payload[start..end].chunks_exact(4)) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(ParseError::new(
                    (payload_start + start) as u64,
                    "non-finite parameter value",
                ));
            }
            *dst = x as f64;
        }
    }
    Ok((header.config, model))
}

pub fn load(path: &Path) -> CliResult<(RunConfig, Model)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::parse(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use msrt_core::ModelConfig;

    fn toy() -> (RunConfig, Model) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::toy(1000, 8);
        (cfg.clone(), Model::new(cfg.model).unwrap())
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (cfg, model) = toy();
        let a = encode(&model, &cfg);
        let (cfg2, model2) = decode(&a).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&model2, &cfg2), a);
    }

    #[test]
    fn weights_are_f32_rounded_originals() {
        let (cfg, model) = toy();
        let (_, back) = decode(&encode(&model, &cfg)).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        model.named_params("", &mut a);
        back.named_params("", &mut b);
        for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let (cfg, model) = toy();
        let bytes = encode(&model, &cfg);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
        assert!(decode(&bytes[..3]).is_err());
    }
}
