//! Binary checkpoint format.
//!
//! ```text
//! b"DAUD" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON
//!        | parameters: f32 LE, canonical order
//! ```
//!
//! The header records the model config, the training regime, the seed,
//! the parameter count and the loss curve. It contains no timestamps, so
//! identical models produce identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{TrainedModel, TrainingRegime};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerParams};

pub const MAGIC: &[u8; 4] = b"DAUD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Name and version of the writing program.
    pub created_by: String,
    pub config: ModelConfig,
    pub regime: TrainingRegime,
    pub seed: u64,
    pub param_count: usize,
    pub loss_curve: Vec<f32>,
}

/// Serializes a trained model to checkpoint bytes.
pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        created_by: concat!("daud ", env!("CARGO_PKG_VERSION")).to_string(),
        config: model.config,
        regime: model.regime.clone(),
        seed: model.regime.seed,
        param_count: model.params.param_count(),
        loss_curve: model.loss_curve.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Integrity(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * header.param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Integrity(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Reads only the header, validating magic and version.
pub fn decode_header(mut bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if take(&mut bytes, 4, "magic")? != MAGIC {
        return Err(Error::Integrity("not a checkpoint: bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Integrity("header length overflows".into()))?;
    let json = take(&mut bytes, len, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("malformed header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Integrity("header version disagrees with file version".into()));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::Integrity(format!("invalid model config in header: {e}")))?;
    if header.param_count != header.config.param_count() {
        return Err(Error::Integrity(format!(
            "header declares {} parameters but its config has {}",
            header.param_count,
            header.config.param_count()
        )));
    }
    Ok((header, bytes))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let (header, payload) = decode_header(bytes)?;
    if payload.len() != 4 * header.param_count {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, header expects {} parameters ({} bytes)",
            payload.len(),
            header.param_count,
            4 * header.param_count
        )));
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let params = TransformerParams::from_flat(header.config, &flat)
        .map_err(|e| Error::Integrity(format!("parameter payload rejected: {e}")))?;
    Ok(TrainedModel {
        params,
        config: header.config,
        regime: header.regime,
        loss_curve: header.loss_curve,
    })
}

/// Writes through a temporary file and a rename, so a crash never leaves
/// a partial checkpoint under `path`.
pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::RegimeKind;
    use crate::model::init_params;

    fn model(seed: u64) -> TrainedModel {
        let config = ModelConfig::gpt2_style(1, 2, 8, 260, 32);
        TrainedModel {
            params: init_params(config, seed).unwrap(),
            config,
            regime: TrainingRegime::new(RegimeKind::Sft),
            loss_curve: vec![1.5, 0.1 + 0.2, f32::MIN_POSITIVE],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(3);
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let bits = |p: &TransformerParams<f32>| p.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m.params), bits(&back.params));
        assert_eq!(m.loss_curve, back.loss_curve);
        assert_eq!(m.regime, back.regime);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_integrity_error() {
        let bytes = encode_checkpoint(&model(0)).unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
    }

    #[test]
    fn mismatched_payload_is_integrity_error() {
        let a = model(0);
        let mut b = model(0);
        b.config = ModelConfig::gpt2_style(1, 2, 16, 260, 32);
        b.params = init_params(b.config, 0).unwrap();
        let ea = encode_checkpoint(&a).unwrap();
        let eb = encode_checkpoint(&b).unwrap();
        let (_, pa) = decode_header(&ea).unwrap();
        let (_, pb) = decode_header(&eb).unwrap();
        let mut franken = ea[..ea.len() - pa.len()].to_vec();
        franken.extend_from_slice(pb);
        assert!(matches!(decode_checkpoint(&franken), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_checkpoint(&model(0)).unwrap();
        bytes[4] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Integrity(_))));
    }
}
