//! Versioned binary checkpoint container: config JSON, a named tensor
//! index, then flat little-endian f32 data. Parameters are f32-quantized in
//! memory, so save followed by load reproduces bit-identical logits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TensorSpec};

const MAGIC: &[u8; 8] = b"CMTCKPT\0";
const VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let config_json = serde_json::to_vec(&params.config)?;
    let index_json = serde_json::to_vec(params.specs())?;
    let mut out = Vec::with_capacity(24 + config_json.len() + index_json.len() + params.n_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(index_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&index_json);
    for &v in params.raw() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let fail = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut pos = 12usize;
    let read_u64 = |pos: &mut usize| -> Result<usize> {
        if bytes.len() < *pos + 8 {
            return Err(fail("truncated header".into()));
        }
        let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
        *pos += 8;
        Ok(v)
    };
    let config_len = read_u64(&mut pos)?;
    if bytes.len() < pos + config_len {
        return Err(fail("truncated config".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[pos..pos + config_len])?;
    pos += config_len;
    let index_len = read_u64(&mut pos)?;
    if bytes.len() < pos + index_len {
        return Err(fail("truncated index".into()));
    }
    let index: Vec<TensorSpec> = serde_json::from_slice(&bytes[pos..pos + index_len])?;
    pos += index_len;

    let n: usize = index.iter().map(|s| s.rows * s.cols).sum();
    if bytes.len() != pos + n * 4 {
        return Err(fail(format!(
            "tensor data length {} does not match index total {}",
            bytes.len() - pos,
            n * 4
        )));
    }
    let data: Vec<f64> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let params = ModelParams::from_parts(config, data)?;
    if params.specs() != index.as_slice() {
        return Err(fail("tensor index does not match model config".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::{forward_hidden, SeqInput};
    use crate::model::ModelConfig;
    use crate::tokens::{CompoundToken as Tok, InitialToken};
    use crate::types::{Genre, Instrument};

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout: 0.0,
            max_len: 64,
        };
        let params = ModelParams::init(cfg, 77).unwrap();
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(params.raw(), loaded.raw());

        let input = SeqInput::build(
            &[
                InitialToken::Genre(Genre::Dance),
                InitialToken::Instrument(Instrument::Bass),
            ],
            &[Tok::bar(1), Tok::tick(3, 1, 1), Tok::eos()],
            4.0,
        )
        .unwrap();
        let a = forward_hidden(&params, &input).unwrap();
        let b = forward_hidden(&loaded, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());

        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 8,
            d_ff: 16,
            dropout: 0.0,
            max_len: 32,
        };
        let params = ModelParams::init(cfg, 0).unwrap();
        save(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9; // bump version
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::SchemaVersion { found: 9, .. })));
    }
}
