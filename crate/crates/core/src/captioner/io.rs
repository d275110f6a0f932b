//! Model file: `"CFM1"`, version `u16`, length-prefixed config block,
//! parameter count `u64` and little-endian `f64` blob, then a trailing
//! `u64` checksum of the config block.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::{CaptionModel, Provenance};
use super::vocab::Vocabulary;
use crate::binio::{checksum64, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"CFM1";
pub const MODEL_VERSION: u16 = 1;

fn config_block(model: &CaptionModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer::default();
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.d_model,
        c.n_heads,
        c.n_encoder_layers,
        c.n_decoder_layers,
        c.max_caption_len,
        c.vocab_size,
    ] {
        w.usize(v);
    }
    w.u64(model.provenance.config_hash);
    w.u64(model.provenance.seed);
    w.usize(model.vocab.len());
    for t in model.vocab.tokens() {
        w.str(t);
    }
    w.usize(model.vocab.lexicon().len());
    for &id in model.vocab.lexicon() {
        w.usize(id);
    }
    w.buf
}

pub fn model_to_bytes(model: &CaptionModel) -> Vec<u8> {
    let block = config_block(model);
    let mut w = Writer::default();
    w.bytes(&MODEL_MAGIC);
    w.u16(MODEL_VERSION);
    w.usize(block.len());
    w.bytes(&block);
    w.u64(model.param_count() as u64);
    for p in model.params() {
        w.f64s(p.data());
    }
    w.u64(checksum64(&block));
    w.buf
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CaptionModel> {
    let mut r = Reader::new(bytes, "model file");
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let block_len = r.usize()?;
    let block = r.take(block_len)?;
    let count = r.u64()? as usize;
    if r.remaining() != count.saturating_mul(8).saturating_add(8) {
        return Err(Error::Truncated(format!(
            "model file: parameter blob of {count} values needs {} bytes, {} present",
            count * 8 + 8,
            r.remaining()
        )));
    }
    let blob = r.f64s(count)?;
    let stored = r.u64()?;
    r.finish()?;
    let computed = checksum64(block);
    if stored != computed {
        return Err(Error::ConfigMismatch { stored, computed });
    }

    let mut c = Reader::new(block, "model config block");
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = c.usize()?;
    }
    let config = ModelConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        d_model: dims[3],
        n_heads: dims[4],
        n_encoder_layers: dims[5],
        n_decoder_layers: dims[6],
        max_caption_len: dims[7],
        vocab_size: dims[8],
    };
    config.validate()?;
    let provenance = Provenance {
        config_hash: c.u64()?,
        seed: c.u64()?,
    };
    let n_tokens = c.usize()?;
    let tokens = (0..n_tokens).map(|_| c.str()).collect::<Result<Vec<_>>>()?;
    let n_lex = c.usize()?;
    let lexicon = (0..n_lex).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    let vocab = Vocabulary::from_parts(tokens, lexicon)?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Malformed("vocabulary size disagrees with config".into()));
    }
    if count != CaptionModel::param_count_for(&config) {
        return Err(Error::Malformed(format!(
            "parameter count {count} does not match config ({})",
            CaptionModel::param_count_for(&config)
        )));
    }
    let template = CaptionModel::new(config.clone(), vocab.clone(), 0)?;
    let mut offset = 0;
    let params = template
        .params()
        .iter()
        .map(|p| {
            let n = p.numel();
            let t = Tensor::new(p.shape(), blob[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect::<Result<Vec<_>>>()?;
    CaptionModel::from_params(config, vocab, provenance, params)
}

pub fn save_model(model: &CaptionModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CaptionModel> {
    model_from_bytes(&fs::read(path)?)
}
