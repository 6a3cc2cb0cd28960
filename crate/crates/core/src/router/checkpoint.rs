//! `PUDR` router checkpoints.
//!
//! ```text
//! "PUDR" | version u32
//! vocab embed_dim encoder max_prompt_len outputs loss_mode (u32 each)
//! learning_rate f64 | weight_decay f64 | batch_size epochs warmup_steps (u32) | seed u64
//! final_train_loss f64 | pool hash: len u32 + utf-8 bytes
//! tensors as little-endian f32, in parameter-group order
//! ```

use std::path::Path;

use super::{EncoderKind, LossMode, RouterArch, RouterModel, RouterParams, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PUDR";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(router: &RouterModel) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let a = &router.arch;
    u32le(&mut out, a.vocab_size);
    u32le(&mut out, a.embed_dim);
    u32le(&mut out, a.encoder.code() as usize);
    u32le(&mut out, a.max_prompt_len);
    u32le(&mut out, router.outputs);
    u32le(&mut out, router.loss_mode.code() as usize);
    let c = &router.train_config;
    out.extend_from_slice(&c.learning_rate.to_le_bytes());
    out.extend_from_slice(&c.weight_decay.to_le_bytes());
    u32le(&mut out, c.batch_size);
    u32le(&mut out, c.epochs);
    u32le(&mut out, c.warmup_steps);
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&router.final_train_loss.to_le_bytes());
    u32le(&mut out, router.pool_binding.len());
    out.extend_from_slice(router.pool_binding.as_bytes());
    for (_, group) in router.params.groups() {
        for &v in group {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("truncated router checkpoint".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RouterModel> {
    let mut c = Cursor { bytes };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected PUDR".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported router checkpoint version {version}"
        )));
    }
    let vocab_size = c.u32()?;
    let embed_dim = c.u32()?;
    let encoder = EncoderKind::from_code(c.u32()? as u32)?;
    let max_prompt_len = c.u32()?;
    let outputs = c.u32()?;
    let loss_mode = LossMode::from_code(c.u32()? as u32)?;
    let train_config = TrainConfig {
        learning_rate: c.f64()?,
        weight_decay: c.f64()?,
        batch_size: c.u32()?,
        epochs: c.u32()?,
        warmup_steps: c.u32()?,
        seed: c.u64()?,
    };
    let final_train_loss = c.f64()?;
    let hash_len = c.u32()?;
    let pool_binding =
        String::from_utf8(c.take(hash_len)?.to_vec()).map_err(|_| Error::Format("pool hash is not utf-8".into()))?;
    let e = embed_dim;
    let embedding = c.tensor(vocab_size * e)?;
    let attention = match encoder {
        EncoderKind::Attention => Some([c.tensor(e * e)?, c.tensor(e * e)?, c.tensor(e * e)?, c.tensor(e * e)?]),
        EncoderKind::MeanPool => None,
    };
    let head_weight = c.tensor(e * outputs)?;
    let head_bias = c.tensor(outputs)?;
    if !c.bytes.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes in router checkpoint",
            c.bytes.len()
        )));
    }
    Ok(RouterModel {
        arch: RouterArch {
            vocab_size,
            embed_dim,
            encoder,
            max_prompt_len,
        },
        outputs,
        params: RouterParams {
            embedding,
            attention,
            head_weight,
            head_bias,
        },
        pool_binding,
        train_config,
        loss_mode,
        final_train_loss,
    })
}

pub fn write_checkpoint(router: &RouterModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(router)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<RouterModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
