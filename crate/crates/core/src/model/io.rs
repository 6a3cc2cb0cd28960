//! `PUDW` binary weight files.
//!
//! Layout (all little-endian, no padding):
//!
//! ```text
//! "PUDW" | version u32 | vocab_size d_model d_ff n_blocks n_heads pos_kind max_positions (u32 each)
//! token_embedding [V x D] | position_embedding [P x D] (learned only)
//! per block: attn_norm [D] wq wk wv wo [D x D] ffn_norm [D] w_up [D x F] w_down [F x D]
//! final_norm [D] | output_head [D x V]
//! ```
//!
//! Blocks are contiguous, so a block can be read on its own from its byte range.

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{GlobalWeights, Matrix, ModelConfig, PositionKind, TransformerBlock, TransformerModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PUDW";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 4 + 4 + 7 * 4;

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Byte offsets of each tensor group inside a weight file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLayout {
    pub config: ModelConfig,
    /// `(offset, size)` of block `i + 1`.
    pub blocks: Vec<(u64, u64)>,
    pub tail_offset: u64,
    pub total_bytes: u64,
}

impl FileLayout {
    pub fn new(config: ModelConfig) -> Self {
        let (v, d) = (config.vocab_size as u64, config.d_model as u64);
        let mut off = HEADER_BYTES + 4 * v * d;
        if config.position == PositionKind::Learned {
            off += 4 * config.max_positions as u64 * d;
        }
        let block_bytes = 4 * config.block_params() as u64;
        let blocks = (0..config.n_blocks)
            .map(|i| (off + i as u64 * block_bytes, block_bytes))
            .collect();
        let tail_offset = off + config.n_blocks as u64 * block_bytes;
        let total_bytes = tail_offset + 4 * (d + d * v);
        Self {
            config,
            blocks,
            tail_offset,
            total_bytes,
        }
    }

    pub fn block_range(&self, block_index: usize) -> (u64, u64) {
        self.blocks[block_index - 1]
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn encode_block(out: &mut Vec<u8>, b: &TransformerBlock) {
    put_f32s(out, &b.attn_norm);
    for m in [&b.wq, &b.wk, &b.wv, &b.wo] {
        put_f32s(out, &m.data);
    }
    put_f32s(out, &b.ffn_norm);
    put_f32s(out, &b.w_up.data);
    put_f32s(out, &b.w_down.data);
}

pub fn encode_model(model: &TransformerModel) -> Vec<u8> {
    let c = &model.config;
    let layout = FileLayout::new(*c);
    let mut out = Vec::with_capacity(layout.total_bytes as usize);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [c.vocab_size, c.d_model, c.d_ff, c.n_blocks, c.n_heads] {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, c.position.code());
    put_u32(&mut out, c.max_positions as u32);
    put_f32s(&mut out, &model.globals.token_embedding.data);
    if let Some(p) = &model.globals.position_embedding {
        put_f32s(&mut out, &p.data);
    }
    for b in &model.blocks {
        encode_block(&mut out, b);
    }
    put_f32s(&mut out, &model.globals.final_norm);
    put_f32s(&mut out, &model.globals.output_head.data);
    debug_assert_eq!(out.len() as u64, layout.total_bytes);
    out
}

pub fn write_model(model: &TransformerModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

/// Reads and checks the fixed header.
pub fn read_header<R: Read>(r: &mut R) -> Result<ModelConfig> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected PUDW")));
    }
    let mut fields = [0u32; 8];
    for f in fields.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated header".into()))?;
        *f = u32::from_le_bytes(b);
    }
    if fields[0] != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {}", fields[0])));
    }
    let config = ModelConfig {
        vocab_size: fields[1] as usize,
        d_model: fields[2] as usize,
        d_ff: fields[3] as usize,
        n_blocks: fields[4] as usize,
        n_heads: fields[5] as usize,
        position: PositionKind::from_code(fields[6])?,
        max_positions: fields[7] as usize,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    Ok(config)
}

/// Little-endian f32 reader over any byte source.
pub(crate) struct TensorReader<R> {
    inner: R,
}

impl<R: Read> TensorReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner }
    }

    pub(crate) fn vec(&mut self, n: usize) -> std::io::Result<Vec<f32>> {
        let mut bytes = vec![0u8; 4 * n];
        self.inner.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> std::io::Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, self.vec(rows * cols)?))
    }

    pub(crate) fn block(&mut self, c: &ModelConfig, block_index: usize) -> std::io::Result<TransformerBlock> {
        let d = c.d_model;
        Ok(TransformerBlock {
            block_index,
            attn_norm: self.vec(d)?,
            wq: self.matrix(d, d)?,
            wk: self.matrix(d, d)?,
            wv: self.matrix(d, d)?,
            wo: self.matrix(d, d)?,
            ffn_norm: self.vec(d)?,
            w_up: self.matrix(d, c.d_ff)?,
            w_down: self.matrix(c.d_ff, d)?,
        })
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TransformerModel> {
    let mut cursor = bytes;
    let c = read_header(&mut cursor)?;
    let layout = FileLayout::new(c);
    if bytes.len() as u64 != layout.total_bytes {
        return Err(Error::Format(format!(
            "expected {} bytes for this header, found {}",
            layout.total_bytes,
            bytes.len()
        )));
    }
    let truncated = |_| Error::Format("truncated tensor data".into());
    let mut r = TensorReader::new(cursor);
    let (v, d) = (c.vocab_size, c.d_model);
    let token_embedding = r.matrix(v, d).map_err(truncated)?;
    let position_embedding = match c.position {
        PositionKind::Learned => Some(r.matrix(c.max_positions, d).map_err(truncated)?),
        PositionKind::Rotary => None,
    };
    let blocks = (1..=c.n_blocks)
        .map(|i| r.block(&c, i))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(truncated)?;
    let final_norm = r.vec(d).map_err(truncated)?;
    let output_head = r.matrix(d, v).map_err(truncated)?;
    TransformerModel::new(
        c,
        GlobalWeights {
            token_embedding,
            position_embedding,
            final_norm,
            output_head,
        },
        blocks,
    )
}

pub fn read_model(path: &Path) -> Result<TransformerModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Reads header and non-block weights only, returning the layout for lazy block reads.
pub fn read_globals(path: &Path) -> Result<(FileLayout, GlobalWeights)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let c = read_header(&mut r)?;
    let layout = FileLayout::new(c);
    if actual != layout.total_bytes {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {actual}",
            path.display(),
            layout.total_bytes
        )));
    }
    let io = |e| Error::io(path, e);
    let (v, d) = (c.vocab_size, c.d_model);
    let mut t = TensorReader::new(&mut r);
    let token_embedding = t.matrix(v, d).map_err(io)?;
    let position_embedding = match c.position {
        PositionKind::Learned => Some(t.matrix(c.max_positions, d).map_err(io)?),
        PositionKind::Rotary => None,
    };
    r.seek(SeekFrom::Start(layout.tail_offset)).map_err(io)?;
    let mut t = TensorReader::new(&mut r);
    let final_norm = t.vec(d).map_err(io)?;
    let output_head = t.matrix(d, v).map_err(io)?;
    let globals = GlobalWeights {
        token_embedding,
        position_embedding,
        final_norm,
        output_head,
    };
    globals.check(&c)?;
    Ok((layout, globals))
}
