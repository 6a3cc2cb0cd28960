use crate::error::{Error, Result};
use crate::model::{ModelConfig, PositionKind};

/// Decimal gigabyte, as used for storage and bus bandwidth figures.
pub const GB: f64 = 1e9;

/// Seconds to move `model_bytes * surviving_fraction` bytes at the given bandwidth.
pub fn estimate_load_time(model_bytes: f64, surviving_fraction: f64, bandwidth_bytes_per_s: f64) -> Result<f64> {
    if !(bandwidth_bytes_per_s > 0.0 && bandwidth_bytes_per_s.is_finite()) {
        return Err(Error::InvalidBandwidth(bandwidth_bytes_per_s));
    }
    if !(model_bytes >= 0.0 && model_bytes.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "model size {model_bytes} must be non-negative"
        )));
    }
    if !(0.0..=1.0).contains(&surviving_fraction) {
        return Err(Error::InvalidArgument(format!(
            "surviving fraction {surviving_fraction} must lie in [0, 1]"
        )));
    }
    Ok(model_bytes * surviving_fraction / bandwidth_bytes_per_s)
}

/// Parameter counts of a decoder split into per-block and always-resident parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_blocks: usize,
    pub per_block: u64,
    /// Embeddings, final norm and output head.
    pub non_block: u64,
}

impl ParamLayout {
    /// Grouped-query attention decoder with a gated (three-matrix) MLP and
    /// two RMSNorm gains per block.
    #[allow(clippy::too_many_arguments)]
    pub fn gated_gqa(
        vocab: u64,
        d_model: u64,
        d_ff: u64,
        n_blocks: usize,
        n_heads: u64,
        n_kv_heads: u64,
        tied_embeddings: bool,
    ) -> Self {
        let head_dim = d_model / n_heads;
        let kv = n_kv_heads * head_dim;
        let attn = 2 * d_model * d_model + 2 * d_model * kv;
        let mlp = 3 * d_model * d_ff;
        let per_block = attn + mlp + 2 * d_model;
        let embed = vocab * d_model;
        let head = if tied_embeddings { 0 } else { vocab * d_model };
        Self {
            n_blocks,
            per_block,
            non_block: embed + head + d_model,
        }
    }

    /// LLaMA-3.1-8B: 32 blocks, width 4096, MLP 14336, 32 query and 8 KV
    /// heads, vocabulary 128256, untied output head.
    pub fn llama_3_1_8b() -> Self {
        Self::gated_gqa(128_256, 4096, 14_336, 32, 32, 8, false)
    }

    /// Layout of a model in this crate's own format.
    pub fn from_config(c: &ModelConfig) -> Self {
        let (v, d) = (c.vocab_size as u64, c.d_model as u64);
        let pos = match c.position {
            PositionKind::Learned => c.max_positions as u64 * d,
            PositionKind::Rotary => 0,
        };
        Self {
            n_blocks: c.n_blocks,
            per_block: c.block_params() as u64,
            non_block: v * d + pos + d + d * v,
        }
    }

    pub fn total(&self) -> u64 {
        self.non_block + self.n_blocks as u64 * self.per_block
    }

    /// Share of all parameters still needed after dropping `k` blocks.
    pub fn surviving_fraction(&self, k: usize) -> f64 {
        let kept = self.total() - k.min(self.n_blocks) as u64 * self.per_block;
        kept as f64 / self.total() as f64
    }
}
