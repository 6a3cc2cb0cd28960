//! Minimal pre-norm decoder-only transformer with per-call block omission.

mod forward;
pub mod io;
pub mod tensor;
pub mod tokenizer;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use forward::{forward_logprobs, greedy_decode, greedy_decode_uncached, Generator, KvCache, LogProbTable};
pub use tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    /// Learned absolute position table added to the token embedding.
    Learned,
    /// Rotary embedding applied to queries and keys.
    Rotary,
}

impl PositionKind {
    pub fn code(self) -> u32 {
        match self {
            PositionKind::Learned => 0,
            PositionKind::Rotary => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(PositionKind::Learned),
            1 => Ok(PositionKind::Rotary),
            other => Err(Error::Format(format!("unknown position kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub position: PositionKind,
    /// Length of the learned position table; also the context limit.
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize, d_model: usize, n_blocks: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            d_ff: 2 * d_model,
            n_blocks,
            n_heads: 1,
            position: PositionKind::Learned,
            max_positions: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Shape(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_blocks == 0 || self.n_heads == 0 {
            return bad("vocab_size, d_model, n_blocks and n_heads must be positive");
        }
        if self.d_ff < self.d_model {
            return bad("d_ff must be at least d_model");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.position == PositionKind::Rotary && !self.head_dim().is_multiple_of(2) {
            return bad("rotary positions need an even head dimension");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        Ok(())
    }

    /// Number of f32 values stored per block.
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 2 * d * self.d_ff
    }
}

/// Weights of one residual block (attention + feed-forward, both pre-norm).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    /// 1-based position of the block in the dense model.
    pub block_index: usize,
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl TransformerBlock {
    pub fn zeros(config: &ModelConfig, block_index: usize) -> Self {
        let d = config.d_model;
        Self {
            block_index,
            attn_norm: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![1.0; d],
            w_up: Matrix::zeros(d, config.d_ff),
            w_down: Matrix::zeros(config.d_ff, d),
        }
    }

    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, block_index: usize, std: f32, rng: &mut R) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        Self {
            block_index,
            attn_norm: (0..d).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect(),
            wq: Matrix::random(d, d, std, rng),
            wk: Matrix::random(d, d, std, rng),
            wv: Matrix::random(d, d, std, rng),
            wo: Matrix::random(d, d, std, rng),
            ffn_norm: (0..d).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect(),
            w_up: Matrix::random(d, f, std, rng),
            w_down: Matrix::random(f, d, std, rng),
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let ok = self.attn_norm.len() == d
            && self.ffn_norm.len() == d
            && [&self.wq, &self.wk, &self.wv, &self.wo]
                .iter()
                .all(|m| m.rows == d && m.cols == d)
            && (self.w_up.rows, self.w_up.cols) == (d, config.d_ff)
            && (self.w_down.rows, self.w_down.cols) == (config.d_ff, d);
        if !ok {
            return Err(Error::Shape(format!(
                "block {} shapes do not match d_model={d}",
                self.block_index
            )));
        }
        let finite = self.attn_norm.iter().chain(&self.ffn_norm).all(|v| v.is_finite())
            && [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
                .iter()
                .all(|m| m.is_finite());
        if !finite {
            return Err(Error::Format(format!(
                "block {} has non-finite weights",
                self.block_index
            )));
        }
        Ok(())
    }
}

/// Weights outside the block stack. These stay resident for every prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalWeights {
    pub token_embedding: Matrix,
    /// Present only for [`PositionKind::Learned`].
    pub position_embedding: Option<Matrix>,
    pub final_norm: Vec<f32>,
    pub output_head: Matrix,
}

impl GlobalWeights {
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, std: f32, rng: &mut R) -> Self {
        let (v, d) = (config.vocab_size, config.d_model);
        Self {
            token_embedding: Matrix::random(v, d, 1.0, rng),
            position_embedding: (config.position == PositionKind::Learned)
                .then(|| Matrix::random(config.max_positions, d, 0.1, rng)),
            final_norm: vec![1.0; d],
            output_head: Matrix::random(d, v, std.max(0.1), rng),
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let (v, d) = (config.vocab_size, config.d_model);
        if (self.token_embedding.rows, self.token_embedding.cols) != (v, d)
            || (self.output_head.rows, self.output_head.cols) != (d, v)
            || self.final_norm.len() != d
        {
            return Err(Error::Shape("embedding/head/final norm shapes".into()));
        }
        match (&self.position_embedding, config.position) {
            (Some(p), PositionKind::Learned) if (p.rows, p.cols) == (config.max_positions, d) => {}
            (None, PositionKind::Rotary) => {}
            _ => return Err(Error::Shape("position embedding does not match position kind".into())),
        }
        let finite = self.token_embedding.is_finite()
            && self.output_head.is_finite()
            && self.final_norm.iter().all(|v| v.is_finite())
            && self.position_embedding.as_ref().is_none_or(|p| p.is_finite());
        if !finite {
            return Err(Error::Format("non-finite global weights".into()));
        }
        Ok(())
    }
}

/// The dense model: all `d` blocks plus embedding, final norm and head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub globals: GlobalWeights,
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, globals: GlobalWeights, blocks: Vec<TransformerBlock>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.n_blocks {
            return Err(Error::Shape(format!(
                "config declares {} blocks but {} were given",
                config.n_blocks,
                blocks.len()
            )));
        }
        globals.check(&config)?;
        for (i, b) in blocks.iter().enumerate() {
            if b.block_index != i + 1 {
                return Err(Error::Shape(format!(
                    "block at position {} has index {}",
                    i + 1,
                    b.block_index
                )));
            }
            b.check(&config)?;
        }
        Ok(Self {
            config,
            globals,
            blocks,
        })
    }

    /// Random weights; `std` scales the block matrices.
    pub fn random<R: Rng + ?Sized>(config: ModelConfig, std: f32, rng: &mut R) -> Self {
        let globals = GlobalWeights::random(&config, std, rng);
        let blocks = (1..=config.n_blocks)
            .map(|i| TransformerBlock::random(&config, i, std, rng))
            .collect();
        Self::new(config, globals, blocks).expect("random model is well formed")
    }

    pub fn n_blocks(&self) -> usize {
        self.config.n_blocks
    }

    /// Hex SHA-256 of the binary weight file encoding.
    pub fn hash(&self) -> String {
        io::hash_bytes(&io::encode_model(self))
    }

    pub fn dense_view(&self) -> PrunedView<'_> {
        PrunedView {
            config: &self.config,
            globals: &self.globals,
            blocks: self.blocks.iter().collect(),
        }
    }
}

/// Unordered set of 1-based block indices to drop, stored sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct OmissionSet(Vec<usize>);

impl OmissionSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Builds a set from 1-based indices; rejects zero and duplicates.
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        if v.first() == Some(&0) {
            return Err(Error::InvalidOmission("block indices are 1-based".into()));
        }
        if v.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidOmission(format!("duplicate index in {v:?}")));
        }
        Ok(Self(v))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.0.binary_search(&block).is_ok()
    }

    /// Copy of the set with `block` added.
    pub fn with(&self, block: usize) -> Self {
        let mut v = self.0.clone();
        if let Err(pos) = v.binary_search(&block) {
            v.insert(pos, block);
        }
        Self(v)
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if let Some(&bad) = self.0.iter().find(|&&i| i > n_blocks) {
            return Err(Error::InvalidOmission(format!(
                "block {bad} out of range 1..={n_blocks}"
            )));
        }
        if self.0.len() >= n_blocks {
            return Err(Error::EmptyModel(n_blocks));
        }
        Ok(())
    }

    /// Blocks of a `n_blocks` model that survive this omission, in order.
    pub fn survivors(&self, n_blocks: usize) -> Vec<usize> {
        (1..=n_blocks).filter(|i| !self.contains(*i)).collect()
    }
}

impl TryFrom<Vec<usize>> for OmissionSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OmissionSet> for Vec<usize> {
    fn from(s: OmissionSet) -> Self {
        s.0
    }
}

impl fmt::Display for OmissionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "}}")
    }
}

/// Non-empty list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InsufficientLength("token sequence must be non-empty".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn push(&mut self, token: u32) {
        self.0.push(token);
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::Vocabulary { id, vocab }),
            None => Ok(()),
        }
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(s: TokenSequence) -> Self {
        s.0
    }
}

/// Borrowed view of a model with some blocks skipped. Weights are shared, never copied.
#[derive(Debug, Clone)]
pub struct PrunedView<'a> {
    pub config: &'a ModelConfig,
    pub globals: &'a GlobalWeights,
    blocks: Vec<&'a TransformerBlock>,
}

impl<'a> PrunedView<'a> {
    /// Assembles a view from already-resident blocks; they must be in increasing index order.
    pub fn from_parts(
        config: &'a ModelConfig,
        globals: &'a GlobalWeights,
        blocks: Vec<&'a TransformerBlock>,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyModel(config.n_blocks));
        }
        if blocks.windows(2).any(|w| w[0].block_index >= w[1].block_index) {
            return Err(Error::InvalidOmission("view blocks must be in increasing order".into()));
        }
        Ok(Self {
            config,
            globals,
            blocks,
        })
    }

    pub fn blocks(&self) -> &[&'a TransformerBlock] {
        &self.blocks
    }

    pub fn block_indices(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.block_index).collect()
    }
}

/// View over the `d - |b|` surviving blocks, in original order.
pub fn apply_omission<'a>(model: &'a TransformerModel, omission: &OmissionSet) -> Result<PrunedView<'a>> {
    omission.validate(model.n_blocks())?;
    let blocks = model
        .blocks
        .iter()
        .filter(|b| !omission.contains(b.block_index))
        .collect();
    Ok(PrunedView {
        config: &model.config,
        globals: &model.globals,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize) -> TransformerModel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        TransformerModel::random(ModelConfig::tiny(16, 8, d), 0.1, &mut rng)
    }

    #[test]
    fn empty_omission_is_identity() {
        let m = model(4);
        let v = apply_omission(&m, &OmissionSet::empty()).unwrap();
        assert_eq!(v.block_indices(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn omission_keeps_survivors_in_order() {
        let m = model(4);
        let v = apply_omission(&m, &OmissionSet::new([3, 2]).unwrap()).unwrap();
        assert_eq!(v.block_indices(), vec![1, 4]);
        // shared, not copied
        assert!(std::ptr::eq(v.blocks()[0], &m.blocks[0]));
    }

    #[test]
    fn omitting_everything_is_rejected() {
        let m = model(4);
        let err = apply_omission(&m, &OmissionSet::new(1..=4).unwrap()).unwrap_err();
        assert!(matches!(err, Error::EmptyModel(4)));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let m = model(4);
        let err = apply_omission(&m, &OmissionSet::new([5]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InvalidOmission(_)));
        assert!(OmissionSet::new([0]).is_err());
        assert!(OmissionSet::new([2, 2]).is_err());
    }

    #[test]
    fn omission_set_serializes_as_sorted_list() {
        let s = OmissionSet::new([4, 1, 3]).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), "[1,3,4]");
        assert_eq!(s.to_string(), "{1,3,4}");
        assert_eq!(s.survivors(5), vec![2, 5]);
        assert!(serde_json::from_str::<OmissionSet>("[1,1]").is_err());
    }

    #[test]
    fn model_rejects_bad_shapes() {
        let m = model(2);
        let mut blocks = m.blocks.clone();
        blocks[1].block_index = 5;
        assert!(TransformerModel::new(m.config, m.globals.clone(), blocks).is_err());
        let mut cfg = m.config;
        cfg.d_ff = 4;
        assert!(cfg.validate().is_err());
    }
}
