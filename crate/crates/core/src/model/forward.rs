use super::tensor::{add_in_place, gelu, log_softmax_in_place, matmul, rms_norm};
use super::{PositionKind, PrunedView, TokenSequence, TransformerBlock};
use crate::error::{Error, Result};

const ROPE_BASE: f32 = 10_000.0;

/// `T x vocab` table; row `i` holds `log p(. | z_1..z_{i+1})` (0-based rows).
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTable {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl LogProbTable {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// `log p(token | context)` where the context is the first `i + 1` tokens.
    pub fn get(&self, i: usize, token: u32) -> f32 {
        self.data[i * self.vocab + token as usize]
    }
}

/// Per-block key/value history for incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_blocks],
            values: vec![Vec::new(); n_blocks],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Full-sequence forward pass returning normalized log-probabilities.
pub fn forward_logprobs(view: &PrunedView<'_>, z: &TokenSequence) -> Result<LogProbTable> {
    let mut cache = KvCache::new(view.blocks().len());
    let mut data = forward_chunk(view, z.tokens(), &mut cache)?;
    let vocab = view.config.vocab_size;
    for row in data.chunks_exact_mut(vocab) {
        log_softmax_in_place(row);
    }
    Ok(LogProbTable {
        rows: z.len(),
        vocab,
        data,
    })
}

/// Runs `tokens` at positions `cache.len()..`, appending to the cache; returns raw logits.
pub(crate) fn forward_chunk(view: &PrunedView<'_>, tokens: &[u32], cache: &mut KvCache) -> Result<Vec<f32>> {
    let cfg = view.config;
    let d = cfg.d_model;
    let start = cache.len;
    let n = tokens.len();
    if view.blocks().is_empty() {
        return Err(Error::EmptyModel(cfg.n_blocks));
    }
    if cache.keys.len() != view.blocks().len() {
        return Err(Error::Shape("cache was built for a different view".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id,
            vocab: cfg.vocab_size,
        });
    }
    if cfg.position == PositionKind::Learned && start + n > cfg.max_positions {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} tokens exceeds the {}-position context",
            start + n,
            cfg.max_positions
        )));
    }

    let mut x = vec![0.0f32; n * d];
    for (r, &t) in tokens.iter().enumerate() {
        let row = &mut x[r * d..(r + 1) * d];
        row.copy_from_slice(view.globals.token_embedding.row(t as usize));
        if let Some(pos) = &view.globals.position_embedding {
            add_in_place(row, pos.row(start + r));
        }
    }

    for (layer, block) in view.blocks().iter().enumerate() {
        block_forward(
            view,
            block,
            &mut x,
            n,
            start,
            &mut cache.keys[layer],
            &mut cache.values[layer],
        );
    }
    cache.len += n;

    let h = rms_norm(&x, d, &view.globals.final_norm);
    Ok(matmul(&h, n, &view.globals.output_head))
}

fn block_forward(
    view: &PrunedView<'_>,
    block: &TransformerBlock,
    x: &mut [f32],
    n: usize,
    start: usize,
    key_cache: &mut Vec<f32>,
    value_cache: &mut Vec<f32>,
) {
    let cfg = view.config;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();

    let h = rms_norm(x, d, &block.attn_norm);
    let mut q = matmul(&h, n, &block.wq);
    let mut k = matmul(&h, n, &block.wk);
    let v = matmul(&h, n, &block.wv);
    if cfg.position == PositionKind::Rotary {
        for r in 0..n {
            apply_rope(&mut q[r * d..(r + 1) * d], start + r, heads, hd);
            apply_rope(&mut k[r * d..(r + 1) * d], start + r, heads, hd);
        }
    }
    key_cache.extend_from_slice(&k);
    value_cache.extend_from_slice(&v);

    let scale = 1.0 / (hd as f32).sqrt();
    let mut ctx = vec![0.0f32; n * d];
    let mut scores = Vec::with_capacity(start + n);
    for r in 0..n {
        let pos = start + r;
        for head in 0..heads {
            let off = head * hd;
            let qh = &q[r * d + off..r * d + off + hd];
            scores.clear();
            for j in 0..=pos {
                let kh = &key_cache[j * d + off..j * d + off + hd];
                let dot: f32 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                scores.push(dot * scale);
            }
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let out = &mut ctx[r * d + off..r * d + off + hd];
            for (j, &w) in scores.iter().enumerate() {
                let vh = &value_cache[j * d + off..j * d + off + hd];
                let w = w / total;
                for (o, &b) in out.iter_mut().zip(vh) {
                    *o += w * b;
                }
            }
        }
    }
    let attn = matmul(&ctx, n, &block.wo);
    add_in_place(x, &attn);

    let h = rms_norm(x, d, &block.ffn_norm);
    let mut up = matmul(&h, n, &block.w_up);
    for u in up.iter_mut() {
        *u = gelu(*u);
    }
    let down = matmul(&up, n, &block.w_down);
    add_in_place(x, &down);
}

fn apply_rope(row: &mut [f32], pos: usize, heads: usize, hd: usize) {
    for head in 0..heads {
        let base = head * hd;
        for i in 0..hd / 2 {
            let theta = pos as f32 * ROPE_BASE.powf(-2.0 * i as f32 / hd as f32);
            let (sin, cos) = theta.sin_cos();
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * cos - b * sin;
            row[base + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Lowest id among the maxima.
fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn last_row_argmax(mut logits: Vec<f32>, vocab: usize) -> u32 {
    let n = logits.len() / vocab;
    let row = &mut logits[(n - 1) * vocab..];
    log_softmax_in_place(row);
    argmax(row)
}

/// Incremental greedy generator over a pruned view, backed by a KV cache.
pub struct Generator<'v, 'a> {
    view: &'v PrunedView<'a>,
    cache: KvCache,
}

impl<'v, 'a> Generator<'v, 'a> {
    pub fn new(view: &'v PrunedView<'a>) -> Self {
        Self {
            view,
            cache: KvCache::new(view.blocks().len()),
        }
    }

    /// Processes the whole prompt; returns the first generated token.
    pub fn prefill(&mut self, prompt: &TokenSequence) -> Result<u32> {
        let logits = forward_chunk(self.view, prompt.tokens(), &mut self.cache)?;
        Ok(last_row_argmax(logits, self.view.config.vocab_size))
    }

    /// Feeds one token; returns the next greedy token.
    pub fn step(&mut self, token: u32) -> Result<u32> {
        let logits = forward_chunk(self.view, &[token], &mut self.cache)?;
        Ok(last_row_argmax(logits, self.view.config.vocab_size))
    }

    /// Whether another token fits in the context window.
    pub fn has_room(&self) -> bool {
        self.view.config.position != PositionKind::Learned || self.cache.len < self.view.config.max_positions
    }
}

/// Appends up to `max_new` argmax tokens. Stops early at the context limit.
pub fn greedy_decode(view: &PrunedView<'_>, prompt: &TokenSequence, max_new: usize) -> Result<TokenSequence> {
    let mut out = prompt.clone();
    if max_new == 0 {
        return Ok(out);
    }
    let mut generator = Generator::new(view);
    let mut next = generator.prefill(prompt)?;
    out.push(next);
    for _ in 1..max_new {
        if !generator.has_room() {
            break;
        }
        next = generator.step(next)?;
        out.push(next);
    }
    Ok(out)
}

/// Reference decode that re-runs the full forward pass for every token.
pub fn greedy_decode_uncached(view: &PrunedView<'_>, prompt: &TokenSequence, max_new: usize) -> Result<TokenSequence> {
    let mut out = prompt.clone();
    for _ in 0..max_new {
        if view.config.position == PositionKind::Learned && out.len() >= view.config.max_positions {
            break;
        }
        let table = forward_logprobs(view, &out)?;
        out.push(argmax(table.row(table.rows - 1)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{apply_omission, ModelConfig, OmissionSet, TransformerBlock, TransformerModel};
    use super::*;
    use crate::model::tensor::NORM_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, position: PositionKind) -> TransformerModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::tiny(16, 8, 4);
        cfg.n_heads = 2;
        cfg.position = position;
        TransformerModel::random(cfg, 0.3, &mut rng)
    }

    fn seq(tokens: &[u32]) -> TokenSequence {
        TokenSequence::new(tokens.to_vec()).unwrap()
    }

    #[test]
    fn rows_are_normalized() {
        for kind in [PositionKind::Learned, PositionKind::Rotary] {
            let m = random_model(3, kind);
            let t = forward_logprobs(&m.dense_view(), &seq(&[1, 5, 9, 2, 15, 0])).unwrap();
            for i in 0..t.rows {
                let total: f64 = t.row(i).iter().map(|&v| (v as f64).exp()).sum();
                assert!((total - 1.0).abs() < 1e-5, "row {i} sums to {total}");
            }
        }
    }

    #[test]
    fn zeroed_blocks_reduce_to_embedding_head_path() {
        let mut m = random_model(4, PositionKind::Learned);
        let cfg = m.config;
        m.blocks = (1..=4).map(|i| TransformerBlock::zeros(&cfg, i)).collect();
        let z = seq(&[3, 7, 7, 1]);
        let t = forward_logprobs(&m.dense_view(), &z).unwrap();
        let pos = m.globals.position_embedding.as_ref().unwrap();
        for (i, &tok) in z.tokens().iter().enumerate() {
            let x: Vec<f32> = (0..8)
                .map(|c| m.globals.token_embedding.get(tok as usize, c) + pos.get(i, c))
                .collect();
            let ms = x.iter().map(|v| v * v).sum::<f32>() / 8.0;
            let h: Vec<f32> = x.iter().map(|v| v / (ms + NORM_EPS).sqrt()).collect();
            let mut logits: Vec<f64> = (0..16)
                .map(|v| (0..8).map(|c| (h[c] * m.globals.output_head.get(c, v)) as f64).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lz = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            logits.iter_mut().for_each(|l| *l -= lz);
            for v in 0..16 {
                assert!((t.get(i, v as u32) as f64 - logits[v]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let m = random_model(5, PositionKind::Rotary);
        let a = forward_logprobs(&m.dense_view(), &seq(&[1, 2, 3, 4, 5])).unwrap();
        let b = forward_logprobs(&m.dense_view(), &seq(&[1, 2, 3, 11, 12])).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn empty_omission_matches_dense_bit_for_bit() {
        let m = random_model(6, PositionKind::Learned);
        let z = seq(&[4, 4, 8, 15]);
        let dense = forward_logprobs(&m.dense_view(), &z).unwrap();
        let view = apply_omission(&m, &OmissionSet::empty()).unwrap();
        assert_eq!(dense, forward_logprobs(&view, &z).unwrap());
    }

    #[test]
    fn vocabulary_and_context_errors() {
        let m = random_model(7, PositionKind::Learned);
        let err = forward_logprobs(&m.dense_view(), &seq(&[1, 16])).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 16, vocab: 16 }));
        let long = seq(&vec![1; 65]);
        assert!(forward_logprobs(&m.dense_view(), &long).is_err());
    }

    #[test]
    fn cached_decode_is_bit_identical_to_uncached() {
        for kind in [PositionKind::Learned, PositionKind::Rotary] {
            let m = random_model(8, kind);
            let view = apply_omission(&m, &OmissionSet::new([2]).unwrap()).unwrap();
            let p = seq(&[3, 1, 4, 1, 5]);
            let cached = greedy_decode(&view, &p, 12).unwrap();
            let uncached = greedy_decode_uncached(&view, &p, 12).unwrap();
            assert_eq!(cached, uncached);
            assert_eq!(cached.len(), 17);
        }
    }

    #[test]
    fn cached_logits_equal_full_forward_logits() {
        let m = random_model(9, PositionKind::Rotary);
        let view = m.dense_view();
        let tokens = [2u32, 7, 1, 8, 2, 8];
        let mut full_cache = KvCache::new(4);
        let full = forward_chunk(&view, &tokens, &mut full_cache).unwrap();
        let mut cache = KvCache::new(4);
        let mut inc = forward_chunk(&view, &tokens[..3], &mut cache).unwrap();
        for &t in &tokens[3..] {
            inc.extend(forward_chunk(&view, &[t], &mut cache).unwrap());
        }
        assert_eq!(full, inc);
    }

    #[test]
    fn decode_zero_new_and_determinism() {
        let m = random_model(10, PositionKind::Learned);
        let p = seq(&[9, 9]);
        assert_eq!(greedy_decode(&m.dense_view(), &p, 0).unwrap(), p);
        let a = greedy_decode(&m.dense_view(), &p, 6).unwrap();
        let b = greedy_decode(&m.dense_view(), &p, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_matches_manual_argmax_steps() {
        let m = random_model(11, PositionKind::Learned);
        let view = m.dense_view();
        let mut manual = seq(&[1, 2, 3]);
        for _ in 0..5 {
            let t = forward_logprobs(&view, &manual).unwrap();
            let row = t.row(t.rows - 1);
            let mut best = 0usize;
            for v in 1..row.len() {
                if row[v] > row[best] {
                    best = v;
                }
            }
            manual.push(best as u32);
        }
        assert_eq!(greedy_decode(&view, &seq(&[1, 2, 3]), 5).unwrap(), manual);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
    }
}
