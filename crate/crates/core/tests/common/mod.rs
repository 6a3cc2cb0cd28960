#![allow(dead_code)]

use pudding::model::{PositionKind, TransformerModel};
use pudding::router::{LossMode, RouterModel, RouterSample};

/// Straight-line f64 forward pass over the whole sequence: per-position
/// log-probabilities of the next token, skipping blocks in `omit` (1-based).
pub fn reference_logprobs(model: &TransformerModel, omit: &[usize], tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &model.config;
    let (d, v, heads) = (c.d_model, c.vocab_size, c.n_heads);
    let hd = d / heads;
    let n = tokens.len();
    let f = |x: f32| x as f64;

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..d)
                .map(|i| {
                    let pos = match &model.globals.position_embedding {
                        Some(m) => f(m.get(p, i)),
                        None => 0.0,
                    };
                    f(model.globals.token_embedding.get(t as usize, i)) + pos
                })
                .collect()
        })
        .collect();

    let norm = |row: &[f64], gain: &[f32]| -> Vec<f64> {
        let ms = row.iter().map(|a| a * a).sum::<f64>() / row.len() as f64;
        let s = 1.0 / (ms + 1e-5).sqrt();
        row.iter().zip(gain).map(|(a, g)| a * s * f(*g)).collect()
    };
    let lin = |row: &[f64], w: &pudding::model::Matrix| -> Vec<f64> {
        (0..w.cols)
            .map(|j| (0..w.rows).map(|i| row[i] * f(w.get(i, j))).sum())
            .collect()
    };
    let rope = |row: &mut [f64], pos: usize| {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / hd as f64);
                let (a, b) = (row[h * hd + 2 * i], row[h * hd + 2 * i + 1]);
                row[h * hd + 2 * i] = a * theta.cos() - b * theta.sin();
                row[h * hd + 2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    };
    let gelu = |u: f64| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh());

    for block in model.blocks.iter().filter(|b| !omit.contains(&b.block_index)) {
        let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &block.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &block.wq)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &block.wk)).collect();
        let val: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &block.wv)).collect();
        if c.position == PositionKind::Rotary {
            for p in 0..n {
                rope(&mut q[p], p);
                rope(&mut k[p], p);
            }
        }
        for p in 0..n {
            let mut ctx = vec![0.0; d];
            for head in 0..heads {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<f64> = (0..=p)
                    .map(|j| {
                        q[p][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for i in r.clone() {
                        ctx[i] += w * val[j][i];
                    }
                }
            }
            let o = lin(&ctx, &block.wo);
            x[p].iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        for row in x.iter_mut() {
            let h = norm(row, &block.ffn_norm);
            let up: Vec<f64> = lin(&h, &block.w_up).into_iter().map(gelu).collect();
            let down = lin(&up, &block.w_down);
            row.iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
    }

    x.iter()
        .map(|row| {
            let logits = lin(&norm(row, &model.globals.final_norm), &model.globals.output_head);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lz = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            assert_eq!(logits.len(), v);
            logits.into_iter().map(|l| l - lz).collect()
        })
        .collect()
}

/// Per parameter group: `(name, max relative error, elements)` between the
/// analytic gradient and central differences with step `h`.
pub fn gradient_check(
    router: &RouterModel,
    batch: &[&RouterSample],
    mode: LossMode,
    h: f64,
) -> Vec<(&'static str, f64, usize)> {
    let (_, analytic) = router.loss_and_grad(batch, mode).unwrap();
    let analytic: Vec<(&'static str, Vec<f64>)> = analytic.groups().into_iter().map(|(n, g)| (n, g.clone())).collect();
    let mut out = Vec::new();
    for (gi, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let eval = |delta: f64| {
                let mut r = router.clone();
                r.params.groups_mut()[gi].1[i] += delta;
                r.loss(batch, mode).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad[i];
            let scale = a.abs().max(numeric.abs());
            // both effectively zero: compare absolutely
            let err = if scale < 1e-7 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
        out.push((*name, worst, grad.len()));
    }
    out
}
