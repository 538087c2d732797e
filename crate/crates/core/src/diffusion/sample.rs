use geomlab_numerics::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{forward, Denoiser};
use crate::error::{invalid, Result};
use crate::image::GrayImage;

pub const DEFAULT_GUIDANCE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Guidance scale `s` in `ε̃ = ε_neg + s·(ε_pos − ε_neg)`.
    pub scale: f64,
    /// Reverse steps, evenly respaced over the training schedule.
    pub steps: usize,
    pub seed: u64,
    /// Images denoised together.
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_GUIDANCE,
            steps: 50,
            seed: 0,
            batch: 50,
        }
    }
}

fn model_to_image(side: usize, z: &[f32]) -> GrayImage {
    let data = z.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    GrayImage::new(side, side, data).expect("side² values")
}

/// Ancestral sampling with negative-prompt guidance. Image `i` uses its own
/// random stream, so results do not depend on batching.
pub fn sample(model: &Denoiser, cfg: &SampleConfig, positives: &[Vec<usize>], negatives: &[Vec<usize>]) -> Result<Vec<GrayImage>> {
    if positives.len() != negatives.len() {
        return Err(invalid(format!(
            "{} positive captions but {} negative ones",
            positives.len(),
            negatives.len()
        )));
    }
    if cfg.scale < 0.0 || !cfg.scale.is_finite() {
        return Err(invalid(format!("guidance scale {} must be non-negative", cfg.scale)));
    }
    let len = model.config.max_len;
    if let Some(bad) = positives.iter().chain(negatives).find(|c| c.len() != len) {
        return Err(invalid(format!("captions must be padded to {len} tokens, got {}", bad.len())));
    }
    let mut out = Vec::with_capacity(positives.len());
    let chunk = cfg.batch.max(1);
    for start in (0..positives.len()).step_by(chunk) {
        let end = (start + chunk).min(positives.len());
        out.extend(sample_chunk(model, cfg, start, &positives[start..end], &negatives[start..end])?);
    }
    Ok(out)
}

fn sample_chunk(
    model: &Denoiser,
    cfg: &SampleConfig,
    first: usize,
    pos: &[Vec<usize>],
    neg: &[Vec<usize>],
) -> Result<Vec<GrayImage>> {
    let side = model.config.image_size;
    let per = side * side;
    let n = pos.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream((first + i) as u64);
            r
        })
        .collect();
    let mut z: Vec<f32> = Vec::with_capacity(n * per);
    for r in &mut rngs {
        z.extend((0..per).map(|_| -> f32 { StandardNormal.sample(r) }));
    }
    let pos_tokens: Vec<usize> = pos.concat();
    let neg_tokens: Vec<usize> = neg.concat();
    let sched = &model.schedule;
    let ts = sched.respaced(cfg.steps);
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, cfg.scale, &z, t, &pos_tokens, &neg_tokens)?;
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        for (i, r) in rngs.iter_mut().enumerate() {
            for j in i * per..(i + 1) * per {
                let x = z[j] as f64;
                let x0 = ((x - (1.0 - ab).sqrt() * eps[j] as f64) / ab.sqrt()).clamp(-1.0, 1.0);
                let mut next = c0 * x0 + ct * x;
                if t_prev > 0 {
                    let noise: f64 = StandardNormal.sample(r);
                    next += var.sqrt() * noise;
                }
                z[j] = next as f32;
            }
        }
    }
    Ok(z.chunks(per).map(|c| model_to_image(side, c)).collect())
}

fn guided_eps(model: &Denoiser, s: f64, z: &[f32], t: usize, pos: &[usize], neg: &[usize]) -> Result<Vec<f32>> {
    let n = z.len() / (model.config.image_size * model.config.image_size);
    let ts = vec![t; n];
    if s == 1.0 {
        return model.predict(z, &ts, pos);
    }
    if s == 0.0 {
        return model.predict(z, &ts, neg);
    }
    let zz = [z, z].concat();
    let tokens = [pos, neg].concat();
    let both = model.predict(&zz, &vec![t; 2 * n], &tokens)?;
    let (ep, en) = both.split_at(z.len());
    let s = s as f32;
    Ok(ep.iter().zip(en).map(|(p, q)| q + s * (p - q)).collect())
}

/// Cross-attention from every bottleneck position to one caption token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub side: usize,
    /// Raw softmax weight per spatial query, row-major.
    pub mass: Vec<f32>,
    /// `mass` divided by its maximum (all zeros when the token gets no weight).
    pub normalized: Vec<f32>,
}

impl AttentionMap {
    pub fn total(&self) -> f64 {
        self.mass.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.mass.len() as f64
    }
}

/// Attention map of caption token `position` at state `z_t` (model space).
pub fn attention_map(model: &Denoiser, z_t: &[f32], t: usize, caption: &[usize], position: usize) -> Result<AttentionMap> {
    let len = model.config.max_len;
    if position >= len {
        return Err(invalid(format!("token position {position} outside caption of length {len}")));
    }
    if caption.len() != len {
        return Err(invalid(format!("caption must be padded to {len} tokens")));
    }
    model.schedule.alpha_bar(t);
    if t == 0 || t > model.schedule.steps {
        return Err(invalid(format!("timestep {t} outside [1, {}]", model.schedule.steps)));
    }
    let side = model.config.image_size;
    let mut g = Graph::new();
    let x = g.input(Tensor::new([1, 1, side, side], z_t.to_vec())?)?;
    let out = forward(&model.config, &model.params, &mut g, x, &[t], caption)?;
    let w = g.value(out.attn).data();
    let q_side = model.config.bottleneck_side();
    let mass: Vec<f32> = (0..q_side * q_side).map(|q| w[q * len + position]).collect();
    let max = mass.iter().cloned().fold(0.0f32, f32::max);
    let normalized = mass.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(AttentionMap {
        side: q_side,
        mass,
        normalized,
    })
}
