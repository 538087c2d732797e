use std::fs;
use std::path::{Path, PathBuf};

use geomlab_numerics::{load_checkpoint, save_checkpoint, Element, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{invalid, GeomError, Result};
use crate::geometry::BinGrid;
use crate::vocab::{ConceptKind, Vocab, MAX_CAPTION_LEN, PAD_ID};

/// Standard deviation of freshly appended token rows.
pub const NEW_TOKEN_STD: f64 = 0.02;

const EMB_PREFIX: &str = "tok_emb.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Channels at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub max_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: [12, 24, 36],
            embed_dim: 32,
            attn_dim: 32,
            time_dim: 32,
            max_len: MAX_CAPTION_LEN,
        }
    }
}

impl DenoiserConfig {
    /// A very small network for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: [2, 3, 4],
            embed_dim: 4,
            attn_dim: 3,
            time_dim: 4,
            max_len: 6,
        }
    }

    pub fn bottleneck_side(&self) -> usize {
        self.image_size / 4
    }

    fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return Err(invalid(format!("image size {} must be a positive multiple of 4", self.image_size)));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.attn_dim == 0 || self.max_len == 0 {
            return Err(invalid("denoiser dimensions must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(invalid("time embedding width must be even"));
        }
        Ok(())
    }

    /// `(name, shape, init std)` of every parameter except token rows.
    fn layout(&self) -> Vec<(String, Vec<usize>, f64)> {
        let [c1, c2, c3] = self.channels;
        let (e, a, td) = (self.embed_dim, self.attn_dim, self.time_dim);
        let conv = |co: usize, ci: usize, k: usize| (vec![co, ci, k, k], (2.0 / (ci * k * k) as f64).sqrt());
        let lin = |i: usize, o: usize| (vec![i, o], (1.0 / i as f64).sqrt());
        let mut out = Vec::new();
        let mut add = |name: &str, (shape, std): (Vec<usize>, f64)| out.push((name.to_string(), shape, std));
        add("time.w1", lin(td, td));
        add("time.b1", (vec![td], 0.0));
        add("time.w2", lin(td, td));
        add("time.b2", (vec![td], 0.0));
        add("conv_in.w", conv(c1, 1, 3));
        add("conv_in.b", (vec![c1], 0.0));
        for (stage, ci, co) in [("enc1", c1, c1), ("enc2", c2, c2), ("mid", c3, c3), ("dec1", 2 * c2, c2), ("dec2", 2 * c1, c1)] {
            add(&format!("{stage}.w"), conv(co, ci, 3));
            add(&format!("{stage}.b"), (vec![co], 0.0));
            add(&format!("{stage}.t"), (vec![td, co], 0.1 * (1.0 / td as f64).sqrt()));
        }
        add("down1.w", conv(c2, c1, 3));
        add("down1.b", (vec![c2], 0.0));
        add("down2.w", conv(c3, c2, 3));
        add("down2.b", (vec![c3], 0.0));
        add("attn.q", lin(c3, a));
        let nq = self.bottleneck_side() * self.bottleneck_side();
        add("attn.qpos", (vec![nq, a], 0.3));
        add("attn.k", lin(e, a));
        add("attn.v", lin(e, a));
        add("attn.o", (vec![a, c3], 0.5 * (1.0 / a as f64).sqrt()));
        add("up1.w", (vec![c3, c2, 4, 4], (2.0 / (c3 * 4) as f64).sqrt()));
        add("up1.b", (vec![c2], 0.0));
        add("up2.w", (vec![c2, c1, 4, 4], (2.0 / (c2 * 4) as f64).sqrt()));
        add("up2.b", (vec![c1], 0.0));
        add("out.w", (vec![1, c1, 3, 3], 0.0));
        add("out.b", (vec![1], 0.0));
        add("pos_emb", (vec![self.max_len, e], 0.3));
        out
    }
}

fn emb_name(chunk: usize) -> String {
    format!("{EMB_PREFIX}{chunk:02}")
}

fn gaussian<F: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape.to_vec());
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::from_f64_lossy(normal.sample(rng))).collect())
        .expect("shape matches")
}

/// Sinusoidal features of 1-based timesteps, `[B, dim]`.
pub fn timestep_features<F: Element>(ts: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(F::from_f64_lossy((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(F::from_f64_lossy((t as f64 * freq).cos()));
        }
    }
    Tensor::new([ts.len(), dim], data).expect("shape matches")
}

/// Graph handles produced by one denoiser pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Predicted noise `[B, 1, H, W]`.
    pub eps: Var,
    /// Cross-attention weights `[B, queries, max_len]`.
    pub attn: Var,
}

/// One pass of the conditional U-Net. `x` is `[B,1,H,W]`, `ts` holds B
/// timesteps and `tokens` B padded captions laid end to end.
pub fn forward<F: Element>(
    cfg: &DenoiserConfig,
    params: &ParamSet<F>,
    g: &mut Graph<F>,
    x: Var,
    ts: &[usize],
    tokens: &[usize],
) -> Result<ForwardVars> {
    let bs = ts.len();
    let side = cfg.image_size;
    if g.shape(x) != [bs, 1, side, side] {
        return Err(invalid(format!("denoiser input {:?} but {} timesteps", g.shape(x), bs)));
    }
    if tokens.len() != bs * cfg.max_len {
        return Err(invalid(format!(
            "expected {} caption tokens, got {}",
            bs * cfg.max_len,
            tokens.len()
        )));
    }
    let [_, _, c3] = cfg.channels;
    let p = |g: &mut Graph<F>, name: &str| g.param(params, name);

    // timestep embedding
    let tf = g.input(timestep_features(ts, cfg.time_dim))?;
    let (w1, b1, w2, b2) = (p(g, "time.w1")?, p(g, "time.b1")?, p(g, "time.w2")?, p(g, "time.b2")?);
    let temb = g.linear(tf, w1, Some(b1))?;
    let temb = g.silu(temb)?;
    let temb = g.linear(temb, w2, Some(b2))?;
    let temb = g.silu(temb)?;

    let conv = |g: &mut Graph<F>, h: Var, stage: &str, stride: usize, timed: bool| -> Result<Var> {
        let w = g.param(params, &format!("{stage}.w"))?;
        let b = g.param(params, &format!("{stage}.b"))?;
        let mut y = g.conv2d(h, w, stride, 1)?;
        y = g.add_channel_bias(y, b)?;
        if timed {
            let tw = g.param(params, &format!("{stage}.t"))?;
            let tb = g.linear(temb, tw, None)?;
            y = g.add_channel_bias(y, tb)?;
        }
        Ok(g.silu(y)?)
    };
    let up = |g: &mut Graph<F>, h: Var, stage: &str| -> Result<Var> {
        let w = g.param(params, &format!("{stage}.w"))?;
        let b = g.param(params, &format!("{stage}.b"))?;
        let y = g.conv_transpose2d(h, w, 2, 1)?;
        let y = g.add_channel_bias(y, b)?;
        Ok(g.silu(y)?)
    };

    let h0 = conv(g, x, "conv_in", 1, false)?;
    let s1 = conv(g, h0, "enc1", 1, true)?;
    let h = conv(g, s1, "down1", 2, false)?;
    let s2 = conv(g, h, "enc2", 1, true)?;
    let h = conv(g, s2, "down2", 2, false)?;

    // cross-attention: bottleneck positions query the caption tokens
    let q_side = cfg.bottleneck_side();
    let nq = q_side * q_side;
    let hs = g.reshape(h, &[bs, c3, nq])?;
    let hs = g.transpose(hs)?;
    let wq = p(g, "attn.q")?;
    let q = g.linear(hs, wq, None)?;
    // learned offset per bottleneck position
    let qpos = p(g, "attn.qpos")?;
    let qpos = g.repeat_batch(qpos, bs)?;
    let q = g.add(q, qpos)?;
    let table = embedding_table(params, g)?;
    let e = g.embedding(table, tokens, &[bs, cfg.max_len])?;
    let pos = p(g, "pos_emb")?;
    let pos = g.repeat_batch(pos, bs)?;
    let e = g.add(e, pos)?;
    let (wk, wv, wo) = (p(g, "attn.k")?, p(g, "attn.v")?, p(g, "attn.o")?);
    let k = g.linear(e, wk, None)?;
    let v = g.linear(e, wv, None)?;
    let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
    let (a, attn) = g.masked_attention(q, k, v, Some(&keep))?;
    let o = g.linear(a, wo, None)?;
    let o = g.transpose(o)?;
    let o = g.reshape(o, &[bs, c3, q_side, q_side])?;
    let h = g.add(h, o)?;

    let h = conv(g, h, "mid", 1, true)?;
    let h = up(g, h, "up1")?;
    let h = g.concat(h, s2, 1)?;
    let h = conv(g, h, "dec1", 1, true)?;
    let h = up(g, h, "up2")?;
    let h = g.concat(h, s1, 1)?;
    let h = conv(g, h, "dec2", 1, true)?;
    let (ow, ob) = (p(g, "out.w")?, p(g, "out.b")?);
    let eps = g.conv2d(h, ow, 1, 1)?;
    let eps = g.add_channel_bias(eps, ob)?;
    Ok(ForwardVars { eps, attn })
}

/// Joins the embedding chunks in id order.
fn embedding_table<F: Element>(params: &ParamSet<F>, g: &mut Graph<F>) -> Result<Var> {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(EMB_PREFIX))
        .map(str::to_string)
        .collect();
    let mut table: Option<Var> = None;
    for name in names {
        let chunk = g.param(params, &name)?;
        table = Some(match table {
            None => chunk,
            Some(t) => g.concat(t, chunk, 0)?,
        });
    }
    table.ok_or_else(|| invalid("model has no token embedding"))
}

/// Conditional denoiser with its vocabulary and noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub vocab: Vocab,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, vocab: Vocab, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&config, vocab.len(), seed)?,
            config,
            schedule,
            vocab,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Names of the token-embedding chunks, oldest first.
    pub fn embedding_chunks(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with(EMB_PREFIX))
            .map(str::to_string)
            .collect()
    }

    /// Appends concept (and optionally location) tokens as a new embedding
    /// chunk; returns the chunk's parameter name.
    pub fn extend_vocab(&mut self, concepts: &[ConceptKind], grid: Option<&BinGrid>, seed: u64) -> Result<String> {
        let added = self.vocab.extend(concepts, grid)?;
        let name = emb_name(self.embedding_chunks().len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian(&[added.len(), self.config.embed_dim], NEW_TOKEN_STD, &mut rng);
        self.params.insert(name.clone(), rows, true)?;
        Ok(name)
    }

    /// Freezes everything except the named parameters.
    pub fn train_only(&mut self, names: &[String]) -> Result<()> {
        self.params.set_all_trainable(false);
        for n in names {
            self.params.set_trainable(n, true)?;
        }
        Ok(())
    }

    pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
        let mut vocab = path.as_os_str().to_owned();
        vocab.push(".vocab");
        let mut meta = path.as_os_str().to_owned();
        meta.push(".json");
        (vocab.into(), meta.into())
    }

    /// Writes the parameter checkpoint plus `.vocab` and `.json` sidecars.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(path, &self.params)?;
        let (vocab, meta) = Self::sidecar_paths(path);
        fs::write(vocab, self.vocab.to_tsv())?;
        let side = Sidecar {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
        };
        fs::write(meta, serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let params = load_checkpoint(path)?;
        let (vocab, meta) = Self::sidecar_paths(path);
        let vocab = Vocab::from_tsv(&fs::read_to_string(vocab)?)?;
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(meta)?)?;
        let model = Self {
            config: side.config,
            schedule: side.schedule,
            vocab,
            params,
        };
        let rows: usize = model
            .embedding_chunks()
            .iter()
            .map(|n| model.params.get(n).map(|t| t.shape()[0]))
            .sum::<std::result::Result<usize, _>>()?;
        if rows != model.vocab.len() {
            return Err(GeomError::Format(format!(
                "checkpoint has {rows} embedding rows but the vocabulary has {} tokens",
                model.vocab.len()
            )));
        }
        Ok(model)
    }

    /// Predicted noise for a batch; images are `[B·H·W]` in model space.
    pub fn predict(&self, z: &[f32], ts: &[usize], tokens: &[usize]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let side = self.config.image_size;
        let x = g.input(Tensor::new([ts.len(), 1, side, side], z.to_vec())?)?;
        let out = forward(&self.config, &self.params, &mut g, x, ts, tokens)?;
        Ok(g.value(out.eps).data().to_vec())
    }
}

pub(crate) fn init_params<F: Element>(cfg: &DenoiserConfig, vocab_len: usize, seed: u64) -> Result<ParamSet<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, std) in cfg.layout() {
        params.insert(name, gaussian(&shape, std, &mut rng), true)?;
    }
    params.insert(emb_name(0), gaussian(&[vocab_len, cfg.embed_dim], 0.3, &mut rng), true)?;
    Ok(params)
}
