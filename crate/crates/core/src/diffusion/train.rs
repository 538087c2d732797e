use geomlab_numerics::{AdamConfig, AdamState, Element, Graph, NumericsError, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{forward, Denoiser, DenoiserConfig};
use super::schedule::{mix, NoiseSchedule};
use crate::error::{invalid, GeomError, Result};
use crate::geometry::WeightMode;
use crate::vocab::empty_caption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Every parameter is trained.
    DataRemoval,
    /// Only token rows appended after pretraining are trained.
    ModelRemoval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub weight_mode: WeightMode,
    pub alpha: f64,
    pub threshold: f64,
    /// Probability of replacing a caption by the unconditional one.
    pub uncond_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::DataRemoval,
            batch_size: 32,
            lr: 3e-3,
            steps: 800,
            weight_mode: WeightMode::Intent,
            alpha: 0.25,
            threshold: 0.5,
            uncond_prob: 0.1,
            seed: 0,
        }
    }
}

/// One training image in model space (`[-1, 1]`) with its padded caption and
/// optional per-pixel loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub image: Vec<f32>,
    pub tokens: Vec<usize>,
    pub weights: Option<Vec<f32>>,
}

/// Everything random about one optimizer step, fixed up front.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub ids: Vec<String>,
    pub z0: Vec<f32>,
    pub eps: Vec<f32>,
    pub ts: Vec<usize>,
    pub tokens: Vec<usize>,
    pub weights: Option<Vec<f32>>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Draws timesteps, noise and caption dropout for the given examples.
    pub fn draw<R: Rng + ?Sized>(
        examples: &[&TrainExample],
        schedule: &NoiseSchedule,
        uncond_prob: f64,
        rng: &mut R,
    ) -> Self {
        let mut b = StepBatch {
            ids: Vec::new(),
            z0: Vec::new(),
            eps: Vec::new(),
            ts: Vec::new(),
            tokens: Vec::new(),
            weights: None,
        };
        let weighted = examples.iter().any(|e| e.weights.is_some());
        let mut weights = Vec::new();
        for ex in examples {
            b.ids.push(ex.id.clone());
            b.z0.extend_from_slice(&ex.image);
            b.eps.extend((0..ex.image.len()).map(|_| -> f32 { StandardNormal.sample(rng) }));
            b.ts.push(rng.random_range(1..=schedule.steps));
            let drop = uncond_prob > 0.0 && rng.random::<f64>() < uncond_prob;
            if drop {
                let mut empty = empty_caption();
                empty.resize(ex.tokens.len(), 0);
                b.tokens.extend(empty);
            } else {
                b.tokens.extend_from_slice(&ex.tokens);
            }
            if weighted {
                match &ex.weights {
                    Some(w) => weights.extend_from_slice(w),
                    None => weights.extend(std::iter::repeat_n(1.0, ex.image.len())),
                }
            }
        }
        if weighted {
            b.weights = Some(weights);
        }
        b
    }
}

/// Re-weighted denoising loss `mean(w ⊙ (ε − ε_θ(z_t, t, c))²)` for one batch.
pub fn loss_graph<F: Element>(
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    params: &ParamSet<F>,
    g: &mut Graph<F>,
    batch: &StepBatch,
) -> Result<Var> {
    let side = cfg.image_size;
    let shape = [batch.len(), 1, side, side];
    let per = side * side;
    let mut zt = Vec::with_capacity(batch.z0.len());
    for (i, &t) in batch.ts.iter().enumerate() {
        let r = i * per..(i + 1) * per;
        zt.extend(mix(&batch.z0[r.clone()], &batch.eps[r], schedule.alpha_bar(t)));
    }
    let to_f = |v: &[f32]| -> Result<Tensor<F>> {
        Ok(Tensor::new(shape, v.iter().map(|&x| F::from_f64_lossy(x as f64)).collect())?)
    };
    let x = g.input(to_f(&zt)?)?;
    let target = g.input(to_f(&batch.eps)?)?;
    let weight = match &batch.weights {
        Some(w) => Some(g.input(to_f(w)?)?),
        None => None,
    };
    let out = forward(cfg, params, g, x, &batch.ts, &batch.tokens)?;
    Ok(g.weighted_mse(out.eps, target, weight)?)
}

/// Loss, backward pass and one Adam update. Non-finite values abort with the
/// step, learning rate and batch ids.
pub fn train_step<F: Element>(
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    params: &mut ParamSet<F>,
    adam: &mut AdamState<F>,
    batch: &StepBatch,
) -> Result<f64> {
    let diverged = || GeomError::Diverged {
        step: adam.step_count() as usize + 1,
        lr: adam.config.lr,
        batch: batch.ids.clone(),
    };
    params.zero_grad();
    let mut g = Graph::new();
    let loss = match loss_graph(cfg, schedule, params, &mut g, batch) {
        Err(GeomError::Numerics(NumericsError::NonFinite { .. })) => return Err(diverged()),
        other => other?,
    };
    let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(diverged());
    }
    g.backward(loss, params)?;
    adam.step(params)?;
    Ok(value)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs `cfg.steps` optimizer steps over uniformly drawn mini-batches.
/// `on_step` sees the 0-based step, its loss and the updated parameters.
pub fn train(
    model: &mut Denoiser,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64, &ParamSet<f32>),
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(invalid("no training examples"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let uncond = match cfg.mode {
        TrainMode::DataRemoval => {
            model.params.set_all_trainable(true);
            cfg.uncond_prob
        }
        TrainMode::ModelRemoval => {
            let chunks = model.embedding_chunks();
            if chunks.len() < 2 {
                return Err(invalid("tokens-only training needs an extended vocabulary"));
            }
            model.train_only(&chunks[1..])?;
            0.0
        }
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let picks: Vec<&TrainExample> = (0..cfg.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let batch = StepBatch::draw(&picks, &model.schedule, uncond, &mut rng);
        let loss = train_step(&model.config, &model.schedule, &mut model.params, &mut adam, &batch)?;
        report.losses.push(loss);
        on_step(step, loss, &model.params);
    }
    model.params.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn setup() -> (Denoiser, Vec<TrainExample>) {
        let cfg = DenoiserConfig::tiny();
        let model = Denoiser::new(cfg.clone(), NoiseSchedule::default(), Vocab::base(), 3).unwrap();
        let mut tokens = model.vocab.encode("a dark circle on plain").unwrap();
        tokens.resize(cfg.max_len, 0);
        let examples = (0..4)
            .map(|i| TrainExample {
                id: format!("x{i}"),
                image: (0..64).map(|j| ((i * 64 + j) as f32 * 0.1).sin()).collect(),
                tokens: tokens.clone(),
                weights: None,
            })
            .collect();
        (model, examples)
    }

    #[test]
    fn initial_loss_is_near_one() {
        let (model, examples) = setup();
        let refs: Vec<&TrainExample> = examples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = StepBatch::draw(&refs, &model.schedule, 0.0, &mut rng);
        let mut g = Graph::new();
        let l = loss_graph(&model.config, &model.schedule, &model.params, &mut g, &batch).unwrap();
        let v = g.value(l).data()[0];
        assert!((v - 1.0).abs() < 0.3, "{v}");
    }

    #[test]
    fn training_reduces_loss_and_respects_model_removal() {
        let (mut model, examples) = setup();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            lr: 5e-3,
            ..Default::default()
        };
        let report = train(&mut model, &examples, &cfg, |_, _, _| {}).unwrap();
        assert!(report.tail_mean(10) < report.losses[0]);

        let before = model.params.clone();
        let err = train(&mut model, &examples, &TrainConfig { mode: TrainMode::ModelRemoval, ..cfg.clone() }, |_, _, _| {});
        assert!(err.is_err());
        let new = model
            .extend_vocab(&[crate::vocab::ConceptKind::Qr], None, 1)
            .unwrap();
        train(&mut model, &examples, &TrainConfig { mode: TrainMode::ModelRemoval, ..cfg }, |_, _, _| {}).unwrap();
        for (name, t, _) in before.iter() {
            assert!(t.data().iter().zip(model.params.get(name).unwrap().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(model.params.get(&new).is_ok());
    }
}
