use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_STEPS: usize = 200;

/// Linear-β DDPM schedule. Timesteps are 1-based; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, 1e-4, 0.02).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "schedule needs steps ≥ 1 and 0 < β_start ≤ β_end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t.min(self.steps) - 1]
        }
    }

    /// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε`.
    pub fn forward_noise(&self, z0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check(t)?;
        if z0.len() != eps.len() {
            return Err(invalid(format!("noise has {} values, image has {}", eps.len(), z0.len())));
        }
        Ok(mix(z0, eps, self.alpha_bar(t)))
    }

    /// Evenly spaced descending timesteps from `steps` to 1 for a shortened sampler.
    pub fn respaced(&self, count: usize) -> Vec<usize> {
        let count = count.clamp(1, self.steps);
        if count == 1 {
            return vec![self.steps];
        }
        let mut ts: Vec<usize> = (0..count)
            .map(|i| 1 + ((self.steps - 1) as f64 * i as f64 / (count - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

pub(crate) fn mix(z0: &[f32], eps: &[f32], alpha_bar: f64) -> Vec<f32> {
    let a = alpha_bar.sqrt() as f32;
    let b = (1.0 - alpha_bar).sqrt() as f32;
    z0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn timestep_range_is_checked() {
        let s = NoiseSchedule::default();
        assert!(s.forward_noise(&[0.0], 0, &[0.0]).is_err());
        assert!(s.forward_noise(&[0.0], 201, &[0.0]).is_err());
        assert!(s.forward_noise(&[0.0], 200, &[0.0]).is_ok());
    }

    #[test]
    fn limits_of_the_mix() {
        assert_eq!(mix(&[0.5, -0.2], &[3.0, 1.0], 1.0), vec![0.5, -0.2]);
        let z = mix(&[0.5, -0.2], &[3.0, 1.0], 1e-12);
        assert!((z[0] - 3.0).abs() < 1e-5 && (z[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn unit_variance_is_preserved() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        for t in [1, 50, 120, 200] {
            let z0: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = s.forward_noise(&z0, t, &e).unwrap();
            let m2 = z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n as f64;
            assert!((m2 - 1.0).abs() < 0.05, "t={t}: {m2}");
        }
    }

    #[test]
    fn respacing_hits_both_ends() {
        let s = NoiseSchedule::default();
        let ts = s.respaced(50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 200);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.respaced(1000).len(), 200);
    }
}
