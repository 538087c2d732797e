//! Metrics: implicit-concept ratio, a desk-scale Fréchet feature distance,
//! the combined F·R score, the prompt/presence correlation study and the
//! bootstrap expected-max statistic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::detector::TemplateDetector;
use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::vocab::ConceptKind;

pub const PROJECTION_DIM: usize = 24;
pub const POOL_SIDE: usize = 8;
pub const FEATURE_DIM: usize = PROJECTION_DIM + POOL_SIDE * POOL_SIDE;
pub const FRECHET_SHRINKAGE: f64 = 1e-6;

const PROJECTION_SEED: u64 = 0x6765_6f6d_6c61_62;

/// Fixed random projection plus 8×8 average pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    side: usize,
    projection: Vec<f32>,
}

impl FeatureExtractor {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 || side % POOL_SIDE != 0 {
            return Err(invalid(format!("image side {side} is not a multiple of {POOL_SIDE}")));
        }
        let pixels = side * side;
        let scale = 1.0 / (pixels as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let projection = (0..PROJECTION_DIM * pixels)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Ok(Self { side, projection })
    }

    pub fn features(&self, img: &GrayImage) -> Result<Vec<f64>> {
        if img.width != self.side || img.height != self.side {
            return Err(invalid(format!(
                "feature extractor expects {0}x{0}, got {1}x{2}",
                self.side, img.width, img.height
            )));
        }
        let pixels = self.side * self.side;
        let mut out = Vec::with_capacity(FEATURE_DIM);
        for row in self.projection.chunks(pixels) {
            out.push(row.iter().zip(&img.data).map(|(w, x)| (w * x) as f64).sum());
        }
        let cell = self.side / POOL_SIDE;
        for py in 0..POOL_SIDE {
            for px in 0..POOL_SIDE {
                let mut s = 0.0;
                for y in py * cell..(py + 1) * cell {
                    for x in px * cell..(px + 1) * cell {
                        s += img.get(x, y) as f64;
                    }
                }
                out.push(s / (cell * cell) as f64);
            }
        }
        Ok(out)
    }

    pub fn features_many(&self, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|i| self.features(i)).collect()
    }
}

/// Percentage of images in which the detector finds the concept.
pub fn icr(images: &[GrayImage], kind: ConceptKind, detector: &TemplateDetector) -> Result<f64> {
    if images.is_empty() {
        return Err(invalid("ICR of an empty image set"));
    }
    let hits = detector.presence(images, kind)?.iter().filter(|&&b| b).count();
    Ok(100.0 * hits as f64 / images.len() as f64)
}

fn moments(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let c = DVector::from_column_slice(f) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += FRECHET_SHRINKAGE;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    let min = d + 1;
    if a.len() < min || b.len() < min {
        return Err(invalid(format!(
            "Fréchet distance needs at least {min} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|f| f.len() != d) {
        return Err(invalid("feature vectors differ in length"));
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let s1h = sym_sqrt(&s1);
    let mid = &s1h * &s2 * &s1h;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&m1 - &m2).norm_squared();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between two image sets in the fixed feature space.
pub fn frechet(a: &[GrayImage], b: &[GrayImage]) -> Result<f64> {
    let side = a.first().or(b.first()).map_or(0, |i| i.width);
    let fx = FeatureExtractor::new(side)?;
    frechet_features(&fx.features_many(a)?, &fx.features_many(b)?)
}

/// `fid · icr / 100`.
pub fn fr_score(fid: f64, icr: f64) -> f64 {
    fid * icr / 100.0
}

/// Point-biserial Pearson correlation and its two-sided p-value.
pub fn pearson_study(x: &[bool], y: &[bool]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(invalid(format!("flag vectors differ in length: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(invalid("correlation needs at least 3 pairs"));
    }
    let f = |v: &[bool]| v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let (a, b) = (f(x), f(y));
    let r = pearson(&a, &b)?;
    let dof = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return Ok((r.signum(), 0.0));
    }
    let t = r * (dof / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| invalid(e.to_string()))?;
    Ok((r, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid("correlation with a constant vector is undefined"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("rank correlation needs two equal-length vectors of at least 2 values"));
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub group_size: usize,
    /// Groups drawn per batch.
    pub resamples: usize,
    pub batches: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            group_size: 25,
            resamples: 1000,
            batches: 10,
            seed: 0,
        }
    }
}

/// Fraction of resampled groups with at least one positive flag: mean and
/// standard deviation across batches.
pub fn bootstrap_expected_max(flags: &[bool], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    if flags.is_empty() {
        return Err(invalid("bootstrap over an empty flag set"));
    }
    if cfg.resamples < 1000 || cfg.batches == 0 || cfg.group_size == 0 {
        return Err(invalid("bootstrap needs ≥ 1000 resamples, ≥ 1 batch and a positive group size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fractions: Vec<f64> = (0..cfg.batches)
        .map(|_| {
            let hits = (0..cfg.resamples)
                .filter(|_| (0..cfg.group_size).any(|_| flags[rng.random_range(0..flags.len())]))
                .count();
            hits as f64 / cfg.resamples as f64
        })
        .collect();
    let k = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / k;
    let var = if fractions.len() > 1 {
        fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

/// One evaluated configuration. `fr` is the raw product `fid·icr`;
/// `fr_over_100` divides it by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub setting: String,
    pub fid: f64,
    pub icr: f64,
    pub fr: f64,
    pub fr_over_100: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(run_id: impl Into<String>, setting: impl Into<String>, fid: f64, icr: f64, n: usize, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            setting: setting.into(),
            fid,
            icr,
            fr: fid * icr,
            fr_over_100: fr_score(fid, icr),
            n,
            seed,
        }
    }
}

pub const CSV_HEADER: &str = "run_id,setting,fid,icr,fr,fr_over_100,n,seed";

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{:.4},{:.6},{:.6},{},{}",
            r.run_id, r.setting, r.fid, r.icr, r.fr, r.fr_over_100, r.n, r.seed
        )
        .expect("writing to a string");
    }
    out
}

pub fn to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(dir: impl AsRef<Path>, stem: &str, records: &[MetricsRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), to_csv(records))?;
    fs::write(dir.join(format!("{stem}.jsonl")), to_jsonl(records)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_uses_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let r = spearman(&[0.0, 0.25, 0.5, 1.0], &[0.0, 9.0, 20.0, 80.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = spearman(&[0.0, 0.25, 0.5, 1.0], &[0.0, 0.0, 20.0, 80.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
        assert!(spearman(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn fr_fixtures() {
        assert!((fr_score(9.05, 11.13) - 1.007265).abs() < 1e-9);
        assert!((fr_score(6.99, 5.02) - 0.350898).abs() < 1e-9);
        assert_eq!(fr_score(3.0, 0.0), 0.0);
        let r = MetricsRecord::new("x", "s", 9.05, 11.13, 10, 0);
        assert_eq!(r.fr_over_100, fr_score(r.fid, r.icr));
    }

    #[test]
    fn pearson_extremes_and_errors() {
        let a = [true, false, true, true, false];
        let b: Vec<bool> = a.iter().map(|v| !v).collect();
        assert_eq!(pearson_study(&a, &a).unwrap().0, 1.0);
        assert_eq!(pearson_study(&a, &b).unwrap().0, -1.0);
        assert!(pearson_study(&a, &[true; 5]).is_err());
        assert!(pearson_study(&a, &a[..4]).is_err());
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let cfg = BootstrapConfig::default();
        assert_eq!(bootstrap_expected_max(&[true; 40], &cfg).unwrap(), (1.0, 0.0));
        assert_eq!(bootstrap_expected_max(&[false; 40], &cfg).unwrap(), (0.0, 0.0));
        assert!(bootstrap_expected_max(&[], &cfg).is_err());
        let few = BootstrapConfig { resamples: 10, ..cfg };
        assert!(bootstrap_expected_max(&[true], &few).is_err());
    }

    #[test]
    fn features_are_fixed_and_sized() {
        let fx = FeatureExtractor::new(32).unwrap();
        let img = GrayImage::filled(32, 32, 0.25);
        let f = fx.features(&img).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert_eq!(f, FeatureExtractor::new(32).unwrap().features(&img).unwrap());
        assert!(f[PROJECTION_DIM..].iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn frechet_requires_enough_samples() {
        let imgs = vec![GrayImage::filled(32, 32, 0.5); 10];
        let err = frechet(&imgs, &imgs).unwrap_err().to_string();
        assert!(err.contains("89"), "{err}");
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = to_csv(&[MetricsRecord::new("abc", "baseline", 1.5, 20.0, 100, 3)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("abc,baseline,1.500000,20.0000,30.000000,0.300000,100,3"));
    }
}
