//! Concept detectors: a ground-truth oracle with controllable noise, used to
//! annotate training data, and a normalized cross-correlation template
//! matcher, used to judge generated images.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConceptStamp, Sample};
use crate::error::{invalid, GeomError, Result};
use crate::geometry::Detection;
use crate::image::GrayImage;
use crate::vocab::ConceptKind;

pub const DEFAULT_TAU: f64 = 0.6;
/// Candidates sharing more than this fraction of their own area with a kept
/// detection are dropped.
pub const OVERLAP_FRACTION: f64 = 0.25;
pub const NMS_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    Fixed,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub confidence: ConfidenceMode,
    pub sigma_px: f64,
    pub fn_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            confidence: ConfidenceMode::Fixed,
            sigma_px: 0.0,
            fn_rate: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    /// Deterministic per-sample generator, so annotation order never matters.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Ground-truth boxes, jittered, re-scored and randomly dropped per `cfg`.
pub fn oracle_detect<R: Rng + ?Sized>(
    gt: &[Detection],
    width: usize,
    height: usize,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Vec<Detection> {
    let noise = Normal::new(0.0, cfg.sigma_px.max(0.0)).expect("finite sigma");
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(gt.len());
    for d in gt {
        let dropped = cfg.fn_rate > 0.0 && rng.random::<f64>() < cfg.fn_rate;
        let p = match cfg.confidence {
            ConfidenceMode::Fixed => 1.0,
            ConfidenceMode::Uniform => rng.random_range(0.7..=1.0),
        };
        if dropped {
            continue;
        }
        if cfg.sigma_px == 0.0 {
            out.push(Detection { p, ..*d });
            continue;
        }
        let mut c = d.coords().map(|v| v + noise.sample(rng));
        c[0] = c[0].clamp(0.0, w - 1.0);
        c[1] = c[1].clamp(0.0, h - 1.0);
        c[2] = c[2].clamp(c[0] + 1.0, w);
        c[3] = c[3].clamp(c[1] + 1.0, h);
        out.push(Detection::new(p, c[0], c[1], c[2], c[3]));
    }
    out
}

/// Zero-mean, unit-norm template.
#[derive(Debug, Clone)]
struct Template {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Template {
    fn new(width: usize, height: usize, raw: &[f32]) -> Self {
        let n = raw.len() as f64;
        let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut values: Vec<f64> = raw.iter().map(|&v| v as f64 - mean).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        Self { width, height, values }
    }
}

/// Summed-area tables of pixel values and squares.
struct Integral {
    stride: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(img: &GrayImage) -> Self {
        let stride = img.width + 1;
        let mut sum = vec![0.0; stride * (img.height + 1)];
        let mut sq = sum.clone();
        for y in 0..img.height {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..img.width {
                let v = img.get(x, y) as f64;
                rs += v;
                rq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        Self { stride, sum, sq }
    }

    fn rect(&self, table: &[f64], x: usize, y: usize, w: usize, h: usize) -> f64 {
        let s = self.stride;
        table[(y + h) * s + x + w] - table[y * s + x + w] - table[(y + h) * s + x] + table[y * s + x]
    }
}

/// NCC between a template and the image window at `(x, y)`; 0 for flat windows.
fn ncc_at(img: &GrayImage, integral: &Integral, t: &Template, x: usize, y: usize) -> f64 {
    let n = (t.width * t.height) as f64;
    let s = integral.rect(&integral.sum, x, y, t.width, t.height);
    let q = integral.rect(&integral.sq, x, y, t.width, t.height);
    let var = q - s * s / n;
    if var <= 1e-9 {
        return 0.0;
    }
    let mut dot = 0.0;
    for ty in 0..t.height {
        let row = &img.data[(y + ty) * img.width + x..][..t.width];
        let trow = &t.values[ty * t.width..][..t.width];
        for (a, b) in row.iter().zip(trow) {
            dot += *a as f64 * b;
        }
    }
    // the template is zero-mean, so the window mean drops out of the numerator
    (dot / var.sqrt()).clamp(-1.0, 1.0)
}

/// Normalized cross-correlation of two equal-size patches.
pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        ab += dx * dy;
        aa += dx * dx;
        bb += dy * dy;
    }
    if aa <= 1e-18 || bb <= 1e-18 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Sliding-window NCC matcher over every stamp scale the builder can produce.
#[derive(Debug, Clone)]
pub struct TemplateDetector {
    pub tau: f64,
    pub nms_iou: f64,
    image_size: usize,
    banks: BTreeMap<ConceptKind, Vec<Template>>,
}

impl TemplateDetector {
    pub fn new(kinds: &[ConceptKind], image_size: usize, tau: f64) -> Result<Self> {
        let mut banks = BTreeMap::new();
        for &kind in kinds {
            let stamp = ConceptStamp::for_kind(kind);
            let (lo, hi) = stamp.side_range(image_size)?;
            let mut bank: Vec<Template> = Vec::new();
            for side in lo..=hi {
                let (w, h, values) = stamp.texture(side);
                if bank.iter().any(|t| t.width == w && t.height == h) {
                    continue;
                }
                bank.push(Template::new(w, h, &values));
            }
            banks.insert(kind, bank);
        }
        Ok(Self {
            tau,
            nms_iou: NMS_IOU,
            image_size,
            banks,
        })
    }

    pub fn all_kinds(image_size: usize) -> Result<Self> {
        Self::new(&ConceptKind::ALL, image_size, DEFAULT_TAU)
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    fn bank(&self, kind: ConceptKind) -> Result<&[Template]> {
        self.banks
            .get(&kind)
            .map(Vec::as_slice)
            .ok_or_else(|| GeomError::UnknownConcept(format!("{kind} (no template bank)")))
    }

    fn check_size(&self, image: &GrayImage) -> Result<()> {
        if image.width != self.image_size || image.height != self.image_size {
            return Err(invalid(format!(
                "detector built for {0}x{0} images, got {1}x{2}",
                self.image_size, image.width, image.height
            )));
        }
        Ok(())
    }

    /// Every window scoring at least `threshold`, as detections scored by NCC.
    fn candidates(&self, image: &GrayImage, kind: ConceptKind, threshold: f64) -> Result<Vec<Detection>> {
        self.check_size(image)?;
        let integral = Integral::new(image);
        let mut out = Vec::new();
        for t in self.bank(kind)? {
            for y in 0..=image.height - t.height {
                for x in 0..=image.width - t.width {
                    let s = ncc_at(image, &integral, t, x, y);
                    if s >= threshold {
                        out.push(Detection::new(
                            s,
                            x as f64,
                            y as f64,
                            (x + t.width) as f64,
                            (y + t.height) as f64,
                        ));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Highest NCC over all windows and scales.
    pub fn max_score(&self, image: &GrayImage, kind: ConceptKind) -> Result<f64> {
        Ok(self
            .candidates(image, kind, f64::NEG_INFINITY)?
            .iter()
            .map(|d| d.p)
            .fold(-1.0, f64::max))
    }

    /// Non-maximum-suppressed matches with `p` = NCC score.
    pub fn detect(&self, image: &GrayImage, kind: ConceptKind) -> Result<Vec<Detection>> {
        let mut cands = self.candidates(image, kind, self.tau)?;
        // near-equal scores prefer the larger window: a crop of a periodic
        // stamp matches as well as the whole stamp
        let key = |d: &Detection| ((d.p * 1000.0).round() as i64, d.area() as i64);
        cands.sort_by(|a, b| key(b).cmp(&key(a)).then(a.coords().partial_cmp(&b.coords()).unwrap()));
        let mut kept: Vec<Detection> = Vec::new();
        for c in cands {
            let suppressed = kept.iter().any(|k| {
                let inter = c.iou(k) * (c.area() + k.area()) / (1.0 + c.iou(k));
                c.iou(k) > self.nms_iou || inter > OVERLAP_FRACTION * c.area()
            });
            if !suppressed {
                kept.push(c);
            }
        }
        Ok(kept)
    }

    pub fn contains(&self, image: &GrayImage, kind: ConceptKind) -> Result<bool> {
        Ok(!self.detect(image, kind)?.is_empty())
    }

    /// Per-image presence flags, computed in parallel.
    pub fn presence(&self, images: &[GrayImage], kind: ConceptKind) -> Result<Vec<bool>> {
        images.par_iter().map(|img| self.contains(img, kind)).collect()
    }

    pub fn detect_many(&self, images: &[GrayImage], kind: ConceptKind) -> Result<Vec<Vec<Detection>>> {
        images.par_iter().map(|img| self.detect(img, kind)).collect()
    }
}

/// Confusion counts of detections against ground truth, matching greedily at
/// IoU ≥ `min_iou`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DetectionScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl DetectionScore {
    pub fn add(&mut self, gt: &[Detection], found: &[Detection], min_iou: f64) {
        let mut used = vec![false; found.len()];
        for g in gt {
            let best = found
                .iter()
                .enumerate()
                .filter(|(i, d)| !used[*i] && d.iou(g) >= min_iou)
                .max_by(|a, b| a.1.iou(g).total_cmp(&b.1.iou(g)));
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    self.true_positives += 1;
                }
                None => self.false_negatives += 1,
            }
        }
        self.false_positives += used.iter().filter(|u| !**u).count();
    }

    pub fn precision(&self) -> f64 {
        let d = self.true_positives + self.false_positives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.true_positives + self.false_negatives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }
}

/// Scores the template detector against builder ground truth.
pub fn validate_detector(det: &TemplateDetector, samples: &[Sample], kind: ConceptKind) -> Result<DetectionScore> {
    let images: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
    let found = det.detect_many(&images, kind)?;
    let mut score = DetectionScore::default();
    for (s, f) in samples.iter().zip(&found) {
        score.add(&s.boxes, f, 0.5);
    }
    Ok(score)
}

/// One line of a detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub boxes: Vec<Detection>,
}

pub fn write_dump(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        writeln!(buf, "{}", serde_json::to_string(r)?)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::inject_concept;

    fn gt() -> Vec<Detection> {
        vec![Detection::new(1.0, 3.0, 4.0, 15.0, 16.0)]
    }

    #[test]
    fn zero_noise_oracle_is_identity() {
        let cfg = OracleConfig::default();
        let out = oracle_detect(&gt(), 32, 32, &cfg, &mut cfg.rng_for(0));
        assert_eq!(out, gt());
        assert!(oracle_detect(&[], 32, 32, &cfg, &mut cfg.rng_for(0)).is_empty());
    }

    #[test]
    fn uniform_confidence_range_and_clamping() {
        let cfg = OracleConfig {
            confidence: ConfidenceMode::Uniform,
            sigma_px: 40.0,
            ..Default::default()
        };
        for i in 0..10_000 {
            for d in oracle_detect(&gt(), 32, 32, &cfg, &mut cfg.rng_for(i)) {
                assert!((0.7..=1.0).contains(&d.p));
                d.validate(32, 32).unwrap();
            }
        }
    }

    #[test]
    fn false_negative_rate_drops_boxes() {
        let cfg = OracleConfig { fn_rate: 1.0, ..Default::default() };
        assert!(oracle_detect(&gt(), 32, 32, &cfg, &mut cfg.rng_for(0)).is_empty());
    }

    #[test]
    fn ncc_is_affine_invariant() {
        let a: Vec<f32> = (0..25).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
        let b: Vec<f32> = a.iter().map(|v| 0.3 * v + 0.2).collect();
        assert!((ncc(&a, &b) - 1.0).abs() < 1e-9);
        let c: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((ncc(&a, &c) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn stamped_qr_on_blank_is_found() {
        let det = TemplateDetector::all_kinds(32).unwrap();
        let blank = GrayImage::filled(32, 32, 0.5);
        assert!(det.detect(&blank, ConceptKind::Qr).unwrap().is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, g) = inject_concept(&blank, &ConceptStamp::for_kind(ConceptKind::Qr), &mut rng).unwrap();
        let found = det.detect(&img, ConceptKind::Qr).unwrap();
        assert!(found[0].p >= 0.95);
        assert!(found[0].iou(&g) >= 0.5);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let det = TemplateDetector::new(&[ConceptKind::Qr], 32, DEFAULT_TAU).unwrap();
        let blank = GrayImage::filled(32, 32, 0.5);
        assert!(det.detect(&blank, ConceptKind::Text).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![DetectionRecord { image_id: "x".into(), boxes: gt() }];
        write_dump(&path, &recs).unwrap();
        assert_eq!(read_dump(&path).unwrap(), recs);
    }
}
