//! Concept geometry: pixel boxes to grid bins, caption augmentation with
//! concept and location tokens, per-bin loss weights, and the helpers used
//! by the geometric-accuracy and negative-prompt studies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GeomError, Result};
use crate::vocab::{Vocab, MAX_CAPTION_LEN, PAD_ID};

/// Row-major cell indices (`n * cols + m`, both 0-based).
pub type CellSet = BTreeSet<usize>;

/// Default augmentation threshold on detector confidence.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Confidence ceiling used by [`WeightMode::Confidence`] so weights stay positive.
pub const MAX_CONFIDENCE_FOR_WEIGHTS: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinGrid {
    pub width: usize,
    pub height: usize,
    pub bin_w: usize,
    pub bin_h: usize,
}

impl BinGrid {
    pub fn new(width: usize, height: usize, bin_w: usize, bin_h: usize) -> Result<Self> {
        if width == 0 || height == 0 || bin_w == 0 || bin_h == 0 {
            return Err(GeomError::Grid("sizes must be positive".into()));
        }
        if width % bin_w != 0 || height % bin_h != 0 {
            return Err(GeomError::Grid(format!(
                "{width}x{height} image is not divisible into {bin_w}x{bin_h} bins"
            )));
        }
        Ok(Self {
            width,
            height,
            bin_w,
            bin_h,
        })
    }

    pub fn square(image: usize, bin: usize) -> Result<Self> {
        Self::new(image, image, bin, bin)
    }

    pub fn cols(&self) -> usize {
        self.width / self.bin_w
    }

    pub fn rows(&self) -> usize {
        self.height / self.bin_h
    }

    /// `T`, the number of bins.
    pub fn total(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn cell(&self, m: usize, n: usize) -> usize {
        n * self.cols() + m
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.cols(), cell / self.cols())
    }

    pub fn all_cells(&self) -> CellSet {
        (0..self.total()).collect()
    }
}

/// A detector output: confidence and an `(a1, b1, a2, b2)` pixel box with
/// exclusive lower-right corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub p: f64,
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl Detection {
    pub fn new(p: f64, a1: f64, b1: f64, a2: f64, b2: f64) -> Self {
        Self { p, a1, b1, a2, b2 }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.a1, self.b1, self.a2, self.b2]
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        let ok = self.coords().iter().all(|v| v.is_finite())
            && 0.0 <= self.a1
            && self.a1 < self.a2
            && self.a2 <= w
            && 0.0 <= self.b1
            && self.b1 < self.b2
            && self.b2 <= h;
        if !ok {
            return Err(GeomError::BoxOutOfImage(self.coords(), width, height));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid(format!("confidence {} outside [0, 1]", self.p)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.a2 - self.a1).max(0.0) * (self.b2 - self.b1).max(0.0)
    }

    /// Pixel-space intersection over union.
    pub fn iou(&self, other: &Detection) -> f64 {
        let iw = (self.a2.min(other.a2) - self.a1.max(other.a1)).max(0.0);
        let ih = (self.b2.min(other.b2) - self.b1.max(other.b1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Half-open bin rectangle `[a1, a2) × [b1, b2)` in 0-based bin indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinBox {
    pub a1: usize,
    pub b1: usize,
    pub a2: usize,
    pub b2: usize,
}

impl BinBox {
    /// Covered cells in row-major order.
    pub fn cells(&self, grid: &BinGrid) -> Vec<usize> {
        (self.b1..self.b2)
            .flat_map(|n| (self.a1..self.a2).map(move |m| grid.cell(m, n)))
            .collect()
    }

    pub fn cell_set(&self, grid: &BinGrid) -> CellSet {
        self.cells(grid).into_iter().collect()
    }

    pub fn count(&self) -> usize {
        (self.a2 - self.a1) * (self.b2 - self.b1)
    }
}

/// `A1 = ⌊a1/W_bin⌋`, `B1 = ⌊b1/H_bin⌋`, `A2 = ⌈a2/W_bin⌉`, `B2 = ⌈b2/H_bin⌉`.
pub fn box_to_bins(det: &Detection, grid: &BinGrid) -> Result<BinBox> {
    det.validate(grid.width, grid.height)?;
    let (bw, bh) = (grid.bin_w as f64, grid.bin_h as f64);
    Ok(BinBox {
        a1: (det.a1 / bw).floor() as usize,
        b1: (det.b1 / bh).floor() as usize,
        a2: (det.a2 / bw).ceil() as usize,
        b2: (det.b2 / bh).ceil() as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedCaption {
    /// Unpadded tokens.
    pub tokens: Vec<usize>,
    /// Location tokens dropped to respect [`MAX_CAPTION_LEN`].
    pub truncated: usize,
}

impl AugmentedCaption {
    pub fn padded(&self) -> Vec<usize> {
        crate::vocab::pad_caption(&self.tokens)
    }
}

/// Appends `concept` and the covered location tokens for every detection
/// with `p >= threshold`.
pub fn augment_caption(
    caption: &[usize],
    detections: &[Detection],
    concept: &str,
    threshold: f64,
    grid: &BinGrid,
    vocab: &Vocab,
) -> Result<AugmentedCaption> {
    let concept_id = vocab.concept_id_by_name(concept)?;
    let mut groups = Vec::new();
    for det in detections.iter().filter(|d| d.p >= threshold) {
        groups.push(box_to_bins(det, grid)?.cell_set(grid));
    }
    augment_with_cells(caption, concept_id, &groups, grid, vocab)
}

/// Appends one `concept ⊕ locations` group per cell set. Cells are emitted in
/// row-major order. Overlong captions lose location tokens from the end.
pub fn augment_with_cells(
    caption: &[usize],
    concept_id: usize,
    groups: &[CellSet],
    grid: &BinGrid,
    vocab: &Vocab,
) -> Result<AugmentedCaption> {
    if let Some(&bad) = caption.iter().find(|&&t| !vocab.is_base(t)) {
        return Err(invalid(format!("caption token {bad} is not a base word")));
    }
    if !vocab.is_concept(concept_id) {
        return Err(GeomError::UnknownConcept(format!("#{concept_id}")));
    }
    let mut tokens = caption.to_vec();
    for cells in groups {
        tokens.push(concept_id);
        for &c in cells {
            tokens.push(vocab.location_id(grid, c)?);
        }
    }
    let mut truncated = 0;
    while tokens.len() > MAX_CAPTION_LEN {
        match tokens.iter().rposition(|&t| vocab.is_location(t)) {
            Some(pos) => {
                tokens.remove(pos);
                truncated += 1;
            }
            None => {
                truncated += tokens.len() - MAX_CAPTION_LEN;
                tokens.truncate(MAX_CAPTION_LEN);
            }
        }
    }
    Ok(AugmentedCaption { tokens, truncated })
}

/// Strips concept, location and PAD tokens, leaving the base caption.
pub fn strip_caption(tokens: &[usize], vocab: &Vocab) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|&t| vocab.is_base(t) && t != PAD_ID)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Concept bins weighted by `α` relative to the rest (lower weight).
    Intent,
    /// The printed normalization, which gives concept bins the larger weight.
    Literal,
    /// `(1 - p)^α` inside each detection's bins.
    Confidence,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Intent => "intent",
            WeightMode::Literal => "literal",
            WeightMode::Confidence => "confidence",
        })
    }
}

impl FromStr for WeightMode {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intent" => Ok(WeightMode::Intent),
            "literal" => Ok(WeightMode::Literal),
            "confidence" => Ok(WeightMode::Confidence),
            _ => Err(invalid(format!("unknown weight mode `{s}`"))),
        }
    }
}

/// Cells covered by one detection and its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub cells: CellSet,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub cols: usize,
    pub rows: usize,
    /// Row-major, one weight per bin.
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Number of distinct concept-covered bins.
    pub k: usize,
    pub mode: WeightMode,
}

impl WeightMap {
    pub fn uniform(grid: &BinGrid) -> Self {
        Self {
            cols: grid.cols(),
            rows: grid.rows(),
            weights: vec![1.0; grid.total()],
            alpha: 1.0,
            k: 0,
            mode: WeightMode::Intent,
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.weights[n * self.cols + m]
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }

    /// Nearest-neighbour upsampling to one weight per pixel.
    pub fn pixel_weights(&self, grid: &BinGrid) -> Vec<f32> {
        let mut out = Vec::with_capacity(grid.width * grid.height);
        for y in 0..grid.height {
            for x in 0..grid.width {
                out.push(self.weights[grid.cell(x / grid.bin_w, y / grid.bin_h)] as f32);
            }
        }
        out
    }
}

/// Per-bin loss weights normalized so they sum to `T`.
pub fn weight_map(grid: &BinGrid, regions: &[Region], alpha: f64, mode: WeightMode) -> Result<WeightMap> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    if mode != WeightMode::Confidence && alpha > 1.0 {
        return Err(invalid(format!("alpha must lie in (0, 1] for {mode} mode, got {alpha}")));
    }
    let t = grid.total();
    let mut inside = vec![false; t];
    for r in regions {
        for &c in &r.cells {
            if c >= t {
                return Err(GeomError::Grid(format!("cell {c} outside a grid of {t} bins")));
            }
            inside[c] = true;
        }
    }
    let k = inside.iter().filter(|&&b| b).count();
    let mut map = WeightMap {
        cols: grid.cols(),
        rows: grid.rows(),
        weights: vec![1.0; t],
        alpha,
        k,
        mode,
    };
    if k == 0 {
        return Ok(map);
    }
    let (tf, kf) = (t as f64, k as f64);
    match mode {
        WeightMode::Intent => {
            let d = alpha * kf + (tf - kf);
            for (w, &ins) in map.weights.iter_mut().zip(&inside) {
                *w = if ins { alpha * tf / d } else { tf / d };
            }
        }
        WeightMode::Literal => {
            let d = kf + alpha * (tf - kf);
            for (w, &ins) in map.weights.iter_mut().zip(&inside) {
                *w = if ins { tf / d } else { alpha * tf / d };
            }
        }
        WeightMode::Confidence => {
            let mut u = vec![f64::NEG_INFINITY; t];
            for r in regions {
                let p = r.p.clamp(0.0, MAX_CONFIDENCE_FOR_WEIGHTS);
                let v = (1.0 - p).powf(alpha);
                for &c in &r.cells {
                    u[c] = u[c].max(v);
                }
            }
            for (x, &ins) in u.iter_mut().zip(&inside) {
                if !ins {
                    *x = 1.0;
                }
            }
            let total: f64 = u.iter().sum();
            for (w, x) in map.weights.iter_mut().zip(&u) {
                *w = x * tf / total;
            }
        }
    }
    Ok(map)
}

/// [`weight_map`] over bin boxes; `confidences` pairs with `boxes` and is
/// only read in confidence mode.
pub fn weight_map_from_boxes(
    grid: &BinGrid,
    boxes: &[BinBox],
    confidences: &[f64],
    alpha: f64,
    mode: WeightMode,
) -> Result<WeightMap> {
    if confidences.len() != boxes.len() {
        return Err(invalid("one confidence per box is required"));
    }
    let regions: Vec<Region> = boxes
        .iter()
        .zip(confidences)
        .map(|(b, &p)| Region {
            cells: b.cell_set(grid),
            p,
        })
        .collect();
    weight_map(grid, &regions, alpha, mode)
}

/// Shifts a cell set by one rounded `N(0, σ²)` offset per axis, clamping
/// each shifted cell to the grid.
pub fn perturb_bins<R: Rng + ?Sized>(cells: &CellSet, grid: &BinGrid, sigma: f64, rng: &mut R) -> Result<CellSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cells.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let e1: f64 = normal.sample(rng);
    let e2: f64 = normal.sample(rng);
    let clamp = |v: f64, hi: usize| v.round().clamp(0.0, (hi - 1) as f64) as usize;
    Ok(cells
        .iter()
        .map(|&c| {
            let (m, n) = grid.coords(c);
            grid.cell(clamp(m as f64 + e1, grid.cols()), clamp(n as f64 + e2, grid.rows()))
        })
        .collect())
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets counting as identical.
pub fn bin_iou(a: &CellSet, b: &CellSet) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeStrategy {
    Uniform,
    Random,
}

/// Cells to use as negative location tokens.
pub fn negative_geometry<R: Rng + ?Sized>(
    grid: &BinGrid,
    strategy: NegativeStrategy,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let t = grid.total();
    if count == 0 || count > t {
        return Err(invalid(format!("negative cell count {count} outside [1, {t}]")));
    }
    match strategy {
        NegativeStrategy::Uniform => Ok(uniform_lattice(grid, count)),
        NegativeStrategy::Random => {
            let mut cells = sample(rng, t, count).into_vec();
            cells.sort_unstable();
            Ok(cells)
        }
    }
}

/// `count` cells on an evenly strided lattice. Uses the factorization
/// `rows' × cols'` closest to the grid's aspect ratio; counts with no
/// factorization that fits fall back to striding the flattened grid.
fn uniform_lattice(grid: &BinGrid, count: usize) -> Vec<usize> {
    let (cols, rows) = (grid.cols(), grid.rows());
    let aspect = rows as f64 / cols as f64;
    let best = (1..=count)
        .filter(|r| count % r == 0)
        .map(|r| (r, count / r))
        .filter(|&(r, c)| r <= rows && c <= cols)
        .min_by(|x, y| {
            let dx = ((x.0 as f64 / x.1 as f64) / aspect).ln().abs();
            let dy = ((y.0 as f64 / y.1 as f64) / aspect).ln().abs();
            dx.total_cmp(&dy)
        });
    match best {
        Some((r, c)) => {
            let mut cells = Vec::with_capacity(count);
            for i in 0..r {
                let n = ((2 * i + 1) * rows) / (2 * r);
                for j in 0..c {
                    let m = ((2 * j + 1) * cols) / (2 * c);
                    cells.push(grid.cell(m, n));
                }
            }
            cells
        }
        None => {
            let t = grid.total();
            (0..count).map(|j| ((2 * j + 1) * t) / (2 * count)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(a1: f64, b1: f64, a2: f64, b2: f64) -> Detection {
        Detection::new(1.0, a1, b1, a2, b2)
    }

    #[test]
    fn grid_requires_divisible_sizes() {
        assert!(BinGrid::square(32, 5).is_err());
        let g = BinGrid::new(32, 16, 4, 8).unwrap();
        assert_eq!((g.cols(), g.rows(), g.total()), (8, 2, 16));
    }

    #[test]
    fn worked_box_example() {
        let g = BinGrid::square(256, 32).unwrap();
        let b = box_to_bins(&det(40.0, 60.0, 100.0, 130.0), &g).unwrap();
        assert_eq!(b, BinBox { a1: 1, b1: 1, a2: 4, b2: 5 });
    }

    #[test]
    fn full_image_and_single_bin_boxes() {
        let g = BinGrid::square(256, 32).unwrap();
        let all = box_to_bins(&det(0.0, 0.0, 256.0, 256.0), &g).unwrap();
        assert_eq!(all.count(), g.total());
        let one = box_to_bins(&det(70.0, 100.0, 90.0, 120.0), &g).unwrap();
        assert_eq!((one.a2 - one.a1, one.b2 - one.b1), (1, 1));
        assert_eq!((one.a1, one.b1), (2, 3));
    }

    #[test]
    fn box_outside_image_is_rejected() {
        let g = BinGrid::square(32, 8).unwrap();
        assert!(matches!(box_to_bins(&det(10.0, 10.0, 33.0, 20.0), &g), Err(GeomError::BoxOutOfImage(..))));
        assert!(box_to_bins(&det(10.0, 10.0, 10.0, 20.0), &g).is_err());
    }

    #[test]
    fn weight_map_worked_examples() {
        let g = BinGrid::square(16, 4).unwrap();
        let cells: CellSet = [0, 1, 4, 5].into_iter().collect();
        let regions = [Region { cells, p: 1.0 }];
        let intent = weight_map(&g, &regions, 0.25, WeightMode::Intent).unwrap();
        assert!((intent.get(0, 0) - 4.0 / 13.0).abs() < 1e-12);
        assert!((intent.get(3, 3) - 16.0 / 13.0).abs() < 1e-12);
        assert!((intent.sum() - 16.0).abs() < 1e-9);
        let literal = weight_map(&g, &regions, 0.25, WeightMode::Literal).unwrap();
        assert!((literal.get(0, 0) - 16.0 / 7.0).abs() < 1e-12);
        assert!((literal.get(3, 3) - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(literal.k, 4);
        let ones = weight_map(&g, &regions, 1.0, WeightMode::Intent).unwrap();
        assert!(ones.is_uniform());
    }

    #[test]
    fn weight_map_rejects_non_positive_alpha() {
        let g = BinGrid::square(16, 4).unwrap();
        assert!(weight_map(&g, &[], 0.0, WeightMode::Intent).is_err());
        assert!(weight_map(&g, &[], -1.0, WeightMode::Confidence).is_err());
        assert!(weight_map(&g, &[], 1.5, WeightMode::Literal).is_err());
        assert!(weight_map(&g, &[], 2.0, WeightMode::Confidence).is_ok());
    }

    #[test]
    fn empty_regions_give_ones() {
        let g = BinGrid::square(32, 8).unwrap();
        for mode in [WeightMode::Intent, WeightMode::Literal, WeightMode::Confidence] {
            assert!(weight_map(&g, &[], 0.3, mode).unwrap().is_uniform());
        }
    }

    #[test]
    fn confidence_mode_uses_the_least_suppressed_overlap() {
        let g = BinGrid::square(16, 4).unwrap();
        let a = Region { cells: [0, 1].into_iter().collect(), p: 0.9 };
        let b = Region { cells: [1, 2].into_iter().collect(), p: 0.5 };
        let map = weight_map(&g, &[a, b], 1.0, WeightMode::Confidence).unwrap();
        assert!((map.sum() - 16.0).abs() < 1e-9);
        assert!(map.weights[0] < map.weights[1]);
        assert_eq!(map.weights[1], map.weights[2]);
        assert!(map.weights.iter().all(|&w| w > 0.0));
        let certain = Region { cells: [0].into_iter().collect(), p: 1.0 };
        let map = weight_map(&g, &[certain], 2.0, WeightMode::Confidence).unwrap();
        assert!(map.weights[0] > 0.0);
    }

    #[test]
    fn pixel_weights_follow_bins() {
        let g = BinGrid::square(8, 4).unwrap();
        let r = Region { cells: [3].into_iter().collect(), p: 1.0 };
        let map = weight_map(&g, &[r], 0.5, WeightMode::Intent).unwrap();
        let px = map.pixel_weights(&g);
        assert_eq!(px[7 * 8 + 7], map.weights[3] as f32);
        assert_eq!(px[0], map.weights[0] as f32);
        let mean: f64 = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
        assert!((mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_counts() {
        let a: CellSet = [0, 1, 8, 9].into_iter().collect();
        let b: CellSet = [1, 2, 9, 10].into_iter().collect();
        assert!((bin_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(bin_iou(&a, &a), 1.0);
        let c: CellSet = [20].into_iter().collect();
        assert_eq!(bin_iou(&a, &c), 0.0);
        assert_eq!(bin_iou(&CellSet::new(), &CellSet::new()), 1.0);
    }

    #[test]
    fn perturbation_zero_sigma_and_clamping() {
        let g = BinGrid::square(32, 4).unwrap();
        let cells: CellSet = [9, 10, 17, 18].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_bins(&cells, &g, 0.0, &mut rng).unwrap(), cells);
        for _ in 0..200 {
            let moved = perturb_bins(&cells, &g, 1e6, &mut rng).unwrap();
            assert!(moved.iter().all(|&c| c < g.total()));
            assert!(!moved.is_empty());
        }
        let a = perturb_bins(&cells, &g, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = perturb_bins(&cells, &g, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(perturb_bins(&cells, &g, -1.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_negatives() {
        let g = BinGrid::square(32, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = negative_geometry(&g, NegativeStrategy::Uniform, g.total(), &mut rng).unwrap();
        assert_eq!(all.iter().copied().collect::<CellSet>(), g.all_cells());
        let sixteen = negative_geometry(&g, NegativeStrategy::Uniform, 16, &mut rng).unwrap();
        let mut blocks: Vec<(usize, usize)> = sixteen
            .iter()
            .map(|&c| {
                let (m, n) = g.coords(c);
                (m / 2, n / 2)
            })
            .collect();
        blocks.sort_unstable();
        blocks.dedup();
        assert_eq!(blocks.len(), 16);
        let five = negative_geometry(&g, NegativeStrategy::Uniform, 5, &mut rng).unwrap();
        assert_eq!(five.iter().collect::<BTreeSet<_>>().len(), 5);
        assert!(negative_geometry(&g, NegativeStrategy::Uniform, 0, &mut rng).is_err());
        assert!(negative_geometry(&g, NegativeStrategy::Random, 65, &mut rng).is_err());
    }

    #[test]
    fn random_negatives_are_seeded() {
        let g = BinGrid::square(32, 4).unwrap();
        let a = negative_geometry(&g, NegativeStrategy::Random, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = negative_geometry(&g, NegativeStrategy::Random, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 5);
    }
}
