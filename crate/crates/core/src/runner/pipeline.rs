use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Negative, Reweight, RunConfig};
use crate::dataset::Manifest;
use crate::detector::{oracle_detect, OracleConfig};
use crate::diffusion::TrainExample;
use crate::error::{invalid, Result};
use crate::geometry::{
    augment_with_cells, bin_iou, box_to_bins, negative_geometry, perturb_bins, weight_map, BinGrid, CellSet,
    Detection, Region,
};
use crate::image::GrayImage;
use crate::vocab::{pad_caption, ConceptKind, Vocab};

/// Stream offset separating geometric noise from the oracle's own draws.
const GEO_NOISE_SEED: u64 = 0x9e37_79b9;

pub fn to_model_space(img: &GrayImage) -> Vec<f32> {
    img.data.iter().map(|v| v * 2.0 - 1.0).collect()
}

pub fn grid_for(cfg: &RunConfig) -> Result<BinGrid> {
    BinGrid::square(cfg.image_size, cfg.bin)
}

/// Vocabulary a freshly trained model needs for `cfg`.
pub fn vocab_for(cfg: &RunConfig) -> Result<Vocab> {
    let mut v = Vocab::base();
    if cfg.concept_token {
        let grid = grid_for(cfg)?;
        v.extend(&[cfg.kind], cfg.geometry.then_some(&grid))?;
    }
    Ok(v)
}

/// Summary of how annotations turned into captions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineStats {
    pub annotated: usize,
    pub truncated_tokens: usize,
    /// Mean IoU between clean and perturbed cell sets over annotated regions.
    pub mean_iou: Option<f64>,
}

/// Fraction of bin `cell` covered by `det`.
fn coverage(det: &Detection, grid: &BinGrid, cell: usize) -> f64 {
    let (m, n) = grid.coords(cell);
    let (bw, bh) = (grid.bin_w as f64, grid.bin_h as f64);
    let (x0, y0) = (m as f64 * bw, n as f64 * bh);
    let w = (det.a2.min(x0 + bw) - det.a1.max(x0)).max(0.0);
    let h = (det.b2.min(y0 + bh) - det.b1.max(y0)).max(0.0);
    w * h / (bw * bh)
}

/// Keeps the `k` best-covered bins, ties broken in row-major order.
fn cap_cells(cells: &CellSet, det: &Detection, grid: &BinGrid, k: usize) -> CellSet {
    let mut ranked: Vec<(usize, f64)> = cells.iter().map(|&c| (c, coverage(det, grid, c))).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(c, _)| c).collect()
}

/// Annotated regions of one image: the covered (possibly perturbed and
/// capped) cells and the detection confidence.
pub fn regions_for(
    detections: &[Detection],
    cfg: &RunConfig,
    grid: &BinGrid,
    noise: &mut ChaCha8Rng,
    ious: &mut Vec<f64>,
) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for det in detections.iter().filter(|d| d.p >= cfg.threshold) {
        let clean = box_to_bins(det, grid)?.cell_set(grid);
        let mut cells = perturb_bins(&clean, grid, cfg.geo_sigma, noise)?;
        ious.push(bin_iou(&clean, &cells));
        if cfg.k_cap > 0 && cfg.reweight == Reweight::Confidence && cells.len() > cfg.k_cap {
            cells = cap_cells(&cells, det, grid, cfg.k_cap);
        }
        out.push(Region { cells, p: det.p });
    }
    Ok(out)
}

/// Caption tokens and optional loss weights for one image.
pub fn encode_example(
    caption: &str,
    regions: &[Region],
    cfg: &RunConfig,
    grid: &BinGrid,
    vocab: &Vocab,
) -> Result<(Vec<usize>, Option<Vec<f32>>, usize)> {
    let base = vocab.encode(caption)?;
    if !cfg.concept_token || regions.is_empty() {
        return Ok((pad_caption(&base), None, 0));
    }
    let concept = vocab.concept_id(cfg.kind)?;
    let groups: Vec<CellSet> = if cfg.geometry {
        regions.iter().map(|r| r.cells.clone()).collect()
    } else {
        vec![BTreeSet::new(); regions.len()]
    };
    let aug = augment_with_cells(&base, concept, &groups, grid, vocab)?;
    let weights = match cfg.reweight.mode() {
        Some(mode) => Some(weight_map(grid, regions, cfg.alpha, mode)?.pixel_weights(grid)),
        None => None,
    };
    Ok((aug.padded(), weights, aug.truncated))
}

/// Training examples for the manifest's training split, annotated by the
/// oracle detector and encoded per the method flags in `cfg`.
pub fn build_examples(manifest: &Manifest, cfg: &RunConfig, vocab: &Vocab) -> Result<(Vec<TrainExample>, PipelineStats)> {
    let grid = grid_for(cfg)?;
    let oracle = OracleConfig {
        confidence: cfg.oracle_confidence,
        sigma_px: cfg.oracle_sigma_px,
        fn_rate: cfg.oracle_fn_rate,
        seed: cfg.oracle_seed,
    };
    let (w, h) = (manifest.header.width, manifest.header.height);
    let mut stats = PipelineStats::default();
    let mut ious = Vec::new();
    let mut out = Vec::new();
    for (i, s) in manifest.train().enumerate() {
        let dets = oracle_detect(&s.boxes, w, h, &oracle, &mut oracle.rng_for(i));
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.oracle_seed ^ GEO_NOISE_SEED);
        noise.set_stream(i as u64);
        let regions = if cfg.is_baseline() {
            Vec::new()
        } else {
            regions_for(&dets, cfg, &grid, &mut noise, &mut ious)?
        };
        let (tokens, weights, truncated) = encode_example(&s.caption, &regions, cfg, &grid, vocab)?;
        stats.annotated += usize::from(!regions.is_empty());
        stats.truncated_tokens += truncated;
        out.push(TrainExample {
            id: s.id.clone(),
            image: to_model_space(&s.image),
            tokens,
            weights,
        });
    }
    if !ious.is_empty() {
        stats.mean_iou = Some(ious.iter().sum::<f64>() / ious.len() as f64);
    }
    Ok((out, stats))
}

/// Padded positive captions: the test split's captions, cycled to `count`.
pub fn prompts(manifest: &Manifest, vocab: &Vocab, count: usize) -> Result<Vec<Vec<usize>>> {
    let captions: Vec<&str> = manifest.test().map(|s| s.caption.as_str()).collect();
    let captions = if captions.is_empty() {
        manifest.train().map(|s| s.caption.as_str()).collect()
    } else {
        captions
    };
    if captions.is_empty() {
        return Err(invalid("manifest has no captions to prompt with"));
    }
    (0..count)
        .map(|i| Ok(pad_caption(&vocab.encode(captions[i % captions.len()])?)))
        .collect()
}

/// Negative captions paired with `positives`: the concept token and its
/// location tokens, after the stripped positive caption when `with_caption`
/// is set. Random geometry is drawn per prompt from `seed`.
pub fn negatives(
    positives: &[Vec<usize>],
    negative: Negative,
    with_caption: bool,
    kind: ConceptKind,
    grid: &BinGrid,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if negative == Negative::None {
        return Ok(vec![crate::vocab::empty_caption(); positives.len()]);
    }
    let concept = vocab.concept_id(kind)?;
    positives
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = if with_caption {
                crate::geometry::strip_caption(p, vocab)
            } else {
                Vec::new()
            };
            let cells: CellSet = match negative {
                Negative::Geometry(strategy, count) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    negative_geometry(grid, strategy, count.min(grid.total()), &mut rng)?
                        .into_iter()
                        .collect()
                }
                _ => CellSet::new(),
            };
            Ok(augment_with_cells(&base, concept, &[cells], grid, vocab)?.padded())
        })
        .collect()
}
