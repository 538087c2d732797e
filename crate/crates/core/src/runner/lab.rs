use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use log::info;

use super::config::{Negative, RunConfig};
use super::pipeline::{build_examples, grid_for, negatives, prompts, vocab_for, PipelineStats};
use crate::dataset::{build_dataset, BuildOptions, Manifest};
use crate::detector::TemplateDetector;
use crate::diffusion::{sample, train, Denoiser, NoiseSchedule, TrainMode, TrainReport};
use crate::error::Result;
use crate::eval::{frechet_features, icr, FeatureExtractor, MetricsRecord};
use crate::image::GrayImage;

/// A trained model with the annotation statistics of its training data.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Arc<Denoiser>,
    pub stats: PipelineStats,
    pub report: TrainReport,
}

/// Caches datasets and trained models so experiments that share settings
/// train once. With a cache directory, checkpoints persist across runs.
pub struct Lab {
    cache_dir: Option<PathBuf>,
    datasets: HashMap<String, Arc<Manifest>>,
    models: HashMap<String, TrainedModel>,
    reference: HashMap<String, Arc<Vec<Vec<f64>>>>,
}

impl Default for Lab {
    fn default() -> Self {
        Self::new(None)
    }
}

impl Lab {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Self {
            cache_dir,
            datasets: HashMap::new(),
            models: HashMap::new(),
            reference: HashMap::new(),
        }
    }

    fn dataset_key(cfg: &RunConfig) -> String {
        format!("{}-{}-{}-{}-{}-{}", cfg.n, cfg.icr, cfg.kind, cfg.data_seed, cfg.n_test, cfg.image_size)
    }

    pub fn dataset(&mut self, cfg: &RunConfig) -> Result<Arc<Manifest>> {
        let key = Self::dataset_key(cfg);
        if let Some(m) = self.datasets.get(&key) {
            return Ok(m.clone());
        }
        let opts = BuildOptions {
            image_size: cfg.image_size,
            n_test: cfg.n_test,
            ..Default::default()
        };
        let m = Arc::new(build_dataset(cfg.n, cfg.icr, cfg.kind, cfg.data_seed, opts)?);
        self.datasets.insert(key, m.clone());
        Ok(m)
    }

    /// Inserts an externally built manifest under `cfg`'s dataset settings.
    pub fn insert_dataset(&mut self, cfg: &RunConfig, manifest: Manifest) {
        self.datasets.insert(Self::dataset_key(cfg), Arc::new(manifest));
    }

    pub fn detector(&self, cfg: &RunConfig) -> Result<TemplateDetector> {
        Ok(TemplateDetector::new(&[cfg.kind], cfg.image_size, cfg.tau)?)
    }

    /// Trains (or fetches) the data-removal model for `cfg`. A baseline
    /// config trains on plain captions.
    pub fn model(&mut self, cfg: &RunConfig) -> Result<TrainedModel> {
        let key = cfg.train_hash();
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let data = self.dataset(cfg)?;
        let vocab = vocab_for(cfg)?;
        let (examples, stats) = build_examples(&data, cfg, &vocab)?;
        let ckpt = self.cache_dir.as_ref().map(|d| d.join(format!("{key}.gelb")));
        let trained = match ckpt.as_ref().filter(|p| p.exists()) {
            Some(path) => {
                info!("loading cached checkpoint {}", path.display());
                TrainedModel {
                    model: Arc::new(Denoiser::load(path)?),
                    stats,
                    report: TrainReport::default(),
                }
            }
            None => {
                let mut model = Denoiser::new(cfg.denoiser(), NoiseSchedule::default(), vocab, cfg.train_seed)?;
                info!("training {key} ({} examples, {} steps)", examples.len(), cfg.steps);
                let report = train(&mut model, &examples, &cfg.train_config(TrainMode::DataRemoval), |s, l, _| {
                    if (s + 1) % 100 == 0 {
                        info!("  step {} loss {l:.4}", s + 1);
                    }
                })?;
                if let Some(path) = &ckpt {
                    std::fs::create_dir_all(path.parent().expect("checkpoint has a parent"))?;
                    model.save(path)?;
                }
                TrainedModel {
                    model: Arc::new(model),
                    stats,
                    report,
                }
            }
        };
        self.models.insert(key, trained.clone());
        Ok(trained)
    }

    /// Samples `cfg.n_gen` images from `model` for the test-split prompts with
    /// `cfg.negative` as the negative prompt.
    pub fn generate_with(&mut self, model: &Denoiser, cfg: &RunConfig) -> Result<Vec<GrayImage>> {
        let data = self.dataset(cfg)?;
        let pos = prompts(&data, &model.vocab, cfg.n_gen)?;
        self.generate_prompts(model, cfg, &pos, cfg.negative)
    }

    pub fn generate_prompts(
        &mut self,
        model: &Denoiser,
        cfg: &RunConfig,
        pos: &[Vec<usize>],
        negative: Negative,
    ) -> Result<Vec<GrayImage>> {
        let grid = grid_for(cfg)?;
        let neg = negatives(pos, negative, cfg.negative_caption, cfg.kind, &grid, &model.vocab, cfg.sample_seed)?;
        info!("sampling {} images (negative {negative}, scale {})", pos.len(), cfg.guidance);
        sample(model, &cfg.sample_config(), pos, &neg)
    }

    fn reference_features(&mut self, cfg: &RunConfig) -> Result<Arc<Vec<Vec<f64>>>> {
        let key = Self::dataset_key(cfg);
        if let Some(r) = self.reference.get(&key) {
            return Ok(r.clone());
        }
        let data = self.dataset(cfg)?;
        let imgs: Vec<GrayImage> = data.test().map(|s| s.image.clone()).collect();
        let fx = FeatureExtractor::new(cfg.image_size)?;
        let feats = Arc::new(fx.features_many(&imgs)?);
        self.reference.insert(key, feats.clone());
        Ok(feats)
    }

    /// ICR and Fréchet distance against the clean test split.
    pub fn evaluate(&mut self, cfg: &RunConfig, setting: &str, images: &[GrayImage]) -> Result<MetricsRecord> {
        let reference = self.reference_features(cfg)?;
        let fx = FeatureExtractor::new(cfg.image_size)?;
        let fid = frechet_features(&fx.features_many(images)?, &reference)?;
        let rate = icr(images, cfg.kind, &self.detector(cfg)?)?;
        info!("{setting}: icr {rate:.2}% fd {fid:.4}");
        Ok(MetricsRecord::new(cfg.hash(), setting, fid, rate, images.len(), cfg.sample_seed))
    }

    /// Trains if needed, samples and evaluates one configuration.
    pub fn run(&mut self, cfg: &RunConfig, setting: &str) -> Result<MetricsRecord> {
        let trained = self.model(cfg)?;
        let images = self.generate_with(&trained.model, cfg)?;
        self.evaluate(cfg, setting, &images)
    }
}
