use log::info;
use serde::Serialize;

use super::config::{Negative, RemovalSource, Reweight, RunConfig};
use super::lab::Lab;
use super::pipeline::{encode_example, grid_for, prompts, regions_for, to_model_space};
use super::plot::{LineChart, Series};
use crate::detector::ConfidenceMode;
use crate::diffusion::{train, Denoiser, NoiseSchedule, TrainExample, TrainMode};
use crate::error::{invalid, Result};
use crate::eval::{pearson_study, spearman, MetricsRecord};
use crate::geometry::NegativeStrategy;
use crate::vocab::pad_caption;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training ICR levels of the emergence study.
pub const TREND_LEVELS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

/// Guidance scale of the emergence and correlation studies: plain
/// conditional sampling, so the captions alone decide what appears.
pub const STUDY_GUIDANCE: f64 = 1.0;

/// Noise levels of the geometric-accuracy sweep, in bins.
pub const GEO_SIGMAS: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendPoint {
    pub run_id: String,
    pub train_icr: f64,
    pub step: usize,
    pub gen_icr: f64,
    pub fd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub r: f64,
    pub p: f64,
    pub n: usize,
    /// ICR (%) among prompts containing the concept word.
    pub icr_with_word: f64,
    pub icr_without_word: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreliminaryReport {
    pub trend: Vec<TrendPoint>,
    /// Rank correlation between training ICR and final generated ICR.
    pub spearman: f64,
    pub correlation: Option<CorrelationReport>,
}

impl PreliminaryReport {
    /// Final-step points, one per training level.
    pub fn finals(&self) -> Vec<&TrendPoint> {
        let last = self.trend.iter().map(|p| p.step).max().unwrap_or(0);
        self.trend.iter().filter(|p| p.step == last).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,train_icr,step,gen_icr,fd\n");
        for p in &self.trend {
            out.push_str(&format!("{},{},{},{:.4},{:.6}\n", p.run_id, p.train_icr, p.step, p.gen_icr, p.fd));
        }
        out
    }

    pub fn chart(&self) -> LineChart {
        let mut steps: Vec<usize> = self.trend.iter().map(|p| p.step).collect();
        steps.sort_unstable();
        steps.dedup();
        let series = steps
            .iter()
            .map(|&s| Series {
                name: format!("step {s}"),
                points: self.trend.iter().filter(|p| p.step == s).map(|p| (100.0 * p.train_icr, p.gen_icr)).collect(),
            })
            .collect();
        LineChart::new("Generated vs training ICR", "training ICR (%)", "generated ICR (%)", series)
    }
}

/// Trains plain-caption baselines on each training ICR level and measures
/// generated ICR and FD at `snapshots` evenly spaced steps.
pub fn run_trend(lab: &mut Lab, cfg: &RunConfig, levels: &[f64], snapshots: usize) -> Result<Vec<TrendPoint>> {
    let snapshots = snapshots.max(1);
    let mut out = Vec::new();
    for &level in levels {
        let c = RunConfig {
            icr: level,
            guidance: STUDY_GUIDANCE,
            ..cfg.clone().baseline()
        };
        let marks: Vec<usize> = (1..=snapshots).map(|k| k * c.steps / snapshots).collect();
        let models: Vec<(usize, Denoiser)> = if snapshots == 1 {
            vec![(c.steps, (*lab.model(&c)?.model).clone())]
        } else {
            train_snapshots(lab, &c, &marks)?
        };
        for (step, model) in models {
            let imgs = lab.generate_with(&model, &c)?;
            let m = lab.evaluate(&c, &format!("icr{}-step{step}", (level * 100.0).round()), &imgs)?;
            out.push(TrendPoint {
                run_id: m.run_id,
                train_icr: level,
                step,
                gen_icr: m.icr,
                fd: m.fid,
            });
        }
    }
    Ok(out)
}

fn train_snapshots(lab: &mut Lab, cfg: &RunConfig, marks: &[usize]) -> Result<Vec<(usize, Denoiser)>> {
    let data = lab.dataset(cfg)?;
    let vocab = super::pipeline::vocab_for(cfg)?;
    let (examples, _) = super::pipeline::build_examples(&data, cfg, &vocab)?;
    let mut model = Denoiser::new(cfg.denoiser(), NoiseSchedule::default(), vocab, cfg.train_seed)?;
    let mut saved = Vec::new();
    train(&mut model, &examples, &cfg.train_config(TrainMode::DataRemoval), |s, _, params| {
        if marks.contains(&(s + 1)) {
            saved.push((s + 1, params.clone()));
        }
    })?;
    Ok(saved
        .into_iter()
        .map(|(s, params)| {
            let mut m = model.clone();
            m.params = params;
            (s, m)
        })
        .collect())
}

/// Prompts the contaminated baseline with and without an (untrained)
/// concept word and correlates the word with detected presence.
pub fn run_correlation(lab: &mut Lab, cfg: &RunConfig, count: usize) -> Result<CorrelationReport> {
    let base_cfg = RunConfig {
        guidance: STUDY_GUIDANCE,
        ..cfg.clone().baseline()
    };
    let trained = lab.model(&base_cfg)?;
    let mut model = (*trained.model).clone();
    model.extend_vocab(&[cfg.kind], None, cfg.train_seed)?;
    let concept = model.vocab.concept_id(cfg.kind)?;
    let data = lab.dataset(&base_cfg)?;
    let plain = prompts(&data, &model.vocab, count)?;
    let mut with_word = vec![false; count];
    let pos: Vec<Vec<usize>> = plain
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i % 2 == 1 {
                with_word[i] = true;
                let mut t: Vec<usize> = p.iter().copied().filter(|&t| t != 0).collect();
                t.push(concept);
                pad_caption(&t)
            } else {
                p.clone()
            }
        })
        .collect();
    let imgs = lab.generate_prompts(&model, &base_cfg, &pos, Negative::None)?;
    let present = lab.detector(cfg)?.presence(&imgs, cfg.kind)?;
    let (r, p) = pearson_study(&with_word, &present)?;
    let rate = |flag: bool| {
        let (hit, tot) = with_word
            .iter()
            .zip(&present)
            .filter(|(w, _)| **w == flag)
            .fold((0usize, 0usize), |(h, t), (_, &d)| (h + usize::from(d), t + 1));
        100.0 * hit as f64 / tot.max(1) as f64
    };
    Ok(CorrelationReport {
        r,
        p,
        n: count,
        icr_with_word: rate(true),
        icr_without_word: rate(false),
    })
}

pub fn run_preliminary(lab: &mut Lab, cfg: &RunConfig, snapshots: usize) -> Result<PreliminaryReport> {
    let trend = run_trend(lab, cfg, &TREND_LEVELS, snapshots)?;
    let report = PreliminaryReport {
        spearman: 0.0,
        trend,
        correlation: Some(run_correlation(lab, cfg, 2 * cfg.n_gen)?),
    };
    let finals = report.finals();
    let x: Vec<f64> = finals.iter().map(|p| p.train_icr).collect();
    let y: Vec<f64> = finals.iter().map(|p| p.gen_icr).collect();
    let rho = spearman(&x, &y).unwrap_or(0.0);
    Ok(PreliminaryReport { spearman: rho, ..report })
}

/// Plain captions with the concept token appended; no geometry or re-weighting.
pub fn concept_only(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        concept_token: true,
        geometry: false,
        reweight: Reweight::None,
        negative: Negative::Concept,
        ..cfg.clone()
    }
}

/// Baseline, concept-token-only and full-method rows under shared seeds.
pub fn run_data_removal(lab: &mut Lab, cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    Ok(vec![
        lab.run(&cfg.clone().baseline(), "baseline")?,
        lab.run(&concept_only(cfg), "concept-only")?,
        lab.run(cfg, "geom-erasing")?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRemovalReport {
    pub records: Vec<MetricsRecord>,
    /// Every parameter of the contaminated model is unchanged bit for bit.
    pub frozen: bool,
    /// Pool images in which the detector found the concept.
    pub pool_annotated: usize,
}

/// Extends a frozen contaminated model with concept and location tokens and
/// trains only those rows on detector-annotated pool images: its own
/// generations or training images, per `cfg.removal_source`. Returns the
/// extended model and the number of annotated pool images.
pub fn learn_removal_tokens(lab: &mut Lab, cfg: &RunConfig, contaminated: &Denoiser) -> Result<(Denoiser, usize)> {
    let grid = grid_for(cfg)?;
    let data = lab.dataset(cfg)?;
    let mut model = contaminated.clone();
    model.extend_vocab(&[cfg.kind], Some(&grid), cfg.train_seed)?;
    let pool_cfg = RunConfig {
        sample_seed: cfg.sample_seed ^ 0x5eed,
        ..cfg.clone().baseline()
    };
    let captions: Vec<&str> = data.train().map(|s| s.caption.as_str()).collect();
    let pool_prompts: Vec<Vec<usize>> = (0..cfg.pool)
        .map(|i| Ok(pad_caption(&contaminated.vocab.encode(captions[i % captions.len()])?)))
        .collect::<Result<_>>()?;
    let pool = match cfg.removal_source {
        RemovalSource::Generated => lab.generate_prompts(contaminated, &pool_cfg, &pool_prompts, Negative::None)?,
        RemovalSource::Dataset => data.train().take(cfg.pool).map(|s| s.image.clone()).collect(),
    };
    let detections = lab.detector(cfg)?.detect_many(&pool, cfg.kind)?;

    let enc_cfg = RunConfig {
        concept_token: true,
        geometry: true,
        ..cfg.clone()
    };
    let mut ious = Vec::new();
    let mut examples = Vec::with_capacity(pool.len());
    let mut annotated = 0;
    for (i, (img, dets)) in pool.iter().zip(&detections).enumerate() {
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.oracle_seed);
        noise.set_stream(i as u64);
        let regions = regions_for(dets, &enc_cfg, &grid, &mut noise, &mut ious)?;
        annotated += usize::from(!regions.is_empty());
        let (tokens, weights, _) = encode_example(captions[i % captions.len()], &regions, &enc_cfg, &grid, &model.vocab)?;
        examples.push(TrainExample {
            id: format!("pool-{i:05}"),
            image: to_model_space(img),
            tokens,
            weights,
        });
    }
    info!("model removal: {annotated} of {} pool images annotated", pool.len());
    train(&mut model, &examples, &cfg.train_config(TrainMode::ModelRemoval), |_, _, _| {})?;
    Ok((model, annotated))
}

/// Learns removal tokens for the contaminated baseline of `cfg`, then
/// compares it with and without those tokens as negatives.
pub fn run_model_removal(lab: &mut Lab, cfg: &RunConfig) -> Result<ModelRemovalReport> {
    let base_cfg = cfg.clone().baseline();
    let contaminated = lab.model(&base_cfg)?.model;
    let (model, annotated) = learn_removal_tokens(lab, cfg, &contaminated)?;

    let frozen = contaminated.params.iter().all(|(name, t, _)| {
        model
            .params
            .get(name)
            .map(|u| t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
            .unwrap_or(false)
    });

    let before = {
        let imgs = lab.generate_with(&contaminated, &base_cfg)?;
        lab.evaluate(&base_cfg, "contaminated", &imgs)?
    };
    let after = {
        let imgs = lab.generate_with(&model, cfg)?;
        lab.evaluate(cfg, "tokens-only", &imgs)?
    };
    Ok(ModelRemovalReport {
        records: vec![before, after],
        frozen,
        pool_annotated: annotated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Components,
    Bins,
    Reweight,
    Negprompt,
    GeoAccuracy,
}

impl std::str::FromStr for Suite {
    type Err = crate::error::GeomError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "components" => Suite::Components,
            "bins" => Suite::Bins,
            "reweight" => Suite::Reweight,
            "negprompt" => Suite::Negprompt,
            "geo-accuracy" => Suite::GeoAccuracy,
            _ => return Err(invalid(format!("unknown ablation suite `{s}`"))),
        })
    }
}

/// One swept setting: its metrics and its position on the plot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub series: String,
    pub x: f64,
    pub record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub suite: Suite,
    pub x_label: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.rows.iter().map(|r| r.record.clone()).collect()
    }

    pub fn chart(&self) -> LineChart {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.series.as_str()) {
                names.push(&r.series);
            }
        }
        let series = names
            .iter()
            .map(|&n| {
                let mut points: Vec<(f64, f64)> =
                    self.rows.iter().filter(|r| r.series == n).map(|r| (r.x, r.record.icr)).collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name: n.to_string(), points }
            })
            .collect();
        let title = format!("Ablation: {}", serde_json::to_value(self.suite).expect("suite").as_str().unwrap_or(""));
        LineChart::new(&title, &self.x_label, "generated ICR (%)", series)
    }
}

fn row(lab: &mut Lab, cfg: &RunConfig, series: &str, x: f64, setting: &str) -> Result<AblationRow> {
    Ok(AblationRow {
        series: series.to_string(),
        x,
        record: lab.run(cfg, setting)?,
    })
}

fn negative_count(cfg: &RunConfig) -> usize {
    match cfg.negative {
        Negative::Geometry(_, k) => k,
        _ => 16,
    }
}

/// Runs one σ of the geometric-accuracy sweep; `x` is the mean bin IoU.
pub fn geo_accuracy_row(lab: &mut Lab, cfg: &RunConfig, sigma: f64) -> Result<AblationRow> {
    let c = RunConfig { geo_sigma: sigma, ..cfg.clone() };
    let iou = lab.model(&c)?.stats.mean_iou.unwrap_or(1.0);
    row(lab, &c, "geo-accuracy", iou, &format!("sigma={sigma}"))
}

pub fn run_ablations(lab: &mut Lab, cfg: &RunConfig, suite: Suite) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let x_label;
    match suite {
        Suite::Components => {
            x_label = "components enabled".to_string();
            let with_geometry = RunConfig { reweight: Reweight::None, ..cfg.clone() };
            rows.push(row(lab, &cfg.clone().baseline(), "components", 0.0, "baseline")?);
            rows.push(row(lab, &concept_only(cfg), "components", 1.0, "+concept")?);
            rows.push(row(lab, &with_geometry, "components", 2.0, "+geometry")?);
            rows.push(row(lab, cfg, "components", 3.0, "+reweight")?);
        }
        Suite::Bins => {
            x_label = "bin side (px) / selected bins".to_string();
            for bin in [4usize, 8, 16] {
                if cfg.image_size % bin != 0 {
                    continue;
                }
                let cells = (cfg.image_size / bin).pow(2);
                let c = RunConfig {
                    bin,
                    negative: Negative::Geometry(NegativeStrategy::Uniform, (cells / 4).max(1)),
                    ..cfg.clone()
                };
                rows.push(row(lab, &c, "bin side", bin as f64, &format!("bin={bin}"))?);
            }
            for k in [2usize, 4, 8, 16] {
                let c = RunConfig {
                    k_cap: k,
                    reweight: Reweight::Confidence,
                    alpha: 1.0,
                    oracle_confidence: ConfidenceMode::Uniform,
                    ..cfg.clone()
                };
                rows.push(row(lab, &c, "selected bins", k as f64, &format!("k={k}"))?);
            }
        }
        Suite::Reweight => {
            x_label = "alpha".to_string();
            let none = RunConfig { reweight: Reweight::None, ..cfg.clone() };
            rows.push(row(lab, &none, "none", 1.0, "none")?);
            for alpha in [0.25, 0.5, 0.75] {
                let c = RunConfig { reweight: Reweight::Intent, alpha, ..cfg.clone() };
                rows.push(row(lab, &c, "intent", alpha, &format!("intent a={alpha}"))?);
            }
            for alpha in [0.5, 1.0, 2.0] {
                let c = RunConfig {
                    reweight: Reweight::Confidence,
                    alpha,
                    oracle_confidence: ConfidenceMode::Uniform,
                    ..cfg.clone()
                };
                rows.push(row(lab, &c, "confidence", alpha, &format!("confidence a={alpha}"))?);
            }
        }
        Suite::Negprompt => {
            x_label = "negative prompt".to_string();
            let k = negative_count(cfg);
            let options = [
                Negative::None,
                Negative::Concept,
                Negative::Geometry(NegativeStrategy::Uniform, k),
                Negative::Geometry(NegativeStrategy::Random, k),
            ];
            for (i, neg) in options.into_iter().enumerate() {
                let c = RunConfig { negative: neg, ..cfg.clone() };
                rows.push(row(lab, &c, "negative", i as f64, &neg.to_string())?);
            }
        }
        Suite::GeoAccuracy => {
            x_label = "mean bin IoU".to_string();
            for sigma in GEO_SIGMAS {
                rows.push(geo_accuracy_row(lab, cfg, sigma)?);
            }
        }
    }
    Ok(AblationReport { suite, x_label, rows })
}
