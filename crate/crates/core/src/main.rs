use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use geomlab::dataset::{build_dataset, BuildOptions, Manifest};
use geomlab::diffusion::{attention_map, Denoiser};
use geomlab::eval::{frechet, icr, to_csv, to_jsonl, MetricsRecord};
use geomlab::image::GrayImage;
use geomlab::runner::pipeline::{build_examples, to_model_space, vocab_for};
use geomlab::runner::{
    init_threads, learn_removal_tokens, run_ablations, run_correlation, run_data_removal, run_model_removal, run_preliminary, run_trend,
    with_overrides, Experiment, Lab, Negative, RunConfig, Suite, TREND_LEVELS,
};
use geomlab::vocab::ConceptKind;
use geomlab::{GeomError, Result};

#[derive(Parser)]
#[command(name = "geomlab", version, about = "Implicit-concept erasure experiments at desk scale")]
struct Cli {
    /// Directory for cached checkpoints, shared across invocations.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    DataRemoval,
    ModelRemoval,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Correlation,
    IcrTrend,
    Attention,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key=value run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        with_overrides(&base, &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic dataset with stamped implicit concepts.
    BuildData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        icr: f64,
        #[arg(long, default_value = "watermark")]
        kind: ConceptKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Stamps per stamped image.
        #[arg(long, default_value_t = 1)]
        stamps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "data-removal")]
        mode: Mode,
        /// Dataset directory written by build-data; built from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Contaminated checkpoint to extend in model-removal mode.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate images from a checkpoint for the test-split prompts.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// none, concept, concept+uniform:K or concept+random:K.
        #[arg(long)]
        neg: Option<Negative>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ICR and Fréchet distance of generated images against a clean reference.
    Eval {
        #[arg(long)]
        gen_dir: PathBuf,
        #[arg(long)]
        ref_manifest: PathBuf,
        #[arg(long)]
        kind: ConceptKind,
        #[arg(long, default_value_t = geomlab::detector::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value = "eval")]
        setting: String,
        /// Directory for metrics.csv and metrics.jsonl; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation sweep and write CSV and SVG.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preliminary studies: concept emergence, prompt correlation, attention maps.
    Study {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        which: Study,
        /// Evenly spaced evaluation points per training run (icr-trend).
        #[arg(long, default_value_t = 1)]
        snapshots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment named by the config's `experiment` key.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = init_threads().and_then(|_| dispatch(Cli::parse())) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn write(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_records(dir: &Path, stem: &str, records: &[MetricsRecord]) -> Result<()> {
    write(dir.join(format!("{stem}.csv")), &to_csv(records))?;
    write(dir.join(format!("{stem}.jsonl")), &to_jsonl(records)?)
}

fn lab_for(cache: &Option<PathBuf>, cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Lab> {
    let mut lab = Lab::new(cache.clone());
    if let Some(dir) = data {
        let m = Manifest::read(dir)?;
        let h = &m.header;
        if h.kind != cfg.kind || h.width != cfg.image_size {
            return Err(GeomError::InvalidArgument(format!(
                "dataset {} ({}, {}px) does not match the config ({}, {}px)",
                dir.display(),
                h.kind,
                h.width,
                cfg.kind,
                cfg.image_size
            )));
        }
        lab.insert_dataset(cfg, m);
    }
    Ok(lab)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData { n, icr, kind, seed, n_test, size, stamps, out } => {
            let m = build_dataset(n, icr, kind, seed, BuildOptions { image_size: size, n_test, stamps_per_image: stamps })?;
            m.write(&out)?;
            println!("wrote {} ({} stamped of {n})", out.display(), m.header.stamped);
        }
        Command::Train { cfg, mode, data, from, out } => {
            let mut cfg = cfg.load()?;
            if let Mode::Baseline = mode {
                cfg = cfg.baseline();
            }
            let mut lab = lab_for(&cli.cache, &cfg, &data)?;
            let model = match mode {
                Mode::Baseline | Mode::DataRemoval => (*lab.model(&cfg)?.model).clone(),
                Mode::ModelRemoval => train_tokens(&mut lab, &cfg, from.as_deref())?,
            };
            fs::create_dir_all(&out)?;
            model.save(out.join("model.gelb"))?;
            cfg.save(out.join("run.cfg"))?;
            println!("wrote {}", out.join("model.gelb").display());
        }
        Command::Sample { cfg, ckpt, neg, count, seed, data, out } => {
            let mut cfg = cfg.load()?;
            cfg.negative = neg.unwrap_or(cfg.negative);
            cfg.n_gen = count.unwrap_or(cfg.n_gen);
            cfg.sample_seed = seed.unwrap_or(cfg.sample_seed);
            let mut lab = lab_for(&cli.cache, &cfg, &data)?;
            let model = Denoiser::load(&ckpt)?;
            let images = lab.generate_with(&model, &cfg)?;
            fs::create_dir_all(&out)?;
            for (i, img) in images.iter().enumerate() {
                img.save_pgm(out.join(format!("{i:05}.pgm")))?;
            }
            cfg.save(out.join("run.cfg"))?;
            println!("wrote {} images to {}", images.len(), out.display());
        }
        Command::Eval { gen_dir, ref_manifest, kind, tau, setting, out } => {
            let record = eval_dir(&gen_dir, &ref_manifest, kind, tau, &setting)?;
            match out {
                Some(dir) => write_records(&dir, "metrics", &[record])?,
                None => print!("{}", to_csv(&[record])),
            }
        }
        Command::Ablate { cfg, suite, out } => {
            let cfg = cfg.load()?;
            let mut lab = Lab::new(cli.cache);
            let report = run_ablations(&mut lab, &cfg, suite)?;
            let stem = format!("ablation_{}", suite_name(suite));
            write_records(&out, &stem, &report.records())?;
            write(out.join(format!("{stem}.svg")), &report.chart().to_svg())?;
        }
        Command::Study { cfg, which, snapshots, out } => {
            let cfg = cfg.load()?;
            let mut lab = Lab::new(cli.cache);
            match which {
                Study::IcrTrend => {
                    let trend = run_trend(&mut lab, &cfg, &TREND_LEVELS, snapshots)?;
                    let report = geomlab::runner::PreliminaryReport { trend, spearman: 0.0, correlation: None };
                    write(out.join("icr_trend.csv"), &report.to_csv())?;
                    write(out.join("icr_trend.svg"), &report.chart().to_svg())?;
                }
                Study::Correlation => {
                    let r = run_correlation(&mut lab, &cfg, 2 * cfg.n_gen)?;
                    let csv = format!(
                        "run_id,n,r,p,icr_with_word,icr_without_word,seed\n{},{},{:.6},{:.6},{:.4},{:.4},{}\n",
                        cfg.hash(),
                        r.n,
                        r.r,
                        r.p,
                        r.icr_with_word,
                        r.icr_without_word,
                        cfg.sample_seed
                    );
                    write(out.join("correlation.csv"), &csv)?;
                }
                Study::Attention => attention_study(&mut lab, &cfg, &out)?,
            }
        }
        Command::Run { cfg, out } => {
            let cfg = cfg.load()?;
            let mut lab = Lab::new(cli.cache);
            match cfg.experiment {
                Experiment::Preliminary => {
                    let r = run_preliminary(&mut lab, &cfg, 1)?;
                    write(out.join("icr_trend.csv"), &r.to_csv())?;
                    write(out.join("icr_trend.svg"), &r.chart().to_svg())?;
                    write(out.join("preliminary.json"), &serde_json::to_string_pretty(&r)?)?;
                }
                Experiment::DataRemoval => write_records(&out, "data_removal", &run_data_removal(&mut lab, &cfg)?)?,
                Experiment::ModelRemoval => {
                    let r = run_model_removal(&mut lab, &cfg)?;
                    write_records(&out, "model_removal", &r.records)?;
                    println!("pre-existing parameters unchanged: {}", r.frozen);
                }
                Experiment::Ablation => {
                    for suite in [Suite::Components, Suite::Bins, Suite::Reweight, Suite::Negprompt, Suite::GeoAccuracy] {
                        let report = run_ablations(&mut lab, &cfg, suite)?;
                        let stem = format!("ablation_{}", suite_name(suite));
                        write_records(&out, &stem, &report.records())?;
                        write(out.join(format!("{stem}.svg")), &report.chart().to_svg())?;
                    }
                }
            }
            cfg.save(out.join("run.cfg"))?;
        }
    }
    Ok(())
}

fn suite_name(suite: Suite) -> String {
    serde_json::to_value(suite).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Tokens-only training on top of a contaminated checkpoint; trains the
/// config's baseline when no checkpoint is given.
fn train_tokens(lab: &mut Lab, cfg: &RunConfig, from: Option<&Path>) -> Result<Denoiser> {
    let base = match from {
        Some(p) => Denoiser::load(p)?,
        None => (*lab.model(&cfg.clone().baseline())?.model).clone(),
    };
    Ok(learn_removal_tokens(lab, cfg, &base)?.0)
}

fn eval_dir(gen_dir: &Path, ref_dir: &Path, kind: ConceptKind, tau: f64, setting: &str) -> Result<MetricsRecord> {
    let mut paths: Vec<PathBuf> = fs::read_dir(gen_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    let images: Vec<GrayImage> = paths.iter().map(GrayImage::load_pgm).collect::<Result<_>>()?;
    if images.is_empty() {
        return Err(GeomError::InvalidArgument(format!("no .pgm images in {}", gen_dir.display())));
    }
    let reference = Manifest::read(ref_dir)?;
    let mut refs: Vec<GrayImage> = reference.test().map(|s| s.image.clone()).collect();
    if refs.is_empty() {
        refs = reference.train().filter(|s| s.boxes.is_empty()).map(|s| s.image.clone()).collect();
    }
    let detector = geomlab::detector::TemplateDetector::new(&[kind], images[0].width, tau)?;
    let rate = icr(&images, kind, &detector)?;
    let fid = frechet(&images, &refs)?;
    let (run_id, seed) = match RunConfig::load(gen_dir.join("run.cfg")) {
        Ok(cfg) => (cfg.hash(), cfg.sample_seed),
        Err(_) => (content_hash(&images), 0),
    };
    Ok(MetricsRecord::new(run_id, setting, fid, rate, images.len(), seed))
}

fn content_hash(images: &[GrayImage]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for img in images {
        h.update(img.to_bytes());
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Cross-attention of the concept token and its first location token on a
/// stamped training image, written as upscaled PGMs plus a CSV of masses.
fn attention_study(lab: &mut Lab, cfg: &RunConfig, out: &Path) -> Result<()> {
    let trained = lab.model(cfg)?;
    let model = &trained.model;
    let data = lab.dataset(cfg)?;
    let sample = data
        .train()
        .find(|s| !s.boxes.is_empty())
        .ok_or_else(|| GeomError::InvalidArgument("dataset has no stamped images".into()))?;
    let vocab = vocab_for(cfg)?;
    let (examples, _) = build_examples(&data, cfg, &vocab)?;
    let ex = examples.iter().find(|e| e.id == sample.id).expect("sample is in the training split");
    let t = model.schedule.steps / 2;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.sample_seed);
    let eps: Vec<f32> = (0..ex.image.len())
        .map(|_| rand_distr::Distribution::<f32>::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let z = model.schedule.forward_noise(&to_model_space(&sample.image), t, &eps)?;
    fs::create_dir_all(out)?;
    sample.image.save_pgm(out.join("input.pgm"))?;
    let mut csv = String::from("run_id,position,token,total_mass\n");
    for (pos, &tok) in ex.tokens.iter().enumerate() {
        if tok == geomlab::vocab::PAD_ID {
            break;
        }
        let map = attention_map(model, &z, t, &ex.tokens, pos)?;
        let name = model.vocab.token(tok).unwrap_or("?").to_string();
        csv.push_str(&format!("{},{pos},{name},{:.6}\n", cfg.hash(), map.total()));
        let img = GrayImage::new(map.side, map.side, map.normalized.clone())?;
        upscale(&img, cfg.image_size / map.side).save_pgm(out.join(format!("attn_{pos:02}.pgm")))?;
    }
    write(out.join("attention.csv"), &csv)?;
    Ok(())
}

fn upscale(img: &GrayImage, k: usize) -> GrayImage {
    let k = k.max(1);
    let (w, h) = (img.width * k, img.height * k);
    let data = (0..w * h).map(|i| img.get((i % w) / k, (i / w) / k)).collect();
    GrayImage::new(w, h, data).expect("scaled size")
}
