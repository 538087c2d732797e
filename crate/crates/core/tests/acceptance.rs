//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails.
//!
//! The model-based criteria share one `Lab` and run in a fixed order so the
//! emergence study is timed from an empty cache. Set
//! `GEOMLAB_ACCEPTANCE_CACHE=<dir>` to reuse checkpoints between runs; the
//! emergence runtime check then reports FAIL because it was not measured.
//!
//! Tests in this file hold a shared lock so timings are not skewed by each
//! other on small machines.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use geomlab::dataset::{build_dataset, BuildOptions};
use geomlab::detector::{validate_detector, TemplateDetector};
use geomlab::diffusion::{loss_graph, Denoiser, DenoiserConfig, NoiseSchedule, StepBatch, TrainExample};
use geomlab::eval::{bootstrap_expected_max, fr_score, frechet_features, spearman, BootstrapConfig};
use geomlab::geometry::{box_to_bins, weight_map, BinBox, BinGrid, Detection, Region, WeightMode};
use geomlab::runner::{
    geo_accuracy_row, run_correlation, run_data_removal, run_model_removal, run_trend, Lab, RunConfig, TREND_LEVELS,
};
use geomlab::vocab::{pad_caption, ConceptKind, Vocab};
use geomlab_numerics::{grad_check, GradCheckOptions, Graph, NumericsError, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{verdict}] criterion {id:>2} {name}: {detail}");
    pass
}

// ---------------------------------------------------------------- numerics

fn random_params(entries: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, shape) in entries {
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0) * 0.5);
        p.insert(*name, t, true).unwrap();
    }
    p
}

fn probe(g: &mut Graph<f64>, y: Var) -> geomlab_numerics::Result<Var> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i as f64) * 0.731 + 0.2).sin());
    let w = g.input(w)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

type OpLoss = Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> geomlab_numerics::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<(&'static str, &'static [usize])>, OpLoss)> {
    vec![
        (
            "add/sub/mul/scale/add_const/scalar_mul/silu",
            vec![("a", &[3, 4]), ("b", &[3, 4]), ("s", &[1])],
            Box::new(|g, p| {
                let (a, b, s) = (g.param(p, "a")?, g.param(p, "b")?, g.param(p, "s")?);
                let x = g.add(a, b)?;
                let x = g.mul(x, a)?;
                let x = g.sub(x, b)?;
                let x = g.scalar_mul(x, s)?;
                let x = g.scale(x, 1.3)?;
                let x = g.add_const(x, 0.2)?;
                let x = g.silu(x)?;
                probe(g, x)
            }),
        ),
        (
            "relu",
            vec![("a", &[5])],
            Box::new(|g, p| {
                let a = g.param(p, "a")?;
                let a = g.add_const(a, 0.05)?;
                let r = g.relu(a)?;
                probe(g, r)
            }),
        ),
        (
            "matmul/linear/transpose",
            vec![("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5]), ("m", &[4, 3])],
            Box::new(|g, p| {
                let (x, w, b, m) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?, g.param(p, "m")?);
                let y = g.linear(x, w, Some(b))?;
                let mt = g.transpose(m)?;
                let z = g.matmul(mt, w)?;
                let (ly, lz) = (probe(g, y)?, probe(g, z)?);
                g.add(ly, lz)
            }),
        ),
        (
            "batch_matmul/reshape",
            vec![("a", &[2, 3, 4]), ("b", &[2, 4, 2])],
            Box::new(|g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let c = g.batch_matmul(a, b)?;
                let c = g.reshape(c, &[3, 4])?;
                probe(g, c)
            }),
        ),
        (
            "conv2d/add_channel_bias",
            vec![("x", &[2, 2, 6, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
            Box::new(|g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y1 = g.conv2d(x, w, 1, 1)?;
                let y2 = g.conv2d(x, w, 2, 1)?;
                let y1 = g.add_channel_bias(y1, b)?;
                let (l1, l2) = (probe(g, y1)?, probe(g, y2)?);
                g.add(l1, l2)
            }),
        ),
        (
            "conv_transpose2d",
            vec![("x", &[2, 3, 3, 3]), ("w", &[3, 2, 4, 4])],
            Box::new(|g, p| {
                let (x, w) = (g.param(p, "x")?, g.param(p, "w")?);
                let y = g.conv_transpose2d(x, w, 2, 1)?;
                probe(g, y)
            }),
        ),
        (
            "softmax/add_bias",
            vec![("x", &[3, 5]), ("b", &[5])],
            Box::new(|g, p| {
                let (x, b) = (g.param(p, "x")?, g.param(p, "b")?);
                let y = g.add_bias(x, b)?;
                let y = g.softmax(y)?;
                probe(g, y)
            }),
        ),
        (
            "embedding/concat/repeat_batch",
            vec![("t", &[5, 3]), ("u", &[2, 3])],
            Box::new(|g, p| {
                let (t, u) = (g.param(p, "t")?, g.param(p, "u")?);
                let e = g.embedding(t, &[0, 2, 2, 4], &[2, 2])?;
                let r = g.repeat_batch(u, 2)?;
                let c = g.concat(e, r, 1)?;
                probe(g, c)
            }),
        ),
        (
            "weighted_mse/mean",
            vec![("a", &[2, 1, 3, 3]), ("b", &[2, 1, 3, 3]), ("w", &[2, 1, 3, 3])],
            Box::new(|g, p| {
                let (a, b, w) = (g.param(p, "a")?, g.param(p, "b")?, g.param(p, "w")?);
                let l1 = g.weighted_mse(a, b, Some(w))?;
                let l2 = g.weighted_mse(a, b, None)?;
                let m = g.mean(a)?;
                let s = g.add(l1, l2)?;
                g.add(s, m)
            }),
        ),
        (
            "masked_attention",
            vec![("q", &[2, 3, 4]), ("k", &[2, 5, 4]), ("v", &[2, 5, 3])],
            Box::new(|g, p| {
                let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
                let keep = [true, true, false, true, false, true, false, true, true, true];
                let (out, _) = g.masked_attention(q, k, v, Some(&keep))?;
                probe(g, out)
            }),
        ),
    ]
}

/// Tiny denoiser in f64 with every parameter randomized so no gradient is
/// trivially zero, plus one re-weighted batch with padded captions.
fn tiny_train_setup() -> (DenoiserConfig, NoiseSchedule, ParamSet<f64>, StepBatch) {
    let cfg = DenoiserConfig::tiny();
    let grid = BinGrid::square(cfg.image_size, 4).unwrap();
    let mut model = Denoiser::new(cfg.clone(), NoiseSchedule::default(), Vocab::base(), 5).unwrap();
    model.extend_vocab(&[ConceptKind::Watermark], Some(&grid), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params: ParamSet<f64> = model.params.cast();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v = 0.7 * *v + 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let concept = model.vocab.concept_id(ConceptKind::Watermark).unwrap();
    let loc = model.vocab.location_id(&grid, 3).unwrap();
    let mut caption = model.vocab.encode("a dark circle").unwrap();
    caption.extend([concept, loc]);
    let mut tokens = pad_caption(&caption);
    tokens.truncate(cfg.max_len);
    let per = cfg.image_size * cfg.image_size;
    let examples: Vec<TrainExample> = (0..2)
        .map(|i| TrainExample {
            id: format!("g{i}"),
            image: (0..per).map(|j| ((i * per + j) as f32 * 0.37).sin()).collect(),
            tokens: tokens.clone(),
            weights: Some((0..per).map(|j| if j % 3 == 0 { 0.5 } else { 1.25 }).collect()),
        })
        .collect();
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let batch = StepBatch::draw(&refs, &model.schedule, 0.0, &mut rng);
    (cfg, model.schedule.clone(), params, batch)
}

#[test]
fn criterion_01_gradients() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (name, entries, loss) in op_cases() {
        let p = random_params(&entries, &mut rng);
        let r = grad_check(&p, |g, p| loss(g, p), GradCheckOptions::default()).unwrap();
        worst = worst.max(r.worst());
        if !r.passed {
            failed.push(name);
        }
    }
    // The loss is a mean over many pixels with tiny per-entry gradients, so
    // a wider difference step keeps round-off well below tolerance.
    let (cfg, schedule, params, batch) = tiny_train_setup();
    let full = grad_check(
        &params,
        |g, p| {
            loss_graph(&cfg, &schedule, p, g, &batch).map_err(|e| NumericsError::InvalidArgument {
                op: "loss_graph",
                detail: e.to_string(),
            })
        },
        GradCheckOptions { step: 1e-4, ..Default::default() },
    )
    .unwrap();
    if !full.passed {
        failed.push("train_step graph");
    }
    let elapsed = start.elapsed();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(60);
    let detail = format!(
        "ops max rel err {worst:.2e}, full graph {:.2e} over {} tensors, {:.1}s, failures {failed:?}",
        full.worst(),
        full.params.len(),
        elapsed.as_secs_f64()
    );
    assert!(report(1, "gradient checks", ok, &detail), "{detail}");
}

// ---------------------------------------------------------------- geometry

#[test]
fn criterion_02_weight_maps() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let modes = [WeightMode::Intent, WeightMode::Literal, WeightMode::Confidence];
    let mut max_sum_err: f64 = 0.0;
    let mut ordering_ok = true;
    let mut ones_ok = true;
    for case in 0..1000 {
        let bin = [1usize, 2, 4][rng.random_range(0..3)];
        let side = bin * rng.random_range(1..=8);
        let grid = BinGrid::square(side, bin).unwrap();
        let t = grid.total();
        let k = rng.random_range(0..=t);
        let cells: BTreeSet<usize> = rand::seq::index::sample(&mut rng, t, k).into_iter().collect();
        let p = rng.random_range(0.0..1.0);
        let mode = modes[case % 3];
        let alpha = if mode == WeightMode::Confidence { rng.random_range(0.05..3.0) } else { rng.random_range(0.01..1.0) };
        let regions = [Region { cells: cells.clone(), p }];
        let map = weight_map(&grid, &regions, alpha, mode).unwrap();
        max_sum_err = max_sum_err.max((map.sum() - t as f64).abs());
        if mode == WeightMode::Intent && k > 0 && k < t {
            let inside = map.weights[*cells.iter().next().unwrap()];
            let outside = (0..t).find(|c| !cells.contains(c)).map(|c| map.weights[c]).unwrap();
            ordering_ok &= inside < outside;
        }
        if mode != WeightMode::Confidence {
            let ones = weight_map(&grid, &regions, 1.0, mode).unwrap();
            ones_ok &= ones.weights.iter().all(|&w| w == 1.0);
        }
    }
    let grid = BinGrid::square(4, 1).unwrap();
    let bx = BinBox { a1: 0, b1: 0, a2: 2, b2: 2 };
    let regions = [Region { cells: bx.cell_set(&grid), p: 1.0 }];
    let lit = weight_map(&grid, &regions, 0.25, WeightMode::Literal).unwrap();
    let worked = lit.get(0, 0) == 16.0 / 7.0 && lit.get(3, 3) == 4.0 / 7.0;
    let ok = max_sum_err <= 1e-9 && ordering_ok && ones_ok && worked;
    let detail = format!(
        "max |Σw−T| {max_sum_err:.1e}, intent inside<outside {ordering_ok}, α=1 all ones {ones_ok}, literal T=16 K=4 α=.25 → {:.6}/{:.6}",
        lit.get(0, 0),
        lit.get(3, 3)
    );
    assert!(report(2, "weight maps", ok, &detail), "{detail}");
}

#[test]
fn criterion_03_bin_arithmetic() {
    let _serial = serial();
    let grid = BinGrid::square(256, 32).unwrap();
    let worked = box_to_bins(&Detection::new(1.0, 40.0, 60.0, 100.0, 130.0), &grid).unwrap();
    let worked_ok = (worked.a1, worked.b1, worked.a2, worked.b2) == (1, 1, 4, 5);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0usize;
    for _ in 0..10_000 {
        let (bw, bh) = (rng.random_range(1..=16usize), rng.random_range(1..=16usize));
        let (w, h) = (bw * rng.random_range(1..=8usize), bh * rng.random_range(1..=8usize));
        let grid = BinGrid::new(w, h, bw, bh).unwrap();
        let a1 = rng.random_range(0.0..w as f64 - 0.01);
        let a2 = rng.random_range(a1 + 0.005..=w as f64);
        let b1 = rng.random_range(0.0..h as f64 - 0.01);
        let b2 = rng.random_range(b1 + 0.005..=h as f64);
        let bb = box_to_bins(&Detection::new(0.9, a1, b1, a2, b2), &grid).unwrap();
        let cells = bb.cell_set(&grid);
        let mut ok = bb.a2 <= grid.cols() && bb.b2 <= grid.rows();
        // Every pixel overlapping the box falls in a selected bin.
        for y in (b1.floor() as usize)..(b2.ceil() as usize) {
            for x in (a1.floor() as usize)..(a2.ceil() as usize) {
                ok &= cells.contains(&grid.cell(x / bw, y / bh));
            }
        }
        // The outer bins are touched by the box, so the cover is tight.
        ok &= (bb.a1 * bw) as f64 <= a1 && a1 < ((bb.a1 + 1) * bw) as f64;
        ok &= (((bb.a2 - 1) * bw) as f64) < a2 && a2 <= (bb.a2 * bw) as f64;
        ok &= (bb.b1 * bh) as f64 <= b1 && b1 < ((bb.b1 + 1) * bh) as f64;
        ok &= (((bb.b2 - 1) * bh) as f64) < b2 && b2 <= (bb.b2 * bh) as f64;
        bad += usize::from(!ok);
    }
    let ok = worked_ok && bad == 0;
    let detail = format!(
        "(40,60,100,130) on 256² / 32² → ({},{},{},{}); {bad} of 10000 random boxes violate the cover",
        worked.a1, worked.b1, worked.a2, worked.b2
    );
    assert!(report(3, "bin arithmetic", ok, &detail), "{detail}");
}

// ---------------------------------------------------------------- detector

#[test]
fn criterion_04_detector() {
    let _serial = serial();
    let det = TemplateDetector::all_kinds(32).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in ConceptKind::ALL {
        let data = build_dataset(1000, 0.5, kind, 404, BuildOptions { image_size: 32, n_test: 0, ..Default::default() }).unwrap();
        let samples: Vec<_> = data.train().cloned().collect();
        let s = validate_detector(&det, &samples, kind).unwrap();
        ok &= s.precision() >= 0.95 && s.recall() >= 0.95;
        parts.push(format!("{} P {:.3} R {:.3}", kind.name(), s.precision(), s.recall()));
    }
    let detail = parts.join(", ");
    assert!(report(4, "detector precision/recall", ok, &detail), "{detail}");
}

// ---------------------------------------------------------------- metrics

fn cloud(n: usize, d: usize, shift: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    z + shift[j]
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_09_metrics() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 16;
    let zero = vec![0.0; d];
    let a = cloud(5000, d, &zero, &mut rng);
    let self_fd = frechet_features(&a, &a).unwrap();

    // Equal covariances, so the distance is the squared mean offset.
    let shift: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 0.5 } else { -0.25 }).collect();
    let expected: f64 = shift.iter().map(|s| s * s).sum();
    let b = cloud(5000, d, &shift, &mut rng);
    let offset_fd = frechet_features(&a, &b).unwrap();
    let offset_err = (offset_fd - expected).abs() / expected;

    let fr = fr_score(9.05, 11.13);
    let fr_ok = fr == 9.05 * 11.13 / 100.0 && (fr - 1.007).abs() < 5e-4;

    let cfg = BootstrapConfig::default();
    let all = bootstrap_expected_max(&[true; 200], &cfg).unwrap();
    let flags: Vec<bool> = (0..10_000).map(|i| i % 100 < 9).collect();
    let (mean, _) = bootstrap_expected_max(&flags, &cfg).unwrap();
    let closed = 1.0 - (1.0f64 - 0.09).powi(cfg.group_size as i32);

    let ok = self_fd <= 1e-6 && offset_err <= 0.10 && fr_ok && all == (1.0, 0.0) && (mean - closed).abs() <= 0.02;
    let detail = format!(
        "FD(A,A) {self_fd:.1e}; offset FD {offset_fd:.4} vs {expected:.4} ({:.1}%); F·R(9.05, 11.13) {fr:.4}; \
         all-positive {all:?}; q=.09 bootstrap {mean:.4} vs closed form {closed:.4}",
        100.0 * offset_err
    );
    assert!(report(9, "metrics", ok, &detail), "{detail}");
}

// ---------------------------------------------------------------- determinism

fn geomlab(args: &[&str], cache: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_geomlab"))
        .args(args)
        .arg("--cache")
        .arg(cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run geomlab");
    assert!(out.status.success(), "geomlab {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs the full CLI chain in `dir` with a fresh cache and returns the CSVs.
fn cli_pipeline(dir: &Path) -> (String, String) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, ckpt, gen, eval, abl, cache) =
        (dir.join("data"), dir.join("ckpt"), dir.join("gen"), dir.join("eval"), dir.join("abl"), dir.join("cache"));
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "n=40\nn_test=100\nimage_size=16\nchannels=4\nsteps=6\nbatch_size=8\nn_gen=100\nsample_steps=3\npool=20\n",
    )
    .unwrap();
    geomlab(&["build-data", "--n", "40", "--n-test", "100", "--size", "16", "--seed", "3", "--out", &s(&data)], &cache);
    geomlab(&["train", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&ckpt)], &cache);
    geomlab(
        &["sample", "--config", &s(&cfg), "--ckpt", &s(&ckpt.join("model.gelb")), "--data", &s(&data), "--out", &s(&gen)],
        &cache,
    );
    geomlab(
        &["eval", "--gen-dir", &s(&gen), "--ref-manifest", &s(&data), "--kind", "watermark", "--out", &s(&eval)],
        &cache,
    );
    geomlab(&["ablate", "--suite", "components", "--config", &s(&cfg), "--out", &s(&abl)], &cache);
    (
        std::fs::read_to_string(eval.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(abl.join("ablation_components.csv")).unwrap(),
    )
}

#[test]
fn criterion_11_cli_determinism() {
    let _serial = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_pipeline(a.path());
    let second = cli_pipeline(b.path());
    let ok = first == second && first.0.lines().count() == 2 && first.1.lines().count() == 5;
    let detail = format!(
        "eval CSV identical {}, ablation CSV identical {} ({} rows)",
        first.0 == second.0,
        first.1 == second.1,
        first.1.lines().count().saturating_sub(1)
    );
    assert!(report(11, "CLI determinism", ok, &detail), "{detail}");
}

// ---------------------------------------------------------------- trained models

#[test]
fn criteria_05_to_08_and_10_trained_models() {
    let _serial = serial();
    let cache = std::env::var_os("GEOMLAB_ACCEPTANCE_CACHE").map(std::path::PathBuf::from);
    let cached = cache.is_some();
    let mut lab = Lab::new(cache);
    let cfg = RunConfig::default();
    let mut all = true;

    // Emergence: baselines on increasing training ICR, timed from scratch.
    let start = Instant::now();
    let trend = run_trend(&mut lab, &cfg, &TREND_LEVELS, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let x: Vec<f64> = trend.iter().map(|p| p.train_icr).collect();
    let y: Vec<f64> = trend.iter().map(|p| p.gen_icr).collect();
    let rho = spearman(&x, &y).unwrap();
    let at = |level: f64| trend.iter().find(|p| p.train_icr == level).map(|p| p.gen_icr).unwrap();
    let ok = rho > 0.0 && at(0.0) <= 2.0 && at(0.5) >= 20.0 && secs <= 600.0 && !cached;
    let points: Vec<String> = trend.iter().map(|p| format!("{:.0}%→{:.1}%", 100.0 * p.train_icr, p.gen_icr)).collect();
    let detail = format!(
        "{}, Spearman {rho:.3}, {secs:.0}s{}",
        points.join(" "),
        if cached { " (cached models, runtime not measured)" } else { "" }
    );
    all &= report(5, "implicit-concept emergence", ok, &detail);

    // Data removal at the default (icr 50%, watermark) setting.
    let rows = run_data_removal(&mut lab, &cfg).unwrap();
    let (base, concept, full) = (rows[0].icr, rows[1].icr, rows[2].icr);
    let ok = full <= 0.5 * base && full < concept && concept < base;
    let detail = format!("baseline {base:.1}%, concept-only {concept:.1}%, geometry erasing {full:.1}%");
    all &= report(6, "erasure effect", ok, &detail);

    // Model removal: new tokens only, contaminated weights frozen.
    let mr = run_model_removal(&mut lab, &cfg).unwrap();
    let (before, after) = (mr.records[0].icr, mr.records[1].icr);
    let ok = after < before && mr.frozen && mr.records[1].n == 500;
    let detail = format!(
        "contaminated {before:.1}% → tokens-only {after:.1}% over {} generations, pre-existing weights bit-identical {}",
        mr.records[1].n, mr.frozen
    );
    all &= report(7, "model removal", ok, &detail);

    // Geometric accuracy: the noiseless run is the erasing row above.
    let close = geo_accuracy_row(&mut lab, &cfg, 0.5).unwrap();
    let far = geo_accuracy_row(&mut lab, &cfg, 6.0).unwrap();
    let ok = close.x >= 0.6 && close.record.icr <= 2.0 * full && far.x <= 0.1 && far.record.icr > full;
    let detail = format!(
        "noiseless {full:.1}%, IoU {:.2} → {:.1}%, IoU {:.3} → {:.1}%",
        close.x, close.record.icr, far.x, far.record.icr
    );
    all &= report(8, "geometric accuracy", ok, &detail);

    // Correlation between an added concept word and detected presence.
    let corr = run_correlation(&mut lab, &cfg, 1000).unwrap();
    let ok = corr.p > 0.05;
    let detail = format!(
        "r {:.3}, p {:.3} over {} generations (ICR {:.1}% with word, {:.1}% without)",
        corr.r, corr.p, corr.n, corr.icr_with_word, corr.icr_without_word
    );
    all &= report(10, "prompt/presence correlation", ok, &detail);

    assert!(all, "at least one model-based criterion failed; see the lines above");
}
