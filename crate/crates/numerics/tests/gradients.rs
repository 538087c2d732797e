use geomlab_numerics::{
    check_against, grad_check, GradCheckOptions, Graph, ParamSet, Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0) * scale)
}

fn params(entries: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, shape) in entries {
        p.insert(*name, random(&mut rng, shape, 0.5), true).unwrap();
    }
    p
}

/// Projects an arbitrary tensor to a scalar with fixed pseudo-random weights
/// so every output element influences the loss differently.
fn probe_loss(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i as f64) * 0.731 + 0.2).sin());
    let w = g.input(w)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn assert_passes(p: &ParamSet<f64>, f: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>) {
    let report = grad_check(p, f, GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn elementwise_ops() {
    let p = params(&[("a", &[3, 4]), ("b", &[3, 4]), ("s", &[1])], 1);
    assert_passes(&p, |g, p| {
        let a = g.param(p, "a")?;
        let b = g.param(p, "b")?;
        let s = g.param(p, "s")?;
        let x = g.add(a, b)?;
        let y = g.mul(x, a)?;
        let z = g.sub(y, b)?;
        let z = g.scalar_mul(z, s)?;
        let z = g.scale(z, 1.7)?;
        let z = g.add_const(z, 0.3)?;
        let z = g.silu(z)?;
        probe_loss(g, z)
    });
}

#[test]
fn relu_away_from_kink() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new([4], vec![-0.8, -0.2, 0.3, 0.9]).unwrap(), true)
        .unwrap();
    assert_passes(&p, |g, p| {
        let a = g.param(p, "a")?;
        let r = g.relu(a)?;
        probe_loss(g, r)
    });
}

#[test]
fn matmul_and_linear() {
    let p = params(&[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5])], 2);
    assert_passes(&p, |g, p| {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let y = g.linear(x, w, Some(b))?;
        probe_loss(g, y)
    });
}

#[test]
fn conv_stride_one_and_two() {
    for stride in [1, 2] {
        let p = params(&[("x", &[2, 3, 6, 5]), ("w", &[4, 3, 3, 3]), ("b", &[4])], 3);
        assert_passes(&p, move |g, p| {
            let x = g.param(p, "x")?;
            let w = g.param(p, "w")?;
            let b = g.param(p, "b")?;
            let y = g.conv2d(x, w, stride, 1)?;
            let y = g.add_channel_bias(y, b)?;
            probe_loss(g, y)
        });
    }
}

#[test]
fn transposed_conv() {
    let p = params(&[("x", &[2, 3, 3, 4]), ("w", &[3, 2, 4, 4])], 4);
    assert_passes(&p, |g, p| {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let y = g.conv_transpose2d(x, w, 2, 1)?;
        probe_loss(g, y)
    });
}

#[test]
fn attention_block() {
    let p = params(
        &[
            ("q", &[2, 5, 4]),
            ("k", &[2, 3, 4]),
            ("v", &[2, 3, 6]),
            ("wq", &[4, 4]),
        ],
        5,
    );
    assert_passes(&p, |g, p| {
        let q = g.param(p, "q")?;
        let wq = g.param(p, "wq")?;
        let q = g.linear(q, wq, None)?;
        let k = g.param(p, "k")?;
        let v = g.param(p, "v")?;
        let (out, _) = g.attention(q, k, v)?;
        probe_loss(g, out)
    });
}

#[test]
fn masked_attention() {
    let p = params(&[("q", &[2, 5, 4]), ("k", &[2, 3, 4]), ("v", &[2, 3, 6])], 8);
    let mask = [true, false, true, true, true, false];
    assert_passes(&p, |g, p| {
        let q = g.param(p, "q")?;
        let k = g.param(p, "k")?;
        let v = g.param(p, "v")?;
        let (out, _) = g.masked_attention(q, k, v, Some(&mask))?;
        probe_loss(g, out)
    });
    let mut g = Graph::<f64>::new();
    let q = g.param(&p, "q").unwrap();
    let k = g.param(&p, "k").unwrap();
    let v = g.param(&p, "v").unwrap();
    let (_, w) = g.masked_attention(q, k, v, Some(&mask)).unwrap();
    let w = g.value(w).data();
    for row in 0..10 {
        let blocked = if row < 5 { 1 } else { 2 };
        assert_eq!(w[row * 3 + blocked], 0.0);
        assert!((w[row * 3..row * 3 + 3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn embedding_concat_repeat_and_channel_bias() {
    let p = params(
        &[
            ("base", &[4, 3]),
            ("ext", &[2, 3]),
            ("pos", &[5, 3]),
            ("tb", &[2, 2]),
            ("img", &[2, 2, 3, 3]),
        ],
        6,
    );
    assert_passes(&p, |g, p| {
        let base = g.param(p, "base")?;
        let ext = g.param(p, "ext")?;
        let table = g.concat(base, ext, 0)?;
        // id 1 appears twice so its gradient sums two rows
        let e = g.embedding(table, &[0, 1, 5, 1, 4, 2, 3, 5, 0, 1], &[2, 5])?;
        let pos = g.param(p, "pos")?;
        let pos = g.repeat_batch(pos, 2)?;
        let e = g.add(e, pos)?;
        let img = g.param(p, "img")?;
        let tb = g.param(p, "tb")?;
        let img = g.add_channel_bias(img, tb)?;
        let both = g.concat(img, img, 1)?;
        let l1 = probe_loss(g, e)?;
        let l2 = probe_loss(g, both)?;
        g.add(l1, l2)
    });
}

#[test]
fn weighted_mse_all_inputs() {
    let p = params(&[("pred", &[2, 1, 4, 4]), ("target", &[2, 1, 4, 4]), ("w", &[2, 1, 4, 4])], 7);
    assert_passes(&p, |g, p| {
        let a = g.param(p, "pred")?;
        let b = g.param(p, "target")?;
        let w = g.param(p, "w")?;
        let l = g.weighted_mse(a, b, Some(w))?;
        let m = g.mean(a)?;
        g.add(l, m)
    });
}

fn two_layer_net(g: &mut Graph<f64>, p: &ParamSet<f64>) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = g.input(random(&mut rng, &[6, 4], 1.0))?;
    let target = g.input(random(&mut rng, &[6, 3], 1.0))?;
    let (w1, b1, w2, b2) = (g.param(p, "w1")?, g.param(p, "b1")?, g.param(p, "w2")?, g.param(p, "b2")?);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.silu(h)?;
    let y = g.linear(h, w2, Some(b2))?;
    g.weighted_mse(y, target, None)
}

#[test]
fn random_two_layer_net_matches_central_differences() {
    for seed in 0..5 {
        let p = params(&[("w1", &[4, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], seed);
        let report = grad_check(&p, two_layer_net, GradCheckOptions::default()).unwrap();
        assert!(report.passed && report.worst() < 1e-4, "{report:#?}");
        assert_eq!(report.params.len(), 4);
    }
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let p = params(&[("w1", &[4, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], 11);
    let mut analytic = p.clone();
    let mut g = Graph::new();
    let l = two_layer_net(&mut g, &analytic).unwrap();
    g.backward(l, &mut analytic).unwrap();
    let good = check_against(&p, &two_layer_net, &analytic, GradCheckOptions::default()).unwrap();
    assert!(good.passed);
    let corrupted: Vec<f64> = analytic.get("w2").unwrap().grad().unwrap().iter().map(|v| v * 1.01).collect();
    analytic.get_mut("w2").unwrap().set_grad(Some(corrupted)).unwrap();
    let bad = check_against(&p, &two_layer_net, &analytic, GradCheckOptions::default()).unwrap();
    assert!(!bad.passed);
    let w2 = bad.params.iter().find(|c| c.name == "w2").unwrap();
    assert!(w2.max_rel_error > 5e-3);
}

#[test]
fn frozen_parameters_are_skipped() {
    let mut p = params(&[("w1", &[4, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], 12);
    p.set_trainable("w1", false).unwrap();
    let report = grad_check(&p, two_layer_net, GradCheckOptions::default()).unwrap();
    assert!(report.passed);
    assert!(report.params.iter().all(|c| c.name != "w1"));
}
