//! Builds a small two-layer network on the tape, checks its gradients against
//! finite differences, then fits it to a sine curve with Adam.

use geomlab_numerics::{grad_check, AdamConfig, AdamState, GradCheckOptions, Graph, ParamSet, Result, Tensor, Var};

fn init(seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    let wave = |s: f64| move |i: usize| ((i as f64 + s) * 1.37).sin() * 0.8;
    p.insert("w1", Tensor::from_fn(vec![1, 16], wave(seed as f64)), true).unwrap();
    p.insert("b1", Tensor::from_fn(vec![16], wave(seed as f64 + 3.0)), true).unwrap();
    p.insert("w2", Tensor::from_fn(vec![16, 1], wave(seed as f64 + 7.0)), true).unwrap();
    p
}

fn loss(g: &mut Graph<f64>, p: &ParamSet<f64>, xs: &[f64]) -> Result<Var> {
    let x = g.input(Tensor::new([xs.len(), 1], xs.to_vec())?)?;
    let target = g.input(Tensor::new([xs.len(), 1], xs.iter().map(|v| v.sin()).collect())?)?;
    let (w1, b1, w2) = (g.param(p, "w1")?, g.param(p, "b1")?, g.param(p, "w2")?);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.silu(h)?;
    let y = g.linear(h, w2, None)?;
    g.weighted_mse(y, target, None)
}

fn main() -> Result<()> {
    let xs: Vec<f64> = (0..64).map(|i| -3.0 + 6.0 * i as f64 / 63.0).collect();
    let mut params = init(1);

    let report = grad_check(&params, |g, p| loss(g, p, &xs), GradCheckOptions::default())?;
    println!("gradient check passed: {} (worst relative error {:.2e})", report.passed, report.worst());

    let mut adam = AdamState::new(AdamConfig::with_lr(0.02));
    for step in 0..=1500 {
        params.zero_grad();
        let mut g = Graph::new();
        let l = loss(&mut g, &params, &xs)?;
        g.backward(l, &mut params)?;
        adam.step(&mut params)?;
        if step % 300 == 0 {
            println!("step {step:4} mse {:.5}", g.value(l).data()[0]);
        }
    }
    Ok(())
}
