use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly strided entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `loss` against central finite
/// differences for every trainable parameter.
pub fn grad_check<L>(params: &ParamSet<f64>, loss: L, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, &analytic)?;
    g.backward(l, &mut analytic)?;
    check_against(params, &loss, &analytic, opts)
}

/// Finite-difference comparison against gradients already stored in
/// `analytic` (same names and shapes as `params`).
pub fn check_against<L>(
    params: &ParamSet<f64>,
    loss: &L,
    analytic: &ParamSet<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok(g.value(l).data()[0])
    };
    let mut probe = params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let grad = analytic.get(&name)?.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        let picks: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
        }
        report.push(ParamCheck {
            name,
            max_rel_error: worst,
            checked: picks.len(),
        });
    }
    let passed = report.iter().all(|p| p.max_rel_error < opts.tolerance);
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
        passed,
    })
}
