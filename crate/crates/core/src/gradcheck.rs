//! Central finite-difference oracle for tape gradients (64-bit only).

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass iff the max relative error is below this.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so exact zeros
    /// compared against roundoff noise do not read as 100% error.
    pub floor: f64,
    /// Checks at most this many evenly strided coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_coords: None,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Distance to the nearest kink at the evaluation point.
    pub kink_distance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.value(out).item())
}

/// Compares tape gradients of `f` against central differences for every input.
pub fn gradcheck_many<F>(f: F, xs: &[Tensor<f64>], cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    let kink_distance = g.kink_distance();
    let grads = g.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kink_distance,
        passed: true,
    };
    let mut probe = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let zeros = Tensor::zeros(x.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zeros);
        let n = x.numel();
        let stride = match cfg.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + cfg.step;
            let fp = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = orig - cfg.step;
            let fm = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err.is_finite() && report.max_rel_err < cfg.tol;
    Ok(report)
}

/// Single-input form of [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_many(
        |g, vs| f(g, vs[0]),
        std::slice::from_ref(x),
        GradcheckConfig::with_tol(tol),
    )
}
