//! Central finite differences as an independent oracle for the tape's
//! analytic gradients.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Denominator floor of the relative error, as a fraction of
    /// `max(1, |f(θ)|)`. A forward pass over thousands of terms carries
    /// ~100 ulp of roundoff, which central differences turn into ~1e-9·|f|
    /// of gradient noise at eps = 1e-5; components where both the analytic
    /// and numeric gradient are under the floor are compared on an absolute
    /// scale.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Coordinate, analytic and numeric value at the worst relative error.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn mean_rel(&self) -> f64 {
        let n: usize = self.tensors.iter().map(|t| t.checked).sum();
        if n == 0 {
            return 0.0;
        }
        self.tensors
            .iter()
            .map(|t| t.mean_rel * t.checked as f64)
            .sum::<f64>()
            / n as f64
    }

    pub fn coords_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.tensors.extend(other.tensors);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} n={:<6} max_rel={:.3e} mean_rel={:.3e}",
                t.name, t.checked, t.max_rel, t.mean_rel
            )?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, floor)`; zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares `analytic` against `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every
/// coordinate of every tensor in `analytic`. `f` receives the full parameter
/// set with one coordinate perturbed.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamStore,
    analytic: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let floor = opts.floor * first.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in analytic.iter() {
        let base = params.require(name)?;
        if base.shape() != grad.shape() {
            return Err(Error::shape(
                "finite_diff_check",
                format!(
                    "{name}: param {:?} vs grad {:?}",
                    base.shape(),
                    grad.shape()
                ),
            ));
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < base.numel() => {
                let mut v = index::sample(&mut rng, base.numel(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..base.numel()).collect(),
        };
        let mut check = TensorCheck {
            name: name.to_string(),
            checked: coords.len(),
            max_rel: 0.0,
            mean_rel: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for &i in &coords {
            let orig = base.data()[i];
            set(&mut work, name, i, orig + opts.eps);
            let plus = f(&work)?;
            set(&mut work, name, i, orig - opts.eps);
            let minus = f(&work)?;
            set(&mut work, name, i, orig);
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, floor);
            check.mean_rel += rel;
            if rel >= check.max_rel {
                check.max_rel = rel;
                check.worst = (i, a, numeric);
            }
        }
        if !coords.is_empty() {
            check.mean_rel /= coords.len() as f64;
        }
        report.tensors.push(check);
    }
    Ok(report)
}

fn set(store: &mut ParamStore, name: &str, i: usize, v: f64) {
    store.get_mut(name).expect("name checked above").data_mut()[i] = v;
}

/// Runs `loss` once on a recorded graph to get analytic gradients for the
/// parameters selected by `trainable`, then checks them with
/// [`finite_diff_check`].
pub fn check_graph_gradients<L>(
    params: &ParamStore,
    trainable: impl Fn(&str) -> bool,
    loss: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    check_graph_gradients_with(params, trainable, loss, opts, |_| {})
}

/// As [`check_graph_gradients`], with a hook to configure the graph used for
/// the analytic pass (e.g. to inject a backward fault).
pub fn check_graph_gradients_with<L>(
    params: &ParamStore,
    trainable: impl Fn(&str) -> bool,
    loss: L,
    opts: &GradCheckOptions,
    configure: impl FnOnce(&mut Graph),
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    configure(&mut g);
    let b = params.bind(&mut g, &trainable);
    let l = loss(&mut g, &b)?;
    let grads = g.backward(l)?;
    let mut analytic = b.gradients(&grads);
    // Trainable parameters the loss never reached have an exact zero gradient.
    for (name, t) in params.iter() {
        if trainable(name) && !analytic.contains(name) {
            analytic.insert(name, Tensor::zeros(t.shape()));
        }
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let l = loss(&mut g, &b)?;
        g.value(l).item()
    };
    finite_diff_check(eval, params, &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn single(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::vector(vec![v]).unwrap());
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let params = single("theta", 2.0);
        let analytic = single("theta", 4.0);
        let r = finite_diff_check(
            |p| Ok(p.require("theta")?.data()[0].powi(2)),
            &params,
            &analytic,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel() < 1e-9, "{r}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = single("theta", 2.0);
        let analytic = single("theta", 0.0);
        let r = finite_diff_check(
            |_| Ok(7.0),
            &params,
            &analytic,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let params = single("theta", 2.0);
        let analytic = single("theta", 5.0);
        let r = finite_diff_check(
            |p| Ok(p.require("theta")?.data()[0].powi(2)),
            &params,
            &analytic,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((r.max_rel() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let params = single("theta", 2.0);
        let calls = Cell::new(0.0);
        let err = finite_diff_check(
            |_| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            &params,
            &single("theta", 0.0),
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn eps_range_is_enforced() {
        let params = single("theta", 2.0);
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(finite_diff_check(|_| Ok(0.0), &params, &params, &opts).is_err());
    }
}
