//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::param::{ParamGrads, ParamStore, Session};
use super::NumericsError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.params.is_empty() && self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Evaluates the loss built by `build` on `store` (training mode).
pub fn eval_loss<F>(store: &ParamStore<f64>, build: &mut F) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Session<f64>) -> Result<Var, NumericsError>,
{
    let mut s = Session::new(store, true);
    let loss = build(&mut s)?;
    Ok(s.graph.value(loss).item())
}

/// Compares the backward-pass gradient of the loss built by `build` with
/// central differences for every trainable parameter.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    mut build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Session<f64>) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut s = Session::new(store, true);
        let loss = build(&mut s)?;
        s.backward(loss)?
    };
    grad_check_against(store, build, &analytic, opts)
}

/// Like [`grad_check`], with the analytic gradients supplied by the caller.
pub fn grad_check_against<F>(
    store: &ParamStore<f64>,
    mut build: F,
    analytic: &ParamGrads<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Session<f64>) -> Result<Var, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &i in &entries {
            let orig = p.value.data()[i];
            let mut at = |v: f64, work: &mut ParamStore<f64>| -> Result<f64, NumericsError> {
                set_entry(work, id, i, v);
                eval_loss(work, &mut build)
            };
            let plus = at(orig + opts.step, &mut work)?;
            let minus = at(orig - opts.step, &mut work)?;
            set_entry(&mut work, id, i, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(opts.abs_floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol: opts.tol })
}

fn set_entry(store: &mut ParamStore<f64>, id: super::param::ParamId, i: usize, v: f64) {
    let p = store.get_mut(id);
    let mut data = std::mem::replace(&mut p.value, super::Tensor::scalar(0.0)).into_data();
    let shape = p.grad.shape().to_vec();
    data[i] = v;
    p.value = super::Tensor::from_parts(shape, data);
}
