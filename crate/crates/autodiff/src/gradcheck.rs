//! Central-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Errors are relative to `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// Entries checked per parameter; larger tensors are subsampled, half of
    /// the budget going to entries with a nonzero analytic gradient.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_entries: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamGradReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn param(&self, name: &str) -> Option<&ParamGradReport> {
        self.params.iter().find(|p| p.name == name)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<40} n={:<4} max_rel={:.3e} (analytic {:.6e}, numeric {:.6e})",
                p.name, p.checked, p.max_rel_error, p.worst_analytic, p.worst_numeric
            )?;
        }
        Ok(())
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    Ok(loss.item())
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for the parameters in `which` (all parameters when empty).
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    which: &[ParamId],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let g = Graph::new();
        let loss = f(&g, &analytic)?;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut analytic);
    }
    let ids: Vec<ParamId> = if which.is_empty() { store.ids().collect() } else { which.to_vec() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let grad = analytic.grad(id).to_vec();
        let n = grad.len();
        let entries: Vec<usize> = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut nonzero: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
            nonzero.shuffle(&mut rng);
            let mut pick: Vec<usize> = nonzero.into_iter().take(cfg.max_entries / 2).collect();
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            for i in all {
                if pick.len() >= cfg.max_entries {
                    break;
                }
                if !pick.contains(&i) {
                    pick.push(i);
                }
            }
            pick.sort_unstable();
            pick
        };
        let mut report = ParamGradReport {
            name: store.param(id).name().to_string(),
            checked: entries.len(),
            max_rel_error: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &i in &entries {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = eval(&work, &f)?;
            work.value_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = eval(&work, &f)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_index = Some(i);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        params.push(report);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params,
    })
}
