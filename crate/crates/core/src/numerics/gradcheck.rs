//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParameterSet, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries checked per parameter; larger tensors are subsampled.
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub label: String,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Parameters whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences, for every parameter path in `names`.
pub fn finite_diff_check<F>(
    label: &str,
    params: &ParameterSet,
    names: &[String],
    config: GradCheckConfig,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new(ps);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        label: label.to_string(),
        params: Vec::with_capacity(names.len()),
        tolerance: config.tolerance,
    };
    for name in names {
        let numel = params.get(name)?.numel();
        let indices: Vec<usize> = if numel <= config.max_entries_per_param {
            (0..numel).collect()
        } else {
            let mut idx = sample(&mut rng, numel, config.max_entries_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in indices {
            let original = params.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = original + config.step;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = original - config.step;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.param(name).map(|t| t.data()[i]).unwrap_or(0.0);
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
