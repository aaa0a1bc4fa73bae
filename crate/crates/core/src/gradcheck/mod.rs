//! Central finite-difference verification of hand-written backward passes.

use std::fmt;

mod suite;

pub use suite::{standard_suite, SuiteEntry};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Perturbation used for the central differences.
pub const DEFAULT_EPS: f32 = 1e-3;
/// Largest acceptable relative error.
pub const DEFAULT_TOLERANCE: f32 = 1e-3;
/// Fragments must stay below this many scalars.
pub const MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ParamCheck {
    Checked {
        max_abs_error: f32,
        max_magnitude: f32,
        /// `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-8)`
        max_rel_error: f32,
    },
    SkippedFrozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub check: ParamCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f32,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f32 {
        self.params
            .iter()
            .filter_map(|p| match p.check {
                ParamCheck::Checked { max_rel_error, .. } => Some(max_rel_error),
                ParamCheck::SkippedFrozen => None,
            })
            .fold(0.0, f32::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| match p.check {
            ParamCheck::Checked { max_rel_error, .. } => max_rel_error < self.tolerance,
            ParamCheck::SkippedFrozen => true,
        })
    }

    pub fn checked(&self) -> usize {
        self.params
            .iter()
            .filter(|p| matches!(p.check, ParamCheck::Checked { .. }))
            .count()
    }

    pub fn get(&self, name: &str) -> Option<&ParamReport> {
        self.params.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            match p.check {
                ParamCheck::Checked {
                    max_abs_error,
                    max_rel_error,
                    ..
                } => writeln!(
                    f,
                    "{:<40} {:>6}  rel {:.2e}  abs {:.2e}{}",
                    p.name,
                    p.numel,
                    max_rel_error,
                    max_abs_error,
                    if max_rel_error < self.tolerance { "" } else { "  FAIL" }
                )?,
                ParamCheck::SkippedFrozen => writeln!(f, "{:<40} {:>6}  skipped (frozen)", p.name, p.numel)?,
            }
        }
        Ok(())
    }
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences for every trainable tensor in `store`.
///
/// `loss_fn` must evaluate the scalar loss from the parameters it is handed
/// and return the gradients of that loss.
pub fn gradient_check<F>(store: &ParamStore, eps: f32, tolerance: f32, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Grads)>,
{
    let total = store.num_scalars();
    if total >= MAX_PARAMS {
        return Err(Error::Validation(format!(
            "gradient check fragment has {total} parameters (limit {MAX_PARAMS})"
        )));
    }
    let (loss, analytic) = loss_fn(store)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("gradient-check loss evaluated to {loss}")));
    }

    let mut work = store.clone();
    let mut params = Vec::new();
    let names: Vec<(String, bool, usize)> = store
        .iter()
        .map(|(n, p)| (n.to_string(), p.trainable, p.value.numel()))
        .collect();
    for (name, trainable, numel) in names {
        if !trainable {
            params.push(ParamReport {
                name,
                numel,
                check: ParamCheck::SkippedFrozen,
            });
            continue;
        }
        let zeros;
        let grad = match analytic.get(&name) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(store.get(&name).shape());
                &zeros
            }
        };
        let mut max_abs_error = 0.0f32;
        let mut max_magnitude = 0.0f32;
        for i in 0..numel {
            let original = store.get(&name).data()[i];
            // Divide by the step actually taken after f32 rounding.
            let (hi, lo) = (original + eps, original - eps);
            work.get_mut(&name).expect("present").data_mut()[i] = hi;
            let (plus, _) = loss_fn(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = lo;
            let (minus, _) = loss_fn(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became non-finite while perturbing {name}[{i}]"
                )));
            }
            let numeric = ((plus - minus) / (f64::from(hi) - f64::from(lo))) as f32;
            let a = grad.data()[i];
            max_abs_error = max_abs_error.max((a - numeric).abs());
            max_magnitude = max_magnitude.max(a.abs()).max(numeric.abs());
        }
        params.push(ParamReport {
            name,
            numel,
            check: ParamCheck::Checked {
                max_abs_error,
                max_magnitude,
                max_rel_error: max_abs_error / max_magnitude.max(1e-8),
            },
        });
    }
    Ok(GradCheckReport { tolerance, params })
}

/// `loss = Σ w ⊙ y`, accumulated in f64. Returns the loss and `dL/dy = w`.
pub fn weighted_sum_loss(y: &Tensor, weights: &Tensor) -> (f64, Tensor) {
    let loss = y
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum();
    (loss, weights.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_four_by_three_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let fc = Linear::register(&mut store, "fc", 3, 4, true, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let report = gradient_check(&store, DEFAULT_EPS, DEFAULT_TOLERANCE, |s| {
            let (y, cache) = fc.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            fc.backward(s, &cache, &dy, &mut g)?;
            Ok((loss, g))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.checked(), 2);
    }

    #[test]
    fn frozen_parameter_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fc = Linear::register(&mut store, "fc", 3, 4, true, 0.5, &mut rng).unwrap();
        store.set_trainable("fc.weight", false);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let report = gradient_check(&store, DEFAULT_EPS, DEFAULT_TOLERANCE, |s| {
            let (y, cache) = fc.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            fc.backward(s, &cache, &dy, &mut g)?;
            Ok((loss, g))
        })
        .unwrap();
        assert_eq!(report.get("fc.weight").unwrap().check, ParamCheck::SkippedFrozen);
        assert!(report.to_string().contains("skipped (frozen)"));
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let store = ParamStore::new();
        let err = gradient_check(&store, DEFAULT_EPS, DEFAULT_TOLERANCE, |_| Ok((f64::NAN, Grads::new()))).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn oversized_fragment_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("big", Tensor::zeros(&[100, 100]), true).unwrap();
        let err = gradient_check(&store, DEFAULT_EPS, DEFAULT_TOLERANCE, |_| Ok((0.0, Grads::new()))).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
