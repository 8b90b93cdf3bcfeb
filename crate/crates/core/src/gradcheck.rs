//! Central finite-difference gradient checking.
//!
//! This is the *oracle* side of every gradient claim in the crate: analytic
//! gradients are compared against `(f(θ+ε) − f(θ−ε)) / 2ε` coordinate by
//! coordinate, with no knowledge of how the analytic side was derived. Tests
//! and the acceptance suite call [`check_tensor`] per trainable tensor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub epsilon: f64,
    /// Relative-error bound: |a − n| / max(|a|, |n|) must stay below this.
    pub rel_tolerance: f64,
    /// Coordinates whose difference is below this pass outright (covers
    /// exactly-zero gradients, where relative error is meaningless).
    pub abs_tolerance: f64,
    /// How many random coordinates to probe per tensor (all of them when the
    /// tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            rel_tolerance: 1e-4,
            abs_tolerance: 1e-7,
            coords_per_tensor: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub tensor: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordFailure>,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Probe `cfg.coords_per_tensor` random coordinates of one tensor.
///
/// `tensor` projects the mutable parameter slice out of the model and `eval`
/// recomputes the scalar loss; the checker perturbs a coordinate, evaluates
/// both sides, and restores the original value before moving on.
pub fn check_tensor<M, A, E>(
    model: &mut M,
    mut tensor: A,
    mut eval: E,
    analytic: &[f64],
    name: &str,
    cfg: &GradCheckConfig,
) -> TensorCheck
where
    A: FnMut(&mut M) -> &mut [f64],
    E: FnMut(&M) -> f64,
{
    let len = tensor(model).len();
    assert_eq!(len, analytic.len(), "analytic gradient length mismatch for {name}");

    let coords: Vec<usize> = if len <= cfg.coords_per_tensor {
        (0..len).collect()
    } else {
        let mut all: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        all.shuffle(&mut rng);
        all.truncate(cfg.coords_per_tensor);
        all
    };

    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = tensor(model)[i];
        tensor(model)[i] = orig + cfg.epsilon;
        let f_plus = eval(model);
        tensor(model)[i] = orig - cfg.epsilon;
        let f_minus = eval(model);
        tensor(model)[i] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * cfg.epsilon);
        let a = analytic[i];
        let diff = (a - numeric).abs();
        let denom = a.abs().max(numeric.abs());
        let rel = if denom > 0.0 { diff / denom } else { 0.0 };
        if diff > cfg.abs_tolerance && rel > cfg.rel_tolerance {
            failures.push(CoordFailure {
                tensor: name.to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
        if diff > cfg.abs_tolerance {
            max_rel = max_rel.max(rel);
        }
    }

    TensorCheck {
        tensor: name.to_string(),
        coords_checked: coords.len(),
        max_rel_err: max_rel,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic with a known gradient: f(x) = Σ c_i x_i², ∇ = 2 c x.
    struct Quad {
        x: Vec<f64>,
        c: Vec<f64>,
    }

    #[test]
    fn accepts_correct_gradient() {
        let mut m = Quad {
            x: vec![0.3, -1.2, 2.0, 0.0],
            c: vec![1.0, 0.5, -2.0, 3.0],
        };
        let analytic: Vec<f64> = m.x.iter().zip(&m.c).map(|(x, c)| 2.0 * c * x).collect();
        let chk = check_tensor(
            &mut m,
            |m| m.x.as_mut_slice(),
            |m| m.x.iter().zip(&m.c).map(|(x, c)| c * x * x).sum(),
            &analytic,
            "x",
            &GradCheckConfig::default(),
        );
        assert!(chk.passed(), "{:?}", chk.failures);
        assert!(chk.max_rel_err < 1e-6);
    }

    #[test]
    fn flags_wrong_gradient() {
        let mut m = Quad {
            x: vec![0.5, 1.5],
            c: vec![1.0, 1.0],
        };
        let wrong = vec![1.0, 3.0 * 1.5]; // should be 2x
        let chk = check_tensor(
            &mut m,
            |m| m.x.as_mut_slice(),
            |m| m.x.iter().zip(&m.c).map(|(x, c)| c * x * x).sum(),
            &wrong,
            "x",
            &GradCheckConfig::default(),
        );
        assert!(!chk.passed());
    }
}
