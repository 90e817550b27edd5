//! Reference update-reduction methods: singular-value rescaling of the
//! accumulated update and four ways of shrinking a single update.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, full_svd, orthonormalize_columns, project_off};
use crate::seeds::{self, gaussian_matrix};

pub const DEFAULT_PRUNE_BASE: f64 = 1.2;
pub const DEFAULT_PRUNE_EVERY: usize = 50;

/// `log_b(σ) − log_b(σ_ref) + σ_ref`.
pub fn prune_value(sigma: f64, sigma_ref: f64, base: f64) -> f64 {
    sigma.log(base) - sigma_ref.log(base) + sigma_ref
}

/// Replaces every singular value `σ` of `delta_total` above `sigma_ref` by
/// `min(σ, prune_value(σ))` and reassembles the matrix.
///
/// The formula alone has slope `1 / (σ_ref ln b)` at `σ_ref`, so for
/// `σ_ref < 1 / ln b` it would raise values just above the reference.
pub fn prune_rescale(delta_total: &DMatrix<f64>, sigma_ref: f64, base: f64) -> Result<DMatrix<f64>> {
    if !(sigma_ref > 0.0 && sigma_ref.is_finite()) {
        return Err(Error::invalid("prune reference singular value must be positive"));
    }
    if !(base > 1.0 && base.is_finite()) {
        return Err(Error::invalid("prune base must exceed 1"));
    }
    ensure_finite(delta_total, "accumulated update")?;
    if delta_total.is_empty() {
        return Ok(delta_total.clone());
    }
    let svd = full_svd(delta_total)?;
    if svd.singular_values.iter().all(|&s| s <= sigma_ref) {
        return Ok(delta_total.clone());
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v requested");
    let sigma = svd
        .singular_values
        .map(|s| if s > sigma_ref { prune_value(s, sigma_ref, base).min(s) } else { s });
    Ok(u * DMatrix::from_diagonal(&sigma) * v_t)
}

/// Zeroes `⌊fraction · count⌋` entries chosen uniformly without replacement.
pub fn ablate_random_zero(delta: &DMatrix<f64>, fraction: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("zero fraction must lie in [0, 1)"));
    }
    let count = delta.len();
    let n = (fraction * count as f64).floor() as usize;
    let mut out = delta.clone();
    if n == 0 {
        return Ok(out);
    }
    let mut rng = seeds::stream(seed, "random_zero", 0);
    for i in index::sample(&mut rng, count, n) {
        out[i] = 0.0;
    }
    Ok(out)
}

/// Removes from `delta` its component in a uniformly random `dim`-dimensional
/// subspace of the column space.
pub fn ablate_random_subspace(delta: &DMatrix<f64>, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    let d = delta.nrows();
    if dim > d {
        return Err(Error::invalid(format!("subspace of dimension {dim} in R^{d}")));
    }
    if dim == 0 {
        return Ok(delta.clone());
    }
    let basis = random_basis(d, dim, seed)?;
    project_off(delta, &basis)
}

/// Orthonormal basis of a uniformly random `dim`-dimensional subspace of R^d.
pub fn random_basis(d: usize, dim: usize, seed: u64) -> Result<crate::OrthonormalBasis> {
    let mut rng = seeds::stream(seed, "random_subspace", 0);
    let g = gaussian_matrix(&mut rng, d, dim, 1.0);
    let q = g.qr().q();
    // Gaussian columns are independent with probability one; the rank check
    // only guards against a pathological draw
    if q.ncols() < dim {
        return orthonormalize_columns(&q, 1e-10);
    }
    Ok(crate::OrthonormalBasis::from_orthonormal(q))
}

/// `η · ΔW`.
pub fn ablate_scale(delta: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    check_eta(eta)?;
    Ok(delta * eta)
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid("eta must lie in (0, 1]"));
    }
    Ok(())
}

/// The knob of one baseline variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BaselineConfig {
    /// Fewer solver steps for the target value.
    StepReduce { reduced_steps: usize },
    RandomZero { zero_fraction: f64 },
    RandomSubspace { subspace_dim: usize },
    Scale { eta: f64 },
    /// Singular-value rescaling of the accumulated update every `every` edits.
    Prune { prune_base: f64, every: usize },
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineConfig::StepReduce { reduced_steps } if reduced_steps == 0 => {
                Err(Error::invalid("reduced_steps must be at least 1"))
            }
            BaselineConfig::RandomZero { zero_fraction } if !(0.0..1.0).contains(&zero_fraction) => {
                Err(Error::invalid("zero_fraction must lie in [0, 1)"))
            }
            BaselineConfig::Scale { eta } => check_eta(eta),
            BaselineConfig::Prune { prune_base, every } if !(prune_base > 1.0) || every == 0 => {
                Err(Error::invalid("prune needs base > 1 and every >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineConfig::StepReduce { .. } => "step_reduce",
            BaselineConfig::RandomZero { .. } => "random_zero",
            BaselineConfig::RandomSubspace { .. } => "random_subspace",
            BaselineConfig::Scale { .. } => "scale",
            BaselineConfig::Prune { .. } => "prune",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{gaussian_vector, stream};
    use approx::assert_abs_diff_eq;

    #[test]
    fn prune_formula_fixed_points() {
        let s = 3.7;
        assert_eq!(prune_value(s, s, 1.2), s);
        assert_abs_diff_eq!(prune_value(1.2 * s, s, 1.2), s + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn prune_leaves_small_spectrum_alone() {
        let mut rng = stream(1, "p", 0);
        let m = gaussian_matrix(&mut rng, 6, 5, 0.1);
        let out = prune_rescale(&m, 100.0, 1.2).unwrap();
        assert!((&out - &m).norm() <= 1e-10 * m.norm());
        assert!(prune_rescale(&m, 0.0, 1.2).is_err());
    }

    #[test]
    fn prune_compresses_large_values_and_keeps_vectors() {
        let mut rng = stream(2, "p", 0);
        let m = gaussian_matrix(&mut rng, 7, 5, 3.0);
        let before = full_svd(&m).unwrap();
        let sigma_ref = before.singular_values[2];
        let out = prune_rescale(&m, sigma_ref, 1.2).unwrap();
        let after = full_svd(&out).unwrap();
        for (a, b) in after.singular_values.iter().zip(before.singular_values.iter()) {
            assert!(*a <= *b + 1e-10);
            let expected = if *b > sigma_ref { prune_value(*b, sigma_ref, 1.2).min(*b) } else { *b };
            assert_abs_diff_eq!(*a, expected, epsilon = 1e-9);
        }
        // leading left singular vector unchanged up to sign
        let u0 = before.u.unwrap().column(0).into_owned();
        let u1 = after.u.unwrap().column(0).into_owned();
        assert_abs_diff_eq!(u0.dot(&u1).abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn small_reference_never_inflates() {
        // slope of the formula at σ_ref = 1 is 1 / ln 1.2 > 1
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.5, 1.0, 0.5]));
        let out = prune_rescale(&m, 1.0, 1.2).unwrap();
        assert!(prune_value(1.5, 1.0, 1.2) > 1.5);
        assert_abs_diff_eq!(out, m, epsilon = 1e-12);
        let big = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![100.0, 1.0]));
        let out = prune_rescale(&big, 1.0, 1.2).unwrap();
        assert_abs_diff_eq!(out[(0, 0)], prune_value(100.0, 1.0, 1.2), epsilon = 1e-10);
    }

    #[test]
    fn random_zero_counts() {
        let ones = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(ablate_random_zero(&ones, 0.0, 1).unwrap(), ones);
        let out = ablate_random_zero(&ones, 0.75, 1).unwrap();
        assert_eq!(out.iter().filter(|x| **x == 0.0).count(), 3);
        assert_eq!(out, ablate_random_zero(&ones, 0.75, 1).unwrap());
        assert!(ablate_random_zero(&ones, 1.0, 1).is_err());

        let mut rng = stream(3, "z", 0);
        for i in 0..20 {
            let m = gaussian_matrix(&mut rng, 5, 4, 1.0);
            assert!(ablate_random_zero(&m, 0.4, i).unwrap().norm() <= m.norm());
        }
    }

    #[test]
    fn random_subspace_cases() {
        let mut rng = stream(4, "s", 0);
        let m = gaussian_matrix(&mut rng, 6, 3, 1.0);
        assert_eq!(ablate_random_subspace(&m, 0, 1).unwrap(), m);
        assert!(ablate_random_subspace(&m, 6, 1).unwrap().norm() <= 1e-12 * m.norm());
        assert!(ablate_random_subspace(&m, 7, 1).is_err());

        let (d, dim) = (12, 4);
        let mut kept = 0.0;
        for i in 0..200 {
            let c = gaussian_vector(&mut rng, d, 1.0);
            let r = gaussian_vector(&mut rng, 5, 1.0);
            let delta = &c * r.transpose();
            let out = ablate_random_subspace(&delta, dim, 1000 + i).unwrap();
            kept += out.norm_squared() / delta.norm_squared();
        }
        let mean = kept / 200.0;
        assert!((mean - (1.0 - dim as f64 / d as f64)).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn scale_cases() {
        let mut rng = stream(5, "e", 0);
        let m = gaussian_matrix(&mut rng, 4, 4, 1.0);
        assert_eq!(ablate_scale(&m, 1.0).unwrap(), m);
        let half = ablate_scale(&m, 0.5).unwrap();
        for (a, b) in half.iter().zip(m.iter()) {
            assert_eq!(*a, b * 0.5);
        }
        assert_abs_diff_eq!(half.norm(), 0.5 * m.norm(), epsilon = 1e-14);
        assert!(ablate_scale(&m, 0.0).is_err());
        assert!(ablate_scale(&m, 1.5).is_err());
    }
}
