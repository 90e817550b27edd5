//! Bookkeeping of the accumulated update, its column-space basis, and the
//! frozen-model gradient basis used to protect implicit knowledge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::editors::{DeltaForm, EditDelta};
use crate::error::{Error, Result};
use crate::numerics::{
    full_svd, gram_schmidt_against, orthonormalize_columns, project_vector_off, OrthonormalBasis,
    DEFAULT_RANK_TOL,
};

/// Columns of the gradient basis whose norm drops below this fraction during
/// deconfliction are discarded.
pub const DECONFLICT_DROP_TOL: f64 = 1e-8;

/// An update projected to below this fraction of its input norm counts as
/// absorbed.
pub const ABSORB_TOL: f64 = 1e-12;

/// `∇G = Σᵢ 2 (W kᵢ − vᵢ) kᵢᵀ` over key/value columns, at frozen `W`.
pub fn capture_gradient(
    weights: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if keys.ncols() == 0 {
        return Err(Error::invalid("gradient corpus is empty"));
    }
    if keys.ncols() != values.ncols()
        || keys.nrows() != weights.ncols()
        || values.nrows() != weights.nrows()
    {
        return Err(Error::invalid("gradient corpus does not match the memory shape"));
    }
    let residual = weights * keys - values;
    Ok(residual * keys.transpose() * 2.0)
}

/// State carried across the iterations of one editing session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMemory {
    delta_total: DMatrix<f64>,
    // rank-one factors of every accumulated update, while they still sum to
    // delta_total
    factors: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
    cgs_basis: OrthonormalBasis,
    cgs_singular_values: Vec<f64>,
    grad_raw: DMatrix<f64>,
    grad_ranked: OrthonormalBasis,
    grad_basis: OrthonormalBasis,
    r: usize,
    q: usize,
    lambda3: f64,
    q_cap: usize,
    iteration: usize,
}

impl SubspaceMemory {
    /// `gradient` is the raw `∇G`; it is scaled to unit spectral norm before
    /// its leading left singular vectors (at most `q_cap` of them) are kept.
    /// `q_cap` is clamped to `min(d, d_m)`.
    pub fn new(d: usize, d_m: usize, gradient: DMatrix<f64>, lambda3: f64, q_cap: usize) -> Result<Self> {
        if gradient.shape() != (d, d_m) {
            return Err(Error::invalid("gradient shape does not match the memory"));
        }
        if !(lambda3 > 0.0 && lambda3.is_finite()) {
            return Err(Error::invalid("lambda3 must be positive"));
        }
        let q_cap = q_cap.min(d.min(d_m));
        let grad_ranked = Self::rank_gradient(&gradient, q_cap)?;
        Ok(Self {
            delta_total: DMatrix::zeros(d, d_m),
            factors: Some((Vec::new(), Vec::new())),
            cgs_basis: OrthonormalBasis::empty(d),
            cgs_singular_values: Vec::new(),
            grad_raw: gradient,
            grad_ranked,
            grad_basis: OrthonormalBasis::empty(d),
            r: 0,
            q: 0,
            lambda3,
            q_cap,
            iteration: 0,
        })
    }

    fn rank_gradient(gradient: &DMatrix<f64>, q_cap: usize) -> Result<OrthonormalBasis> {
        let d = gradient.nrows();
        if q_cap == 0 {
            return Ok(OrthonormalBasis::empty(d));
        }
        let svd = full_svd(gradient)?;
        let top = svd.singular_values.max();
        if top <= 0.0 {
            return Ok(OrthonormalBasis::empty(d));
        }
        // singular vectors are invariant to the unit-norm scaling, but the
        // rank cut is relative to it
        let scaled: Vec<f64> = svd.singular_values.iter().map(|s| s / top).collect();
        let keep = scaled
            .iter()
            .take_while(|&&s| s > DEFAULT_RANK_TOL)
            .count()
            .min(q_cap);
        let u = svd.u.expect("u requested");
        Ok(OrthonormalBasis::from_orthonormal(u.columns(0, keep).into_owned()))
    }

    /// Replaces `∇G` (used when the gradient is refreshed during a run).
    pub fn set_gradient(&mut self, gradient: DMatrix<f64>) -> Result<()> {
        if gradient.shape() != self.delta_total.shape() {
            return Err(Error::invalid("gradient shape does not match the memory"));
        }
        self.grad_ranked = Self::rank_gradient(&gradient, self.q_cap)?;
        self.grad_raw = gradient;
        Ok(())
    }

    pub fn delta_total(&self) -> &DMatrix<f64> {
        &self.delta_total
    }

    pub fn cgs_basis(&self) -> &OrthonormalBasis {
        &self.cgs_basis
    }

    pub fn cgs_singular_values(&self) -> &[f64] {
        &self.cgs_singular_values
    }

    pub fn grad_raw(&self) -> &DMatrix<f64> {
        &self.grad_raw
    }

    pub fn grad_basis(&self) -> &OrthonormalBasis {
        &self.grad_basis
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn q_cap(&self) -> usize {
        self.q_cap
    }

    pub fn lambda3(&self) -> f64 {
        self.lambda3
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Left singular vectors and singular values of `delta_total`, leading
    /// first, nonzero ones only.
    fn column_space(&self) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let d = self.delta_total.nrows();
        match &self.factors {
            Some((cols, rows)) if !cols.is_empty() => {
                // ΔW = A Bᵀ = Q_a (R_a R_bᵀ) Q_bᵀ, so only the small core needs an SVD
                let a = DMatrix::from_columns(cols);
                let b = DMatrix::from_columns(rows);
                let (qa, ra) = thin_qr(a);
                let (_, rb) = thin_qr(b);
                let core = ra * rb.transpose();
                let svd = full_svd(&core)?;
                let p = svd.u.expect("u requested");
                Ok((qa * p, svd.singular_values.iter().copied().collect()))
            }
            Some(_) => Ok((DMatrix::zeros(d, 0), Vec::new())),
            None => {
                let svd = full_svd(&self.delta_total)?;
                Ok((
                    svd.u.expect("u requested"),
                    svd.singular_values.iter().copied().collect(),
                ))
            }
        }
    }

    /// Sets `r = min(iteration − 1, rank(ΔW_total))` and the basis to the top
    /// `r` left singular vectors of `ΔW_total`.
    pub fn refresh_cgs(&mut self, iteration: usize) -> Result<()> {
        if iteration == 0 {
            return Err(Error::invalid("iterations are numbered from 1"));
        }
        self.iteration = iteration;
        let d = self.delta_total.nrows();
        let (u, sigma) = self.column_space()?;
        // sort, since the factored path can return them in any order
        let mut order: Vec<usize> = (0..sigma.len()).collect();
        order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
        let top = order.first().map_or(0.0, |&i| sigma[i]);
        let rank = if top > 0.0 {
            order
                .iter()
                .take_while(|&&i| sigma[i] > DEFAULT_RANK_TOL * top)
                .count()
        } else {
            0
        };
        self.r = (iteration - 1).min(rank);
        let cols: Vec<DVector<f64>> = order[..self.r]
            .iter()
            .map(|&i| u.column(i).into_owned())
            .collect();
        self.cgs_singular_values = order[..self.r].iter().map(|&i| sigma[i]).collect();
        self.cgs_basis = if cols.is_empty() {
            OrthonormalBasis::empty(d)
        } else {
            OrthonormalBasis::from_orthonormal(DMatrix::from_columns(&cols))
        };
        Ok(())
    }

    /// Sets `q = min(⌊λ3 · iteration⌋, q_cap)` and the raw gradient basis to
    /// its top `q` directions.
    pub fn refresh_gradient_basis(&mut self, iteration: usize) {
        let wanted = (self.lambda3 * iteration as f64).floor() as usize;
        self.q = wanted.min(self.q_cap);
        self.grad_basis = self.grad_ranked.truncated(self.q);
    }

    /// Removes the accumulated-update subspace from the gradient basis,
    /// dropping columns that lose all but [`DECONFLICT_DROP_TOL`] of their norm.
    pub fn deconflict(&mut self) {
        if self.cgs_basis.is_empty() || self.grad_basis.is_empty() {
            return;
        }
        self.grad_basis = gram_schmidt_against(
            self.grad_basis.columns(),
            &self.cgs_basis,
            DECONFLICT_DROP_TOL,
        );
    }

    /// The per-iteration preamble: CGS refresh, gradient schedule, deconfliction.
    pub fn begin_iteration(&mut self, iteration: usize) -> Result<()> {
        self.refresh_cgs(iteration)?;
        self.refresh_gradient_basis(iteration);
        self.deconflict();
        Ok(())
    }

    /// Projects the update off the accumulated-update basis, then off the
    /// gradient basis.
    pub fn post_orthogonalize(&self, delta: &EditDelta) -> Result<EditDelta> {
        let before = delta.frobenius_norm();
        let update = match &delta.update {
            DeltaForm::RankOne { column, row } => {
                let c = project_vector_off(column, &self.cgs_basis)?;
                let c = project_vector_off(&c, &self.grad_basis)?;
                DeltaForm::RankOne {
                    column: c,
                    row: row.clone(),
                }
            }
            DeltaForm::Dense { matrix } => {
                let m = crate::numerics::project_off(matrix, &self.cgs_basis)?;
                let m = crate::numerics::project_off(&m, &self.grad_basis)?;
                DeltaForm::Dense { matrix: m }
            }
        };
        let out = EditDelta {
            update,
            ..delta.clone()
        };
        if out.frobenius_norm() < ABSORB_TOL * before || before == 0.0 {
            return Err(Error::EditAbsorbed {
                edit_index: delta.edit_index,
            });
        }
        Ok(out)
    }

    /// `ΔW_total += ΔW`.
    pub fn accumulate(&mut self, delta: &EditDelta) -> Result<()> {
        if delta.shape() != self.delta_total.shape() {
            return Err(Error::invalid("delta shape does not match the memory"));
        }
        if delta.is_zero() {
            return Ok(());
        }
        delta.add_to(&mut self.delta_total);
        match (&mut self.factors, &delta.update) {
            (Some((cols, rows)), DeltaForm::RankOne { column, row }) => {
                cols.push(column.clone());
                rows.push(row.clone());
            }
            _ => self.factors = None,
        }
        Ok(())
    }

    /// Overwrites `ΔW_total` (e.g. after a rescaling pass). The factored form
    /// is dropped.
    pub fn replace_total(&mut self, total: DMatrix<f64>) -> Result<()> {
        if total.shape() != self.delta_total.shape() {
            return Err(Error::invalid("replacement total has the wrong shape"));
        }
        self.delta_total = total;
        self.factors = None;
        Ok(())
    }

    pub fn snapshot(&self) -> SubspaceSnapshot {
        SubspaceSnapshot {
            iteration: self.iteration,
            r: self.r,
            q: self.q,
            lambda3: self.lambda3,
            q_cap: self.q_cap,
            delta_total: self.delta_total.clone(),
            cgs_basis: self.cgs_basis.columns().clone(),
            cgs_singular_values: self.cgs_singular_values.clone(),
            grad_basis: self.grad_basis.columns().clone(),
        }
    }
}

/// Plain-data export of a [`SubspaceMemory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSnapshot {
    pub iteration: usize,
    pub r: usize,
    pub q: usize,
    pub lambda3: f64,
    pub q_cap: usize,
    pub delta_total: DMatrix<f64>,
    pub cgs_basis: DMatrix<f64>,
    pub cgs_singular_values: Vec<f64>,
    pub grad_basis: DMatrix<f64>,
}

/// Thin QR with the `R` factor kept square (`n × n`, `n` = columns).
fn thin_qr(m: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    if rows >= cols {
        let qr = m.qr();
        (qr.q(), qr.r())
    } else {
        // more factors than dimensions: Q is rows×rows, pad R with zero rows
        let qr = m.qr();
        let q = qr.q();
        let r = qr.r();
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, r.nrows()).copy_from(&r);
        let mut qp = DMatrix::zeros(rows, cols);
        qp.columns_mut(0, q.ncols()).copy_from(&q);
        (qp, padded)
    }
}

/// Orthonormal basis of the column space of `ΔW_total` computed densely; used
/// by callers that want an answer independent of the factored bookkeeping.
pub fn dense_column_basis(m: &DMatrix<f64>) -> Result<OrthonormalBasis> {
    orthonormalize_columns(m, DEFAULT_RANK_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{gaussian_matrix, gaussian_vector, stream};
    use approx::assert_abs_diff_eq;

    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    fn delta(column: DVector<f64>, row: DVector<f64>) -> EditDelta {
        EditDelta::rank_one(1, "test", column.clone(), row.clone(), column, row)
    }

    fn mem(d: usize, d_m: usize) -> SubspaceMemory {
        SubspaceMemory::new(d, d_m, DMatrix::zeros(d, d_m), 2.0, d.min(d_m)).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let mut rng = stream(1, "g", 0);
        let w = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let k = gaussian_matrix(&mut rng, 6, 5, 1.0);
        let v = &w * &k;
        assert_eq!(capture_gradient(&w, &k, &v).unwrap().amax(), 0.0);
        assert!(capture_gradient(&w, &DMatrix::zeros(6, 0), &DMatrix::zeros(4, 0)).is_err());
    }

    #[test]
    fn single_pair_gradient_is_rank_one() {
        let mut rng = stream(2, "g", 0);
        let w = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let k = gaussian_matrix(&mut rng, 6, 1, 1.0);
        let v = gaussian_matrix(&mut rng, 4, 1, 1.0);
        let g = capture_gradient(&w, &k, &v).unwrap();
        let s = full_svd(&g).unwrap().singular_values;
        assert!(s[1] <= 1e-12 * s[0]);
    }

    #[test]
    fn first_iteration_has_empty_cgs() {
        let mut m = mem(4, 4);
        m.refresh_cgs(1).unwrap();
        assert!(m.cgs_basis().is_empty());
        assert_eq!(m.r(), 0);
    }

    #[test]
    fn orthogonal_residuals_give_rank_two_cgs() {
        let mut m = mem(4, 5);
        m.accumulate(&delta(e(4, 0), e(5, 1))).unwrap();
        m.accumulate(&delta(e(4, 2) * 3.0, e(5, 3))).unwrap();
        m.refresh_cgs(3).unwrap();
        assert_eq!(m.r(), 2);
        let b = m.cgs_basis();
        for v in [e(4, 0), e(4, 2)] {
            assert_abs_diff_eq!(project_vector_off(&v, b).unwrap().norm(), 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(m.cgs_singular_values()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn collinear_residuals_give_rank_one_cgs() {
        let mut m = mem(4, 5);
        m.accumulate(&delta(e(4, 1), e(5, 0))).unwrap();
        m.accumulate(&delta(e(4, 1) * 2.0, e(5, 4))).unwrap();
        m.refresh_cgs(3).unwrap();
        assert_eq!(m.r(), 1);
    }

    #[test]
    fn factored_cgs_matches_dense_svd() {
        let mut rng = stream(3, "cgs", 0);
        let mut m = mem(12, 7);
        for _ in 0..9 {
            let d = delta(gaussian_vector(&mut rng, 12, 1.0), gaussian_vector(&mut rng, 7, 1.0));
            m.accumulate(&d).unwrap();
        }
        m.refresh_cgs(10).unwrap();
        assert_eq!(m.r(), 7);
        let dense = full_svd(m.delta_total()).unwrap();
        for (a, b) in m.cgs_singular_values().iter().zip(dense.singular_values.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10 * b.max(1.0));
        }
        let oracle = dense_column_basis(m.delta_total()).unwrap();
        let p1 = m.cgs_basis().columns() * m.cgs_basis().columns().transpose();
        let p2 = oracle.columns() * oracle.columns().transpose();
        assert_abs_diff_eq!((p1 - p2).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn deconflict_cases() {
        let d = 6;
        let cgs = OrthonormalBasis::from_orthonormal(DMatrix::from_columns(&[e(d, 0), e(d, 1)]));
        // shared: e0, e1 mixed; disjoint: e3, e4
        let shared = (e(d, 0) + e(d, 1)).normalize();
        let grad = DMatrix::from_columns(&[shared, e(d, 3), e(d, 4)]);
        let mut m = mem(d, d);
        m.grad_basis = OrthonormalBasis::from_orthonormal(grad.clone());
        m.deconflict();
        assert_eq!(m.grad_basis.dim(), 3, "empty cgs leaves the basis alone");

        m.cgs_basis = cgs.clone();
        m.deconflict();
        assert_eq!(m.grad_basis().dim(), 2);
        assert!(m.cgs_basis().columns().tr_mul(m.grad_basis().columns()).norm() <= 1e-8);
        let once = m.grad_basis().clone();
        m.deconflict();
        assert_abs_diff_eq!((once.columns() - m.grad_basis().columns()).amax(), 0.0, epsilon = 1e-14);

        m.grad_basis = OrthonormalBasis::from_orthonormal(DMatrix::from_columns(&[e(d, 1)]));
        m.deconflict();
        assert!(m.grad_basis().is_empty());
    }

    #[test]
    fn post_orthogonalize_cases() {
        let d = 6;
        let mut m = mem(d, 4);
        let raw = delta(e(d, 0) + e(d, 5), e(4, 2));
        let same = m.post_orthogonalize(&raw).unwrap();
        assert_eq!(same, raw);

        m.cgs_basis = OrthonormalBasis::from_orthonormal(DMatrix::from_columns(&[e(d, 0), e(d, 5)]));
        assert!(matches!(
            m.post_orthogonalize(&raw),
            Err(Error::EditAbsorbed { .. })
        ));

        let mut rng = stream(5, "po", 0);
        let b = orthonormalize_columns(&gaussian_matrix(&mut rng, d, 4, 1.0), 1e-10).unwrap();
        m.cgs_basis = OrthonormalBasis::from_orthonormal(b.columns().columns(0, 2).into_owned());
        m.grad_basis = OrthonormalBasis::from_orthonormal(b.columns().columns(2, 2).into_owned());
        let raw = delta(gaussian_vector(&mut rng, d, 1.0), gaussian_vector(&mut rng, 4, 1.0));
        let out = m.post_orthogonalize(&raw).unwrap().to_dense();
        assert!(m.cgs_basis().overlap_norm(&out) <= 1e-10);
        assert!(m.grad_basis().overlap_norm(&out) <= 1e-10);
    }

    #[test]
    fn accumulate_cases() {
        let mut rng = stream(6, "acc", 0);
        let mut m = mem(5, 5);
        let first = delta(gaussian_vector(&mut rng, 5, 1.0), gaussian_vector(&mut rng, 5, 1.0));
        m.accumulate(&first).unwrap();
        assert_eq!(*m.delta_total(), first.to_dense());
        let zero = delta(DVector::zeros(5), gaussian_vector(&mut rng, 5, 1.0));
        m.accumulate(&zero).unwrap();
        assert_eq!(*m.delta_total(), first.to_dense());
        assert!(m.accumulate(&delta(DVector::zeros(4), DVector::zeros(5))).is_err());

        let mut m = mem(5, 5);
        for i in 0..5 {
            m.accumulate(&delta(e(5, i) * (i + 1) as f64, e(5, (i + 2) % 5))).unwrap();
            let rank = full_svd(m.delta_total())
                .unwrap()
                .singular_values
                .iter()
                .filter(|s| **s > 1e-10)
                .count();
            assert_eq!(rank, i + 1);
        }
    }

    #[test]
    fn q_schedule_respects_cap() {
        let mut rng = stream(7, "q", 0);
        let g = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let mut m = SubspaceMemory::new(6, 4, g, 2.0, 100).unwrap();
        assert_eq!(m.q_cap(), 4);
        let mut last = 0;
        for it in 1..=5 {
            m.refresh_gradient_basis(it);
            assert!(m.q() >= last && m.q() <= 4);
            last = m.q();
        }
        assert_eq!(m.q(), 4);
        assert!(m.grad_basis().orthonormality_error() < 1e-10);
    }
}
