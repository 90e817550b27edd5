//! Dense linear-algebra building blocks: truncated SVD, orthonormal bases,
//! projections off a subspace, column cosines and gradient orthogonalisation.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used when extracting a basis.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 0;

/// The leading `rank` singular triplets of a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `Σᵢ σᵢ uᵢ vᵢᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.v.transpose()
    }

    /// Number of singular values above `tol · σ_max`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let Some(&top) = self.singular_values.iter().next() else {
            return 0;
        };
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > tol * top)
            .count()
    }
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

pub(crate) fn full_svd(m: &DMatrix<f64>) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    SVD::try_new(m.clone(), true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::NoConvergence("singular value decomposition"))
}

/// Top-`k` singular triplets of `m`.
///
/// When the numerical rank of `m` is below `k` the trailing singular values
/// come back as (near) zero while the matching vectors stay orthonormal.
pub fn svd_rank_k(m: &DMatrix<f64>, k: usize) -> Result<TruncatedSvd> {
    let min_dim = m.nrows().min(m.ncols());
    if k == 0 || k > min_dim {
        return Err(Error::invalid(format!(
            "rank {k} outside 1..={min_dim} for a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "matrix")?;
    let svd = full_svd(m)?;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v requested");
    Ok(TruncatedSvd {
        u: u.columns(0, k).into_owned(),
        singular_values: svd.singular_values.rows(0, k).map(|s| s.max(0.0)),
        v: v_t.rows(0, k).transpose(),
    })
}

/// Largest singular value, as the square root of the top eigenvalue of the
/// smaller Gram matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.tr_mul(m)
    };
    gram.symmetric_eigenvalues().max().max(0.0).sqrt()
}

/// A matrix whose columns form an orthonormal set. The empty basis (zero
/// columns) stands for the zero subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
}

impl OrthonormalBasis {
    pub fn empty(ambient_dim: usize) -> Self {
        Self {
            columns: DMatrix::zeros(ambient_dim, 0),
        }
    }

    /// Wraps columns the caller guarantees to be orthonormal.
    pub fn from_orthonormal(columns: DMatrix<f64>) -> Self {
        Self { columns }
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_columns(self) -> DMatrix<f64> {
        self.columns
    }

    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Keeps only the first `n` columns.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.dim());
        Self {
            columns: self.columns.columns(0, n).into_owned(),
        }
    }

    /// `‖BᵀB − I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.columns.tr_mul(&self.columns);
        let eye = DMatrix::<f64>::identity(self.dim(), self.dim());
        (gram - eye).amax()
    }

    /// `‖Bᵀ M‖_F`, the size of the component of `M` inside the subspace.
    pub fn overlap_norm(&self, m: &DMatrix<f64>) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.columns.tr_mul(m).norm()
    }
}

/// Orthonormal basis for the column space of `m`, dropping directions whose
/// singular value is below `tol · σ_max`.
pub fn orthonormalize_columns(m: &DMatrix<f64>, tol: f64) -> Result<OrthonormalBasis> {
    ensure_finite(m, "matrix")?;
    if m.ncols() == 0 || m.nrows() == 0 {
        return Ok(OrthonormalBasis::empty(m.nrows()));
    }
    let svd = full_svd(m)?;
    let sigma = &svd.singular_values;
    let top = sigma.max();
    if top <= 0.0 {
        return Ok(OrthonormalBasis::empty(m.nrows()));
    }
    let keep = sigma.iter().take_while(|&&s| s > tol * top).count();
    let u = svd.u.expect("u requested");
    Ok(OrthonormalBasis::from_orthonormal(
        u.columns(0, keep).into_owned(),
    ))
}

fn check_rows(m: &DMatrix<f64>, basis: &OrthonormalBasis) -> Result<()> {
    if m.nrows() != basis.ambient_dim() {
        return Err(Error::invalid(format!(
            "matrix has {} rows but the basis lives in R^{}",
            m.nrows(),
            basis.ambient_dim()
        )));
    }
    Ok(())
}

/// `M − B Bᵀ M`: removes the component of every column of `M` lying in span(B).
pub fn project_off(m: &DMatrix<f64>, basis: &OrthonormalBasis) -> Result<DMatrix<f64>> {
    check_rows(m, basis)?;
    if basis.is_empty() {
        return Ok(m.clone());
    }
    let b = basis.columns();
    Ok(m - b * b.tr_mul(m))
}

/// Vector form of [`project_off`].
pub fn project_vector_off(x: &DVector<f64>, basis: &OrthonormalBasis) -> Result<DVector<f64>> {
    if x.len() != basis.ambient_dim() {
        return Err(Error::invalid(format!(
            "vector has length {} but the basis lives in R^{}",
            x.len(),
            basis.ambient_dim()
        )));
    }
    if basis.is_empty() {
        return Ok(x.clone());
    }
    let b = basis.columns();
    Ok(x - b * b.tr_mul(x))
}

/// How per-column cosines are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Mean of `|cos|`; insensitive to the arbitrary sign of a basis vector.
    #[default]
    Absolute,
    /// Mean of signed cosines.
    Signed,
}

/// `(1/dim) Σᵢ cos(B[:,i], residual)` under the chosen aggregation; 0 for an
/// empty basis.
pub fn mean_column_cosine(
    residual: &DVector<f64>,
    basis: &OrthonormalBasis,
    mode: CosineMode,
) -> Result<f64> {
    if residual.len() != basis.ambient_dim() {
        return Err(Error::invalid(format!(
            "residual has length {} but the basis lives in R^{}",
            residual.len(),
            basis.ambient_dim()
        )));
    }
    if basis.is_empty() {
        return Ok(0.0);
    }
    let norm = residual.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateInput(
            "cosine with a zero residual is undefined".into(),
        ));
    }
    // basis columns are unit vectors, so Bᵀr / ‖r‖ is the cosine vector
    let coeffs = basis.columns().tr_mul(residual);
    let total: f64 = match mode {
        CosineMode::Absolute => coeffs.iter().map(|c| c.abs()).sum(),
        CosineMode::Signed => coeffs.iter().sum(),
    };
    Ok(total / (norm * basis.dim() as f64))
}

/// `(1/dim) Σᵢ |cos(B[:,i], residual)|`.
pub fn mean_abs_column_cosine(residual: &DVector<f64>, basis: &OrthonormalBasis) -> Result<f64> {
    mean_column_cosine(residual, basis, CosineMode::Absolute)
}

/// Removes from `g` its projection on the span of `stored`.
///
/// The stored vectors are orthonormalised first (modified Gram–Schmidt with a
/// second pass); vectors that are numerically dependent on earlier ones are
/// skipped.
pub fn ogd_orthogonalize(g: &DVector<f64>, stored: &[DVector<f64>]) -> Result<DVector<f64>> {
    let n = g.len();
    if let Some(bad) = stored.iter().find(|s| s.len() != n) {
        return Err(Error::invalid(format!(
            "stored vector of length {} against gradient of length {n}",
            bad.len()
        )));
    }
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(stored.len());
    for s in stored {
        let scale = s.norm();
        if scale == 0.0 {
            continue;
        }
        let mut w = s.clone();
        for _ in 0..2 {
            for q in &ortho {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let wn = w.norm();
        if wn > 1e-12 * scale {
            ortho.push(w / wn);
        }
    }
    let mut out = g.clone();
    for _ in 0..2 {
        for q in &ortho {
            let c = q.dot(&out);
            out.axpy(-c, q, 1.0);
        }
    }
    Ok(out)
}

/// Column-wise Gram–Schmidt of `candidates` against `fixed` and against each
/// other, in column order. A column survives when its norm after removing the
/// projections is at least `drop_tol` times its norm before.
pub(crate) fn gram_schmidt_against(
    candidates: &DMatrix<f64>,
    fixed: &OrthonormalBasis,
    drop_tol: f64,
) -> OrthonormalBasis {
    let n = candidates.nrows();
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(candidates.ncols());
    for col in candidates.column_iter() {
        let before = col.norm();
        if before == 0.0 {
            continue;
        }
        let mut w: DVector<f64> = col.into_owned();
        for _ in 0..2 {
            if !fixed.is_empty() {
                let b = fixed.columns();
                w -= b * b.tr_mul(&w);
            }
            for q in &kept {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let after = w.norm();
        if after >= drop_tol * before && after > 0.0 {
            kept.push(w / after);
        }
    }
    if kept.is_empty() {
        return OrthonormalBasis::empty(n);
    }
    OrthonormalBasis::from_orthonormal(DMatrix::from_columns(&kept))
}
