//! Closed-form rank-one edits and the penalised solver for the target value.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryModel;
use crate::numerics::{ensure_finite, CosineMode, OrthonormalBasis};

/// Default multiplier of the key covariance.
pub const DEFAULT_LAMBDA_C: f64 = 15_000.0;

/// Condition number above which the covariance gets a ridge.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Which closed form turns a residual into a weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedForm {
    Rome,
    #[default]
    Memit,
}

/// Storage of one weight update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DeltaForm {
    /// `column · rowᵀ`.
    RankOne {
        column: DVector<f64>,
        row: DVector<f64>,
    },
    Dense { matrix: DMatrix<f64> },
}

/// One update `ΔW_[i]` together with the quantities that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDelta {
    /// 1-based position in the edit sequence.
    pub edit_index: usize,
    pub method: String,
    /// `v_* − W k_*` against the weights the edit was computed from.
    pub residual: DVector<f64>,
    pub key: DVector<f64>,
    pub update: DeltaForm,
}

impl EditDelta {
    pub fn rank_one(
        edit_index: usize,
        method: impl Into<String>,
        residual: DVector<f64>,
        key: DVector<f64>,
        column: DVector<f64>,
        row: DVector<f64>,
    ) -> Self {
        Self {
            edit_index,
            method: method.into(),
            residual,
            key,
            update: DeltaForm::RankOne { column, row },
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match &self.update {
            DeltaForm::RankOne { column, row } => (column.len(), row.len()),
            DeltaForm::Dense { matrix } => matrix.shape(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.update {
            DeltaForm::RankOne { column, row } => column * row.transpose(),
            DeltaForm::Dense { matrix } => matrix.clone(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match &self.update {
            DeltaForm::RankOne { column, row } => column.norm() * row.norm(),
            DeltaForm::Dense { matrix } => matrix.norm(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.frobenius_norm() == 0.0
    }

    /// `ΔW · x`.
    pub fn apply_to_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.update {
            DeltaForm::RankOne { column, row } => column * row.dot(x),
            DeltaForm::Dense { matrix } => matrix * x,
        }
    }

    /// `W += ΔW`.
    pub fn add_to(&self, w: &mut DMatrix<f64>) {
        match &self.update {
            DeltaForm::RankOne { column, row } => w.ger(1.0, column, row, 1.0),
            DeltaForm::Dense { matrix } => *w += matrix,
        }
    }

    /// Unit vector spanning the column space of a rank-one update, or the
    /// leading left singular vector of a dense one. `None` for a zero update.
    pub fn leading_direction(&self) -> Option<DVector<f64>> {
        if self.is_zero() {
            return None;
        }
        match &self.update {
            DeltaForm::RankOne { column, .. } => Some(column.normalize()),
            DeltaForm::Dense { matrix } => crate::numerics::svd_rank_k(matrix, 1)
                .ok()
                .map(|s| s.u.column(0).into_owned()),
        }
    }

    /// `‖Bᵀ ΔW‖_F`.
    pub fn overlap_with(&self, basis: &OrthonormalBasis) -> f64 {
        if basis.is_empty() {
            return 0.0;
        }
        match &self.update {
            DeltaForm::RankOne { column, row } => {
                basis.columns().tr_mul(column).norm() * row.norm()
            }
            DeltaForm::Dense { matrix } => basis.overlap_norm(matrix),
        }
    }
}

/// `λ_c C`, ridged when ill-conditioned, with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct PreparedCovariance {
    chol: Cholesky<f64, Dyn>,
    guard: f64,
}

impl PreparedCovariance {
    pub fn new(covariance: &DMatrix<f64>, lambda_c: f64) -> Result<Self> {
        if !covariance.is_square() || covariance.nrows() == 0 {
            return Err(Error::invalid("covariance must be a non-empty square matrix"));
        }
        if !(lambda_c > 0.0 && lambda_c.is_finite()) {
            return Err(Error::invalid("lambda_c must be positive"));
        }
        ensure_finite(covariance, "covariance")?;
        let n = covariance.nrows();
        let mut c = covariance * lambda_c;
        let eig = c.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let ill = lo <= 0.0 || hi / lo > CONDITION_LIMIT;
        let guard = if ill { 1e-8 * c.trace() / n as f64 } else { 0.0 };
        for i in 0..n {
            c[(i, i)] += guard;
        }
        let chol = c
            .cholesky()
            .ok_or_else(|| Error::SingularKey("covariance is not positive definite".into()))?;
        Ok(Self { chol, guard })
    }

    /// Ridge added to the diagonal (0 when none was needed).
    pub fn guard(&self) -> f64 {
        self.guard
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `C⁻¹ x`.
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(x)
    }
}

fn check_edit_shapes(model: &MemoryModel, key: &DVector<f64>, value: &DVector<f64>) -> Result<()> {
    if key.len() != model.d_m() || value.len() != model.d() {
        return Err(Error::invalid(format!(
            "key/value of lengths {}/{} for a {}x{} memory",
            key.len(),
            value.len(),
            model.d(),
            model.d_m()
        )));
    }
    if key.norm() == 0.0 {
        return Err(Error::DegenerateKey { norm: 0.0 });
    }
    if !key.iter().chain(value.iter()).all(|x| x.is_finite()) {
        return Err(Error::invalid("key or value is not finite"));
    }
    Ok(())
}

/// `ΔW = Λ (C⁻¹k)ᵀ` with `Λ = (v − Wk) / ((C⁻¹k)ᵀ k)`.
pub fn rome_edit(
    model: &MemoryModel,
    cov: &PreparedCovariance,
    key: &DVector<f64>,
    value: &DVector<f64>,
) -> Result<EditDelta> {
    check_edit_shapes(model, key, value)?;
    let ck = cov.solve(key);
    let denom = ck.dot(key);
    if !(denom >= 1e-12) {
        return Err(Error::SingularKey(format!("(C⁻¹k)ᵀk = {denom:.3e}")));
    }
    let residual = value - &model.weights * key;
    let row = ck / denom;
    Ok(EditDelta::rank_one(0, "rome", residual.clone(), key.clone(), residual, row))
}

/// `ΔW = (v − Wk) kᵀ (C + k kᵀ)⁻¹`, evaluated as `R (C⁻¹k)ᵀ / (1 + kᵀC⁻¹k)`.
pub fn memit_edit(
    model: &MemoryModel,
    cov: &PreparedCovariance,
    key: &DVector<f64>,
    value: &DVector<f64>,
) -> Result<EditDelta> {
    check_edit_shapes(model, key, value)?;
    let ck = cov.solve(key);
    let denom = 1.0 + ck.dot(key);
    if !(denom.is_finite() && denom >= 1e-12) {
        return Err(Error::SingularKey(format!("1 + kᵀC⁻¹k = {denom:.3e}")));
    }
    let residual = value - &model.weights * key;
    let row = ck / denom;
    Ok(EditDelta::rank_one(0, "memit", residual.clone(), key.clone(), residual, row))
}

pub fn closed_form_edit(
    form: ClosedForm,
    model: &MemoryModel,
    cov: &PreparedCovariance,
    key: &DVector<f64>,
    value: &DVector<f64>,
) -> Result<EditDelta> {
    match form {
        ClosedForm::Rome => rome_edit(model, cov, key, value),
        ClosedForm::Memit => memit_edit(model, cov, key, value),
    }
}

/// Settings of the gradient-descent solve for `v_*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Weight of the cosine penalty against the accumulated-update basis.
    pub lambda1: f64,
    /// Weight of the cosine penalty against the gradient basis.
    pub lambda2: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub convergence_tol: f64,
    /// The target is `target_gain · ‖W k_*‖ · c_t`.
    pub target_gain: f64,
    pub cosine_mode: CosineMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 50.0,
            lambda2: 50.0,
            learning_rate: 0.1,
            max_steps: 200,
            convergence_tol: 1e-9,
            target_gain: 1.0,
            cosine_mode: CosineMode::Absolute,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("solver penalties must be >= 0"));
        }
        if !(self.learning_rate > 0.0) || !(self.convergence_tol > 0.0) {
            return Err(Error::invalid(
                "solver learning_rate and convergence_tol must be positive",
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("solver max_steps must be at least 1"));
        }
        if !(self.target_gain > 0.0 && self.target_gain.is_finite()) {
            return Err(Error::invalid("solver target_gain must be positive"));
        }
        Ok(())
    }

    /// The same settings with both penalties switched off.
    pub fn unpenalized(&self) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..*self
        }
    }
}

/// Outcome of [`solve_value`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub value: DVector<f64>,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    /// Stopped on the tolerance rather than the step budget.
    pub converged: bool,
    /// Mean cosines against the two bases at the returned value
    /// (0 for an empty basis or a zero residual).
    pub f1: f64,
    pub f2: f64,
}

struct Penalty<'a> {
    basis: &'a OrthonormalBasis,
    weight: f64,
}

struct Objective<'a> {
    recalled: &'a DVector<f64>,
    target: &'a DVector<f64>,
    penalties: Vec<Penalty<'a>>,
    mode: CosineMode,
    zero_tol: f64,
}

impl Objective<'_> {
    fn sign(&self, c: f64) -> f64 {
        match self.mode {
            CosineMode::Absolute => c.signum(),
            CosineMode::Signed => 1.0,
        }
    }

    fn cosine(&self, p: &Penalty, dir: &DVector<f64>) -> f64 {
        let n = dir.norm();
        let c = p.basis.columns().tr_mul(dir);
        let s: f64 = c.iter().map(|x| self.sign(*x) * x).sum();
        s / (n * p.basis.dim() as f64)
    }

    fn penalty_along(&self, dir: &DVector<f64>) -> f64 {
        if dir.norm() <= self.zero_tol {
            return 0.0;
        }
        self.penalties
            .iter()
            .map(|p| p.weight * self.cosine(p, dir))
            .sum()
    }

    fn loss(&self, v: &DVector<f64>) -> f64 {
        (v - self.target).norm_squared() + self.penalty_along(&(v - self.recalled))
    }

    fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut g = (v - self.target) * 2.0;
        let r = v - self.recalled;
        let n = r.norm();
        if n <= self.zero_tol {
            return g;
        }
        for p in &self.penalties {
            let b = p.basis.columns();
            let c = b.tr_mul(&r) / n;
            let signs = c.map(|x| self.sign(x));
            let total = c.dot(&signs);
            let scale = p.weight / p.basis.dim() as f64;
            // d/dr of Σ s_i b_iᵀr/‖r‖ = (B s)/‖r‖ − (Σ s_i c_i) r/‖r‖²
            g += (b * signs) * (scale / n);
            g.axpy(-scale * total / (n * n), &r, 1.0);
        }
        g
    }
}

/// Minimises `‖v − α c_t‖² + λ1 f1 + λ2 f2` by gradient descent with
/// backtracking, starting from `v = W k_*`.
///
/// `f1`, `f2` are mean column cosines of the residual `v − W k_*` against
/// `cgs` and `grad`. At the starting point the residual is zero, so the
/// penalty there is taken as its limit along the first descent direction;
/// this keeps the recorded loss sequence monotone.
pub fn solve_value(
    model: &MemoryModel,
    key: &DVector<f64>,
    target_index: usize,
    cgs: &OrthonormalBasis,
    grad: &OrthonormalBasis,
    cfg: &SolverConfig,
) -> Result<ValueSolution> {
    cfg.validate()?;
    if target_index >= model.n_vocab() {
        return Err(Error::invalid(format!(
            "target index {target_index} outside a codebook of {}",
            model.n_vocab()
        )));
    }
    for b in [cgs, grad] {
        if b.ambient_dim() != model.d() {
            return Err(Error::invalid("penalty basis does not live in the value space"));
        }
    }
    let recalled = model.recall(key)?;
    let scale = recalled.norm();
    let alpha = cfg.target_gain * if scale > 0.0 { scale } else { 1.0 };
    let target: DVector<f64> = model.codebook.row(target_index).transpose() * alpha;

    let mut penalties = Vec::new();
    for (basis, weight) in [(cgs, cfg.lambda1), (grad, cfg.lambda2)] {
        // a zero weight must leave the arithmetic untouched
        if weight > 0.0 && !basis.is_empty() {
            penalties.push(Penalty { basis, weight });
        }
    }
    let objective = Objective {
        recalled: &recalled,
        target: &target,
        penalties,
        mode: cfg.cosine_mode,
        zero_tol: 1e-12 * (1.0 + scale),
    };

    let mut v = recalled.clone();
    let mut loss = (&v - &target).norm_squared() + objective.penalty_along(&(&target - &recalled));
    let mut trace = vec![loss];
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        let g = objective.gradient(&v);
        let gg = g.norm_squared();
        if gg == 0.0 {
            converged = true;
            break;
        }
        let mut step = cfg.learning_rate;
        let (candidate, candidate_loss) = loop {
            let c = &v - &g * step;
            let l = objective.loss(&c);
            if l <= loss - 1e-4 * step * gg || step < 1e-12 {
                break (c, l);
            }
            step *= 0.5;
        };
        if !(candidate_loss <= loss) {
            converged = true;
            break;
        }
        let decrease = loss - candidate_loss;
        v = candidate;
        loss = candidate_loss;
        trace.push(loss);
        steps += 1;
        if decrease < cfg.convergence_tol {
            converged = true;
            break;
        }
    }

    let r = &v - &recalled;
    let (f1, f2) = if r.norm() <= objective.zero_tol {
        (0.0, 0.0)
    } else {
        let f = |b: &OrthonormalBasis| {
            crate::numerics::mean_column_cosine(&r, b, cfg.cosine_mode).unwrap_or(0.0)
        };
        (f(cgs), f(grad))
    };
    Ok(ValueSolution {
        value: v,
        loss_trace: trace,
        steps,
        converged,
        f1,
        f2,
    })
}
