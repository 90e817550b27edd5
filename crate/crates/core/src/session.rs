//! The sequential editing loop.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig};
use crate::editors::{
    closed_form_edit, solve_value, ClosedForm, DeltaForm, EditDelta, PreparedCovariance,
    SolverConfig, DEFAULT_LAMBDA_C,
};
use crate::error::{Error, Result};
use crate::memory::{compose_key, EditRequest, MemoryModel};
use crate::numerics::{spectral_norm, OrthonormalBasis};
use crate::seeds;
use crate::subspace::{capture_gradient, SubspaceMemory};

/// How the closed-form update is shaped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Unpenalised target value, update applied as computed.
    Plain,
    /// Cosine penalties against the protected subspaces in the value solve.
    Soft,
    /// Unpenalised solve, update projected off the protected subspaces.
    Hard,
    /// A plain edit followed by one of the reduction baselines.
    Baseline(BaselineConfig),
}

/// A fully specified editing method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSpec {
    /// Label carried into every delta and report.
    pub name: String,
    pub closed_form: ClosedForm,
    pub strategy: Strategy,
    /// Multiplier of the model's key covariance.
    pub lambda_c: f64,
    pub solver: SolverConfig,
    pub lambda3: f64,
    /// Upper bound on `q`; `None` means `min(d, d_m)`.
    pub q_cap: Option<usize>,
    /// Recompute the gradient at the current weights before every edit.
    pub refresh_gradient: bool,
    /// Fold every edited key into the covariance before the next edit.
    pub reestimate_covariance: bool,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            name: "memit".into(),
            closed_form: ClosedForm::Memit,
            strategy: Strategy::Plain,
            lambda_c: DEFAULT_LAMBDA_C,
            solver: SolverConfig::default(),
            lambda3: 2.0,
            q_cap: None,
            refresh_gradient: false,
            reestimate_covariance: false,
        }
    }
}

impl MethodSpec {
    pub fn memit() -> Self {
        Self::default()
    }

    pub fn rome() -> Self {
        Self {
            name: "rome".into(),
            closed_form: ClosedForm::Rome,
            ..Self::default()
        }
    }

    pub fn o_edit() -> Self {
        Self {
            name: "o-edit".into(),
            strategy: Strategy::Soft,
            ..Self::default()
        }
    }

    pub fn o_edit_plus() -> Self {
        Self {
            name: "o-edit+".into(),
            strategy: Strategy::Hard,
            ..Self::default()
        }
    }

    pub fn baseline(cfg: BaselineConfig) -> Self {
        Self {
            name: cfg.name().into(),
            strategy: Strategy::Baseline(cfg),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("method name is empty"));
        }
        if !(self.lambda_c > 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::invalid("lambda_c must be positive"));
        }
        if !(self.lambda3 > 0.0 && self.lambda3.is_finite()) {
            return Err(Error::invalid("lambda3 must be positive"));
        }
        self.solver.validate()?;
        if let Strategy::Baseline(b) = &self.strategy {
            b.validate()?;
        }
        Ok(())
    }

    fn uses_subspaces(&self) -> bool {
        matches!(self.strategy, Strategy::Soft | Strategy::Hard)
    }

    /// Solver settings actually used for the target value.
    fn effective_solver(&self, iteration: usize) -> SolverConfig {
        match self.strategy {
            Strategy::Soft => SolverConfig {
                // nothing has been edited yet at the first iteration
                lambda1: if iteration == 1 { 0.0 } else { self.solver.lambda1 },
                ..self.solver
            },
            Strategy::Baseline(BaselineConfig::StepReduce { reduced_steps }) => SolverConfig {
                max_steps: reduced_steps,
                ..self.solver.unpenalized()
            },
            _ => self.solver.unpenalized(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStatus {
    Applied,
    /// The target already matched the recalled value; nothing to do.
    NoOp,
    /// Post-orthogonalisation removed the whole update; counted as a failed
    /// edit and not applied.
    Absorbed,
}

/// Per-edit record of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub edit_index: usize,
    pub status: EditStatus,
    /// Schedules, for methods that maintain the subspaces.
    pub r: Option<usize>,
    pub q: Option<usize>,
    /// Gradient-basis dimension left after deconfliction.
    pub grad_dim: Option<usize>,
    pub solver_steps: usize,
    pub solver_converged: bool,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub f1: f64,
    pub f2: f64,
    pub residual_norm: f64,
    /// `‖ΔW‖_F` of the update as applied.
    pub delta_norm: f64,
    /// `‖V_cgsᵀ ΔW‖_F / ‖ΔW‖_F` and the same for the gradient basis, at
    /// application time.
    pub cgs_overlap: Option<f64>,
    pub grad_overlap: Option<f64>,
    /// The accumulated update was rescaled after this edit.
    pub pruned: bool,
    #[serde(skip)]
    pub elapsed_us: u64,
}

/// Everything a finished (or aborted) session produced.
#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub model: MemoryModel,
    /// One entry per processed edit, zero updates included.
    pub deltas: Vec<EditDelta>,
    pub subspace: SubspaceMemory,
    pub trace: Vec<EditTrace>,
}

impl SequenceOutcome {
    /// `W_final − W_original`.
    pub fn delta_total(&self) -> &DMatrix<f64> {
        self.subspace.delta_total()
    }

    pub fn absorbed(&self) -> usize {
        self.trace
            .iter()
            .filter(|t| t.status == EditStatus::Absorbed)
            .count()
    }
}

/// A session that stopped on an error, with the work done before it.
#[derive(Debug)]
pub struct SequenceFailure {
    pub edit_index: usize,
    pub error: Error,
    pub partial: Box<SequenceOutcome>,
}

impl std::fmt::Display for SequenceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "edit {} failed: {}", self.edit_index, self.error)
    }
}

impl std::error::Error for SequenceFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct Session<'a> {
    method: &'a MethodSpec,
    seed: u64,
    original: DMatrix<f64>,
    sigma_ref: f64,
    cov_base: DMatrix<f64>,
    cov_weight: f64,
    cov: PreparedCovariance,
    out: SequenceOutcome,
}

impl<'a> Session<'a> {
    fn new(model: &MemoryModel, method: &'a MethodSpec, seed: u64) -> Result<Self> {
        method.validate()?;
        let (d, d_m) = (model.d(), model.d_m());
        let q_cap = method.q_cap.unwrap_or(d.min(d_m));
        let gradient = if method.uses_subspaces() {
            capture_gradient(&model.weights, &model.heldout_keys, &model.heldout_values)?
        } else {
            DMatrix::zeros(d, d_m)
        };
        let subspace = SubspaceMemory::new(d, d_m, gradient, method.lambda3, q_cap)?;
        let sigma_ref = match method.strategy {
            Strategy::Baseline(BaselineConfig::Prune { .. }) => spectral_norm(&model.weights),
            _ => 0.0,
        };
        Ok(Self {
            method,
            seed,
            original: model.weights.clone(),
            sigma_ref,
            cov_base: model.covariance.clone(),
            cov_weight: (model.pretrain_keys.ncols() + model.heldout_keys.ncols()) as f64,
            cov: PreparedCovariance::new(&model.covariance, method.lambda_c)?,
            out: SequenceOutcome {
                model: model.clone(),
                deltas: Vec::new(),
                subspace,
                trace: Vec::new(),
            },
        })
    }

    fn step(&mut self, iteration: usize, request: &EditRequest) -> Result<()> {
        let started = Instant::now();
        let method = self.method;
        let key = compose_key(request)?;
        let subspaces = method.uses_subspaces();
        if subspaces {
            if method.refresh_gradient && iteration > 1 {
                let m = &self.out.model;
                let g = capture_gradient(&m.weights, &m.heldout_keys, &m.heldout_values)?;
                self.out.subspace.set_gradient(g)?;
            }
            self.out.subspace.begin_iteration(iteration)?;
        }
        let empty = OrthonormalBasis::empty(self.out.model.d());
        let (cgs, grad) = if matches!(method.strategy, Strategy::Soft) {
            (self.out.subspace.cgs_basis(), self.out.subspace.grad_basis())
        } else {
            (&empty, &empty)
        };
        let solver = method.effective_solver(iteration);
        let solution = solve_value(&self.out.model, &key, request.target_index, cgs, grad, &solver)?;

        let recalled = self.out.model.recall(&key)?;
        let residual = &solution.value - &recalled;
        let mut trace = EditTrace {
            edit_index: iteration,
            status: EditStatus::Applied,
            r: subspaces.then(|| self.out.subspace.r()),
            q: subspaces.then(|| self.out.subspace.q()),
            grad_dim: subspaces.then(|| self.out.subspace.grad_basis().dim()),
            solver_steps: solution.steps,
            solver_converged: solution.converged,
            loss_initial: solution.loss_trace[0],
            loss_final: *solution.loss_trace.last().expect("trace starts with the initial loss"),
            f1: solution.f1,
            f2: solution.f2,
            residual_norm: residual.norm(),
            delta_norm: 0.0,
            cgs_overlap: None,
            grad_overlap: None,
            pruned: false,
            elapsed_us: 0,
        };

        let zero = |residual: DVector<f64>, key: DVector<f64>, d: usize, d_m: usize| {
            EditDelta::rank_one(
                iteration,
                method.name.clone(),
                residual,
                key,
                DVector::zeros(d),
                DVector::zeros(d_m),
            )
        };
        let (d, d_m) = (self.out.model.d(), self.out.model.d_m());

        if residual.norm() <= 1e-12 * (1.0 + recalled.norm()) {
            trace.status = EditStatus::NoOp;
            self.out.deltas.push(zero(residual, key, d, d_m));
            trace.elapsed_us = started.elapsed().as_micros() as u64;
            self.out.trace.push(trace);
            return Ok(());
        }

        let mut delta = closed_form_edit(
            method.closed_form,
            &self.out.model,
            &self.cov,
            &key,
            &solution.value,
        )?;
        delta.edit_index = iteration;
        delta.method = method.name.clone();

        match method.strategy {
            Strategy::Hard => match self.out.subspace.post_orthogonalize(&delta) {
                Ok(projected) => delta = projected,
                Err(Error::EditAbsorbed { .. }) => {
                    trace.status = EditStatus::Absorbed;
                    self.out.deltas.push(zero(delta.residual, key, d, d_m));
                    trace.elapsed_us = started.elapsed().as_micros() as u64;
                    self.out.trace.push(trace);
                    return Ok(());
                }
                Err(e) => return Err(e),
            },
            Strategy::Baseline(b) => delta = self.reduce(delta, b, iteration)?,
            _ => {}
        }

        let norm = delta.frobenius_norm();
        trace.delta_norm = norm;
        if subspaces && norm > 0.0 {
            trace.cgs_overlap = Some(delta.overlap_with(self.out.subspace.cgs_basis()) / norm);
            trace.grad_overlap = Some(delta.overlap_with(self.out.subspace.grad_basis()) / norm);
        }

        delta.add_to(&mut self.out.model.weights);
        self.out.subspace.accumulate(&delta)?;
        self.out.deltas.push(delta);

        if let Strategy::Baseline(BaselineConfig::Prune { prune_base, every }) = method.strategy {
            if iteration % every == 0 {
                let total =
                    baselines::prune_rescale(self.out.subspace.delta_total(), self.sigma_ref, prune_base)?;
                self.out.model.weights = &self.original + &total;
                self.out.subspace.replace_total(total)?;
                trace.pruned = true;
            }
        }

        if method.reestimate_covariance {
            self.cov_base = (&self.cov_base * self.cov_weight + &key * key.transpose())
                / (self.cov_weight + 1.0);
            self.cov_weight += 1.0;
            self.cov = PreparedCovariance::new(&self.cov_base, method.lambda_c)?;
        }

        trace.elapsed_us = started.elapsed().as_micros() as u64;
        self.out.trace.push(trace);
        Ok(())
    }

    fn reduce(&self, delta: EditDelta, cfg: BaselineConfig, iteration: usize) -> Result<EditDelta> {
        let seed = seeds::child_seed(self.seed, "ablation", iteration as u64);
        let update = match (cfg, delta.update.clone()) {
            (BaselineConfig::Scale { eta }, DeltaForm::RankOne { column, row }) => {
                baselines::check_eta(eta)?;
                DeltaForm::RankOne {
                    column: column * eta,
                    row,
                }
            }
            (BaselineConfig::RandomSubspace { subspace_dim }, DeltaForm::RankOne { column, row }) => {
                if subspace_dim > column.len() {
                    return Err(Error::invalid("subspace_dim exceeds the value dimension"));
                }
                let column = if subspace_dim == 0 {
                    column
                } else {
                    let basis = baselines::random_basis(column.len(), subspace_dim, seed)?;
                    crate::numerics::project_vector_off(&column, &basis)?
                };
                DeltaForm::RankOne { column, row }
            }
            (BaselineConfig::RandomZero { zero_fraction }, _) => DeltaForm::Dense {
                matrix: baselines::ablate_random_zero(&delta.to_dense(), zero_fraction, seed)?,
            },
            (BaselineConfig::Scale { eta }, DeltaForm::Dense { matrix }) => DeltaForm::Dense {
                matrix: baselines::ablate_scale(&matrix, eta)?,
            },
            (BaselineConfig::RandomSubspace { subspace_dim }, DeltaForm::Dense { matrix }) => {
                DeltaForm::Dense {
                    matrix: baselines::ablate_random_subspace(&matrix, subspace_dim, seed)?,
                }
            }
            // step reduction acts in the solver, rescaling after the update
            (BaselineConfig::StepReduce { .. } | BaselineConfig::Prune { .. }, u) => u,
        };
        Ok(EditDelta { update, ..delta })
    }
}

/// Applies `stream` to a copy of `model`, one edit at a time.
///
/// `seed` feeds the randomised baselines. On a per-edit error the session
/// stops and the failure carries everything produced up to that edit.
pub fn run_sequence(
    model: &MemoryModel,
    stream: &[EditRequest],
    method: &MethodSpec,
    seed: u64,
) -> std::result::Result<SequenceOutcome, SequenceFailure> {
    let fail_early = |error: Error| SequenceFailure {
        edit_index: 0,
        error,
        partial: Box::new(SequenceOutcome {
            model: model.clone(),
            deltas: Vec::new(),
            subspace: SubspaceMemory::new(
                model.d(),
                model.d_m(),
                DMatrix::zeros(model.d(), model.d_m()),
                2.0,
                0,
            )
            .expect("valid empty memory"),
            trace: Vec::new(),
        }),
    };
    if stream.is_empty() {
        return Err(fail_early(Error::invalid("edit stream is empty")));
    }
    let mut session = Session::new(model, method, seed).map_err(fail_early)?;
    for (i, request) in stream.iter().enumerate() {
        let iteration = i + 1;
        if let Err(error) = session.step(iteration, request) {
            return Err(SequenceFailure {
                edit_index: iteration,
                error,
                partial: Box::new(session.out),
            });
        }
    }
    Ok(session.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{synth_edit_stream, synth_model, CorpusConfig};

    fn small() -> (MemoryModel, CorpusConfig) {
        let cfg = CorpusConfig {
            d: 24,
            d_m: 32,
            n_vocab: 40,
            n_pretrain: 12,
            n_heldout: 48,
            ..CorpusConfig::default()
        };
        (synth_model(&cfg).unwrap(), cfg)
    }

    fn spec(mut m: MethodSpec) -> MethodSpec {
        m.lambda_c = 32.0;
        m.solver.target_gain = 2.0;
        m
    }

    #[test]
    fn empty_stream_is_rejected() {
        let (model, _) = small();
        let err = run_sequence(&model, &[], &MethodSpec::memit(), 0).unwrap_err();
        assert!(matches!(err.error, Error::InvalidArgument(_)));
    }

    #[test]
    fn single_o_edit_matches_memit_with_gradient_penalty_only() {
        let (model, cfg) = small();
        let stream = synth_edit_stream(&model, 1, &cfg).unwrap();
        let m = spec(MethodSpec::o_edit());
        let out = run_sequence(&model, &stream, &m, 0).unwrap();

        let g = capture_gradient(&model.weights, &model.heldout_keys, &model.heldout_values).unwrap();
        let mut mem = SubspaceMemory::new(24, 32, g, m.lambda3, 24).unwrap();
        mem.begin_iteration(1).unwrap();
        let key = compose_key(&stream[0]).unwrap();
        let solver = SolverConfig {
            lambda1: 0.0,
            ..m.solver
        };
        let empty = OrthonormalBasis::empty(24);
        let v = solve_value(&model, &key, stream[0].target_index, &empty, mem.grad_basis(), &solver)
            .unwrap()
            .value;
        let cov = PreparedCovariance::new(&model.covariance, m.lambda_c).unwrap();
        let expected = crate::editors::memit_edit(&model, &cov, &key, &v).unwrap();
        assert_eq!(out.deltas[0].to_dense(), expected.to_dense());
    }

    #[test]
    fn zero_penalties_reproduce_memit_exactly() {
        let (model, cfg) = small();
        let stream = synth_edit_stream(&model, 6, &cfg).unwrap();
        let mut soft = spec(MethodSpec::o_edit());
        soft.solver.lambda1 = 0.0;
        soft.solver.lambda2 = 0.0;
        let a = run_sequence(&model, &stream, &soft, 0).unwrap();
        let b = run_sequence(&model, &stream, &spec(MethodSpec::memit()), 0).unwrap();
        assert_eq!(a.model.weights, b.model.weights);
    }

    #[test]
    fn hard_edits_are_orthogonal_at_application() {
        let (model, cfg) = small();
        let stream = synth_edit_stream(&model, 3, &cfg).unwrap();
        let out = run_sequence(&model, &stream, &spec(MethodSpec::o_edit_plus()), 0).unwrap();
        let mut partial = DMatrix::zeros(24, 32);
        for (j, delta) in out.deltas.iter().enumerate() {
            if j > 0 {
                let basis = crate::subspace::dense_column_basis(&partial).unwrap();
                assert!(delta.overlap_with(&basis) <= 1e-8 * delta.frobenius_norm().max(1e-300));
            }
            partial += delta.to_dense();
        }
        assert_eq!(out.trace.len(), 3);
    }

    #[test]
    fn failure_keeps_partial_trace() {
        let (model, cfg) = small();
        let mut stream = synth_edit_stream(&model, 3, &cfg).unwrap();
        let k = stream[2].key_samples[0].clone();
        stream[2].key_samples = vec![k.clone(), -k];
        let err = run_sequence(&model, &stream, &spec(MethodSpec::memit()), 0).unwrap_err();
        assert_eq!(err.edit_index, 3);
        assert_eq!(err.partial.trace.len(), 2);
    }

    #[test]
    fn baselines_run() {
        let (model, cfg) = small();
        let stream = synth_edit_stream(&model, 4, &cfg).unwrap();
        for b in [
            BaselineConfig::StepReduce { reduced_steps: 2 },
            BaselineConfig::RandomZero { zero_fraction: 0.5 },
            BaselineConfig::RandomSubspace { subspace_dim: 6 },
            BaselineConfig::Scale { eta: 0.5 },
            BaselineConfig::Prune {
                prune_base: 1.2,
                every: 2,
            },
        ] {
            let out = run_sequence(&model, &stream, &spec(MethodSpec::baseline(b)), 3).unwrap();
            assert_eq!(out.deltas.len(), 4);
            let actual = &out.model.weights - &model.weights;
            assert!((&actual - out.delta_total()).amax() <= 1e-12);
        }
    }
}
