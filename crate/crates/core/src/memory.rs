//! The editable model: one linear key→value memory `W` (values in `R^d`,
//! keys in `R^{d_m}`), a unit-norm codebook used to read values out, and the
//! synthetic corpora it was fitted on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ensure_finite;
use crate::seeds::{self, gaussian_matrix, gaussian_vector};

/// Shape and sampling parameters of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Value dimension (rows of `W`).
    pub d: usize,
    /// Key dimension (columns of `W`).
    pub d_m: usize,
    pub n_vocab: usize,
    pub n_pretrain: usize,
    pub n_heldout: usize,
    /// Expected Euclidean norm of a sampled key; coordinates are
    /// `N(0, key_scale² / d_m)`.
    pub key_scale: f64,
    /// Noise added to an edit key to form its paraphrases, in units of the
    /// per-coordinate key standard deviation.
    pub paraphrase_noise: f64,
    /// Number of noisy samples averaged into each edit key.
    pub key_samples: usize,
    /// Noise of each key sample around the edit's base key, same units as
    /// `paraphrase_noise`.
    pub key_sample_noise: f64,
    pub n_paraphrases: usize,
    pub n_unrelated: usize,
    /// Ridge term of the pre-training fit.
    pub ridge: f64,
    /// Longest edit stream that may be requested.
    pub stream_budget: usize,
    pub rng_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            d: 384,
            d_m: 256,
            n_vocab: 512,
            n_pretrain: 96,
            n_heldout: 384,
            key_scale: 1.0,
            paraphrase_noise: 0.3,
            key_samples: 5,
            key_sample_noise: 0.3,
            n_paraphrases: 2,
            n_unrelated: 5,
            ridge: 1e-6,
            stream_budget: 4096,
            rng_seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("d_m", self.d_m),
            ("n_vocab", self.n_vocab),
            ("n_pretrain", self.n_pretrain),
            ("n_heldout", self.n_heldout),
            ("key_samples", self.key_samples),
            ("stream_budget", self.stream_budget),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("corpus config: {name} must be at least 1")));
        }
        if self.n_vocab < 2 {
            return Err(Error::invalid("corpus config: n_vocab must be at least 2"));
        }
        if !(self.key_scale > 0.0 && self.key_scale.is_finite()) {
            return Err(Error::invalid("corpus config: key_scale must be positive"));
        }
        for (name, v) in [
            ("paraphrase_noise", self.paraphrase_noise),
            ("key_sample_noise", self.key_sample_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("corpus config: {name} must be >= 0")));
            }
        }
        if !(self.ridge > 0.0) {
            return Err(Error::invalid("corpus config: ridge must be positive"));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation of a key.
    pub fn key_std(&self) -> f64 {
        self.key_scale / (self.d_m as f64).sqrt()
    }
}

/// A linear associative memory together with the data it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// `W`, shape `d × d_m`; `W k` is the value recalled for key `k`.
    pub weights: DMatrix<f64>,
    /// `n_vocab × d`, unit-norm rows.
    pub codebook: DMatrix<f64>,
    pub pretrain_keys: DMatrix<f64>,
    pub pretrain_values: DMatrix<f64>,
    pub pretrain_labels: Vec<usize>,
    pub heldout_keys: DMatrix<f64>,
    pub heldout_values: DMatrix<f64>,
    pub heldout_labels: Vec<usize>,
    /// Uncentered key covariance `E[k kᵀ]` over the pre-training and held-out
    /// keys. Editors scale it by their own `λ_c`.
    pub covariance: DMatrix<f64>,
}

impl MemoryModel {
    pub fn d(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_m(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_vocab(&self) -> usize {
        self.codebook.nrows()
    }

    pub fn recall(&self, key: &DVector<f64>) -> Result<DVector<f64>> {
        recall(self, key)
    }

    pub fn decode_key(&self, key: &DVector<f64>) -> Result<Decoded> {
        Ok(decode(&self.recall(key)?, &self.codebook))
    }
}

/// One requested change of knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    /// Noisy key observations averaged into the edit key.
    pub key_samples: Vec<DVector<f64>>,
    /// Codebook row the edited key should decode to.
    pub target_index: usize,
    pub paraphrase_keys: Vec<DVector<f64>>,
    /// Keys of unrelated facts, used to measure collateral change.
    pub unrelated_keys: Vec<DVector<f64>>,
}

/// Result of a codebook lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub index: usize,
    /// The input was zero (or non-finite) so every cosine is undefined.
    pub degenerate: bool,
}

/// `W = V Kᵀ (K Kᵀ + εI)⁻¹`, evaluated on whichever side gives the smaller
/// system.
pub fn fit_ridge(keys: &DMatrix<f64>, values: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if keys.ncols() != values.ncols() {
        return Err(Error::invalid(format!(
            "{} keys but {} values",
            keys.ncols(),
            values.ncols()
        )));
    }
    let (d_m, n) = keys.shape();
    if n <= d_m {
        // push-through form: V (KᵀK + εI)⁻¹ Kᵀ
        let mut gram = keys.tr_mul(keys);
        for i in 0..n {
            gram[(i, i)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::SingularKey("pre-training Gram matrix".into()))?;
        let coeff = chol.solve(&values.transpose());
        Ok(coeff.tr_mul(&keys.transpose()))
    } else {
        let mut cov = keys * keys.transpose();
        for i in 0..d_m {
            cov[(i, i)] += ridge;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::SingularKey("pre-training covariance".into()))?;
        // W = V Kᵀ C⁻¹  ⇔  C Wᵀ = K Vᵀ
        let rhs = keys * values.transpose();
        Ok(chol.solve(&rhs).transpose())
    }
}

/// `λ_c · K Kᵀ` for keys stored as columns.
pub fn estimate_covariance(keys: &DMatrix<f64>, lambda_c: f64) -> Result<DMatrix<f64>> {
    if keys.ncols() == 0 {
        return Err(Error::invalid("covariance of an empty key set"));
    }
    if !(lambda_c > 0.0 && lambda_c.is_finite()) {
        return Err(Error::invalid("lambda_c must be positive"));
    }
    ensure_finite(keys, "keys")?;
    let mut c = keys * keys.transpose();
    c *= lambda_c;
    // exact symmetry regardless of summation order
    let sym = (&c + c.transpose()) * 0.5;
    Ok(sym)
}

fn unit_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    m
}

fn codebook_columns(codebook: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = labels
        .iter()
        .map(|&i| codebook.row(i).transpose())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Samples a codebook and corpora and fits `W` on the pre-training pairs.
pub fn synth_model(cfg: &CorpusConfig) -> Result<MemoryModel> {
    cfg.validate()?;
    let std = cfg.key_std();

    let mut rng = seeds::stream(cfg.rng_seed, "codebook", 0);
    let codebook = unit_rows(gaussian_matrix(&mut rng, cfg.n_vocab, cfg.d, 1.0));

    let mut rng = seeds::stream(cfg.rng_seed, "pretrain", 0);
    let pretrain_keys = gaussian_matrix(&mut rng, cfg.d_m, cfg.n_pretrain, std);
    let pretrain_labels: Vec<usize> = (0..cfg.n_pretrain)
        .map(|_| rng.random_range(0..cfg.n_vocab))
        .collect();
    let pretrain_values = codebook_columns(&codebook, &pretrain_labels);

    let mut rng = seeds::stream(cfg.rng_seed, "heldout", 0);
    let heldout_keys = gaussian_matrix(&mut rng, cfg.d_m, cfg.n_heldout, std);
    let heldout_labels: Vec<usize> = (0..cfg.n_heldout)
        .map(|_| rng.random_range(0..cfg.n_vocab))
        .collect();
    let heldout_values = codebook_columns(&codebook, &heldout_labels);

    let weights = fit_ridge(&pretrain_keys, &pretrain_values, cfg.ridge)?;

    let n_all = cfg.n_pretrain + cfg.n_heldout;
    let mut all_keys = DMatrix::zeros(cfg.d_m, n_all);
    all_keys
        .columns_mut(0, cfg.n_pretrain)
        .copy_from(&pretrain_keys);
    all_keys
        .columns_mut(cfg.n_pretrain, cfg.n_heldout)
        .copy_from(&heldout_keys);
    all_keys /= (n_all as f64).sqrt();
    let covariance = estimate_covariance(&all_keys, 1.0)?;

    Ok(MemoryModel {
        weights,
        codebook,
        pretrain_keys,
        pretrain_values,
        pretrain_labels,
        heldout_keys,
        heldout_values,
        heldout_labels,
        covariance,
    })
}

/// Arithmetic mean of the key samples.
pub fn compose_key(request: &EditRequest) -> Result<DVector<f64>> {
    let first = request
        .key_samples
        .first()
        .ok_or_else(|| Error::invalid("edit request has no key samples"))?;
    let mut sum = DVector::zeros(first.len());
    for s in &request.key_samples {
        if s.len() != first.len() {
            return Err(Error::invalid("key samples differ in length"));
        }
        sum += s;
    }
    let mean = sum / request.key_samples.len() as f64;
    let norm = mean.norm();
    if !(norm >= 1e-10) {
        return Err(Error::DegenerateKey { norm });
    }
    Ok(mean)
}

/// Index of the codebook row with the largest cosine to `v`; ties go to the
/// lowest index.
pub fn decode(v: &DVector<f64>, codebook: &DMatrix<f64>) -> Decoded {
    let vn = v.norm();
    if vn == 0.0 || !vn.is_finite() {
        return Decoded {
            index: 0,
            degenerate: true,
        };
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, row) in codebook.row_iter().enumerate() {
        let rn = row.norm();
        let score = if rn > 0.0 { row.dot(&v.transpose()) / rn } else { 0.0 };
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Decoded {
        index: best,
        degenerate: false,
    }
}

/// `W k`.
pub fn recall(model: &MemoryModel, key: &DVector<f64>) -> Result<DVector<f64>> {
    if key.len() != model.d_m() {
        return Err(Error::invalid(format!(
            "key of length {} for a memory with key dimension {}",
            key.len(),
            model.d_m()
        )));
    }
    Ok(&model.weights * key)
}

/// Generates `t` edit requests against the current state of `model`.
///
/// Request `i` depends only on `(cfg.rng_seed, i)` and the model, so a
/// shorter stream is a prefix of a longer one.
pub fn synth_edit_stream(
    model: &MemoryModel,
    t: usize,
    cfg: &CorpusConfig,
) -> Result<Vec<EditRequest>> {
    cfg.validate()?;
    if t == 0 {
        return Err(Error::invalid("edit stream must contain at least one edit"));
    }
    if t > cfg.stream_budget {
        return Err(Error::invalid(format!(
            "{t} edits requested but the stream budget is {}",
            cfg.stream_budget
        )));
    }
    if model.d_m() != cfg.d_m || model.d() != cfg.d || model.n_vocab() != cfg.n_vocab {
        return Err(Error::invalid("corpus config does not match the model shape"));
    }
    let std = cfg.key_std();
    let n_pre = model.pretrain_keys.ncols();
    (0..t)
        .map(|i| {
            let mut rng = seeds::stream(cfg.rng_seed, "edit", i as u64);
            let base = gaussian_vector(&mut rng, cfg.d_m, std);
            let key_samples: Vec<DVector<f64>> = (0..cfg.key_samples)
                .map(|_| &base + gaussian_vector(&mut rng, cfg.d_m, std * cfg.key_sample_noise))
                .collect();
            let mut request = EditRequest {
                key_samples,
                target_index: 0,
                paraphrase_keys: Vec::new(),
                unrelated_keys: Vec::new(),
            };
            let key = compose_key(&request)?;
            let current = model.decode_key(&key)?.index;
            let pick = rng.random_range(0..cfg.n_vocab - 1);
            request.target_index = if pick >= current { pick + 1 } else { pick };
            request.paraphrase_keys = (0..cfg.n_paraphrases)
                .map(|_| &key + gaussian_vector(&mut rng, cfg.d_m, std * cfg.paraphrase_noise))
                .collect();
            request.unrelated_keys = (0..cfg.n_unrelated)
                .map(|_| {
                    model
                        .pretrain_keys
                        .column(rng.random_range(0..n_pre))
                        .into_owned()
                })
                .collect();
            Ok(request)
        })
        .collect()
}
