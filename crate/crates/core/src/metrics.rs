//! Scoring of an edited memory against its edit stream.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::editors::EditDelta;
use crate::error::{Error, Result};
use crate::memory::{compose_key, EditRequest, MemoryModel};
use crate::seeds;

pub use crate::numerics::spectral_norm;

/// Number of deltas sampled for the pairwise orthogonality matrix.
pub const DEFAULT_PAIRWISE_SAMPLE: usize = 50;

/// Reliability, generalisation and locality of an edited model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub avg: f64,
}

impl Scores {
    pub fn new(rel: f64, gen: f64, loc: f64) -> Self {
        Self {
            rel,
            gen,
            loc,
            avg: (rel + gen + loc) / 3.0,
        }
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        // nothing to probe counts as nothing broken
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// `rel`: edit keys decoding to their target under `edited`; `gen`: the same
/// for paraphrase keys; `loc`: unrelated keys decoding as under `original`.
pub fn evaluate(edited: &MemoryModel, original: &MemoryModel, stream: &[EditRequest]) -> Result<Scores> {
    if stream.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty edit stream"));
    }
    let mut rel = 0;
    let (mut gen, mut gen_total) = (0, 0);
    let (mut loc, mut loc_total) = (0, 0);
    for req in stream {
        let key = compose_key(req)?;
        if edited.decode_key(&key)?.index == req.target_index {
            rel += 1;
        }
        for p in &req.paraphrase_keys {
            gen_total += 1;
            if edited.decode_key(p)?.index == req.target_index {
                gen += 1;
            }
        }
        for u in &req.unrelated_keys {
            loc_total += 1;
            if edited.decode_key(u)?.index == original.decode_key(u)?.index {
                loc += 1;
            }
        }
    }
    Ok(Scores::new(
        fraction(rel, stream.len()),
        fraction(gen, gen_total),
        fraction(loc, loc_total),
    ))
}

/// `‖(ΔW_total − ΔW_j) k_j‖` for every `j`, with `ΔW_total = Σ ΔW_i`.
pub fn activation_scores(deltas: &[EditDelta]) -> Result<Vec<f64>> {
    let total = sum_deltas(deltas)?;
    activation_scores_with_total(deltas, &total)
}

/// As [`activation_scores`] against an explicitly supplied total, for runs
/// where the applied total is not the plain sum (e.g. after rescaling).
pub fn activation_scores_with_total(deltas: &[EditDelta], total: &DMatrix<f64>) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::invalid("no deltas to score"));
    }
    deltas
        .iter()
        .map(|d| {
            if d.key.len() != total.ncols() {
                return Err(Error::invalid("delta key does not match the total's shape"));
            }
            Ok((total * &d.key - d.apply_to_vector(&d.key)).norm())
        })
        .collect()
}

/// `‖ΔW_j k_j‖` for every `j`.
pub fn activation_scores_own(deltas: &[EditDelta]) -> Vec<f64> {
    deltas
        .iter()
        .map(|d| d.apply_to_vector(&d.key).norm())
        .collect()
}

pub fn sum_deltas(deltas: &[EditDelta]) -> Result<DMatrix<f64>> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::invalid("no deltas to sum"))?;
    let (d, d_m) = first.shape();
    let mut total = DMatrix::zeros(d, d_m);
    for delta in deltas {
        if delta.shape() != (d, d_m) {
            return Err(Error::invalid("deltas differ in shape"));
        }
        delta.add_to(&mut total);
    }
    Ok(total)
}

/// `|cos|` between the leading column-space directions of a sample of deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOrthogonality {
    /// Sampled positions in the delta list, ascending.
    pub indices: Vec<usize>,
    /// Symmetric; 1 on the diagonal for nonzero deltas, 0 in every row and
    /// column of a zero delta.
    pub matrix: Vec<Vec<f64>>,
}

impl PairwiseOrthogonality {
    /// Mean over off-diagonal pairs of nonzero deltas; `None` when there is
    /// no such pair.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let nonzero: Vec<usize> = (0..self.indices.len())
            .filter(|&i| self.matrix[i][i] > 0.0)
            .collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, &i) in nonzero.iter().enumerate() {
            for &j in &nonzero[a + 1..] {
                sum += self.matrix[i][j];
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Samples `sample_size` deltas without replacement and tabulates their
/// pairwise `|cos|`.
pub fn pairwise_orthogonality(deltas: &[EditDelta], sample_size: usize, seed: u64) -> Result<PairwiseOrthogonality> {
    if sample_size > deltas.len() {
        return Err(Error::invalid(format!(
            "sample of {sample_size} from {} deltas",
            deltas.len()
        )));
    }
    let mut rng = seeds::stream(seed, "pairwise", 0);
    let mut indices = index::sample(&mut rng, deltas.len(), sample_size).into_vec();
    indices.sort_unstable();
    let dirs: Vec<_> = indices.iter().map(|&i| deltas[i].leading_direction()).collect();
    let n = indices.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let value = match (&dirs[i], &dirs[j]) {
                (Some(_), Some(_)) if i == j => 1.0,
                (Some(a), Some(b)) => a.dot(b).abs().min(1.0),
                _ => 0.0,
            };
            matrix[i][j] = value;
            matrix[j][i] = value;
        }
    }
    Ok(PairwiseOrthogonality { indices, matrix })
}
