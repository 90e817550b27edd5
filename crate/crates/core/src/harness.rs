//! Config-driven experiment grids: method × edit count × seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::editors::SolverConfig;
use crate::error::{Error, Result};
use crate::memory::{synth_edit_stream, synth_model, CorpusConfig, EditRequest, MemoryModel};
use crate::metrics::{
    activation_scores_with_total, activation_scores_own, evaluate, pairwise_orthogonality,
    spectral_norm, PairwiseOrthogonality, Scores, DEFAULT_PAIRWISE_SAMPLE,
};
use crate::session::{run_sequence, EditStatus, EditTrace, MethodSpec, SequenceOutcome, Strategy};

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Relative tolerance of norm matching.
pub const NORM_MATCH_TOL: f64 = 0.10;
pub const NORM_MATCH_MAX_ITER: usize = 20;

/// Everything needed to run a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub corpus: CorpusConfig,
    pub methods: Vec<MethodSpec>,
    pub t_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Re-tune every ablation's knob against the target method before running.
    pub norm_matching: bool,
    /// Name of the method whose final spectral norm the ablations are matched to.
    pub match_target: String,
    pub pairwise_sample: usize,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let desk = |m| desk_method(m, &corpus);
        Self {
            version: CONFIG_VERSION,
            methods: vec![
                desk(MethodSpec::memit()),
                desk(MethodSpec::o_edit()),
                desk(MethodSpec::o_edit_plus()),
            ],
            corpus,
            t_grid: vec![50, 125, 250, 375],
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("oedit-out"),
            norm_matching: false,
            match_target: "o-edit+".into(),
            pairwise_sample: DEFAULT_PAIRWISE_SAMPLE,
            workers: 0,
        }
    }
}

/// Target gain used by the desk-scale presets.
pub const DESK_TARGET_GAIN: f64 = 2.5;
/// Gradient-basis cap of the desk-scale penalised editor.
pub const DESK_SOFT_Q_CAP: usize = 64;
/// Gradient-basis cap of the desk-scale projecting editor. Projection removes
/// the whole basis from every update, so it gets a narrower one.
pub const DESK_HARD_Q_CAP: usize = 16;

/// Covariance multiplier for a key dimension `d_m`, keeping the ratio of the
/// default multiplier to a 14336-wide key space.
pub fn desk_lambda_c(d_m: usize) -> f64 {
    crate::editors::DEFAULT_LAMBDA_C / 14336.0 * d_m as f64
}

/// `method` with the covariance multiplier, target gain and gradient-basis
/// cap used at desk scale for `corpus`.
pub fn desk_method(method: MethodSpec, corpus: &CorpusConfig) -> MethodSpec {
    let q_cap = match method.strategy {
        Strategy::Soft => Some(DESK_SOFT_Q_CAP),
        Strategy::Hard => Some(DESK_HARD_Q_CAP),
        _ => method.q_cap,
    };
    MethodSpec {
        lambda_c: desk_lambda_c(corpus.d_m),
        solver: SolverConfig {
            target_gain: DESK_TARGET_GAIN,
            ..method.solver
        },
        q_cap,
        ..method
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return cfg_err(format!("unsupported config version {}", self.version));
        }
        self.corpus.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.methods.is_empty() {
            return cfg_err("at least one method is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.methods {
            m.validate().map_err(|e| Error::Config(format!("method {}: {e}", m.name)))?;
            if !m.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_+.".contains(c)) {
                return cfg_err(format!("method name {:?} has unsupported characters", m.name));
            }
            if !names.insert(m.name.as_str()) {
                return cfg_err(format!("duplicate method name {}", m.name));
            }
        }
        if self.t_grid.is_empty() || self.seeds.is_empty() {
            return cfg_err("t_grid and seeds must be non-empty".into());
        }
        if let Some(t) = self.t_grid.iter().find(|&&t| t == 0 || t > self.corpus.stream_budget) {
            return cfg_err(format!(
                "edit count {t} outside 1..={}",
                self.corpus.stream_budget
            ));
        }
        if self.norm_matching && !self.methods.iter().any(|m| m.name == self.match_target) {
            return cfg_err(format!("norm matching target {} is not a listed method", self.match_target));
        }
        Ok(())
    }

    /// Parses TOML and applies `key=value` overrides (dotted paths, numeric
    /// segments index arrays; values are TOML literals, bare words are strings).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// sha256 over the canonical JSON form of the config, leaving out the
    /// output location and worker count, which do not affect results.
    pub fn fingerprint(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("workers");
        }
        // serde_json maps are ordered by key, so this text is canonical
        let text = serde_json::to_string(&v)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Corpus settings for one seed.
    pub fn corpus_for_seed(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            rng_seed: seed,
            ..self.corpus.clone()
        }
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut node = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert((*seg).to_string(), parsed);
                    return Ok(());
                }
                t.entry((*seg).to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::Config(format!("{seg:?} is not an array index in {path:?}")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range ({len}) in {path:?}")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{path:?} descends into a scalar"))),
        };
    }
    Ok(())
}

/// Summary numbers of a completed session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scores: Scores,
    pub spectral_norm_total: f64,
    pub mean_activation_score: f64,
    pub mean_activation_score_own: f64,
    pub mean_pairwise_cosine: Option<f64>,
    pub absorbed_edits: usize,
    pub per_edit_as: Vec<f64>,
    pub per_edit_as_own: Vec<f64>,
    pub pairwise: PairwiseOrthogonality,
}

/// One grid cell's result as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub report_version: u32,
    pub fingerprint: String,
    pub method: String,
    pub method_spec: MethodSpec,
    pub t: usize,
    pub seed: u64,
    /// `None` when the session completed.
    pub failure: Option<String>,
    /// Computed over the edits processed before any failure.
    pub metrics: Option<RunMetrics>,
    pub trace: Vec<EditTrace>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores a session against the stream prefix it processed.
pub fn measure(
    original: &MemoryModel,
    stream: &[EditRequest],
    outcome: &SequenceOutcome,
    pairwise_sample: usize,
    seed: u64,
) -> Result<RunMetrics> {
    let n = outcome.deltas.len();
    let scores = evaluate(&outcome.model, original, &stream[..n])?;
    let total = &outcome.model.weights - &original.weights;
    let per_edit_as = activation_scores_with_total(&outcome.deltas, &total)?;
    let per_edit_as_own = activation_scores_own(&outcome.deltas);
    let pairwise = pairwise_orthogonality(&outcome.deltas, pairwise_sample.min(n), seed)?;
    Ok(RunMetrics {
        scores,
        spectral_norm_total: spectral_norm(&total),
        mean_activation_score: mean(&per_edit_as),
        mean_activation_score_own: mean(&per_edit_as_own),
        mean_pairwise_cosine: pairwise.mean_off_diagonal(),
        absorbed_edits: outcome
            .trace
            .iter()
            .filter(|t| t.status == EditStatus::Absorbed)
            .count(),
        per_edit_as,
        per_edit_as_own,
        pairwise,
    })
}

/// Runs one method on one stream and builds its report.
pub fn run_cell(
    cfg: &ExperimentConfig,
    fingerprint: &str,
    method: &MethodSpec,
    model: &MemoryModel,
    stream: &[EditRequest],
    seed: u64,
) -> ExperimentReport {
    let (outcome, failure) = match run_sequence(model, stream, method, seed) {
        Ok(o) => (o, None),
        Err(f) => {
            let msg = f.to_string();
            (*f.partial, Some(msg))
        }
    };
    let (metrics, failure) = if outcome.deltas.is_empty() {
        (None, failure)
    } else {
        match measure(model, stream, &outcome, cfg.pairwise_sample, seed) {
            Ok(m) => (Some(m), failure),
            Err(e) => (None, Some(failure.unwrap_or_else(|| format!("metrics: {e}")))),
        }
    };
    ExperimentReport {
        report_version: REPORT_VERSION,
        fingerprint: fingerprint.to_string(),
        method: method.name.clone(),
        method_spec: method.clone(),
        t: stream.len(),
        seed,
        failure,
        metrics,
        trace: outcome.trace,
    }
}

/// File-name-safe form of a method name.
pub fn file_stem(method: &str, t: usize, seed: u64, fingerprint: &str) -> String {
    let m = method.replace('+', "-plus");
    format!("{m}_T{t}_seed{seed}_{}", &fingerprint[..fingerprint.len().min(12)])
}

/// Pretty JSON with a trailing newline.
pub fn to_json_text<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Wall-clock timings of one cell, kept apart from the report so reports stay
/// reproducible byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTiming {
    pub fingerprint: String,
    pub method: String,
    pub t: usize,
    pub seed: u64,
    pub total_us: u64,
    pub per_edit_us: Vec<u64>,
}

/// Outcome of a grid.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub fingerprint: String,
    pub reports: Vec<ExperimentReport>,
    pub report_paths: Vec<PathBuf>,
    pub norm_matches: Vec<NormMatchReport>,
    pub summary_path: PathBuf,
}

impl GridResult {
    pub fn failed_cells(&self) -> usize {
        self.reports.iter().filter(|r| r.failure.is_some()).count()
    }
}

/// Builds the model and the longest needed edit stream for a seed.
pub fn world_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(MemoryModel, Vec<EditRequest>)> {
    let corpus = cfg.corpus_for_seed(seed);
    let model = synth_model(&corpus)?;
    let t_max = cfg.t_grid.iter().copied().max().unwrap_or(1);
    let stream = synth_edit_stream(&model, t_max, &corpus)?;
    Ok((model, stream))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs every (method, T, seed) cell, writing one report per cell plus a
/// summary CSV into `cfg.output_dir`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let pool = pool(cfg.workers)?;

    let worlds: Vec<(u64, MemoryModel, Vec<EditRequest>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| world_for_seed(cfg, s).map(|(m, st)| (s, m, st)))
            .collect::<Result<Vec<_>>>()
    })?;

    // (t, seed) → methods with matched knobs
    let mut specs: BTreeMap<(usize, u64), Vec<MethodSpec>> = BTreeMap::new();
    let mut norm_matches = Vec::new();
    for &t in &cfg.t_grid {
        for (seed, model, stream) in &worlds {
            let mut methods = cfg.methods.clone();
            if cfg.norm_matching {
                let m = match_norms_for(cfg, &fingerprint, model, &stream[..t], *seed, &pool)?;
                for spec in methods.iter_mut() {
                    if let Some(found) = m.matches.iter().find(|x| x.method == spec.name) {
                        *spec = found.adjusted.clone();
                    }
                }
                norm_matches.push(m);
            }
            specs.insert((t, *seed), methods);
        }
    }

    let mut jobs = Vec::new();
    for method_index in 0..cfg.methods.len() {
        for &t in &cfg.t_grid {
            for (w, (seed, _, _)) in worlds.iter().enumerate() {
                jobs.push((method_index, t, w, *seed));
            }
        }
    }
    let results: Vec<(ExperimentReport, CellTiming)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mi, t, w, seed)| {
                let (_, model, stream) = &worlds[w];
                let method = &specs[&(t, seed)][mi];
                let started = std::time::Instant::now();
                let report = run_cell(cfg, &fingerprint, method, model, &stream[..t], seed);
                let timing = CellTiming {
                    fingerprint: fingerprint.clone(),
                    method: method.name.clone(),
                    t,
                    seed,
                    total_us: started.elapsed().as_micros() as u64,
                    per_edit_us: report.trace.iter().map(|e| e.elapsed_us).collect(),
                };
                (report, timing)
            })
            .collect()
    });

    let mut reports = Vec::with_capacity(results.len());
    let mut report_paths = Vec::with_capacity(results.len());
    for (report, timing) in results {
        let stem = file_stem(&report.method, report.t, report.seed, &fingerprint);
        let path = cfg.output_dir.join(format!("{stem}.json"));
        write_text(&path, &to_json_text(&report)?)?;
        write_text(
            &cfg.output_dir.join(format!("{stem}.timing.json")),
            &to_json_text(&timing)?,
        )?;
        report_paths.push(path);
        reports.push(report);
    }
    for m in &norm_matches {
        let path = cfg.output_dir.join(format!(
            "norm-match_T{}_seed{}_{}.json",
            m.t,
            m.seed,
            &fingerprint[..12]
        ));
        write_text(&path, &to_json_text(m)?)?;
    }
    let summary_path = cfg.output_dir.join(format!("summary_{}.csv", &fingerprint[..12]));
    write_text(&summary_path, &emit_summary(&reports)?)?;
    Ok(GridResult {
        fingerprint,
        reports,
        report_paths,
        norm_matches,
        summary_path,
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub variant: String,
    pub t: usize,
    pub n_seeds: usize,
    pub knob_mean: Option<f64>,
    pub rel_mean: f64,
    pub rel_std: f64,
    pub gen_mean: f64,
    pub gen_std: f64,
    pub loc_mean: f64,
    pub loc_std: f64,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub spectral_norm_mean: f64,
    pub activation_score_mean: f64,
    pub pairwise_cosine_mean: Option<f64>,
    pub absorbed_mean: f64,
    pub fingerprint: String,
}

/// Column order of the summary CSV.
pub const SUMMARY_COLUMNS: &[&str] = &[
    "method",
    "variant",
    "t",
    "n_seeds",
    "knob_mean",
    "rel_mean",
    "rel_std",
    "gen_mean",
    "gen_std",
    "loc_mean",
    "loc_std",
    "avg_mean",
    "avg_std",
    "spectral_norm_mean",
    "activation_score_mean",
    "pairwise_cosine_mean",
    "absorbed_mean",
    "fingerprint",
];

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (m, (ss / (values.len() - 1) as f64).sqrt())
}

fn variant_and_knob(spec: &MethodSpec) -> (String, Option<f64>) {
    match spec.strategy {
        Strategy::Plain => ("plain".into(), None),
        Strategy::Soft => ("soft".into(), None),
        Strategy::Hard => ("hard".into(), None),
        Strategy::Baseline(b) => (b.name().into(), Some(knob_value(&b))),
    }
}

/// Aggregates completed reports into rows keyed by (method, T).
pub fn summarize(reports: &[ExperimentReport]) -> Result<Vec<SummaryRow>> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(Error::Config(format!(
            "reports from different configs ({} vs {}) cannot be summarised together",
            &first.fingerprint[..12.min(first.fingerprint.len())],
            &other.fingerprint[..12.min(other.fingerprint.len())]
        )));
    }
    let mut groups: BTreeMap<(String, usize), Vec<&ExperimentReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.failure.is_none() && r.metrics.is_some()) {
        groups.entry((r.method.clone(), r.t)).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|((method, t), rs)| {
            let m = |f: &dyn Fn(&RunMetrics) -> f64| {
                rs.iter().map(|r| f(r.metrics.as_ref().expect("filtered"))).collect::<Vec<_>>()
            };
            let (rel_mean, rel_std) = mean_std(&m(&|x| x.scores.rel));
            let (gen_mean, gen_std) = mean_std(&m(&|x| x.scores.gen));
            let (loc_mean, loc_std) = mean_std(&m(&|x| x.scores.loc));
            let (avg_mean, avg_std) = mean_std(&m(&|x| x.scores.avg));
            let cos: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.metrics.as_ref().and_then(|x| x.mean_pairwise_cosine))
                .collect();
            let (variant, _) = variant_and_knob(&rs[0].method_spec);
            let knobs: Vec<f64> = rs
                .iter()
                .filter_map(|r| variant_and_knob(&r.method_spec).1)
                .collect();
            SummaryRow {
                method,
                variant,
                t,
                n_seeds: rs.len(),
                knob_mean: (!knobs.is_empty()).then(|| mean(&knobs)),
                rel_mean,
                rel_std,
                gen_mean,
                gen_std,
                loc_mean,
                loc_std,
                avg_mean,
                avg_std,
                spectral_norm_mean: mean(&m(&|x| x.spectral_norm_total)),
                activation_score_mean: mean(&m(&|x| x.mean_activation_score)),
                pairwise_cosine_mean: (!cos.is_empty()).then(|| mean(&cos)),
                absorbed_mean: mean(&m(&|x| x.absorbed_edits as f64)),
                fingerprint: rs[0].fingerprint.clone(),
            }
        })
        .collect();
    Ok(rows)
}

/// The summary table as CSV text with the [`SUMMARY_COLUMNS`] header.
pub fn emit_summary(reports: &[ExperimentReport]) -> Result<String> {
    let rows = summarize(reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.method,
            r.variant,
            r.t.to_string(),
            r.n_seeds.to_string(),
            opt(r.knob_mean),
            r.rel_mean.to_string(),
            r.rel_std.to_string(),
            r.gen_mean.to_string(),
            r.gen_std.to_string(),
            r.loc_mean.to_string(),
            r.loc_std.to_string(),
            r.avg_mean.to_string(),
            r.avg_std.to_string(),
            r.spectral_norm_mean.to_string(),
            r.activation_score_mean.to_string(),
            opt(r.pairwise_cosine_mean),
            r.absorbed_mean.to_string(),
            r.fingerprint,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Reads every `*.json` report in a directory (timing and norm-match files
/// are skipped), sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<ExperimentReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with(".timing.json") && !name.starts_with("norm-match")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// Knob of a baseline as a single number.
pub fn knob_value(b: &BaselineConfig) -> f64 {
    match *b {
        BaselineConfig::StepReduce { reduced_steps } => reduced_steps as f64,
        BaselineConfig::RandomZero { zero_fraction } => zero_fraction,
        BaselineConfig::RandomSubspace { subspace_dim } => subspace_dim as f64,
        BaselineConfig::Scale { eta } => eta,
        BaselineConfig::Prune { prune_base, .. } => prune_base,
    }
}

/// Largest zero fraction tried during matching.
const MAX_ZERO_FRACTION: f64 = 0.999;
/// Smallest scale tried during matching.
const MIN_ETA: f64 = 1e-3;

/// Baseline with its knob set from a strength `s ∈ [0, 1]`, where `s = 1` is
/// the unablated edit and the applied norm grows with `s`. `None` for
/// baselines that are not matched.
fn knob_at(b: &BaselineConfig, s: f64, max_steps: usize, d: usize) -> Option<BaselineConfig> {
    let s = s.clamp(0.0, 1.0);
    Some(match *b {
        BaselineConfig::Scale { .. } => BaselineConfig::Scale {
            eta: MIN_ETA + s * (1.0 - MIN_ETA),
        },
        BaselineConfig::StepReduce { .. } => BaselineConfig::StepReduce {
            reduced_steps: 1 + (s * (max_steps - 1) as f64).round() as usize,
        },
        BaselineConfig::RandomZero { .. } => BaselineConfig::RandomZero {
            zero_fraction: (1.0 - s) * MAX_ZERO_FRACTION,
        },
        BaselineConfig::RandomSubspace { .. } => BaselineConfig::RandomSubspace {
            subspace_dim: ((1.0 - s) * d as f64).round() as usize,
        },
        BaselineConfig::Prune { .. } => return None,
    })
}

/// One step of a bisection transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchStep {
    pub knob: f64,
    pub spectral_norm: f64,
}

/// Result of matching one baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormMatch {
    pub method: String,
    pub variant: String,
    pub target_norm: f64,
    pub achieved_norm: f64,
    pub knob: f64,
    /// Achieved norm within [`NORM_MATCH_TOL`] of the target.
    pub matched: bool,
    /// The target is above the unablated norm, so the knob stopped at identity.
    pub saturated: bool,
    pub transcript: Vec<MatchStep>,
    pub adjusted: MethodSpec,
}

/// All baselines matched against one target run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormMatchReport {
    pub fingerprint: String,
    pub target_method: String,
    pub t: usize,
    pub seed: u64,
    pub target_norm: f64,
    pub matches: Vec<NormMatch>,
}

fn final_norm(model: &MemoryModel, stream: &[EditRequest], spec: &MethodSpec, seed: u64) -> Result<f64> {
    let out = run_sequence(model, stream, spec, seed).map_err(|f| f.error)?;
    Ok(spectral_norm(&(&out.model.weights - &model.weights)))
}

/// Bisects the knob of `spec` (a baseline) until the final spectral norm of the
/// run is within [`NORM_MATCH_TOL`] of `target_norm`.
pub fn match_norm(
    model: &MemoryModel,
    stream: &[EditRequest],
    spec: &MethodSpec,
    target_norm: f64,
    seed: u64,
) -> Result<Option<NormMatch>> {
    let Strategy::Baseline(b) = spec.strategy else {
        return Ok(None);
    };
    let max_steps = spec.solver.max_steps;
    let d = model.d();
    let at = |s: f64| knob_at(&b, s, max_steps, d);
    if at(1.0).is_none() {
        return Ok(None);
    }
    let mut transcript = Vec::new();
    let mut eval = |s: f64| -> Result<(BaselineConfig, f64)> {
        let knob = at(s).expect("matched baseline");
        let adjusted = MethodSpec {
            strategy: Strategy::Baseline(knob),
            ..spec.clone()
        };
        let norm = final_norm(model, stream, &adjusted, seed)?;
        transcript.push(MatchStep {
            knob: knob_value(&knob),
            spectral_norm: norm,
        });
        Ok((knob, norm))
    };
    let within = |n: f64| (n - target_norm).abs() <= NORM_MATCH_TOL * target_norm;

    let (top_knob, top) = eval(1.0)?;
    let mut best = (top_knob, top);
    let mut saturated = false;
    if top <= target_norm {
        saturated = true;
    } else {
        let (lo_knob, lo_norm) = eval(0.0)?;
        if (lo_norm - target_norm).abs() < (best.1 - target_norm).abs() {
            best = (lo_knob, lo_norm);
        }
        if lo_norm < target_norm && !within(best.1) {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..NORM_MATCH_MAX_ITER {
                let mid = 0.5 * (lo + hi);
                let (knob, norm) = eval(mid)?;
                if (norm - target_norm).abs() < (best.1 - target_norm).abs() {
                    best = (knob, norm);
                }
                if within(norm) {
                    break;
                }
                if norm > target_norm {
                    hi = mid;
                } else {
                    lo = mid;
                }
                // integer knobs stop moving once the bracket is this narrow
                if knob_value(&at(lo).expect("matched")) == knob_value(&at(hi).expect("matched")) {
                    break;
                }
            }
        }
    }
    let (knob, achieved) = best;
    Ok(Some(NormMatch {
        method: spec.name.clone(),
        variant: b.name().into(),
        target_norm,
        achieved_norm: achieved,
        knob: knob_value(&knob),
        matched: within(achieved),
        saturated,
        transcript,
        adjusted: MethodSpec {
            strategy: Strategy::Baseline(knob),
            ..spec.clone()
        },
    }))
}

fn match_norms_for(
    cfg: &ExperimentConfig,
    fingerprint: &str,
    model: &MemoryModel,
    stream: &[EditRequest],
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<NormMatchReport> {
    let target = cfg
        .methods
        .iter()
        .find(|m| m.name == cfg.match_target)
        .ok_or_else(|| Error::Config(format!("unknown match target {}", cfg.match_target)))?;
    let target_norm = final_norm(model, stream, target, seed)?;
    let matches: Vec<NormMatch> = pool.install(|| {
        cfg.methods
            .par_iter()
            .map(|m| match_norm(model, stream, m, target_norm, seed))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    Ok(NormMatchReport {
        fingerprint: fingerprint.to_string(),
        target_method: target.name.clone(),
        t: stream.len(),
        seed,
        target_norm,
        matches,
    })
}

/// Norm matching for every (T, seed) of the config without running the grid.
pub fn match_norms(cfg: &ExperimentConfig) -> Result<Vec<NormMatchReport>> {
    let cfg = ExperimentConfig {
        norm_matching: true,
        ..cfg.clone()
    };
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    let pool = pool(cfg.workers)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let (model, stream) = world_for_seed(&cfg, seed)?;
        for &t in &cfg.t_grid {
            out.push(match_norms_for(&cfg, &fingerprint, &model, &stream[..t], seed, &pool)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_std(&[0.3, 0.3]).1, 0.0);
        let (m, s) = mean_std(&[0.4, 0.6]);
        assert!((m - 0.5).abs() < 1e-15);
        assert!((s - 0.141_421_356).abs() < 1e-8);
    }

    #[test]
    fn overrides_reach_nested_and_array_fields() {
        let base = ExperimentConfig::default().to_toml_string().unwrap();
        let cfg = ExperimentConfig::from_toml_str(
            &base,
            &[
                "corpus.d=32".into(),
                "methods.1.solver.lambda1=10".into(),
                "t_grid=[5, 7]".into(),
                "output_dir=elsewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.corpus.d, 32);
        assert_eq!(cfg.methods[1].solver.lambda1, 10.0);
        assert_eq!(cfg.t_grid, vec![5, 7]);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(ExperimentConfig::from_toml_str(&base, &["methods.9.name=x".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(&base, &["nonsense".into()]).is_err());
    }

    #[test]
    fn fingerprint_ignores_location_and_workers() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "x".into(),
            workers: 3,
            ..a.clone()
        };
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let c = ExperimentConfig {
            seeds: vec![9],
            ..a.clone()
        };
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }
}
