use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
version = 1
t_grid = [3, 5]
seeds = [0, 1]
output_dir = "unused"

[corpus]
d = 16
d_m = 12
n_vocab = 24
n_pretrain = 8
n_heldout = 16
stream_budget = 6

[[methods]]
name = "memit"

[[methods]]
name = "o-edit+"
strategy = { kind = "hard" }
q_cap = 4

[[methods]]
name = "scale"
strategy = { kind = "baseline", variant = "scale", eta = 0.5 }
"#;

fn oedit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oedit"))
        .args(args)
        .env("OEDIT_OUTPUT_DIR", dir.join("out"))
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("grid.toml"), CONFIG).unwrap();
    dir
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_one_report_per_cell_and_a_summary() {
    let dir = setup();
    let out = oedit(dir.path(), &["run", "grid.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = listing(&dir.path().join("out"));
    let reports = files
        .iter()
        .filter(|f| f.ends_with(".json") && !f.ends_with(".timing.json"))
        .count();
    assert_eq!(reports, 3 * 2 * 2);
    assert!(files.iter().any(|f| f.starts_with("o-edit-plus_T5_seed1_")));
    assert_eq!(files.iter().filter(|f| f.starts_with("summary_")).count(), 1);

    let summary = oedit(dir.path(), &["summarize", "grid.toml"]);
    assert!(summary.status.success());
    let text = String::from_utf8(summary.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("method,variant,t,n_seeds"));
    assert_eq!(lines.count(), 3 * 2);
}

#[test]
fn overrides_change_the_grid() {
    let dir = setup();
    let out = oedit(dir.path(), &["run", "grid.toml", "t_grid=[2]", "seeds=[7]", "methods.1.lambda3=1.0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = listing(&dir.path().join("out"));
    assert!(files.iter().any(|f| f.starts_with("memit_T2_seed7_")));
    assert!(!files.iter().any(|f| f.contains("_T3_")));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = setup();
    assert_eq!(oedit(dir.path(), &["run", "missing.toml"]).status.code(), Some(2));
    assert_eq!(oedit(dir.path(), &["run", "grid.toml", "t_grid=[99]"]).status.code(), Some(2));
    assert_eq!(oedit(dir.path(), &["run", "grid.toml", "corpus.bogus=1"]).status.code(), Some(2));
    assert_eq!(oedit(dir.path(), &["summarize", "grid.toml", "methods=[]"]).status.code(), Some(2));
}

#[test]
fn failing_cells_exit_with_three_and_keep_going() {
    let dir = setup();
    // an enormous covariance weight makes every hard-constraint denominator vanish
    let out = oedit(
        dir.path(),
        &["run", "grid.toml", "methods.0.closed_form=\"rome\"", "methods.0.lambda_c=1e300"],
    );
    let code = out.status.code();
    let files = listing(&dir.path().join("out"));
    let reports = files
        .iter()
        .filter(|f| f.ends_with(".json") && !f.ends_with(".timing.json"))
        .count();
    assert_eq!(code, Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(reports, 12);
}

#[test]
fn gen_corpus_and_match_norms() {
    let dir = setup();
    let out = oedit(dir.path(), &["gen-corpus", "grid.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = listing(&dir.path().join("out"));
    assert_eq!(files.iter().filter(|f| f.starts_with("corpus_seed")).count(), 2);
    assert_eq!(files.iter().filter(|f| f.starts_with("stream_seed")).count(), 2);
    let corpus = dir.path().join("out").join(files.iter().find(|f| f.starts_with("corpus_seed0")).unwrap());
    oedit_core::records::read_corpus(&corpus).unwrap();

    let out = oedit(dir.path(), &["match-norms", "grid.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.lines().nth(1).unwrap().starts_with("scale,"));
}

#[test]
fn default_config_round_trips() {
    let dir = setup();
    let out = oedit(dir.path(), &["default-config"]);
    assert!(out.status.success());
    std::fs::write(dir.path().join("default.toml"), &out.stdout).unwrap();
    let parsed = oedit_core::ExperimentConfig::load(&dir.path().join("default.toml"), &[]).unwrap();
    assert_eq!(parsed, oedit_core::ExperimentConfig::default());
}
