use std::path::Path;
use std::process::{Command, Output};

use timesteer_harness::config::CorpusSource;
use timesteer_harness::report::{Format, CSV_HEADER};
use timesteer_harness::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport};

fn timesteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timesteer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&timesteer(&["--help"])), 0);
    assert_eq!(code(&timesteer(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&timesteer(&[])), 1);
    assert_eq!(code(&timesteer(&["frobnicate"])), 1);
    assert_eq!(code(&timesteer(&["shift-exp", "--kind", "sideways"])), 1);
    assert_eq!(code(&timesteer(&["dynamic", "--alpha-grid", "1,x"])), 1);
    assert_eq!(code(&timesteer(&["dynamic", "--sites", "nowhere@9"])), 1);
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&timesteer(&["report", "--input", p(&missing)])), 2);

    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"rows\": 3}").unwrap();
    assert_eq!(code(&timesteer(&["report", "--input", p(&junk)])), 2);

    let corpus = dir.path().join("bad.jsonl");
    std::fs::write(&corpus, "{\"text\": 1}\n").unwrap();
    let out = timesteer(&["eval-matrix", "--jsonl", p(&corpus), "--out-dir", p(dir.path())]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_corpus_writes_one_file_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = timesteer(&["gen-corpus", "--seed", "7", "--out-dir", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let file = dir.path().join("corpus_seed7.jsonl");
    let first = std::fs::read(&file).unwrap();
    assert!(!first.is_empty());
    timesteer(&["gen-corpus", "--seed", "7", "--out-dir", p(dir.path())]);
    assert_eq!(std::fs::read(&file).unwrap(), first);
}

#[test]
fn report_re_emits_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = ExperimentReport::new(ExperimentConfig::preset(ExperimentKind::Dynamic), Vec::new(), 0.0);
    let paths = report.emit(dir.path(), &Format::ALL).unwrap();
    let before: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(
        String::from_utf8(before[0].clone()).unwrap(),
        CSV_HEADER.join(",") + "\n"
    );

    let json = dir.path().join("dynamic.json");
    let out = timesteer(&["report", "--input", p(&json)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let after: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn report_check_detects_tampered_rows() {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::AblateRank);
    if let CorpusSource::Synthetic { n_per_period, .. } = &mut cfg.corpus {
        *n_per_period = 100;
    }
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.train.epochs = 1;
    cfg.seeds = vec![2];
    cfg.ranks = vec![2];
    cfg.alpha_grid = vec![-1.0, 1.0];
    let mut report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = report.emit(dir.path(), &[Format::Json]).unwrap().remove(0);
    let out = timesteer(&["report", "--input", p(&json), "--check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    report.rows[1].accuracy += 1e-12;
    report.emit(dir.path(), &[Format::Json]).unwrap();
    let out = timesteer(&["report", "--input", p(&json), "--check"]);
    assert_eq!(code(&out), 2);
}
