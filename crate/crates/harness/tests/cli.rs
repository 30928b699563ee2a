//! End-to-end CLI checks: exit codes, determinism, and journal resume.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tfnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfnas")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(dir: &Path, benchmark: &Path, metrics: &str) -> PathBuf {
    write_config(
        dir,
        &format!(
            "version=1\nsearch_space=rnn\nmetrics={metrics}\nseeds=0,1\nminibatches=0\n\
             batch_size=3\nseq_len=6\nhidden_dim=8\n\
             corpus={}\nvocab={}\nbenchmark={}\noutput={}\n",
            fixture("tiny_corpus.txt").display(),
            fixture("tiny_vocab.txt").display(),
            benchmark.display(),
            dir.join("out").display()
        ),
    )
}

#[test]
fn count_space_prints_exact_total() {
    let out = tfnas(&["count-space"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "10621440\n");
}

#[test]
fn sample_is_deterministic_and_valid() {
    let args = ["sample", "--space", "transformer", "--n", "5", "--seed", "3"];
    let a = tfnas(&args);
    let b = tfnas(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines() {
        tfnas_core::genome::deserialize(line).expect("sampled genome parses and validates");
    }
}

#[test]
fn usage_errors_exit_1() {
    let out = tfnas(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn input_errors_exit_2() {
    let out = tfnas(&["score", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));

    // Config referencing a missing corpus also fails as an input error.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "version=1\nsearch_space=rnn\ncorpus=missing.txt\nvocab=missing.txt\noutput=out\nbenchmark=missing.tsv\n",
    );
    let out = tfnas(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.tsv");
    let out = tfnas(&[
        "sample",
        "--space",
        "rnn",
        "--n",
        "4",
        "--seed",
        "9",
        "--max-nodes",
        "7",
        "--benchmark-synthetic",
        "--out",
        bench.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let cfg = small_config(dir.path(), &bench, "parameter_count,synaptic_saliency,hidden_covariance_l0");
    let scores_path = dir.path().join("out").join("scores.tsv");
    let journal_path = dir.path().join("out").join("journal.tsv");

    let first = tfnas(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(first.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&first.stderr));
    // Cell cardinality: 4 genomes x 3 metrics x 2 seeds x 1 minibatch.
    assert!(
        String::from_utf8_lossy(&first.stdout).contains("scored 24 cells"),
        "unexpected cell count: {}",
        String::from_utf8_lossy(&first.stdout)
    );
    let first_bytes = std::fs::read(&scores_path).unwrap();
    let row_count = std::fs::read_to_string(&scores_path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count();
    assert_eq!(row_count, 24);

    // Re-run: everything reused, byte-identical output.
    let second = tfnas(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(second.status.code(), Some(0));
    let second_stdout = String::from_utf8_lossy(&second.stdout).to_string();
    assert!(second_stdout.contains("0 computed"), "expected full reuse: {second_stdout}");
    assert_eq!(std::fs::read(&scores_path).unwrap(), first_bytes);

    // Simulate an interrupted run: keep half the journal plus a torn line.
    let journal = std::fs::read_to_string(&journal_path).unwrap();
    let lines: Vec<&str> = journal.lines().collect();
    let keep = 1 + (lines.len() - 1) / 2;
    let mut truncated = lines[..keep].join("\n");
    truncated.push_str("\n3\tparameter_cou"); // torn mid-row write
    std::fs::write(&journal_path, truncated).unwrap();
    std::fs::remove_file(&scores_path).unwrap();

    let resumed = tfnas(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(resumed.status.code(), Some(0));
    let resumed_stdout = String::from_utf8_lossy(&resumed.stdout).to_string();
    // The preserved half is never recomputed.
    let reused: usize = resumed_stdout
        .split(" computed, ")
        .nth(1)
        .and_then(|s| s.split(" reused").next())
        .and_then(|s| s.parse().ok())
        .unwrap();
    assert!(reused >= keep - 1, "journal rows lost: {resumed_stdout}");
    // And the final table is byte-identical to the uninterrupted run.
    assert_eq!(std::fs::read(&scores_path).unwrap(), first_bytes);
}

#[test]
fn evaluate_writes_report_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &fixture("rnn20.tsv"), "parameter_count,synaptic_saliency");

    let score = tfnas(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(score.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&score.stderr));
    let eval = tfnas(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&eval.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out").join("report.json")).unwrap())
            .unwrap();
    let reports = report["reports"].as_array().unwrap();
    // metric count x one normalization setting.
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert_eq!(r["n_evaluated"].as_u64().unwrap() + r["n_discarded"].as_u64().unwrap(), 20);
        let pairs_file = r["pairs_file"].as_str().unwrap();
        assert!(dir.path().join("out").join(pairs_file).exists());
    }

    // Determinism: evaluating again produces byte-identical reports.
    let report_bytes = std::fs::read(dir.path().join("out").join("report.json")).unwrap();
    let again = tfnas(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("out").join("report.json")).unwrap(), report_bytes);
}

#[test]
fn degenerate_cells_exit_3_and_stay_flagged() {
    // A collapsed cell (h multiplied by the zero-initialized state) makes
    // the state- and input-sensitive metrics degenerate; the sweep must
    // finish, flag the rows, and exit 3.
    let dir = tempfile::tempdir().unwrap();
    let genomes = dir.path().join("genomes.txt");
    std::fs::write(&genomes, "v1 kind=rnn nodes=linear:x,h;prod:h,0;tanh:1 out=2\n").unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "version=1\nsearch_space=rnn\nmetrics=hidden_covariance_l0\nseeds=0\nminibatches=0\n\
             batch_size=3\nseq_len=6\nhidden_dim=8\ncorpus={}\nvocab={}\ngenomes={}\noutput={}\n",
            fixture("tiny_corpus.txt").display(),
            fixture("tiny_vocab.txt").display(),
            genomes.display(),
            dir.path().join("out").display()
        ),
    );
    let out = tfnas(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let scores = std::fs::read_to_string(dir.path().join("out").join("scores.tsv")).unwrap();
    assert!(scores.contains("zero_variance"), "flagged row missing: {scores}");
}

#[test]
fn evaluate_both_normalizations_doubles_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "version=1\nsearch_space=rnn\nmetrics=parameter_count,synaptic_saliency\nseeds=0\n\
             minibatches=0\nbatch_size=3\nseq_len=6\nhidden_dim=8\nnormalization=both\n\
             corpus={}\nvocab={}\nbenchmark={}\noutput={}\n",
            fixture("tiny_corpus.txt").display(),
            fixture("tiny_vocab.txt").display(),
            fixture("rnn20.tsv").display(),
            dir.path().join("out").display()
        ),
    );
    assert_eq!(tfnas(&["score", "--config", cfg.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(tfnas(&["evaluate", "--config", cfg.to_str().unwrap()]).status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out").join("report.json")).unwrap(),
    )
    .unwrap();
    // metric count x 2 normalization settings.
    assert_eq!(report["reports"].as_array().unwrap().len(), 4);
}

#[test]
fn ablate_needs_ten_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.tsv");
    tfnas(&[
        "sample", "--space", "rnn", "--n", "4", "--seed", "2", "--benchmark-synthetic", "--out",
        bench.to_str().unwrap(),
    ]);
    let cfg = small_config(dir.path(), &bench, "parameter_count");
    let out = tfnas(&["ablate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
