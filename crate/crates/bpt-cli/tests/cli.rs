//! End-to-end tests of the `bpt` binary: exit codes, file outputs, manifest
//! replay, and the failure modes each subcommand promises.

use std::path::Path;
use std::process::Command;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn bpt(args: &[&str], cwd: &Path) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_bpt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary should spawn");
    Run {
        code: output.status.code().expect("no signal"),
        stdout: String::from_utf8(output.stdout).expect("utf8 stdout"),
        stderr: String::from_utf8(output.stderr).expect("utf8 stderr"),
    }
}

/// Field `col` of the first CSV data row whose first field is `key`.
fn csv_field(csv: &str, key: &str, col: usize) -> String {
    let header: Vec<&str> = csv.lines().next().expect("header").split(',').collect();
    assert!(col < header.len(), "column {col} outside header {header:?}");
    csv.lines()
        .skip(1)
        .map(|line| line.split(',').collect::<Vec<_>>())
        .find(|fields| fields[0] == key)
        .unwrap_or_else(|| panic!("no row for {key}"))[col]
        .to_string()
}

fn column_index(csv: &str, name: &str) -> usize {
    csv.lines()
        .next()
        .expect("header")
        .split(',')
        .position(|c| c == name)
        .unwrap_or_else(|| panic!("no column {name}"))
}

// ---------------------------------------------------------------------------
// verify

#[test]
fn verify_passes_prints_per_check_lines_and_replays_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &[
            "verify",
            "--sizes",
            "8,16",
            "--n-seeds",
            "1",
            "--causality-trials",
            "4",
            "--out-dir",
            "first",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(run.stdout.contains("check attention_equivalence: PASS"));
    assert!(run.stdout.contains("check causality_bitwise: PASS"));
    assert!(run.stdout.contains("8/8 checks passed"));
    let report = std::fs::read(dir.path().join("first/verify_report.txt")).unwrap();

    let rerun = bpt(
        &[
            "verify",
            "--config",
            "first/verify_manifest.toml",
            "--out-dir",
            "second",
        ],
        dir.path(),
    );
    assert_eq!(rerun.code, 0, "stderr: {}", rerun.stderr);
    let replayed = std::fs::read(dir.path().join("second/verify_report.txt")).unwrap();
    assert_eq!(report, replayed, "manifest replay must be bitwise");
}

#[test]
fn verify_unreachable_tolerance_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &[
            "verify",
            "--sizes",
            "8",
            "--n-seeds",
            "1",
            "--causality-trials",
            "2",
            "--attention-tol",
            "1e-20",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 1);
    assert!(run.stdout.contains("check attention_equivalence: FAIL"));
}

#[test]
fn verify_injected_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &[
            "verify",
            "--sizes",
            "8",
            "--n-seeds",
            "1",
            "--causality-trials",
            "2",
            "--inject-fault",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 1, "a negated correction factor must not pass");
    assert!(run.stdout.contains("FAIL"));
}

#[test]
fn verify_half_precision_fails_the_default_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &[
            "verify",
            "--precision",
            "f32",
            "--sizes",
            "8,16",
            "--n-seeds",
            "1",
            "--causality-trials",
            "4",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 1);
    assert!(run.stdout.contains("check attention_equivalence: FAIL"));
    // Exact properties hold at any width.
    assert!(run.stdout.contains("check causality_bitwise: PASS"));
}

// ---------------------------------------------------------------------------
// plan

#[test]
fn plan_preset_echoes_dims_and_orders_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &["plan", "--preset", "gpt-1b", "--budget-gb", "80"],
        dir.path(),
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(run
        .stdout
        .contains("model gpt-1b: n_layers=24 d_model=2048 n_heads=16 d_head=128"));
    assert!(run.stdout.contains("assumptions:"));

    let csv = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    let col = column_index(&csv, "max_context");
    let context = |strategy: &str| -> u64 { csv_field(&csv, strategy, col).parse().unwrap() };
    let (vanilla, flash, bpt_ctx) = (context("vanilla"), context("flash"), context("bpt"));
    assert!(
        bpt_ctx >= flash && flash >= vanilla,
        "expected bpt {bpt_ctx} >= flash {flash} >= vanilla {vanilla}"
    );
}

#[test]
fn plan_budget_below_fixed_state_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &["plan", "--preset", "gpt-1b", "--budget-bytes", "1000"],
        dir.path(),
    );
    assert_eq!(run.code, 3);
    assert!(
        run.stderr.contains("fixed cost") && run.stderr.contains("exceeds budget"),
        "the error must name the floor: {}",
        run.stderr
    );
}

#[test]
fn plan_without_a_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(&["plan", "--budget-gb", "80"], dir.path());
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("a model is required"));
}

// ---------------------------------------------------------------------------
// trace

#[test]
fn trace_fits_slopes_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &["trace", "--sizes", "64,128,256", "--strategy", "flash,bpt"],
        dir.path(),
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(run.stdout.contains("strategy flash: slope"));
    assert!(run.stdout.contains("strategy bpt: slope"));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6, "header plus one row per cell");
}

#[test]
fn trace_single_point_reports_insufficient_points() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &["trace", "--sizes", "64", "--strategy", "bpt"],
        dir.path(),
    );
    assert_eq!(run.code, 0);
    assert!(run.stdout.contains("insufficient points"));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "one data row");
}

#[test]
fn trace_unknown_strategy_is_a_usage_error_listing_names() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(&["trace", "--strategy", "warp"], dir.path());
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("unknown strategy 'warp'"));
    assert!(run.stderr.contains("vanilla, flash, or bpt"));
}

#[test]
fn trace_records_cell_errors_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    // 7 does not divide 60, so the first cell fails; the second still runs.
    let run = bpt(
        &[
            "trace",
            "--strategy",
            "bpt",
            "--sizes",
            "60,64",
            "--chunks",
            "7,8",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 0, "per-cell errors must not abort the sweep");
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let status = column_index(&csv, "status");
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][status], "error");
    assert_eq!(rows[1][status], "ok");
}

// ---------------------------------------------------------------------------
// bench

#[test]
fn bench_cap_marks_oom_rows_and_tokens_per_second_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &[
            "bench",
            "--strategy",
            "vanilla,bpt",
            "--seq-len",
            "512",
            "--cap",
            "1000000",
            "--repeats",
            "3",
            "--warmup",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 0, "oom is a result row, not a crash");
    assert!(run.stdout.contains("machine-relative"));
    assert!(run.stdout.contains("strategy vanilla: oom"));

    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let status = column_index(&csv, "status");
    assert_eq!(csv_field(&csv, "vanilla", status), "oom");
    assert_eq!(csv_field(&csv, "bpt", status), "ok");

    // tokens/second must match tokens_per_step / median_seconds within 1%.
    let tokens: f64 = csv_field(&csv, "bpt", column_index(&csv, "tokens_per_step"))
        .parse()
        .unwrap();
    let med: f64 = csv_field(&csv, "bpt", column_index(&csv, "median_seconds"))
        .parse()
        .unwrap();
    let tps: f64 = csv_field(
        &csv,
        "bpt",
        column_index(&csv, "tokens_per_second_median"),
    )
    .parse()
    .unwrap();
    let implied = tokens / med;
    assert!(
        (tps - implied).abs() / implied < 0.01,
        "reported {tps} vs implied {implied}"
    );
}

#[test]
fn bench_single_repeat_reports_spread_na() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &[
            "bench",
            "--strategy",
            "bpt",
            "--seq-len",
            "128",
            "--repeats",
            "1",
            "--warmup",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv_field(&csv, "bpt", column_index(&csv, "spread")), "na");
}

// ---------------------------------------------------------------------------
// train

fn write_train_setup(dir: &Path) {
    let corpus = "the quick brown fox jumps over the lazy dog. ".repeat(200);
    std::fs::write(dir.join("corpus.txt"), corpus).unwrap();
    std::fs::write(
        dir.join("train.toml"),
        r#"
strategy = "bpt"
corpus_path = "corpus.txt"
steps = 20
seq_len = 64
c_q = 16
c_kv = 16
n_layers = 1
d_model = 32
n_heads = 2
seed = 11
"#,
    )
    .unwrap();
}

fn read_losses(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_writes_metrics_and_manifest_replay_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    write_train_setup(dir.path());
    let run = bpt(
        &["train", "--config", "train.toml", "--out-dir", "first"],
        dir.path(),
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let metrics = std::fs::read(dir.path().join("first/metrics.csv")).unwrap();
    assert!(!metrics.is_empty());

    // Replay from the manifest, from an unrelated working directory.
    let elsewhere = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("first/train_manifest.toml");
    let out = elsewhere.path().join("replay");
    let rerun = bpt(
        &[
            "train",
            "--config",
            manifest.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ],
        elsewhere.path(),
    );
    assert_eq!(rerun.code, 0, "stderr: {}", rerun.stderr);
    // The manifest pins the metrics path, so the replay overwrites it.
    let replayed = std::fs::read(dir.path().join("first/metrics.csv")).unwrap();
    assert_eq!(metrics, replayed, "replayed metrics must be bitwise equal");
}

#[test]
fn train_loss_columns_agree_across_strategies() {
    let dir = tempfile::tempdir().unwrap();
    write_train_setup(dir.path());
    for strategy in ["bpt", "vanilla"] {
        let run = bpt(
            &[
                "train",
                "--config",
                "train.toml",
                "--strategy",
                strategy,
                "--out-dir",
                strategy,
            ],
            dir.path(),
        );
        assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    }
    let a = read_losses(
        &std::fs::read_to_string(dir.path().join("bpt/metrics.csv")).unwrap(),
    );
    let b = read_losses(
        &std::fs::read_to_string(dir.path().join("vanilla/metrics.csv")).unwrap(),
    );
    assert_eq!(a.len(), b.len());
    for (step, (x, y)) in a.iter().zip(&b).enumerate() {
        let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
        assert!(rel < 1e-3, "step {step}: {x} vs {y} (rel {rel})");
    }
}

#[test]
fn train_missing_corpus_path_is_a_schema_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.toml"), "strategy = \"bpt\"\nsteps = 5\n").unwrap();
    let run = bpt(&["train", "--config", "broken.toml"], dir.path());
    assert_eq!(run.code, 2);
    assert!(
        run.stderr.contains("corpus_path"),
        "error must name the missing field: {}",
        run.stderr
    );
}

#[test]
fn train_without_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(&["train"], dir.path());
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("requires --config"));
}

// ---------------------------------------------------------------------------
// manifests

#[test]
fn manifest_from_another_subcommand_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(
        &["trace", "--sizes", "64", "--strategy", "bpt"],
        dir.path(),
    );
    assert_eq!(run.code, 0);
    let cross = bpt(
        &["bench", "--config", "trace_manifest.toml"],
        dir.path(),
    );
    assert_eq!(cross.code, 2);
    assert!(cross.stderr.contains("belongs to subcommand 'trace'"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = bpt(&["verify", "--no-such-flag"], dir.path());
    assert_eq!(run.code, 2);
}
