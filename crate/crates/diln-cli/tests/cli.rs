//! End-to-end command tests: smoke paths, exit codes, file outputs and
//! byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn diln() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diln"))
}

fn run(args: &[&str]) -> Output {
    diln().args(args).output().expect("spawn diln")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "users = 60\ncategories = 10\ncategories_per_user = 4\nepochs = 2\nbatch_size = 64\n",
    )
    .unwrap();
    path
}

#[test]
fn synthetic_prepare_writes_cache_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("prep");
    let out = run(&[
        "prepare-data",
        "--synthetic",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(out_dir.join("dataset.cache").exists());
    assert!(out_dir.join("effective_config.txt").exists());
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("source = synthetic"), "{manifest}");
    assert!(manifest.contains("train_day_range = 21..28 (8 days)"), "{manifest}");
}

#[test]
fn missing_input_path_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "prepare-data",
        "--input",
        "/nonexistent/log.tsv",
        "--format",
        "internal_tsv",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/log.tsv"));
}

#[test]
fn unknown_format_tag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    std::fs::write(&log, "1\t2\t3\texposure\t86401\n").unwrap();
    let out = run(&[
        "prepare-data",
        "--input",
        log.to_str().unwrap(),
        "--format",
        "parquet",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "not_a_key = 1\n").unwrap();
    let out = run(&[
        "prepare-data",
        "--synthetic",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_code(&out, 1);
}

// The documented 30-day layout: a synthetic internal_tsv log whose first 20
// days only feed histograms and whose last 10 days carry impressions.
fn thirty_day_log(path: &Path) {
    let mut content = String::new();
    for user in 0..40u64 {
        for day in 1..=30i64 {
            for slot in 0..3u64 {
                let ts = day * 86_400 + (user * 97 + slot * 31) as i64 % 86_400;
                let item = user * 50 + slot;
                let cat = (user + slot) % 7;
                content.push_str(&format!("{user}\t{item}\t{cat}\texposure\t{ts}\n"));
                if (user + slot + day as u64) % 3 == 0 {
                    content.push_str(&format!("{user}\t{item}\t{cat}\tclick\t{ts}\n"));
                    if (user + slot + day as u64) % 6 == 0 {
                        content.push_str(&format!("{user}\t{item}\t{cat}\tinteraction\t{ts}\n"));
                    }
                }
            }
        }
    }
    std::fs::write(path, content).unwrap();
}

#[test]
fn kuairand_layout_manifest_shows_20_8_1_1() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    thirty_day_log(&log);
    let cfg = dir.path().join("cfg");
    std::fs::write(&cfg, "feature_dim = 8\n").unwrap();
    let out_dir = dir.path().join("prep");
    let out = run(&[
        "prepare-data",
        "--input",
        log.to_str().unwrap(),
        "--format",
        "internal_tsv",
        "--window-days",
        "20",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("feature_window_days = 1..20"), "{manifest}");
    assert!(manifest.contains("train_day_range = 21..28 (8 days)"), "{manifest}");
    assert!(manifest.contains("validation_day_range = 29..29 (1 days)"), "{manifest}");
    assert!(manifest.contains("test_day_range = 30..30 (1 days)"), "{manifest}");
}

fn prepare_tiny(dir: &Path, seed: &str) -> (PathBuf, PathBuf) {
    let cfg = write_tiny_config(dir);
    let prep = dir.join(format!("prep_{seed}"));
    let out = run(&[
        "prepare-data",
        "--synthetic",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        prep.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    (cfg, prep)
}

#[test]
fn train_smoke_writes_history_rows_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, prep) = prepare_tiny(dir.path(), "3");
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        prep.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(run_dir.join("checkpoint.ckpt").exists());
    let history = std::fs::read_to_string(run_dir.join("history.txt")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 3, "2 epochs plus the final line: {history}");
    assert!(lines[0].starts_with("epoch=1 "));
    assert!(lines[2].starts_with("epoch=final "));
}

#[test]
fn repeated_seed_gives_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, prep_a) = prepare_tiny(dir.path(), "9");
    let prep_b = dir.path().join("prep_b");
    let out = run(&[
        "prepare-data",
        "--synthetic",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        prep_b.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let cache_a = std::fs::read(prep_a.join("dataset.cache")).unwrap();
    let cache_b = std::fs::read(prep_b.join("dataset.cache")).unwrap();
    assert_eq!(cache_a, cache_b, "caches differ across identical prepare runs");

    for (out_name, seed) in [("run_a", "9"), ("run_b", "9")] {
        let out = run(&[
            "train",
            "--data",
            prep_a.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            dir.path().join(out_name).to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    }
    let hist_a = std::fs::read(dir.path().join("run_a/history.txt")).unwrap();
    let hist_b = std::fs::read(dir.path().join("run_b/history.txt")).unwrap();
    assert_eq!(hist_a, hist_b, "histories differ across identical train runs");
    let ck_a = std::fs::read(dir.path().join("run_a/checkpoint.ckpt")).unwrap();
    let ck_b = std::fs::read(dir.path().join("run_b/checkpoint.ckpt")).unwrap();
    assert_eq!(ck_a, ck_b, "checkpoints differ across identical train runs");
}

#[test]
fn evaluate_matches_history_final_validation_gauc() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, prep) = prepare_tiny(dir.path(), "5");
    let run_dir = dir.path().join("run");
    assert_code(
        &run(&[
            "train",
            "--data",
            prep.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            run_dir.to_str().unwrap(),
        ]),
        0,
    );
    let reports = dir.path().join("reports");
    assert_code(
        &run(&[
            "evaluate",
            "--data",
            prep.to_str().unwrap(),
            "--checkpoint",
            run_dir.join("checkpoint.ckpt").to_str().unwrap(),
            "--report-dir",
            reports.to_str().unwrap(),
        ]),
        0,
    );

    let history = std::fs::read_to_string(run_dir.join("history.txt")).unwrap();
    let final_line = history.lines().last().unwrap();
    let hist_gauc = final_line
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("gauc_ctr="))
        .unwrap()
        .to_string();
    let metrics = std::fs::read_to_string(reports.join("metrics.txt")).unwrap();
    let eval_gauc = metrics
        .lines()
        .find_map(|l| l.strip_prefix("gauc_ctr_validation="))
        .unwrap()
        .to_string();
    // Values are printed with shortest-round-trip formatting, so equal
    // strings mean bit-equal numbers.
    assert_eq!(hist_gauc, eval_gauc);

    assert!(reports.join("gauc_validation.txt").exists());
    assert!(reports.join("gauc_test.txt").exists());
    assert!(reports.join("lifecycle_slices.txt").exists());
    assert!(reports.join("cluster_activation.txt").exists());
}

#[test]
fn unwritable_report_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, prep) = prepare_tiny(dir.path(), "7");
    let run_dir = dir.path().join("run");
    assert_code(
        &run(&[
            "train",
            "--data",
            prep.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            run_dir.to_str().unwrap(),
        ]),
        0,
    );
    // A path under a regular file can never be created.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "file, not a dir").unwrap();
    let out = run(&[
        "evaluate",
        "--data",
        prep.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.ckpt").to_str().unwrap(),
        "--report-dir",
        blocker.join("reports").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn evaluate_rejects_mismatched_checkpoint_naming_component() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, prep) = prepare_tiny(dir.path(), "11");
    let run_dir = dir.path().join("run");
    assert_code(
        &run(&[
            "train",
            "--data",
            prep.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            run_dir.to_str().unwrap(),
        ]),
        0,
    );
    // Prepare a second dataset with a different feature width.
    let cfg16 = dir.path().join("wide.cfg");
    std::fs::write(
        &cfg16,
        "users = 60\ncategories = 10\ncategories_per_user = 4\nfeature_dim = 16\n",
    )
    .unwrap();
    let prep16 = dir.path().join("prep16");
    assert_code(
        &run(&[
            "prepare-data",
            "--synthetic",
            "--config",
            cfg16.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            prep16.to_str().unwrap(),
        ]),
        0,
    );
    let out = run(&[
        "evaluate",
        "--data",
        prep16.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.ckpt").to_str().unwrap(),
        "--report-dir",
        dir.path().join("rep").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("shared feature width"));
}

fn gradcheck_config(dir: &Path) -> PathBuf {
    // Small dims keep the finite-difference loop quick.
    let path = dir.join("grad.cfg");
    std::fs::write(
        &path,
        "histogram_len = 10\nenc_dim = 8\ncode_dim = 4\nvq_hidden = 8\nvq_clusters = 4\n\
         recal_hidden = 8\nexpert_count = 2\nexpert_widths = 8,4\ntower_hidden = 4\n",
    )
    .unwrap();
    path
}

#[test]
fn gradcheck_passes_with_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gradcheck_config(dir.path());
    let out = run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--samples", "4"]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient check passed"));
}

#[test]
fn gradcheck_with_zero_tolerance_fails_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gradcheck_config(dir.path());
    let out = run(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--samples",
        "2",
        "--tolerance",
        "0",
    ]);
    assert_code(&out, 3);
}

#[test]
fn gradcheck_freeze_reports_excluded_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gradcheck_config(dir.path());
    let out = run(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--samples",
        "2",
        "--freeze",
        "ilfm",
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("recal") && stdout.contains("frozen"), "{stdout}");
}
