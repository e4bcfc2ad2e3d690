use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;

use driftforge::cli::{ablate, ablation_path, checkpoint_path, eval, execute, prepare, run, Axis, Cli, ExperimentConfig};
use driftforge::data::read_manifests;
use driftforge::train::Strategy;

fn synthetic_toml(stages: usize, out: &Path) -> String {
    let popularity = [
        "[0.6, 0.0, 0.4]",
        "[0.1, 0.5, 0.4]",
        "[0.5, 0.2, 0.3]",
    ][..stages]
        .join(", ");
    format!(
        r#"
seed = 3
out_dir = "{out}"
strategies = ["scratch", "finetune", "sa-caisr"]

[data]
kind = "synthetic"

[data.scenario]
n_categories = 3
items_per_category = 6
stage_popularity = [{popularity}]
sessions_per_stage = 60
min_session_len = 3
max_session_len = 6
stage_seconds = 10000
seed = 0

[stages]
k_core = 2
max_seq_len = 5

[stages.mode]
kind = "fixed-window"
seconds = 10000

[model]
hidden_dim = 8
n_blocks = 1
n_heads = 2
max_seq_len = 5

[train]
batch_size = 32
learning_rate = 0.005
max_epochs = 3
"#,
        out = out.display()
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn load(dir: &Path, stages: usize) -> ExperimentConfig {
    let out = dir.join("out");
    ExperimentConfig::load(&write_config(dir, &synthetic_toml(stages, &out)))
        .unwrap()
        .with_overrides(None, None, None)
        .unwrap()
}

#[test]
fn two_stage_scenario_writes_two_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), 2);
    let stats = prepare(&cfg).unwrap();
    assert_eq!(stats.len(), 2);
    assert_eq!(read_manifests(&cfg.out_dir.join("stages")).unwrap().len(), 2);
    assert!(cfg.out_dir.join("config.toml").is_file());
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[data]
kind = "file"
path = "no/such/events.tsv"
format = "tsv"
"#;
    let err = ExperimentConfig::load(&write_config(dir.path(), text)).unwrap_err().to_string();
    assert!(err.contains("no/such/events.tsv"), "{err}");
}

#[test]
fn tsv_manifest_counts_sum_to_the_filtered_total() {
    let dir = tempfile::tempdir().unwrap();
    let mut tsv = String::from("user\titem\ttimestamp\n");
    let mut expected = 0;
    // three days; user `lone` has a single event per day and is filtered out
    for day in 0..3i64 {
        for u in 0..5 {
            let n = 2 + (u + day as usize) % 3;
            expected += n;
            for j in 0..n {
                tsv += &format!("u{u}\tit{}\t{}\n", (u + j) % 7, day * 86_400 + 100 * j as i64 + u as i64);
            }
        }
        tsv += &format!("lone\tit0\t{}\n", day * 86_400 + 50_000);
    }
    std::fs::write(dir.path().join("events.tsv"), tsv).unwrap();
    let text = format!(
        r#"
out_dir = "{}"

[data]
kind = "file"
path = "events.tsv"
format = "tsv"

[stages]
k_core = 2
max_seq_len = 50

[stages.mode]
kind = "fixed-window"
seconds = 86400
"#,
        dir.path().join("out").display()
    );
    let cfg = ExperimentConfig::load(&write_config(dir.path(), &text)).unwrap();
    let stats = prepare(&cfg).unwrap();
    assert_eq!(stats.len(), 3);
    let manifests = read_manifests(&cfg.out_dir.join("stages")).unwrap();
    let recount: usize = manifests.iter().flat_map(|m| m.sessions.iter().map(|s| s.items.len())).sum();
    assert_eq!(recount, expected);
    assert_eq!(manifests.iter().map(|m| m.stats.interactions).sum::<usize>(), expected);
}

#[test]
fn run_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), 3);
    prepare(&cfg).unwrap();
    let rows = run(&cfg).unwrap();
    // two tested stages, three strategies
    assert_eq!(rows.len(), 6);
    for stage in 0..2 {
        assert_eq!(rows.iter().filter(|r| r.report.stage == stage).count(), 3);
    }
    let out = &cfg.out_dir;
    let first = std::fs::read(out.join("metrics.csv")).unwrap();
    for s in [Strategy::Scratch, Strategy::Finetune, Strategy::SaCaisr] {
        for m in 0..3 {
            assert!(checkpoint_path(out, s, m).is_file());
        }
    }
    assert!(out.join("checkpoints/sa-caisr/stage_1.fisher").is_file());
    let resources = std::fs::read_to_string(out.join("resources.csv")).unwrap();
    assert_eq!(resources.lines().count(), 1 + 9);
    for line in std::fs::read_to_string(out.join("run.log")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["event"] == "epoch" || v["event"] == "stage");
    }

    run(&cfg).unwrap();
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), first);

    eval(&cfg).unwrap();
    assert_eq!(std::fs::read(out.join("eval.csv")).unwrap(), first);
}

#[test]
fn strategy_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), 2);
    let all = cfg.clone().with_overrides(None, None, Some("all")).unwrap();
    assert_eq!(all.strategies, Strategy::ALL.to_vec());
    let some = cfg.clone().with_overrides(None, Some(9), Some("ewc, scratch")).unwrap();
    assert_eq!(some.strategies, vec![Strategy::Ewc, Strategy::Scratch]);
    assert_eq!(some.train.seed, 9);
    assert!(cfg.with_overrides(None, None, Some("ader")).is_err());
}

#[test]
fn ablation_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), 2);
    prepare(&cfg).unwrap();
    let rows = ablate(&cfg, Axis::TopK, &[1.0, 4.0, 16.0]).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(ablation_path(&cfg.out_dir, Axis::TopK).is_file());

    let rows = ablate(&cfg, Axis::Components, &[]).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["fisher+infonce", "fisher", "infonce", "neither"]);
    let finetune = run(&ExperimentConfig {
        strategies: vec![Strategy::Finetune],
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(rows[3].report, finetune[0].report);

    assert!(ablate(&cfg, Axis::Fisher, &[1.0]).is_err());
    assert!(ablate(&cfg, Axis::TopK, &[0.5]).is_err());
}

#[test]
fn unknown_axis_is_rejected() {
    let parsed = Cli::try_parse_from(["driftforge", "ablate", "--config", "x.toml", "--axis", "dropout"]);
    assert!(parsed.is_err());
    let ok = Cli::try_parse_from(["driftforge", "ablate", "--config", "x.toml", "--axis", "top-k", "--values", "1,4"]);
    assert!(ok.is_ok());
}

#[test]
fn failed_run_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &synthetic_toml(2, &dir.path().join("out")));
    let cli = Cli::try_parse_from(["driftforge", "run", "--config", cfg_path.to_str().unwrap()]).unwrap();
    let err = execute(cli).unwrap_err();
    let marker = std::fs::read_to_string(dir.path().join("out/INCOMPLETE")).unwrap();
    assert_eq!(marker.trim(), err.to_string());
}

#[test]
fn binary_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_driftforge");
    let missing = Process::new(bin)
        .args(["prepare", "--config", dir.path().join("nope.toml").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));

    let cfg_path = write_config(dir.path(), &synthetic_toml(2, &dir.path().join("out")));
    let ok = Process::new(bin)
        .args(["prepare", "--config", cfg_path.to_str().unwrap(), "--seed", "4"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let table = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("stage"));
}
