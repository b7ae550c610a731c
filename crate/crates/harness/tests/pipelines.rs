//! Pipeline-level contracts on a tiny benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use upcycle_core::lora::RankScale;
use upcycle_core::store::encode;
use upcycle_core::{MergeConfig, MergeMethod};
use upcycle_harness::config::{ExperimentConfig, Mode};
use upcycle_harness::{Runner, Variant};
use upcycle_train::synthetic::Split;

mod common;
use common::tiny;

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect()
        })
        .collect()
}

#[test]
fn zero_duration_merges_equal_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.durations = vec![0];
    let runner = Runner::new(cfg, 1, false).unwrap();
    let sweep = runner.run_duration_sweep().unwrap();
    for &seed in &runner.cfg.seeds {
        let ctx = runner.context(seed).unwrap();
        let base = ctx.mean_accuracy(&ctx.base, Split::Test).unwrap();
        let cell = sweep.cell(seed, 0).unwrap();
        assert_eq!(cell.merges.len(), 4);
        for m in &cell.merges {
            assert_eq!(m.test_acc, base, "{}", m.method);
        }
    }
}

#[test]
fn single_task_ta_alpha_one_equals_expert() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.tasks.truncate(1);
    cfg.moe.top_k = 1;
    cfg.methods = vec![MergeMethod::TaskArithmetic];
    cfg.merge_grid = vec![MergeConfig::task_arithmetic(1.0)];
    let runner = Runner::new(cfg, 1, false).unwrap();
    let sweep = runner.run_duration_sweep().unwrap();
    for (_, d, cell) in &sweep.cells {
        let ta = cell.merge(MergeMethod::TaskArithmetic).unwrap();
        assert_eq!(ta.test_acc, cell.experts[0].test_acc, "duration {d}");
    }
}

#[test]
fn merge_report_row_count_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let runner = Runner::new(cfg.clone(), 2, false).unwrap();
    runner.run_duration_sweep().unwrap();
    let rows = csv_rows(&dir.path().join("merge_report.csv"));
    assert_eq!(rows.len(), cfg.seeds.len() * cfg.durations.len() * cfg.methods.len());
    assert!(rows[0].contains_key("test_acc_task0"));
    let experts = csv_rows(&dir.path().join("experts.csv"));
    assert_eq!(experts.len(), cfg.seeds.len() * cfg.durations.len() * cfg.tasks.len());
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn resumed_runs_write_identical_tables() {
    let fresh = tempfile::tempdir().unwrap();
    let resumed = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let runner = Runner::new(tiny(out), 1, false).unwrap();
        runner.run_early_stop().unwrap();
        runner.run_difficulty_analysis().unwrap();
    };
    run(fresh.path());
    run(resumed.path());

    // forget half of the finished cells, as if the run had been killed
    let manifest_path = resumed.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    let done: Vec<serde_json::Value> = manifest["completed"].as_array().unwrap().clone();
    assert!(done.len() > 10);
    let kept: Vec<serde_json::Value> = done.iter().step_by(2).cloned().collect();
    manifest["completed"] = serde_json::Value::Array(kept);
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    for f in csv_bytes(resumed.path()).keys() {
        fs::remove_file(resumed.path().join(f)).unwrap();
    }
    run(resumed.path());
    assert_eq!(csv_bytes(fresh.path()), csv_bytes(resumed.path()));

    // a run over a complete cache computes nothing and changes nothing
    let before = fs::read(&manifest_path).unwrap();
    let runner = Runner::new(tiny(resumed.path()), 1, true).unwrap();
    runner.run_early_stop().unwrap();
    runner.run_difficulty_analysis().unwrap();
    assert_eq!(fs::read(&manifest_path).unwrap(), before);
    assert_eq!(csv_bytes(fresh.path()), csv_bytes(resumed.path()));
}

#[test]
fn changed_config_discards_cache() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path()), 1, false).unwrap();
    runner.run_duration_sweep().unwrap();
    assert!(!runner.store.completed().is_empty());
    let mut cfg = tiny(dir.path());
    cfg.durations = vec![0, 8];
    let runner = Runner::new(cfg, 1, false).unwrap();
    assert!(runner.store.completed().is_empty());
    // read-only reports refuse to compute
    let ro = Runner::new(tiny(dir.path()), 1, true);
    assert!(ro.unwrap().run_duration_sweep().is_err());
}

#[test]
fn difficulty_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let runner = Runner::new(cfg.clone(), 1, false).unwrap();
    let a = runner.run_difficulty_analysis().unwrap();

    for (_, rows) in &a.loss_shares {
        let steps: Vec<usize> = rows.iter().filter(|r| r.task == "task0").map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 8, 24]);
        for r in rows {
            let total: f64 = r.shares.iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }
    for (_, _, cell) in &a.sweep.cells {
        for m in &cell.merges {
            assert_eq!(m.forgotten.by_bin.iter().sum::<usize>(), m.forgotten.total);
        }
    }
    let forgotten = csv_rows(&dir.path().join("forgotten.csv"));
    assert!(forgotten.iter().all(|r| r["bin"] != "0"));

    // percentile 100 prunes nothing and reproduces the unpruned experts
    for (seed, steps, pct, removed, cell) in &a.pruned {
        let plain = a.sweep.cell(*seed, *steps).unwrap();
        if *pct == 100.0 {
            assert_eq!(*removed, 0);
            assert_eq!(cell, plain);
        } else {
            assert_eq!(*removed, 2 * 20);
        }
    }
    let ctx = runner.context(0).unwrap();
    let sweep = runner.main_sweep();
    let longest = cfg.max_duration();
    let (plain, _) = runner.train_experts(&ctx, &sweep, &Variant::Fixed(longest)).unwrap();
    let (noop, _) = runner
        .train_experts(
            &ctx,
            &sweep,
            &Variant::Pruned {
                steps: longest,
                max_percentile: 100.0,
            },
        )
        .unwrap();
    for (p, q) in plain.iter().zip(&noop) {
        assert_eq!(encode(&(&p.checkpoint).into()), encode(&(&q.checkpoint).into()));
    }
    assert_eq!(csv_rows(&dir.path().join("scores.csv")).len(), 2 * 2 * 200);
}

#[test]
fn noisy_examples_score_higher_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        seeds: vec![0, 1, 2],
        ..ExperimentConfig::default()
    };
    cfg.difficulty.n_seeds = 3;
    let runner = Runner::new(cfg, 1, false).unwrap();
    for seed in 0..3 {
        let sc = runner.scores(seed).unwrap();
        let mean = |noisy: bool| {
            let v: Vec<f64> = sc.entries.iter().filter(|e| e.is_noisy == noisy).map(|e| e.el2n).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false), "seed {seed}: {} vs {}", mean(true), mean(false));
    }
}

#[test]
fn early_stop_tables_have_the_comparison_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let runner = Runner::new(cfg.clone(), 1, false).unwrap();
    let r = runner.run_early_stop().unwrap();
    for m in &cfg.methods {
        let labels: Vec<&str> = r
            .rows
            .iter()
            .filter(|row| row.method == m.as_str())
            .map(|row| row.label.as_str())
            .collect();
        assert_eq!(labels, vec!["FFT 24 steps", "FFT best", "FFT early stop"]);
    }
    let stops = csv_rows(&dir.path().join("stop_steps.csv"));
    assert_eq!(stops.len(), cfg.seeds.len() * cfg.tasks.len());
    for s in &stops {
        let step: usize = s["stop_step"].parse().unwrap();
        assert!(step >= cfg.early_stop.controller.warmup_steps && step <= 40);
    }
    let summary = csv_rows(&dir.path().join("early_stop_summary.csv"));
    assert_eq!(summary.len(), 3 * cfg.methods.len());
}

#[test]
fn lora_rank_sweep_dedups_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.mode = Mode::Lora;
    cfg.durations = vec![0, 8];
    cfg.seeds = vec![0];
    // rank 16 is the full width of the hidden layers
    let full = RankScale { rank: 16, scale: 16.0 };
    let small = RankScale { rank: 2, scale: 4.0 };
    cfg.lora_pairs = vec![small, full, small];
    let runner = Runner::new(cfg.clone(), 1, false).unwrap();
    let out = runner.run_rank_sweep().unwrap();
    assert_eq!(out.len(), 2);
    let rows = csv_rows(&dir.path().join("rank_sweep.csv"));
    assert_eq!(rows.len(), 2 * cfg.durations.len() * cfg.methods.len() * cfg.seeds.len());
    assert!(rows.iter().any(|r| r["rank"] == "16"));

    let mut fft = tiny(dir.path());
    fft.output_dir = dir.path().join("fft");
    assert!(Runner::new(fft, 1, false).unwrap().run_rank_sweep().is_err());
}

#[test]
fn moe_sweep_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.mode = Mode::Lora;
    cfg.seeds = vec![0];
    cfg.durations = vec![0, 8];
    let runner = Runner::new(cfg.clone(), 1, false).unwrap();
    let rows = runner.run_moe_sweep().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|(_, _, r)| r.base_frozen));
    assert!(rows.iter().all(|(_, _, r)| r.init.starts_with("arrow")));

    // zero-init experts without post-training leave the base unchanged
    let mut still = cfg.clone();
    still.moe.post_train_steps = 0;
    still.output_dir = dir.path().join("still");
    let runner = Runner::new(still, 1, false).unwrap();
    let row = runner.moe_cell(0, &Variant::Fixed(0)).unwrap();
    let ctx = runner.context(0).unwrap();
    assert_eq!(row.test_acc, ctx.mean_accuracy(&ctx.base, Split::Test).unwrap());
    assert_eq!(row.acc_before, row.test_acc);
}

#[test]
fn single_expert_moe_matches_its_lora_expert() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.mode = Mode::Lora;
    cfg.tasks.truncate(1);
    cfg.seeds = vec![0];
    cfg.moe.post_train_steps = 0;
    // top_k equals the number of experts, which is one
    cfg.moe.top_k = cfg.tasks.len();
    let runner = Runner::new(cfg, 1, false).unwrap();
    let row = runner.moe_cell(0, &Variant::Fixed(24)).unwrap();
    let (cell, _) = runner.sweep_cell(0, &runner.main_sweep(), &Variant::Fixed(24)).unwrap();
    assert_eq!(row.test_acc, cell.experts[0].test_acc);
}
