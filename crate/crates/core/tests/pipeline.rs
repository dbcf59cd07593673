//! End-to-end runs through the library and the `adose` binary.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;

use adose::corpus::{Label, SynthSpec};
use adose::harness::{evaluate, prepare, run_active_loop, train_phase, DatasetSource, Metrics, RunConfig, RunReport, Strategy};
use adose::mefn::ModelConfig;

fn small_spec() -> SynthSpec {
    SynthSpec { source_samples: 60, target_samples: 100, ..SynthSpec::default() }
}

fn small_config(seed: u64, strategy: Strategy) -> RunConfig {
    let mut cfg = RunConfig { seed, strategy, dataset: DatasetSource::Synthetic(small_spec()), ..RunConfig::default() };
    cfg.model = ModelConfig { d: 8, encoder_hidden: 8, classifier_hidden: 6, discriminator_hidden: 6, ..ModelConfig::default() };
    cfg.train.initial_epochs = 3;
    cfg.train.round_epochs = 2;
    cfg
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn adose_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_adose")).args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_then_run_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("s.json");
    write_json(&spec_path, &small_spec());
    let data = dir.path().join("data");
    let out = adose_bin(&["synth", "--spec", spec_path.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut cfg = small_config(0, Strategy::Adose);
    cfg.dataset = DatasetSource::Manifest("data/manifest.json".into());
    let cfg_path = dir.path().join("c.json");
    write_json(&cfg_path, &cfg);
    let run_dir = dir.path().join("run");
    let out = adose_bin(&["run", "--config", cfg_path.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: RunReport = serde_json::from_slice(&out.stdout).unwrap();
    let stored = RunReport::read(&run_dir).unwrap();
    assert_eq!(printed, stored);
    assert!(stored.is_complete());
    assert_eq!(stored.metrics.rounds.len(), 5);
    for f in ["metrics.csv", "predictions.csv", "rounds.csv", "model.ckpt", "model.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    // the saved model evaluates to the reported final metrics
    let out = adose_bin(&[
        "evaluate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--model",
        run_dir.join("model.ckpt").to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Metrics = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(Some(m), stored.metrics.final_metrics);
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    write_json(&cfg_path, &small_config(0, Strategy::Adose));
    let out_dir = dir.path().join("run");
    let mut reports = Vec::new();
    for _ in 0..2 {
        let out = adose_bin(&[
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "7",
            "--deterministic",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        let read = |name: &str| std::fs::read(out_dir.join(name)).unwrap();
        reports.push((read("report.json"), read("metrics.csv"), read("predictions.csv")));
        std::fs::remove_dir_all(&out_dir).unwrap();
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn inspect_selection_agrees_with_the_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2, Strategy::Adose);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let report = run_active_loop(&cfg).unwrap();
    let out = adose_bin(&["inspect-selection", "--run", dir.path().to_str().unwrap(), "--limit", "0"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();

    let sections: Vec<&str> = text.split("round ").filter(|s| !s.is_empty()).collect();
    assert_eq!(sections.len(), report.metrics.rounds.len());
    for (r, section) in report.metrics.rounds.iter().zip(&sections) {
        let lines: Vec<Vec<&str>> = section.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
        let ldm_at = lines.iter().position(|l| l == &["id", "L_e"]).unwrap();
        let div_at = lines.iter().position(|l| l == &["id", "d_i", "chosen"]).unwrap();

        let mut ldm = csv_rows(&dir.path().join(format!("ldm_round{}.csv", r.round)));
        ldm.sort_by(|a, b| {
            let (x, y): (f64, f64) = (a[1].parse().unwrap(), b[1].parse().unwrap());
            x.total_cmp(&y).then_with(|| a[0].cmp(&b[0]))
        });
        let printed_ldm: Vec<Vec<String>> =
            lines[ldm_at + 1..div_at].iter().map(|l| l.iter().map(|s| s.to_string()).collect()).collect();
        assert_eq!(printed_ldm, ldm);

        let div = csv_rows(&dir.path().join(format!("diversity_round{}.csv", r.round)));
        let printed_div: Vec<Vec<String>> = lines[div_at + 1..].iter().map(|l| l.iter().map(|s| s.to_string()).collect()).collect();
        assert_eq!(printed_div, div);
        let chosen: HashSet<&str> = div.iter().filter(|row| row[2] == "1").map(|row| row[0].as_str()).collect();
        assert_eq!(chosen, r.selected.iter().map(String::as_str).collect());
        // every candidate is among the smallest least-disagreement scores
        let candidates = div.len();
        let cut: f64 = ldm[candidates - 1][1].parse().unwrap();
        for row in &div {
            let score: f64 = ldm.iter().find(|l| l[0] == row[0]).unwrap()[1].parse().unwrap();
            assert!(score <= cut);
        }
    }
}

#[test]
fn exit_codes() {
    assert_eq!(adose_bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(adose_bin(&["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(adose_bin(&["run", "--config", "/nonexistent/c.json"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("c.json");
    std::fs::write(&bad, r#"{"seeed": 1}"#).unwrap();
    assert_eq!(adose_bin(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn reported_metrics_match_the_dumped_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(5, Strategy::Entropy);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let report = run_active_loop(&cfg).unwrap();
    let rows = csv_rows(&dir.path().join("predictions.csv"));
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for row in &rows {
        match (row[1].as_str(), row[2].as_str()) {
            ("1", "1") => tp += 1,
            ("0", "1") => fp += 1,
            ("1", "0") => fn_ += 1,
            _ => tn += 1,
        }
        // P_fake above one half predicts fake
        let p: f64 = row[3].parse().unwrap();
        assert_eq!(row[2] == "1", p > 0.5);
    }
    let m = report.metrics.final_metrics.unwrap();
    assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
    let n = rows.len() as f64;
    assert!((m.accuracy - (tp + tn) as f64 / n).abs() < 1e-12);
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    assert!((m.f1_fake - 2.0 * precision * recall / (precision + recall)).abs() < 1e-12);
}

#[test]
fn strategies_spend_the_same_budget_on_disjoint_ids() {
    let mut schedules = Vec::new();
    for strategy in [Strategy::Adose, Strategy::Random, Strategy::Entropy, Strategy::LusOnly, Strategy::MdcOnly] {
        let cfg = small_config(1, strategy);
        let p = prepare(&cfg).unwrap();
        let pool: HashSet<String> = p.ds.unlabeled().iter().map(|r| r.id.clone()).collect();
        let test: HashSet<String> = p.test.records.iter().map(|r| r.id.clone()).collect();
        assert!(pool.is_disjoint(&test));

        let report = run_active_loop(&cfg).unwrap();
        let mut seen = HashSet::new();
        for r in &report.metrics.rounds {
            assert_eq!(r.selected.len(), r.k);
            assert_eq!(r.n_tl + r.n_tu, pool.len());
            for id in &r.selected {
                assert!(pool.contains(id), "{id} is not from the selection pool");
                assert!(seen.insert(id.clone()), "{id} selected twice");
            }
        }
        assert_eq!(seen.len(), report.metrics.budget);
        assert_eq!(report.metrics.budget, pool.len().div_ceil(10));
        schedules.push(report.metrics.rounds.iter().map(|r| r.k).collect::<Vec<_>>());
    }
    assert!(schedules.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn target_labels_stay_hidden_until_annotated() {
    let cfg = small_config(3, Strategy::Adose);
    let p = prepare(&cfg).unwrap();
    assert!(p.ds.unlabeled().iter().all(|r| r.label.is_none()));
    assert!(p.ds.labeled().is_empty());
    assert!(p.test.records.iter().all(|r| r.label.is_some()));
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let cfg = small_config(0, Strategy::Random);
    let mut p = prepare(&cfg).unwrap();
    let before = p.state.nets().clone();
    let log = train_phase(&mut p.state, &p.ds, &cfg.train, &cfg.loss, 0, 1).unwrap();
    assert!(log.epoch_totals.is_empty());
    assert_eq!(p.state.nets(), &before);
}

#[test]
fn fixed_seed_gives_the_same_loss_trajectory() {
    let cfg = small_config(0, Strategy::Random);
    let run = || {
        let mut p = prepare(&cfg).unwrap();
        train_phase(&mut p.state, &p.ds, &cfg.train, &cfg.loss, 2, 9).unwrap().steps
    };
    assert_eq!(run(), run());
}

#[test]
fn separable_sources_are_learned() {
    // only the text anomaly pattern, well separated from the topics
    let spec = SynthSpec {
        source_samples: 150,
        target_samples: 60,
        anomaly_strength: 4.0,
        noise: 0.3,
        pattern_mix: adose::corpus::synth::PatternMix { text_anomaly: 1.0, image_anomaly: 0.0, mismatch: 0.0 },
        ..SynthSpec::default()
    };
    let mut cfg = small_config(0, Strategy::Random);
    cfg.dataset = DatasetSource::Synthetic(spec);
    cfg.model = ModelConfig { d: 16, encoder_hidden: 16, classifier_hidden: 8, discriminator_hidden: 8, ..ModelConfig::default() };
    let mut p = prepare(&cfg).unwrap();
    train_phase(&mut p.state, &p.ds, &cfg.train, &cfg.loss, 30, 0).unwrap();
    let sources = adose::corpus::TestSplit { records: p.ds.sources().cloned().collect() };
    let (m, _) = evaluate(&p.state, &sources).unwrap();
    assert!(m.accuracy >= 0.95, "source accuracy {}", m.accuracy);
    assert!(sources.records.iter().any(|r| r.label == Some(Label::Fake)));
}
