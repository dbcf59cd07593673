//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{RunConfig, Strategy};
use super::eval::{evaluate, write_predictions, Metrics};
use super::run::{diversity_path, ldm_path, prepare, run_active_loop, train_phase, RunReport};
use crate::corpus::{synth_generate, SynthSpec};
use crate::error::{Error, Result};
use crate::mefn::{config_hash, load_model, save_model, ModelCard};

#[derive(Parser, Debug)]
#[command(name = "adose", version, about = "Active domain adaptation for two-view fake news detection")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<Strategy>,
    /// Omit wall-clock fields so reports compare byte for byte.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print the JSON report instead of the table.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus into --out.
    Synth {
        /// Generator parameters (JSON); defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Initial training on the sources only; saves the model.
    Train,
    /// Full active adaptation run.
    Run,
    /// Evaluate a saved model on the configured test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Print the per-round score tables of a finished run.
    InspectSelection {
        /// Run directory; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Rows per table, 0 for all.
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.strategy {
        cfg.strategy = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("this command needs --out".into()))
}

fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth { spec } => {
            let out = require_out(cli)?;
            let spec: SynthSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::json(p, e))?
                }
                None => SynthSpec::default(),
            };
            let ds = synth_generate(&spec, cli.seed.unwrap_or(0))?;
            let manifest = ds.save(out)?;
            println!("wrote {} ({} sources, {} target samples)", manifest.display(), ds.sources().count(), ds.n_tu());
            Ok(true)
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let mut p = prepare(&cfg)?;
            let log = train_phase(&mut p.state, &p.ds, &cfg.train, &cfg.loss, cfg.train.initial_epochs, p.seeds.sampler)?;
            let (metrics, preds) = evaluate(&p.state, &p.test)?;
            if let Some(out) = &cfg.out_dir {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let card = ModelCard::describe(&p.state, p.seeds.init, &cfg.to_json());
                save_model(&p.state, &card, &out.join("model.ckpt"))?;
                write_predictions(&out.join("predictions.csv"), &preds)?;
            }
            if cli.json {
                let v = serde_json::json!({ "metrics": metrics, "epoch_totals": log.epoch_totals });
                println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            } else {
                print_metrics_table(&[("trained", &metrics)]);
            }
            Ok(true)
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let report = run_active_loop(&cfg)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("json"));
            } else {
                print_report(&report);
            }
            Ok(report.is_complete())
        }
        Command::Evaluate { model } => {
            let cfg = load_config(cli)?;
            let p = prepare(&cfg)?;
            let (state, card) = load_model(model, cfg.train.adam)?;
            if card.config_hash != config_hash(&cfg.to_json()) {
                log::warn!("model was trained under a different configuration");
            }
            let (metrics, preds) = evaluate(&state, &p.test)?;
            if let Some(out) = &cfg.out_dir {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                write_predictions(&out.join("predictions.csv"), &preds)?;
            }
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&metrics).expect("json"));
            } else {
                print_metrics_table(&[("model", &metrics)]);
            }
            Ok(true)
        }
        Command::InspectSelection { run, limit } => {
            let dir = match run {
                Some(d) => d.as_path(),
                None => require_out(cli)?,
            };
            inspect_selection(dir, *limit)?;
            Ok(true)
        }
    }
}

fn print_metrics_table(rows: &[(&str, &Metrics)]) {
    println!("{:<10} {:>9} {:>9} {:>9} {:>5} {:>5} {:>5} {:>5}", "stage", "accuracy", "f1_fake", "f1_real", "tp", "fp", "fn", "tn");
    for (name, m) in rows {
        println!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>5} {:>5} {:>5} {:>5}",
            name, m.accuracy, m.f1_fake, m.f1_real, m.tp, m.fp, m.fn_, m.tn
        );
    }
}

fn print_report(report: &RunReport) {
    let m = &report.metrics;
    println!(
        "strategy {}  budget {} {:?}  test samples {}",
        m.strategy, m.budget, m.schedule, m.n_test
    );
    let mut rows: Vec<(String, Metrics)> = Vec::new();
    if let Some(init) = m.initial {
        rows.push(("initial".into(), init));
    }
    for r in &m.rounds {
        rows.push((format!("round {}", r.round), r.metrics));
    }
    let refs: Vec<(&str, &Metrics)> = rows.iter().map(|(n, m)| (n.as_str(), m)).collect();
    print_metrics_table(&refs);
    if let super::run::RunStatus::Incomplete { error } = &report.status {
        println!("INCOMPLETE: {error}");
    }
}

/// Reads a CSV dump as rows of fields, skipping the header.
fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

/// Prints, per round, the least-disagreement scores in ascending order and
/// the diversity scores of the candidates.
pub fn inspect_selection(dir: &Path, limit: usize) -> Result<()> {
    let report = RunReport::read(dir)?;
    let take = |n: usize| if limit == 0 { n } else { limit.min(n) };
    for r in &report.metrics.rounds {
        println!("round {} (k = {}): selected {}", r.round, r.k, r.selected.join(" "));
        let ldm = ldm_path(dir, r.round);
        if ldm.exists() {
            let mut rows = read_rows(&ldm)?;
            let score = |row: &Vec<String>| row[1].parse::<f64>().unwrap_or(f64::NAN);
            rows.sort_by(|a, b| score(a).total_cmp(&score(b)).then_with(|| a[0].cmp(&b[0])));
            println!("  {:<20} {:>10}", "id", "L_e");
            for row in rows.iter().take(take(rows.len())) {
                println!("  {:<20} {:>10}", row[0], row[1]);
            }
        }
        let div = diversity_path(dir, r.round);
        if div.exists() {
            let rows = read_rows(&div)?;
            println!("  {:<20} {:>10} {:>7}", "id", "d_i", "chosen");
            for row in rows.iter().take(take(rows.len())) {
                println!("  {:<20} {:>10} {:>7}", row[0], row[1], row[2]);
            }
        }
    }
    Ok(())
}
