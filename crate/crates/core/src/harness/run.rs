use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{mix, RunConfig, Seeds, TrainConfig};
use super::eval::{evaluate, write_predictions, Metrics};
use super::strategy::{select, Selection};
use crate::corpus::{oracle_annotate, BatchSampler, BudgetPlan, DomainSet, TestSplit};
use crate::error::{Error, Result};
use crate::lus::write_lines;
use crate::mefn::{save_model, ModelCard, ModelState, TrainBatch};
use crate::objectives::{LossBreakdown, LossWeights, MetricsLog};

pub const REPORT_VERSION: u32 = 1;

/// Loss values of one training phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    /// Every optimiser step.
    #[serde(skip)]
    pub steps: Vec<LossBreakdown>,
    /// Mean total loss of each epoch.
    pub epoch_totals: Vec<f64>,
}

/// Runs `epochs` passes of minibatch training over the sources plus any
/// labeled target samples, continuing from the current parameters.
pub fn train_phase(
    state: &mut ModelState,
    ds: &DomainSet,
    train: &TrainConfig,
    loss: &LossWeights,
    epochs: usize,
    seed: u64,
) -> Result<PhaseLog> {
    let mut log = PhaseLog::default();
    if epochs == 0 {
        return Ok(log);
    }
    if ds.sources().next().is_none() {
        return Err(Error::InvalidInput("training needs labeled source samples".into()));
    }
    let mut sampler = BatchSampler::new(ds, train.per_domain, seed)?;
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let batches = sampler.epoch();
        for (b, mb) in batches.iter().enumerate() {
            let batch = TrainBatch::from_minibatch(mb, train.similarity)?;
            let step = state.train_step(&batch, loss).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch} batch {b}")),
                other => other,
            })?;
            sum += step.total;
            log.steps.push(step);
        }
        log.epoch_totals.push(sum / batches.len().max(1) as f64);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub k: usize,
    pub selected: Vec<String>,
    pub n_tl: usize,
    pub n_tu: usize,
    pub metrics: Metrics,
    pub loss_curve: Vec<f64>,
}

/// The reproducible part of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub strategy: String,
    pub budget: usize,
    pub schedule: Vec<usize>,
    pub n_test: usize,
    pub initial: Option<Metrics>,
    pub initial_loss_curve: Vec<f64>,
    pub rounds: Vec<RoundReport>,
    pub final_metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Incomplete { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub status: RunStatus,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub environment: Environment,
    /// Seconds since the Unix epoch; absent in deterministic runs.
    pub created_unix: Option<u64>,
    pub metrics: ReportMetrics,
}

impl RunReport {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.final_metrics.map(|m| m.accuracy)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        let rows = self.metrics.rounds.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.round,
                r.k,
                r.n_tl,
                r.metrics.accuracy,
                r.metrics.f1_fake,
                r.metrics.f1_real,
                r.selected.join(";")
            )
        });
        write_lines(&dir.join("rounds.csv"), "round,k,n_tl,accuracy,f1_fake,f1_real,selected", rows)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Data and model prepared for a run: the corpus without its test split,
/// the split itself and freshly initialised parameters.
pub struct Prepared {
    pub ds: DomainSet,
    pub test: TestSplit,
    pub state: ModelState,
    pub seeds: Seeds,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let seeds = Seeds::derive(cfg);
    let mut ds = cfg.load_dataset()?;
    let test = ds.split_test(cfg.test_fraction, seeds.split)?;
    let state = fresh_model(cfg, &ds, seeds.init)?;
    Ok(Prepared { ds, test, state, seeds })
}

fn fresh_model(cfg: &RunConfig, ds: &DomainSet, seed: u64) -> Result<ModelState> {
    ModelState::new(
        cfg.model.clone(),
        ds.dims.text,
        ds.dims.visual,
        ds.target_domain() + 1,
        cfg.train.adam,
        seed,
    )
}

fn environment() -> Environment {
    Environment {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
    }
}

/// Initial training, the selection rounds and evaluation after each.
///
/// Configuration and data errors are returned as `Err`. A failure once the
/// loop has started yields a report marked incomplete that keeps every
/// finished round.
pub fn run_active_loop(cfg: &RunConfig) -> Result<RunReport> {
    let Prepared { mut ds, test, mut state, seeds } = prepare(cfg)?;
    let mut plan = BudgetPlan::from_pool(ds.n_tu(), cfg.budget.fraction, cfg.budget.rounds, cfg.lus.multiplier)?;
    let out = cfg.out_dir.clone();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let config_json = cfg.to_json();
    let mut report = RunReport {
        version: REPORT_VERSION,
        status: RunStatus::Complete,
        config: cfg.clone(),
        config_hash: crate::mefn::config_hash(&config_json),
        seeds,
        environment: environment(),
        created_unix: if cfg.deterministic {
            None
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .ok()
                .map(|d| d.as_secs())
        },
        metrics: ReportMetrics {
            strategy: cfg.strategy.name().to_string(),
            budget: plan.budget,
            schedule: plan.schedule(),
            n_test: test.records.len(),
            initial: None,
            initial_loss_curve: Vec::new(),
            rounds: Vec::new(),
            final_metrics: None,
        },
    };
    let mut metrics_log = match &out {
        Some(dir) => Some(MetricsLog::create(&dir.join("metrics.csv"))?),
        None => None,
    };

    let result = drive(cfg, &mut ds, &test, &mut state, &mut plan, &seeds, &mut report, metrics_log.as_mut(), out.as_deref());
    if let Err(e) = result {
        log::error!("run aborted: {e}");
        report.status = RunStatus::Incomplete { error: e.to_string() };
    }
    if let Some(log) = metrics_log.as_mut() {
        log.flush()?;
    }
    if let Some(dir) = &out {
        report.write(dir)?;
        if report.is_complete() {
            let card = ModelCard::describe(&state, seeds.init, &config_json);
            save_model(&state, &card, &dir.join("model.ckpt"))?;
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn drive(
    cfg: &RunConfig,
    ds: &mut DomainSet,
    test: &TestSplit,
    state: &mut ModelState,
    plan: &mut BudgetPlan,
    seeds: &Seeds,
    report: &mut RunReport,
    mut metrics_log: Option<&mut MetricsLog>,
    out: Option<&Path>,
) -> Result<()> {
    let mut step = 0u64;
    let mut log_phase = |phase: &PhaseLog, log: &mut Option<&mut MetricsLog>| -> Result<()> {
        if let Some(log) = log.as_deref_mut() {
            for l in &phase.steps {
                log.record(step, l)?;
                step += 1;
            }
        }
        Ok(())
    };

    let phase = train_phase(state, ds, &cfg.train, &cfg.loss, cfg.train.initial_epochs, seeds.sampler)?;
    log_phase(&phase, &mut metrics_log)?;
    let (initial, _) = evaluate(state, test)?;
    log::info!("initial target accuracy {:.4}", initial.accuracy);
    report.metrics.initial = Some(initial);
    report.metrics.final_metrics = Some(initial);
    report.metrics.initial_loss_curve = phase.epoch_totals;

    for round in 0..plan.rounds {
        let k = plan.k();
        let selection = select(state, ds, k, cfg, round, mix(seeds.selection, round as u64))?;
        if let Some(dir) = out {
            dump_selection(dir, round, &selection)?;
        }
        oracle_annotate(ds, &selection.ids, plan)?;
        if cfg.train.reinit_each_round {
            *state = fresh_model(cfg, ds, mix(seeds.init, round as u64 + 1))?;
        }
        let epochs = if cfg.train.reinit_each_round { cfg.train.initial_epochs } else { cfg.train.round_epochs };
        let phase = train_phase(state, ds, &cfg.train, &cfg.loss, epochs, mix(seeds.sampler, round as u64 + 1))?;
        log_phase(&phase, &mut metrics_log)?;
        let (metrics, preds) = evaluate(state, test)?;
        log::info!("round {} selected {} target accuracy {:.4}", round + 1, selection.ids.len(), metrics.accuracy);
        report.metrics.rounds.push(RoundReport {
            round: round + 1,
            k,
            selected: selection.ids,
            n_tl: ds.n_tl(),
            n_tu: ds.n_tu(),
            metrics,
            loss_curve: phase.epoch_totals,
        });
        report.metrics.final_metrics = Some(metrics);
        if let Some(dir) = out {
            write_predictions(&dir.join("predictions.csv"), &preds)?;
        }
    }
    if plan.rounds == 0 {
        if let Some(dir) = out {
            write_predictions(&dir.join("predictions.csv"), &evaluate(state, test)?.1)?;
        }
    }
    Ok(())
}

/// Per-round score tables: `ldm_round{r}.csv` and `diversity_round{r}.csv`.
pub fn dump_selection(dir: &Path, round: usize, sel: &Selection) -> Result<()> {
    if let Some(t) = &sel.ldm {
        t.write_csv(&ldm_path(dir, round + 1))?;
    }
    if let Some(d) = &sel.diversity {
        d.write_csv(&diversity_path(dir, round + 1), &sel.ids)?;
    }
    Ok(())
}

pub fn ldm_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("ldm_round{round}.csv"))
}

pub fn diversity_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("diversity_round{round}.csv"))
}
