//! The `doseloop` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use doseloop_core::agreement::{reliability_gate, RatingsMatrix};
use doseloop_core::dataset::{
    generate_synthetic, load_csv_auto, temporal_split, write_csv, Dataset, SyntheticTruth,
};
use doseloop_core::feedback::{
    evaluate, list_snapshots, load_snapshot, run_oracle_loop, write_snapshot, AdviceBatch,
    IterationStatus, LoopState, OracleExpert,
};
use doseloop_core::rules::{analytic_report, apply_edit, sample_box, validate, RuleEdit, RuleSet};
use doseloop_core::scenarios::{self, DOSE};
use serde_json::{json, Value};

use crate::api::{router, AppState, ServerOptions};
use crate::config::ServiceConfig;
use crate::models::{train, ModelChoice, TrainOptions, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "doseloop", version, about = "Rule learning for dosing with experts in the loop")]
pub struct Cli {
    /// Seed for every random step; overrides the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test CSVs (and the planted truth when known).
    GenerateData(GenerateArgs),
    /// Fit a model on a CSV and save it as JSON.
    Train(TrainArgs),
    /// MAE and RMSE of a saved model on a CSV.
    Evaluate(EvaluateArgs),
    #[command(subcommand)]
    Rules(RulesCommand),
    #[command(subcommand)]
    Agreement(AgreementCommand),
    #[command(subcommand, name = "loop")]
    Loop(LoopCommand),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    TwoLeaf,
    ThreeLeaf,
    Smooth,
    Misspecified,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "three-leaf")]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 300)]
    pub clusters: usize,
    #[arg(long, default_value_t = 30)]
    pub visits: usize,
    /// Starting Hb; adds an Hb column integrating the response.
    #[arg(long)]
    pub hb_start: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelChoice,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "regressor", default_values_t = vec![DOSE.to_string()])]
    pub regressors: Vec<String>,
    #[arg(long, default_value_t = 25)]
    pub n_trees: usize,
    #[arg(long, default_value = doseloop_core::dataset::TARGET_COLUMN)]
    pub target: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = doseloop_core::dataset::TARGET_COLUMN)]
    pub target: String,
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Rule set of a saved tree model.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a RuleEdit JSON to a rule set.
    Edit {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        /// CSV whose columns added conditions may use.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlap, gap and satisfiability report.
    Validate {
        #[arg(long)]
        rules: PathBuf,
        /// CSV giving the feature box for the sampled check.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum AgreementCommand {
    /// Krippendorff's alpha of a long CSV `unit_id,rater_id,value`.
    Compute {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = doseloop_core::agreement::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Expert {
    Oracle,
    Server,
}

#[derive(Debug, Subcommand)]
pub enum LoopCommand {
    /// Iterate the loop, writing a snapshot per version.
    Run(LoopArgs),
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    #[arg(long, value_enum)]
    pub expert: Expert,
    #[arg(long, default_value_t = 3)]
    pub iterations: usize,
    /// Snapshot directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory with train.csv and test.csv (and truth.json for the
    /// oracle); the oracle defaults to the misspecified-start scenario.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON array of advice batches, one per iteration (server expert).
    #[arg(long)]
    pub advice: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub clusters: usize,
    /// Visits the oracle reviews per iteration.
    #[arg(long, default_value_t = 300)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub oracle_noise: f64,
    #[arg(long, default_value_t = 3)]
    pub raters: usize,
    /// Fraction of the way oracle edits move thresholds.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides the configured bind address.
    #[arg(long)]
    pub bind: Option<String>,
}

fn emit(json_out: bool, value: &Value, human: impl FnOnce() -> String) {
    if json_out {
        println!("{}", serde_json::to_string_pretty(value).expect("values serialize"));
    } else {
        println!("{}", human());
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}

fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(d, f)?;
    Ok(())
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    let mut config = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.loop_config.seed = seed;
    }
    let seed = config.loop_config.seed;
    match cli.command {
        Command::GenerateData(a) => generate(&a, seed, cli.json),
        Command::Train(a) => train_cmd(&a, &config, seed, cli.json),
        Command::Evaluate(a) => evaluate_cmd(&a, cli.json),
        Command::Rules(c) => rules_cmd(c, seed, cli.json),
        Command::Agreement(AgreementCommand::Compute {
            ratings,
            replicates,
            level,
            threshold,
        }) => {
            let f = fs::File::open(&ratings).with_context(|| format!("opening {}", ratings.display()))?;
            let m = RatingsMatrix::read_csv(f)?;
            let g = reliability_gate(&m, threshold, replicates, level, seed)?;
            let mut v = serde_json::to_value(&g.result)?;
            v["pass"] = json!(g.pass);
            v["threshold"] = json!(threshold);
            emit(cli.json, &v, || {
                let (lo, hi) = g.result.ci.unwrap_or((f64::NAN, f64::NAN));
                format!(
                    "alpha {:.4} ({:.0}% CI {:.4} to {:.4}), {} units, {} raters: {}",
                    g.result.alpha,
                    level * 100.0,
                    lo,
                    hi,
                    g.result.n_units,
                    g.result.n_raters,
                    if g.pass { "pass" } else { "fail" }
                )
            });
            Ok(())
        }
        Command::Loop(LoopCommand::Run(a)) => loop_cmd(&a, &config, seed, cli.json),
        Command::Serve(a) => {
            if let Some(b) = a.bind {
                config.bind = b;
            }
            serve(config)
        }
    }
}

fn generate(a: &GenerateArgs, seed: u64, json_out: bool) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let split_70 = |d: &Dataset, visits: usize| {
        let start = d.min_date().expect("non-empty data");
        temporal_split(d, start + chrono::Duration::days((14 * visits as i64) * 7 / 10))
    };
    let (train, test, truth): (Dataset, Dataset, Option<SyntheticTruth>) = match a.scenario {
        Scenario::Smooth => {
            let d = scenarios::smooth_response(a.clusters, a.visits, seed);
            let s = split_70(&d, a.visits);
            (s.train, s.test, None)
        }
        Scenario::Misspecified => {
            let s = scenarios::misspecified_start(a.clusters, seed)?;
            (s.train, s.test, Some(s.truth))
        }
        Scenario::TwoLeaf | Scenario::ThreeLeaf => {
            let mut t = if a.scenario == Scenario::TwoLeaf {
                scenarios::two_leaf()
            } else {
                scenarios::three_leaf()
            };
            t.n_clusters = a.clusters;
            t.visits_per_cluster = a.visits;
            t.hb_start = a.hb_start;
            let (d, t) = generate_synthetic(&t, seed)?;
            let s = split_70(&d, a.visits);
            (s.train, s.test, Some(t))
        }
    };
    write_dataset(&train, &a.out.join("train.csv"))?;
    write_dataset(&test, &a.out.join("test.csv"))?;
    if let Some(t) = &truth {
        write_json(&a.out.join("truth.json"), t)?;
    }
    let v = json!({
        "out": a.out,
        "n_train": train.n_records(),
        "n_test": test.n_records(),
        "n_patients": train.n_patients(),
        "schema": train.schema(),
        "truth": truth.is_some(),
    });
    emit(json_out, &v, || {
        format!("wrote {} train and {} test visits to {}", train.n_records(), test.n_records(), a.out.display())
    });
    Ok(())
}

fn train_cmd(a: &TrainArgs, config: &ServiceConfig, seed: u64, json_out: bool) -> Result<()> {
    let d = load_csv_auto(&a.data, &a.target)?;
    let opts = TrainOptions {
        regressors: a.regressors.clone(),
        n_trees: a.n_trees,
        seed,
        tree: config.loop_config.tree.clone(),
    };
    let model = train(a.model, &d, &opts)?;
    write_json(&a.out, &model)?;
    let pred = model.predict(&d.labelled())?;
    let m = evaluate(&pred, &d.labelled().targets(), "train")?;
    let v = json!({"model": a.model, "out": a.out, "train": m});
    emit(json_out, &v, || format!("saved {:?} to {} (train MAE {:.4}, RMSE {:.4})", a.model, a.out.display(), m.mae, m.rmse));
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, json_out: bool) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let d = load_csv_auto(&a.data, &a.target)?.labelled();
    let pred = model.predict(&d)?;
    let m = evaluate(&pred, &d.targets(), &a.split)?;
    emit(json_out, &serde_json::to_value(&m)?, || {
        format!("{}: MAE {:.4}, RMSE {:.4} over {} visits", m.split, m.mae, m.rmse, m.n)
    });
    Ok(())
}

fn rules_cmd(c: RulesCommand, seed: u64, json_out: bool) -> Result<()> {
    match c {
        RulesCommand::Export { model, out } => {
            let rs = TrainedModel::load(&model)?.rules()?;
            if let Some(p) = &out {
                fs::write(p, rs.to_json() + "\n")?;
            }
            emit(json_out, &serde_json::to_value(&rs)?, || {
                rs.rules.iter().map(|r| format!("#{} {}", r.id, r.text(&rs.regressors))).collect::<Vec<_>>().join("\n")
            });
        }
        RulesCommand::Edit { rules, edit, data, out } => {
            let rs: RuleSet = read_json(&rules)?;
            let edit: RuleEdit = read_json(&edit)?;
            let known = match data {
                Some(p) => load_csv_auto(&p, doseloop_core::dataset::TARGET_COLUMN)?.schema().to_vec(),
                None => {
                    let mut f = rs.features();
                    f.extend(rs.regressors.iter().cloned());
                    f
                }
            };
            let outcome = apply_edit(&rs, &edit, &known)?;
            if let Some(p) = &out {
                fs::write(p, outcome.rules.to_json() + "\n")?;
            }
            let edited = outcome.rules.get(edit.rule_id).expect("edited rule exists");
            let v = json!({"rules": outcome.rules, "report": outcome.report, "text": edited.text(&outcome.rules.regressors)});
            emit(json_out, &v, || format!("#{} {}", edited.id, edited.text(&outcome.rules.regressors)));
        }
        RulesCommand::Validate { rules, data, samples } => {
            let rs: RuleSet = read_json(&rules)?;
            let report = match data {
                Some(p) => {
                    let d = load_csv_auto(&p, doseloop_core::dataset::TARGET_COLUMN)?;
                    let features = rs.features();
                    let ranges: Vec<_> = d.feature_ranges().into_iter().filter(|r| features.contains(&r.name)).collect();
                    let names: Vec<String> = ranges.iter().map(|r| r.name.clone()).collect();
                    validate(&rs, &names, &sample_box(&ranges, samples, seed))?
                }
                None => analytic_report(&rs),
            };
            emit(json_out, &serde_json::to_value(&report)?, || {
                format!(
                    "{} overlaps, {} gaps, {} unsatisfiable ({} points checked)",
                    report.overlaps.len(),
                    report.gaps.len(),
                    report.unsatisfiable.len(),
                    report.n_checked
                )
            });
        }
    }
    Ok(())
}

fn load_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    let target = doseloop_core::dataset::TARGET_COLUMN;
    Ok((load_csv_auto(dir.join("train.csv"), target)?, load_csv_auto(dir.join("test.csv"), target)?))
}

fn history_summary(state: &LoopState) -> Value {
    let maes: Vec<f64> = state.history.iter().map(|h| h.test.mae).collect();
    let decreasing = maes.windows(2).all(|w| w[1] < w[0]);
    let reduction = match (maes.first(), maes.last()) {
        (Some(a), Some(b)) if *a > 0.0 => 1.0 - b / a,
        _ => 0.0,
    };
    json!({
        "model_version": state.version,
        "history": state.history,
        "test_mae": maes,
        "strictly_decreasing": decreasing,
        "reduction": reduction,
        "rejections": state.rejections,
    })
}

fn loop_cmd(a: &LoopArgs, config: &ServiceConfig, seed: u64, json_out: bool) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let state = match a.expert {
        Expert::Oracle => {
            let (train, test, truth) = match &a.data {
                Some(dir) => {
                    let (train, test) = load_split(dir)?;
                    (train, test, read_json::<SyntheticTruth>(&dir.join("truth.json"))?)
                }
                None => {
                    let s = scenarios::misspecified_start(a.clusters, seed)?;
                    write_dataset(&s.train, &a.out.join("train.csv"))?;
                    write_dataset(&s.test, &a.out.join("test.csv"))?;
                    (s.train, s.test, s.truth)
                }
            };
            let expert = OracleExpert {
                truth,
                noise_sd: a.oracle_noise,
                n_raters: a.raters,
                rho: a.rho,
                seed,
            };
            let state = LoopState::initialize(&train, &test, config.loop_config.clone())?;
            run_oracle_loop(state, &expert, &train, &test, a.iterations, a.batch, Some(&a.out))?
        }
        Expert::Server => {
            let dir = a.data.as_ref().context("--data is required with the server expert")?;
            let path = a.advice.as_ref().context("--advice is required with the server expert")?;
            let (train, test) = load_split(dir)?;
            let batches: Vec<AdviceBatch> = read_json(path)?;
            let mut state = LoopState::initialize(&train, &test, config.loop_config.clone())?;
            write_snapshot(&state, &a.out)?;
            for batch in batches.iter().take(a.iterations) {
                let (next, status) = state.iterate(batch, &train, &test)?;
                state = next;
                if status == IterationStatus::Accepted {
                    write_snapshot(&state, &a.out)?;
                }
            }
            state
        }
    };
    let v = history_summary(&state);
    emit(json_out, &v, || {
        state
            .history
            .iter()
            .map(|h| format!("v{}: test MAE {:.4}, RMSE {:.4}", h.version, h.test.mae, h.test.rmse))
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}

/// Latest stored state, or a fresh fit written as version 0.
pub fn startup_state(config: &ServiceConfig, train: &Dataset, test: &Dataset) -> Result<LoopState> {
    if let Some(root) = &config.snapshots {
        if root.exists() {
            if let Some(&v) = list_snapshots(root)?.last() {
                return Ok(load_snapshot(root, v)?);
            }
        }
    }
    let state = LoopState::initialize(train, test, config.loop_config.clone())?;
    if let Some(root) = &config.snapshots {
        write_snapshot(&state, root)?;
    }
    Ok(state)
}

fn serve(config: ServiceConfig) -> Result<()> {
    config.validate_for_serve()?;
    let target = &config.target;
    let train = load_csv_auto(config.train.as_ref().expect("validated"), target)?;
    let test = load_csv_auto(config.test.as_ref().expect("validated"), target)?;
    let state = startup_state(&config, &train, &test)?;
    if config.dose_grid.is_empty() {
        bail!("dose_grid must not be empty");
    }
    let app = AppState::new(
        state,
        train,
        test,
        ServerOptions {
            token: config.token.clone(),
            snapshots: config.snapshots.clone(),
            dose_grid: config.dose_grid.clone(),
        },
    )?;
    let addr = config.bind_addr()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(app))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
