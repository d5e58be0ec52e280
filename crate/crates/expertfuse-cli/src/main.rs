//! Command-line driver for the multi-site incremental learning pipeline.
//!
//! Every command takes `--config <json>` (scenario plus training settings;
//! the stock scenario when omitted), `--seed`, and `--out <dir>`, prints a
//! one-line machine-readable summary on success, and writes its artifacts
//! under the out directory.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data error,
//! 4 training divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use expertfuse::baselines::BaselineKind;
use expertfuse::data::{self, MultiSiteCorpus};
use expertfuse::error::Error;
use expertfuse::fusion::FusionMode;
use expertfuse::metrics::ConfidenceBaselinePredictor;
use expertfuse::multisite::{EvalScope, SiteVault};
use expertfuse::pipeline::{
    self, EvalSplitKind, PipelineConfig, RunArtifacts, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "expertfuse",
    about = "Multi-site class-incremental view classification with weighted expert fusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config (scenario + training settings). Stock scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Run directory for all artifacts.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-site corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base expert at the base site.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// One incremental step: remote fine-tune plus feature-bundle exports.
    Step {
        /// Step index (1-based). Defaults to the next untrained step.
        #[arg(long)]
        index: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a fusion model from the bundles of a step.
    TrainFusion {
        /// Fusion mode: sf | attn | nmd.
        #[arg(long)]
        mode: String,
        /// Bundle step to train from. Defaults to the latest.
        #[arg(long)]
        step: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a comparison baseline.
    Baseline {
        /// max-logit | msp | confidence-routing | combine-retrain.
        #[arg(long)]
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every available method and write the metrics table.
    Evaluate {
        /// internal | external.
        #[arg(long)]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Write attention and/or efficiency reports (both when no flag given).
    Report {
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        efficiency: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Full run: gen-data, train-base, every step, all fusion modes,
    /// baselines, evaluation, and reports.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Json(_) => 2,
        Error::Diverged(_) | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn load_run_config(common: &Common) -> Result<RunConfig, Error> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn load_corpus(common: &Common) -> Result<MultiSiteCorpus, Error> {
    let dir = common.out.join("corpus");
    if !dir.join("scenario.json").exists() {
        return Err(Error::MissingInput(format!(
            "{} has no corpus; run gen-data first",
            dir.display()
        )));
    }
    data::load_corpus(&dir)
}

fn pipeline_config(config: &RunConfig, common: &Common) -> PipelineConfig {
    config.pipeline_config(common.seed)
}

fn next_step(corpus: &MultiSiteCorpus, common: &Common) -> u32 {
    for s in 1..=corpus.num_steps() {
        let path = common
            .out
            .join("experts")
            .join(format!("expert_n{s}.json"));
        if !path.exists() {
            return s;
        }
    }
    corpus.num_steps()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => {
            let config = load_run_config(&common)?;
            let corpus = data::generate_scenario(&config.scenario, common.seed)?;
            let dir = common.out.join("corpus");
            data::save_corpus(&corpus, &dir)?;
            let checksum = data::corpus_checksum(&dir)?;
            let examples: usize = corpus.sites.iter().map(|s| s.examples.len()).sum();
            println!(
                "gen-data ok out={} sites={} examples={} checksum={:016x}",
                dir.display(),
                corpus.sites.len(),
                examples,
                checksum
            );
        }
        Command::TrainBase { common } => {
            let config = load_run_config(&common)?;
            let corpus = load_corpus(&common)?;
            let cfg = pipeline_config(&config, &common);
            let log = pipeline::stage_train_base(&corpus, &cfg, &common.out)?;
            println!(
                "train-base ok expert=b val_acc={:.4} epochs={} seconds={:.3}",
                log.best_val_acc,
                log.epoch_loss.len(),
                log.seconds
            );
        }
        Command::Step { index, common } => {
            let config = load_run_config(&common)?;
            let corpus = load_corpus(&common)?;
            let cfg = pipeline_config(&config, &common);
            let step = index.unwrap_or_else(|| next_step(&corpus, &common));
            let outcome = pipeline::stage_step(&corpus, &cfg, step, &common.out)?;
            println!(
                "step ok index={} expert={} val_acc={:.4} model_transfers={} bundles={}",
                step,
                outcome.expert_id,
                outcome.best_val_acc,
                outcome.model_transfers,
                outcome.bundle_transfers
            );
        }
        Command::TrainFusion { mode, step, common } => {
            let config = load_run_config(&common)?;
            let corpus = load_corpus(&common)?;
            let cfg = pipeline_config(&config, &common);
            let mode = FusionMode::parse(&mode)?;
            let log = pipeline::stage_train_fusion(&corpus, &cfg, mode, step, &common.out)?;
            println!(
                "train-fusion ok mode={} val_acc={:.4} seconds={:.3}",
                mode.name(),
                log.best_val_acc,
                log.seconds
            );
        }
        Command::Baseline { kind, common } => {
            let config = load_run_config(&common)?;
            let corpus = load_corpus(&common)?;
            let cfg = pipeline_config(&config, &common);
            let kind = BaselineKind::parse(&kind)?;
            match kind {
                BaselineKind::CombineRetrain => {
                    let oracles = pipeline::stage_oracle(&corpus, &cfg, &common.out)?;
                    let last = oracles.last().expect("at least one step");
                    println!(
                        "baseline ok kind=combine-retrain steps={} val_acc={:.4}",
                        oracles.len(),
                        last.log.best_val_acc
                    );
                }
                _ => {
                    let artifacts = RunArtifacts::load(&common.out, &corpus)?;
                    if artifacts.experts.is_empty() {
                        return Err(Error::MissingInput(
                            "no experts found; run train-base and the steps first".into(),
                        ));
                    }
                    let predictor = ConfidenceBaselinePredictor {
                        experts: artifacts.expert_refs(),
                        kind,
                    };
                    let mut accs = Vec::new();
                    let mut lines =
                        String::from("method,experts,transfer,dataset,acc,f1\n");
                    for site in corpus.internal_sites() {
                        let vault = SiteVault::new(site.clone());
                        let records = vault.evaluate(
                            EvalScope::Split(expertfuse::data::Split::Test),
                            &predictor,
                        )?;
                        let (acc, f1) = expertfuse::metrics::score_records(&records)?;
                        accs.push(acc);
                        lines.push_str(&format!(
                            "{},{},none,{},{:.4},{:.4}\n",
                            kind.name(),
                            artifacts.experts.len(),
                            site.site_id,
                            acc,
                            f1
                        ));
                    }
                    let avg = accs.iter().sum::<f64>() / accs.len() as f64;
                    let dir = common.out.join("reports");
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join(format!("baseline_{}.csv", kind.name())), lines)?;
                    println!(
                        "baseline ok kind={} internal_avg_acc={:.4}",
                        kind.name(),
                        avg
                    );
                }
            }
        }
        Command::Evaluate { split, common } => {
            let corpus = load_corpus(&common)?;
            let which = EvalSplitKind::parse(&split)?;
            let artifacts = RunArtifacts::load(&common.out, &corpus)?;
            if artifacts.experts.is_empty() {
                return Err(Error::MissingInput(
                    "no trained models found under the out directory".into(),
                ));
            }
            let (report, _) = pipeline::evaluate_methods(&corpus, &artifacts, which)?;
            let dir = common.out.join("reports");
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("metrics_{}.csv", which.name()));
            std::fs::write(&path, report.to_csv())?;
            let methods: std::collections::BTreeSet<&str> =
                report.rows.iter().map(|r| r.method.as_str()).collect();
            println!(
                "evaluate ok split={} methods={} rows={} csv={}",
                which.name(),
                methods.len(),
                report.rows.len(),
                path.display()
            );
        }
        Command::Report {
            attention,
            efficiency,
            common,
        } => {
            let corpus = load_corpus(&common)?;
            let artifacts = RunArtifacts::load(&common.out, &corpus)?;
            let both = !attention && !efficiency;
            let mut pieces = Vec::new();
            if attention || both {
                pipeline::write_attention_reports(&corpus, &artifacts, &common.out)?;
                pieces.push("attention");
            }
            if efficiency || both {
                let timings = pipeline::read_timings(&common.out)?;
                pipeline::write_efficiency_reports(&corpus, &artifacts, &timings, &common.out)?;
                pieces.push("efficiency");
            }
            println!(
                "report ok parts={} dir={}",
                pieces.join("+"),
                common.out.join("reports").display()
            );
        }
        Command::Pipeline { common } => {
            let config = load_run_config(&common)?;
            let corpus = data::generate_scenario(&config.scenario, common.seed)?;
            data::save_corpus(&corpus, &common.out.join("corpus"))?;
            let cfg = pipeline_config(&config, &common);
            let run = pipeline::run_incremental_pipeline(&corpus, &cfg, &common.out)?;
            let fmt = |m: &str| {
                run.internal
                    .average_acc(m)
                    .map(|a| format!("{a:.1}"))
                    .unwrap_or_else(|| "-".into())
            };
            println!(
                "pipeline ok out={} steps={} sf={} attn_wsf={} nmd_wsf={} oracle={}",
                common.out.display(),
                corpus.num_steps(),
                fmt("sf"),
                fmt("attn-wsf"),
                fmt("nmd-wsf"),
                fmt("combine-retrain")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
