//! End-to-end incremental runs and their stage commands.
//!
//! Stages communicate through a run directory, so they can execute as one
//! in-process pipeline or as separate CLI invocations:
//!
//! ```text
//! out/
//!   corpus/     registry.json scenario.json site_<id>.bin
//!   experts/    expert_<id>.efw|json
//!   naive/      constant.efw|json expand.efw|json
//!   oracle/     oracle_step<s>.efw|json
//!   bundles/    step<s>/site_<id>.efb
//!   fusion/     fusion_<mode>_step<s>.efw|json
//!   provenance/ fusion_<mode>_step<s>.json
//!   logs/       transfer_log.csv timings.csv
//!   reports/    metrics_*.csv attention_*.csv|svg efficiency_*.csv|svg
//! ```
//!
//! A step ships the current expert roster to the new site, fine-tunes a
//! clone of the base model there, distributes the new expert to the older
//! remote sites, and re-exports a feature bundle from every internal site
//! under the full roster (fusion training needs every expert's vectors for
//! every example). Fusion then retrains from scratch on this step's bundles.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{combine_retrain, BaselineKind, PooledModel};
use crate::data::{MultiSiteCorpus, ScenarioConfig, SiteDataset, Split};
use crate::error::{Error, Result};
use crate::expert::{finetune_naive, Expert, HeadMode, NaiveModel};
use crate::fusion::{FusionMode, FusionModel};
use crate::metrics::{
    score_records, ConfidenceBaselinePredictor, FusionPredictor, ImagePredictor, MetricsReport,
    MetricsRow, NaivePredictor, PooledPredictor, PredictionRecord, SingleExpertPredictor,
    TransferClass,
};
use crate::multisite::{
    BundleSplit, EvalScope, FeatureBundle, PayloadKind, SiteVault, TransferLog, TransferRecord,
};
use crate::nn::{TrainConfig, TrainLog};
use crate::report::{
    cumulative_csv, cumulative_training_curves, inference_csv, svg_bar_chart, svg_line_chart,
    AttentionReport, InferenceRow, TimingRow,
};
use crate::rng;

/// Everything a full run needs beyond the corpus itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub modes: Vec<FusionMode>,
    pub classifier_epochs: usize,
    pub fusion_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_aug: usize,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            modes: vec![FusionMode::Sf, FusionMode::AttnWsf, FusionMode::NmdWsf],
            classifier_epochs: 200,
            fusion_epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            n_aug: 5,
        }
    }

    fn classifier_cfg(&self, tag: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.classifier_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: rng::derive_seed(self.seed, tag),
        }
    }

    fn fusion_cfg(&self, tag: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.fusion_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: rng::derive_seed(self.seed, tag),
        }
    }
}

/// The JSON config file consumed by the CLI: a scenario plus run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    #[serde(default = "default_classifier_epochs")]
    pub classifier_epochs: usize,
    #[serde(default = "default_fusion_epochs")]
    pub fusion_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_n_aug")]
    pub n_aug: usize,
}

fn default_classifier_epochs() -> usize {
    200
}
fn default_fusion_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_n_aug() -> usize {
    5
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default_scenario(),
            classifier_epochs: default_classifier_epochs(),
            fusion_epochs: default_fusion_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            n_aug: default_n_aug(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        config.scenario.validate()?;
        Ok(config)
    }

    pub fn pipeline_config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            modes: vec![FusionMode::Sf, FusionMode::AttnWsf, FusionMode::NmdWsf],
            classifier_epochs: self.classifier_epochs,
            fusion_epochs: self.fusion_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            n_aug: self.n_aug,
        }
    }
}

// ── log plumbing shared by the stages ───────────────────────────────────

fn append_csv(path: &Path, header: &str, lines: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = if path.exists() {
        fs::read_to_string(path)?
    } else {
        header.to_string()
    };
    text.push_str(lines);
    fs::write(path, text)?;
    Ok(())
}

fn append_timings(out: &Path, rows: &[TimingRow]) -> Result<()> {
    let body: String = rows
        .iter()
        .map(|r| format!("{},{},{},{:.6}\n", r.method, r.step, r.stage, r.seconds))
        .collect();
    append_csv(
        &out.join("logs").join("timings.csv"),
        "method,step,stage,seconds\n",
        &body,
    )
}

fn append_transfers(out: &Path, records: &[TransferRecord]) -> Result<()> {
    let body: String = records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{:.6}\n",
                r.step,
                r.direction,
                r.kind.name(),
                r.bytes,
                r.seconds
            )
        })
        .collect();
    append_csv(
        &out.join("logs").join("transfer_log.csv"),
        "step,direction,kind,bytes,seconds\n",
        &body,
    )
}

pub fn read_timings(out: &Path) -> Result<Vec<TimingRow>> {
    let path = out.join("logs").join("timings.csv");
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "{} not found; run the training stages first",
            path.display()
        )));
    }
    crate::report::parse_timings_csv(&fs::read_to_string(path)?)
}

pub fn read_transfer_log(out: &Path) -> Result<TransferLog> {
    let path = out.join("logs").join("transfer_log.csv");
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "{} not found; run the step stages first",
            path.display()
        )));
    }
    TransferLog::parse_csv(&fs::read_to_string(path)?)
}

fn load_expert_roster(out: &Path, upto: u32) -> Result<Vec<Expert>> {
    let dir = out.join("experts");
    let mut experts = vec![Expert::load(&dir, "b").map_err(|_| {
        Error::MissingInput("base expert not found; run train-base first".into())
    })?];
    for s in 1..=upto {
        let id = format!("n{s}");
        experts.push(Expert::load(&dir, &id).map_err(|_| {
            Error::MissingInput(format!("expert {id} not found; run step {s} first"))
        })?);
    }
    Ok(experts)
}

// ── stages ──────────────────────────────────────────────────────────────

/// Train the base expert at the base site and persist it.
pub fn stage_train_base(
    corpus: &MultiSiteCorpus,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<TrainLog> {
    fs::create_dir_all(out)?;
    let vault = SiteVault::new(corpus.base_site().clone());
    let t0 = Instant::now();
    let blob = vault.train_base_expert(&cfg.classifier_cfg("train/base"))?;
    let seconds = t0.elapsed().as_secs_f64();
    let expert = Expert::from_blob(&blob)?;
    expert.save(&out.join("experts"))?;
    append_timings(
        out,
        &[TimingRow {
            method: "shared".into(),
            step: 0,
            stage: "train-base".into(),
            seconds,
        }],
    )?;
    Ok(expert.log)
}

/// Outcome of one incremental step.
pub struct StepOutcome {
    pub expert_id: String,
    pub best_val_acc: f64,
    pub model_transfers: usize,
    pub bundle_transfers: usize,
}

/// One incremental step: remote fine-tune plus bundle exports.
pub fn stage_step(
    corpus: &MultiSiteCorpus,
    cfg: &PipelineConfig,
    step: u32,
    out: &Path,
) -> Result<StepOutcome> {
    let site = corpus.incremental_site(step).ok_or_else(|| {
        Error::InvalidConfig(format!("scenario has no incremental step {step}"))
    })?;
    let internal: Vec<&SiteDataset> = corpus.internal_sites();
    let prior = load_expert_roster(out, step - 1)?;
    let mut roster_blobs: Vec<Vec<u8>> = prior
        .iter()
        .map(|e| e.to_blob())
        .collect::<Result<_>>()?;

    let mut transfers = Vec::new();
    let mut timings = Vec::new();

    // Ship the current roster to the new site.
    let t0 = Instant::now();
    let roster_bytes: u64 = roster_blobs.iter().map(|b| b.len() as u64).sum();
    transfers.push(TransferRecord {
        step,
        direction: format!("to:{}", site.site_id),
        kind: PayloadKind::Model,
        bytes: roster_bytes,
        seconds: t0.elapsed().as_secs_f64(),
    });

    // Fine-tune a clone of the base model inside the new site's vault.
    let vault = SiteVault::new(site.clone());
    let expert_id = format!("n{step}");
    let t0 = Instant::now();
    let blob = vault.remote_finetune(
        &expert_id,
        &roster_blobs[0],
        &cfg.classifier_cfg(&format!("finetune/{expert_id}")),
    )?;
    timings.push(TimingRow {
        method: "shared".into(),
        step,
        stage: "finetune".into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    transfers.push(TransferRecord {
        step,
        direction: format!("from:{}", site.site_id),
        kind: PayloadKind::Model,
        bytes: blob.len() as u64,
        seconds: 0.0,
    });
    let expert = Expert::from_blob(&blob)?;
    let best_val_acc = expert.log.best_val_acc;
    expert.save(&out.join("experts"))?;

    // Older remote sites receive the new expert for their re-exports.
    for old in internal.iter().take(step as usize).skip(1) {
        transfers.push(TransferRecord {
            step,
            direction: format!("to:{}", old.site_id),
            kind: PayloadKind::Model,
            bytes: blob.len() as u64,
            seconds: 0.0,
        });
    }
    roster_blobs.push(blob);

    // Fresh bundles from every internal site under the full roster.
    let bundle_seed = rng::derive_seed(cfg.seed, &format!("bundles/step{step}"));
    let t_all = Instant::now();
    let mut bundle_transfers = 0;
    for site_ds in internal.iter().take(step as usize + 1) {
        let v = SiteVault::new((*site_ds).clone());
        let t0 = Instant::now();
        let bundle = v.export_feature_bundle(&roster_blobs, cfg.n_aug, bundle_seed)?;
        let seconds = t0.elapsed().as_secs_f64();
        let bytes = bundle.to_bytes().len() as u64;
        let direction = if site_ds.site_id == internal[0].site_id {
            format!("local:{}", site_ds.site_id)
        } else {
            format!("from:{}", site_ds.site_id)
        };
        transfers.push(TransferRecord {
            step,
            direction,
            kind: PayloadKind::Bundle,
            bytes,
            seconds,
        });
        bundle_transfers += 1;
        bundle.write_to(
            &out.join("bundles")
                .join(format!("step{step}"))
                .join(format!("site_{}.efb", site_ds.site_id)),
        )?;
    }
    timings.push(TimingRow {
        method: "shared".into(),
        step,
        stage: "bundle-export".into(),
        seconds: t_all.elapsed().as_secs_f64(),
    });

    let model_transfers = transfers
        .iter()
        .filter(|r| r.kind == PayloadKind::Model)
        .count();
    append_transfers(out, &transfers)?;
    append_timings(out, &timings)?;
    Ok(StepOutcome {
        expert_id,
        best_val_acc,
        model_transfers,
        bundle_transfers,
    })
}

#[derive(Serialize)]
struct ProvenanceInput {
    path: String,
    fingerprint: String,
    rows: usize,
}

#[derive(Serialize)]
struct FusionProvenance {
    mode: String,
    step: u32,
    inputs: Vec<ProvenanceInput>,
    train_rows: usize,
    val_rows: usize,
}

/// Latest step with exported bundles.
pub fn latest_bundle_step(out: &Path) -> Result<u32> {
    let dir = out.join("bundles");
    let mut best = 0;
    if dir.exists() {
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(s) = name.strip_prefix("step").and_then(|s| s.parse::<u32>().ok()) {
                best = best.max(s);
            }
        }
    }
    if best == 0 {
        return Err(Error::MissingInput(
            "no bundles found; run at least one step first".into(),
        ));
    }
    Ok(best)
}

/// Train one fusion mode from the bundles of `step` (default: latest).
pub fn stage_train_fusion(
    corpus: &MultiSiteCorpus,
    cfg: &PipelineConfig,
    mode: FusionMode,
    step: Option<u32>,
    out: &Path,
) -> Result<TrainLog> {
    let step = match step {
        Some(s) => s,
        None => latest_bundle_step(out)?,
    };
    let experts = load_expert_roster(out, step)?;
    let expert_refs: Vec<&Expert> = experts.iter().collect();
    let bundle_dir = out.join("bundles").join(format!("step{step}"));
    let internal = corpus.internal_sites();
    let mut bundles = Vec::new();
    let mut inputs = Vec::new();
    for site in internal.iter().take(step as usize + 1) {
        let path = bundle_dir.join(format!("site_{}.efb", site.site_id));
        if !path.exists() {
            return Err(Error::MissingInput(format!(
                "bundle {} missing; re-run step {step}",
                path.display()
            )));
        }
        let bytes = fs::read(&path)?;
        let bundle = FeatureBundle::from_bytes(&bytes)?;
        inputs.push(ProvenanceInput {
            path: path
                .strip_prefix(out)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned(),
            fingerprint: format!("{:016x}", rng::fingerprint(&bytes)),
            rows: bundle.rows.len(),
        });
        bundles.push(bundle);
    }
    let train_rows: Vec<_> = bundles
        .iter()
        .flat_map(|b| b.fusion_rows(BundleSplit::Train))
        .collect();
    let val_rows: Vec<_> = bundles
        .iter()
        .flat_map(|b| b.fusion_rows(BundleSplit::Val))
        .collect();

    let t0 = Instant::now();
    let mut model = FusionModel::from_experts(
        mode,
        &expert_refs,
        rng::derive_seed(cfg.seed, &format!("fusion-init/{}/{step}", mode.name())),
    )?;
    let log = model.train(
        &train_rows,
        &val_rows,
        &cfg.fusion_cfg(&format!("fusion/{}/{step}", mode.name())),
    )?;
    append_timings(
        out,
        &[TimingRow {
            method: mode.name().into(),
            step,
            stage: "train-fusion".into(),
            seconds: t0.elapsed().as_secs_f64(),
        }],
    )?;
    let stem = format!("fusion_{}_step{step}", mode.name());
    model.save(&out.join("fusion"), &stem)?;
    let provenance = FusionProvenance {
        mode: mode.name().into(),
        step,
        inputs,
        train_rows: train_rows.len(),
        val_rows: val_rows.len(),
    };
    fs::create_dir_all(out.join("provenance"))?;
    fs::write(
        out.join("provenance").join(format!("{stem}.json")),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(log)
}

/// Advance the naive fine-tuning baselines through every step.
pub fn stage_naive(
    corpus: &MultiSiteCorpus,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<(NaiveModel, NaiveModel)> {
    let base = load_expert_roster(out, 0)?.remove(0);
    let mut constant = NaiveModel::from_expert(&base);
    let mut expand = NaiveModel::from_expert(&base);
    for s in 1..=corpus.num_steps() {
        let site = corpus.incremental_site(s).expect("contiguous steps");
        for (model, name, head) in [
            (&mut constant, "finetune-constant", HeadMode::Constant),
            (&mut expand, "finetune-expand", HeadMode::Expand),
        ] {
            let t0 = Instant::now();
            finetune_naive(
                model,
                site,
                head,
                &cfg.classifier_cfg(&format!("naive/{name}/{s}")),
            )?;
            append_timings(
                out,
                &[TimingRow {
                    method: name.into(),
                    step: s,
                    stage: "naive-finetune".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                }],
            )?;
        }
    }
    constant.save(&out.join("naive"), "constant")?;
    expand.save(&out.join("naive"), "expand")?;
    Ok((constant, expand))
}

/// Retrain the oracle from scratch at every step, recording each step's time.
pub fn stage_oracle(
    corpus: &MultiSiteCorpus,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<Vec<PooledModel>> {
    let internal = corpus.internal_sites();
    let mut oracles = Vec::new();
    for s in 1..=corpus.num_steps() {
        let sites: Vec<&SiteDataset> = internal.iter().take(s as usize + 1).copied().collect();
        let t0 = Instant::now();
        let oracle = combine_retrain(&sites, &cfg.classifier_cfg(&format!("oracle/{s}")))?;
        append_timings(
            out,
            &[TimingRow {
                method: "combine-retrain".into(),
                step: s,
                stage: "oracle-retrain".into(),
                seconds: t0.elapsed().as_secs_f64(),
            }],
        )?;
        oracle.save(&out.join("oracle"), &format!("oracle_step{s}"))?;
        oracles.push(oracle);
    }
    Ok(oracles)
}

// ── artifacts and evaluation ────────────────────────────────────────────

/// Models produced by a run, in memory.
pub struct RunArtifacts {
    pub experts: Vec<Expert>,
    pub naive_constant: Option<NaiveModel>,
    pub naive_expand: Option<NaiveModel>,
    /// Final-step oracle.
    pub oracle: Option<PooledModel>,
    /// Final-step fusion models.
    pub fusions: Vec<FusionModel>,
}

impl RunArtifacts {
    pub fn expert_refs(&self) -> Vec<&Expert> {
        self.experts.iter().collect()
    }

    /// Load whatever a previous run left under `dir`.
    pub fn load(dir: &Path, corpus: &MultiSiteCorpus) -> Result<Self> {
        let experts_dir = dir.join("experts");
        let mut experts = Vec::new();
        if experts_dir.join("expert_b.json").exists() {
            experts.push(Expert::load(&experts_dir, "b")?);
            for s in 1..=corpus.num_steps() {
                let id = format!("n{s}");
                if experts_dir.join(format!("expert_{id}.json")).exists() {
                    experts.push(Expert::load(&experts_dir, &id)?);
                } else {
                    break;
                }
            }
        }
        let naive_dir = dir.join("naive");
        let load_naive = |stem: &str| -> Result<Option<NaiveModel>> {
            if naive_dir.join(format!("{stem}.json")).exists() {
                Ok(Some(NaiveModel::load(&naive_dir, stem)?))
            } else {
                Ok(None)
            }
        };
        let oracle_dir = dir.join("oracle");
        let last_step = corpus.num_steps();
        let oracle_stem = format!("oracle_step{last_step}");
        let oracle = if oracle_dir.join(format!("{oracle_stem}.json")).exists() {
            Some(PooledModel::load(&oracle_dir, &oracle_stem)?)
        } else {
            None
        };
        let fusion_dir = dir.join("fusion");
        let mut fusions = Vec::new();
        for mode in [FusionMode::Sf, FusionMode::AttnWsf, FusionMode::NmdWsf] {
            let stem = format!("fusion_{}_step{last_step}", mode.name());
            if fusion_dir.join(format!("{stem}.json")).exists() {
                fusions.push(FusionModel::load(&fusion_dir, &stem)?);
            }
        }
        Ok(Self {
            experts,
            naive_constant: load_naive("constant")?,
            naive_expand: load_naive("expand")?,
            oracle,
            fusions,
        })
    }
}

/// Which sites an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplitKind {
    /// Internal sites, test split.
    Internal,
    /// External held-out sites, every example.
    External,
}

impl EvalSplitKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(Self::Internal),
            "external" => Ok(Self::External),
            other => Err(Error::InvalidConfig(format!("unknown split {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Internal => "internal",
            Self::External => "external",
        }
    }
}

type RecordsByMethod = Vec<((String, String), Vec<PredictionRecord>)>;

/// Evaluate every available method over the chosen sites. Returns the
/// metrics table and per-(method, dataset) records for further reporting.
pub fn evaluate_methods(
    corpus: &MultiSiteCorpus,
    artifacts: &RunArtifacts,
    which: EvalSplitKind,
) -> Result<(MetricsReport, RecordsByMethod)> {
    let (sites, scope): (Vec<&SiteDataset>, EvalScope) = match which {
        EvalSplitKind::Internal => (corpus.internal_sites(), EvalScope::Split(Split::Test)),
        EvalSplitKind::External => (corpus.external_sites(), EvalScope::All),
    };
    if sites.is_empty() {
        return Err(Error::InvalidData("no sites to evaluate".into()));
    }
    let expert_refs = artifacts.expert_refs();
    let n_experts = expert_refs.len();

    // Method order mirrors the results tables.
    let mut predictors: Vec<(Box<dyn ImagePredictor + '_>, usize, TransferClass)> = Vec::new();
    if let Some(model) = &artifacts.naive_constant {
        predictors.push((
            Box::new(NaivePredictor {
                model,
                label: "finetune-constant".into(),
            }),
            1,
            TransferClass::None,
        ));
    }
    if let Some(model) = &artifacts.naive_expand {
        predictors.push((
            Box::new(NaivePredictor {
                model,
                label: "finetune-expand".into(),
            }),
            1,
            TransferClass::None,
        ));
    }
    for expert in &expert_refs {
        predictors.push((
            Box::new(SingleExpertPredictor { expert }),
            1,
            TransferClass::None,
        ));
    }
    if n_experts > 0 {
        for kind in [
            BaselineKind::MaxLogit,
            BaselineKind::Msp,
            BaselineKind::ConfidenceRouting,
        ] {
            predictors.push((
                Box::new(ConfidenceBaselinePredictor {
                    experts: expert_refs.clone(),
                    kind,
                }),
                n_experts,
                TransferClass::None,
            ));
        }
    }
    for model in &artifacts.fusions {
        predictors.push((
            Box::new(FusionPredictor {
                experts: expert_refs.clone(),
                model,
            }),
            n_experts,
            TransferClass::Features,
        ));
    }
    if let Some(model) = &artifacts.oracle {
        predictors.push((
            Box::new(PooledPredictor { model }),
            1,
            TransferClass::Images,
        ));
    }

    let mut report = MetricsReport::default();
    let mut records_by_method: RecordsByMethod = Vec::new();
    for (predictor, experts, transfer) in &predictors {
        let method = predictor.name();
        for site in &sites {
            let vault = SiteVault::new((*site).clone());
            let records = vault.evaluate(scope, predictor.as_ref())?;
            let (acc, f1) = score_records(&records)?;
            report.rows.push(MetricsRow {
                method: method.clone(),
                experts: *experts,
                transfer: *transfer,
                dataset: site.site_id.clone(),
                acc,
                f1,
            });
            records_by_method.push(((method.clone(), site.site_id.clone()), records));
        }
        report.push_average(&method);
    }
    Ok((report, records_by_method))
}

/// Mean per-example inference seconds: one expert alone, full fusion with
/// sequential experts, and full fusion with experts run on separate threads.
pub fn measure_inference(
    corpus: &MultiSiteCorpus,
    artifacts: &RunArtifacts,
) -> Result<Vec<InferenceRow>> {
    let images: Vec<&crate::tensor::Tensor> = corpus
        .internal_sites()
        .iter()
        .flat_map(|s| s.labeled(Split::Test))
        .map(|(img, _)| img)
        .collect();
    if images.is_empty() || artifacts.experts.is_empty() {
        return Ok(Vec::new());
    }
    let n = images.len();
    let mut rows = Vec::new();

    let base = &artifacts.experts[0];
    let t0 = Instant::now();
    base.own_logits(&images)?;
    rows.push(InferenceRow {
        predictor: "single-expert".into(),
        examples: n,
        mean_seconds_per_example: t0.elapsed().as_secs_f64() / n as f64,
    });

    for model in &artifacts.fusions {
        let predictor = FusionPredictor {
            experts: artifacts.expert_refs(),
            model,
        };
        let t0 = Instant::now();
        predictor.predict_images(&images)?;
        rows.push(InferenceRow {
            predictor: format!("{}-sequential", model.mode.name()),
            examples: n,
            mean_seconds_per_example: t0.elapsed().as_secs_f64() / n as f64,
        });
    }

    // Parallel variant: per-expert encoders fan out across threads; the
    // fusion head itself is negligible.
    if let Some(model) = artifacts.fusions.last() {
        let t0 = Instant::now();
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = artifacts
                .experts
                .iter()
                .map(|expert| {
                    let images = &images;
                    scope.spawn(move || -> Result<()> {
                        expert.features_and_means(images)?;
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inference thread panicked"))
                .collect()
        });
        for r in results {
            r?;
        }
        rows.push(InferenceRow {
            predictor: format!("{}-parallel", model.mode.name()),
            examples: n,
            mean_seconds_per_example: t0.elapsed().as_secs_f64() / n as f64,
        });
    }
    Ok(rows)
}

type Reports = (MetricsReport, MetricsReport, AttentionReport, Vec<InferenceRow>);

/// Attention histograms and mean entropies for every trained wSF model,
/// over internal test splits and the external sites.
pub fn write_attention_reports(
    corpus: &MultiSiteCorpus,
    artifacts: &RunArtifacts,
    out: &Path,
) -> Result<AttentionReport> {
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    if !artifacts.fusions.iter().any(|m| m.mode != FusionMode::Sf) {
        return Err(Error::InvalidConfig(
            "no weighted fusion model available; SF has no attention to report".into(),
        ));
    }
    let expert_ids: Vec<String> = artifacts.experts.iter().map(|e| e.id.clone()).collect();
    let expert_refs = artifacts.expert_refs();
    let mut attention = AttentionReport::default();
    for model in &artifacts.fusions {
        if model.mode == FusionMode::Sf {
            continue;
        }
        let method = model.mode.name().to_string();
        let predictor = FusionPredictor {
            experts: expert_refs.clone(),
            model,
        };
        for (sites, scope) in [
            (corpus.internal_sites(), EvalScope::Split(Split::Test)),
            (corpus.external_sites(), EvalScope::All),
        ] {
            for site in sites {
                let vault = SiteVault::new(site.clone());
                let records = vault.evaluate(scope, &predictor)?;
                attention.add_dataset(&method, &site.site_id, &expert_ids, &records)?;
            }
        }
        fs::write(
            reports_dir.join(format!("attention_{method}.svg")),
            attention.to_svg(&method),
        )?;
    }
    fs::write(reports_dir.join("attention_hist.csv"), attention.hist_csv())?;
    fs::write(
        reports_dir.join("attention_entropy.csv"),
        attention.entropy_csv(),
    )?;
    Ok(attention)
}

/// Cumulative training-time curves and per-example inference timings.
pub fn write_efficiency_reports(
    corpus: &MultiSiteCorpus,
    artifacts: &RunArtifacts,
    timings: &[TimingRow],
    out: &Path,
) -> Result<Vec<InferenceRow>> {
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let curves = cumulative_training_curves(timings);
    fs::write(
        reports_dir.join("efficiency_training.csv"),
        cumulative_csv(&curves),
    )?;
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(m, pts)| {
            (
                m.clone(),
                pts.iter().map(|(s, v)| (*s as f64, *v)).collect(),
            )
        })
        .collect();
    fs::write(
        reports_dir.join("efficiency_training.svg"),
        svg_line_chart("cumulative training time", "seconds", &series),
    )?;

    let inference = measure_inference(corpus, artifacts)?;
    fs::write(
        reports_dir.join("efficiency_inference.csv"),
        inference_csv(&inference),
    )?;
    let bars: Vec<(String, f64)> = inference
        .iter()
        .map(|r| (r.predictor.clone(), r.mean_seconds_per_example))
        .collect();
    fs::write(
        reports_dir.join("efficiency_inference.svg"),
        svg_bar_chart("mean inference seconds per example", &bars),
    )?;
    Ok(inference)
}

/// Evaluate all methods and write every report file under `out/reports`.
pub fn write_reports(
    corpus: &MultiSiteCorpus,
    artifacts: &RunArtifacts,
    timings: &[TimingRow],
    out: &Path,
) -> Result<Reports> {
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let (internal, _) = evaluate_methods(corpus, artifacts, EvalSplitKind::Internal)?;
    fs::write(reports_dir.join("metrics_internal.csv"), internal.to_csv())?;
    let (external, _) = evaluate_methods(corpus, artifacts, EvalSplitKind::External)?;
    fs::write(reports_dir.join("metrics_external.csv"), external.to_csv())?;
    let attention = write_attention_reports(corpus, artifacts, out)?;
    let inference = write_efficiency_reports(corpus, artifacts, timings, out)?;
    Ok((internal, external, attention, inference))
}

/// Result of a full pipeline run.
pub struct PipelineRun {
    pub out_dir: PathBuf,
    pub artifacts: RunArtifacts,
    pub timings: Vec<TimingRow>,
    pub transfers: TransferLog,
    pub internal: MetricsReport,
    pub external: MetricsReport,
    pub attention: AttentionReport,
    pub inference: Vec<InferenceRow>,
}

/// The whole protocol in one call: base training, every incremental step
/// with per-step fusion retraining, the naive and oracle baselines, then
/// evaluation and reports.
pub fn run_incremental_pipeline(
    corpus: &MultiSiteCorpus,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<PipelineRun> {
    fs::create_dir_all(out)?;
    let steps = corpus.num_steps();
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "pipeline needs at least one incremental site".into(),
        ));
    }
    // Stages append to the run logs; a re-run starts clean.
    for log in ["logs/timings.csv", "logs/transfer_log.csv"] {
        let path = out.join(log);
        if path.exists() {
            fs::remove_file(&path)?;
        }
    }
    let stage = |name: &str, e: Error| -> Error {
        Error::InvalidData(format!("pipeline stage {name} failed: {e}"))
    };
    stage_train_base(corpus, cfg, out).map_err(|e| stage("train-base", e))?;
    for s in 1..=steps {
        stage_step(corpus, cfg, s, out).map_err(|e| stage("step", e))?;
        for &mode in &cfg.modes {
            stage_train_fusion(corpus, cfg, mode, Some(s), out)
                .map_err(|e| stage("train-fusion", e))?;
        }
    }
    stage_naive(corpus, cfg, out).map_err(|e| stage("naive-finetune", e))?;
    stage_oracle(corpus, cfg, out).map_err(|e| stage("oracle-retrain", e))?;

    let artifacts = RunArtifacts::load(out, corpus)?;
    let timings = read_timings(out)?;
    let transfers = read_transfer_log(out)?;
    let (internal, external, attention, inference) =
        write_reports(corpus, &artifacts, &timings, out)?;
    Ok(PipelineRun {
        out_dir: out.to_path_buf(),
        artifacts,
        timings,
        transfers,
        internal,
        external,
        attention,
        inference,
    })
}
