use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataMode, ExperimentConfig};
use super::variant::{Plan, Variant};
use crate::causal::{
    cm_targets, dr_ate, dr_rows, fit_imputation, naive_difference, propensities, ImputationModel, PropensitySource,
};
use crate::cmdcm::{finetune, CmdcmModel, FinetuneTrace, LossBreakdown};
use crate::data::{
    build_samples, ingest_csv, partition_items, ActionEvent, ClickSample, EncodedSample, FeatureEncoder,
};
use crate::error::{Error, Result};
use crate::eval::{
    auc_all, auc_delay, build_document, nll_delay, write_runs_csv, write_table_csv, ClassCounts, MetricReport,
};
use crate::pretrain::{finetune_relabeled, pretrain_fit, PretrainedModel};
use crate::seed::derive;
use crate::synth::{generate_dataset, sample_world, GroundTruth, Mode};
use crate::train::LossTrace;

/// Encoded samples of one seed, plus generator truth in synthetic mode.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub encoder: FeatureEncoder,
    pub daily: Vec<EncodedSample>,
    pub prepromo_train: Vec<EncodedSample>,
    pub prepromo_eval: Vec<EncodedSample>,
    pub train_truth: Option<Vec<GroundTruth>>,
    pub eval_truth: Option<Vec<GroundTruth>>,
}

/// Loads the event log named by a csv-mode config.
pub fn load_events(cfg: &ExperimentConfig) -> Result<Vec<ActionEvent>> {
    let path = cfg
        .dataset
        .events_path
        .as_ref()
        .ok_or_else(|| Error::config("dataset.events_path is required in csv mode"))?;
    Ok(ingest_csv(path, &cfg.dataset.schema)?.events)
}

fn split_truth(samples: Vec<crate::synth::SyntheticSample>) -> (Vec<ClickSample>, Vec<GroundTruth>) {
    samples.into_iter().map(|s| (s.sample, s.truth)).unzip()
}

/// Builds the samples of one seed. `events` is required in csv mode.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64, events: Option<&[ActionEvent]>) -> Result<PreparedData> {
    let ds = &cfg.dataset;
    let split_seed = derive(seed, "split");
    let (daily, train, eval, train_truth, eval_truth) = match ds.mode {
        DataMode::Synthetic => {
            let world = sample_world(ds.world_seed, &ds.world)?;
            let daily = generate_dataset(&world, ds.n_daily, Mode::Daily, derive(seed, "daily-data"))?;
            let pre = generate_dataset(&world, ds.n_prepromo, Mode::Prepromo, derive(seed, "prepromo-data"))?;
            let (train, eval) = partition_items(pre, ds.split_ratio, split_seed)?;
            let (daily, _) = split_truth(daily);
            let (train, train_truth) = split_truth(train);
            let (eval, eval_truth) = split_truth(eval);
            (daily, train, eval, Some(train_truth), Some(eval_truth))
        }
        DataMode::Csv => {
            let events = events.ok_or_else(|| Error::config("csv mode needs the event log"))?;
            let calendar = ds.calendar.build()?;
            let labeled = build_samples(events, &calendar, &ds.labels);
            let split = crate::data::partition_dataset(labeled.daily, labeled.prepromo, ds.split_ratio, split_seed)?;
            (split.daily_train, split.prepromo_train, split.prepromo_eval, None, None)
        }
    };
    if daily.is_empty() {
        return Err(Error::data("no daily samples in calendar window"));
    }
    let encoder = FeatureEncoder::fit(daily.iter().chain(&train));
    Ok(PreparedData {
        daily: encoder.encode_all(&daily),
        prepromo_train: encoder.encode_all(&train),
        prepromo_eval: encoder.encode_all(&eval),
        encoder,
        train_truth,
        eval_truth,
    })
}

/// Doubly robust diagnostic on the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrSummary {
    pub dr_ate: f64,
    pub dr_std_error: f64,
    pub naive_difference: f64,
    pub naive_std_error: f64,
    /// Mean true effect of the evaluation samples (synthetic data only).
    pub true_ate: Option<f64>,
}

/// Imputation model with its training-set regularizer targets.
#[derive(Debug, Clone)]
pub struct CausalArtifacts {
    pub model: ImputationModel,
    pub trace: LossTrace,
    pub targets: Vec<f64>,
    pub dr: DrSummary,
}

/// Pretrains on the daily split of run seed `seed`.
pub fn pretrain(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<(PretrainedModel, LossTrace)> {
    pretrain_fit(&data.daily, &data.encoder, &cfg.model.arch(), &cfg.training, derive(seed, "pretrain"))
}

/// Fits the imputation model for run seed `seed` and its DR diagnostic.
pub fn fit_causal(cfg: &ExperimentConfig, data: &PreparedData, pre: &PretrainedModel, seed: u64) -> Result<CausalArtifacts> {
    let (model, trace) = fit_imputation(
        &data.prepromo_train,
        &data.encoder,
        &cfg.causal,
        &cfg.training,
        derive(seed, "imputation"),
    )?;
    let targets = cm_targets(&model, &data.prepromo_train)?;
    let eval = &data.prepromo_eval;
    let (mu0, mu1) = model.mu(eval)?;
    let p_a = propensities(PropensitySource::PretrainedAtc(pre), eval, cfg.causal.propensity_clip)?;
    let rows = dr_rows(eval, &mu0, &mu1, &p_a)?;
    let est = dr_ate(&rows)?;
    let (naive, naive_se) = naive_difference(&rows)?;
    let true_ate = data
        .eval_truth
        .as_ref()
        .map(|t| t.iter().map(|g| g.ice_true).sum::<f64>() / t.len() as f64);
    Ok(CausalArtifacts {
        model,
        trace,
        targets,
        dr: DrSummary {
            dr_ate: est.mean,
            dr_std_error: est.std_error,
            naive_difference: naive,
            naive_std_error: naive_se,
            true_ate,
        },
    })
}

/// A fitted variant.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum TrainedVariant {
    PretrainedOnly,
    Relabel { model: PretrainedModel, trace: LossTrace },
    Tower { model: CmdcmModel, trace: FinetuneTrace },
}

impl TrainedVariant {
    pub fn steps(&self) -> u64 {
        match self {
            TrainedVariant::PretrainedOnly => 0,
            TrainedVariant::Relabel { trace, .. } => trace.steps,
            TrainedVariant::Tower { trace, .. } => trace.loss.steps,
        }
    }

    pub fn final_epoch_loss(&self) -> Option<f64> {
        match self {
            TrainedVariant::PretrainedOnly => None,
            TrainedVariant::Relabel { trace, .. } => trace.epochs.last().copied(),
            TrainedVariant::Tower { trace, .. } => trace.loss.epochs.last().copied(),
        }
    }

    /// `(delay scores, all-conversion scores)` for `samples`.
    pub fn scores(&self, pre: &PretrainedModel, samples: &[EncodedSample]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            TrainedVariant::PretrainedOnly => {
                let (cvr, _) = pre.predict(samples)?;
                Ok((cvr.clone(), cvr))
            }
            TrainedVariant::Relabel { model, .. } => {
                let (cvr, _) = model.predict(samples)?;
                Ok((cvr.clone(), cvr))
            }
            TrainedVariant::Tower { model, .. } => {
                let p = model.predict(pre, samples)?;
                Ok((p.p_delay, p.p_all_raw))
            }
        }
    }
}

pub fn train_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    data: &PreparedData,
    pre: &PretrainedModel,
    causal: Option<&CausalArtifacts>,
    seed: u64,
) -> Result<TrainedVariant> {
    // every variant shares one stream so ablations differ only in their switches
    let seed = derive(seed, "finetune");
    match variant.plan(&cfg.model) {
        Plan::PretrainedOnly => Ok(TrainedVariant::PretrainedOnly),
        Plan::Relabel => {
            let (model, trace) = finetune_relabeled(pre, &data.prepromo_train, &cfg.training, seed)?;
            Ok(TrainedVariant::Relabel { model, trace })
        }
        Plan::DelayTower { cfg: tower_cfg, imputation } => {
            let mut model = CmdcmModel::new(pre, tower_cfg, seed)?;
            let targets = if imputation {
                let c = causal.ok_or_else(|| Error::config(format!("{variant} needs the imputation model")))?;
                Some(c.targets.as_slice())
            } else {
                None
            };
            let trace = finetune(&mut model, pre, &data.prepromo_train, targets, &cfg.training, seed)?;
            Ok(TrainedVariant::Tower { model, trace })
        }
    }
}

pub fn evaluate_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    trained: &TrainedVariant,
    pre: &PretrainedModel,
    eval: &[EncodedSample],
    seed: u64,
) -> Result<MetricReport> {
    let (delay, all) = trained.scores(pre, eval)?;
    Ok(MetricReport {
        variant: variant.name().to_string(),
        seed,
        config_hash: cfg.hash(),
        auc_all: auc_all(&all, eval)?,
        auc_delay: auc_delay(&delay, eval)?,
        nll_delay: nll_delay(&delay, eval, cfg.eval.nll_exclude_direct)?,
        counts: ClassCounts::of(eval),
        final_train_loss: trained.final_epoch_loss(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub variant: String,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Everything one seed produced besides the metric reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    /// Ordered stage log, e.g. `pretrain`, `imputation`, `cmdcm:finetune`.
    pub stages: Vec<String>,
    pub pretrained_fingerprint_before: String,
    pub pretrained_fingerprint_after: String,
    pub pretrain_trace: LossTrace,
    pub imputation_trace: Option<LossTrace>,
    pub dr: Option<DrSummary>,
    pub steps: Vec<(String, u64)>,
    pub epoch_losses: Vec<EpochLoss>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub reports: Vec<MetricReport>,
    pub diagnostics: SeedDiagnostics,
    /// Per-variant delay scores on the evaluation split, in variant order.
    pub eval_scores: Vec<(Variant, Vec<f64>)>,
    pub data: PreparedData,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, events: Option<&[ActionEvent]>) -> Result<SeedOutcome> {
    let stage = |name: &str| format!("seed {seed}: {name}");
    let data = prepare_data(cfg, seed, events).map_err(|e| e.in_stage(stage("data")))?;
    let mut stages = vec!["data".to_string()];

    let (pre, pretrain_trace) = pretrain(cfg, &data, seed).map_err(|e| e.in_stage(stage("pretrain")))?;
    stages.push("pretrain".into());
    let before = pre.fingerprint();

    let mut causal: Option<CausalArtifacts> = None;
    let mut reports = Vec::new();
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut eval_scores = Vec::new();
    for &variant in &cfg.variants {
        let needs = matches!(variant.plan(&cfg.model), Plan::DelayTower { imputation: true, .. });
        if needs && causal.is_none() {
            let c = fit_causal(cfg, &data, &pre, seed)
                .map_err(|e| e.in_stage(stage("imputation")))?;
            stages.push("imputation".into());
            causal = Some(c);
        }
        if needs {
            stages.push(format!("{variant}:imputation-targets"));
        }
        let trained = train_variant(cfg, variant, &data, &pre, causal.as_ref(), seed)
            .map_err(|e| e.in_stage(stage(&format!("{variant} fine-tune"))))?;
        if trained.steps() > 0 {
            stages.push(format!("{variant}:finetune"));
        }
        let report = evaluate_variant(cfg, variant, &trained, &pre, &data.prepromo_eval, seed)
            .map_err(|e| e.in_stage(stage(&format!("{variant} evaluate"))))?;
        stages.push(format!("{variant}:evaluate"));
        steps.push((variant.name().to_string(), trained.steps()));
        match &trained {
            TrainedVariant::Tower { trace, .. } => {
                for (epoch, loss) in trace.components.iter().enumerate() {
                    epoch_losses.push(EpochLoss {
                        variant: variant.name().into(),
                        epoch,
                        loss: *loss,
                    });
                }
            }
            TrainedVariant::Relabel { trace, .. } => {
                for (epoch, &total) in trace.epochs.iter().enumerate() {
                    epoch_losses.push(EpochLoss {
                        variant: variant.name().into(),
                        epoch,
                        loss: LossBreakdown {
                            total,
                            all: total,
                            ..Default::default()
                        },
                    });
                }
            }
            TrainedVariant::PretrainedOnly => {}
        }
        eval_scores.push((variant, trained.scores(&pre, &data.prepromo_eval)?.0));
        reports.push(report);
    }
    let after = pre.fingerprint();
    if before != after {
        return Err(Error::Training(format!("pretrained parameters changed during seed {seed}")));
    }
    Ok(SeedOutcome {
        reports,
        diagnostics: SeedDiagnostics {
            seed,
            stages,
            pretrained_fingerprint_before: before,
            pretrained_fingerprint_after: after,
            pretrain_trace,
            imputation_trace: causal.as_ref().map(|c| c.trace.clone()),
            dr: causal.map(|c| c.dr),
            steps,
            epoch_losses,
        },
        eval_scores,
        data,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentOutcome {
    /// Reports of every seed, seed-major in configured variant order.
    pub fn runs(&self) -> Vec<MetricReport> {
        self.seeds.iter().flat_map(|s| s.reports.iter().cloned()).collect()
    }
}

/// Runs every configured seed (in parallel when threads are available;
/// results do not depend on scheduling).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (outcome, err) = run_experiment_partial(cfg);
    match err {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

/// Like [`run_experiment`] but keeps the seeds that finished when others
/// fail. The error is the one of the first failing seed in config order.
pub fn run_experiment_partial(cfg: &ExperimentConfig) -> (ExperimentOutcome, Option<Error>) {
    let mut outcome = ExperimentOutcome {
        config: cfg.clone(),
        seeds: Vec::new(),
    };
    if let Err(e) = cfg.validate() {
        return (outcome, Some(e));
    }
    let events = match cfg.dataset.mode {
        DataMode::Csv => match load_events(cfg) {
            Ok(ev) => Some(ev),
            Err(e) => return (outcome, Some(e.in_stage("ingest"))),
        },
        DataMode::Synthetic => None,
    };
    let results: Vec<Result<SeedOutcome>> = cfg
        .dataset
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, events.as_deref()))
        .collect();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(s) => outcome.seeds.push(s),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    (outcome, first_err)
}

/// The config restricted to the ablation variants.
pub fn ablation_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = cfg.clone();
    cfg.variants.retain(|v| Variant::ABLATION.contains(v));
    if cfg.variants.is_empty() {
        return Err(Error::config("no ablation variants selected"));
    }
    Ok(cfg)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment(&ablation_config(cfg)?)
}

/// Writes `report.json`, `runs.csv`, `table.csv`, `loss_trace.csv` and
/// `diagnostics.json` into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let runs = outcome.runs();
    let baseline = Some(outcome.config.eval.baseline.as_str()).filter(|b| runs.iter().any(|r| &r.variant == b));
    let doc = build_document(&runs, baseline);

    let mut w = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    write_runs_csv(&runs, BufWriter::new(File::create(dir.join("runs.csv"))?))?;
    write_table_csv(&doc.summary, BufWriter::new(File::create(dir.join("table.csv"))?))?;

    let mut trace = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("loss_trace.csv"))?));
    trace.write_record(["seed", "variant", "epoch", "total", "delay", "all", "cm"])?;
    for s in &outcome.seeds {
        for e in &s.diagnostics.epoch_losses {
            trace.write_record([
                s.diagnostics.seed.to_string(),
                e.variant.clone(),
                e.epoch.to_string(),
                e.loss.total.to_string(),
                e.loss.delay.to_string(),
                e.loss.all.to_string(),
                e.loss.cm.to_string(),
            ])?;
        }
    }
    trace.flush()?;

    let diags: Vec<&SeedDiagnostics> = outcome.seeds.iter().map(|s| &s.diagnostics).collect();
    let mut w = BufWriter::new(File::create(dir.join("diagnostics.json"))?);
    serde_json::to_writer_pretty(&mut w, &diags)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
