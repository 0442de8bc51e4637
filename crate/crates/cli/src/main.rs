use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmdcm_core::cmdcm::write_diagnostics;
use cmdcm_core::data::write_events_csv;
use cmdcm_core::eval::{emit_report, ReportFormat};
use cmdcm_core::experiment::{
    ablation_config, evaluate_variant, fit_causal, prepare_data, pretrain, run_experiment_partial, train_variant,
    write_outputs, CalendarConfig, DataMode, ExperimentConfig, Plan, PreparedData, Profile, TrainedVariant, Variant,
};
use cmdcm_core::synth::{event_schema, generate_dataset, sample_world, to_events, write_ground_truth, Mode};
use cmdcm_core::{CmdcmModel, Error, PretrainedModel, Result};

/// Log level comes from `CMDCM_LOG` (`error`, `warn`, `info`, `debug`, `trace`).
#[derive(Parser)]
#[command(name = "cmdcm", version, about = "Delayed-conversion modeling for sales pre-promotion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic event log, its ground truth and a csv-mode config.
    Generate(Common),
    /// Pretrain the daily towers and save the checkpoint.
    Pretrain(Common),
    /// Fine-tune one variant on top of the saved pretrained checkpoint.
    Train(Common),
    /// Score one trained variant on the evaluation split.
    Evaluate(Common),
    /// Run all configured variants over all seeds.
    Experiment(Common),
    /// Run the ablation variants over all seeds.
    Ablation(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omitted keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed. For `experiment` and `ablation` it replaces the seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Variant name. Required by `train` and `evaluate`; repeatable to
    /// restrict `experiment`.
    #[arg(long)]
    variant: Vec<Variant>,
    /// Output directory (default: `output.dir` of the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::from_file(path, self.profile),
            None => Ok(ExperimentConfig::for_profile(self.profile.unwrap_or_default())),
        }
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.dataset.seeds[0])
    }

    fn single_variant(&self) -> Result<Variant> {
        match self.variant.as_slice() {
            [v] => Ok(*v),
            [] => Err(Error::Usage("--variant is required".into())),
            _ => Err(Error::Usage("give exactly one --variant".into())),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        Error::Data(_) | Error::Csv(_) | Error::Json(_) => 4,
        Error::Training(_) | Error::Shape(_) => 5,
        Error::Io(_) => 6,
        Error::Stage { .. } => unreachable!("root() looks through stages"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMDCM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(c) => generate(&c),
        Command::Pretrain(c) => pretrain_cmd(&c),
        Command::Train(c) => train(&c),
        Command::Evaluate(c) => evaluate(&c),
        Command::Experiment(c) => experiment(&c, false),
        Command::Ablation(c) => experiment(&c, true),
    }
}

fn generate(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out_dir(&cfg)?;
    let seed = c.seed(&cfg);
    let ds = &cfg.dataset;
    let world = sample_world(ds.world_seed, &ds.world)?;
    let mut samples = generate_dataset(&world, ds.n_daily, Mode::Daily, cmdcm_core::seed::derive(seed, "daily-data"))?;
    samples.extend(generate_dataset(
        &world,
        ds.n_prepromo,
        Mode::Prepromo,
        cmdcm_core::seed::derive(seed, "prepromo-data"),
    )?);

    let events_path = out.join("events.csv");
    let schema = event_schema();
    write_events_csv(&to_events(&samples), BufWriter::new(File::create(&events_path)?), &schema)?;
    write_ground_truth(&samples, BufWriter::new(File::create(out.join("ground_truth.csv"))?))?;

    let mut csv_cfg = cfg.clone();
    csv_cfg.dataset.mode = DataMode::Csv;
    csv_cfg.dataset.events_path = Some(fs::canonicalize(&events_path)?);
    csv_cfg.dataset.schema = schema;
    csv_cfg.dataset.calendar = CalendarConfig::synthetic();
    fs::write(out.join("dataset.toml"), csv_cfg.to_toml()?)?;
    log::info!("wrote {} clicks to {}", samples.len(), events_path.display());
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let events = match cfg.dataset.mode {
        DataMode::Csv => Some(cmdcm_core::experiment::load_events(cfg).map_err(|e| e.in_stage("ingest"))?),
        DataMode::Synthetic => None,
    };
    prepare_data(cfg, seed, events.as_deref()).map_err(|e| e.in_stage("data"))
}

fn checkpoint(out: &Path, name: &str, seed: u64) -> PathBuf {
    out.join(format!("{name}-seed{seed}.json"))
}

fn pretrain_cmd(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out_dir(&cfg)?;
    let seed = c.seed(&cfg);
    let data = load_data(&cfg, seed)?;
    let (pre, trace) = pretrain(&cfg, &data, seed).map_err(|e| e.in_stage("pretrain"))?;
    let path = checkpoint(&out, "pretrained", seed);
    pre.save(&path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join(format!("pretrain_loss-seed{seed}.csv")))?));
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trace.epochs.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    log::info!("pretrained model saved to {}", path.display());
    Ok(())
}

fn load_pretrained(out: &Path, seed: u64) -> Result<PretrainedModel> {
    let path = checkpoint(out, "pretrained", seed);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "{} not found; run `cmdcm pretrain` with the same --out and --seed first",
            path.display()
        )));
    }
    PretrainedModel::load(&path)
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let variant = c.single_variant()?;
    let out = c.out_dir(&cfg)?;
    let seed = c.seed(&cfg);
    let data = load_data(&cfg, seed)?;
    let pre = load_pretrained(&out, seed)?;
    let causal = match variant.plan(&cfg.model) {
        Plan::DelayTower { imputation: true, .. } => {
            Some(fit_causal(&cfg, &data, &pre, seed).map_err(|e| e.in_stage("imputation"))?)
        }
        _ => None,
    };
    if let Some(c) = &causal {
        c.model.save(&checkpoint(&out, "imputation", seed))?;
        log::info!("DR effect of add-to-cart on eval: {:.4} ± {:.4}", c.dr.dr_ate, c.dr.dr_std_error);
    }
    let trained = train_variant(&cfg, variant, &data, &pre, causal.as_ref(), seed)
        .map_err(|e| e.in_stage(format!("{variant} fine-tune")))?;
    let path = checkpoint(&out, variant.name(), seed);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(
        out.join(format!("{variant}_loss-seed{seed}.csv")),
    )?));
    w.write_record(["epoch", "total", "delay", "all", "cm"])?;
    match &trained {
        TrainedVariant::PretrainedOnly => {
            log::info!("{variant} has nothing to fine-tune");
            return Ok(());
        }
        TrainedVariant::Relabel { model, trace } => {
            model.save(&path)?;
            for (i, l) in trace.epochs.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string(), String::new(), l.to_string(), String::new()])?;
            }
        }
        TrainedVariant::Tower { model, trace } => {
            model.save(&path)?;
            for (i, l) in trace.components.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    l.total.to_string(),
                    l.delay.to_string(),
                    l.all.to_string(),
                    l.cm.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    log::info!("{variant} saved to {}", path.display());
    Ok(())
}

fn evaluate(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let variant = c.single_variant()?;
    let out = c.out_dir(&cfg)?;
    let seed = c.seed(&cfg);
    let data = load_data(&cfg, seed)?;
    let pre = load_pretrained(&out, seed)?;
    let path = checkpoint(&out, variant.name(), seed);
    let trained = match variant.plan(&cfg.model) {
        Plan::PretrainedOnly => TrainedVariant::PretrainedOnly,
        Plan::Relabel => TrainedVariant::Relabel {
            model: PretrainedModel::load(&path)?,
            trace: Default::default(),
        },
        Plan::DelayTower { .. } => TrainedVariant::Tower {
            model: CmdcmModel::load(&path)?,
            trace: Default::default(),
        },
    };
    let eval = &data.prepromo_eval;
    let report = evaluate_variant(&cfg, variant, &trained, &pre, eval, seed).map_err(|e| e.in_stage("evaluate"))?;
    emit_report(
        std::slice::from_ref(&report),
        None,
        ReportFormat::Json,
        &out.join(format!("{variant}_report-seed{seed}.json")),
    )?;
    let diag = BufWriter::new(File::create(out.join(format!("{variant}_scores-seed{seed}.csv")))?);
    match &trained {
        TrainedVariant::Tower { model, .. } => write_diagnostics(&model.predict(&pre, eval)?, diag)?,
        _ => {
            let (delay, _) = trained.scores(&pre, eval)?;
            let mut w = csv::Writer::from_writer(diag);
            w.write_record(["p_delay"])?;
            for p in delay {
                w.write_record([p.to_string()])?;
            }
            w.flush()?;
        }
    }
    println!(
        "{variant} seed {seed}: auc_all {:.4} auc_delay {:.4} nll_delay {:.5}",
        report.auc_all, report.auc_delay, report.nll_delay
    );
    Ok(())
}

fn experiment(c: &Common, ablation: bool) -> Result<()> {
    let mut cfg = c.config()?;
    if let Some(seed) = c.seed {
        cfg.dataset.seeds = vec![seed];
    }
    if !c.variant.is_empty() {
        cfg.variants = c.variant.clone();
    }
    if ablation {
        cfg = ablation_config(&cfg)?;
    }
    let out = c.out_dir(&cfg)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let (outcome, err) = run_experiment_partial(&cfg);
    if !outcome.seeds.is_empty() {
        write_outputs(&outcome, &out)?;
    }
    if let Some(e) = err {
        if !outcome.seeds.is_empty() {
            log::warn!("partial results for {} seeds written to {}", outcome.seeds.len(), out.display());
        }
        return Err(e);
    }
    let doc = cmdcm_core::eval::build_document(&outcome.runs(), None);
    println!("{:<16} {:>8} {:>9} {:>9}", "variant", "auc_all", "auc_delay", "nll_delay");
    for s in &doc.summary {
        println!(
            "{:<16} {:>8.4} {:>9.4} {:>9.5}",
            s.variant, s.auc_all.mean, s.auc_delay.mean, s.nll_delay.mean
        );
    }
    log::info!("reports written to {}", out.display());
    Ok(())
}
