use std::fs::File;
use std::io::BufWriter;

use proptest::prelude::*;

use cmdcm_core::data::{ingest_csv, write_events_csv};
use cmdcm_core::eval::{auc, read_runs_csv, read_table_variants};
use cmdcm_core::experiment::{
    prepare_data, run_ablation, run_experiment, write_outputs, CalendarConfig, DataMode, ExperimentConfig, Variant,
};
use cmdcm_core::synth::{event_schema, generate_dataset, sample_world, to_events, Mode};
use cmdcm_core::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.seeds = vec![1, 2];
    cfg.dataset.n_daily = 8000;
    cfg.dataset.n_prepromo = 8000;
    cfg.dataset.world.n_users = 300;
    cfg.dataset.world.n_items = 200;
    cfg.training.epochs = 1;
    cfg
}

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms(
        pos in prop::collection::vec(-5.0f64..5.0, 1..40),
        neg in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let f = |v: &[f64]| v.iter().map(|x| (2.0 * x).exp() + 1.0).collect::<Vec<_>>();
        prop_assert_eq!(auc(&pos, &neg).unwrap(), auc(&f(&pos), &f(&neg)).unwrap());
        let swapped = auc(&neg, &pos).unwrap();
        prop_assert!((auc(&pos, &neg).unwrap() + swapped - 1.0).abs() < 1e-12);
    }
}

#[test]
fn outputs_are_complete_and_consistent() {
    let cfg = small_config();
    let outcome = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&outcome, dir.path()).unwrap();

    let runs = read_runs_csv(File::open(dir.path().join("runs.csv")).unwrap()).unwrap();
    assert_eq!(runs.len(), cfg.dataset.seeds.len() * Variant::ALL.len());
    assert_eq!(runs, outcome.runs());
    assert!(runs.iter().all(|r| r.config_hash == cfg.hash()));
    let table = read_table_variants(File::open(dir.path().join("table.csv")).unwrap()).unwrap();
    let names: Vec<String> = Variant::ALL.iter().map(|v| v.name().to_string()).collect();
    assert_eq!(table, names);

    for s in &outcome.seeds {
        let d = &s.diagnostics;
        assert_eq!(d.pretrained_fingerprint_before, d.pretrained_fingerprint_after);
        assert_eq!(d.stages[..2], ["data".to_string(), "pretrain".to_string()]);
        assert!(d.stages.contains(&"imputation".to_string()));
        // the causal machinery is never built for wo_ccra
        assert!(!d.stages.contains(&"wo_ccra:imputation-targets".to_string()));
        assert!(d.stages.contains(&"wo_cm:finetune".to_string()));
        let steps: std::collections::HashMap<_, _> = d.steps.iter().cloned().collect();
        assert_eq!(steps["pretrained_only"], 0);
        assert!(steps["cmdcm"] > 0);
    }
}

#[test]
fn ablation_keeps_only_ablation_variants() {
    let mut cfg = small_config();
    cfg.dataset.seeds = vec![3];
    let outcome = run_ablation(&cfg).unwrap();
    let names: Vec<String> = outcome.runs().iter().map(|r| r.variant.clone()).collect();
    let want: Vec<String> = Variant::ABLATION.iter().map(|v| v.name().to_string()).collect();
    assert_eq!(names, want);
}

#[test]
fn csv_mode_reproduces_synthetic_labels() {
    let cfg = small_config();
    let world = sample_world(cfg.dataset.world_seed, &cfg.dataset.world).unwrap();
    let mut samples = generate_dataset(&world, 4000, Mode::Daily, 1).unwrap();
    samples.extend(generate_dataset(&world, 3000, Mode::Prepromo, 2).unwrap());
    let events = to_events(&samples);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.csv");
    write_events_csv(&events, BufWriter::new(File::create(&path).unwrap()), &event_schema()).unwrap();
    let ingested = ingest_csv(&path, &event_schema()).unwrap();
    assert_eq!(ingested.events.len(), events.len());

    let mut csv_cfg = cfg.clone();
    csv_cfg.dataset.mode = DataMode::Csv;
    csv_cfg.dataset.events_path = Some(path);
    csv_cfg.dataset.schema = event_schema();
    csv_cfg.dataset.calendar = CalendarConfig::synthetic();
    csv_cfg.dataset.split_ratio = 0.5;
    let data = prepare_data(&csv_cfg, 1, Some(&ingested.events)).unwrap();
    assert_eq!(data.daily.len(), 4000);
    let pre = data.prepromo_train.len() + data.prepromo_eval.len();
    assert_eq!(pre, 3000);
    let delayed = data
        .prepromo_train
        .iter()
        .chain(&data.prepromo_eval)
        .filter(|s| s.y_delay == 1.0)
        .count();
    assert_eq!(delayed, samples.iter().filter(|s| s.sample.y_delay).count());
    assert!(data.eval_truth.is_none());

    csv_cfg.variants = vec![Variant::PretrainedOnly, Variant::WoCcra];
    csv_cfg.dataset.seeds = vec![1];
    let outcome = run_experiment(&csv_cfg).unwrap();
    assert_eq!(outcome.runs().len(), 2);
}

#[test]
fn config_errors_are_named() {
    let err = ExperimentConfig::from_toml("[model]\nlambda_cc = 0.1\n", None).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("lambda_cc")), "{err}");
    let err = ExperimentConfig::from_toml("[dataset]\nmode = \"csv\"\n", None).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("events_path")), "{err}");
    let err = ExperimentConfig::from_toml("variants = [\"cmdcm\", \"nope\"]\n", None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = ExperimentConfig::from_toml("[training]\nlr = -1.0\n", None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn missing_event_file_is_an_io_error_in_ingest_stage() {
    let mut cfg = small_config();
    cfg.dataset.mode = DataMode::Csv;
    cfg.dataset.events_path = Some("/nonexistent/events.csv".into());
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "ingest"), "{err}");
    assert!(matches!(err.root(), Error::Io(_) | Error::Csv(_)), "{err}");
}
