use cmdcm_core::autodiff::{bce, Tensor, PROB_EPS};
use cmdcm_core::cmdcm::{finetune, CmdcmConfig, CmdcmModel, GateMode};
use cmdcm_core::data::{EncodedSample, FeatureEncoder};
use cmdcm_core::pretrain::{pretrain_fit, ArchConfig, PretrainedModel};
use cmdcm_core::synth::{generate_dataset, sample_world, Mode, WorldConfig};
use cmdcm_core::train::TrainConfig;
use cmdcm_core::Error;

struct Fixture {
    pre: PretrainedModel,
    train: Vec<EncodedSample>,
    mu1: Vec<f64>,
}

fn fixture() -> Fixture {
    let cfg = WorldConfig {
        n_users: 60,
        n_items: 50,
        ..WorldConfig::default()
    };
    let world = sample_world(7, &cfg).unwrap();
    let daily = generate_dataset(&world, 3000, Mode::Daily, 1).unwrap();
    let pre = generate_dataset(&world, 2000, Mode::Prepromo, 2).unwrap();
    let daily: Vec<_> = daily.into_iter().map(|s| s.sample).collect();
    let mu1 = pre.iter().map(|s| s.truth.mu1_true).collect();
    let pre: Vec<_> = pre.into_iter().map(|s| s.sample).collect();
    let encoder = FeatureEncoder::fit(daily.iter().chain(&pre));
    let (model, _) = pretrain_fit(
        &encoder.encode_all(&daily),
        &encoder,
        &ArchConfig::default(),
        &TrainConfig::default(),
        3,
    )
    .unwrap();
    Fixture {
        train: encoder.encode_all(&pre),
        pre: model,
        mu1,
    }
}

fn set_params(model: &mut CmdcmModel, prefix: &str, f: impl Fn(&str) -> f64) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get_mut(id);
        if p.name.starts_with(prefix) {
            let v = f(&p.name);
            p.value.values_mut().fill(v);
        }
    }
}

#[test]
fn zeroed_gate_networks_give_one_half() {
    let fx = fixture();
    let mut model = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 1).unwrap();
    set_params(&mut model, "gate.cvr.", |_| 0.0);
    set_params(&mut model, "gate.atc.", |_| 0.0);
    let pred = model.predict(&fx.pre, &fx.train[..50]).unwrap();
    assert!(pred.gate_mean.iter().all(|&g| g == 0.5));
}

#[test]
fn saturated_gates_reduce_to_constant_gates() {
    let fx = fixture();
    let mut gated = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 1).unwrap();
    let ones = CmdcmModel::new(
        &fx.pre,
        CmdcmConfig {
            gates: GateMode::Ones,
            ..CmdcmConfig::default()
        },
        1,
    )
    .unwrap();
    // σ(40) rounds to exactly 1.0 in f64
    for tower in ["gate.cvr.", "gate.atc."] {
        set_params(&mut gated, tower, |name| if name.ends_with(".out.b") { 40.0 } else { 0.0 });
    }
    let a = gated.predict(&fx.pre, &fx.train).unwrap();
    let b = ones.predict(&fx.pre, &fx.train).unwrap();
    assert!(a.gate_mean.iter().all(|&g| g == 1.0));
    assert!(b.gate_mean.is_empty());
    assert_eq!(a.p_delay, b.p_delay);
}

#[test]
fn composition_is_additive_and_bounded() {
    let fx = fixture();
    let model = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 2).unwrap();
    let p = model.predict(&fx.pre, &fx.train).unwrap();
    let (cvr, _) = fx.pre.predict(&fx.train).unwrap();
    for (i, &c) in cvr.iter().enumerate() {
        assert_eq!(p.p_all_raw[i], p.p_ori_cvr[i] + p.p_delay[i]);
        assert_eq!(p.p_ori_cvr[i], c);
        assert!(p.p_delay[i] > 0.0 && p.p_delay[i] < 1.0);
        assert!(p.gate_mean[i] > 0.0 && p.gate_mean[i] < 1.0);
    }
}

#[test]
fn batch_loss_matches_per_sample_formula() {
    let fx = fixture();
    for lambda_c in [0.0, 0.1] {
        let cfg = CmdcmConfig {
            lambda_c,
            ..CmdcmConfig::default()
        };
        let model = CmdcmModel::new(&fx.pre, cfg.clone(), 4).unwrap();
        let samples = &fx.train[..300];
        let mu1 = &fx.mu1[..300];
        let got = model.loss(&fx.pre, samples, Some(mu1)).unwrap();
        let p = model.predict(&fx.pre, samples).unwrap();
        let n = samples.len() as f64;
        let mut want = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let all = bce(p.p_all_raw[i].clamp(PROB_EPS, 1.0 - PROB_EPS), s.y_all);
            want += bce(p.p_delay[i], s.y_delay) + cfg.lambda * all + lambda_c * (p.p_delay[i] - mu1[i]).powi(2);
        }
        assert!((got.total - want / n).abs() < 1e-12, "lambda_c {lambda_c}");
    }
}

#[test]
fn finetune_moves_only_the_tower() {
    let fx = fixture();
    let before = fx.pre.fingerprint();
    let mut model = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 5).unwrap();
    let start = model.store.fingerprint();
    let trace = finetune(&mut model, &fx.pre, &fx.train, Some(&fx.mu1), &TrainConfig::default(), 5).unwrap();
    assert_eq!(fx.pre.fingerprint(), before);
    assert_ne!(model.store.fingerprint(), start);
    assert!(trace.loss.final_loss < trace.loss.initial);
    assert_eq!(trace.components.len(), TrainConfig::default().epochs);
}

#[test]
fn trained_gates_differ_across_users() {
    let fx = fixture();
    let mut model = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 6).unwrap();
    finetune(&mut model, &fx.pre, &fx.train, Some(&fx.mu1), &TrainConfig::default(), 6).unwrap();
    let a = fx.train.iter().find(|s| !s.atc_seq.is_empty()).unwrap();
    let b = fx.train.iter().find(|s| s.user != a.user && s.atc_seq != a.atc_seq).unwrap();
    let g = model.predict(&fx.pre, &[a.clone(), b.clone()]).unwrap().gate_mean;
    assert_ne!(g[0], g[1]);
}

#[test]
fn finetune_refuses_unusable_inputs() {
    let fx = fixture();
    let mut model = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 1).unwrap();
    let cfg = TrainConfig::default();

    let err = finetune(&mut model, &fx.pre, &fx.train, None, &cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let mut thawed = fx.pre.clone();
    let id = thawed.store.ids().next().unwrap();
    thawed.store.get_mut(id).trainable = true;
    let err = finetune(&mut model, &thawed, &fx.train, Some(&fx.mu1), &cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let mut other = fx.pre.clone();
    other.store.get_mut(id).value = Tensor::zeros(other.store.value(id).shape());
    let err = finetune(&mut model, &other, &fx.train, Some(&fx.mu1), &cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let err = finetune(&mut model, &fx.pre, &fx.train, Some(&fx.mu1[..10]), &cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let fx = fixture();
    let model = CmdcmModel::new(&fx.pre, CmdcmConfig::default(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pre_path, tower_path) = (dir.path().join("pre.json"), dir.path().join("tower.json"));
    fx.pre.save(&pre_path).unwrap();
    model.save(&tower_path).unwrap();
    let pre = PretrainedModel::load(&pre_path).unwrap();
    let tower = CmdcmModel::load(&tower_path).unwrap();
    assert_eq!(pre.fingerprint(), fx.pre.fingerprint());
    assert!(pre.is_frozen());
    assert_eq!(
        tower.predict(&pre, &fx.train).unwrap(),
        model.predict(&fx.pre, &fx.train).unwrap()
    );
    // a tower checkpoint is not a pretrained checkpoint
    assert!(PretrainedModel::load(&tower_path).is_err());
}
