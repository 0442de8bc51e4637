//! Shared fixtures for the benchmarks.

use cmdcm_core::data::{EncodedSample, FeatureEncoder};
use cmdcm_core::pretrain::{ArchConfig, PretrainedModel};
use cmdcm_core::synth::{generate_dataset, sample_world, Mode, WorldConfig};
use cmdcm_core::train::TrainConfig;
use cmdcm_core::{CmdcmConfig, CmdcmModel};

pub struct Fixture {
    pub pre: PretrainedModel,
    pub tower: CmdcmModel,
    pub samples: Vec<EncodedSample>,
    pub mu1: Vec<f64>,
}

/// Desk-sized models over `n` pre-promotion samples of the default world.
pub fn fixture(n: usize) -> Fixture {
    let world = sample_world(2024, &WorldConfig::default()).expect("default world");
    let daily: Vec<_> = generate_dataset(&world, n, Mode::Daily, 1)
        .expect("daily data")
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let pre = generate_dataset(&world, n, Mode::Prepromo, 2).expect("pre-promotion data");
    let mu1 = pre.iter().map(|s| s.truth.mu1_true).collect();
    let pre: Vec<_> = pre.into_iter().map(|s| s.sample).collect();
    let encoder = FeatureEncoder::fit(daily.iter().chain(&pre));
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (model, _) = cmdcm_core::pretrain::pretrain_fit(&encoder.encode_all(&daily), &encoder, &ArchConfig::default(), &cfg, 3)
        .expect("pretraining");
    let tower = CmdcmModel::new(&model, CmdcmConfig::default(), 4).expect("tower");
    Fixture {
        samples: encoder.encode_all(&pre),
        pre: model,
        tower,
        mu1,
    }
}
