//! Outcome imputation `μ(x, A)`, propensities, and the doubly robust
//! estimate of the effect of add-to-cart on delayed conversion.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce, bce_node, Activation, Adagrad, Mlp, NodeId, ParamStore, Tape};
use crate::data::{EncodedSample, FeatureEncoder};
use crate::error::{Error, Result};
use crate::pretrain::{column_of, dense_matrix, IdEmbeddings, PretrainedModel};
use crate::train::{epoch_batches, rng_for, LossTrace, TrainConfig};

pub const IMPUTATION_SPACE: u16 = 3;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Propensities are clipped into `[clip, 1 - clip]`.
    pub propensity_clip: f64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 8],
            embed_dim: 8,
            propensity_clip: 0.05,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::config("imputation widths must be positive"));
        }
        if !(self.propensity_clip > 0.0 && self.propensity_clip < 0.5) {
            return Err(Error::config(format!(
                "propensity_clip {} not in (0, 0.5)",
                self.propensity_clip
            )));
        }
        Ok(())
    }
}

/// `μ(x, A)`: an MLP over `ids ∥ x ∥ discount ∥ A` predicting `y_delay`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationModel {
    pub store: ParamStore,
    pub embeddings: IdEmbeddings,
    pub mlp: Mlp,
    pub dense_dim: usize,
}

impl ImputationModel {
    pub fn new(encoder: &FeatureEncoder, cfg: &CausalConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "imputation-init");
        let mut store = ParamStore::with_space(IMPUTATION_SPACE);
        let embeddings = IdEmbeddings::new(&mut store, encoder, cfg.embed_dim, &mut rng);
        let width = embeddings.width() + encoder.dense_dim + 2;
        let mlp = Mlp::new(
            &mut store,
            "mu",
            width,
            &cfg.hidden,
            Activation::Relu,
            1,
            Activation::Sigmoid,
            &mut rng,
        );
        Ok(Self {
            store,
            embeddings,
            mlp,
            dense_dim: encoder.dense_dim,
        })
    }

    /// `μ` on the tape with treatment `a` (observed `A` when `None`).
    pub fn forward_tape(&self, tape: &mut Tape, batch: &[&EncodedSample], a: Option<f64>) -> Result<NodeId> {
        let emb = self.embeddings.forward(tape, &self.store, batch);
        let x = tape.constant(dense_matrix(batch, self.dense_dim));
        let disc = tape.constant(column_of(batch, |s| s.discount));
        let treat = tape.constant(column_of(batch, |s| a.unwrap_or(s.atc)));
        let input = tape.concat(&[emb, x, disc, treat]);
        Ok(self.mlp.forward(tape, &self.store, input)?.output())
    }

    pub fn predict(&self, samples: &[EncodedSample], a: Option<f64>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch: Vec<&EncodedSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.forward_tape(&mut tape, &batch, a)?;
            out.extend_from_slice(tape.value(p).values());
        }
        Ok(out)
    }

    /// `(μ(x,0), μ(x,1))` per sample.
    pub fn mu(&self, samples: &[EncodedSample]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.predict(samples, Some(0.0))?, self.predict(samples, Some(1.0))?))
    }

    /// Regularizer targets `⟦μ(x,1)⟧` for a batch, placed behind a stop-gradient.
    pub fn cm_target_node(&self, tape: &mut Tape, batch: &[&EncodedSample]) -> Result<NodeId> {
        let mu1 = self.forward_tape(tape, batch, Some(1.0))?;
        Ok(tape.stop_gradient(mu1))
    }

    /// Mean BCE of `μ(x, A_observed)` against `y_delay`.
    pub fn bce(&self, samples: &[EncodedSample]) -> Result<f64> {
        let p = self.predict(samples, None)?;
        Ok(p.iter().zip(samples).map(|(&p, s)| bce(p, s.y_delay)).sum::<f64>() / samples.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save("imputation", self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load("imputation", path)
    }
}

/// `μ(x,1)` with the treatment input forced to 1, whatever the observed `A`.
pub fn cm_targets(model: &ImputationModel, samples: &[EncodedSample]) -> Result<Vec<f64>> {
    model.predict(samples, Some(1.0))
}

pub fn fit_imputation(
    train: &[EncodedSample],
    encoder: &FeatureEncoder,
    cfg: &CausalConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ImputationModel, LossTrace)> {
    if train.is_empty() {
        return Err(Error::data("imputation model needs training samples"));
    }
    let treated = train.iter().filter(|s| s.atc == 1.0).count();
    if treated == 0 || treated == train.len() {
        return Err(Error::data("no treatment variation"));
    }
    train_cfg.validate()?;
    let mut model = ImputationModel::new(encoder, cfg, seed)?;
    let mut opt = Adagrad::new(train_cfg.lr, train_cfg.adagrad_eps);
    let mut order = rng_for(seed, "imputation-order");
    let mut trace = LossTrace {
        initial: model.bce(train)?,
        ..Default::default()
    };
    for epoch in 0..train_cfg.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(train.len(), train_cfg.batch_size, &mut order) {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let p = model.forward_tape(&mut tape, &batch, None)?;
            let loss = bce_node(&mut tape, p, &column_of(&batch, |s| s.y_delay));
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("imputation loss became {value} in epoch {epoch}")));
            }
            sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &grads);
        }
        trace.epochs.push(sum / train.len() as f64);
    }
    trace.final_loss = model.bce(train)?;
    trace.steps = opt.steps();
    Ok((model, trace))
}

/// Where propensity scores come from.
#[derive(Debug, Clone, Copy)]
pub enum PropensitySource<'a> {
    /// The frozen pretrained ATC head.
    PretrainedAtc(&'a PretrainedModel),
    /// Externally known scores, one per sample (the generator's truth).
    Given(&'a [f64]),
    Constant(f64),
}

pub fn clip_propensity(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

pub fn propensities(source: PropensitySource<'_>, samples: &[EncodedSample], eps: f64) -> Result<Vec<f64>> {
    let raw = match source {
        PropensitySource::PretrainedAtc(m) => m.predict(samples)?.1,
        PropensitySource::Given(p) => {
            if p.len() != samples.len() {
                return Err(Error::Shape(format!("{} propensities for {} samples", p.len(), samples.len())));
            }
            p.to_vec()
        }
        PropensitySource::Constant(c) => vec![c; samples.len()],
    };
    Ok(raw.into_iter().map(|p| clip_propensity(p, eps)).collect())
}

/// Inputs of one doubly robust term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrRow {
    pub a: f64,
    pub y: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub p_a: f64,
}

/// `(μ1 − μ0) + A(Y − μ1)/p_a − (1 − A)(Y − μ0)/(1 − p_a)`.
pub fn dr_ice(r: &DrRow) -> f64 {
    (r.mu1 - r.mu0) + r.a * (r.y - r.mu1) / r.p_a - (1.0 - r.a) * (r.y - r.mu0) / (1.0 - r.p_a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrEstimate {
    pub ice: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over √n.
    pub std_error: f64,
}

pub fn dr_ate(rows: &[DrRow]) -> Result<DrEstimate> {
    if rows.is_empty() {
        return Err(Error::data("DR estimate over an empty sample set"));
    }
    let ice: Vec<f64> = rows.iter().map(dr_ice).collect();
    let (mean, std_error) = mean_and_se(&ice);
    Ok(DrEstimate { ice, mean, std_error })
}

/// Mean and its standard error (n − 1 variance; zero error for one value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Difference in means of `y` between treated and untreated rows, with the
/// standard error of that difference.
pub fn naive_difference(rows: &[DrRow]) -> Result<(f64, f64)> {
    let (t, c): (Vec<&DrRow>, Vec<&DrRow>) = rows.iter().partition(|r| r.a == 1.0);
    if t.is_empty() || c.is_empty() {
        return Err(Error::data("no treatment variation"));
    }
    let (mt, st) = mean_and_se(&t.iter().map(|r| r.y).collect::<Vec<_>>());
    let (mc, sc) = mean_and_se(&c.iter().map(|r| r.y).collect::<Vec<_>>());
    Ok((mt - mc, (st * st + sc * sc).sqrt()))
}

/// Rows for [`dr_ate`] from samples, `μ` values and clipped propensities.
pub fn dr_rows(samples: &[EncodedSample], mu0: &[f64], mu1: &[f64], p_a: &[f64]) -> Result<Vec<DrRow>> {
    let n = samples.len();
    if mu0.len() != n || mu1.len() != n || p_a.len() != n {
        return Err(Error::Shape("DR inputs differ in length".into()));
    }
    Ok((0..n)
        .map(|i| DrRow {
            a: samples[i].atc,
            y: samples[i].y_delay,
            mu0: mu0[i],
            mu1: mu1[i],
            p_a: p_a[i],
        })
        .collect())
}

/// Per-sample diagnostic table: `A,Y,mu0,mu1,p_a,tau`.
pub fn write_dr_diagnostics(rows: &[DrRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["A", "Y", "mu0", "mu1", "p_a", "tau"])?;
    for r in rows {
        w.write_record([
            r.a.to_string(),
            r.y.to_string(),
            r.mu0.to_string(),
            r.mu1.to_string(),
            r.p_a.to_string(),
            dr_ice(r).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
