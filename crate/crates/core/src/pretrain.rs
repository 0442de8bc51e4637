//! Daily-data multi-task model: shared embeddings feeding separate CVR and
//! ATC towers. After fitting it is frozen and only read.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_node, Activation, Adagrad, Mlp, MlpOutput, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::data::{EncodedSample, FeatureEncoder, PRICE_BUCKETS};
use crate::error::{Error, Result};
use crate::train::{epoch_batches, rng_for, LossTrace, TrainConfig};

pub const PRETRAIN_SPACE: u16 = 1;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16, 8],
            embed_dim: 8,
        }
    }
}

impl ArchConfig {
    pub fn full() -> Self {
        Self {
            hidden: vec![512, 256, 128],
            embed_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(format!("hidden widths {:?} must be nonempty and positive", self.hidden)));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        Ok(())
    }
}

/// `[batch, dense_dim]` matrix of the samples' numeric features.
pub fn dense_matrix(batch: &[&EncodedSample], dim: usize) -> Tensor {
    let mut values = Vec::with_capacity(batch.len() * dim);
    for s in batch {
        values.extend_from_slice(&s.dense[..dim]);
    }
    Tensor::matrix(batch.len(), dim, values)
}

pub fn column_of(batch: &[&EncodedSample], f: impl Fn(&EncodedSample) -> f64) -> Tensor {
    Tensor::column(batch.iter().map(|s| f(s)).collect())
}

/// Embedding tables for the id features plus the price bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdEmbeddings {
    pub user: ParamId,
    pub item: ParamId,
    pub category: ParamId,
    pub price: ParamId,
    pub dim: usize,
}

impl IdEmbeddings {
    pub(crate) fn new(store: &mut ParamStore, encoder: &FeatureEncoder, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            user: store.add_glorot("emb.user", encoder.users.rows(), dim, rng),
            item: store.add_glorot("emb.item", encoder.items.rows(), dim, rng),
            category: store.add_glorot("emb.category", encoder.categories.rows(), dim, rng),
            price: store.add_glorot("emb.price", PRICE_BUCKETS, dim, rng),
            dim,
        }
    }

    pub(crate) fn width(&self) -> usize {
        4 * self.dim
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &[&EncodedSample]) -> NodeId {
        let lookups = [
            (self.user, batch.iter().map(|s| s.user).collect::<Vec<_>>()),
            (self.item, batch.iter().map(|s| s.item).collect()),
            (self.category, batch.iter().map(|s| s.category).collect()),
            (self.price, batch.iter().map(|s| s.price_bucket).collect()),
        ];
        let parts: Vec<NodeId> = lookups
            .into_iter()
            .map(|(table, rows)| {
                let t = tape.param(store, table);
                tape.gather(t, rows)
            })
            .collect();
        tape.concat(&parts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainedModel {
    pub arch: ArchConfig,
    pub encoder: FeatureEncoder,
    pub store: ParamStore,
    pub embeddings: IdEmbeddings,
    pub cvr: Mlp,
    pub atc: Mlp,
}

/// Tape handles for both towers: hidden activations `h^1..h^L` and output.
#[derive(Debug, Clone)]
pub struct TowerNodes {
    pub cvr: MlpOutput,
    pub atc: MlpOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedForwardResult {
    pub p_ori_cvr: f64,
    pub p_ori_atc: f64,
    pub h_cvr: Vec<Vec<f64>>,
    pub h_atc: Vec<Vec<f64>>,
}

impl PretrainedModel {
    pub fn new(encoder: FeatureEncoder, arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::with_space(PRETRAIN_SPACE);
        let embeddings = IdEmbeddings::new(&mut store, &encoder, arch.embed_dim, rng);
        let input = embeddings.width() + encoder.dense_dim;
        let mut tower = |name: &str, rng: &mut _| {
            Mlp::new(&mut store, name, input, &arch.hidden, Activation::Relu, 1, Activation::Sigmoid, rng)
        };
        let cvr = tower("cvr", rng);
        let atc = tower("atc", rng);
        Ok(Self {
            arch,
            encoder,
            store,
            embeddings,
            cvr,
            atc,
        })
    }

    pub fn input_width(&self) -> usize {
        self.embeddings.width() + self.encoder.dense_dim
    }

    /// Shared input `E_user ∥ E_item ∥ E_cat ∥ E_price ∥ x`.
    pub fn input(&self, tape: &mut Tape, batch: &[&EncodedSample]) -> NodeId {
        let emb = self.embeddings.forward(tape, &self.store, batch);
        if self.encoder.dense_dim == 0 {
            return emb;
        }
        let x = tape.constant(dense_matrix(batch, self.encoder.dense_dim));
        tape.concat(&[emb, x])
    }

    pub fn forward_tape(&self, tape: &mut Tape, batch: &[&EncodedSample]) -> Result<TowerNodes> {
        let input = self.input(tape, batch);
        Ok(TowerNodes {
            cvr: self.cvr.forward(tape, &self.store, input)?,
            atc: self.atc.forward(tape, &self.store, input)?,
        })
    }

    pub fn forward(&self, sample: &EncodedSample) -> Result<PretrainedForwardResult> {
        let mut tape = Tape::new();
        let nodes = self.forward_tape(&mut tape, &[sample])?;
        let grab = |out: &MlpOutput| -> Vec<Vec<f64>> {
            out.hidden().iter().map(|&h| tape.value(h).values().to_vec()).collect()
        };
        Ok(PretrainedForwardResult {
            p_ori_cvr: tape.value(nodes.cvr.output()).item(),
            p_ori_atc: tape.value(nodes.atc.output()).item(),
            h_cvr: grab(&nodes.cvr),
            h_atc: grab(&nodes.atc),
        })
    }

    /// `(p_ori_cvr, p_ori_atc)` for every sample.
    pub fn predict(&self, samples: &[EncodedSample]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut cvr = Vec::with_capacity(samples.len());
        let mut atc = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch: Vec<&EncodedSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let nodes = self.forward_tape(&mut tape, &batch)?;
            cvr.extend_from_slice(tape.value(nodes.cvr.output()).values());
            atc.extend_from_slice(tape.value(nodes.atc.output()).values());
        }
        Ok((cvr, atc))
    }

    fn loss_node(&self, tape: &mut Tape, batch: &[&EncodedSample]) -> Result<NodeId> {
        let nodes = self.forward_tape(tape, batch)?;
        let l_cvr = bce_node(tape, nodes.cvr.output(), &column_of(batch, |s| s.y_all));
        let l_atc = bce_node(tape, nodes.atc.output(), &column_of(batch, |s| s.atc));
        Ok(tape.add(l_cvr, l_atc))
    }

    /// Mean `bce(p_cvr, y) + bce(p_atc, A)` over `samples`.
    pub fn loss(&self, samples: &[EncodedSample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch: Vec<&EncodedSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let l = self.loss_node(&mut tape, &batch)?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn freeze(&mut self) {
        self.store.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| !p.trainable)
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save("pretrained", self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load("pretrained", path)
    }
}

/// Fits both towers on daily samples and returns the frozen model.
pub fn pretrain_fit(
    daily: &[EncodedSample],
    encoder: &FeatureEncoder,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(PretrainedModel, LossTrace)> {
    if daily.is_empty() {
        return Err(Error::data("pretraining needs at least one daily sample"));
    }
    cfg.validate()?;
    let mut init_rng = rng_for(seed, "pretrain-init");
    let mut model = PretrainedModel::new(encoder.clone(), arch.clone(), &mut init_rng)?;
    let mut opt = Adagrad::new(cfg.lr, cfg.adagrad_eps);
    let mut order_rng = rng_for(seed, "pretrain-order");
    let mut trace = LossTrace {
        initial: model.loss(daily)?,
        ..Default::default()
    };
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(daily.len(), cfg.batch_size, &mut order_rng) {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &daily[i]).collect();
            let mut tape = Tape::new();
            let loss = model.loss_node(&mut tape, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("pretraining loss became {value} in epoch {epoch}")));
            }
            sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &grads);
        }
        trace.epochs.push(sum / daily.len() as f64);
        log::info!("pretrain epoch {epoch}: loss {:.5}", trace.epochs[epoch]);
    }
    trace.final_loss = model.loss(daily)?;
    trace.steps = opt.steps();
    model.freeze();
    Ok((model, trace))
}

/// Baseline that reuses the pretrained towers: an unfrozen copy is
/// fine-tuned on pre-promotion samples whose delayed conversions count as
/// positives (`y_all`). Only the CVR loss is optimized.
pub fn finetune_relabeled(
    pre: &PretrainedModel,
    prepromo: &[EncodedSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(PretrainedModel, LossTrace)> {
    if prepromo.is_empty() {
        return Err(Error::data("fine-tuning needs at least one pre-promotion sample"));
    }
    cfg.validate()?;
    let mut model = pre.clone();
    model.store.set_trainable(true);
    let cvr_loss = |m: &PretrainedModel, tape: &mut Tape, batch: &[&EncodedSample]| -> Result<NodeId> {
        let input = m.input(tape, batch);
        let p = m.cvr.forward(tape, &m.store, input)?.output();
        Ok(bce_node(tape, p, &column_of(batch, |s| s.y_all)))
    };
    let full_loss = |m: &PretrainedModel| -> Result<f64> {
        let (p, _) = m.predict(prepromo)?;
        Ok(p.iter().zip(prepromo).map(|(&p, s)| crate::autodiff::bce(p, s.y_all)).sum::<f64>() / prepromo.len() as f64)
    };
    let mut trace = LossTrace {
        initial: full_loss(&model)?,
        ..Default::default()
    };
    let mut opt = Adagrad::new(cfg.lr, cfg.adagrad_eps);
    let mut order = rng_for(seed, "finetune-order");
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(prepromo.len(), cfg.batch_size, &mut order) {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &prepromo[i]).collect();
            let mut tape = Tape::new();
            let loss = cvr_loss(&model, &mut tape, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training(format!("relabel loss became {value} in epoch {epoch}")));
            }
            sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &grads);
        }
        trace.epochs.push(sum / prepromo.len() as f64);
    }
    trace.final_loss = full_loss(&model)?;
    trace.steps = opt.steps();
    model.freeze();
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(user: usize, item: usize) -> EncodedSample {
        EncodedSample {
            user,
            item,
            category: 1,
            price_bucket: 3,
            discount_bucket: 2,
            discount: 0.2,
            dense: vec![0.5, -1.0],
            atc_seq: vec![],
            pay_seq: vec![],
            atc: 1.0,
            y_all: 0.0,
            y_delay: 0.0,
        }
    }

    fn encoder() -> FeatureEncoder {
        let mut enc = FeatureEncoder {
            users: Default::default(),
            items: Default::default(),
            categories: Default::default(),
            price_edges: vec![0.0; PRICE_BUCKETS - 1],
            dense_dim: 2,
        };
        for i in 0..4 {
            enc.users.insert(&format!("u{i}"));
            enc.items.insert(&format!("i{i}"));
        }
        enc.categories.insert("c");
        enc
    }

    fn model() -> PretrainedModel {
        let arch = ArchConfig {
            hidden: vec![4, 3],
            embed_dim: 2,
        };
        PretrainedModel::new(encoder(), arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_model_predicts_half() {
        let mut m = model();
        m.store.zero_all();
        let r = m.forward(&sample(1, 1)).unwrap();
        assert_eq!((r.p_ori_cvr, r.p_ori_atc), (0.5, 0.5));
        assert_eq!(r.h_cvr.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3]);
    }

    #[test]
    fn oov_row_gives_finite_output() {
        let r = model().forward(&sample(0, 0)).unwrap();
        assert!(r.p_ori_cvr.is_finite() && r.p_ori_cvr > 0.0 && r.p_ori_cvr < 1.0);
    }

    #[test]
    fn forward_is_pure() {
        let m = model();
        let before = m.fingerprint();
        let a = m.forward(&sample(2, 3)).unwrap();
        let b = m.forward(&sample(2, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, m.fingerprint());
    }

    #[test]
    fn user_embedding_feeds_both_towers() {
        let mut m = model();
        let s = sample(2, 1);
        let before = m.forward(&s).unwrap();
        let user = m.embeddings.user;
        let dim = m.embeddings.dim;
        for v in &mut m.store.get_mut(user).value.values_mut()[2 * dim..3 * dim] {
            *v += 0.7;
        }
        let after = m.forward(&s).unwrap();
        assert_ne!(before.p_ori_cvr, after.p_ori_cvr);
        assert_ne!(before.p_ori_atc, after.p_ori_atc);
    }

    #[test]
    fn zero_epochs_returns_frozen_init() {
        let data = vec![sample(1, 1), sample(2, 2)];
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let arch = ArchConfig {
            hidden: vec![4, 3],
            embed_dim: 2,
        };
        let (m, trace) = pretrain_fit(&data, &encoder(), &arch, &cfg, 5).unwrap();
        let fresh = PretrainedModel::new(encoder(), arch.clone(), &mut rng_for(5, "pretrain-init")).unwrap();
        assert_eq!(m.fingerprint(), fresh.fingerprint());
        assert!(m.is_frozen());
        assert_eq!(trace.steps, 0);
        assert!(pretrain_fit(&[], &encoder(), &arch, &cfg, 5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = PretrainedModel::load(&path).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(back.store, m.store);
        assert!(matches!(crate::checkpoint::load::<PretrainedModel>("cmdcm", &path), Err(Error::Config(_))));
    }
}
