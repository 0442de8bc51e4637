//! Delay tower on top of the frozen pretrained towers.
//!
//! For hidden layer `i` of the pretrained towers the delay tower sees
//! `(g_cvr^i ⊗ ⟦h_cvr^i⟧) ∥ (g_atc^i ⊗ ⟦h_atc^i⟧) ∥ extras`, where the gates are
//! computed from `E_user ∥ V_atc ∥ V_pay`. At the first layer `extras` is
//! `⟦h_cvr^L⟧ ∥ E_price ∥ E_discount ∥ V_atc ∥ V_pay`; deeper layers get the
//! previous delay activation. The final prediction is
//! `p_all = ⟦p_ori_cvr⟧ + p_delay`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce, bce_node, Activation, Adagrad, Dense, Mlp, NodeId, ParamId, ParamStore, Tape, Tensor, PROB_EPS};
use crate::data::{EncodedSample, DISCOUNT_BUCKETS, PRICE_BUCKETS};
use crate::error::{Error, Result};
use crate::pretrain::{column_of, PretrainedModel};
use crate::train::{epoch_batches, rng_for, LossTrace, TrainConfig};

pub const CMDCM_SPACE: u16 = 2;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Learned gates from the user's embedding and behaviour pools.
    Personalized,
    /// Every gate fixed at 1.
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmdcmConfig {
    /// Weight of the all-conversion loss.
    pub lambda: f64,
    /// Weight of the counterfactual regularizer.
    pub lambda_c: f64,
    /// Restrict the regularizer to samples with `A = 1`.
    pub cm_on_atc_only: bool,
    pub gates: GateMode,
    /// Feed the pretrained hidden layers into the delay tower. When off the
    /// tower sees only the first-layer extras.
    pub transfer: bool,
    pub embed_dim: usize,
}

impl Default for CmdcmConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_c: 0.1,
            cm_on_atc_only: false,
            gates: GateMode::Personalized,
            transfer: true,
            embed_dim: 8,
        }
    }
}

impl CmdcmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("lambda_c", self.lambda_c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        Ok(())
    }
}

/// One gate network per transferred layer and tower.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatePair {
    pub cvr: Mlp,
    pub atc: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmdcmModel {
    pub cfg: CmdcmConfig,
    pub store: ParamStore,
    pub user_emb: ParamId,
    pub atc_pool: ParamId,
    pub pay_pool: ParamId,
    pub price_emb: ParamId,
    pub discount_emb: ParamId,
    pub delay: Vec<Dense>,
    pub gates: Vec<GatePair>,
    /// Fingerprint of the pretrained model this tower was built against.
    pub pretrained_fingerprint: String,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct DelayForward {
    pub p_delay: NodeId,
    pub p_ori_cvr: NodeId,
    pub p_all_raw: NodeId,
    pub gates_cvr: Vec<NodeId>,
    pub gates_atc: Vec<NodeId>,
}

/// Loss value and its parts: `total = delay + λ·all + λ_c·cm`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub delay: f64,
    pub all: f64,
    pub cm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub delay: NodeId,
    pub all: NodeId,
    pub cm: Option<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub p_delay: Vec<f64>,
    pub p_ori_cvr: Vec<f64>,
    pub p_all_raw: Vec<f64>,
    /// Per sample, the mean over all gate values (empty with constant gates).
    pub gate_mean: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub loss: LossTrace,
    pub components: Vec<LossBreakdown>,
}

/// Scalar version of the loss for one sample; `mu1 = None` drops the regularizer.
pub fn loss_value(p_delay: f64, y_delay: f64, p_all_raw: f64, y_all: f64, mu1: Option<f64>, cfg: &CmdcmConfig) -> LossBreakdown {
    let delay = bce(p_delay, y_delay);
    let all = bce(p_all_raw.clamp(PROB_EPS, 1.0 - PROB_EPS), y_all);
    let cm = mu1.map_or(0.0, |m| (p_delay - m).powi(2));
    LossBreakdown {
        total: delay + cfg.lambda * all + cfg.lambda_c * cm,
        delay,
        all,
        cm,
    }
}

impl CmdcmModel {
    pub fn new(pre: &PretrainedModel, cfg: CmdcmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "cmdcm-init");
        let mut store = ParamStore::with_space(CMDCM_SPACE);
        let enc = &pre.encoder;
        let d = cfg.embed_dim;
        let user_emb = store.add_glorot("gate.user", enc.users.rows(), d, &mut rng);
        let atc_pool = store.add_glorot("pool.atc", enc.items.rows(), d, &mut rng);
        let pay_pool = store.add_glorot("pool.pay", enc.items.rows(), d, &mut rng);
        let price_emb = store.add_glorot("exp.price", PRICE_BUCKETS, d, &mut rng);
        let discount_emb = store.add_glorot("exp.discount", DISCOUNT_BUCKETS, d, &mut rng);

        let widths = pre.cvr.hidden_widths();
        let atc_widths = pre.atc.hidden_widths();
        let last = *widths.last().expect("pretrained towers have hidden layers");
        let extras = last + 4 * d;
        let mut delay = Vec::with_capacity(widths.len() + 1);
        let mut prev = extras;
        for (i, &w) in widths.iter().enumerate() {
            let transferred = if cfg.transfer { widths[i] + atc_widths[i] } else { 0 };
            delay.push(Dense::new(&mut store, &format!("delay.{i}"), transferred + prev, w, &mut rng));
            prev = w;
        }
        delay.push(Dense::new(&mut store, "delay.out", prev, 1, &mut rng));

        let mut gates = Vec::new();
        if cfg.transfer && cfg.gates == GateMode::Personalized {
            for (i, (&wc, &wa)) in widths.iter().zip(&atc_widths).enumerate() {
                let mut gate = |tower: &str, w: usize| {
                    Mlp::new(&mut store, &format!("gate.{tower}.{i}"), 3 * d, &[w], Activation::Relu, w, Activation::Sigmoid, &mut rng)
                };
                gates.push(GatePair {
                    cvr: gate("cvr", wc),
                    atc: gate("atc", wa),
                });
            }
        }
        Ok(Self {
            cfg,
            store,
            user_emb,
            atc_pool,
            pay_pool,
            price_emb,
            discount_emb,
            delay,
            gates,
            pretrained_fingerprint: pre.fingerprint(),
        })
    }

    /// Mean of the embeddings of `seqs[r]` for each row; zero rows for empty lists.
    pub fn pool(&self, tape: &mut Tape, table: ParamId, seqs: Vec<Vec<usize>>) -> NodeId {
        let t = tape.param(&self.store, table);
        tape.mean_pool(t, seqs)
    }

    /// Gate vector for transferred layer `layer` from `E_user ∥ V_atc ∥ V_pay`.
    pub fn gate_forward(&self, tape: &mut Tape, gate: &Mlp, layer: usize, gate_input: NodeId) -> Result<NodeId> {
        let out = gate
            .forward(tape, &self.store, gate_input)
            .map_err(|e| Error::config(format!("gate for layer {layer}: {e}")))?;
        Ok(out.output())
    }

    pub fn forward_tape(&self, tape: &mut Tape, pre: &PretrainedModel, batch: &[&EncodedSample]) -> Result<DelayForward> {
        let towers = pre.forward_tape(tape, batch)?;
        let h_cvr: Vec<NodeId> = towers.cvr.hidden().iter().map(|&h| tape.stop_gradient(h)).collect();
        let h_atc: Vec<NodeId> = towers.atc.hidden().iter().map(|&h| tape.stop_gradient(h)).collect();
        let p_ori_cvr = tape.stop_gradient(towers.cvr.output());
        if h_cvr.len() + 1 != self.delay.len() {
            return Err(Error::config(format!(
                "delay tower has {} layers for {} pretrained hidden layers",
                self.delay.len() - 1,
                h_cvr.len()
            )));
        }

        let v_atc = self.pool(tape, self.atc_pool, batch.iter().map(|s| s.atc_seq.clone()).collect());
        let v_pay = self.pool(tape, self.pay_pool, batch.iter().map(|s| s.pay_seq.clone()).collect());
        let price_t = tape.param(&self.store, self.price_emb);
        let e_price = tape.gather(price_t, batch.iter().map(|s| s.price_bucket).collect());
        let disc_t = tape.param(&self.store, self.discount_emb);
        let e_disc = tape.gather(disc_t, batch.iter().map(|s| s.discount_bucket).collect());
        let last = *h_cvr.last().expect("checked above");
        let mut extras = tape.concat(&[last, e_price, e_disc, v_atc, v_pay]);

        let gate_input = if self.gates.is_empty() {
            None
        } else {
            let user_t = tape.param(&self.store, self.user_emb);
            let e_user = tape.gather(user_t, batch.iter().map(|s| s.user).collect());
            Some(tape.concat(&[e_user, v_atc, v_pay]))
        };

        let mut gates_cvr = Vec::new();
        let mut gates_atc = Vec::new();
        for (i, layer) in self.delay[..h_cvr.len()].iter().enumerate() {
            let input = if self.cfg.transfer {
                let (gc, ga) = match gate_input {
                    Some(gi) => {
                        let pair = &self.gates[i];
                        let gc = self.gate_forward(tape, &pair.cvr, i, gi)?;
                        let ga = self.gate_forward(tape, &pair.atc, i, gi)?;
                        gates_cvr.push(gc);
                        gates_atc.push(ga);
                        (tape.mul(gc, h_cvr[i]), tape.mul(ga, h_atc[i]))
                    }
                    None => (h_cvr[i], h_atc[i]),
                };
                tape.concat(&[gc, ga, extras])
            } else {
                extras
            };
            let width = tape.value(input).cols();
            if width != layer.fan_in {
                return Err(Error::config(format!(
                    "delay layer {i}: input width {width} does not match expected {}",
                    layer.fan_in
                )));
            }
            let z = layer.forward(tape, &self.store, input);
            extras = tape.relu(z);
        }
        let out = self.delay.last().expect("output layer").forward(tape, &self.store, extras);
        let p_delay = tape.sigmoid(out);
        let p_all_raw = tape.add(p_ori_cvr, p_delay);
        Ok(DelayForward {
            p_delay,
            p_ori_cvr,
            p_all_raw,
            gates_cvr,
            gates_atc,
        })
    }

    /// Assembles the loss on the tape. `mu1` holds the regularizer targets
    /// for the batch and is required when `λ_c > 0`.
    pub fn loss_nodes(
        &self,
        tape: &mut Tape,
        fwd: &DelayForward,
        batch: &[&EncodedSample],
        mu1: Option<NodeId>,
    ) -> Result<LossNodes> {
        let delay = bce_node(tape, fwd.p_delay, &column_of(batch, |s| s.y_delay));
        let all = bce_node(tape, fwd.p_all_raw, &column_of(batch, |s| s.y_all));
        let weighted_all = tape.scale(all, self.cfg.lambda);
        let mut total = tape.add(delay, weighted_all);
        let mut cm = None;
        if self.cfg.lambda_c > 0.0 {
            let target = mu1.ok_or_else(|| Error::config("lambda_c > 0 needs imputation targets"))?;
            let target = tape.stop_gradient(target);
            let diff = tape.sub(fwd.p_delay, target);
            let sq = tape.square(diff);
            let term = if self.cfg.cm_on_atc_only {
                let treated = batch.iter().filter(|s| s.atc == 1.0).count();
                let mask = tape.constant(column_of(batch, |s| s.atc));
                let masked = tape.mul(sq, mask);
                let sum = tape.sum(masked);
                tape.scale(sum, if treated == 0 { 0.0 } else { 1.0 / treated as f64 })
            } else {
                tape.mean(sq)
            };
            let weighted = tape.scale(term, self.cfg.lambda_c);
            total = tape.add(total, weighted);
            cm = Some(term);
        }
        Ok(LossNodes { total, delay, all, cm })
    }

    pub fn breakdown(tape: &Tape, nodes: &LossNodes) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(nodes.total).item(),
            delay: tape.value(nodes.delay).item(),
            all: tape.value(nodes.all).item(),
            cm: nodes.cm.map_or(0.0, |c| tape.value(c).item()),
        }
    }

    pub fn needs_targets(&self) -> bool {
        self.cfg.lambda_c > 0.0
    }

    pub fn predict(&self, pre: &PretrainedModel, samples: &[EncodedSample]) -> Result<Predictions> {
        let mut out = Predictions::default();
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch: Vec<&EncodedSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let f = self.forward_tape(&mut tape, pre, &batch)?;
            out.p_delay.extend_from_slice(tape.value(f.p_delay).values());
            out.p_ori_cvr.extend_from_slice(tape.value(f.p_ori_cvr).values());
            out.p_all_raw.extend_from_slice(tape.value(f.p_all_raw).values());
            if !f.gates_cvr.is_empty() {
                let gate_nodes: Vec<NodeId> = f.gates_cvr.iter().chain(&f.gates_atc).copied().collect();
                for r in 0..batch.len() {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for &g in &gate_nodes {
                        let row = tape.value(g).row_slice(r);
                        sum += row.iter().sum::<f64>();
                        n += row.len();
                    }
                    out.gate_mean.push(sum / n as f64);
                }
            }
        }
        Ok(out)
    }

    /// Mean loss over `samples` in evaluation chunks.
    pub fn loss(&self, pre: &PretrainedModel, samples: &[EncodedSample], mu1: Option<&[f64]>) -> Result<LossBreakdown> {
        let mut acc = LossBreakdown::default();
        for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
            let batch: Vec<&EncodedSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let f = self.forward_tape(&mut tape, pre, &batch)?;
            let targets = mu1.map(|m| tape.constant(Tensor::column(m[c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len()].to_vec())));
            let nodes = self.loss_nodes(&mut tape, &f, &batch, targets)?;
            let b = Self::breakdown(&tape, &nodes);
            let w = chunk.len() as f64;
            acc.total += b.total * w;
            acc.delay += b.delay * w;
            acc.all += b.all * w;
            acc.cm += b.cm * w;
        }
        let n = samples.len().max(1) as f64;
        Ok(LossBreakdown {
            total: acc.total / n,
            delay: acc.delay / n,
            all: acc.all / n,
            cm: acc.cm / n,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save("cmdcm", self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load("cmdcm", path)
    }
}

/// Minibatch Adagrad on the delay tower. `mu1` (one target per training
/// sample) must be present exactly when the model uses the regularizer.
pub fn finetune(
    model: &mut CmdcmModel,
    pre: &PretrainedModel,
    train: &[EncodedSample],
    mu1: Option<&[f64]>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneTrace> {
    if train.is_empty() {
        return Err(Error::data("fine-tuning needs at least one pre-promotion sample"));
    }
    if !pre.is_frozen() {
        return Err(Error::config("pretrained model must be frozen before fine-tuning"));
    }
    if pre.fingerprint() != model.pretrained_fingerprint {
        return Err(Error::config("delay tower was built against a different pretrained model"));
    }
    if let Some(m) = mu1 {
        if m.len() != train.len() {
            return Err(Error::Shape(format!("{} targets for {} samples", m.len(), train.len())));
        }
    }
    let mu1 = if model.needs_targets() {
        Some(mu1.ok_or_else(|| Error::config("lambda_c > 0 needs imputation targets"))?)
    } else {
        None
    };
    cfg.validate()?;
    let mut trace = FinetuneTrace::default();
    trace.loss.initial = model.loss(pre, train, mu1)?.total;
    let mut opt = Adagrad::new(cfg.lr, cfg.adagrad_eps);
    let mut order = rng_for(seed, "finetune-order");
    for epoch in 0..cfg.epochs {
        let mut acc = LossBreakdown::default();
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut order) {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let f = model.forward_tape(&mut tape, pre, &batch)?;
            let targets = mu1.map(|m| tape.constant(Tensor::column(idx.iter().map(|&i| m[i]).collect())));
            let nodes = model.loss_nodes(&mut tape, &f, &batch, targets)?;
            let b = CmdcmModel::breakdown(&tape, &nodes);
            if !b.total.is_finite() {
                return Err(Error::Training(format!("fine-tuning loss became {} in epoch {epoch}", b.total)));
            }
            let w = batch.len() as f64;
            acc.total += b.total * w;
            acc.delay += b.delay * w;
            acc.all += b.all * w;
            acc.cm += b.cm * w;
            let grads = tape.backward(nodes.total)?;
            opt.step(&mut model.store, &grads);
        }
        let n = train.len() as f64;
        let mean = LossBreakdown {
            total: acc.total / n,
            delay: acc.delay / n,
            all: acc.all / n,
            cm: acc.cm / n,
        };
        log::info!("fine-tune epoch {epoch}: loss {:.5}", mean.total);
        trace.loss.epochs.push(mean.total);
        trace.components.push(mean);
    }
    trace.loss.final_loss = model.loss(pre, train, mu1)?.total;
    trace.loss.steps = opt.steps();
    Ok(trace)
}

/// Per-sample diagnostics: `p_ori_cvr,p_delay,p_all_raw,gate_mean`.
pub fn write_diagnostics(pred: &Predictions, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["p_ori_cvr", "p_delay", "p_all_raw", "gate_mean"])?;
    for i in 0..pred.p_delay.len() {
        w.write_record([
            pred.p_ori_cvr[i].to_string(),
            pred.p_delay[i].to_string(),
            pred.p_all_raw[i].to_string(),
            pred.gate_mean.get(i).map(|g| g.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_loss() {
        let cfg = CmdcmConfig::default();
        let b = loss_value(0.5, 1.0, 0.8, 1.0, Some(0.4), &cfg);
        let expected = std::f64::consts::LN_2 - 0.8f64.ln() + 0.1 * 0.01;
        assert!((b.total - expected).abs() < 1e-12);
        assert!((b.total - 0.9173).abs() < 1e-4);

        let bare = CmdcmConfig {
            lambda: 0.0,
            lambda_c: 0.0,
            ..cfg
        };
        assert_eq!(loss_value(0.3, 0.0, 0.9, 1.0, Some(0.1), &bare).total, bce(0.3, 0.0));
        assert_eq!(loss_value(0.4, 1.0, 0.9, 1.0, Some(0.4), &cfg).cm, 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        for cfg in [
            CmdcmConfig {
                lambda: -1.0,
                ..Default::default()
            },
            CmdcmConfig {
                lambda_c: -0.1,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
