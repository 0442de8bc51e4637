use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Fully connected layer `x · W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Stack of dense layers with one activation per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

/// Every layer's post-activation output, in order. The last entry is the
/// network output; the rest are the hidden representations.
#[derive(Debug, Clone)]
pub struct MlpOutput {
    pub layers: Vec<NodeId>,
}

impl MlpOutput {
    pub fn hidden(&self) -> &[NodeId] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output(&self) -> NodeId {
        *self.layers.last().expect("mlp has at least one layer")
    }
}

impl Mlp {
    /// `hidden` widths use `hidden_act`; a final `out_width` layer uses `out_act`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        hidden: &[usize],
        hidden_act: Activation,
        out_width: usize,
        out_act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut activations = Vec::with_capacity(hidden.len() + 1);
        let mut width = in_width;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.{i}"), width, h, rng));
            activations.push(hidden_act);
            width = h;
        }
        layers.push(Dense::new(store, &format!("{name}.out"), width, out_width, rng));
        activations.push(out_act);
        Self { layers, activations }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.fan_out)
            .collect()
    }

    /// Runs the stack, exposing every layer's activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: NodeId) -> Result<MlpOutput> {
        let mut x = input;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let width = tape.value(x).cols();
            if width != layer.fan_in {
                return Err(Error::Config(format!(
                    "layer {i}: input width {width} does not match expected {}",
                    layer.fan_in
                )));
            }
            let z = layer.forward(tape, store, x);
            x = act.apply(tape, z);
            outs.push(x);
        }
        Ok(MlpOutput { layers: outs })
    }
}

/// Scalar binary cross-entropy with the probability clamped into `[eps, 1-eps]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Batch-mean binary cross-entropy node. `labels` must match `p`'s shape.
pub fn bce_node(tape: &mut Tape, p: NodeId, labels: &Tensor) -> NodeId {
    let clamped = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let y = tape.constant(labels.clone());
    let one_minus_y = tape.constant(labels.map(|v| 1.0 - v));
    let log_p = tape.log(clamped);
    let neg = tape.scale(clamped, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let log_q = tape.log(q);
    let a = tape.mul(y, log_p);
    let b = tape.mul(one_minus_y, log_q);
    let ll = tape.add(a, b);
    let m = tape.mean(ll);
    tape.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce(0.5, 1.0) - ln2).abs() < 1e-15);
        assert!((bce(0.5, 0.0) - ln2).abs() < 1e-15);
        let confident = bce(1.0 - PROB_EPS, 1.0);
        assert!(confident > 0.0 && (confident - PROB_EPS).abs() < 1e-12);
        // clamp keeps extreme inputs finite
        assert!(bce(0.0, 1.0).is_finite() && bce(1.0, 0.0).is_finite());
        assert!(bce(1.7, 0.0).is_finite());
    }

    #[test]
    fn bce_node_matches_scalar() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(vec![0.2, 0.9, 0.5]));
        let y = Tensor::column(vec![0.0, 1.0, 1.0]);
        let loss = bce_node(&mut tape, p, &y);
        let expected = (bce(0.2, 0.0) + bce(0.9, 1.0) + bce(0.5, 1.0)) / 3.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_mlp_gives_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", 4, &[3, 2], Activation::Relu, 1, Activation::Sigmoid, &mut rng);
        store.zero_all();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, vec![1., -2., 3., 0.5, 9., 9., -9., 1.]));
        let out = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(out.hidden().len(), 2);
        assert_eq!(tape.value(out.output()).values(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_layer_is_passthrough() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "id", 1, &[], Activation::Linear, 1, Activation::Linear, &mut rng);
        store.get_mut(mlp.layers[0].weight).value = Tensor::scalar(1.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(vec![-1.25, 0.0, 7.5]));
        let out = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(out.output()).values(), &[-1.25, 0.0, 7.5]);
    }

    #[test]
    fn width_mismatch_names_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", 4, &[3], Activation::Relu, 1, Activation::Linear, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 5, vec![0.0; 5]));
        let err = mlp.forward(&mut tape, &store, x).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
