//! Dense feed-forward networks with exact reverse-mode gradients, Adam, and a
//! JSON checkpoint format.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::stream_rng;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
    Identity,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh()),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Gelu => {
                let t = (GELU_K * (z + GELU_C * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * z * z)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the final layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    activation: Activation,
    /// Per layer, row-major `out x in`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Intermediate values of one forward pass, reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |v| v.as_slice())
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Gradients) {
        self.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
    }

    pub fn fill_zero(&mut self) {
        self.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Flat view in parameter order (per layer: weights, then biases).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

impl DenseNet {
    /// Xavier-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidParameter(
                "a network needs at least two non-empty layers".into(),
            ));
        }
        let mut rng = stream_rng(seed, 0x6e6e);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// Build from explicit parameters (weights row-major `out x in` per layer).
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activation: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::InvalidParameter("layer count mismatch".into()));
        }
        for (l, w) in layer_sizes.windows(2).enumerate() {
            check_len(w[0] * w[1], weights[l].len())?;
            check_len(w[1], biases[l].len())?;
        }
        let net = Self {
            layer_sizes,
            activation,
            weights,
            biases,
        };
        if !net.params().all(|p| p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite network parameter".into()));
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Keep only the listed output units of the final layer.
    pub fn select_outputs(&self, outputs: &[usize]) -> Result<Self> {
        let last = self.n_layers() - 1;
        let fan_in = self.layer_sizes[last];
        let mut net = self.clone();
        let mut w = Vec::with_capacity(outputs.len() * fan_in);
        let mut b = Vec::with_capacity(outputs.len());
        for &o in outputs {
            if o >= self.output_dim() {
                return Err(Error::InvalidParameter(format!("output {o} out of range")));
            }
            w.extend_from_slice(&self.weights[last][o * fan_in..(o + 1) * fan_in]);
            b.push(self.biases[last][o]);
        }
        net.weights[last] = w;
        net.biases[last] = b;
        *net.layer_sizes.last_mut().unwrap() = outputs.len();
        Ok(net)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = Trace::default();
        self.forward_trace(x, &mut trace)?;
        Ok(trace.output().to_vec())
    }

    /// Forward pass keeping every intermediate in `trace`.
    pub fn forward_trace(&self, x: &[f64], trace: &mut Trace) -> Result<()> {
        check_len(self.input_dim(), x.len())?;
        let n = self.n_layers();
        trace.acts.resize_with(n + 1, Vec::new);
        trace.pre.resize_with(n, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        for l in 0..n {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[l];
            let (done, rest) = trace.acts.split_at_mut(l + 1);
            let input = &done[l];
            let pre = &mut trace.pre[l];
            pre.clear();
            for (o, row) in w.chunks_exact(fan_in).enumerate().take(fan_out) {
                let mut acc = self.biases[l][o];
                for (wi, xi) in row.iter().zip(input) {
                    acc += wi * xi;
                }
                pre.push(acc);
            }
            let out = &mut rest[0];
            out.clear();
            if l + 1 == n {
                out.extend_from_slice(pre);
            } else {
                out.extend(pre.iter().map(|&z| self.activation.eval(z)));
            }
        }
        Ok(())
    }

    /// Accumulate gradients of `<upstream, output>` into `grads` for the pass
    /// recorded in `trace`, returning the gradient with respect to the input.
    pub fn backward_trace(&self, trace: &Trace, upstream: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        check_len(self.output_dim(), upstream.len())?;
        let n = self.n_layers();
        let mut delta = upstream.to_vec();
        for l in (0..n).rev() {
            let fan_in = self.layer_sizes[l];
            if l + 1 < n {
                for (d, (&z, &a)) in delta.iter_mut().zip(trace.pre[l].iter().zip(&trace.acts[l + 1])) {
                    *d *= self.activation.derivative(z, a);
                }
            }
            let input = &trace.acts[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[l][o] += d;
                for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            let mut next = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                for (nx, wi) in next.iter_mut().zip(&self.weights[l][o * fan_in..(o + 1) * fan_in]) {
                    *nx += d * wi;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Gradients of `<upstream, forward(x)>` with respect to every parameter and `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut trace = Trace::default();
        self.forward_trace(x, &mut trace)?;
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_trace(&trace, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Input gradient only.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward(x, upstream)?.1)
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        let n = net.n_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(net: &mut DenseNet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    check_len(state.m.len(), net.n_params())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in net.params_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// On-disk network: `{schema_version, layer_sizes, activation, weights, biases, extras}`
/// with weights as nested row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub extras: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_net(net: &DenseNet, extras: serde_json::Map<String, serde_json::Value>) -> Self {
        let weights = net
            .weights
            .iter()
            .zip(net.layer_sizes.windows(2))
            .map(|(w, s)| w.chunks_exact(s[0]).map(<[f64]>::to_vec).collect())
            .collect();
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            layer_sizes: net.layer_sizes.clone(),
            activation: net.activation,
            weights,
            biases: net.biases.clone(),
            extras,
        }
    }

    pub fn to_net(&self) -> Result<DenseNet> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint schema {}",
                self.schema_version
            )));
        }
        for (l, rows) in self.weights.iter().enumerate() {
            let fan_in = self.layer_sizes.get(l).copied().unwrap_or(0);
            if rows.iter().any(|r| r.len() != fan_in) {
                return Err(Error::Format(format!("layer {l} rows must have {fan_in} columns")));
            }
        }
        let weights = self.weights.iter().map(|rows| rows.concat()).collect();
        DenseNet::from_parts(self.layer_sizes.clone(), self.activation, weights, self.biases.clone())
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = DenseNet::init(&[3, 5, 2], Activation::Tanh, 1).unwrap();
        net.params_mut().for_each(|p| *p = 0.0);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let net = DenseNet::from_parts(
            vec![2, 2],
            Activation::Tanh,
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            vec![vec![0.5, -0.5]],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![3.5, 6.5]);
        let (_, gx) = net.backward(&[0.3, 0.2], &[1.0, 2.0]).unwrap();
        assert_eq!(gx, vec![1.0 + 6.0, 2.0 + 8.0]);
    }

    #[test]
    fn size_mismatch_errors() {
        let net = DenseNet::init(&[3, 4, 1], Activation::Tanh, 0).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
        assert!(DenseNet::init(&[3], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = DenseNet::init(&[4, 8, 1], Activation::Gelu, 7).unwrap();
        let b = DenseNet::init(&[4, 8, 1], Activation::Gelu, 7).unwrap();
        let c = DenseNet::init(&[4, 8, 1], Activation::Gelu, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.biases(0).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn xavier_variance() {
        let net = DenseNet::init(&[400, 600], Activation::Tanh, 3).unwrap();
        let w = net.weights(0);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / 1000.0;
        assert!((var / want - 1.0).abs() < 0.1, "var {var} want {want}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut net = DenseNet::init(&[2, 3, 1], Activation::Tanh, 1).unwrap();
        let before = net.clone();
        let mut st = AdamState::new(&net, 1e-2);
        let g = Gradients::zeros_like(&net);
        adam_update(&mut net, &g, &mut st).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut net = DenseNet::init(&[2, 3, 1], Activation::Tanh, 1).unwrap();
        let before: Vec<f64> = net.params().copied().collect();
        let mut st = AdamState::new(&net, 1e-2);
        let mut g = Gradients::zeros_like(&net);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = if i % 2 == 0 { 0.3 } else { -2.0 };
        }
        adam_update(&mut net, &g, &mut st).unwrap();
        for ((after, b), gi) in net.params().zip(&before).zip(g.iter()) {
            let step = after - b;
            assert!((step + 1e-2 * gi.signum()).abs() < 1e-8, "step {step}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut net = DenseNet::init(&[3, 2], Activation::Identity, 5).unwrap();
        for (i, p) in net.params_mut().enumerate() {
            *p = 1.0 + 0.1 * i as f64;
        }
        let mut st = AdamState::new(&net, 1e-2);
        let mut g = Gradients::zeros_like(&net);
        for _ in 0..2000 {
            // f = |theta|^2 / 2.
            for (gi, p) in g.iter_mut().zip(net.params()) {
                *gi = *p;
            }
            adam_update(&mut net, &g, &mut st).unwrap();
        }
        let norm = net.params().map(|p| p * p).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn select_outputs_keeps_rows() {
        let net = DenseNet::init(&[3, 4, 2], Activation::Tanh, 2).unwrap();
        let head = net.select_outputs(&[1]).unwrap();
        let x = [0.1, 0.2, -0.3];
        assert_eq!(head.forward(&x).unwrap()[0], net.forward(&x).unwrap()[1]);
    }

    #[test]
    fn checkpoint_rejects_ragged_rows() {
        let net = DenseNet::init(&[2, 3, 1], Activation::Tanh, 1).unwrap();
        let mut ck = Checkpoint::from_net(&net, Default::default());
        ck.weights[0][1].pop();
        assert!(ck.to_net().is_err());
    }
}
