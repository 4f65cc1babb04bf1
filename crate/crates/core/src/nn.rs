//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! All arithmetic is `f64`. Weights are stored row-major (`outputs × inputs`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi)
        }));
    }
}

/// Fully connected network: `hidden` activation between layers, identity on output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
    pub hidden: Activation,
}

/// Intermediate values of one forward pass, needed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace has output")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// Parameter-ordered slices matching [`DenseNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.tensors().map(Vec::as_slice).collect()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

impl DenseNet {
    /// All-zero network.
    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::zeros(w[0], w[1]))
            .collect();
        Ok(Self { layers, hidden })
    }

    /// He-style uniform fan-in initialization with zero biases.
    pub fn new<R: rand::Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden)?;
        for layer in &mut net.layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Multiplies the output layer's weights by `k` (small values start policies near uniform).
    pub fn scale_output_layer(&mut self, k: f64) {
        if let Some(last) = self.layers.last_mut() {
            last.weights.iter_mut().for_each(|w| *w *= k);
        }
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            let act = self.activation_for(l);
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&inputs[l], &mut z);
            let act = self.activation_for(l);
            let out = z.iter().map(|v| act.apply(*v)).collect();
            pre.push(z);
            inputs.push(out);
        }
        Ok(Trace { inputs, pre })
    }

    /// Accumulates `∂(upstream·output)/∂params` into `grads`; returns the input gradient.
    pub fn accumulate_backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if trace.pre.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: trace.pre.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = self.activation_for(l);
            for ((d, z), y) in delta.iter_mut().zip(&trace.pre[l]).zip(&trace.inputs[l + 1]) {
                *d *= act.derivative(*z, *y);
            }
            let input = &trace.inputs[l];
            let gw = &mut grads.weights[l];
            let mut input_grad = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                grads.biases[l][o] += d;
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let grow = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    grow[i] += d * input[i];
                    input_grad[i] += d * row[i];
                }
            }
            delta = input_grad;
        }
        Ok(delta)
    }

    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.accumulate_backward(trace, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Hash of the exact parameter bits; equal fingerprints mean identical nets.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for l in &self.layers {
            feed(l.inputs as u64);
            feed(l.outputs as u64);
            for v in l.weights.iter().chain(&l.bias) {
                feed(v.to_bits());
            }
        }
        feed(self.hidden as u64);
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied after the adaptive step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One bias-corrected Adam update. Moments are allocated on the first call.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.len() != g.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.len(),
                    got: g.len(),
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != grads.len()
            || self.first_moment.iter().zip(&grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::InvalidInput("optimizer state shape changed".into()));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                if c.weight_decay != 0.0 {
                    p[i] -= c.learning_rate * c.weight_decay * p[i];
                }
            }
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        self.step(net.param_slices_mut(), grads.slices())
    }
}

pub const CHECKPOINT_FORMAT: &str = "lobrl-dense-net";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk container for a [`DenseNet`]; see the README for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Row-major `outputs × inputs` per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Fingerprint of the configuration that produced the parameters.
    pub config_fingerprint: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_net(net: &DenseNet, config_fingerprint: impl Into<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_dims: net.layer_dims(),
            hidden_activation: net.hidden,
            output_activation: Activation::Identity,
            weights: net.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: net.layers.iter().map(|l| l.bias.clone()).collect(),
            config_fingerprint: config_fingerprint.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_net(&self) -> Result<DenseNet> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        if self.output_activation != Activation::Identity {
            return Err(Error::Checkpoint("output activation must be identity".into()));
        }
        let mut net = DenseNet::zeros(&self.layer_dims, self.hidden_activation)?;
        if self.weights.len() != net.layers.len() || self.biases.len() != net.layers.len() {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        for ((layer, w), b) in net.layers.iter_mut().zip(&self.weights).zip(&self.biases) {
            if w.len() != layer.weights.len() || b.len() != layer.bias.len() {
                return Err(Error::Checkpoint("parameter shape mismatch".into()));
            }
            layer.weights.clone_from(w);
            layer.bias.clone_from(b);
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rng() -> crate::Rng {
        crate::rng_from_seed(11)
    }

    /// Straight-line forward pass written independently from `DenseNet::forward`.
    #[allow(clippy::needless_range_loop)]
    fn oracle_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = net.layers.len();
        for (l, layer) in net.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                let mut s = layer.bias[o];
                for i in 0..layer.inputs {
                    s += layer.weights[o * layer.inputs + i] * a[i];
                }
                out[o] = if l + 1 == n {
                    s
                } else {
                    match net.hidden {
                        Activation::Relu => if s > 0.0 { s } else { 0.0 },
                        Activation::Tanh => s.tanh(),
                        Activation::Identity => s,
                    }
                };
            }
            a = out;
        }
        a
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[4, 8, 3], Activation::Relu).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Identity).unwrap();
        for i in 0..3 {
            net.layers[0].weights[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.7, 2.5];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_oracle() {
        let mut r = rng();
        for act in [Activation::Relu, Activation::Tanh] {
            let net = DenseNet::new(&[2, 4, 3], act, &mut r).unwrap();
            let x = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let got = net.forward(&x).unwrap();
            let want = oracle_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = DenseNet::zeros(&[2, 3], Activation::Relu).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        let trace = net.forward_trace(&[1.0, 2.0]).unwrap();
        assert!(net.backward(&trace, &[1.0]).is_err());
    }

    #[test]
    fn linear_scalar_gradient() {
        let mut net = DenseNet::zeros(&[1, 1], Activation::Identity).unwrap();
        net.layers[0].weights[0] = 0.7;
        let x = [2.5];
        let trace = net.forward_trace(&x).unwrap();
        let (g, dx) = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(g.weights[0][0], 2.5);
        assert_eq!(g.biases[0][0], 1.0);
        assert_eq!(dx[0], 0.7);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNet::new(&[3, 5, 2], Activation::Tanh, &mut rng()).unwrap();
        let trace = net.forward_trace(&[0.1, 0.2, 0.3]).unwrap();
        let (g, _) = net.backward(&trace, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut p = [1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 1e-3];
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        });
        adam.step(vec![&mut p[..]], vec![&g[..]]).unwrap();
        for (after, (before, gi)) in p.iter().zip([1.0, -2.0, 0.5].iter().zip(&g)) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((after - before - expected).abs() < 1e-12);
            assert!((after - before + 0.01 * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![1.0, -2.0];
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(vec![&mut p[..]], vec![&[0.0, 0.0][..]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = [0.0];
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let g = [2.0 * (w[0] - 3.0)];
            adam.step(vec![&mut w[..]], vec![&g[..]]).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![1.0];
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(vec![&mut p[..]], vec![&[f64::NAN][..]]).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_parameters() {
        let mut p = [2.0];
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        adam.step(vec![&mut p[..]], vec![&[0.0][..]]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::new(&[3, 4, 2], Activation::Tanh, &mut rng()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut ck = Checkpoint::from_net(&net, "abc");
        ck.metadata.insert("k".into(), "v".into());
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let back = loaded.to_net().unwrap();
        assert_eq!(back, net);
        assert_eq!(back.fingerprint(), net.fingerprint());
    }
}
