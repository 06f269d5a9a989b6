//! Small fully connected decoder: ReLU hidden layers, sigmoid output.
//!
//! Weights are stored as f32 and evaluated in f64. A network "n-w" has `n`
//! affine layers, the hidden ones all of width `w`, and one output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub n_layers: usize,
    pub hidden_width: usize,
    pub input_width: usize,
}

impl MlpConfig {
    pub fn new(n_layers: usize, hidden_width: usize, input_width: usize) -> Self {
        Self {
            n_layers,
            hidden_width,
            input_width,
        }
    }

    /// Shape check for decoder networks: 2 to 4 layers, width 32, 64 or 128.
    pub fn validate_decoder(&self) -> Result<()> {
        if !(2..=4).contains(&self.n_layers) {
            return Err(Error::Config(format!(
                "decoder needs 2 to 4 layers, got {}",
                self.n_layers
            )));
        }
        if ![32, 64, 128].contains(&self.hidden_width) {
            return Err(Error::Config(format!(
                "decoder hidden width must be 32, 64 or 128, got {}",
                self.hidden_width
            )));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.input_width == 0 || (self.n_layers > 1 && self.hidden_width == 0) {
            return Err(Error::Config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.n_layers);
        let mut fan_in = self.input_width;
        for l in 0..self.n_layers {
            let out = if l + 1 == self.n_layers { 1 } else { self.hidden_width };
            shapes.push((fan_in, out));
            fan_in = out;
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGradients {
    pub fn zero(&mut self) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|g| g.fill(0.0));
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).flatten().all(|&g| g == 0.0)
    }
}

/// Backward-pass buffers sized for one network.
#[derive(Debug, Clone)]
pub struct MlpScratch {
    delta: Vec<f64>,
    next: Vec<f64>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.len() != layer.inputs * layer.outputs || layer.bias.len() != layer.outputs {
                return Err(Error::ShapeMismatch {
                    expected: layer.inputs * layer.outputs,
                    actual: layer.weights.len(),
                });
            }
            if l > 0 && layers[l - 1].outputs != layer.inputs {
                return Err(Error::ShapeMismatch {
                    expected: layers[l - 1].outputs,
                    actual: layer.inputs,
                });
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("layer {l} parameters"),
                });
            }
        }
        if layers.last().unwrap().outputs != 1 {
            return Err(Error::Config("network must have a single output".into()));
        }
        Ok(Self { layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Self::from_layers(
            config
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer {
                    inputs: i,
                    outputs: o,
                    weights: vec![0.0; i * o],
                    bias: vec![0.0; o],
                })
                .collect(),
        )
    }

    /// Hidden layers: He-uniform `U(+-sqrt(6 / fan_in))`. Output layer:
    /// `U(+-1 / sqrt(fan_in))`. All biases zero.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = mlp.layers.len() - 1;
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            let fan_in = layer.inputs as f64;
            let bound = if l == last {
                fan_in.sqrt().recip()
            } else {
                (6.0 / fan_in).sqrt()
            } as f32;
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn config(&self) -> MlpConfig {
        MlpConfig {
            n_layers: self.layers.len(),
            hidden_width: if self.layers.len() > 1 {
                self.layers[0].outputs
            } else {
                0
            },
            input_width: self.input_width(),
        }
    }

    /// Total width of the hidden activations cached by `forward_cached`.
    pub fn cache_len(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Forward multiply-adds per evaluation.
    pub fn madds(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn zero_gradients(&self) -> MlpGradients {
        MlpGradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scratch(&self) -> MlpScratch {
        let widest = self.layers.iter().map(|l| l.inputs.max(l.outputs)).max().unwrap_or(1);
        MlpScratch {
            delta: vec![0.0; widest],
            next: vec![0.0; widest],
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_width() {
            return Err(Error::ShapeMismatch {
                expected: self.input_width(),
                actual: input.len(),
            });
        }
        let mut cache = vec![0.0; self.cache_len()];
        Ok(self.forward_cached(input, &mut cache))
    }

    /// Forward pass storing each hidden layer's ReLU output in `cache`.
    #[inline]
    pub fn forward_cached(&self, input: &[f64], cache: &mut [f64]) -> f64 {
        let mut offset = 0;
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = cache.split_at_mut(offset);
            let x: &[f64] = if l == 0 { input } else { &prev[offset - layer.inputs..] };
            if l + 1 == n {
                return sigmoid(affine_row(layer, 0, x));
            }
            let out = &mut rest[..layer.outputs];
            for (o, y) in out.iter_mut().enumerate() {
                *y = affine_row(layer, o, x).max(0.0);
            }
            offset += layer.outputs;
        }
        unreachable!("network has an output layer")
    }

    /// Accumulate parameter gradients for `dloss/doutput = upstream` and
    /// write the input gradient into `input_grad`. `cache` and `output` must
    /// come from `forward_cached` on the same input.
    #[inline]
    pub fn backward_cached(
        &self,
        input: &[f64],
        cache: &[f64],
        output: f64,
        upstream: f64,
        grads: &mut MlpGradients,
        input_grad: &mut [f64],
        scratch: &mut MlpScratch,
    ) {
        let n = self.layers.len();
        scratch.delta[0] = upstream * output * (1.0 - output);
        let mut end = cache.len();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let x: &[f64] = if l == 0 { input } else { &cache[end - layer.inputs..end] };
            let delta = &scratch.delta[..layer.outputs];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            let next = if l == 0 {
                &mut input_grad[..]
            } else {
                &mut scratch.next[..layer.inputs]
            };
            next.fill(0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let grow = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    grow[i] += d * x[i];
                    next[i] += d * row[i] as f64;
                }
            }
            if l > 0 {
                // ReLU, with derivative 0 at 0
                for i in 0..layer.inputs {
                    scratch.delta[i] = if x[i] > 0.0 { scratch.next[i] } else { 0.0 };
                }
                end -= layer.inputs;
            }
        }
    }

    /// Convenience backward pass: returns the input gradient.
    pub fn backward(&self, input: &[f64], upstream: f64, grads: &mut MlpGradients) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::ShapeMismatch {
                expected: self.input_width(),
                actual: input.len(),
            });
        }
        let mut cache = vec![0.0; self.cache_len()];
        let y = self.forward_cached(input, &mut cache);
        let mut input_grad = vec![0.0; input.len()];
        self.backward_cached(input, &cache, y, upstream, grads, &mut input_grad, &mut self.scratch());
        Ok(input_grad)
    }
}

#[inline]
fn affine_row(layer: &Layer, o: usize, x: &[f64]) -> f64 {
    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
    let mut acc = layer.bias[o] as f64;
    for (w, v) in row.iter().zip(x) {
        acc += *w as f64 * v;
    }
    acc
}
