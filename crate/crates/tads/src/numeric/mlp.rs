//! Small fully connected network with analytic backpropagation.
//!
//! Layers hold an `out x in` weight matrix, a bias vector, and one of three
//! activations. Gradients flow through [`Mlp::backward`] as flat parameter
//! vectors so one optimizer state can drive any network in the engine; the
//! test suite checks every analytic gradient against central finite
//! differences.

use serde::{Deserialize, Serialize};

use super::dense::DenseMatrix;
use super::rng::RngStream;
use crate::error::{Result, TadsError};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed in terms of the activated output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Sigmoid),
            2 => Ok(Activation::Identity),
            other => Err(TadsError::Parse {
                line: 0,
                message: format!("unknown activation code {other}"),
            }),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`, row i holds the weights feeding output unit i.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer activations captured during a forward pass, indexed so entry 0
/// is the input and entry L is the network output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

impl Mlp {
    /// Zero-initialized network. `dims` lists layer widths input-first, so
    /// `dims.len() == activations.len() + 1`.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::validate_dims(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weights: DenseMatrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Xavier-uniform initialization drawn from `stream`; biases start at
    /// zero. Identical stream and dims give bit-identical networks.
    pub fn seeded(dims: &[usize], activations: &[Activation], stream: &RngStream) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        let mut rng = stream.rng();
        for layer in &mut net.layers {
            let (fan_out, fan_in) = (layer.weights.rows(), layer.weights.cols());
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    fn validate_dims(dims: &[usize], activations: &[Activation]) -> Result<()> {
        if dims.len() < 2 {
            return Err(TadsError::InvalidConfig(
                "network needs at least an input and an output width".into(),
            ));
        }
        if activations.len() != dims.len() - 1 {
            return Err(TadsError::InvalidConfig(format!(
                "{} layer widths need {} activations, got {}",
                dims.len(),
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TadsError::InvalidConfig("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.cols()];
        dims.extend(self.layers.iter().map(|l| l.weights.rows()));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.activations.pop().expect("forward trace is never empty"))
    }

    /// Forward pass retaining every layer's output for backpropagation.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(TadsError::Shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut out = layer.weights.matvec(prev)?;
            for (o, b) in out.iter_mut().zip(&layer.bias) {
                *o = layer.activation.apply(*o + b);
            }
            activations.push(out);
        }
        Ok(ForwardTrace { activations })
    }

    /// Backpropagates `upstream` (dL/d output) through a recorded forward
    /// pass, returning parameter gradients and the gradient at the input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<(MlpGradients, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(TadsError::Shape(format!(
                "upstream gradient width {} does not match output width {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut grads = MlpGradients::zeros_like(self);
        let mut delta = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[idx + 1];
            let inp = &trace.activations[idx];
            for (d, &a) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(a);
            }
            let layer_grad = &mut grads.layers[idx];
            for (unit, &d) in delta.iter().enumerate() {
                layer_grad.bias[unit] += d;
                let wrow = layer_grad.weights.row_mut(unit);
                for (w, &x) in wrow.iter_mut().zip(inp) {
                    *w += d * x;
                }
            }
            let mut next = vec![0.0; inp.len()];
            for (unit, &d) in delta.iter().enumerate() {
                for (n, &w) in next.iter_mut().zip(layer.weights.row(unit)) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok((grads, delta))
    }

    /// Parameters flattened layer by layer, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(TadsError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub layers: Vec<LayerGradients>,
}

impl MlpGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Same flat layout as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn accumulate(&mut self, other: &MlpGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for x in layer.weights.as_mut_slice() {
                *x *= factor;
            }
            for x in &mut layer.bias {
                *x *= factor;
            }
        }
    }
}
