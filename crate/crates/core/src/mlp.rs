//! Small fully connected networks with a hand-written backward pass.
//!
//! Parameters live in one flat buffer so that optimizers and gradient checks
//! can address them uniformly. Layer `l` occupies `W_l` (row-major,
//! `out x in`) followed by `b_l`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyMlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Per-layer activations recorded by [`TinyMlp::forward_trace`].
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl TinyMlp {
    /// Zero-initialised network with the given layer widths.
    pub fn new(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output dims".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers but {} activations",
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { dims: dims.to_vec(), activations: activations.to_vec(), params: vec![0.0; count] })
    }

    /// One ReLU hidden layer, linear output.
    pub fn with_hidden(input: usize, hidden: usize, output: usize) -> Self {
        Self::new(&[input, hidden, output], &[Activation::Relu, Activation::Identity])
            .expect("non-zero dims")
    }

    pub fn from_parts(dims: Vec<usize>, activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::new(&dims, &activations)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Config(format!(
                "MLP {:?} expects {} parameters, got {}",
                dims,
                mlp.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite MLP parameter".into()));
        }
        mlp.params = params;
        Ok(mlp)
    }

    /// He-style normal initialisation for weights, zero biases.
    pub fn init_random<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut self.params[offset..offset + fan_in * fan_out] {
                *w = normal.sample(rng);
            }
            offset += fan_in * fan_out;
            self.params[offset..offset + fan_out].fill(0.0);
            offset += fan_out;
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Offsets of the weight block and bias block of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut offset = 0;
        for k in 0..l {
            offset += self.dims[k] * self.dims[k + 1] + self.dims[k + 1];
        }
        (offset, offset + self.dims[l] * self.dims[l + 1])
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "MLP expects {}-d input, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut offset = 0;
        for l in 0..self.layer_count() {
            x = self.layer_forward(l, offset, &x);
            offset += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<MlpTrace> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let y = self.layer_forward(l, offset, acts.last().unwrap());
            acts.push(y);
            offset += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        Ok(MlpTrace { acts })
    }

    fn layer_forward(&self, l: usize, offset: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[offset..offset + n_in * n_out];
        let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let act = self.activations[l];
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
                act.apply(z)
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.output_dim());
        assert_eq!(grad_params.len(), self.params.len());
        let mut grad = grad_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let y = &trace.acts[l + 1];
            let x = &trace.acts[l];
            let act = self.activations[l];
            for o in 0..n_out {
                grad[o] *= act.derivative_from_output(y[o]);
            }
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let go = grad[o];
                if go == 0.0 {
                    continue;
                }
                grad_params[b_off + o] += go;
                let row = w_off + o * n_in;
                for i in 0..n_in {
                    grad_params[row + i] += go * x[i];
                    grad_in[i] += go * self.params[row + i];
                }
            }
            grad = grad_in;
        }
        grad
    }
}
