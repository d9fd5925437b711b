use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Optional non-linearity applied to the final layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputSquash {
    #[default]
    None,
    Sigmoid,
}

/// Dense feed-forward network with ReLU hidden layers.
///
/// Weight matrices are stored row-major with `rows = out_dim`, `cols = in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    squash: OutputSquash,
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTape {
    /// Input to each layer (the network input for layer 0).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl GradTape {
    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn layer_input(&self, layer: usize) -> &[f64] {
        &self.inputs[layer]
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.iter_mut() {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

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
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(LabError::config(format!(
            "layer_dims needs at least 2 entries, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(LabError::config("layer_dims entries must be positive"));
    }
    Ok(())
}

/// Largest f64 strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function clamped so the result stays strictly inside (0, 1).
#[inline]
fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

impl Mlp {
    /// Kaiming-uniform weights (ReLU gain, bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(dims: &[usize], squash: OutputSquash, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = Self::kaiming_bound(fan_in);
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
            squash,
        })
    }

    pub fn kaiming_bound(fan_in: usize) -> f64 {
        (6.0 / fan_in as f64).sqrt()
    }

    /// All-zero network; handy for degenerate-case tests.
    pub fn zeros(dims: &[usize], squash: OutputSquash) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Mlp {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: dims.windows(2).map(|p| vec![0.0; p[1]]).collect(),
            squash,
        })
    }

    pub fn from_parts(
        dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        squash: OutputSquash,
    ) -> Result<Self> {
        validate_dims(&dims)?;
        let layers = dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(LabError::config(format!(
                "expected {layers} layers, got {} weight and {} bias arrays",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in dims.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] {
                return Err(LabError::Shape {
                    expected: pair[0] * pair[1],
                    got: weights[l].len(),
                });
            }
            if biases[l].len() != pair[1] {
                return Err(LabError::Shape {
                    expected: pair[1],
                    got: biases[l].len(),
                });
            }
        }
        Ok(Mlp {
            dims,
            weights,
            biases,
            squash,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn squash(&self) -> OutputSquash {
        self.squash
    }

    pub fn set_squash(&mut self, squash: OutputSquash) {
        self.squash = squash;
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Flat iteration over all parameters in layer order (weights then bias).
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

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.dims[0] {
            return Err(LabError::Shape {
                expected: self.dims[0],
                got: input.len(),
            });
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite(format!(
                "network input[{i}] = {}",
                input[i]
            )));
        }
        Ok(())
    }

    #[inline]
    fn affine(&self, layer: usize, x: &[f64], out: &mut Vec<f64>) {
        let n_in = self.dims[layer];
        let w = &self.weights[layer];
        out.clear();
        out.extend(self.biases[layer].iter().enumerate().map(|(r, &b)| {
            let row = &w[r * n_in..(r + 1) * n_in];
            b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        }));
    }

    fn finish(&self, mut y: Vec<f64>) -> Vec<f64> {
        if self.squash == OutputSquash::Sigmoid {
            for v in &mut y {
                *v = sigmoid(*v);
            }
        }
        y
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut y = Vec::new();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            self.affine(l, &x, &mut y);
            if l < last {
                for v in &mut y {
                    *v = v.max(0.0);
                }
                std::mem::swap(&mut x, &mut y);
            }
        }
        Ok(self.finish(y))
    }

    /// Forward pass recording a tape for [`Mlp::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        self.check_input(input)?;
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut x = input.to_vec();
        for l in 0..layers {
            let mut y = Vec::with_capacity(self.dims[l + 1]);
            self.affine(l, &x, &mut y);
            let next = if l + 1 < layers {
                y.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(y);
        }
        let output = self.finish(pre[layers - 1].clone());
        Ok((
            output.clone(),
            GradTape {
                inputs,
                pre,
                output,
            },
        ))
    }

    fn check_tape(&self, tape: &GradTape, output_grad: &[f64]) -> Result<()> {
        if tape.pre.len() != self.num_layers() {
            return Err(LabError::InvalidTape(format!(
                "tape has {} layers, network has {}",
                tape.pre.len(),
                self.num_layers()
            )));
        }
        for l in 0..self.num_layers() {
            if tape.inputs[l].len() != self.dims[l] || tape.pre[l].len() != self.dims[l + 1] {
                return Err(LabError::InvalidTape(format!("layer {l} width mismatch")));
            }
        }
        if output_grad.len() != self.output_dim() {
            return Err(LabError::Shape {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        Ok(())
    }

    fn output_delta(&self, tape: &GradTape, output_grad: &[f64]) -> Vec<f64> {
        match self.squash {
            OutputSquash::None => output_grad.to_vec(),
            OutputSquash::Sigmoid => output_grad
                .iter()
                .zip(&tape.output)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        }
    }

    /// Propagates `g` (gradient w.r.t. pre-activation of `layer`) to that
    /// layer's input.
    fn propagate(&self, layer: usize, g: &[f64], tape: &GradTape) -> Vec<f64> {
        let n_in = self.dims[layer];
        let w = &self.weights[layer];
        let mut gin = vec![0.0; n_in];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &w[r * n_in..(r + 1) * n_in];
            for (acc, &wv) in gin.iter_mut().zip(row) {
                *acc += wv * gr;
            }
        }
        if layer > 0 {
            for (acc, &p) in gin.iter_mut().zip(&tape.pre[layer - 1]) {
                if p <= 0.0 {
                    *acc = 0.0;
                }
            }
        }
        gin
    }

    /// Reverse pass. Returns parameter gradients and the input gradient of
    /// `output_grad · output`.
    pub fn backward(&self, tape: &GradTape, output_grad: &[f64]) -> Result<(Grads, Vec<f64>)> {
        let mut grads = Grads::zeros_like(self);
        let input_grad = self.backward_accumulate(tape, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`Mlp::backward`] but adds into existing gradient buffers.
    pub fn backward_accumulate(
        &self,
        tape: &GradTape,
        output_grad: &[f64],
        grads: &mut Grads,
    ) -> Result<Vec<f64>> {
        self.check_tape(tape, output_grad)?;
        let mut g = self.output_delta(tape, output_grad);
        for l in (0..self.num_layers()).rev() {
            let n_in = self.dims[l];
            let x = &tape.inputs[l];
            let gw = &mut grads.weights[l];
            for (r, &gr) in g.iter().enumerate() {
                grads.biases[l][r] += gr;
                if gr == 0.0 {
                    continue;
                }
                for (acc, &xv) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(x) {
                    *acc += gr * xv;
                }
            }
            g = self.propagate(l, &g, tape);
        }
        Ok(g)
    }

    /// Input gradient only; skips parameter gradients (frozen networks).
    pub fn input_grad(&self, tape: &GradTape, output_grad: &[f64]) -> Result<Vec<f64>> {
        self.check_tape(tape, output_grad)?;
        let mut g = self.output_delta(tape, output_grad);
        for l in (0..self.num_layers()).rev() {
            g = self.propagate(l, &g, tape);
        }
        Ok(g)
    }
}
