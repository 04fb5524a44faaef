//! Small multilayer perceptrons with hand-written forward and backward
//! passes, the losses the strategies train with, and the diagnostics they log.
//!
//! Everything structural (matrix products, rectifiers, backpropagation, the
//! representation-similarity loss) is generic over [`Ring`], so it can be
//! checked exactly over rationals. Softmax, cross-entropy and SGD need
//! [`Real`].

mod heads;
pub mod linalg;
mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{PayloadKind, Reader, Writer};
use crate::error::{shape, Error, Result};
use crate::scalar::{scalar_bytes, Real, Ring};

pub use heads::{Head, HeadRef, HeadSet};
pub use linalg::Matrix;
pub use loss::{
    argmax, combined_loss_grad, drl_loss_grad, drl_terms, grad_alignment, prior_corrected_argmax,
    prior_corrected_scores,
    softmax_rows, xent_logit_grad, xent_loss_grad, DrlConfig, DrlTerms, LossParts,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Fully connected layer; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Ring> Layer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn extend_flat(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(&self.bias);
    }

    /// `p <- p - lr * g` over this layer's slice of a flat gradient.
    fn descend(&mut self, grad: &[T], lr: T) -> usize {
        let nw = self.weights.as_slice().len();
        for (p, &g) in self.weights.as_mut_slice().iter_mut().zip(&grad[..nw]) {
            *p -= lr * g;
        }
        for (p, &g) in self.bias.iter_mut().zip(&grad[nw..]) {
            *p -= lr * g;
        }
        self.param_count()
    }
}

impl<T: Real> Layer<T> {
    /// Symmetric uniform initialization with bound `1/sqrt(fan_in)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Self {
            weights: Matrix::from_vec(out_dim, in_dim, w).expect("sized"),
            bias: vec![T::zero(); out_dim],
        }
    }
}

/// Flattened gradient over every parameter of a network, in layer order
/// with each layer's weights (row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T>(pub Vec<T>);

impl<T: Ring> GradientVector<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn dot(&self, other: &Self) -> T {
        linalg::dot(&self.0, &other.0)
    }
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }
}

/// Per-layer outputs of one forward pass; `outputs[l]` is `batch x width_l`
/// and the last entry holds the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Matrix<T>,
    pub outputs: Vec<Matrix<T>>,
}

impl<T: Ring> ForwardTrace<T> {
    pub fn layer_count(&self) -> usize {
        self.outputs.len()
    }
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
    pub fn logits(&self) -> &Matrix<T> {
        self.outputs.last().expect("at least one layer")
    }
    pub fn hidden(&self) -> &[Matrix<T>] {
        &self.outputs[..self.outputs.len() - 1]
    }
    /// Zero gradients shaped like each recorded output.
    pub fn zero_output_grads(&self) -> Vec<Matrix<T>> {
        self.outputs
            .iter()
            .map(|o| Matrix::zeros(o.rows(), o.cols()))
            .collect()
    }
    /// Activation bytes held by the trace.
    pub fn size_bytes(&self) -> usize {
        let n: usize = std::iter::once(&self.input)
            .chain(&self.outputs)
            .map(|m| m.as_slice().len())
            .sum();
        n * scalar_bytes::<T>()
    }
}

/// A borrowed chain of layers evaluated as rectifier hidden layers followed
/// by a linear output layer.
#[derive(Debug, Clone)]
pub struct Chain<'a, T> {
    layers: Vec<&'a Layer<T>>,
}

impl<'a, T: Ring> Chain<'a, T> {
    pub fn new(layers: Vec<&'a Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape("a network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(shape(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[&'a Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn forward(&self, input: &Matrix<T>) -> Result<ForwardTrace<T>> {
        if input.cols() != self.input_dim() {
            return Err(shape(format!(
                "input has {} features, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut outputs: Vec<Matrix<T>> = Vec::with_capacity(n);
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = if l == 0 { input } else { &outputs[l - 1] };
            let mut h = prev.mul_transposed(&layer.weights);
            for i in 0..h.rows() {
                for (v, &b) in h.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                    if l + 1 < n {
                        *v = v.relu();
                    }
                }
            }
            outputs.push(h);
        }
        Ok(ForwardTrace {
            input: input.clone(),
            outputs,
        })
    }

    /// Backpropagates `output_grads[l] = dL/d(outputs[l])` through the chain.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        output_grads: &[Matrix<T>],
    ) -> Result<GradientVector<T>> {
        let n = self.layers.len();
        if trace.outputs.len() != n || output_grads.len() != n {
            return Err(shape(format!(
                "trace/gradient layer count ({}, {}) differs from network ({n})",
                trace.outputs.len(),
                output_grads.len()
            )));
        }
        let mut per_layer: Vec<Vec<T>> = vec![Vec::new(); n];
        let mut delta = output_grads[n - 1].clone();
        for l in (0..n).rev() {
            if l + 1 < n {
                for (d, &h) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(trace.outputs[l].as_slice())
                {
                    if h <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.outputs[l - 1]
            };
            let gw = delta.transposed_mul(input);
            let mut flat = gw.as_slice().to_vec();
            flat.extend(delta.column_sums());
            per_layer[l] = flat;
            if l > 0 {
                let mut prev = delta.mul(&self.layers[l].weights);
                prev.add_assign(&output_grads[l - 1]);
                delta = prev;
            }
        }
        Ok(GradientVector(per_layer.concat()))
    }
}

/// Parameters of a plain MLP classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<Layer<T>>,
    activation: Activation,
}

impl<T: Ring> MlpParams<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        Chain::new(layers.iter().collect())?;
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(shape(format!("invalid layer sizes {sizes:?}")));
        }
        Self::from_layers(sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn size_bytes(&self) -> usize {
        self.param_count() * scalar_bytes::<T>()
    }

    pub fn chain(&self) -> Chain<'_, T> {
        Chain {
            layers: self.layers.iter().collect(),
        }
    }

    pub fn forward(&self, input: &Matrix<T>) -> Result<ForwardTrace<T>> {
        self.chain().forward(input)
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.extend_flat(&mut out);
        }
        out
    }

    pub fn from_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(shape("flat parameter length mismatch"));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(out)
    }
}

impl<T: Real> MlpParams<T> {
    /// Seeded initialization for the given layer widths (input first).
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_layers(
            sizes
                .windows(2)
                .map(|w| Layer::init(w[0], w[1], &mut rng))
                .collect(),
        )
    }

    /// In-place SGD step `params <- params - lr * grad`.
    pub fn descend(&mut self, grad: &GradientVector<T>, lr: T) -> Result<()> {
        check_step(grad, self.param_count(), lr)?;
        let mut off = 0;
        for l in &mut self.layers {
            off += l.descend(&grad.0[off..], lr);
        }
        Ok(())
    }

    /// Serializes to the CLB1 params payload: `u8` scalar width, `u32` layer
    /// count, then per layer `u32 out, u32 in`, weights row-major, bias.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(PayloadKind::Params);
        let width = scalar_bytes::<T>();
        w.put_u8(width as u8);
        w.put_len(self.layers.len())?;
        for l in &self.layers {
            w.put_len(l.out_dim())?;
            w.put_len(l.in_dim())?;
            for &v in l.weights.as_slice().iter().chain(&l.bias) {
                put_scalar(&mut w, v, width);
            }
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, PayloadKind::Params)?;
        let width = r.u8()? as usize;
        if width != scalar_bytes::<T>() {
            return Err(Error::Format(format!(
                "checkpoint holds {width}-byte scalars, expected {}",
                scalar_bytes::<T>()
            )));
        }
        let n = r.len(8)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let count = out
                .checked_mul(inp)
                .and_then(|c| c.checked_add(out))
                .filter(|&c| c.saturating_mul(width) <= r.remaining())
                .ok_or_else(|| Error::Format("layer shape exceeds payload".into()))?;
            let vals = (0..count)
                .map(|_| get_scalar(&mut r, width))
                .collect::<Result<Vec<T>>>()?;
            layers.push(Layer {
                weights: Matrix::from_vec(out, inp, vals[..out * inp].to_vec())?,
                bias: vals[out * inp..].to_vec(),
            });
        }
        r.finish()?;
        Self::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn put_scalar<T: Real>(w: &mut Writer, v: T, width: usize) {
    let x = v.to_f64().unwrap_or(f64::NAN);
    if width == 4 {
        w.put_f32(x as f32);
    } else {
        w.put_f64(x);
    }
}

pub(crate) fn get_scalar<T: Real>(r: &mut Reader<'_>, width: usize) -> Result<T> {
    let x = match width {
        4 => r.f32()? as f64,
        8 => r.f64()?,
        w => return Err(Error::Format(format!("unsupported scalar width {w}"))),
    };
    Ok(T::lit(x))
}

pub(crate) fn check_step<T: Real>(grad: &GradientVector<T>, expected: usize, lr: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::Precondition("learning rate must be positive".into()));
    }
    if grad.len() != expected {
        return Err(shape(format!(
            "gradient has {} components, parameters have {expected}",
            grad.len()
        )));
    }
    if let Some(i) = grad.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient component {i}")));
    }
    Ok(())
}

/// Functional SGD update returning the new parameters.
pub fn sgd_step<T: Real>(
    mut params: MlpParams<T>,
    grad: &GradientVector<T>,
    lr: T,
) -> Result<MlpParams<T>> {
    params.descend(grad, lr)?;
    Ok(params)
}

/// Fixed, never-trained projection ahead of a trainable classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenProjection<T> {
    Identity { dim: usize },
    /// `relu(W x)` with `W` drawn once from a seeded Gaussian.
    RandomRelu { weights: Matrix<T> },
}

impl<T: Real> FrozenProjection<T> {
    pub fn random_relu(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::lit(scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::RandomRelu {
            weights: Matrix::from_vec(out_dim, in_dim, w).expect("sized"),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::RandomRelu { weights } => weights.rows(),
        }
    }

    pub fn project(&self, x: &[T]) -> Vec<T> {
        match self {
            Self::Identity { .. } => x.to_vec(),
            Self::RandomRelu { weights } => (0..weights.rows())
                .map(|r| linalg::dot(weights.row(r), x).relu())
                .collect(),
        }
    }

    pub fn size_bytes(&self) -> usize {
        match self {
            Self::Identity { .. } => 0,
            Self::RandomRelu { weights } => weights.as_slice().len() * scalar_bytes::<T>(),
        }
    }
}
