//! Fully connected encoder `φ` with a linear decoder head `h`, so that the
//! network computes `f = h ∘ φ`.
//!
//! Layers store weights as `out × in` matrices and act on row-major batches
//! (`X Wᵀ + b`). Backpropagation is written out by hand; the activation
//! derivative is recovered from each layer's post-activation output, which is
//! all the trace needs to keep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{sample_losses, LossKind, Targets};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - h * h,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("bias must be finite"));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    /// Layer with zero bias.
    pub fn unbiased(weight: Matrix, activation: Activation) -> Self {
        let bias = vec![0.0; weight.rows()];
        Layer {
            weight,
            bias,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul_transposed(&self.weight).expect("layer dimensions checked");
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        z
    }

    fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| self.activation.apply(crate::linalg::dot(w, x) + b))
            .collect()
    }
}

/// Architecture description for [`MlpEncoderDecoder::init`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Output width of each encoder layer; the last entry is the
    /// representation dimension.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation, output_dim: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden,
            activation,
            output_dim,
        }
    }
}

/// Per-layer post-activation outputs for a batch, plus the batch itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    input: Matrix,
    layers: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Number of encoder layers traced.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Output of encoder layer `l` (0-based), i.e. the prefix map `φ^(1:l+1)`.
    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// Final encoder output `φ(x)`.
    pub fn representation(&self) -> &Matrix {
        self.layers.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> Self {
        LayerGrad {
            weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

/// Gradients laid out like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerGrad>,
    pub decoder: LayerGrad,
}

impl Gradients {
    pub fn zeros_like(net: &MlpEncoderDecoder) -> Self {
        Gradients {
            encoder: net.encoder.iter().map(LayerGrad::zeros_like).collect(),
            decoder: LayerGrad::zeros_like(&net.decoder),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &LayerGrad> {
        self.encoder.iter().chain(core::iter::once(&self.decoder))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad> {
        self.encoder.iter_mut().chain(core::iter::once(&mut self.decoder))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.add_scaled(alpha, &b.weight).expect("matching layouts");
            crate::linalg::axpy(alpha, &b.bias, &mut a.bias);
        }
    }

    /// Flattened in parameter order (per layer: weights row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&g| g == 0.0)
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backprop {
    pub grads: Gradients,
    /// Gradient with respect to the batch inputs.
    pub input: Matrix,
}

/// Extra gradient injected at an encoder layer output during backprop.
#[derive(Clone, Debug)]
pub struct LayerUpstream {
    pub layer: usize,
    pub grad: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpEncoderDecoder {
    encoder: Vec<Layer>,
    decoder: Layer,
}

impl MlpEncoderDecoder {
    pub fn new(encoder: Vec<Layer>, decoder: Layer) -> Result<Self> {
        for (i, pair) in encoder.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "encoder layer {i} outputs {} but layer {} takes {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        if let Some(last) = encoder.last() {
            if last.output_dim() != decoder.input_dim() {
                return Err(Error::shape(format!(
                    "representation dim {} but decoder takes {}",
                    last.output_dim(),
                    decoder.input_dim()
                )));
            }
        } else {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        if decoder.activation != Activation::Identity {
            return Err(Error::invalid("decoder must be linear"));
        }
        Ok(MlpEncoderDecoder { encoder, decoder })
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init(spec: &ModelSpec, rng: &mut RngState) -> Result<Self> {
        if spec.hidden.is_empty() || spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::invalid("model spec needs input, hidden and output widths"));
        }
        let mut layer = |fan_in: usize, fan_out: usize, act: Activation| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let mut draw = || bound * (2.0 * rng.uniform() - 1.0);
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| draw());
            let bias = (0..fan_out).map(|_| draw()).collect();
            Layer {
                weight,
                bias,
                activation: act,
            }
        };
        let mut encoder = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        for &w in &spec.hidden {
            encoder.push(layer(fan_in, w, spec.activation));
            fan_in = w;
        }
        let decoder = layer(fan_in, spec.output_dim, Activation::Identity);
        Self::new(encoder, decoder)
    }

    /// Stack of identity-activation, zero-bias layers with a linear head.
    pub fn linear(weights: Vec<Matrix>, decoder: Matrix) -> Result<Self> {
        Self::new(
            weights
                .into_iter()
                .map(|w| Layer::unbiased(w, Activation::Identity))
                .collect(),
            Layer::unbiased(decoder, Activation::Identity),
        )
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &Layer {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut [Layer] {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Layer {
        &mut self.decoder
    }

    /// Number of encoder layers.
    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].input_dim()
    }

    pub fn representation_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Predictions (`n × output_dim`) and every intermediate representation.
    pub fn forward_with_trace(&self, x: &Matrix) -> Result<(Matrix, ActivationTrace)> {
        self.check_input(x)?;
        let mut layers: Vec<Matrix> = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let h = layer.forward(layers.last().unwrap_or(x));
            layers.push(h);
        }
        let pred = self.decoder.forward(layers.last().expect("nonempty encoder"));
        Ok((
            pred,
            ActivationTrace {
                input: x.clone(),
                layers,
            },
        ))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_trace(x)?.0)
    }

    /// Final representation `φ(x)`.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = self.encoder[0].forward(x);
        for layer in &self.encoder[1..] {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Every prefix representation `φ^(1:ℓ)(x)` for `ℓ = 1..=depth`.
    pub fn encode_prefixes(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        Ok(self.forward_with_trace(x)?.1.layers)
    }

    /// Single-input encoding, cheaper than the batch path.
    pub fn encode_row(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.encoder[0].forward_row(x);
        for layer in &self.encoder[1..] {
            h = layer.forward_row(&h);
        }
        h
    }

    fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if trace.layers.len() != self.encoder.len() {
            return Err(Error::MissingTrace(format!(
                "trace has {} layers, network has {}",
                trace.layers.len(),
                self.encoder.len()
            )));
        }
        self.check_input(&trace.input).map_err(|_| Error::MissingTrace("input width differs".into()))?;
        let n = trace.input.rows();
        for (l, (h, layer)) in trace.layers.iter().zip(&self.encoder).enumerate() {
            if h.shape() != (n, layer.output_dim()) {
                return Err(Error::MissingTrace(format!("layer {l} has shape {:?}", h.shape())));
            }
        }
        Ok(())
    }

    /// Reverse-mode pass through a recorded trace.
    ///
    /// `prediction` is `∂L/∂pred` (`n × output_dim`); `extra` adds gradients
    /// arriving directly at encoder layer outputs, which is how
    /// representation-space penalties enter.
    pub fn backward(
        &self,
        trace: &ActivationTrace,
        prediction: Option<&Matrix>,
        extra: &[LayerUpstream],
    ) -> Result<Backprop> {
        self.check_trace(trace)?;
        let n = trace.input.rows();
        let depth = self.encoder.len();
        let mut grads = Gradients::zeros_like(self);
        let rep = trace.representation();

        let mut g = match prediction {
            Some(up) => {
                if up.shape() != (n, self.output_dim()) {
                    return Err(Error::shape(format!(
                        "upstream gradient {:?}, expected ({n}, {})",
                        up.shape(),
                        self.output_dim()
                    )));
                }
                grads.decoder.weight = up.transposed_matmul(rep)?;
                grads.decoder.bias = up.column_sums();
                up.matmul(&self.decoder.weight)?
            }
            None => Matrix::zeros(n, self.representation_dim()),
        };

        for up in extra {
            if up.layer >= depth {
                return Err(Error::invalid(format!("no encoder layer {}", up.layer)));
            }
            if up.grad.shape() != trace.layers[up.layer].shape() {
                return Err(Error::shape(format!("layer {} upstream has wrong shape", up.layer)));
            }
        }

        for l in (0..depth).rev() {
            for up in extra.iter().filter(|u| u.layer == l) {
                g.add_scaled(1.0, &up.grad)?;
            }
            let layer = &self.encoder[l];
            let h = &trace.layers[l];
            let mut dz = g;
            for (d, &hv) in dz.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *d *= layer.activation.derivative_from_output(hv);
            }
            let below = if l == 0 { &trace.input } else { &trace.layers[l - 1] };
            grads.encoder[l].weight = dz.transposed_matmul(below)?;
            grads.encoder[l].bias = dz.column_sums();
            g = dz.matmul(&layer.weight)?;
        }
        Ok(Backprop { grads, input: g })
    }

    /// Encoder Jacobian `∂φ/∂x` at a single input (`rep_dim × input_dim`).
    pub fn encoder_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        Ok(self.prefix_jacobians(x)?.pop().expect("nonempty encoder"))
    }

    /// Jacobians of every prefix map `φ^(1:ℓ)` at a single input.
    pub fn prefix_jacobians(&self, x: &[f64]) -> Result<Vec<Matrix>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut out = Vec::with_capacity(self.encoder.len());
        let mut h = x.to_vec();
        let mut jac: Option<Matrix> = None;
        for layer in &self.encoder {
            h = layer.forward_row(&h);
            // diag(act'(h)) · W · J_prev
            let mut local = layer.weight.clone();
            for (i, &hv) in h.iter().enumerate() {
                let d = layer.activation.derivative_from_output(hv);
                local.row_mut(i).iter_mut().for_each(|w| *w *= d);
            }
            let j = match &jac {
                Some(prev) => local.matmul(prev)?,
                None => local,
            };
            out.push(j.clone());
            jac = Some(j);
        }
        Ok(out)
    }

    /// Per-row gradient `∇_x ℓ(f(x_i), y_i)` of the per-sample loss.
    pub fn input_gradient(&self, x: &Matrix, targets: &Targets, loss: LossKind) -> Result<Matrix> {
        let (pred, trace) = self.forward_with_trace(x)?;
        let s = sample_losses(loss, &pred, targets)?;
        Ok(self.backward(&trace, Some(&s.grad), &[])?.input)
    }

    /// Mean task loss over a batch.
    pub fn loss(&self, x: &Matrix, targets: &Targets, loss: LossKind) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(sample_losses(loss, &pred, targets)?.mean())
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(core::iter::once(&self.decoder))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder.iter_mut().chain(core::iter::once(&mut self.decoder))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    /// Parameters in declaration order: per layer (encoder first, decoder
    /// last) the row-major weights followed by the bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in self.layers() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.parameter_count()
            )));
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight.as_mut_slice().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Plain gradient step `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        for (l, g) in self.layers_mut().zip(grads.layers()) {
            l.weight.add_scaled(-learning_rate, &g.weight).expect("matching layouts");
            crate::linalg::axpy(-learning_rate, &g.bias, &mut l.bias);
        }
    }
}
