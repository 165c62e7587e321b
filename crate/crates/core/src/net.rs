//! Feed-forward generator over frozen signed-constant weights.
//!
//! Every weight of layer `l` is `±sqrt(2 / fan_in_l)`; only the sign is
//! random. Training never touches the weights: a gate (a binary mask, or the
//! Bernoulli probabilities in the relaxed mode) multiplies them elementwise,
//! and gradients flow back to the scores that parametrize the gate.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{BernoulliParams, BinaryMask};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    /// Wire code used by the artifact format.
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::None => x,
        }
    }

    /// Derivative expressed through the pre- and post-activation values.
    #[inline]
    pub fn derivative<T: Real>(self, pre: T, post: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - post * post,
            Activation::None => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
        }
    }

    pub fn num_weights(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawArch", into = "RawArch")]
pub struct GeneratorArch {
    latent_dim: usize,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawArch {
    latent_dim: usize,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawArch> for GeneratorArch {
    type Error = Error;
    fn try_from(raw: RawArch) -> Result<Self> {
        GeneratorArch::new(raw.latent_dim, raw.layers)
    }
}

impl From<GeneratorArch> for RawArch {
    fn from(arch: GeneratorArch) -> Self {
        RawArch {
            latent_dim: arch.latent_dim,
            layers: arch.layers,
        }
    }
}

impl GeneratorArch {
    pub fn new(latent_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("generator needs at least one layer"));
        }
        if latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        let mut width = latent_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.fan_in == 0 || layer.fan_out == 0 {
                return Err(Error::config(format!("layer {l} has a zero fan")));
            }
            if layer.fan_in != width {
                return Err(Error::config(format!(
                    "layer {l} fan_in {} does not chain with previous width {width}",
                    layer.fan_in
                )));
            }
            width = layer.fan_out;
        }
        Ok(Self { latent_dim, layers })
    }

    /// Fully connected stack with relu hidden layers and a tanh output.
    pub fn mlp(latent_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        Self::mlp_with_output(latent_dim, hidden, output_dim, Activation::Tanh)
    }

    pub fn mlp_with_output(
        latent_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        output_activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = latent_dim;
        for &h in hidden {
            layers.push(LayerSpec::new(width, h, Activation::Relu));
            width = h;
        }
        layers.push(LayerSpec::new(width, output_dim, output_activation));
        Self::new(latent_dim, layers)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total number of maskable weights `d`.
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_weights).sum()
    }

    /// Flat index range of each layer.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.num_weights();
                start = r.end;
                r
            })
            .collect()
    }
}

/// A batch of row vectors of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<T>(Array2<T>);

impl<T: Real> SampleBatch<T> {
    pub fn new(rows: Array2<T>) -> Self {
        Self(rows)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::layout("sample batch row", dim, bad.len()));
        }
        let flat: Vec<T> = rows.iter().flatten().copied().collect();
        Ok(Self(
            Array2::from_shape_vec((rows.len(), dim), flat).expect("shape checked"),
        ))
    }

    /// Standard normal latent batch.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        use rand_distr::StandardNormal;
        Self(Array2::from_shape_simple_fn((rows, dim), || {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        }))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.0
    }

    pub fn into_array(self) -> Array2<T> {
        self.0
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0
            .row(i)
            .to_slice()
            .expect("sample batches are row-major")
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self(self.0.select(ndarray::Axis(0), indices))
    }
}

/// What multiplies the frozen weights in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gate<'a, T> {
    /// Sampled binary mask: effective weights are exactly `0` or `±scale`.
    Mask(&'a BinaryMask),
    /// Relaxed mode: weights scaled by their keep probability.
    Probs(&'a BernoulliParams<T>),
}

impl<T: Real> Gate<'_, T> {
    fn len(&self) -> usize {
        match self {
            Gate::Mask(m) => m.len(),
            Gate::Probs(p) => p.len(),
        }
    }

    fn layer_values(&self, range: Range<usize>, shape: (usize, usize)) -> Array2<T> {
        let values: Vec<T> = match self {
            Gate::Mask(m) => range
                .map(|i| if m.get(i) { T::one() } else { T::zero() })
                .collect(),
            Gate::Probs(p) => p.as_slice()[range].to_vec(),
        };
        Array2::from_shape_vec(shape, values).expect("layer range matches shape")
    }
}

/// Frozen signed-constant initialization `W_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedConstantWeights<T> {
    arch: GeneratorArch,
    seed: u64,
    scales: Vec<T>,
    signs: BinaryMask,
    /// `±scale` per layer, `[fan_out, fan_in]`.
    dense: Vec<Array2<T>>,
}

/// Kaiming-normal standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_scale<T: Real>(fan_in: usize) -> T {
    (T::lit(2.0) / T::lit(fan_in as f64)).sqrt()
}

/// Draws one uniform sign bit per weight from the `(seed, SignInit)` stream.
/// Bit 1 means `+scale`.
pub fn init_signed_constant<T: Real>(arch: &GeneratorArch, seed: u64) -> SignedConstantWeights<T> {
    let mut rng = stream(seed, Purpose::SignInit, 0, 0);
    let signs = BinaryMask::from_bits((0..arch.num_weights()).map(|_| rng.random::<bool>()));
    let scales = arch
        .layers()
        .iter()
        .map(|l| kaiming_scale(l.fan_in))
        .collect();
    SignedConstantWeights::from_parts(arch.clone(), seed, scales, signs)
        .expect("freshly drawn parts match the architecture")
}

impl<T: Real> SignedConstantWeights<T> {
    /// Assembles weights from explicit per-layer scales and a sign bitmap.
    pub fn from_parts(
        arch: GeneratorArch,
        seed: u64,
        scales: Vec<T>,
        signs: BinaryMask,
    ) -> Result<Self> {
        if scales.len() != arch.num_layers() {
            return Err(Error::layout(
                "layer scales",
                arch.num_layers(),
                scales.len(),
            ));
        }
        if signs.len() != arch.num_weights() {
            return Err(Error::layout(
                "sign bitmap",
                arch.num_weights(),
                signs.len(),
            ));
        }
        if let Some(l) = scales
            .iter()
            .position(|s| !(*s > T::zero() && s.is_finite()))
        {
            return Err(Error::config(format!("layer {l} scale must be positive")));
        }
        let dense = arch
            .layers()
            .iter()
            .zip(arch.layer_ranges())
            .zip(&scales)
            .map(|((layer, range), &scale)| {
                let values = range
                    .map(|i| if signs.get(i) { scale } else { -scale })
                    .collect();
                Array2::from_shape_vec((layer.fan_out, layer.fan_in), values)
                    .expect("layer range matches shape")
            })
            .collect();
        Ok(Self {
            arch,
            seed,
            scales,
            signs,
            dense,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn signs(&self) -> &BinaryMask {
        &self.signs
    }

    pub fn num_weights(&self) -> usize {
        self.signs.len()
    }

    /// Frozen weight at flat index `i`.
    pub fn weight(&self, i: usize) -> T {
        let ranges = self.arch.layer_ranges();
        let l = ranges
            .iter()
            .position(|r| r.contains(&i))
            .expect("flat index within the weight layout");
        if self.signs.get(i) {
            self.scales[l]
        } else {
            -self.scales[l]
        }
    }

    /// Effective weight matrices `W_init ⊙ gate`, one `[fan_out, fan_in]`
    /// array per layer.
    pub fn effective(&self, gate: Gate<'_, T>) -> Result<Vec<Array2<T>>> {
        if gate.len() != self.num_weights() {
            return Err(Error::layout("gate", self.num_weights(), gate.len()));
        }
        Ok(self
            .dense
            .iter()
            .zip(self.arch.layer_ranges())
            .map(|(w, range)| w * &gate.layer_values(range, w.dim()))
            .collect())
    }

    /// Forward pass keeping every intermediate needed by the backward pass.
    pub fn trace(&self, gate: Gate<'_, T>, latent: &SampleBatch<T>) -> Result<ForwardTrace<T>> {
        if latent.dim() != self.arch.latent_dim() {
            return Err(Error::layout(
                "latent batch",
                self.arch.latent_dim(),
                latent.dim(),
            ));
        }
        let effective = self.effective(gate)?;
        let mut inputs = Vec::with_capacity(effective.len());
        let mut pre = Vec::with_capacity(effective.len());
        let mut h = latent.as_array().clone();
        for (w, layer) in effective.iter().zip(self.arch.layers()) {
            let z = h.dot(&w.t());
            let act = layer.activation;
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(ForwardTrace {
            effective,
            inputs,
            pre,
            output: h,
        })
    }

    /// Gradient of the loss w.r.t. the scores behind the gate probabilities.
    ///
    /// `dL/ds_i = dL/dW_eff_i * W_init_i * theta_i * (1 - theta_i)`, where
    /// `dL/dW_eff` is taken through whichever gate produced `trace`.
    pub fn score_gradient(
        &self,
        trace: &ForwardTrace<T>,
        probs: &BernoulliParams<T>,
        output_grad: &SampleBatch<T>,
    ) -> Result<Vec<T>> {
        if probs.len() != self.num_weights() {
            return Err(Error::layout(
                "probabilities",
                self.num_weights(),
                probs.len(),
            ));
        }
        let out = trace.output.dim();
        if output_grad.as_array().dim() != out {
            return Err(Error::layout(
                "output gradient",
                out.0 * out.1,
                output_grad.rows() * output_grad.dim(),
            ));
        }
        let theta = probs.as_slice();
        let ranges = self.arch.layer_ranges();
        let mut grad = vec![T::zero(); self.num_weights()];
        let mut g = output_grad.as_array().clone();
        for l in (0..self.arch.num_layers()).rev() {
            let act = self.arch.layers()[l].activation;
            let post = if l + 1 < self.arch.num_layers() {
                &trace.inputs[l + 1]
            } else {
                &trace.output
            };
            Zip::from(&mut g)
                .and(&trace.pre[l])
                .and(post)
                .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            let d_eff = g.t().dot(&trace.inputs[l]);
            let slot = &mut grad[ranges[l].clone()];
            for (((out, &dw), &w0), &p) in slot
                .iter_mut()
                .zip(d_eff.iter())
                .zip(self.dense[l].iter())
                .zip(&theta[ranges[l].clone()])
            {
                *out = dw * w0 * p * (T::one() - p);
            }
            if l > 0 {
                g = g.dot(&trace.effective[l]);
            }
        }
        Ok(grad)
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    effective: Vec<Array2<T>>,
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn output(&self) -> SampleBatch<T> {
        SampleBatch(self.output.clone())
    }

    pub fn effective_weights(&self) -> &[Array2<T>] {
        &self.effective
    }
}

pub fn forward<T: Real>(
    weights: &SignedConstantWeights<T>,
    gate: Gate<'_, T>,
    latent: &SampleBatch<T>,
) -> Result<SampleBatch<T>> {
    Ok(SampleBatch(weights.trace(gate, latent)?.output))
}

/// Straight-through score gradient with the mask replaced by its expectation
/// in both the forward and the backward pass.
pub fn backward_scores<T: Real>(
    weights: &SignedConstantWeights<T>,
    probs: &BernoulliParams<T>,
    latent: &SampleBatch<T>,
    output_grad: &SampleBatch<T>,
) -> Result<Vec<T>> {
    let trace = weights.trace(Gate::Probs(probs), latent)?;
    weights.score_gradient(&trace, probs, output_grad)
}

/// Straight-through score gradient where the forward pass used a sampled mask.
pub fn backward_scores_sampled<T: Real>(
    weights: &SignedConstantWeights<T>,
    mask: &BinaryMask,
    probs: &BernoulliParams<T>,
    latent: &SampleBatch<T>,
    output_grad: &SampleBatch<T>,
) -> Result<Vec<T>> {
    let trace = weights.trace(Gate::Mask(mask), latent)?;
    weights.score_gradient(&trace, probs, output_grad)
}
