//! Moment-matching objective over a frozen embedding, the optimizers that
//! drive it, and a kernel two-sample estimate used for evaluation.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::SampleBatch;
use crate::rng::{stream, Purpose};
use crate::scalar::Real;

/// Frozen feature map the moments are matched in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    Identity {
        dim: usize,
    },
    /// Fully connected relu network with Gaussian weights and biases. The
    /// first layer uses `weight_std`, deeper layers `sqrt(2 / fan_in)`.
    RandomFeatures {
        input_dim: usize,
        hidden: Vec<usize>,
        weight_std: f64,
        bias_std: f64,
        seed: u64,
    },
}

impl EmbeddingSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            EmbeddingSpec::Identity { dim } => *dim,
            EmbeddingSpec::RandomFeatures { input_dim, .. } => *input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EmbeddingSpec::Identity { dim } => *dim,
            EmbeddingSpec::RandomFeatures {
                input_dim, hidden, ..
            } => hidden.last().copied().unwrap_or(*input_dim),
        }
    }

    pub fn build<T: Real>(&self) -> Result<Embedding<T>> {
        match self {
            EmbeddingSpec::Identity { dim } => {
                if *dim == 0 {
                    return Err(Error::config("identity embedding needs dim > 0"));
                }
                Ok(Embedding {
                    input_dim: *dim,
                    layers: Vec::new(),
                })
            }
            EmbeddingSpec::RandomFeatures {
                input_dim,
                hidden,
                weight_std,
                bias_std,
                seed,
            } => {
                if *input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::config("random features need positive widths"));
                }
                if !(*weight_std > 0.0) || !(*bias_std >= 0.0) {
                    return Err(Error::config("random feature scales must be positive"));
                }
                let mut width = *input_dim;
                let layers = hidden
                    .iter()
                    .enumerate()
                    .map(|(l, &out)| {
                        let mut rng = stream(*seed, Purpose::Embedding, l as u32, 0);
                        let std = if l == 0 {
                            *weight_std
                        } else {
                            (2.0 / width as f64).sqrt()
                        };
                        let w = Array2::from_shape_simple_fn((width, out), || {
                            T::lit(std * rng.sample::<f64, _>(StandardNormal))
                        });
                        let b = Array1::from_shape_simple_fn(out, || {
                            T::lit(bias_std * rng.sample::<f64, _>(StandardNormal))
                        });
                        width = out;
                        (w, b)
                    })
                    .collect();
                Ok(Embedding {
                    input_dim: *input_dim,
                    layers,
                })
            }
        }
    }
}

/// Realized embedding network. Each layer computes `relu(x W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    input_dim: usize,
    layers: Vec<(Array2<T>, Array1<T>)>,
}

/// Intermediates of an embedding pass.
#[derive(Debug, Clone)]
pub struct EmbedTrace<T> {
    pre: Vec<Array2<T>>,
    features: SampleBatch<T>,
}

impl<T> EmbedTrace<T> {
    pub fn features(&self) -> &SampleBatch<T> {
        &self.features
    }
}

impl<T: Real> Embedding<T> {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_dim, |(w, _)| w.ncols())
    }

    /// Hand-built embedding, mostly for tests. `layers[l] = (W [in, out], b)`.
    pub fn from_layers(input_dim: usize, layers: Vec<(Array2<T>, Array1<T>)>) -> Result<Self> {
        let mut width = input_dim;
        for (w, b) in &layers {
            if w.nrows() != width {
                return Err(Error::layout("embedding layer", width, w.nrows()));
            }
            if b.len() != w.ncols() {
                return Err(Error::layout("embedding bias", w.ncols(), b.len()));
            }
            width = w.ncols();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn embed(&self, batch: &SampleBatch<T>) -> Result<SampleBatch<T>> {
        Ok(self.trace(batch)?.features)
    }

    pub fn trace(&self, batch: &SampleBatch<T>) -> Result<EmbedTrace<T>> {
        if batch.dim() != self.input_dim {
            return Err(Error::layout(
                "embedding input",
                self.input_dim,
                batch.dim(),
            ));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = batch.as_array().clone();
        for (w, b) in &self.layers {
            let z = h.dot(w) + b;
            h = z.mapv(|v| v.max(T::zero()));
            pre.push(z);
        }
        Ok(EmbedTrace {
            pre,
            features: SampleBatch::new(h),
        })
    }

    /// Pulls a gradient w.r.t. the features back to the embedding input.
    pub fn backward(&self, trace: &EmbedTrace<T>, feature_grad: &Array2<T>) -> Array2<T> {
        let mut g = feature_grad.clone();
        for ((w, _), z) in self.layers.iter().zip(&trace.pre).rev() {
            Zip::from(&mut g).and(z).for_each(|g, &z| {
                if z <= T::zero() {
                    *g = T::zero();
                }
            });
            g = g.dot(&w.t());
        }
        g
    }
}

/// Per-feature mean and (unbiased) variance of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats<T> {
    pub mean: Vec<T>,
    pub var_diag: Vec<T>,
}

impl<T: Real> MomentStats<T> {
    /// Variance uses the `n - 1` denominator and is zero for a single row.
    pub fn of(batch: &SampleBatch<T>) -> Self {
        let x = batch.as_array();
        let n = x.nrows();
        let mean = x
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(x.ncols()));
        let var_diag = if n >= 2 {
            let centered = x - &mean;
            (centered.mapv(|v| v * v).sum_axis(Axis(0)) / T::lit((n - 1) as f64)).to_vec()
        } else {
            vec![T::zero(); x.ncols()]
        };
        Self {
            mean: mean.to_vec(),
            var_diag,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `[mean..., var...]`, the vector tracked by AMA.
    pub fn to_flat(&self) -> Vec<T> {
        self.mean.iter().chain(&self.var_diag).copied().collect()
    }

    pub fn from_flat(flat: &[T]) -> Self {
        let p = flat.len() / 2;
        Self {
            mean: flat[..p].to_vec(),
            var_diag: flat[p..].iter().map(|&v| v.max(T::zero())).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MmdLoss<T> {
    pub loss: T,
    /// Gradient w.r.t. the fake features, same shape as the fake batch.
    pub grad: Array2<T>,
    /// Set when a batch had fewer than two rows and the variance term was
    /// dropped.
    pub covariance_skipped: bool,
}

/// `||mean(real) - mean(fake)||^2 + ||var(real) - var(fake)||^2` with its
/// analytic gradient w.r.t. the fake features.
pub fn mmd_loss<T: Real>(real: &SampleBatch<T>, fake: &SampleBatch<T>) -> Result<MmdLoss<T>> {
    let target = MomentStats::of(real);
    mmd_loss_against(&target, real.rows() >= 2, fake)
}

/// Moment-matching loss against precomputed target statistics.
pub fn mmd_loss_against<T: Real>(
    target: &MomentStats<T>,
    target_has_variance: bool,
    fake: &SampleBatch<T>,
) -> Result<MmdLoss<T>> {
    if target.dim() != fake.dim() {
        return Err(Error::layout("feature dimension", target.dim(), fake.dim()));
    }
    let n = fake.rows();
    if n == 0 {
        return Err(Error::config("fake batch is empty"));
    }
    let x = fake.as_array();
    let two = T::lit(2.0);
    let fake_stats = MomentStats::of(fake);
    let mean_diff: Array1<T> = Array1::from_iter(
        target
            .mean
            .iter()
            .zip(&fake_stats.mean)
            .map(|(&r, &f)| r - f),
    );
    let mut loss = mean_diff.iter().map(|&v| v * v).sum::<T>();
    // d/dy_ij of the mean term: -2 (mu_r - mu_f)_j / n
    let mean_coeff = mean_diff.mapv(|v| -two * v / T::lit(n as f64));
    let mut grad = Array2::from_shape_fn(x.dim(), |(_, j)| mean_coeff[j]);

    let covariance_skipped = !(target_has_variance && n >= 2);
    if !covariance_skipped {
        let var_diff: Array1<T> = Array1::from_iter(
            target
                .var_diag
                .iter()
                .zip(&fake_stats.var_diag)
                .map(|(&r, &f)| r - f),
        );
        loss += var_diff.iter().map(|&v| v * v).sum::<T>();
        // d var_f_j / d y_ij = 2 (y_ij - mu_f_j) / (n - 1)
        let denom = T::lit((n - 1) as f64);
        let mu = Array1::from(fake_stats.mean);
        Zip::indexed(&mut grad).and(x).for_each(|(_, j), g, &y| {
            *g += -two * var_diff[j] * two * (y - mu[j]) / denom;
        });
    }
    Ok(MmdLoss {
        loss,
        grad,
        covariance_skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings used for score updates.
    pub fn scores() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::scores()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            step_count: 0,
            config,
        }
    }

    /// Bias-corrected Adam step. Returns the delta to add to the parameters.
    pub fn step(&mut self, grad: &[T]) -> Result<Vec<T>> {
        if grad.len() != self.m.len() {
            return Err(Error::layout("adam gradient", self.m.len(), grad.len()));
        }
        self.step_count += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let t = self.step_count as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        Ok(self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), &g)| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                -lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect())
    }
}

/// Adam moving average: `m <- m - rate * ADAM(m - observed)`, i.e. Adam on
/// `0.5 ||m - observed||^2` with the step scaled by `rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmaState<T> {
    pub m: Vec<T>,
    pub adam: AdamState<T>,
    pub rate: T,
}

/// Default AMA rate.
pub const AMA_RATE: f64 = 0.005;

impl<T: Real> AmaState<T> {
    pub fn new(initial: Vec<T>, rate: T) -> Self {
        let adam = AdamState::new(
            initial.len(),
            AdamConfig {
                lr: 1.0,
                ..AdamConfig::scores()
            },
        );
        Self {
            m: initial,
            adam,
            rate,
        }
    }

    pub fn update(&mut self, observed: &[T]) -> Result<&[T]> {
        if observed.len() != self.m.len() {
            return Err(Error::layout("AMA statistic", self.m.len(), observed.len()));
        }
        let residual: Vec<T> = self.m.iter().zip(observed).map(|(&m, &d)| m - d).collect();
        let delta = self.adam.step(&residual)?;
        for (m, d) in self.m.iter_mut().zip(delta) {
            *m += self.rate * d;
        }
        Ok(&self.m)
    }
}

/// Unbiased MMD² between two samples under a Gaussian kernel
/// `exp(-||x - y||² / (2 h²))`. May be slightly negative.
pub fn rbf_mmd<T: Real>(a: &SampleBatch<T>, b: &SampleBatch<T>, bandwidth: T) -> Result<T> {
    if !(bandwidth > T::zero()) {
        return Err(Error::config("kernel bandwidth must be positive"));
    }
    if a.dim() != b.dim() {
        return Err(Error::layout("rbf_mmd dimension", a.dim(), b.dim()));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::config("rbf_mmd needs at least two rows per sample"));
    }
    let gamma = T::one() / (T::lit(2.0) * bandwidth * bandwidth);
    let kernel = |x: &[T], y: &[T]| {
        let d2: T = x.iter().zip(y).map(|(&u, &v)| (u - v) * (u - v)).sum();
        (-gamma * d2).exp()
    };
    let within = |s: &SampleBatch<T>| {
        let n = s.rows();
        let mut acc = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                acc += kernel(s.row(i), s.row(j));
            }
        }
        T::lit(2.0) * acc / T::lit((n * (n - 1)) as f64)
    };
    let mut cross = T::zero();
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += kernel(a.row(i), b.row(j));
        }
    }
    cross /= T::lit((a.rows() * b.rows()) as f64);
    Ok(within(a) + within(b) - T::lit(2.0) * cross)
}
