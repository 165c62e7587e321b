//! Scores, Bernoulli parameters and binary masks, and the conversions
//! between them.
//!
//! All three share the flat weight layout of a [`GeneratorArch`]: layers are
//! concatenated in architecture order and each layer is stored row-major as
//! `[fan_out, fan_in]`.
//!
//! [`GeneratorArch`]: crate::net::GeneratorArch

use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default clamp used when inverting probabilities back to scores.
pub const DEFAULT_SCORE_CLAMP: f64 = 0.01;

/// Real-valued importance score per maskable weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreState<T>(Vec<T>);

impl<T: Real> ScoreState<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("score {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn constant(d: usize, value: T) -> Self {
        Self(vec![value; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

/// Per-weight probability that the corresponding mask bit is set.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliParams<T>(Vec<T>);

impl<T: Real> BernoulliParams<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values
            .iter()
            .position(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::config(format!(
                "probability {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn constant(d: usize, value: T) -> Self {
        assert!(value >= T::zero() && value <= T::one());
        Self(vec![value; d])
    }

    /// Interprets a mask as degenerate probabilities (0 or 1).
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self(
            mask.iter()
                .map(|b| if b { T::one() } else { T::zero() })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        debug_assert!(values.iter().all(|&v| v >= T::zero() && v <= T::one()));
        Self(values)
    }
}

/// Bit-packed binary vector. Bit `i` lives in byte `i / 8` at bit position
/// `i % 8` (little-endian bit order); unused high bits of the last byte are
/// always zero.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    bytes: Vec<u8>,
    len: usize,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask[{}; ", self.len)?;
        for b in self.iter().take(64) {
            f.write_str(if b { "1" } else { "0" })?;
        }
        if self.len > 64 {
            f.write_str("...")?;
        }
        f.write_str("]")
    }
}

impl BinaryMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self {
            bytes: vec![0xff; len.div_ceil(8)],
            len,
        };
        m.clear_padding();
        m
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut bytes = Vec::new();
        let mut len = 0;
        for bit in bits {
            if len % 8 == 0 {
                bytes.push(0);
            }
            if bit {
                bytes[len / 8] |= 1 << (len % 8);
            }
            len += 1;
        }
        Self { bytes, len }
    }

    /// Rebuilds a mask from its packed bytes. Padding bits must be zero so
    /// that re-packing is byte-identical.
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::layout(
                "packed mask bytes",
                len.div_ceil(8),
                bytes.len(),
            ));
        }
        let m = Self { bytes, len };
        if !len.is_multiple_of(8) && m.bytes[len / 8] >> (len % 8) != 0 {
            return Err(Error::config("non-zero padding bits in packed mask"));
        }
        Ok(m)
    }

    fn clear_padding(&mut self) {
        if !self.len.is_multiple_of(8) {
            let last = self.len / 8;
            self.bytes[last] &= (1u8 << (self.len % 8)) - 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(
            i < self.len,
            "bit {i} out of range for mask of {}",
            self.len
        );
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(
            i < self.len,
            "bit {i} out of range for mask of {}",
            self.len
        );
        if bit {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.bytes[i / 8] >> (i % 8) & 1 == 1)
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &BinaryMask) -> Result<usize> {
        self.check_len(other)?;
        Ok(self
            .bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }

    /// Number of positions set in both masks.
    pub fn overlap(&self, other: &BinaryMask) -> Result<usize> {
        self.check_len(other)?;
        Ok(self
            .bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn complement(&self) -> Self {
        let mut m = Self {
            bytes: self.bytes.iter().map(|b| !b).collect(),
            len: self.len,
        };
        m.clear_padding();
        m
    }

    /// Copies out `range` as a standalone, freshly packed mask.
    pub fn slice(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.len);
        Self::from_bits(range.map(|i| self.get(i)))
    }

    pub fn concat<'a, I: IntoIterator<Item = &'a BinaryMask>>(parts: I) -> Self {
        Self::from_bits(parts.into_iter().flat_map(|m| m.iter()))
    }

    fn check_len(&self, other: &BinaryMask) -> Result<()> {
        if self.len != other.len {
            return Err(Error::layout("binary mask", self.len, other.len));
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

pub fn scores_to_probs<T: Real>(s: &ScoreState<T>) -> BernoulliParams<T> {
    BernoulliParams(s.0.iter().map(|&v| sigmoid(v)).collect())
}

/// Inverse sigmoid after clamping every probability to `[clamp, 1 - clamp]`.
pub fn probs_to_scores<T: Real>(theta: &BernoulliParams<T>, clamp: T) -> ScoreState<T> {
    assert!(
        clamp > T::zero() && clamp < T::lit(0.5),
        "score clamp must lie in (0, 0.5)"
    );
    let hi = T::one() - clamp;
    ScoreState(
        theta
            .0
            .iter()
            .map(|&p| logit(p.max(clamp).min(hi)))
            .collect(),
    )
}

/// Independent Bernoulli draw per coordinate: bit `i` is set iff a uniform
/// draw in `[0, 1)` falls below `theta[i]`.
pub fn sample_mask<T: Real, R: Rng + ?Sized>(
    theta: &BernoulliParams<T>,
    rng: &mut R,
) -> BinaryMask {
    BinaryMask::from_bits(theta.0.iter().map(|&p| rng.random::<f64>() < p.as_f64()))
}

/// How a client (or the server, for the final supermask) turns probabilities
/// into a binary mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SelectionMode {
    #[default]
    Bernoulli,
    /// Keep the `percent`% highest-probability weights.
    TopK { percent: f64 },
    /// Keep `percent`% of weights chosen uniformly, ignoring the scores.
    Random { percent: f64 },
    /// Every weight kept.
    Dense,
}

impl SelectionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionMode::TopK { percent } | SelectionMode::Random { percent } => {
                if !(percent > 0.0 && percent <= 100.0) {
                    return Err(Error::config(format!(
                        "selection percentage {percent} outside (0, 100]"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn kept_count(percent: f64, d: usize) -> usize {
    // exact ceil(k*d/100) for percentages given to a few decimals
    let raw = percent * d as f64 / 100.0;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
    .min(d)
}

/// Mask selection. Top-k ranks by probability, which orders weights exactly
/// as their scores do; ties go to the lower flat index.
pub fn select_mask<T: Real, R: Rng + ?Sized>(
    mode: SelectionMode,
    theta: &BernoulliParams<T>,
    rng: &mut R,
) -> Result<BinaryMask> {
    mode.validate()?;
    let d = theta.len();
    Ok(match mode {
        SelectionMode::Bernoulli => sample_mask(theta, rng),
        SelectionMode::Dense => BinaryMask::ones(d),
        SelectionMode::TopK { percent } => {
            let k = kept_count(percent, d);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| {
                theta.0[b]
                    .partial_cmp(&theta.0[a])
                    .expect("probabilities are comparable")
                    .then(a.cmp(&b))
            });
            let mut mask = BinaryMask::zeros(d);
            for &i in &order[..k] {
                mask.set(i, true);
            }
            mask
        }
        SelectionMode::Random { percent } => {
            let k = kept_count(percent, d);
            let mut mask = BinaryMask::zeros(d);
            for i in index::sample(rng, d, k) {
                mask.set(i, true);
            }
            mask
        }
    })
}
