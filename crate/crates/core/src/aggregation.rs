//! Server-side aggregation: mask averaging, mask-aware dynamic moving
//! average (MADA), and hybrid per-layer score/mask uplinks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{probs_to_scores, scores_to_probs, BernoulliParams, BinaryMask, ScoreState};
use crate::net::GeneratorArch;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Hamming,
    Cosine,
    /// No moving average: the fresh aggregate replaces the state (`lambda = 1`).
    Off,
}

/// Where the MADA convex combination is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MadaSpace {
    /// Interpolate scores (logits), anchored at the broadcast scores.
    #[default]
    Score,
    /// Interpolate Bernoulli parameters directly.
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MadaConfig {
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub space: MadaSpace,
}

impl MadaConfig {
    pub fn off() -> Self {
        Self {
            metric: DistanceMetric::Off,
            space: MadaSpace::Score,
        }
    }
}

/// Which end of the network the score layers are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridPath {
    Forward,
    /// Score layers are the deepest ones, nearest the output.
    #[default]
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Percentage of layers that upload probabilities instead of masks.
    #[serde(default)]
    pub alpha_percent: f64,
    #[serde(default)]
    pub path: HybridPath,
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.alpha_percent) {
            return Err(Error::config(format!(
                "hybrid alpha {} outside [0, 100]",
                self.alpha_percent
            )));
        }
        Ok(())
    }
}

/// Server state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState<T> {
    /// Scores broadcast at the start of the next round.
    pub scores: ScoreState<T>,
    pub theta: BernoulliParams<T>,
    /// `theta` of the round before.
    pub prev_theta: BernoulliParams<T>,
    /// Last sampled global mask `M^g`.
    pub prev_global_mask: BinaryMask,
    pub round: u32,
}

impl<T: Real> GlobalState<T> {
    pub fn new(scores: ScoreState<T>, global_mask: BinaryMask) -> Result<Self> {
        if scores.len() != global_mask.len() {
            return Err(Error::layout(
                "global mask",
                scores.len(),
                global_mask.len(),
            ));
        }
        let theta = scores_to_probs(&scores);
        Ok(Self {
            prev_theta: theta.clone(),
            theta,
            scores,
            prev_global_mask: global_mask,
            round: 0,
        })
    }
}

/// Elementwise mean of the client masks.
pub fn aggregate_masks<T: Real>(masks: &[BinaryMask]) -> Result<BernoulliParams<T>> {
    let tally = MaskTally::from_masks(masks)?;
    Ok(tally.to_probs())
}

/// Exact per-coordinate counts behind a mask average.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTally {
    pub counts: Vec<u32>,
    pub clients: u32,
}

impl MaskTally {
    pub fn from_masks(masks: &[BinaryMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Protocol("no masks to aggregate".into()))?;
        let d = first.len();
        let mut counts = vec![0u32; d];
        for m in masks {
            if m.len() != d {
                return Err(Error::layout("aggregated mask", d, m.len()));
            }
            for (c, bit) in counts.iter_mut().zip(m.iter()) {
                *c += u32::from(bit);
            }
        }
        Ok(Self {
            counts,
            clients: masks.len() as u32,
        })
    }

    pub fn to_probs<T: Real>(&self) -> BernoulliParams<T> {
        let k = T::lit(f64::from(self.clients));
        BernoulliParams::from_vec_unchecked(
            self.counts
                .iter()
                .map(|&c| T::lit(f64::from(c)) / k)
                .collect(),
        )
    }
}

/// Distance in `[0, 1]` between two masks. Hamming is normalized by the mask
/// length. Cosine distance treats one all-zero mask as maximally distant and
/// two all-zero masks as identical.
pub fn mask_distance(a: &BinaryMask, b: &BinaryMask, metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::layout("mask distance", a.len(), b.len()));
    }
    match metric {
        DistanceMetric::Off => Ok(1.0),
        DistanceMetric::Hamming => {
            if a.is_empty() {
                return Ok(0.0);
            }
            Ok(a.hamming(b)? as f64 / a.len() as f64)
        }
        DistanceMetric::Cosine => {
            let (na, nb) = (a.count_ones(), b.count_ones());
            match (na, nb) {
                (0, 0) => Ok(0.0),
                (0, _) | (_, 0) => Ok(1.0),
                _ => {
                    let dot = a.overlap(b)? as f64;
                    let cos = dot / ((na as f64).sqrt() * (nb as f64).sqrt());
                    Ok((1.0 - cos).clamp(0.0, 1.0))
                }
            }
        }
    }
}

/// Convex combination `(1 - lambda) * previous + lambda * fresh`, taken in
/// score space (after inverting the fresh aggregate with `clamp`) or in
/// probability space. Returns the next `(scores, theta)`.
pub fn mada_update<T: Real>(
    prev: &GlobalState<T>,
    fresh: &BernoulliParams<T>,
    lambda: T,
    space: MadaSpace,
    clamp: T,
) -> Result<(ScoreState<T>, BernoulliParams<T>)> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::config(format!(
            "MADA weight {lambda} outside [0, 1]"
        )));
    }
    if fresh.len() != prev.theta.len() {
        return Err(Error::layout(
            "fresh aggregate",
            prev.theta.len(),
            fresh.len(),
        ));
    }
    let keep = T::one() - lambda;
    match space {
        MadaSpace::Score => {
            let fresh_scores = probs_to_scores(fresh, clamp);
            let next: Vec<T> = prev
                .scores
                .as_slice()
                .iter()
                .zip(fresh_scores.as_slice())
                .map(|(&s, &f)| keep * s + lambda * f)
                .collect();
            let scores = ScoreState::new(next)?;
            let theta = scores_to_probs(&scores);
            Ok((scores, theta))
        }
        MadaSpace::Prob => {
            let theta = BernoulliParams::from_vec_unchecked(
                prev.theta
                    .as_slice()
                    .iter()
                    .zip(fresh.as_slice())
                    .map(|(&p, &f)| (keep * p + lambda * f).max(T::zero()).min(T::one()))
                    .collect(),
            );
            Ok((probs_to_scores(&theta, clamp), theta))
        }
    }
}

/// Number of score layers for a hybrid uplink: `alpha * L / 100` rounded half up.
pub fn score_layer_count(num_layers: usize, alpha_percent: f64) -> usize {
    let exact = alpha_percent * num_layers as f64 / 100.0;
    ((exact + 0.5 + 1e-9).floor() as usize).min(num_layers)
}

/// Per-layer flags, `true` for layers that upload probabilities.
pub fn hybrid_select_layers(num_layers: usize, config: &HybridConfig) -> Vec<bool> {
    let count = score_layer_count(num_layers, config.alpha_percent);
    (0..num_layers)
        .map(|l| match config.path {
            HybridPath::Forward => l < count,
            HybridPath::Backward => l >= num_layers - count,
        })
        .collect()
}

/// One layer of an uplink.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Mask(BinaryMask),
    /// Probabilities as transmitted, in 32-bit floats.
    Probs(Vec<f32>),
}

impl LayerPayload {
    pub fn len(&self) -> usize {
        match self {
            LayerPayload::Mask(m) => m.len(),
            LayerPayload::Probs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_score(&self) -> bool {
        matches!(self, LayerPayload::Probs(_))
    }

    /// Information bits: one per weight for masks, 32 for probabilities.
    pub fn payload_bits(&self) -> u64 {
        match self {
            LayerPayload::Mask(m) => m.len() as u64,
            LayerPayload::Probs(p) => 32 * p.len() as u64,
        }
    }
}

/// A client's per-round upload.
///
/// Wire layout (little-endian): `round: u32`, `client_id: u32`, the layer
/// kind bitmap (`ceil(L / 8)` bytes, bit `l` set for a probability layer),
/// then per layer either the byte-padded mask or `d_l` `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkPayload {
    pub round: u32,
    pub client_id: u32,
    pub layers: Vec<LayerPayload>,
}

impl UplinkPayload {
    /// Splits a full mask and probability vector into per-layer payloads.
    pub fn build<T: Real>(
        round: u32,
        client_id: u32,
        arch: &GeneratorArch,
        flags: &[bool],
        mask: &BinaryMask,
        theta: &BernoulliParams<T>,
    ) -> Result<Self> {
        if flags.len() != arch.num_layers() {
            return Err(Error::layout("layer flags", arch.num_layers(), flags.len()));
        }
        if mask.len() != arch.num_weights() || theta.len() != arch.num_weights() {
            return Err(Error::layout("uplink", arch.num_weights(), mask.len()));
        }
        let layers = arch
            .layer_ranges()
            .into_iter()
            .zip(flags)
            .map(|(range, &score)| {
                if score {
                    LayerPayload::Probs(
                        theta.as_slice()[range]
                            .iter()
                            .map(|p| p.as_f64() as f32)
                            .collect(),
                    )
                } else {
                    LayerPayload::Mask(mask.slice(range))
                }
            })
            .collect();
        Ok(Self {
            round,
            client_id,
            layers,
        })
    }

    pub fn layer_kinds(&self) -> Vec<bool> {
        self.layers.iter().map(LayerPayload::is_score).collect()
    }

    pub fn header_bits(&self) -> u64 {
        header_bits(self.layers.len())
    }

    pub fn payload_bits(&self) -> u64 {
        self.layers.iter().map(LayerPayload::payload_bits).sum()
    }

    /// Header plus payload bits.
    pub fn uplink_bits(&self) -> u64 {
        self.header_bits() + self.payload_bits()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(BinaryMask::from_bits(self.layer_kinds()).as_bytes());
        for layer in &self.layers {
            match layer {
                LayerPayload::Mask(m) => out.extend_from_slice(m.as_bytes()),
                LayerPayload::Probs(p) => {
                    for v in p {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Parses a payload whose layer sizes come from `arch`.
    pub fn decode(bytes: &[u8], arch: &GeneratorArch) -> Result<Self> {
        let mut r = crate::artifact::Reader::new(bytes);
        let round = r.u32()?;
        let client_id = r.u32()?;
        let l = arch.num_layers();
        let kinds = BinaryMask::from_bytes(r.take(l.div_ceil(8))?.to_vec(), l)
            .map_err(|e| r.error(e.to_string()))?;
        let mut layers = Vec::with_capacity(l);
        for (i, layer) in arch.layers().iter().enumerate() {
            let d = layer.num_weights();
            if kinds.get(i) {
                let mut p = Vec::with_capacity(d);
                for _ in 0..d {
                    p.push(f32::from_le_bytes(r.array()?));
                }
                layers.push(LayerPayload::Probs(p));
            } else {
                let bytes = r.take(d.div_ceil(8))?.to_vec();
                let m = BinaryMask::from_bytes(bytes, d).map_err(|e| r.error(e.to_string()))?;
                layers.push(LayerPayload::Mask(m));
            }
        }
        r.finish()?;
        Ok(Self {
            round,
            client_id,
            layers,
        })
    }
}

/// Fixed uplink header size for an `L`-layer network.
pub fn header_bits(num_layers: usize) -> u64 {
    64 + 8 * num_layers.div_ceil(8) as u64
}

/// Averages hybrid payloads layer by layer: mask layers as in
/// [`aggregate_masks`], probability layers as the plain mean of the
/// transmitted values. Payloads are combined in client-id order, so the
/// result does not depend on arrival order.
pub fn hybrid_aggregate<T: Real>(
    payloads: &[UplinkPayload],
    flags: &[bool],
    arch: &GeneratorArch,
) -> Result<BernoulliParams<T>> {
    if payloads.is_empty() {
        return Err(Error::Protocol("no payloads to aggregate".into()));
    }
    if flags.len() != arch.num_layers() {
        return Err(Error::layout("layer flags", arch.num_layers(), flags.len()));
    }
    let mut ordered: Vec<&UplinkPayload> = payloads.iter().collect();
    ordered.sort_by_key(|p| p.client_id);
    for p in &ordered {
        if p.layers.len() != flags.len() {
            return Err(Error::Protocol(format!(
                "client {} sent {} layers, expected {}",
                p.client_id,
                p.layers.len(),
                flags.len()
            )));
        }
        for (l, (layer, &score)) in p.layers.iter().zip(flags).enumerate() {
            if layer.is_score() != score {
                return Err(Error::Protocol(format!(
                    "client {} layer {l}: expected {} payload",
                    p.client_id,
                    if score { "probability" } else { "mask" }
                )));
            }
            let want = arch.layers()[l].num_weights();
            if layer.len() != want {
                return Err(Error::layout("payload layer", want, layer.len()));
            }
        }
    }
    let k = T::lit(ordered.len() as f64);
    let mut theta = Vec::with_capacity(arch.num_weights());
    for (l, &score) in flags.iter().enumerate() {
        if score {
            let mut acc = vec![T::zero(); arch.layers()[l].num_weights()];
            for p in &ordered {
                if let LayerPayload::Probs(v) = &p.layers[l] {
                    for (a, &x) in acc.iter_mut().zip(v) {
                        *a += T::lit(f64::from(x));
                    }
                }
            }
            theta.extend(
                acc.into_iter()
                    .map(|a| (a / k).max(T::zero()).min(T::one())),
            );
        } else {
            let masks: Vec<BinaryMask> = ordered
                .iter()
                .map(|p| match &p.layers[l] {
                    LayerPayload::Mask(m) => m.clone(),
                    LayerPayload::Probs(_) => unreachable!("kinds checked above"),
                })
                .collect();
            theta.extend(aggregate_masks::<T>(&masks)?.into_vec());
        }
    }
    Ok(BernoulliParams::from_vec_unchecked(theta))
}
