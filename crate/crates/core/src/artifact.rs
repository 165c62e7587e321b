//! Bit-exact model artifact and storage accounting.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        4 bytes  "PRSM"
//! version      u16      1
//! layer count  u16
//! per layer    fan_in u32, fan_out u32, activation u8 (0 none, 1 relu, 2 tanh)
//! master_seed  u64
//! per layer    scale f32, sign bitmap, mask bitmap (each ceil(d_l / 8) bytes)
//! ```
//!
//! Bitmaps put flat index 0 of the layer in bit 0 of the first byte. A sign
//! bit of 1 means `+scale`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::net::{
    forward, Activation, Gate, GeneratorArch, LayerSpec, SampleBatch, SignedConstantWeights,
};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"PRSM";
pub const VERSION: u16 = 1;

/// Final model: frozen signs and scales plus the extracted supermask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    arch: GeneratorArch,
    seed: u64,
    scales: Vec<f32>,
    signs: BinaryMask,
    mask: BinaryMask,
}

impl ModelArtifact {
    pub fn new(
        arch: GeneratorArch,
        seed: u64,
        scales: Vec<f32>,
        signs: BinaryMask,
        mask: BinaryMask,
    ) -> Result<Self> {
        if arch.num_layers() > usize::from(u16::MAX) {
            return Err(Error::config("too many layers for the artifact format"));
        }
        if arch
            .layers()
            .iter()
            .any(|l| l.fan_in > u32::MAX as usize || l.fan_out > u32::MAX as usize)
        {
            return Err(Error::config("layer fan exceeds u32"));
        }
        if scales.len() != arch.num_layers() {
            return Err(Error::layout(
                "artifact scales",
                arch.num_layers(),
                scales.len(),
            ));
        }
        if let Some(l) = scales.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("layer {l} scale must be positive")));
        }
        let d = arch.num_weights();
        if signs.len() != d {
            return Err(Error::layout("artifact signs", d, signs.len()));
        }
        if mask.len() != d {
            return Err(Error::layout("artifact mask", d, mask.len()));
        }
        Ok(Self {
            arch,
            seed,
            scales,
            signs,
            mask,
        })
    }

    pub fn from_weights<T: Real>(
        weights: &SignedConstantWeights<T>,
        mask: BinaryMask,
    ) -> Result<Self> {
        Self::new(
            weights.arch().clone(),
            weights.seed(),
            weights.scales().iter().map(|s| s.as_f64() as f32).collect(),
            weights.signs().clone(),
            mask,
        )
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn signs(&self) -> &BinaryMask {
        &self.signs
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// Frozen weights with the stored (f32) scales.
    pub fn weights<T: Real>(&self) -> SignedConstantWeights<T> {
        SignedConstantWeights::from_parts(
            self.arch.clone(),
            self.seed,
            self.scales.iter().map(|&s| T::lit(f64::from(s))).collect(),
            self.signs.clone(),
        )
        .expect("artifact invariants match the weight layout")
    }

    /// Runs `W_init ⊙ M*` on a latent batch.
    pub fn generate<T: Real>(&self, latent: &SampleBatch<T>) -> Result<SampleBatch<T>> {
        forward(&self.weights(), Gate::Mask(&self.mask), latent)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch.num_layers() as u16).to_le_bytes());
        for layer in self.arch.layers() {
            out.extend_from_slice(&(layer.fan_in as u32).to_le_bytes());
            out.extend_from_slice(&(layer.fan_out as u32).to_le_bytes());
            out.push(layer.activation.code());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for (range, scale) in self.arch.layer_ranges().into_iter().zip(&self.scales) {
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend_from_slice(self.signs.slice(range.clone()).as_bytes());
            out.extend_from_slice(self.mask.slice(range).as_bytes());
        }
        out
    }

    fn header_len(&self) -> usize {
        4 + 2 + 2 + 9 * self.arch.num_layers() + 8
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len()
            + self
                .arch
                .layers()
                .iter()
                .map(|l| 4 + 2 * l.num_weights().div_ceil(8))
                .sum::<usize>()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Decode {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let count = usize::from(r.u16()?);
        if count == 0 {
            return Err(r.error_at(6, "artifact has no layers".into()));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            let at = r.offset();
            let code = r.u8()?;
            let activation = Activation::from_code(code)
                .ok_or_else(|| r.error_at(at, format!("unknown activation code {code}")))?;
            layers.push(LayerSpec::new(fan_in, fan_out, activation));
        }
        let latent = layers[0].fan_in;
        let arch = GeneratorArch::new(latent, layers).map_err(|e| r.error_at(8, e.to_string()))?;
        let seed = r.u64()?;
        let mut scales = Vec::with_capacity(count);
        let mut signs = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        for layer in arch.layers() {
            let d = layer.num_weights();
            let at = r.offset();
            let scale = f32::from_le_bytes(r.array()?);
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(r.error_at(at, format!("invalid scale {scale}")));
            }
            scales.push(scale);
            for dst in [&mut signs, &mut masks] {
                let at = r.offset();
                let packed = r.take(d.div_ceil(8))?.to_vec();
                dst.push(
                    BinaryMask::from_bytes(packed, d).map_err(|e| r.error_at(at, e.to_string()))?,
                );
            }
        }
        r.finish()?;
        Self::new(
            arch,
            seed,
            scales,
            BinaryMask::concat(&signs),
            BinaryMask::concat(&masks),
        )
    }

    pub fn storage_report(&self) -> StorageReport {
        let d = self.arch.num_weights() as u64;
        let total = self.encoded_len() as u64;
        let dense = 4 * d;
        StorageReport {
            num_weights: d,
            num_layers: self.arch.num_layers() as u64,
            kept_weights: self.mask.count_ones() as u64,
            sign_bits: d,
            mask_bits: d,
            scale_bytes: 4 * self.arch.num_layers() as u64,
            header_bytes: self.header_len() as u64,
            total_bytes: total,
            dense_float_equivalent_bytes: dense,
            ratio: total as f64 / dense as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub num_weights: u64,
    pub num_layers: u64,
    pub kept_weights: u64,
    pub sign_bits: u64,
    pub mask_bits: u64,
    pub scale_bytes: u64,
    pub header_bytes: u64,
    /// Size of the encoded artifact, bitmap padding included.
    pub total_bytes: u64,
    /// The same network stored as dense 32-bit floats.
    pub dense_float_equivalent_bytes: u64,
    pub ratio: f64,
}

/// Cursor over a byte slice that reports the failing offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn error(&self, reason: String) -> Error {
        self.error_at(self.pos, reason)
    }

    pub(crate) fn error_at(&self, offset: usize, reason: String) -> Error {
        Error::Decode { offset, reason }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
