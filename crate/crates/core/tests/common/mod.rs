#![allow(dead_code)]

use maskfed_core::{Activation, BinaryMask, GeneratorArch, LayerSpec, ModelArtifact};
use proptest::prelude::*;

/// Two-layer artifact written out byte by byte below.
pub fn golden_artifact() -> ModelArtifact {
    let arch = GeneratorArch::new(
        3,
        vec![
            LayerSpec::new(3, 2, Activation::Relu),
            LayerSpec::new(2, 1, Activation::Tanh),
        ],
    )
    .unwrap();
    let bits = |v: &[u8]| BinaryMask::from_bits(v.iter().map(|&b| b == 1));
    ModelArtifact::new(
        arch,
        0x0123_4567_89ab_cdef,
        vec![0.5, 1.0],
        bits(&[1, 0, 1, 1, 0, 0, 0, 1]),
        bits(&[1, 1, 0, 0, 1, 0, 1, 1]),
    )
    .unwrap()
}

pub const GOLDEN_HEX: &str = concat!(
    "5052534d",
    "0100",
    "0200",
    "03000000",
    "02000000",
    "01",
    "02000000",
    "01000000",
    "02",
    "efcdab8967452301",
    "0000003f",
    "0d",
    "13",
    "0000803f",
    "02",
    "03",
);

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoded size computed from the layout description alone.
pub fn expected_bytes(arch: &GeneratorArch) -> u64 {
    let header = 4 + 2 + 2 + 9 * arch.num_layers() as u64 + 8;
    header
        + arch
            .layers()
            .iter()
            .map(|l| 4 + 2 * (l.num_weights() as u64).div_ceil(8))
            .sum::<u64>()
}

pub fn arch_strategy(max_layers: usize, max_width: usize) -> impl Strategy<Value = GeneratorArch> {
    (
        1usize..=max_width,
        proptest::collection::vec((1usize..=max_width, 0u8..3), 1..=max_layers),
    )
        .prop_map(|(latent, layers)| {
            let mut fan_in = latent;
            let built = layers
                .into_iter()
                .map(|(w, act)| {
                    let layer = LayerSpec::new(fan_in, w, Activation::from_code(act).unwrap());
                    fan_in = w;
                    layer
                })
                .collect();
            GeneratorArch::new(latent, built).unwrap()
        })
}

pub fn artifact_strategy() -> impl Strategy<Value = ModelArtifact> {
    arch_strategy(4, 24).prop_flat_map(|arch| {
        let d = arch.num_weights();
        let l = arch.num_layers();
        (
            Just(arch),
            any::<u64>(),
            proptest::collection::vec(1e-6f32..1e3, l),
            proptest::collection::vec(any::<bool>(), d),
            proptest::collection::vec(any::<bool>(), d),
        )
            .prop_map(|(arch, seed, scales, signs, mask)| {
                ModelArtifact::new(
                    arch,
                    seed,
                    scales,
                    BinaryMask::from_bits(signs),
                    BinaryMask::from_bits(mask),
                )
                .unwrap()
            })
    })
}
