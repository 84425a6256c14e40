//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasq_core::quant::derive_scale;
use sasq_core::{FloatTensor, Granularity, QuantLinear, QuantSpec, ScaleVector, Shape};

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> FloatTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FloatTensor::from_vec(Shape::new([rows, cols]).unwrap(), data).unwrap()
}

/// A `k × n` layer with quantized weights and a bias.
pub fn quantized_layer(k: usize, n: usize, bits: u8) -> QuantLinear {
    let bias = FloatTensor::vector(random_tensor(1, n, 2).into_data()).unwrap();
    let mut layer = QuantLinear::new(random_tensor(k, n, 1), Some(bias)).unwrap();
    layer.quantize_weights(&QuantSpec::new(bits, Granularity::PerChannel).unwrap()).unwrap();
    layer
}

/// Per-channel activation scales fitted to `x`.
pub fn channel_scales(x: &FloatTensor, spec: &QuantSpec) -> ScaleVector {
    derive_scale(x, &spec.with_granularity(Granularity::PerChannel)).unwrap()
}
