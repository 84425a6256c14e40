//! Symmetric N-bit quantization.
//!
//! `X_int = clamp(round(X / S), -2^(N-1), 2^(N-1) - 1)` with
//! `S = max|X| / (2^(N-1) - 1)`, evaluated per tensor, per row (token) or per
//! column (channel). Rounding is half away from zero. The zero point is
//! always 0.

use std::fmt;

use crate::autodiff::{Broadcast, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Axis, FloatTensor, IntTensor};

pub const DEFAULT_SCALE_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
}

impl Granularity {
    pub fn code(self) -> u8 {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerToken => 1,
            Granularity::PerChannel => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Granularity::PerTensor),
            1 => Some(Granularity::PerToken),
            2 => Some(Granularity::PerChannel),
            _ => None,
        }
    }

    fn broadcast(self) -> Broadcast {
        match self {
            Granularity::PerTensor => Broadcast::Scalar,
            Granularity::PerToken => Broadcast::Rows,
            Granularity::PerChannel => Broadcast::Columns,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerToken => "per_token",
            Granularity::PerChannel => "per_channel",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_token" => Ok(Granularity::PerToken),
            "per_channel" => Ok(Granularity::PerChannel),
            other => Err(Error::invalid(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Switches that remove parts of the quantizer for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Drop the rounding node from activation fake-quantization.
    pub no_round: bool,
    /// Drop the clamp node from activation fake-quantization.
    pub no_clamp: bool,
    /// Keep linear-layer weights in full precision.
    pub fp_weights: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_round: false,
        no_clamp: false,
        fp_weights: false,
    };

    /// True when activations can be exported as integers.
    pub fn allows_integer_path(&self) -> bool {
        !self.no_round && !self.no_clamp
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.no_round {
            parts.push("no-round");
        }
        if self.no_clamp {
            parts.push("no-clamp");
        }
        if self.fp_weights {
            parts.push("fp-weights");
        }
        if parts.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    /// Parses `full` or a `+`-joined list of `no-round`, `no-clamp`,
    /// `fp-weights`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::FULL;
        if s == "full" {
            return Ok(a);
        }
        for part in s.split('+') {
            match part {
                "no-round" => a.no_round = true,
                "no-clamp" => a.no_clamp = true,
                "fp-weights" => a.fp_weights = true,
                other => return Err(Error::invalid(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub ablation: Ablation,
    pub scale_floor: f32,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::invalid(format!("bits must be in [2, 16], got {bits}")));
        }
        Ok(QuantSpec {
            bits,
            granularity,
            ablation: Ablation::FULL,
            scale_floor: DEFAULT_SCALE_FLOOR,
        })
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

/// Quantization scales tagged with the axis they apply to.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector {
    granularity: Granularity,
    values: FloatTensor,
}

impl ScaleVector {
    /// Validates that every value is finite and at least `floor`.
    pub fn new(granularity: Granularity, values: FloatTensor, floor: f32) -> Result<Self> {
        if values.shape().rank() != 1 {
            return Err(Error::invalid(format!("scale vector must be rank 1, got {:?}", values.dims())));
        }
        if granularity == Granularity::PerTensor && values.numel() != 1 {
            return Err(Error::invalid("per_tensor scale must hold exactly one value"));
        }
        if let Some(&bad) = values.data().iter().find(|&&s| !(s.is_finite() && s >= floor)) {
            return Err(Error::invalid(format!("scale {bad} below floor {floor}")));
        }
        Ok(ScaleVector { granularity, values })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn values(&self) -> &FloatTensor {
        &self.values
    }

    pub fn into_values(self) -> FloatTensor {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.numel() == 0
    }

    /// Checks the scale length against the tagged axis of `x`.
    fn check_against(&self, x: &FloatTensor, op: &'static str) -> Result<()> {
        let expected = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerToken => x.matrix_dims(op)?.0,
            Granularity::PerChannel => x.matrix_dims(op)?.1,
        };
        if self.len() != expected {
            return Err(Error::shape(op, x.dims(), self.values.dims()));
        }
        Ok(())
    }

    /// Scale applying to element `(r, c)` of a matrix with `cols` columns.
    #[inline]
    fn at(&self, i: usize, cols: usize) -> f32 {
        let v = self.values.data();
        match self.granularity {
            Granularity::PerTensor => v[0],
            Granularity::PerToken => v[i / cols],
            Granularity::PerChannel => v[i % cols],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub ints: IntTensor,
    pub scales: ScaleVector,
    pub spec: QuantSpec,
}

fn cols_of(x: &FloatTensor) -> usize {
    x.dims()[x.shape().rank() - 1]
}

/// `max|x| / qmax` over each slice of the spec's granularity, floored at
/// `scale_floor`.
pub fn derive_scale(x: &FloatTensor, spec: &QuantSpec) -> Result<ScaleVector> {
    let qmax = spec.qmax() as f32;
    let maxima = match spec.granularity {
        Granularity::PerTensor => FloatTensor::scalar(x.max_abs()),
        Granularity::PerToken => x.max_abs_over_axis(Axis::Row)?,
        Granularity::PerChannel => x.max_abs_over_axis(Axis::Column)?,
    };
    let values = maxima.map(|m| (m / qmax).max(spec.scale_floor));
    ScaleVector::new(spec.granularity, values, spec.scale_floor)
}

/// Integer quantization. Refused when an ablation flag removes round or
/// clamp, since the result would not be a valid integer tensor.
pub fn quantize(x: &FloatTensor, scales: &ScaleVector, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if !spec.ablation.allows_integer_path() {
        return Err(Error::AblatedExport(spec.ablation.to_string()));
    }
    if scales.granularity != spec.granularity {
        return Err(Error::invalid(format!(
            "scale granularity {} does not match spec {}",
            scales.granularity, spec.granularity
        )));
    }
    scales.check_against(x, "quantize")?;
    let cols = cols_of(x);
    let (qmin, qmax) = (spec.qmin() as f32, spec.qmax() as f32);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / scales.at(i, cols)).round().clamp(qmin, qmax) as i32)
        .collect();
    Ok(QuantizedTensor {
        ints: IntTensor::from_vec(x.shape().clone(), data)?,
        scales: scales.clone(),
        spec: *spec,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> FloatTensor {
    let cols = q.ints.dims()[q.ints.shape().rank() - 1];
    let data = q
        .ints
        .data()
        .iter()
        .enumerate()
        .map(|(i, &n)| n as f32 * q.scales.at(i, cols))
        .collect();
    FloatTensor::from_vec(q.ints.shape().clone(), data).expect("shape preserved")
}

/// Float-domain fake quantization without a tape. Performs the same float
/// operations, in the same order, as [`fake_quantize`].
pub fn fake_quantize_tensor(x: &FloatTensor, scales: &ScaleVector, spec: &QuantSpec) -> Result<FloatTensor> {
    scales.check_against(x, "fake_quantize")?;
    let cols = cols_of(x);
    let (qmin, qmax) = (spec.qmin() as f32, spec.qmax() as f32);
    let Ablation { no_round, no_clamp, .. } = spec.ablation;
    Ok(x.map_indexed(|i, v| {
        let s = scales.at(i, cols);
        let mut u = v / s;
        if !no_round {
            u = u.round();
        }
        if !no_clamp {
            u = u.clamp(qmin, qmax);
        }
        u * s
    }))
}

/// Differentiable fake quantization `s · clamp(round(v / s), qmin, qmax)`
/// built from straight-through round and clamp nodes. Ablation flags drop the
/// corresponding node. Gradients flow to both `v` and `s`.
pub fn fake_quantize(tape: &mut Tape, v: Var, s: Var, spec: &QuantSpec) -> Result<Var> {
    let how = spec.granularity.broadcast();
    let mut u = tape.div_broadcast(v, s, how)?;
    if !spec.ablation.no_round {
        u = tape.ste_round(u)?;
    }
    if !spec.ablation.no_clamp {
        u = tape.ste_clamp(u, spec.qmin() as f32, spec.qmax() as f32)?;
    }
    tape.mul_broadcast(u, s, how)
}

/// Per-output-channel weight quantization and its dequantized value.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight {
    pub quantized: QuantizedTensor,
    pub dequantized: FloatTensor,
}

/// Quantizes `w[K×N]` per output column and returns both the integer form and
/// `dequantize(quantize(w))`.
pub fn quantize_weight(w: &FloatTensor, spec: &QuantSpec) -> Result<QuantizedWeight> {
    if spec.granularity != Granularity::PerChannel {
        return Err(Error::invalid("weights are always quantized per channel"));
    }
    let weight_spec = spec.with_ablation(Ablation::FULL);
    let scales = derive_scale(w, &weight_spec)?;
    let quantized = quantize(w, &scales, &weight_spec)?;
    let dequantized = dequantize(&quantized);
    Ok(QuantizedWeight { quantized, dequantized })
}

/// The weight the fake-quant path multiplies by: `dequantize(quantize(w))`,
/// or `w` itself under the fp-weights ablation.
pub fn fake_quantize_weights_once(w: &FloatTensor, spec: &QuantSpec) -> Result<FloatTensor> {
    if spec.ablation.fp_weights {
        return Ok(w.clone());
    }
    Ok(quantize_weight(w, spec)?.dequantized)
}

impl FloatTensor {
    fn map_indexed(&self, f: impl Fn(usize, f32) -> f32) -> FloatTensor {
        let data = self.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        FloatTensor::from_vec(self.shape().clone(), data).expect("shape preserved")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(bits: u8, g: Granularity) -> QuantSpec {
        QuantSpec::new(bits, g).unwrap()
    }

    fn vec_t(v: &[f32]) -> FloatTensor {
        FloatTensor::vector(v.to_vec()).unwrap()
    }

    fn scalar_scale(s: f32) -> ScaleVector {
        ScaleVector::new(Granularity::PerTensor, FloatTensor::scalar(s), DEFAULT_SCALE_FLOOR).unwrap()
    }

    #[test]
    fn ranges_follow_bit_width() {
        let s = spec(8, Granularity::PerTensor);
        assert_eq!((s.qmin(), s.qmax()), (-128, 127));
        let s = spec(4, Granularity::PerTensor);
        assert_eq!((s.qmin(), s.qmax()), (-8, 7));
        assert!(QuantSpec::new(1, Granularity::PerTensor).is_err());
        assert!(QuantSpec::new(17, Granularity::PerTensor).is_err());
    }

    #[test]
    fn per_tensor_scale() {
        let s = derive_scale(&vec_t(&[2.0, -1.0, 0.5]), &spec(8, Granularity::PerTensor)).unwrap();
        assert_eq!(s.values().data(), &[2.0f32 / 127.0]);
        assert!((s.values().data()[0] - 0.015748).abs() < 1e-6);
    }

    #[test]
    fn zero_tensor_scale_is_floor() {
        let s = derive_scale(&vec_t(&[0.0, 0.0]), &spec(8, Granularity::PerTensor)).unwrap();
        assert_eq!(s.values().data(), &[1e-8]);
    }

    #[test]
    fn per_channel_and_per_token_scales() {
        let x = FloatTensor::from_rows(&[&[1.0, -3.0], &[2.0, 0.0]]).unwrap();
        let c = derive_scale(&x, &spec(8, Granularity::PerChannel)).unwrap();
        assert_eq!(c.values().data(), &[2.0 / 127.0, 3.0 / 127.0]);
        let t = derive_scale(&x, &spec(8, Granularity::PerToken)).unwrap();
        assert_eq!(t.values().data(), &[3.0 / 127.0, 2.0 / 127.0]);
    }

    #[test]
    fn quantize_rounds_half_away_and_saturates() {
        let sp = spec(8, Granularity::PerTensor);
        let x = vec_t(&[2.0, -1.0, 0.5]);
        let q = quantize(&x, &scalar_scale(2.0 / 127.0), &sp).unwrap();
        assert_eq!(q.ints.data(), &[127, -64, 32]);
        let d = dequantize(&q);
        let expected = [2.0, -64.0 * (2.0 / 127.0), 32.0 * (2.0 / 127.0)];
        assert_eq!(d.data(), &expected.map(|v: f32| v));
        assert!((d.data()[1] + 1.007874).abs() < 1e-6);
        assert!((d.data()[2] - 0.503937).abs() < 1e-6);

        let sat = quantize(&vec_t(&[300.0, -300.0]), &scalar_scale(1.0), &sp).unwrap();
        assert_eq!(sat.ints.data(), &[127, -128]);

        let zeros = quantize(&vec_t(&[0.0; 4]), &scalar_scale(0.37), &sp).unwrap();
        assert!(zeros.ints.data().iter().all(|&v| v == 0));
        assert!(dequantize(&zeros).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_export_refused_under_ablation() {
        for a in ["no-round", "no-clamp", "no-round+no-clamp"] {
            let sp = spec(8, Granularity::PerTensor).with_ablation(a.parse().unwrap());
            let err = quantize(&vec_t(&[1.0]), &scalar_scale(1.0), &sp).unwrap_err();
            assert!(matches!(err, Error::AblatedExport(_)), "{a}");
        }
    }

    #[test]
    fn scale_length_must_match_axis() {
        let x = FloatTensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let s = ScaleVector::new(Granularity::PerChannel, vec_t(&[1.0, 1.0]), 1e-8).unwrap();
        assert!(matches!(
            quantize(&x, &s, &spec(8, Granularity::PerChannel)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn scale_vector_rejects_values_below_floor() {
        assert!(ScaleVector::new(Granularity::PerChannel, vec_t(&[1.0, 0.0]), 1e-8).is_err());
        assert!(ScaleVector::new(Granularity::PerChannel, vec_t(&[1.0, -2.0]), 1e-8).is_err());
    }

    fn fq_grad(v: f32, s: f32, bits: u8, ablation: Ablation) -> (f32, f32) {
        let sp = spec(bits, Granularity::PerTensor).with_ablation(ablation);
        let mut tape = Tape::new();
        let x = tape.constant(FloatTensor::from_rows(&[&[v]]).unwrap()).unwrap();
        let sv = tape.leaf(FloatTensor::scalar(s), true).unwrap();
        let y = fake_quantize(&mut tape, x, sv, &sp).unwrap();
        let out = tape.value(y).data()[0];
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        (out, g.get(sv).unwrap().data()[0])
    }

    #[test]
    fn fake_quantize_scale_gradients() {
        let (out, ds) = fq_grad(5.3, 1.0, 8, Ablation::FULL);
        assert_eq!(out, 5.0);
        assert!((ds - (5.0 - 5.3)).abs() < 1e-6);

        let (out, ds) = fq_grad(300.0, 1.0, 8, Ablation::FULL);
        assert_eq!(out, 127.0);
        assert_eq!(ds, 127.0);
        // Locally linear: s·127 on both sides.
        let f = |s: f64| s * 127.0;
        let fd = (f(1.01) - f(0.99)) / 0.02;
        assert!(((ds as f64) - fd).abs() < 1e-9 * fd);

        let (out, ds) = fq_grad(5.0, 1.0, 8, Ablation::FULL);
        assert_eq!(out, 5.0);
        assert_eq!(ds, 0.0);

        let (_, ds) = fq_grad(-500.0, 0.5, 8, Ablation::FULL);
        assert_eq!(ds, -128.0);
    }

    #[test]
    fn fake_quantize_identity_without_round_and_clamp() {
        let a = Ablation {
            no_round: true,
            no_clamp: true,
            fp_weights: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let v = rng.gen_range(-1000.0f32..1000.0);
            let s = rng.gen_range(1e-4f32..2.0);
            let (out, _) = fq_grad(v, s, 8, a);
            assert!((out - v).abs() <= f32::EPSILON * v.abs(), "{v} {s} -> {out}");
        }
    }

    #[test]
    fn tape_and_plain_fake_quant_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FloatTensor::from_vec(
            Shape::matrix(5, 6).unwrap(),
            (0..30).map(|_| rng.gen_range(-3.0f32..3.0)).collect(),
        )
        .unwrap();
        for g in [Granularity::PerTensor, Granularity::PerToken, Granularity::PerChannel] {
            for ab in ["full", "no-round", "no-clamp"] {
                let sp = spec(4, g).with_ablation(ab.parse().unwrap());
                let mut s = derive_scale(&x, &sp).unwrap();
                s.values = s.values.mul_scalar(0.7);
                let plain = fake_quantize_tensor(&x, &s, &sp).unwrap();
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone()).unwrap();
                let sv = tape.constant(s.values().clone()).unwrap();
                let y = fake_quantize(&mut tape, xv, sv, &sp).unwrap();
                assert_eq!(tape.value(y), &plain);
            }
        }
    }

    #[test]
    fn saturated_slice_gradient_is_count_times_range() {
        let sp = spec(8, Granularity::PerChannel);
        let x = FloatTensor::from_rows(&[&[500.0, 3.0], &[-400.0, 2.0], &[900.0, -2.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let sv = tape.leaf(vec_t(&[1.0, 0.01]), true).unwrap();
        let y = fake_quantize(&mut tape, xv, sv, &sp).unwrap();
        let upstream = tape.constant(FloatTensor::full(Shape::matrix(3, 2).unwrap(), 0.5)).unwrap();
        let prod = tape.mul(y, upstream).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        // Column 0: two at qmax, one at qmin. Column 1: 300, 200, -200 all saturated.
        let expected0 = (2.0 * 127.0 - 128.0) * 0.5;
        let expected1 = (2.0 * 127.0 - 128.0) * 0.5;
        assert_eq!(g.get(sv).unwrap().data(), &[expected0, expected1]);
    }

    #[test]
    fn weight_fake_quant() {
        let w = FloatTensor::from_rows(&[&[1.0, 0.0, 0.3], &[0.0, 1.0, -0.7], &[0.25, -0.5, 1.0]]).unwrap();
        let sp = spec(8, Granularity::PerChannel);
        let fq = fake_quantize_weights_once(&w, &sp).unwrap();
        for (a, b) in fq.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= 0.5 / 127.0 + 1e-7);
        }
        let fp = sp.with_ablation(Ablation { fp_weights: true, ..Ablation::FULL });
        assert_eq!(fake_quantize_weights_once(&w, &fp).unwrap(), w);
        let z = FloatTensor::zeros(Shape::matrix(2, 3).unwrap());
        let qz = quantize_weight(&z, &sp).unwrap();
        assert_eq!(qz.dequantized, z);
        assert!(qz.quantized.ints.data().iter().all(|&v| v == 0));
        assert!(qz.quantized.scales.values().data().iter().all(|&s| s == 1e-8));
        assert!(quantize_weight(&w, &spec(8, Granularity::PerToken)).is_err());
    }

    #[test]
    fn ablation_parsing_round_trips() {
        for s in ["full", "no-round", "no-clamp", "fp-weights", "no-round+no-clamp"] {
            assert_eq!(s.parse::<Ablation>().unwrap().to_string(), s);
        }
        assert!("no-thing".parse::<Ablation>().is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(),
            bits in prop::sample::select(vec![4u8, 8, 16]),
            g in prop::sample::select(vec![Granularity::PerTensor, Granularity::PerToken, Granularity::PerChannel]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = FloatTensor::from_vec(Shape::matrix(rows, cols).unwrap(),
                (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            let sp = spec(bits, g);
            let s = derive_scale(&x, &sp).unwrap();
            let q = quantize(&x, &s, &sp).unwrap();
            prop_assert!(q.ints.data().iter().all(|&n| n >= -sp.qmax() && n <= sp.qmax()));
            let d = dequantize(&q);
            for (i, (&a, &b)) in d.data().iter().zip(x.data()).enumerate() {
                let step = s.at(i, cols);
                prop_assert!((a - b).abs() <= step / 2.0 + 1e-7);
            }
        }
    }
}
