//! Quantized linear layer `Y = X·W + B`.
//!
//! Three execution paths share one set of weights:
//!
//! * [`forward_int`]: static activation scales, integer products accumulated
//!   per channel group and dequantized by `S_x[g]·S_w[n]`.
//! * [`forward_dynamic_per_token`]: per-row scales derived at call time.
//! * [`QuantLinear::forward_fake`]: float fake-quantization on an autodiff
//!   tape, which is how scale gradients are obtained.
//!
//! The bias is never quantized.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{self, fake_quantize, Granularity, QuantSpec, QuantizedWeight, ScaleVector};
use crate::tensor::{FloatTensor, IntTensor, Shape, PAR_THRESHOLD};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinear {
    /// Float weights `[K×N]` (input channels × output channels).
    pub weight: FloatTensor,
    pub bias: Option<FloatTensor>,
    /// Per-output-channel quantized weights, present once the layer has been
    /// prepared for quantized execution.
    pub quantized: Option<QuantizedWeight>,
}

impl QuantLinear {
    pub fn new(weight: FloatTensor, bias: Option<FloatTensor>) -> Result<Self> {
        let (_, n) = weight.matrix_dims("QuantLinear")?;
        if let Some(b) = &bias {
            if b.dims() != [n] {
                return Err(Error::shape("QuantLinear", weight.dims(), b.dims()));
            }
        }
        Ok(QuantLinear {
            weight,
            bias,
            quantized: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Quantizes the weights per output channel. Idempotent: re-quantizing
    /// the dequantized weights reproduces the same integers.
    pub fn quantize_weights(&mut self, weight_spec: &QuantSpec) -> Result<()> {
        self.quantized = Some(quant::quantize_weight(&self.weight, weight_spec)?);
        Ok(())
    }

    fn quantized(&self) -> Result<&QuantizedWeight> {
        self.quantized
            .as_ref()
            .ok_or_else(|| Error::invalid("layer weights have not been quantized"))
    }

    pub fn w_int(&self) -> Result<&IntTensor> {
        Ok(&self.quantized()?.quantized.ints)
    }

    pub fn s_w(&self) -> Result<&ScaleVector> {
        Ok(&self.quantized()?.quantized.scales)
    }

    /// The weight used by the fake-quant path: the dequantized weight, or the
    /// float weight under the fp-weights ablation or before quantization.
    pub fn fake_weight(&self, spec: &QuantSpec) -> &FloatTensor {
        match (&self.quantized, spec.ablation.fp_weights) {
            (Some(q), false) => &q.dequantized,
            _ => &self.weight,
        }
    }

    pub fn forward_float(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let y = x.matmul(&self.weight)?;
        self.add_bias(y)
    }

    fn add_bias(&self, y: FloatTensor) -> Result<FloatTensor> {
        match &self.bias {
            Some(b) => crate::nn::add_bias(&y, b),
            None => Ok(y),
        }
    }

    /// Plain (tape-free) fake quantization, bit-identical to
    /// [`QuantLinear::forward_fake`].
    pub fn forward_fake_plain(&self, x: &FloatTensor, s_x: &ScaleVector, spec: &QuantSpec) -> Result<FloatTensor> {
        let xq = quant::fake_quantize_tensor(x, s_x, spec)?;
        let y = xq.matmul(self.fake_weight(spec))?;
        self.add_bias(y)
    }

    /// Fake-quantizes `v` with the scale variable `s_x`, multiplies by the
    /// (constant) fake-quantized weights and adds the bias.
    pub fn forward_fake(&self, tape: &mut Tape, v: Var, s_x: Var, spec: &QuantSpec) -> Result<Var> {
        let w = tape.constant(self.fake_weight(spec).clone())?;
        let b = match &self.bias {
            Some(b) => Some(tape.constant(b.clone())?),
            None => None,
        };
        linear_on_tape(tape, v, w, b, Some((s_x, spec)))
    }
}

/// `fake_quantize(v, s)·w + b` on a tape, skipping fake quantization when no
/// scale is given.
pub fn linear_on_tape(
    tape: &mut Tape,
    v: Var,
    w: Var,
    b: Option<Var>,
    quant: Option<(Var, &QuantSpec)>,
) -> Result<Var> {
    let x = match quant {
        Some((s, spec)) => fake_quantize(tape, v, s, spec)?,
        None => v,
    };
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Largest `|x_int|` the spec can produce.
fn max_abs_level(spec: &QuantSpec) -> i64 {
    -(spec.qmin() as i64)
}

/// Whether `count` products of `a`- and `b`-bit integers fit in an `i32`.
fn fits_i32(count: usize, x_spec: &QuantSpec, w_spec_bits: u8) -> bool {
    let w_max = 1i64 << (w_spec_bits - 1);
    (count as i64)
        .checked_mul(max_abs_level(x_spec) * w_max)
        .is_some_and(|bound| bound <= i32::MAX as i64)
}

/// Channel groups of the reduction dimension sharing one activation scale.
/// Per-tensor scales give a single group; per-channel scales give one group
/// per channel.
fn channel_groups(s_x: &ScaleVector, k: usize) -> Result<Vec<(usize, usize, f32)>> {
    let v = s_x.values().data();
    match s_x.granularity() {
        Granularity::PerTensor => Ok(vec![(0, k, v[0])]),
        Granularity::PerChannel if v.len() == k => Ok((0..k).map(|c| (c, c + 1, v[c])).collect()),
        Granularity::PerChannel => Err(Error::shape("forward_int", &[k], s_x.values().dims())),
        Granularity::PerToken => Err(Error::invalid(
            "forward_int takes static per-channel or per-tensor scales; use forward_dynamic_per_token",
        )),
    }
}

fn check_integer_path(spec: &QuantSpec, x: &FloatTensor, layer: &QuantLinear) -> Result<()> {
    if !spec.ablation.allows_integer_path() || spec.ablation.fp_weights {
        return Err(Error::AblatedExport(spec.ablation.to_string()));
    }
    let (_, k) = x.matrix_dims("forward_int")?;
    if k != layer.in_features() {
        return Err(Error::shape("forward_int", x.dims(), layer.weight.dims()));
    }
    Ok(())
}

/// Static quantized GEMM with grouped integer accumulation:
/// `Y[m,n] = Σ_g (S_x[g]·S_w[n]) · Σ_{k∈g} X_int[m,k]·W_int[k,n] + B[n]`.
///
/// Integer partial sums use `i32` whenever the group size and bit widths
/// bound them below 2^31 (always for 8-bit operands with K ≤ 2^15), and
/// `i64` otherwise.
pub fn forward_int(x: &FloatTensor, layer: &QuantLinear, s_x: &ScaleVector, spec: &QuantSpec) -> Result<FloatTensor> {
    check_integer_path(spec, x, layer)?;
    let (m, k) = x.matrix_dims("forward_int")?;
    let n = layer.out_features();
    let groups = channel_groups(s_x, k)?;
    let x_spec = spec.with_granularity(s_x.granularity());
    let xq = quant::quantize(x, s_x, &x_spec)?;
    let qw = layer.quantized()?;
    let s_w = qw.quantized.scales.values().data();
    let w_int = qw.quantized.ints.data();

    // Per-group dequantization factors S_x[g]·S_w[n].
    let factors: Vec<f32> = groups
        .iter()
        .flat_map(|&(_, _, sx)| s_w.iter().map(move |&sw| sx * sw))
        .collect();
    let widest = groups.iter().map(|&(a, b, _)| b - a).max().unwrap_or(0);
    let narrow = fits_i32(widest, &x_spec, qw.quantized.spec.bits);
    let x_int = xq.ints.data();

    let kernel = |(row, out): (usize, &mut [f32])| {
        let xr = &x_int[row * k..(row + 1) * k];
        if narrow {
            let mut acc = vec![0i32; n];
            for (gi, &(start, end, _)) in groups.iter().enumerate() {
                acc.fill(0);
                for c in start..end {
                    let xv = xr[c];
                    for (a, &wv) in acc.iter_mut().zip(&w_int[c * n..(c + 1) * n]) {
                        *a += xv * wv;
                    }
                }
                for ((o, &a), &f) in out.iter_mut().zip(&acc).zip(&factors[gi * n..(gi + 1) * n]) {
                    *o += f * a as f32;
                }
            }
        } else {
            let mut acc = vec![0i64; n];
            for (gi, &(start, end, _)) in groups.iter().enumerate() {
                acc.fill(0);
                for c in start..end {
                    let xv = xr[c] as i64;
                    for (a, &wv) in acc.iter_mut().zip(&w_int[c * n..(c + 1) * n]) {
                        *a += xv * wv as i64;
                    }
                }
                for ((o, &a), &f) in out.iter_mut().zip(&acc).zip(&factors[gi * n..(gi + 1) * n]) {
                    *o += f * a as f32;
                }
            }
        }
    };
    let mut out = vec![0.0f32; m * n];
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    layer.add_bias(FloatTensor::from_vec(Shape::matrix(m, n)?, out)?)
}

/// Dynamic per-token quantized GEMM:
/// `Y[m,n] = S_x[m]·S_w[n]·Σ_k X_int[m,k]·W_int[k,n] + B[n]`, with `S_x`
/// derived from each row's max-abs at call time.
pub fn forward_dynamic_per_token(x: &FloatTensor, layer: &QuantLinear, spec: &QuantSpec) -> Result<FloatTensor> {
    check_integer_path(spec, x, layer)?;
    let (m, k) = x.matrix_dims("forward_dynamic_per_token")?;
    let n = layer.out_features();
    let token_spec = spec.with_granularity(Granularity::PerToken);
    let s_x = quant::derive_scale(x, &token_spec)?;
    let xq = quant::quantize(x, &s_x, &token_spec)?;
    let qw = layer.quantized()?;
    let s_w = qw.quantized.scales.values().data();
    let w_int = qw.quantized.ints.data();
    let sx = s_x.values().data();
    let narrow = fits_i32(k, &token_spec, qw.quantized.spec.bits);
    let x_int = xq.ints.data();

    let kernel = |(row, out): (usize, &mut [f32])| {
        let xr = &x_int[row * k..(row + 1) * k];
        if narrow {
            let mut acc = vec![0i32; n];
            for (c, &xv) in xr.iter().enumerate() {
                for (a, &wv) in acc.iter_mut().zip(&w_int[c * n..(c + 1) * n]) {
                    *a += xv * wv;
                }
            }
            for ((o, &a), &sw) in out.iter_mut().zip(&acc).zip(s_w) {
                *o = (sx[row] * sw) * a as f32;
            }
        } else {
            let mut acc = vec![0i64; n];
            for (c, &xv) in xr.iter().enumerate() {
                for (a, &wv) in acc.iter_mut().zip(&w_int[c * n..(c + 1) * n]) {
                    *a += xv as i64 * wv as i64;
                }
            }
            for ((o, &a), &sw) in out.iter_mut().zip(&acc).zip(s_w) {
                *o = (sx[row] * sw) * a as f32;
            }
        }
    };
    let mut out = vec![0.0f32; m * n];
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    layer.add_bias(FloatTensor::from_vec(Shape::matrix(m, n)?, out)?)
}
