//! Post-training calibration of per-channel activation scales.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Mode, Model, ScaleSet};
use crate::quant::{derive_scale, Granularity, QuantSpec};
use crate::tensor::FloatTensor;

/// How per-batch scales are merged across calibration batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Arithmetic mean of the per-batch scales.
    #[default]
    Mean,
    /// Largest per-batch scale.
    Max,
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Max => "max",
        })
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "max" => Ok(Reduction::Max),
            other => Err(Error::invalid(format!("unknown calibration reduction `{other}`"))),
        }
    }
}

/// Per-linear per-channel scales of one float forward pass.
fn batch_scales(model: &Model, batch: &[u32], spec: &QuantSpec) -> Result<Vec<Vec<f32>>> {
    let n = model.linears().len();
    let mut seen: Vec<Option<Result<Vec<f32>>>> = (0..n).map(|_| None).collect();
    let mut observe = |i: usize, x: &FloatTensor| {
        seen[i] = Some(derive_scale(x, spec).map(|s| s.into_values().into_data()));
    };
    model.forward(batch, Mode::Float, None, Some(&mut observe))?;
    seen.into_iter()
        .map(|s| s.unwrap_or_else(|| Err(Error::invalid("linear layer was not observed"))))
        .collect()
}

/// Runs every batch through the float model and merges the per-channel
/// scales observed at each quantized linear input. Batches are processed in
/// parallel and merged in batch order.
pub fn calibrate(model: &Model, batches: &[Vec<u32>], spec: &QuantSpec, reduction: Reduction) -> Result<ScaleSet> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration corpus"));
    }
    let spec = spec.with_granularity(Granularity::PerChannel);
    let per_batch: Vec<Vec<Vec<f32>>> = batches
        .par_iter()
        .map(|b| batch_scales(model, b, &spec))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for (li, name) in model.linear_names().into_iter().enumerate() {
        let width = per_batch[0][li].len();
        let mut acc = vec![0.0f64; width];
        for scales in &per_batch {
            for (a, &s) in acc.iter_mut().zip(&scales[li]) {
                match reduction {
                    Reduction::Mean => *a += s as f64,
                    Reduction::Max => *a = a.max(s as f64),
                }
            }
        }
        let values: Vec<f32> = acc
            .into_iter()
            .map(|a| match reduction {
                Reduction::Mean => (a / batches.len() as f64) as f32,
                Reduction::Max => a as f32,
            })
            .map(|s| s.max(spec.scale_floor))
            .collect();
        let sv = crate::quant::ScaleVector::new(Granularity::PerChannel, FloatTensor::vector(values)?, spec.scale_floor)?;
        entries.push((name, sv));
    }
    ScaleSet::new(spec.bits, entries)
}

/// Quantizes the model's weights for `spec`: per output channel at
/// `spec.bits`, or not at all under the fp-weights ablation.
pub fn quantize_weights(model: &mut Model, spec: &QuantSpec) -> Result<()> {
    if spec.ablation.fp_weights {
        model.clear_quantized_weights();
        Ok(())
    } else {
        model.quantize_weights(spec.bits)
    }
}

/// Splits `tokens` into consecutive non-overlapping windows of `len` tokens,
/// dropping a short tail.
pub fn windows(tokens: &[u32], len: usize) -> Vec<Vec<u32>> {
    if len == 0 {
        return Vec::new();
    }
    tokens.chunks_exact(len).map(<[u32]>::to_vec).collect()
}
