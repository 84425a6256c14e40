//! Phased generation: static per-channel integer prefill, then a
//! configurable decode mode per generated token, with KV caching.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{KvCache, Mode, Model, ScaleSet};
use crate::qlinear::{forward_dynamic_per_token, forward_int};
use crate::quant::{derive_scale, Granularity, QuantSpec};
use crate::tensor::FloatTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub max_new_tokens: usize,
    pub temperature: f32,
    pub top_p: f32,
    pub greedy: bool,
    pub eos_token_id: u32,
    pub seed: u64,
    /// Check on every decode step that per-token dynamic quantization of the
    /// single row equals per-tensor quantization of it, bit for bit.
    pub verify_decode_identity: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_new_tokens: 64,
            temperature: 0.6,
            top_p: 0.95,
            greedy: false,
            eos_token_id: 0,
            seed: 0,
            verify_decode_identity: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} must be in (0, 1]", self.top_p)));
        }
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefillMode {
    IntStaticPerChannel,
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    DynamicPerToken,
    IntStaticPerChannel,
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhasePolicy {
    pub prefill: PrefillMode,
    pub decode: DecodeMode,
}

impl PhasePolicy {
    /// Static per-channel prefill, dynamic per-token decode.
    pub const PHASED: PhasePolicy = PhasePolicy {
        prefill: PrefillMode::IntStaticPerChannel,
        decode: DecodeMode::DynamicPerToken,
    };
    /// Static per-channel scales in both phases.
    pub const STATIC_DECODE: PhasePolicy = PhasePolicy {
        prefill: PrefillMode::IntStaticPerChannel,
        decode: DecodeMode::IntStaticPerChannel,
    };
    /// Static per-channel prefill, float decode.
    pub const FLOAT_DECODE: PhasePolicy = PhasePolicy {
        prefill: PrefillMode::IntStaticPerChannel,
        decode: DecodeMode::Float,
    };
    /// No quantization at all; the reference for quantized policies.
    pub const FLOAT: PhasePolicy = PhasePolicy {
        prefill: PrefillMode::Float,
        decode: DecodeMode::Float,
    };
}

impl fmt::Display for PhasePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match *self {
            PhasePolicy::PHASED => "phased",
            PhasePolicy::STATIC_DECODE => "static-decode",
            PhasePolicy::FLOAT_DECODE => "float-decode",
            PhasePolicy::FLOAT => "float",
            _ => "custom",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for PhasePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phased" => Ok(PhasePolicy::PHASED),
            "static-decode" => Ok(PhasePolicy::STATIC_DECODE),
            "float-decode" => Ok(PhasePolicy::FLOAT_DECODE),
            "float" => Ok(PhasePolicy::FLOAT),
            other => Err(Error::invalid(format!("unknown phase policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Newly generated tokens, including a terminating EOS if one was drawn.
    pub tokens: Vec<u32>,
    pub hit_eos: bool,
    /// Number of single-row identity checks performed.
    pub identity_checks: usize,
}

/// Samples from the smallest probability-sorted prefix whose mass reaches
/// `top_p` (ties ordered by ascending id), renormalized.
pub fn nucleus_sample(probs: &[f32], top_p: f32, rng: &mut impl Rng) -> Result<u32> {
    if probs.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::invalid(format!("top_p {top_p} must be in (0, 1]")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0f64;
    let mut keep = order.len();
    for (i, &id) in order.iter().enumerate() {
        mass += probs[id] as f64;
        if mass >= top_p as f64 {
            keep = i + 1;
            break;
        }
    }
    let kept = &order[..keep];
    let total: f64 = kept.iter().map(|&i| probs[i] as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for &id in kept {
        u -= probs[id] as f64;
        if u < 0.0 {
            return Ok(id as u32);
        }
    }
    Ok(kept[keep - 1] as u32)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn softmax_with_temperature(row: &[f32], temperature: f32) -> Vec<f32> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x));
    let e: Vec<f32> = row.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: f32 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

fn next_token(logits: &FloatTensor, gen: &GenConfig, rng: &mut ChaCha8Rng) -> Result<u32> {
    let (rows, _) = logits.matrix_dims("next_token")?;
    let last = logits.row(rows - 1);
    if gen.greedy {
        Ok(argmax(last))
    } else {
        nucleus_sample(&softmax_with_temperature(last, gen.temperature), gen.top_p, rng)
    }
}

/// Checks that dynamic per-token quantization of a single row equals
/// static per-tensor quantization with that row's scale, bit for bit.
pub fn single_row_identity(model: &Model, idx: usize, x: &FloatTensor, spec: &QuantSpec) -> Result<bool> {
    let layer = model.linears()[idx];
    let per_tensor = spec.with_granularity(Granularity::PerTensor);
    let s = derive_scale(x, &per_tensor)?;
    let a = forward_int(x, layer, &s, &per_tensor)?;
    let b = forward_dynamic_per_token(x, layer, spec)?;
    Ok(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Generates up to `gen.max_new_tokens` tokens after `prompt`, stopping
/// early at EOS. `scales` and `spec` are required unless the policy is
/// entirely float.
pub fn generate(
    model: &Model,
    scales: Option<&ScaleSet>,
    spec: &QuantSpec,
    prompt: &[u32],
    gen: &GenConfig,
    policy: PhasePolicy,
) -> Result<Generation> {
    gen.validate()?;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let needed = prompt.len() + gen.max_new_tokens;
    if needed > model.config.max_seq_len {
        return Err(Error::SequenceOverflow {
            len: needed,
            max: model.config.max_seq_len,
        });
    }
    let spec = spec.with_granularity(Granularity::PerChannel);
    let static_mode = || -> Result<Mode> {
        let scales = scales.ok_or_else(|| Error::invalid("static quantization requires a scale set"))?;
        Ok(Mode::IntStatic { scales, spec: &spec })
    };
    let prefill = match policy.prefill {
        PrefillMode::IntStaticPerChannel => static_mode()?,
        PrefillMode::Float => Mode::Float,
    };
    let decode = match policy.decode {
        DecodeMode::DynamicPerToken => Mode::IntDynamic { spec: &spec },
        DecodeMode::IntStaticPerChannel => static_mode()?,
        DecodeMode::Float => Mode::Float,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let mut cache = KvCache::new(&model.config);
    let mut out = Generation {
        tokens: Vec::with_capacity(gen.max_new_tokens),
        hit_eos: false,
        identity_checks: 0,
    };
    if gen.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut logits = model.forward(prompt, prefill, Some(&mut cache), None)?;
    loop {
        let tok = next_token(&logits, gen, &mut rng)?;
        out.tokens.push(tok);
        if tok == gen.eos_token_id {
            out.hit_eos = true;
            break;
        }
        if out.tokens.len() == gen.max_new_tokens {
            break;
        }
        let verify = gen.verify_decode_identity && matches!(decode, Mode::IntDynamic { .. });
        let mut failure = None;
        let mut checks = 0;
        let mut observe = |idx: usize, x: &FloatTensor| {
            if failure.is_none() {
                match single_row_identity(model, idx, x, &spec) {
                    Ok(true) => checks += 1,
                    Ok(false) => failure = Some(Error::invalid(format!("per-token and per-tensor paths differ at linear {idx}"))),
                    Err(e) => failure = Some(e),
                }
            }
        };
        let observer: Option<crate::model::Observer> = if verify { Some(&mut observe) } else { None };
        logits = model.forward(&[tok], decode, Some(&mut cache), observer)?;
        if let Some(e) = failure {
            return Err(e);
        }
        out.identity_checks += checks;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate, quantize_weights, Reduction};
    use crate::model::ModelConfig;

    #[test]
    fn nucleus_prefix_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(nucleus_sample(&[0.6, 0.3, 0.1], 0.6, &mut rng).unwrap(), 0);
            assert_eq!(nucleus_sample(&[0.0, 1.0, 0.0], 0.3, &mut rng).unwrap(), 1);
            assert_eq!(nucleus_sample(&[0.0, 0.0, 1.0], 1.0, &mut rng).unwrap(), 2);
        }
        // Equal probabilities: the lower id comes first in the prefix.
        assert_eq!(nucleus_sample(&[0.5, 0.5], 0.5, &mut rng).unwrap(), 0);
    }

    #[test]
    fn full_nucleus_reaches_every_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[nucleus_sample(&[0.5, 0.3, 0.2], 1.0, &mut rng).unwrap() as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 400), "{seen:?}");
        assert!((seen[0] as f64 / 3000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn bad_top_p_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(nucleus_sample(&[1.0], 0.0, &mut rng).is_err());
        assert!(nucleus_sample(&[1.0], 1.5, &mut rng).is_err());
    }

    fn setup() -> (Model, ScaleSet, QuantSpec) {
        let mut m = Model::new(
            ModelConfig {
                vocab_size: 32,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 48,
                ..ModelConfig::default()
            },
            9,
        )
        .unwrap();
        let spec = QuantSpec::new(8, Granularity::PerChannel).unwrap();
        quantize_weights(&mut m, &spec).unwrap();
        let batches = vec![(1..30u32).collect::<Vec<_>>()];
        let s = calibrate(&m, &batches, &spec, Reduction::Mean).unwrap();
        (m, s, spec)
    }

    #[test]
    fn greedy_ignores_sampling_knobs() {
        let (m, s, spec) = setup();
        let base = GenConfig {
            greedy: true,
            max_new_tokens: 16,
            eos_token_id: 999,
            ..GenConfig::default()
        };
        let a = generate(&m, Some(&s), &spec, &[1, 2, 3], &base, PhasePolicy::PHASED).unwrap();
        let other = GenConfig {
            temperature: 5.0,
            top_p: 0.1,
            seed: 77,
            ..base.clone()
        };
        let b = generate(&m, Some(&s), &spec, &[1, 2, 3], &other, PhasePolicy::PHASED).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 16);
    }

    #[test]
    fn sampling_is_seeded() {
        let (m, s, spec) = setup();
        let gen = GenConfig {
            max_new_tokens: 20,
            eos_token_id: 999,
            temperature: 1.5,
            ..GenConfig::default()
        };
        let a = generate(&m, Some(&s), &spec, &[4, 5], &gen, PhasePolicy::PHASED).unwrap();
        let b = generate(&m, Some(&s), &spec, &[4, 5], &gen, PhasePolicy::PHASED).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_policies_run_and_identity_holds() {
        let (m, s, spec) = setup();
        let gen = GenConfig {
            greedy: true,
            max_new_tokens: 12,
            eos_token_id: 999,
            verify_decode_identity: true,
            ..GenConfig::default()
        };
        for policy in [PhasePolicy::PHASED, PhasePolicy::STATIC_DECODE, PhasePolicy::FLOAT_DECODE, PhasePolicy::FLOAT] {
            let g = generate(&m, Some(&s), &spec, &[1, 2], &gen, policy).unwrap();
            assert_eq!(g.tokens.len(), 12);
            let expected = if policy == PhasePolicy::PHASED { 11 * m.linears().len() } else { 0 };
            assert_eq!(g.identity_checks, expected);
        }
    }

    #[test]
    fn eos_stops_generation() {
        let (m, s, spec) = setup();
        let gen = GenConfig {
            greedy: true,
            max_new_tokens: 10,
            ..GenConfig::default()
        };
        let first = generate(&m, Some(&s), &spec, &[7], &gen, PhasePolicy::PHASED).unwrap().tokens[0];
        let stop = GenConfig {
            eos_token_id: first,
            ..gen
        };
        let g = generate(&m, Some(&s), &spec, &[7], &stop, PhasePolicy::PHASED).unwrap();
        assert_eq!(g.tokens, vec![first]);
        assert!(g.hit_eos);
    }

    #[test]
    fn context_overflow_and_empty_prompt() {
        let (m, s, spec) = setup();
        let gen = GenConfig {
            max_new_tokens: 40,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate(&m, Some(&s), &spec, &[1; 9], &gen, PhasePolicy::PHASED),
            Err(Error::SequenceOverflow { len: 49, max: 48 })
        ));
        assert!(matches!(generate(&m, Some(&s), &spec, &[], &gen, PhasePolicy::PHASED), Err(Error::Empty(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [PhasePolicy::PHASED, PhasePolicy::STATIC_DECODE, PhasePolicy::FLOAT_DECODE, PhasePolicy::FLOAT] {
            assert_eq!(p.to_string().parse::<PhasePolicy>().unwrap(), p);
        }
    }
}
