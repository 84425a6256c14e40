//! Byte-level decoder-only transformer used as the quantization substrate.
//!
//! Pre-norm blocks with RMS normalization, multi-head causal attention and a
//! two-layer GELU feed-forward network. Only the linear layers inside blocks
//! (and optionally the LM head) are quantized; embeddings, norms, attention
//! scores, softmax and residuals always run in float.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::qlinear::{forward_dynamic_per_token, forward_int, linear_on_tape, QuantLinear};
use crate::quant::{Granularity, QuantSpec, ScaleVector};
use crate::tensor::{FloatTensor, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_epsilon: f32,
    /// Quantize the LM head like the block linears.
    pub quantize_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            norm_epsilon: 1e-5,
            quantize_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::invalid("vocab_size exceeds the token id range"));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::invalid("norm_epsilon must be positive"));
        }
        Ok(())
    }
}

/// The six quantized linears of a block, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearRole {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl LinearRole {
    pub const ALL: [LinearRole; 6] = [
        LinearRole::Query,
        LinearRole::Key,
        LinearRole::Value,
        LinearRole::Output,
        LinearRole::Up,
        LinearRole::Down,
    ];

    pub fn path(self) -> &'static str {
        match self {
            LinearRole::Query => "attn.q",
            LinearRole::Key => "attn.k",
            LinearRole::Value => "attn.v",
            LinearRole::Output => "attn.o",
            LinearRole::Up => "ffn.up",
            LinearRole::Down => "ffn.down",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: FloatTensor,
    pub ffn_norm: FloatTensor,
    /// Indexed by [`LinearRole`] order.
    pub linears: [QuantLinear; 6],
}

impl Block {
    pub fn linear(&self, role: LinearRole) -> &QuantLinear {
        &self.linears[role as usize]
    }
}

/// Trained or calibrated activation scales, one per quantized linear input,
/// keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    pub bits: u8,
    entries: Vec<(String, ScaleVector)>,
}

impl ScaleSet {
    pub fn new(bits: u8, entries: Vec<(String, ScaleVector)>) -> Result<Self> {
        QuantSpec::new(bits, Granularity::PerChannel)?;
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        Ok(ScaleSet { bits, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &ScaleVector {
        &self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&ScaleVector> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ScaleVector)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s))
    }

    /// Replaces the values of entry `i`, keeping its name and granularity.
    pub fn set(&mut self, i: usize, values: FloatTensor, floor: f32) -> Result<()> {
        let g = self.entries[i].1.granularity();
        self.entries[i].1 = ScaleVector::new(g, values, floor)?;
        Ok(())
    }

    /// Total number of scalar scale parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.len()).sum()
    }
}

/// How each quantized linear executes during a plain forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Float,
    /// Float fake quantization with static per-channel scales.
    FakeQuant { scales: &'a ScaleSet, spec: &'a QuantSpec },
    /// Integer GEMM with static per-channel scales.
    IntStatic { scales: &'a ScaleSet, spec: &'a QuantSpec },
    /// Integer GEMM with per-row scales derived at call time.
    IntDynamic { spec: &'a QuantSpec },
}

impl fmt::Display for Mode<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Float => "float",
            Mode::FakeQuant { .. } => "fake",
            Mode::IntStatic { .. } => "int-static",
            Mode::IntDynamic { .. } => "int-dynamic",
        })
    }
}

/// What a tape forward treats as trainable.
#[derive(Clone, Copy, Debug)]
pub enum TapeMode<'a> {
    /// All float parameters are trainable leaves; no quantization.
    Weights,
    /// Weights are constants (fake-quantized once); activation scales are the
    /// only trainable leaves.
    Scales { scales: &'a ScaleSet, spec: &'a QuantSpec },
}

pub struct TapeForward {
    pub logits: Var,
    /// Trainable leaves in [`Model::parameters`] order for
    /// [`TapeMode::Weights`], or in scale-set order for [`TapeMode::Scales`].
    pub params: Vec<Var>,
}

/// Called with the canonical linear index and the activation entering it.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &FloatTensor);

/// Per-layer key/value rows for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    max_len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let cap = config.max_seq_len * config.d_model;
        KvCache {
            keys: (0..config.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..config.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
            max_len: config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: FloatTensor,
    pub pos_embed: FloatTensor,
    pub blocks: Vec<Block>,
    pub final_norm: FloatTensor,
    pub head: QuantLinear,
    /// Bit width the weights were quantized at, if they have been.
    weight_bits: Option<u8>,
}

fn normal(rng: &mut ChaCha8Rng, shape: Shape, std: f32) -> FloatTensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
    FloatTensor::from_vec(shape, data).expect("length matches shape")
}

impl Model {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let residual_std = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let linear = |rng: &mut ChaCha8Rng, k: usize, n: usize, gain: f32| -> Result<QuantLinear> {
            let w = normal(rng, Shape::matrix(k, n)?, gain / (k as f32).sqrt());
            QuantLinear::new(w, Some(FloatTensor::zeros(Shape::vector(n)?)))
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let linears = [
                linear(&mut rng, d, d, 1.0)?,
                linear(&mut rng, d, d, 1.0)?,
                linear(&mut rng, d, d, 1.0)?,
                linear(&mut rng, d, d, residual_std)?,
                linear(&mut rng, d, f, 1.0)?,
                linear(&mut rng, f, d, residual_std)?,
            ];
            blocks.push(Block {
                attn_norm: FloatTensor::full(Shape::vector(d)?, 1.0),
                ffn_norm: FloatTensor::full(Shape::vector(d)?, 1.0),
                linears,
            });
        }
        let embed = normal(&mut rng, Shape::matrix(v, d)?, 0.1);
        let pos_embed = normal(&mut rng, Shape::matrix(config.max_seq_len, d)?, 0.02);
        let head = QuantLinear::new(normal(&mut rng, Shape::matrix(d, v)?, 1.0 / (d as f32).sqrt()), None)?;
        Ok(Model {
            embed,
            pos_embed,
            blocks,
            final_norm: FloatTensor::full(Shape::vector(d)?, 1.0),
            head,
            config,
            weight_bits: None,
        })
    }

    /// Paths of the quantized linears in canonical order.
    pub fn linear_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.blocks.len())
            .flat_map(|b| LinearRole::ALL.iter().map(move |r| format!("blocks.{b}.{}", r.path())))
            .collect();
        if self.config.quantize_head {
            names.push("head".into());
        }
        names
    }

    /// Quantized linears in canonical order.
    pub fn linears(&self) -> Vec<&QuantLinear> {
        let mut out: Vec<&QuantLinear> = self.blocks.iter().flat_map(|b| b.linears.iter()).collect();
        if self.config.quantize_head {
            out.push(&self.head);
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut QuantLinear> {
        let quantize_head = self.config.quantize_head;
        let mut out: Vec<&mut QuantLinear> = self.blocks.iter_mut().flat_map(|b| b.linears.iter_mut()).collect();
        if quantize_head {
            out.push(&mut self.head);
        }
        out
    }

    pub fn weight_bits(&self) -> Option<u8> {
        self.weight_bits
    }

    /// Quantizes every quantized linear's weights per output channel at
    /// `bits`. Float weights are kept alongside.
    pub fn quantize_weights(&mut self, bits: u8) -> Result<()> {
        let spec = QuantSpec::new(bits, Granularity::PerChannel)?;
        for l in self.linears_mut() {
            l.quantize_weights(&spec)?;
        }
        self.weight_bits = Some(bits);
        Ok(())
    }

    /// Drops quantized weight copies; quantized modes other than fake-quant
    /// with fp-weights become unavailable.
    pub fn clear_quantized_weights(&mut self) {
        for l in self.linears_mut() {
            l.quantized = None;
        }
        self.weight_bits = None;
    }

    /// Named float parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &FloatTensor)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos_embed".to_string(), &self.pos_embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{i}.ffn_norm"), &b.ffn_norm));
            for (role, l) in LinearRole::ALL.iter().zip(&b.linears) {
                out.push((format!("blocks.{i}.{}.weight", role.path()), &l.weight));
                if let Some(bias) = &l.bias {
                    out.push((format!("blocks.{i}.{}.bias", role.path()), bias));
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head.weight".into(), &self.head.weight));
        out
    }

    /// Mutable parameters in [`Model::parameters`] order. Quantized weight
    /// copies become stale and are dropped.
    pub fn parameters_mut(&mut self) -> Vec<&mut FloatTensor> {
        self.weight_bits = None;
        let mut out = vec![&mut self.embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(&mut b.ffn_norm);
            for l in &mut b.linears {
                l.quantized = None;
                out.push(&mut l.weight);
                if let Some(bias) = &mut l.bias {
                    out.push(bias);
                }
            }
        }
        out.push(&mut self.final_norm);
        self.head.quantized = None;
        out.push(&mut self.head.weight);
        out
    }

    /// SHA-256 over every parameter buffer, plus the quantized weights when
    /// present.
    pub fn weight_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.parameters() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for l in self.linears() {
            if let Some(q) = &l.quantized {
                for v in q.quantized.ints.data() {
                    h.update(v.to_le_bytes());
                }
                for v in q.quantized.scales.values().data().iter().chain(q.dequantized.data()) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    /// Checks that `scales` has exactly one correctly sized per-channel entry
    /// per quantized linear, reporting every mismatch.
    pub fn check_scales(&self, scales: &ScaleSet) -> Result<()> {
        let names = self.linear_names();
        let mut problems = Vec::new();
        for (name, l) in names.iter().zip(self.linears()) {
            match scales.by_name(name) {
                None => problems.push(format!("missing {name}.s_x")),
                Some(s) if s.granularity() != Granularity::PerChannel => {
                    problems.push(format!("{name}.s_x is {}, expected per_channel", s.granularity()))
                }
                Some(s) if s.len() != l.in_features() => {
                    problems.push(format!("{name}.s_x has {} channels, expected {}", s.len(), l.in_features()))
                }
                Some(_) => {}
            }
        }
        for n in scales.names() {
            if !names.iter().any(|m| m == n) {
                problems.push(format!("unexpected {n}.s_x"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ScaleMismatch(problems));
        }
        if scales.names().zip(&names).any(|(a, b)| a != b) {
            return Err(Error::ScaleMismatch(vec!["scale entries are not in layer order".into()]));
        }
        Ok(())
    }

    fn check_mode(&self, mode: &Mode) -> Result<()> {
        let (scales, spec) = match *mode {
            Mode::Float => return Ok(()),
            Mode::FakeQuant { scales, spec } | Mode::IntStatic { scales, spec } => (Some(scales), spec),
            Mode::IntDynamic { spec } => (None, spec),
        };
        match self.weight_bits {
            None if !(spec.ablation.fp_weights && matches!(mode, Mode::FakeQuant { .. })) => {
                return Err(Error::invalid("weights must be quantized before quantized execution"));
            }
            Some(b) if b != spec.bits && !spec.ablation.fp_weights => {
                return Err(Error::invalid(format!(
                    "weights quantized at {b} bits but activations requested at {}",
                    spec.bits
                )));
            }
            _ => {}
        }
        if let Some(s) = scales {
            if s.bits != spec.bits {
                return Err(Error::invalid(format!(
                    "scale set calibrated at {} bits, spec requests {}",
                    s.bits, spec.bits
                )));
            }
            self.check_scales(s)?;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32], offset: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if offset + tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: offset + tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn apply_linear(
        idx: usize,
        l: &QuantLinear,
        x: &FloatTensor,
        mode: &Mode,
        observer: &mut Option<Observer>,
    ) -> Result<FloatTensor> {
        if let Some(obs) = observer {
            obs(idx, x);
        }
        match *mode {
            Mode::Float => l.forward_float(x),
            Mode::FakeQuant { scales, spec } => l.forward_fake_plain(x, scales.get(idx), spec),
            Mode::IntStatic { scales, spec } => forward_int(x, l, scales.get(idx), spec),
            Mode::IntDynamic { spec } => forward_dynamic_per_token(x, l, spec),
        }
    }

    /// Logits `[T×vocab]` for one token sequence. With a cache, `tokens` are
    /// the positions following those already cached and the cache is
    /// extended. The observer sees every quantized linear's input.
    pub fn forward(
        &self,
        tokens: &[u32],
        mode: Mode,
        cache: Option<&mut KvCache>,
        mut observer: Option<Observer>,
    ) -> Result<FloatTensor> {
        self.check_mode(&mode)?;
        let offset = cache.as_ref().map_or(0, |c| c.len);
        self.check_tokens(tokens, offset)?;
        let cfg = &self.config;
        let (t, d) = (tokens.len(), cfg.d_model);
        let positions: Vec<u32> = (offset..offset + t).map(|p| p as u32).collect();
        let mut x = nn::embedding(&self.embed, tokens)?.add(&nn::embedding(&self.pos_embed, &positions)?)?;
        let mut cache = cache;
        for (bi, block) in self.blocks.iter().enumerate() {
            let base = bi * LinearRole::ALL.len();
            let lin = |role: LinearRole, x: &FloatTensor, obs: &mut Option<Observer>| {
                Self::apply_linear(base + role as usize, block.linear(role), x, &mode, obs)
            };
            let (h, _) = nn::rms_norm(&x, &block.attn_norm, cfg.norm_epsilon)?;
            let q = lin(LinearRole::Query, &h, &mut observer)?;
            let k = lin(LinearRole::Key, &h, &mut observer)?;
            let v = lin(LinearRole::Value, &h, &mut observer)?;
            let mut att = vec![0.0f32; t * d];
            match cache.as_deref_mut() {
                Some(c) => {
                    c.keys[bi].extend_from_slice(k.data());
                    c.values[bi].extend_from_slice(v.data());
                    let tk = offset + t;
                    nn::causal_attention(q.data(), &c.keys[bi], &c.values[bi], t, tk, d, cfg.n_heads, offset, &mut att, None);
                }
                None => nn::causal_attention(q.data(), k.data(), v.data(), t, t, d, cfg.n_heads, 0, &mut att, None),
            }
            let att = FloatTensor::from_vec(Shape::matrix(t, d)?, att)?;
            let o = lin(LinearRole::Output, &att, &mut observer)?;
            x = x.add(&o)?;
            let (h2, _) = nn::rms_norm(&x, &block.ffn_norm, cfg.norm_epsilon)?;
            let u = lin(LinearRole::Up, &h2, &mut observer)?.map(nn::gelu);
            let dn = lin(LinearRole::Down, &u, &mut observer)?;
            x = x.add(&dn)?;
        }
        if let Some(c) = cache {
            c.len = offset + t;
            debug_assert!(c.len <= c.max_len);
        }
        let (h, _) = nn::rms_norm(&x, &self.final_norm, cfg.norm_epsilon)?;
        if cfg.quantize_head {
            let idx = self.blocks.len() * LinearRole::ALL.len();
            Self::apply_linear(idx, &self.head, &h, &mode, &mut observer)
        } else {
            self.head.forward_float(&h)
        }
    }

    /// Records a forward pass over `batch` equal-length sequences (stacked
    /// row-wise) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, batch: &[&[u32]], mode: TapeMode) -> Result<TapeForward> {
        let seq = batch.first().map_or(0, |s| s.len());
        if batch.iter().any(|s| s.len() != seq) {
            return Err(Error::invalid("tape batch sequences must share one length"));
        }
        for s in batch {
            self.check_tokens(s, 0)?;
        }
        let quant = match mode {
            TapeMode::Weights => None,
            TapeMode::Scales { scales, spec } => {
                self.check_mode(&Mode::FakeQuant { scales, spec })?;
                Some((scales, spec))
            }
        };
        let cfg = &self.config;
        let mut params = Vec::new();
        let mut param = |tape: &mut Tape, t: &FloatTensor| -> Result<Var> {
            if quant.is_none() {
                let v = tape.leaf(t.clone(), true)?;
                params.push(v);
                Ok(v)
            } else {
                tape.constant(t.clone())
            }
        };

        let ids: Vec<u32> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<u32> = (0..batch.len()).flat_map(|_| 0..seq as u32).collect();
        let embed = param(tape, &self.embed)?;
        let pos = param(tape, &self.pos_embed)?;
        let e = tape.embedding(embed, &ids)?;
        let p = tape.embedding(pos, &positions)?;
        let mut x = tape.add(e, p)?;

        // Weight leaves first so parameter order matches `parameters()`.
        let mut block_vars = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let attn_norm = param(tape, &block.attn_norm)?;
            let ffn_norm = param(tape, &block.ffn_norm)?;
            let mut lin = Vec::with_capacity(6);
            for l in &block.linears {
                let w = match quant {
                    Some((_, spec)) => l.fake_weight(spec),
                    None => &l.weight,
                };
                let w = param(tape, w)?;
                let b = match &l.bias {
                    Some(b) => Some(param(tape, b)?),
                    None => None,
                };
                lin.push((w, b));
            }
            block_vars.push((attn_norm, ffn_norm, lin));
        }
        let final_norm = param(tape, &self.final_norm)?;
        let head_w = match quant {
            Some((_, spec)) if cfg.quantize_head => self.head.fake_weight(spec),
            _ => &self.head.weight,
        };
        let head_w = param(tape, head_w)?;

        let mut scale_vars = Vec::new();
        if let Some((scales, _)) = quant {
            for (_, s) in scales.iter() {
                scale_vars.push(tape.leaf(s.values().clone(), true)?);
            }
        }
        let q_of = |idx: usize| quant.map(|(_, spec)| (scale_vars[idx], spec));

        for (bi, (attn_norm, ffn_norm, lin)) in block_vars.into_iter().enumerate() {
            let base = bi * LinearRole::ALL.len();
            let h = tape.rms_norm(x, attn_norm, cfg.norm_epsilon)?;
            let q = linear_on_tape(tape, h, lin[0].0, lin[0].1, q_of(base))?;
            let k = linear_on_tape(tape, h, lin[1].0, lin[1].1, q_of(base + 1))?;
            let v = linear_on_tape(tape, h, lin[2].0, lin[2].1, q_of(base + 2))?;
            let att = tape.causal_attention(q, k, v, cfg.n_heads, batch.len())?;
            let o = linear_on_tape(tape, att, lin[3].0, lin[3].1, q_of(base + 3))?;
            x = tape.add(x, o)?;
            let h2 = tape.rms_norm(x, ffn_norm, cfg.norm_epsilon)?;
            let u = linear_on_tape(tape, h2, lin[4].0, lin[4].1, q_of(base + 4))?;
            let u = tape.gelu(u)?;
            let dn = linear_on_tape(tape, u, lin[5].0, lin[5].1, q_of(base + 5))?;
            x = tape.add(x, dn)?;
        }
        let h = tape.rms_norm(x, final_norm, cfg.norm_epsilon)?;
        let head_q = if cfg.quantize_head {
            q_of(self.blocks.len() * LinearRole::ALL.len())
        } else {
            None
        };
        let logits = linear_on_tape(tape, h, head_w, None, head_q)?;
        let params = if quant.is_some() { scale_vars } else { params };
        Ok(TapeForward { logits, params })
    }
}

/// Mean next-token NLL (nats) and perplexity of `logits` against `targets`.
pub fn cross_entropy_ppl(logits: &FloatTensor, targets: &[u32]) -> Result<(f32, f32)> {
    let (nll, _) = nn::cross_entropy(logits, targets)?;
    Ok((nll, nll.exp()))
}
