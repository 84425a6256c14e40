//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and
//! repeated keys are errors; absent keys keep their defaults.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::calib::Reduction;
use crate::error::{Error, Result};
use crate::infer::{GenConfig, PhasePolicy};
use crate::model::ModelConfig;
use crate::quant::{Granularity, QuantSpec, DEFAULT_SCALE_FLOOR};
use crate::train::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantSettings {
    pub bits: u8,
    pub calib_batches: usize,
    pub calib_reduction: Reduction,
    pub scale_floor: f32,
}

impl Default for QuantSettings {
    fn default() -> Self {
        QuantSettings {
            bits: 8,
            calib_batches: 8,
            calib_reduction: Reduction::Mean,
            scale_floor: DEFAULT_SCALE_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub calib_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            calib_fraction: 0.1,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seed for weight initialization before pretraining.
    pub model_seed: u64,
    /// Pretrained float checkpoint to load.
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub quant: QuantSettings,
    pub gen: GenConfig,
    pub policy: PhasePolicy,
    pub data: DataSettings,
}

impl Default for PhasePolicy {
    fn default() -> Self {
        PhasePolicy::PHASED
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
            seen.push(key.to_string());
        }
        cfg.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let t = &mut self.train;
        let q = &mut self.quant;
        let g = &mut self.gen;
        match key {
            "model.vocab_size" => m.vocab_size = parse(v)?,
            "model.d_model" => m.d_model = parse(v)?,
            "model.n_layers" => m.n_layers = parse(v)?,
            "model.n_heads" => m.n_heads = parse(v)?,
            "model.d_ff" => m.d_ff = parse(v)?,
            "model.max_seq_len" => m.max_seq_len = parse(v)?,
            "model.norm_epsilon" => m.norm_epsilon = parse(v)?,
            "model.quantize_head" => m.quantize_head = parse(v)?,
            "model.seed" => self.model_seed = parse(v)?,
            "model.checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "pretrain.steps" => p.steps = parse(v)?,
            "pretrain.batch_size" => p.batch_size = parse(v)?,
            "pretrain.seq_len" => p.seq_len = parse(v)?,
            "pretrain.learning_rate" => p.optimizer.learning_rate = parse(v)?,
            "pretrain.grad_clip" => p.grad_clip = parse(v)?,
            "pretrain.seed" => p.seed = parse(v)?,
            "train.learning_rate" => t.optimizer.learning_rate = parse(v)?,
            "train.beta1" => t.optimizer.beta1 = parse(v)?,
            "train.beta2" => t.optimizer.beta2 = parse(v)?,
            "train.epsilon" => t.optimizer.epsilon = parse(v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(v)?,
            "train.epochs" => t.epochs = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.seed" => t.seed = parse(v)?,
            "train.ablation" => t.ablation = parse(v)?,
            "train.eval_every" => t.eval_every = parse(v)?,
            "quant.bits" => q.bits = parse(v)?,
            "quant.calib_batches" => q.calib_batches = parse(v)?,
            "quant.calib_reduction" => q.calib_reduction = parse(v)?,
            "quant.scale_floor" => q.scale_floor = parse(v)?,
            "gen.max_new_tokens" => g.max_new_tokens = parse(v)?,
            "gen.temperature" => g.temperature = parse(v)?,
            "gen.top_p" => g.top_p = parse(v)?,
            "gen.greedy" => g.greedy = parse(v)?,
            "gen.eos_token_id" => g.eos_token_id = parse(v)?,
            "gen.seed" => g.seed = parse(v)?,
            "gen.policy" => self.policy = parse(v)?,
            "data.calib_fraction" => self.data.calib_fraction = parse(v)?,
            "data.valid_fraction" => self.data.valid_fraction = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, p, t, q, g) = (&self.model, &self.pretrain, &self.train, &self.quant, &self.gen);
        vec![
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.norm_epsilon", m.norm_epsilon.to_string()),
            ("model.quantize_head", m.quantize_head.to_string()),
            ("model.seed", self.model_seed.to_string()),
            (
                "model.checkpoint",
                self.checkpoint.as_ref().map_or(String::new(), |c| c.display().to_string()),
            ),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.seq_len", p.seq_len.to_string()),
            ("pretrain.learning_rate", p.optimizer.learning_rate.to_string()),
            ("pretrain.grad_clip", p.grad_clip.to_string()),
            ("pretrain.seed", p.seed.to_string()),
            ("train.learning_rate", t.optimizer.learning_rate.to_string()),
            ("train.beta1", t.optimizer.beta1.to_string()),
            ("train.beta2", t.optimizer.beta2.to_string()),
            ("train.epsilon", t.optimizer.epsilon.to_string()),
            ("train.weight_decay", t.optimizer.weight_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.ablation", t.ablation.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("quant.bits", q.bits.to_string()),
            ("quant.calib_batches", q.calib_batches.to_string()),
            ("quant.calib_reduction", q.calib_reduction.to_string()),
            ("quant.scale_floor", q.scale_floor.to_string()),
            ("gen.max_new_tokens", g.max_new_tokens.to_string()),
            ("gen.temperature", g.temperature.to_string()),
            ("gen.top_p", g.top_p.to_string()),
            ("gen.greedy", g.greedy.to_string()),
            ("gen.eos_token_id", g.eos_token_id.to_string()),
            ("gen.seed", g.seed.to_string()),
            ("gen.policy", self.policy.to_string()),
            ("data.calib_fraction", self.data.calib_fraction.to_string()),
            ("data.valid_fraction", self.data.valid_fraction.to_string()),
        ]
    }

    /// The resolved configuration in the file syntax.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()?;
        self.quant_spec()?;
        if !(self.quant.scale_floor > 0.0 && self.quant.scale_floor.is_finite()) {
            return Err(Error::invalid("quant.scale_floor must be positive"));
        }
        if self.quant.calib_batches == 0 {
            return Err(Error::invalid("quant.calib_batches must be positive"));
        }
        Ok(())
    }

    /// Per-channel activation spec with the training ablation applied.
    pub fn quant_spec(&self) -> Result<QuantSpec> {
        let mut spec = QuantSpec::new(self.quant.bits, Granularity::PerChannel)?.with_ablation(self.train.ablation);
        spec.scale_floor = self.quant.scale_floor;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse_str(&cfg.render()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.train.optimizer.learning_rate, 2e-4);
        assert_eq!(cfg.train.epochs, 6);
        assert_eq!(cfg.model.d_model, 128);
    }

    #[test]
    fn values_and_comments() {
        let cfg = RunConfig::parse_str(
            "# toy\n\nmodel.d_model = 64\ntrain.ablation = no-clamp+fp-weights\ngen.policy=static-decode\nmodel.checkpoint = m.ckpt\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert!(cfg.train.ablation.no_clamp && cfg.train.ablation.fp_weights);
        assert_eq!(cfg.policy, PhasePolicy::STATIC_DECODE);
        assert_eq!(cfg.checkpoint, Some(PathBuf::from("m.ckpt")));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match RunConfig::parse_str("model.d_model = 64\nmodel.colour = red\n") {
            Err(Error::Config { line: 2, msg }) => assert!(msg.contains("unknown key")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::parse_str("train.epochs = 1\ntrain.epochs = 2"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse_str("quant.bits = eight"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(RunConfig::parse_str("no equals sign"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(RunConfig::parse_str("model.n_heads = 3"), Err(Error::Config { line: 0, .. })));
    }
}
