//! Training loops: float pretraining of the substrate model and scale-only
//! quantization-aware training, plus perplexity evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ScaleSet, TapeMode};
use crate::nn;
use crate::quant::{Ablation, Granularity, QuantSpec};
use crate::tensor::FloatTensor;

/// AdamW hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter, with a shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<FloatTensor>,
    pub v: Vec<FloatTensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a FloatTensor>) -> Self {
        let m: Vec<FloatTensor> = params.into_iter().map(|p| FloatTensor::zeros(p.shape().clone())).collect();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter in place.
    pub fn step(&self, state: &mut OptimizerState, params: &mut [&mut FloatTensor], grads: &[FloatTensor]) -> Result<()> {
        if params.len() != state.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                state.m.len(),
                params.len(),
                grads.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
            if p.dims() != g.dims() || p.dims() != m.dims() {
                return Err(Error::shape("AdamW::step", p.dims(), g.dims()));
            }
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.epsilon) + self.weight_decay * *p;
                *p -= self.learning_rate * update;
            }
        }
        Ok(())
    }
}

/// One optimizer step's training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub ppl: f32,
}

/// Writes `step,loss,ppl` lines with a header.
pub fn write_loss_csv(history: &[StepRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,loss,ppl")?;
    for r in history {
        writeln!(out, "{},{},{}", r.step, r.loss, r.ppl)?;
    }
    Ok(())
}

/// Splits windows into `(inputs, targets)` shifted by one position.
fn shift(window: &[u32]) -> (&[u32], &[u32]) {
    (&window[..window.len() - 1], &window[1..])
}

fn check_windows(windows: &[Vec<u32>]) -> Result<usize> {
    let len = windows.first().map(Vec::len).ok_or(Error::Empty("training corpus"))?;
    if len < 2 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::invalid("training windows must share one length of at least 2 tokens"));
    }
    Ok(len)
}

/// Tape loss over a batch of equal-length windows.
fn batch_loss(model: &Model, tape: &mut Tape, batch: &[&Vec<u32>], mode: TapeMode) -> Result<(Var, Vec<Var>)> {
    let inputs: Vec<&[u32]> = batch.iter().map(|w| shift(w).0).collect();
    let targets: Vec<u32> = batch.iter().flat_map(|w| shift(w).1.iter().copied()).collect();
    let fwd = model.forward_tape(tape, &inputs, mode)?;
    let loss = tape.cross_entropy(fwd.logits, &targets)?;
    Ok((loss, fwd.params))
}

/// Gradients of `loss` for each of `params`, zero where the loss does not
/// depend on a parameter.
fn collect_grads(tape: &mut Tape, loss: Var, params: &[Var]) -> Result<Vec<FloatTensor>> {
    let mut grads = tape.backward(loss)?;
    Ok(params
        .iter()
        .map(|&p| grads.take(p).unwrap_or_else(|| FloatTensor::zeros(tape.value(p).shape().clone())))
        .collect())
}

/// Mean next-token loss over `batch` and its gradient with respect to every
/// scale vector, under fake quantization with `spec`.
pub fn scale_gradients(
    model: &Model,
    scales: &ScaleSet,
    batch: &[Vec<u32>],
    spec: &QuantSpec,
) -> Result<(f32, Vec<FloatTensor>)> {
    check_windows(batch)?;
    let batch: Vec<&Vec<u32>> = batch.iter().collect();
    let mut tape = Tape::new();
    let (loss, params) = batch_loss(model, &mut tape, &batch, TapeMode::Scales { scales, spec })?;
    let value = tape.value(loss).item().unwrap_or(f32::NAN);
    Ok((value, collect_grads(&mut tape, loss, &params)?))
}

/// Float pretraining settings for the substrate model.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optimizer: AdamW,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 4,
            seq_len: 255,
            optimizer: AdamW {
                learning_rate: 3e-3,
                ..AdamW::default()
            },
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Trains every float parameter on random windows of `tokens` (no
/// quantization). Returns the per-step loss history.
pub fn pretrain_float(
    model: &mut Model,
    tokens: &[u32],
    cfg: &PretrainConfig,
    mut progress: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<Vec<StepRecord>> {
    let window = cfg.seq_len + 1;
    if cfg.seq_len == 0 || cfg.seq_len > model.config.max_seq_len {
        return Err(Error::invalid(format!(
            "pretrain seq_len {} must be in 1..={}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    if tokens.len() < window {
        return Err(Error::Empty("pretraining corpus shorter than one window"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.parameters().into_iter().map(|(_, t)| t));
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=tokens.len() - window);
                tokens[start..start + window].to_vec()
            })
            .collect();
        let refs: Vec<&Vec<u32>> = batch.iter().collect();
        let mut tape = Tape::new();
        let (loss, params) = batch_loss(model, &mut tape, &refs, TapeMode::Weights)?;
        let loss_value = tape.value(loss).item().unwrap_or(f32::NAN);
        if !loss_value.is_finite() {
            return Err(Error::NumericalAbort { step, loss: loss_value });
        }
        let mut grads = collect_grads(&mut tape, loss, &params)?;
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .fold(0.0f64, |a, &g| a + (g as f64) * (g as f64))
                .sqrt() as f32;
            if norm > cfg.grad_clip {
                let f = cfg.grad_clip / norm;
                grads = grads.into_iter().map(|g| g.mul_scalar(f)).collect();
            }
        }
        let mut params_mut = model.parameters_mut();
        cfg.optimizer.step(&mut state, &mut params_mut, &grads)?;
        let rec = StepRecord {
            step,
            loss: loss_value,
            ppl: loss_value.exp(),
        };
        if let Some(p) = progress.as_deref_mut() {
            p(&rec);
        }
        history.push(rec);
    }
    Ok(history)
}

/// Scale-only training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamW,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Report a progress record every this many steps; 0 disables reporting.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamW::default(),
            epochs: 6,
            batch_size: 4,
            seed: 0,
            ablation: Ablation::FULL,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.learning_rate;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub scales: ScaleSet,
    pub history: Vec<StepRecord>,
}

/// Optimizes only the activation scales with AdamW on fake-quantized
/// forward passes, projecting every scale to at least the floor after each
/// step. Weights are frozen; their digest is checked before returning.
pub fn train_scales(
    model: &Model,
    scales: &ScaleSet,
    windows: &[Vec<u32>],
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_scales(scales)?;
    let spec = QuantSpec::new(scales.bits, Granularity::PerChannel)?.with_ablation(cfg.ablation);
    let mut scales = scales.clone();
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { scales, history });
    }
    check_windows(windows)?;
    let digest = model.weight_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(scales.iter().map(|(_, s)| s.values()));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &windows[i]).collect();
            let mut tape = Tape::new();
            let (loss, params) = batch_loss(model, &mut tape, &batch, TapeMode::Scales { scales: &scales, spec: &spec })?;
            let loss_value = tape.value(loss).item().unwrap_or(f32::NAN);
            if !loss_value.is_finite() {
                return Err(Error::NumericalAbort { step, loss: loss_value });
            }
            let grads = collect_grads(&mut tape, loss, &params)?;
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NumericalAbort { step, loss: loss_value });
            }
            let mut values: Vec<FloatTensor> = scales.iter().map(|(_, s)| s.values().clone()).collect();
            {
                let mut refs: Vec<&mut FloatTensor> = values.iter_mut().collect();
                cfg.optimizer.step(&mut state, &mut refs, &grads)?;
            }
            for (i, v) in values.into_iter().enumerate() {
                if !v.all_finite() {
                    return Err(Error::NumericalAbort { step, loss: loss_value });
                }
                let projected = v.map(|s| s.max(spec.scale_floor));
                scales.set(i, projected, spec.scale_floor)?;
            }
            let rec = StepRecord {
                step,
                loss: loss_value,
                ppl: loss_value.exp(),
            };
            if let Some(p) = progress.as_deref_mut() {
                if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                    p(&rec);
                }
            }
            history.push(rec);
            step += 1;
        }
    }
    if model.weight_digest() != digest {
        return Err(Error::invalid("model weights changed during scale training"));
    }
    Ok(TrainOutcome { scales, history })
}

/// Perplexity over consecutive non-overlapping windows of `max_seq_len`
/// tokens (the final partial window included when it has at least two
/// tokens). Windows are evaluated in parallel and summed in order.
pub fn evaluate_ppl(model: &Model, tokens: &[u32], mode: Mode) -> Result<f64> {
    let len = model.config.max_seq_len;
    let windows: Vec<&[u32]> = tokens.chunks(len).filter(|w| w.len() >= 2).collect();
    if windows.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let sums: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|w| {
            let (x, y) = shift(w);
            let logits = model.forward(x, mode, None, None)?;
            Ok((nn::nll_sum(&logits, y)?, y.len()))
        })
        .collect::<Result<_>>()?;
    let (nll, count) = sums.iter().fold((0.0f64, 0usize), |(a, c), &(s, n)| (a + s, c + n));
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate, quantize_weights, windows, Reduction};
    use crate::model::ModelConfig;

    #[test]
    fn adamw_matches_hand_steps() {
        // Loss (p - 3)^2 from p = 1; gradient 2(p - 3).
        let opt = AdamW {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = FloatTensor::vector(vec![1.0]).unwrap();
        let mut state = OptimizerState::new([&p]);
        let (mut rp, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (p.data()[0] - 3.0);
            opt.step(&mut state, &mut [&mut p], &[FloatTensor::vector(vec![g]).unwrap()]).unwrap();
            let rg = 2.0 * (rp - 3.0);
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rp -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] as f64 - rp).abs() < 1e-5, "step {t}");
        }
        // First Adam step moves by exactly the learning rate.
        assert!((1.1 - {
            let mut q = FloatTensor::vector(vec![1.0]).unwrap();
            let mut s = OptimizerState::new([&q]);
            opt.step(&mut s, &mut [&mut q], &[FloatTensor::vector(vec![-4.0]).unwrap()]).unwrap();
            q.data()[0]
        })
        .abs()
            < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let opt = AdamW {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let mut p = FloatTensor::vector(vec![2.0]).unwrap();
        let mut state = OptimizerState::new([&p]);
        opt.step(&mut state, &mut [&mut p], &[FloatTensor::vector(vec![0.0]).unwrap()]).unwrap();
        assert!((p.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
    }

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 32,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 24,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn corpus() -> Vec<u32> {
        (0..480u32).map(|i| (i * 7 + i / 5) % 31 + 1).collect()
    }

    fn prepared() -> (Model, ScaleSet, Vec<Vec<u32>>) {
        let mut m = tiny();
        let spec = QuantSpec::new(8, Granularity::PerChannel).unwrap();
        quantize_weights(&mut m, &spec).unwrap();
        let w = windows(&corpus(), 24);
        let s = calibrate(&m, &w[..4], &spec, Reduction::Mean).unwrap();
        (m, s, w)
    }

    #[test]
    fn zero_learning_rate_keeps_scales() {
        let (m, s, w) = prepared();
        let cfg = TrainConfig {
            optimizer: AdamW {
                learning_rate: 0.0,
                ..AdamW::default()
            },
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_scales(&m, &s, &w, &cfg, None).unwrap();
        assert_eq!(out.scales, s);
        assert!(!out.history.is_empty());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (m, s, w) = prepared();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_scales(&m, &s, &w, &cfg, None).unwrap();
        assert_eq!(out.scales, s);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_keeps_scales_positive() {
        let (m, s, w) = prepared();
        let cfg = TrainConfig {
            optimizer: AdamW {
                learning_rate: 5e-3,
                ..AdamW::default()
            },
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_scales(&m, &s, &w, &cfg, None).unwrap();
        let b = train_scales(&m, &s, &w, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scales, s);
        for (_, sv) in a.scales.iter() {
            assert!(sv.values().data().iter().all(|&v| v >= 1e-8));
        }
    }

    #[test]
    fn aggressive_steps_are_projected_to_the_floor() {
        let (m, s, w) = prepared();
        let cfg = TrainConfig {
            optimizer: AdamW {
                learning_rate: 10.0,
                ..AdamW::default()
            },
            epochs: 1,
            ..TrainConfig::default()
        };
        match train_scales(&m, &s, &w, &cfg, None) {
            Ok(out) => {
                for (_, sv) in out.scales.iter() {
                    assert!(sv.values().data().iter().all(|&v| v >= 1e-8));
                }
            }
            Err(Error::NumericalAbort { .. }) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn scale_count_mismatch_rejected() {
        let (m, s, w) = prepared();
        let entries = s.iter().skip(1).map(|(n, v)| (n.to_string(), v.clone())).collect();
        let short = ScaleSet::new(8, entries).unwrap();
        assert!(matches!(
            train_scales(&m, &short, &w, &TrainConfig::default(), None),
            Err(Error::ScaleMismatch(_))
        ));
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = tiny();
        for p in m.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        let ppl = evaluate_ppl(&m, &corpus()[..24], Mode::Float).unwrap();
        assert!((ppl - 32.0).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn fake_and_int_eval_agree() {
        let (m, s, _) = prepared();
        let spec = QuantSpec::new(8, Granularity::PerChannel).unwrap();
        let fake = evaluate_ppl(&m, &corpus(), Mode::FakeQuant { scales: &s, spec: &spec }).unwrap();
        let int = evaluate_ppl(&m, &corpus(), Mode::IntStatic { scales: &s, spec: &spec }).unwrap();
        assert!(((fake - int) / fake).abs() < 1e-3);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut m = tiny();
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 4,
            seq_len: 16,
            ..PretrainConfig::default()
        };
        let hist = pretrain_float(&mut m, &corpus(), &cfg, None).unwrap();
        let head: f32 = hist[..5].iter().map(|r| r.loss).sum::<f32>() / 5.0;
        let tail: f32 = hist[55..].iter().map(|r| r.loss).sum::<f32>() / 5.0;
        assert!(tail < head * 0.8, "{head} -> {tail}");
    }

    #[test]
    fn loss_csv_format() {
        let mut out = Vec::new();
        write_loss_csv(&[StepRecord { step: 0, loss: 1.5, ppl: 1.5f32.exp() }], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,loss,ppl\n0,1.5,4.48"));
    }
}
