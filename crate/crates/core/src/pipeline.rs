//! Glue shared by the command line and end-to-end tests: corpus splits,
//! model loading and the calibrate/train sequence driven by a [`RunConfig`].

use std::path::Path;

use crate::calib::{calibrate, quantize_weights, windows};
use crate::error::{Error, Result};
use crate::model::{Model, ScaleSet};
use crate::persist::{load_corpus, load_model, split_corpus, CorpusSplit, RunConfig};
use crate::train::{pretrain_float, StepRecord};

/// Corpus slices cut into model-length windows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: CorpusSplit,
    /// Calibration windows, at most `quant.calib_batches` of them.
    pub calib: Vec<Vec<u32>>,
    pub train: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn new(cfg: &RunConfig, tokens: &[u32]) -> Result<Self> {
        let split = split_corpus(tokens, cfg.data.calib_fraction, cfg.data.valid_fraction)?;
        let len = cfg.model.max_seq_len;
        let mut calib = windows(&split.calib, len);
        calib.truncate(cfg.quant.calib_batches);
        if calib.is_empty() {
            return Err(Error::Empty("calibration split shorter than one window"));
        }
        let train = windows(&split.train, len);
        if train.is_empty() {
            return Err(Error::Empty("training split shorter than one window"));
        }
        if split.valid.len() < 2 {
            return Err(Error::Empty("validation split"));
        }
        Ok(Dataset { split, calib, train })
    }

    pub fn load(cfg: &RunConfig, corpus: impl AsRef<Path>) -> Result<Self> {
        Self::new(cfg, &load_corpus(corpus)?)
    }
}

/// Loads the configured checkpoint, or builds a freshly initialized model
/// when none is set.
pub fn load_float_model(cfg: &RunConfig) -> Result<Model> {
    match &cfg.checkpoint {
        Some(path) => load_model(path, cfg.model.clone()),
        None => Model::new(cfg.model.clone(), cfg.model_seed),
    }
}

/// [`load_float_model`] followed by weight quantization under the configured
/// spec.
pub fn load_quantized_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = load_float_model(cfg)?;
    quantize_weights(&mut model, &cfg.quant_spec()?)?;
    Ok(model)
}

/// Initializes from `model.seed` and pretrains in float on the training split.
pub fn pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    progress: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut model = Model::new(cfg.model.clone(), cfg.model_seed)?;
    let history = pretrain_float(&mut model, &data.split.train, &cfg.pretrain, progress)?;
    Ok((model, history))
}

/// Calibration scales for an already weight-quantized model.
pub fn calibrate_scales(cfg: &RunConfig, model: &Model, data: &Dataset) -> Result<ScaleSet> {
    calibrate(model, &data.calib, &cfg.quant_spec()?, cfg.quant.calib_reduction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_windows_follow_config() {
        let mut cfg = RunConfig::default();
        cfg.model.max_seq_len = 16;
        cfg.quant.calib_batches = 2;
        let tokens: Vec<u32> = (0..1000u32).map(|i| i % 200 + 1).collect();
        let d = Dataset::new(&cfg, &tokens).unwrap();
        assert_eq!(d.calib.len(), 2);
        assert_eq!(d.train.len(), 800 / 16);
        assert!(d.train.iter().chain(&d.calib).all(|w| w.len() == 16));
        assert_eq!(d.split.valid.len(), 100);
    }

    #[test]
    fn tiny_corpus_is_a_data_error() {
        let cfg = RunConfig::default();
        assert!(matches!(Dataset::new(&cfg, &[5; 300]), Err(Error::Empty(_))));
    }
}
