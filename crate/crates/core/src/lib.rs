//! Scale-only quantization-aware training and phased static/dynamic integer
//! inference for a small decoder-only transformer.

pub mod ablation;
pub mod autodiff;
pub mod calib;
pub mod error;
pub mod infer;
pub mod model;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod qlinear;
pub mod quant;
pub mod tensor;
pub mod train;

pub use ablation::{run_ablation, AblationReport, AblationRow};
pub use autodiff::{Gradients, Tape, Var};
pub use calib::{calibrate, quantize_weights, Reduction};
pub use error::{Error, Result};
pub use infer::{generate, nucleus_sample, DecodeMode, GenConfig, Generation, PhasePolicy, PrefillMode};
pub use model::{KvCache, Mode, Model, ModelConfig, ScaleSet, TapeMode};
pub use persist::{CorpusSplit, RunConfig, StoredTensor};
pub use qlinear::{forward_dynamic_per_token, forward_int, QuantLinear};
pub use quant::{Ablation, Granularity, QuantSpec, QuantizedTensor, ScaleVector};
pub use tensor::{Axis, FloatTensor, IntTensor, Shape};
pub use train::{evaluate_ppl, pretrain_float, scale_gradients, train_scales, AdamW, PretrainConfig, StepRecord, TrainConfig, TrainOutcome};
pub use pipeline::Dataset;
