//! Ablation harness: trains scales under each quantizer variant and reports
//! validation perplexity next to the float baseline.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{Mode, Model, ScaleSet};
use crate::quant::{Ablation, Granularity, QuantSpec};
use crate::train::{evaluate_ppl, train_scales, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    /// `None` for the float baseline.
    pub ablation: Option<Ablation>,
    pub ppl: f64,
    pub final_train_loss: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// The trained variants in report order. The last row removes every
/// quantizer component and should reproduce the float baseline.
pub const VARIANTS: [(&str, Ablation); 5] = [
    ("full", Ablation::FULL),
    (
        "w/o round",
        Ablation {
            no_round: true,
            no_clamp: false,
            fp_weights: false,
        },
    ),
    (
        "w/o clamp",
        Ablation {
            no_round: false,
            no_clamp: true,
            fp_weights: false,
        },
    ),
    (
        "fp weights",
        Ablation {
            no_round: false,
            no_clamp: false,
            fp_weights: true,
        },
    ),
    (
        "identity",
        Ablation {
            no_round: true,
            no_clamp: true,
            fp_weights: true,
        },
    ),
];

/// Trains a copy of `init` for each variant on `train_windows` and
/// evaluates fake-quantized perplexity on `valid`. `model` must already have
/// quantized weights.
pub fn run_ablation(
    model: &Model,
    init: &ScaleSet,
    train_windows: &[Vec<u32>],
    valid: &[u32],
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&str, &StepRecord)>,
) -> Result<AblationReport> {
    let mut rows = vec![AblationRow {
        variant: "float",
        ablation: None,
        ppl: evaluate_ppl(model, valid, Mode::Float)?,
        final_train_loss: None,
    }];
    for (name, ablation) in VARIANTS {
        let cfg = TrainConfig { ablation, ..cfg.clone() };
        let mut report = |r: &StepRecord| {
            if let Some(p) = progress.as_deref_mut() {
                p(name, r);
            }
        };
        let out = train_scales(model, init, train_windows, &cfg, Some(&mut report))?;
        let spec = QuantSpec::new(init.bits, Granularity::PerChannel)?.with_ablation(ablation);
        let ppl = evaluate_ppl(model, valid, Mode::FakeQuant { scales: &out.scales, spec: &spec })?;
        rows.push(AblationRow {
            variant: name,
            ablation: Some(ablation),
            ppl,
            final_train_loss: out.history.last().map(|r| r.loss),
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,ablation,ppl,final_train_loss\n");
        for r in &self.rows {
            let ablation = r.ablation.map_or("none".to_string(), |a| a.to_string());
            let loss = r.final_train_loss.map_or(String::new(), |l| l.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.variant, ablation, r.ppl, loss);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:<28} {:>12} {:>12}\n", "variant", "ablation", "ppl", "train loss");
        for r in &self.rows {
            let ablation = r.ablation.map_or("-".to_string(), |a| a.to_string());
            let loss = r.final_train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            let _ = writeln!(s, "{:<12} {:<28} {:>12.4} {:>12}", r.variant, ablation, r.ppl, loss);
        }
        s
    }

    /// One-line summary of whether removing clamp hurts more than removing
    /// rounding.
    pub fn clamp_vs_round(&self) -> Option<String> {
        let (nr, nc) = (self.row("w/o round")?.ppl, self.row("w/o clamp")?.ppl);
        let verdict = if nc > nr { "clamp matters more" } else { "rounding matters more" };
        Some(format!("w/o round ppl {nr:.4}, w/o clamp ppl {nc:.4}: {verdict}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate, quantize_weights, windows, Reduction};
    use crate::model::ModelConfig;

    #[test]
    fn report_covers_every_variant_and_identity_matches_float() {
        let mut m = Model::new(
            ModelConfig {
                vocab_size: 32,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 16,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let spec = QuantSpec::new(8, Granularity::PerChannel).unwrap();
        quantize_weights(&mut m, &spec).unwrap();
        let tokens: Vec<u32> = (0..160u32).map(|i| (i * 3 + i / 7) % 31 + 1).collect();
        let w = windows(&tokens[..128], 16);
        let init = calibrate(&m, &w[..2], &spec, Reduction::Mean).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let report = run_ablation(&m, &init, &w, &tokens[128..], &cfg, None).unwrap();
        assert_eq!(report.rows.len(), 6);
        let float = report.row("float").unwrap().ppl;
        let identity = report.row("identity").unwrap().ppl;
        assert!(((identity - float) / float).abs() < 1e-4);
        assert_eq!(report.to_csv().lines().count(), 7);
        assert!(report.to_table().contains("w/o clamp"));
        assert!(report.clamp_vs_round().is_some());
    }
}
