//! Float substrate sanity: a small model must overfit a repeated pattern and
//! then reproduce it greedily.

use std::sync::OnceLock;

use sasq_core::persist::tokenize;
use sasq_core::*;

const PATTERN: &[u8] = b"the quick brown fox jumps over the lazy dog; ";

fn corpus() -> Vec<u32> {
    tokenize(&PATTERN.iter().copied().cycle().take(1024).collect::<Vec<u8>>())
}

fn overfit() -> &'static (Model, Vec<StepRecord>) {
    static CELL: OnceLock<(Model, Vec<StepRecord>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, 0).unwrap();
        let cfg = PretrainConfig {
            steps: 500,
            batch_size: 4,
            seq_len: 64,
            ..PretrainConfig::default()
        };
        let history = pretrain_float(&mut model, &corpus(), &cfg, None).unwrap();
        (model, history)
    })
}

#[test]
fn small_model_overfits_a_repeated_pattern() {
    let (model, history) = overfit();
    assert_eq!(history.len(), 500);
    let ppl = evaluate_ppl(model, &corpus(), Mode::Float).unwrap();
    assert!(ppl < 2.0, "ppl {ppl}");
}

#[test]
fn memorized_pattern_is_continued() {
    let (model, _) = overfit();
    let text = corpus();
    let prompt = &text[7..7 + 16];
    let gen = GenConfig {
        greedy: true,
        max_new_tokens: 48,
        ..GenConfig::default()
    };
    let spec = QuantSpec::new(8, Granularity::PerChannel).unwrap();
    let out = generate(model, None, &spec, prompt, &gen, PhasePolicy::FLOAT).unwrap();
    let expected = &text[23..23 + 48];
    let run = out.tokens.iter().zip(expected).take_while(|(a, b)| a == b).count();
    assert!(run >= 32, "matched {run} tokens");
}
