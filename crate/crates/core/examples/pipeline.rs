//! End-to-end run on the bundled corpus with the default configuration:
//! pretrain, calibrate, train scales, and compare float / naive-static /
//! trained-static perplexity.
//!
//! `cargo run --release -p sasq-core --example pipeline [corpus]`

use std::time::Instant;

use sasq_core::pipeline::{self, Dataset};
use sasq_core::*;

fn main() -> Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "data/sample.txt".into());
    let cfg = RunConfig::default();
    let data = Dataset::load(&cfg, &path)?;

    let t0 = Instant::now();
    let (mut model, hist) = pipeline::pretrain(&cfg, &data, None)?;
    println!("pretrain {:.1}s final loss {:.3}", t0.elapsed().as_secs_f32(), hist.last().map_or(f32::NAN, |r| r.loss));

    let spec = cfg.quant_spec()?;
    quantize_weights(&mut model, &spec)?;
    let init = pipeline::calibrate_scales(&cfg, &model, &data)?;
    let valid = &data.split.valid;
    let float = evaluate_ppl(&model, valid, Mode::Float)?;
    let naive = evaluate_ppl(&model, valid, Mode::IntStatic { scales: &init, spec: &spec })?;
    println!("float {float:.4} naive-static {naive:.4}");

    let t1 = Instant::now();
    let out = train_scales(&model, &init, &data.train, &cfg.train, None)?;
    println!("train {:.1}s steps {}", t1.elapsed().as_secs_f32(), out.history.len());
    let sasq = evaluate_ppl(&model, valid, Mode::IntStatic { scales: &out.scales, spec: &spec })?;
    println!("sasq-static {sasq:.4} improvement {:.2}%", 100.0 * (naive - sasq) / naive);
    Ok(())
}
