use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sasq_core::persist::{detokenize, load_scales, save_model, save_scales, tokenize};
use sasq_core::pipeline::{self, Dataset};
use sasq_core::train::write_loss_csv;
use sasq_core::{
    evaluate_ppl, generate, run_ablation, train_scales, Ablation, Error, Mode, Model, PhasePolicy, RunConfig,
    ScaleSet, StepRecord,
};

#[derive(Parser)]
#[command(name = "sasq", version, about = "Scale-only quantization-aware training for a toy transformer")]
struct Cli {
    /// Worker threads for intra-op parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a float model from `model.seed` and save a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV path (default: next to the checkpoint).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Compute initial activation scales from calibration windows.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train activation scales with frozen weights.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scales: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, or a `+`-joined list of no-round, no-clamp, fp-weights.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Loss CSV path (default: next to the output scales).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Validation perplexity under one execution mode.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scales: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: EvalMode,
    },
    /// Generate a continuation of a prompt.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scales: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// phased, static-decode, float-decode or float (default: `gen.policy`).
        #[arg(long)]
        policy: Option<PhasePolicy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Train and evaluate every quantizer variant next to the float baseline.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scales: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Float,
    NaiveStatic,
    SasqStatic,
    Fake,
}

impl EvalMode {
    fn name(self) -> &'static str {
        match self {
            EvalMode::Float => "float",
            EvalMode::NaiveStatic => "naive-static",
            EvalMode::SasqStatic => "sasq-static",
            EvalMode::Fake => "fake",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems, 3 for bad input data, 4 for numerical
/// aborts.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::NumericalAbort { .. } | Error::Domain { .. }) => 4,
        Some(Error::Config { .. } | Error::InvalidArgument(_) | Error::AblatedExport(_)) => 2,
        _ => 3,
    }
}

/// The error chain joined with `: `, skipping causes already quoted by
/// their parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !msg.ends_with(&part) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&part);
        }
    }
    msg
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { source, .. } => Error::Config { line: 0, msg: source.to_string() },
        other => other,
    });
    cfg.with_context(|| format!("config {}", path.display()))
}

fn echo_config(cfg: &RunConfig) {
    let mut err = std::io::stderr().lock();
    for (k, v) in cfg.entries() {
        let _ = writeln!(err, "# {k} = {v}");
    }
}

fn read_scales(path: &Path, cfg: &RunConfig, model: &Model) -> anyhow::Result<ScaleSet> {
    let scales = load_scales(path).with_context(|| format!("scales {}", path.display()))?;
    if scales.bits != cfg.quant.bits {
        return Err(Error::InvalidArgument(format!(
            "scale file holds {}-bit scales but quant.bits = {}",
            scales.bits, cfg.quant.bits
        ))
        .into());
    }
    model.check_scales(&scales)?;
    Ok(scales)
}

fn sibling_csv(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

fn write_csv(path: &Path, history: &[StepRecord]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(history, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn progress(every: usize) -> impl FnMut(&StepRecord) {
    let every = every.max(1);
    move |r: &StepRecord| {
        if r.step.is_multiple_of(every) {
            eprintln!("step {:>5} loss {:.4} ppl {:.4}", r.step, r.loss, r.ppl);
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Pretrain {
            config,
            corpus,
            out,
            loss_csv,
        } => {
            let cfg = load_config(&config)?;
            echo_config(&cfg);
            let data = Dataset::load(&cfg, &corpus)?;
            let mut report = progress(50);
            let (model, history) = pipeline::pretrain(&cfg, &data, Some(&mut report))?;
            save_model(&out, &model)?;
            write_csv(&loss_csv.unwrap_or_else(|| sibling_csv(&out)), &history)?;
            let last = history.last().ok_or_else(|| anyhow!("no pretraining steps ran"))?;
            println!("steps,final_loss\n{},{}", history.len(), last.loss);
        }
        Command::Calibrate { config, corpus, out } => {
            let cfg = load_config(&config)?;
            echo_config(&cfg);
            let data = Dataset::load(&cfg, &corpus)?;
            let model = pipeline::load_quantized_model(&cfg)?;
            let scales = pipeline::calibrate_scales(&cfg, &model, &data)?;
            save_scales(&out, &scales)?;
            println!("layer,min,mean,max");
            for (name, s) in scales.iter() {
                let v = s.values().data();
                let min = v.iter().copied().fold(f32::INFINITY, f32::min);
                let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
                println!("{name},{min},{mean},{max}");
            }
        }
        Command::Train {
            config,
            corpus,
            scales,
            out,
            ablation,
            loss_csv,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(a) = ablation {
                cfg.train.ablation = a;
            }
            echo_config(&cfg);
            let data = Dataset::load(&cfg, &corpus)?;
            let model = pipeline::load_quantized_model(&cfg)?;
            let init = read_scales(&scales, &cfg, &model)?;
            let mut report = progress(cfg.train.eval_every);
            let outcome = train_scales(&model, &init, &data.train, &cfg.train, Some(&mut report))?;
            save_scales(&out, &outcome.scales)?;
            write_csv(&loss_csv.unwrap_or_else(|| sibling_csv(&out)), &outcome.history)?;
            let last = outcome.history.last().map_or(String::new(), |r| r.loss.to_string());
            println!("steps,final_loss\n{},{}", outcome.history.len(), last);
        }
        Command::Eval {
            config,
            corpus,
            scales,
            mode,
        } => {
            let cfg = load_config(&config)?;
            echo_config(&cfg);
            let data = Dataset::load(&cfg, &corpus)?;
            let model = pipeline::load_quantized_model(&cfg)?;
            let spec = cfg.quant_spec()?;
            let scales = match (mode, scales) {
                (EvalMode::Float, _) => None,
                (_, Some(path)) => Some(read_scales(&path, &cfg, &model)?),
                (EvalMode::NaiveStatic, None) => Some(pipeline::calibrate_scales(&cfg, &model, &data)?),
                (_, None) => bail!(Error::InvalidArgument(format!("--mode {} requires --scales", mode.name()))),
            };
            let valid = &data.split.valid;
            let ppl = match (mode, &scales) {
                (EvalMode::Fake, Some(s)) => evaluate_ppl(&model, valid, Mode::FakeQuant { scales: s, spec: &spec })?,
                (EvalMode::NaiveStatic | EvalMode::SasqStatic, Some(s)) => {
                    evaluate_ppl(&model, valid, Mode::IntStatic { scales: s, spec: &spec })?
                }
                _ => evaluate_ppl(&model, valid, Mode::Float)?,
            };
            println!("{},{}", mode.name(), ppl);
        }
        Command::Generate {
            config,
            scales,
            prompt,
            policy,
            seed,
            transcript,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(s) = seed {
                cfg.gen.seed = s;
            }
            echo_config(&cfg);
            let model = pipeline::load_quantized_model(&cfg)?;
            let scales = scales.map(|p| read_scales(&p, &cfg, &model)).transpose()?;
            let prompt_ids = tokenize(prompt.as_bytes());
            let out = generate(&model, scales.as_ref(), &cfg.quant_spec()?, &prompt_ids, &cfg.gen, cfg.policy)?;
            let text = detokenize(&out.tokens);
            println!("{prompt}{text}");
            eprintln!(
                "# generated {} tokens, eos {}, identity checks {}",
                out.tokens.len(),
                out.hit_eos,
                out.identity_checks
            );
            if let Some(path) = transcript {
                fs::write(&path, format!("{prompt}{text}")).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Ablate { config, corpus, scales } => {
            let cfg = load_config(&config)?;
            echo_config(&cfg);
            let data = Dataset::load(&cfg, &corpus)?;
            let model = pipeline::load_quantized_model(&cfg)?;
            let init = read_scales(&scales, &cfg, &model)?;
            let every = cfg.train.eval_every.max(1);
            let mut report = |variant: &str, r: &StepRecord| {
                if r.step.is_multiple_of(every) {
                    eprintln!("{variant:<12} step {:>5} loss {:.4}", r.step, r.loss);
                }
            };
            let table = run_ablation(&model, &init, &data.train, &data.split.valid, &cfg.train, Some(&mut report))?;
            print!("{}", table.to_csv());
            eprint!("\n{}", table.to_table());
            if let Some(line) = table.clamp_vs_round() {
                eprintln!("{line}");
            }
        }
    }
    Ok(())
}
