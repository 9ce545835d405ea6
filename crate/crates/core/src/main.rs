use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use casr::config::RunConfig;
use casr::dataset::{generate_split, load_manifest, write_dataset, Example, Split};
use casr::encoders::Mode;
use casr::error::{Error, Result};
use casr::metrics::{corpus_eval, streaming_eval};
use casr::model::CascadedModel;
use casr::par::threads_from_env;
use casr::trainer::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "casr", version, about = "Cascaded-encoder transducer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    Longform,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Causal,
    Noncausal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic split: manifest plus feature files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        num_utterances: Option<usize>,
        /// Overrides the task seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and a JSON-lines log to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; its config wins over --config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Offline decoding of a dataset; prints one metrics document.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "causal")]
        mode: ModeArg,
        /// 0 selects greedy search.
        #[arg(long)]
        beam: Option<usize>,
        /// Must describe the same model as the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Streams every utterance through the causal path; prints latency and WER.
    Latency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => 3,
        Error::Divergence(_) => 4,
        Error::Mismatch(_) => 5,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn gen_data(
    config: Option<&Path>,
    out_dir: &Path,
    split: SplitArg,
    num: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.task.seed = s;
    }
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
        SplitArg::Longform => Split::Longform,
    };
    let n = num.unwrap_or(match split {
        Split::Train => cfg.data.train_utterances,
        Split::Eval => cfg.data.eval_utterances,
        Split::Longform => cfg.data.longform_utterances,
    });
    let examples = generate_split(&cfg.task, &cfg.data, split, n)?;
    fs::create_dir_all(out_dir)?;
    let manifest = write_dataset(out_dir, &examples)?;
    let tokens: usize = examples.iter().map(|e| e.utterance.tokens.len()).sum();
    let frames: usize = examples.iter().map(|e| e.utterance.features.num_frames()).sum();
    print_json(&json!({
        "split": split.name(),
        "utterances": examples.len(),
        "tokens": tokens,
        "frames": frames,
        "manifest": manifest,
    }))
}

fn check_data(examples: &[Example], model: &CascadedModel) -> Result<()> {
    if let Some(ex) = examples
        .iter()
        .find(|e| e.utterance.features.dim() != model.config.input_dim)
    {
        return Err(Error::Mismatch(format!(
            "{}: feature dim {} but the model expects {}",
            ex.id,
            ex.utterance.features.dim(),
            model.config.input_dim
        )));
    }
    Ok(())
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let (mut run, mut trainer) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let run = ckpt.config.clone();
            (run, Trainer::from_checkpoint(ckpt)?)
        }
        None => {
            let mut run = load_config(config)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let model = CascadedModel::new(run.model.clone(), run.train.seed)?;
            let trainer = Trainer::new(model, run.train.clone())?;
            (run, trainer)
        }
    };
    if let Some(s) = steps {
        run.train.steps = s;
        trainer.config.steps = s;
    }
    run.paths.train_data = Some(data.to_path_buf());
    run.paths.out_dir = Some(out.to_path_buf());
    trainer = trainer.with_threads(threads_from_env());

    let examples = load_manifest(data, run.model.vocab_size)?;
    check_data(&examples, &trainer.model)?;
    if examples.is_empty() {
        return Err(Error::Input(format!("{} holds no usable records", data.display())));
    }
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("train.jsonl"))?);
    serde_json::to_writer(&mut log, &json!({ "config": run }))?;
    writeln!(log)?;

    let every = run.train.checkpoint_every;
    let mut last = None;
    while trainer.step < run.train.steps {
        let stats = match trainer.step_on(&examples) {
            Ok(s) => s,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        serde_json::to_writer(
            &mut log,
            &json!({
                "step": stats.step,
                "loss": stats.loss,
                "mode": stats.mode,
                "grad_norm": stats.grad_norm,
            }),
        )?;
        writeln!(log)?;
        last = Some(stats.loss);
        if every > 0 && stats.step % every == 0 {
            let path = out.join(format!("step-{:06}.ckpt", stats.step));
            save_checkpoint(&path, &trainer.checkpoint(&run))?;
            log::info!("wrote {}", path.display());
        }
    }
    log.flush()?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&final_path, &trainer.checkpoint(&run))?;
    print_json(&json!({
        "steps": trainer.step,
        "final_loss": last,
        "checkpoint": final_path,
        "log": out.join("train.jsonl"),
    }))
}

fn load_for_eval(checkpoint: &Path, config: Option<&Path>) -> Result<(Checkpoint, CascadedModel)> {
    let ckpt = load_checkpoint(checkpoint)?;
    if config.is_some() {
        let cfg = load_config(config)?;
        if cfg.model != ckpt.config.model {
            return Err(Error::Mismatch(
                "--config describes a different model than the checkpoint".into(),
            ));
        }
    }
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    mode: ModeArg,
    beam: Option<usize>,
    config: Option<&Path>,
) -> Result<()> {
    let (ckpt, model) = load_for_eval(checkpoint, config)?;
    let examples = load_manifest(data, model.vocab_size())?;
    check_data(&examples, &model)?;
    let mut search = ckpt.config.decode.search();
    if let Some(b) = beam {
        search.beam = b;
    }
    let mode = match mode {
        ModeArg::Causal => Mode::Causal,
        ModeArg::Noncausal => Mode::Noncausal,
    };
    let report = corpus_eval(&examples, &model, mode, search, threads_from_env())?;
    print_json(&serde_json::to_value(report)?)
}

fn latency(checkpoint: &Path, data: &Path, config: Option<&Path>) -> Result<()> {
    let (ckpt, model) = load_for_eval(checkpoint, config)?;
    let examples = load_manifest(data, model.vocab_size())?;
    check_data(&examples, &model)?;
    let report = streaming_eval(
        &examples,
        &model,
        ckpt.config.decode.max_symbols_per_frame,
        threads_from_env(),
    )?;
    print_json(&serde_json::to_value(report)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out_dir,
            split,
            num_utterances,
            seed,
        } => gen_data(config.as_deref(), &out_dir, split, num_utterances, seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            steps,
            seed,
        } => train(config.as_deref(), &data, &out, resume.as_deref(), steps, seed),
        Command::Eval {
            checkpoint,
            data,
            mode,
            beam,
            config,
        } => eval(&checkpoint, &data, mode, beam, config.as_deref()),
        Command::Latency {
            checkpoint,
            data,
            config,
        } => latency(&checkpoint, &data, config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("casr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
