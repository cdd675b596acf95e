//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{merge_checkpoints, Checkpoint};
use crate::config::CliConfig;
use crate::data::{load_jsonl, render, Side, Tokenizer};
use crate::embeddings;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalTask};
use crate::model::Model;
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "c2", version, about = "Train, embed with, evaluate and merge code embedding models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune adapters and the pooling head; writes checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed one text per input line into a binary embedding file.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        side: Side,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip L2 normalization of the output vectors.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score retrieval tasks and print a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1..)]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Weighted merge of two or more checkpoints.
    Merge {
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print checkpoint metadata and parameter shapes.
    Inspect { checkpoint: PathBuf },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<CliConfig> {
    let mut cfg = CliConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

fn write_out(out: &mut impl Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

/// Checkpoint if given, else a freshly initialized model from the config.
fn load_model(cfg: &CliConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint.or(cfg.eval.checkpoint.as_deref()) {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.meta.model != cfg.model_config() {
                log::warn!("{} was trained with a different model config; using the checkpoint's", p.display());
            }
            Ok(ckpt.to_model())
        }
        None => {
            log::warn!("no checkpoint given; embedding with freshly initialized weights");
            Model::init(cfg.model_config(), cfg.seed)
        }
    }
}

pub fn run(cli: Cli, stdout: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Train { config, seed } => cmd_train(&config, seed, stdout),
        Command::Embed {
            config,
            input,
            side,
            task,
            out,
            checkpoint,
            raw,
            seed,
        } => cmd_embed(&config, seed, &input, side, &task, &out, checkpoint.as_deref(), !raw),
        Command::Eval {
            config,
            tasks,
            checkpoint,
            out,
            seed,
        } => cmd_eval(&config, seed, &tasks, checkpoint.as_deref(), out.as_deref(), stdout),
        Command::Merge {
            weights,
            checkpoints,
            out,
        } => cmd_merge(&checkpoints, &weights, &out),
        Command::Inspect { checkpoint } => write_out(stdout, Checkpoint::load(&checkpoint)?.describe().trim_end()),
    }
}

pub fn cmd_train(config: &Path, seed: Option<u64>, stdout: &mut impl Write) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = cfg
        .data
        .train
        .as_deref()
        .ok_or_else(|| Error::config("data.train", "required by the train command"))?;
    require_file(data)?;
    let templates = cfg.templates()?;
    let examples = load_jsonl(data, templates.as_ref())?;
    if let Some(reg) = &templates {
        if let Some(ex) = examples.iter().find(|e| !reg.contains(&e.dataset)) {
            reg.get(&ex.dataset)?;
        }
    }
    let run = cfg.run_config();
    let hash = cfg.hash();
    let model = Model::init(cfg.model_config(), cfg.seed)?;
    let mut io_err = None;
    let outcome = train(&examples, model, &run, templates.as_ref(), &hash, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(stdout, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io("<stdout>", e));
    }
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        log::info!("epoch {} mean loss {loss:.6}", epoch + 1);
    }
    let dir = &cfg.train.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ckpt in &outcome.checkpoints {
        let path = dir.join(format!("step-{:06}.c2pm", ckpt.meta.step));
        ckpt.save(&path)?;
        log::info!("wrote {}", path.display());
    }
    if let Some(weights) = &cfg.train.merge_weights {
        if weights.len() == outcome.checkpoints.len() {
            let merged = merge_checkpoints(&outcome.checkpoints, weights)?;
            let path = dir.join("merged.c2pm");
            merged.save(&path)?;
            log::info!("wrote {}", path.display());
        } else {
            log::warn!(
                "run produced {} checkpoints for {} merge weights; skipping merge",
                outcome.checkpoints.len(),
                weights.len()
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_embed(
    config: &Path,
    seed: Option<u64>,
    input: &Path,
    side: Side,
    task: &str,
    out: &Path,
    checkpoint: Option<&Path>,
    normalize: bool,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    require_file(input)?;
    let template = match cfg.templates()? {
        Some(reg) => Some(reg.get(task)?.clone()),
        None => None,
    };
    let model = load_model(&cfg, checkpoint)?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let tokenizer = Tokenizer::new(model.config.backbone.max_len)?;
    let seqs: Vec<Vec<usize>> = text
        .lines()
        .map(|line| match &template {
            Some(t) => tokenizer.tokenize(&render(line, t, side)),
            None => tokenizer.tokenize(line),
        })
        .collect();
    let rows: Vec<Vec<f64>> = model
        .embed_many(&seqs, normalize)?
        .into_iter()
        .map(|e| e.values.into_data())
        .collect();
    embeddings::save(out, &rows, model.dim())
}

pub fn cmd_eval(
    config: &Path,
    seed: Option<u64>,
    tasks: &[PathBuf],
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    stdout: &mut impl Write,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dirs = if tasks.is_empty() { cfg.eval.tasks.clone() } else { tasks.to_vec() };
    if dirs.is_empty() {
        return Err(Error::config("eval.tasks", "no task directories given"));
    }
    let templates = cfg.templates()?;
    let loaded = dirs
        .iter()
        .map(|d| EvalTask::load(d, templates.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let model = load_model(&cfg, checkpoint)?;
    let tokenizer = Tokenizer::new(model.config.backbone.max_len)?;
    let report = evaluate(&model, &tokenizer, &loaded, cfg.eval.k)?;
    let json = serde_json::to_string_pretty(&report.to_json())?;
    match out {
        Some(p) => std::fs::write(p, json + "\n").map_err(|e| Error::io(p, e)),
        None => write_out(stdout, &json),
    }
}

pub fn cmd_merge(paths: &[PathBuf], weights: &[f64], out: &Path) -> Result<()> {
    if paths.len() < 2 {
        return Err(Error::Contract("merge needs at least two checkpoints".into()));
    }
    if paths.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} checkpoints but {} weights",
            paths.len(),
            weights.len()
        )));
    }
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    merge_checkpoints(&ckpts, weights)?.save(out)
}
