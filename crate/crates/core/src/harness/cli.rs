//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use super::eval::{evaluate, prune_csv, prune_sweep};
use super::gradcheck::grad_check;
use super::{analyze, train};
use crate::attention::Variant;
use crate::error::{shape_err, Error, Result};
use crate::model::{checkpoint, count_params, param_shapes, ModelConfig, ParamStore, RunMode};
use crate::rng;

#[derive(Debug, Parser)]
#[command(name = "emha", version, about = "Train and inspect enhanced multi-head attention encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the attention variant (mhsa, eit, eeit).
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct Held {
    /// Checkpoint to read; defaults to `<out>/checkpoint.emha`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the held-out split; defaults to the training seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch; writes checkpoint.emha, train.csv and config.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on held-out data; writes eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        held: Held,
        #[arg(long, default_value_t = 500)]
        examples: usize,
    },
    /// Per-layer attention and representation diagnostics; writes metrics.json and metrics.csv.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        held: Held,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Index-order head pruning sweep; writes prune.csv.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        held: Held,
        /// Comma-separated ratios; defaults to k/M for k = 0..=M.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, default_value_t = 500)]
        examples: usize,
    },
    /// Count parameters, optionally against another variant.
    ParamCount {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        diff: Option<Variant>,
    },
    /// Compare backprop with finite differences for every parameter tensor.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(v) = common.variant {
        cfg = cfg.with_variant(v);
    }
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn checkpoint_layout(store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let specs = param_shapes(cfg);
    if specs.len() != store.len() {
        return Err(shape_err!("checkpoint has {} tensors, config expects {}", store.len(), specs.len()));
    }
    for (spec, (name, t)) in specs.iter().zip(store.iter()) {
        if spec.name != name || spec.shape != t.shape() {
            return Err(shape_err!("checkpoint tensor `{name}` {:?} does not match `{}` {:?}", t.shape(), spec.name, spec.shape));
        }
    }
    Ok(())
}

fn load_checkpoint(common: &Common, held: &Held, cfg: &ModelConfig) -> Result<ParamStore> {
    let path = held.checkpoint.clone().unwrap_or_else(|| common.out.join("checkpoint.emha"));
    let store = checkpoint::load(&path)?;
    checkpoint_layout(&store, cfg)?;
    Ok(store)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let outcome = train(&cfg.model, cfg.task()?, &cfg.train, Some(&common.out))?;
            outcome.write(&common.out)?;
            if let Some(extra) = &cfg.train.checkpoint {
                checkpoint::save(&outcome.params, Path::new(extra))?;
            }
            write(&common.out, "config.json", &cfg.to_json()?)?;
            if let Some(last) = outcome.log.last() {
                println!("step {} loss {} acc {}", last.step, last.loss, last.acc);
            }
            Ok(true)
        }
        Command::Eval { common, held, examples } => {
            let cfg = load(&common)?;
            let params = load_checkpoint(&common, &held, &cfg.model)?;
            let split = held.split_seed.unwrap_or(cfg.train.seed);
            let res = evaluate(&params, &cfg.model, cfg.task()?, split, examples, None)?;
            let json = serde_json::to_string_pretty(&res)?;
            write(&common.out, "eval.json", &json)?;
            println!("{json}");
            Ok(true)
        }
        Command::Analyze { common, held, samples } => {
            let cfg = load(&common)?;
            let params = load_checkpoint(&common, &held, &cfg.model)?;
            let split = held.split_seed.unwrap_or(cfg.train.seed);
            let report = analyze(&params, &cfg.model, cfg.task()?, split, samples, cfg.hash()?)?;
            write(&common.out, "metrics.json", &report.to_json()?)?;
            let csv = report.to_csv();
            write(&common.out, "metrics.csv", &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::Prune { common, held, ratios, examples } => {
            let cfg = load(&common)?;
            let params = load_checkpoint(&common, &held, &cfg.model)?;
            let split = held.split_seed.unwrap_or(cfg.train.seed);
            let m = cfg.model.attn.heads;
            let ratios = ratios.unwrap_or_else(|| (0..=m).map(|k| k as f64 / m as f64).collect());
            let rows = prune_sweep(&params, &cfg.model, cfg.task()?, split, examples, &ratios)?;
            let csv = prune_csv(&rows);
            write(&common.out, "prune.csv", &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::ParamCount { common, diff } => {
            let cfg = load(&common)?;
            let base = count_params(&cfg.model);
            let name = cfg.model.attn.variant.short_name();
            println!("{name}: {base}");
            if let Some(other) = diff {
                let mut alt = cfg.model.clone();
                alt.attn.variant = other;
                alt.validate()?;
                let n = count_params(&alt);
                println!("{}: {n}", other.short_name());
                println!("delta ({name} - {}): {}", other.short_name(), base as i64 - n as i64);
            }
            Ok(true)
        }
        Command::GradCheck { common, tol } => {
            let cfg = load(&common)?;
            let seed = cfg.train.seed;
            let params = crate::model::build(&cfg.model, seed)?;
            let ex = cfg.task()?.generate(seed, rng::stream_id(&[rng::tag::TRAIN_DATA, 0]), 1)?.remove(0);
            let mode = RunMode::train(seed, rng::stream_id(&[rng::tag::DROPOUT, 0]));
            let report = grad_check(&params, &cfg.model, &ex, &mode, cfg.train.label_smoothing)?;
            for p in &report.params {
                println!("{:<32} {:>6}  {:.3e}", p.name, p.numel, p.max_rel_err);
            }
            let max = report.max_rel_err();
            println!("max relative error: {max:.3e} (tolerance {tol:.0e})");
            Ok(max < tol)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
