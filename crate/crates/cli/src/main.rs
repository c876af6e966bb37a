use std::fs;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctiner::config::{Overrides, RunConfig};
use ctiner::model::Switches;
use ctiner::pipeline::{self, RunDir};
use ctiner::Error;

#[derive(Parser, Debug)]
#[command(name = "ctiner", version, about = "Entity recognition for threat intelligence reports")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset name; also selects the default label scheme.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Channels to enable, e.g. `base`, `base+hsa`, `base+ext+hsa`.
    #[arg(long, global = true)]
    switches: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the corpus and build vocabularies.
    Prepare,
    /// Train POS tag embeddings on the training split.
    PretrainPos,
    /// Train domain word embeddings.
    PretrainDomain,
    /// Compute the top-K neighbour cache of the domain embeddings.
    PrecomputeNeighbors,
    /// Train a model and write the checkpoint and run manifest.
    Train,
    /// Score the checkpoint on the test split, or score a predictions file.
    Eval {
        /// `token gold pred` file to score instead of the checkpoint.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Label raw text, one sentence per line; prints `token<TAB>label`.
    Tag {
        /// Input file; standard input when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train and test the six ablation configurations.
    Ablate,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Flags that reproduce this invocation, for suggested follow-up commands.
fn hint(c: &Common) -> String {
    let mut parts = Vec::new();
    if let Some(p) = &c.config {
        parts.push(format!("--config {}", p.display()));
    }
    if let Some(d) = &c.dataset {
        parts.push(format!("--dataset {d}"));
    }
    if let Some(s) = &c.switches {
        parts.push(format!("--switches {s}"));
    }
    if let Some(s) = c.seed {
        parts.push(format!("--seed {s}"));
    }
    if let Some(o) = &c.out {
        parts.push(format!("--out {}", o.display()));
    }
    parts.join(" ")
}

fn load_config(c: &Common) -> ctiner::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let switches = c.switches.as_deref().map(str::parse::<Switches>).transpose()?;
    cfg.apply(&Overrides {
        dataset: c.dataset.clone(),
        switches,
        seed: c.seed,
        out_dir: c.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> ctiner::Result<()> {
    if let Command::Eval { pred: Some(p) } = &cli.command {
        let exclude_o = match &cli.common.config {
            Some(_) => load_config(&cli.common)?.eval.accuracy_excludes_o,
            None => false,
        };
        let report = pipeline::eval_predictions_file(p, exclude_o)?;
        print!("{}", report.to_table());
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    let dir = RunDir::new(&cfg.out_dir, hint(&cli.common));
    match cli.command {
        Command::Prepare => {
            let split = pipeline::stage_prepare(&cfg, &dir)?;
            println!(
                "split {} / {} / {} sentences into {}",
                split.train.len(),
                split.valid.len(),
                split.test.len(),
                dir.root.display()
            );
        }
        Command::PretrainPos => {
            let t = pipeline::stage_pretrain_pos(&cfg, &dir)?;
            println!("wrote {} ({} dims)", dir.path(pipeline::POS_VECTORS).display(), t.dim());
        }
        Command::PretrainDomain => {
            let m = pipeline::stage_pretrain_domain(&cfg, &dir)?;
            println!(
                "wrote {} ({} words, {} dims)",
                dir.path(pipeline::DOMAIN_VECTORS).display(),
                m.vectors.len(),
                m.dim()
            );
        }
        Command::PrecomputeNeighbors => {
            let c = pipeline::stage_precompute_neighbors(&cfg, &dir)?;
            println!("wrote {} ({} words, K = {})", dir.path(pipeline::NEIGHBORS).display(), c.len(), c.k);
        }
        Command::Train => {
            let o = pipeline::stage_train(&cfg, &dir)?;
            println!(
                "{}: best validation F1 {:.4} at epoch {}; wrote {}",
                cfg.switches,
                o.best_valid_f1,
                o.best_epoch,
                dir.path(pipeline::CHECKPOINT).display()
            );
        }
        Command::Eval { .. } => {
            let report = pipeline::stage_eval(&cfg, &dir)?;
            print!("{}", report.to_table());
        }
        Command::Tag { input } => {
            let text = match input {
                Some(p) => fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?,
                None => {
                    let mut s = String::new();
                    io::stdin()
                        .read_to_string(&mut s)
                        .map_err(|e| Error::io("<stdin>", e))?;
                    s
                }
            };
            let trained = pipeline::load_trained(&cfg, &dir)?;
            let tagged = pipeline::tag_lines(&trained, &text)?;
            let mut out = io::stdout().lock();
            for (i, (tokens, labels)) in tagged.iter().enumerate() {
                if i > 0 {
                    let _ = writeln!(out);
                }
                for (t, l) in tokens.iter().zip(labels) {
                    let _ = writeln!(out, "{t}\t{l}");
                }
            }
        }
        Command::Ablate => {
            let table = pipeline::stage_ablate(&cfg, &dir)?;
            print!("{}", ctiner::training::render_ablation(&[table]));
        }
    }
    Ok(())
}
