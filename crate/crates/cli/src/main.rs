//! Single-binary front end for the composed-retrieval lab. Resolves the run
//! configuration (defaults, then config file, then flag overrides), dispatches
//! to the pipeline, and maps errors to stable exit codes: 2 input, 3 missing
//! artifact, 4 numeric failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tcl_core::pipeline::{self, RunConfig, RunDir, Stage, STAGES};
use tcl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tcl", about = "Composed-retrieval training lab")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config resolution order: built-in defaults, then `--config`, then `--set`
/// assignments in flag order, then `--seed`/`--threads` (most specific wins).
#[derive(Args)]
struct Overrides {
    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Run seed; every stage derives its streams from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one config key, e.g. `--set lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Worker thread cap; 1 (the default) keeps runs bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DirArg {
    /// Run directory: manifest.txt, checkpoints/, triplets.tsv, reports/.
    #[arg(long, value_name = "DIR")]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and filter caption triplets from a corpus file.
    GenTriplets {
        /// Caption corpus, one caption per line.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Output TSV; a generation manifest is written next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Pretrain the image-to-pseudo-token projection.
    PretrainPhi(DirArg),
    /// Train the learnable encoder on the generated triplets.
    Train(DirArg),
    /// Evaluate retrieval for every query mode against the benchmark.
    Eval(DirArg),
    /// Run the component grid plus the naive-update row.
    Ablate(DirArg),
    /// Text-only retrieval probes and the average-cosine comparison.
    Probe(DirArg),
    /// Run all stages in order: align, phi, triplets, train, eval.
    Pipeline {
        #[command(flatten)]
        dir: DirArg,
        /// Run a single stage instead of all five.
        #[arg(long, value_name = "NAME")]
        stage: Option<String>,
    },
}

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &o.sets {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(Error::input(format!("--set expects KEY=VALUE, got {kv:?}")));
        };
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = o.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.overrides)?;
    match cli.cmd {
        Cmd::GenTriplets { corpus, out } => {
            let kept = pipeline::gen_triplets_cmd(&cfg, &corpus, &out)?;
            println!("wrote {kept} triplets to {}", out.display());
            Ok(())
        }
        Cmd::PretrainPhi(d) => pipeline::run_stage(&cfg, &RunDir::new(d.dir), Stage::Phi),
        Cmd::Train(d) => pipeline::run_stage(&cfg, &RunDir::new(d.dir), Stage::Train),
        Cmd::Eval(d) => pipeline::run_stage(&cfg, &RunDir::new(d.dir), Stage::Eval),
        Cmd::Ablate(d) => pipeline::run_ablation_cmd(&cfg, &RunDir::new(d.dir)),
        Cmd::Probe(d) => pipeline::run_probe_cmd(&cfg, &RunDir::new(d.dir)),
        Cmd::Pipeline { dir, stage } => {
            let dir = RunDir::new(dir.dir);
            match stage {
                Some(name) => pipeline::run_stage(&cfg, &dir, Stage::parse(&name)?),
                None => {
                    for stage in STAGES {
                        eprintln!("[{}] running", stage.name());
                        pipeline::run_stage(&cfg, &dir, stage)?;
                    }
                    Ok(())
                }
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
