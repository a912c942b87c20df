use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evoprune_cli::experiments::{cmd_ablate, cmd_export, cmd_flops, cmd_report, cmd_search, AblationMode};
use evoprune_cli::{exit_code, RunConfig};
use evoprune_core::prunespace::{Genome, SelectionStrategy, SpaceMode, DEFAULT_MIN_RATIO};
use evoprune_core::{Error, Result};

#[derive(Parser)]
#[command(name = "evoprune", version, about = "Evolutionary structured pruning with least-squares reconstruction")]
struct Cli {
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an evolutionary search and write the front, log and plot.
    Search(RunArgs),
    /// Print the FLOPs (multiply-accumulates) of a model or a pruned genome.
    Flops {
        /// Built-in model name or spec path.
        model: String,
        /// Comma- or semicolon-separated gene values.
        #[arg(long)]
        genome: Option<Genome>,
        #[arg(long)]
        space_mode: Option<SpaceMode>,
        #[arg(long, default_value_t = DEFAULT_MIN_RATIO)]
        min_ratio: f64,
    },
    /// Run a paired two-arm comparison.
    Ablate {
        #[arg(long)]
        mode: AblationMode,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Rebuild one front member and write its spec and weights.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// Row of the front CSV, 0-based.
        #[arg(long)]
        member: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-unit retention table and plot for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    space_mode: Option<SpaceMode>,
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    #[arg(long)]
    min_ratio: Option<f64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    mutations: Option<usize>,
    #[arg(long)]
    crossovers: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    initial: Option<usize>,
    #[arg(long)]
    divisions: Option<usize>,
    #[arg(long)]
    mutation_prob: Option<f64>,
    #[arg(long)]
    max_front: Option<usize>,
    #[arg(long)]
    recon_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    /// Score sliced weights without least-squares reconstruction.
    #[arg(long)]
    no_reconstruct: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Record per-evaluation wall time in the run log.
    #[arg(long)]
    timings: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        c.seed = Some(self.seed);
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    c.$f = v.into();
                }
            )*};
        }
        set!(model, population, generations, initial, divisions, recon_samples, eval_samples, patches, tokens, output, strategy, min_ratio);
        set!(weights, space_mode, mutations, crossovers, mutation_prob, max_front);
        if self.no_reconstruct {
            c.reconstruct = false;
        }
        if self.timings {
            c.timings = true;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Search(args) => {
            let s = cmd_search(&args.resolve()?)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Flops {
            model,
            genome,
            space_mode,
            min_ratio,
        } => {
            let f = cmd_flops(&model, genome.as_ref(), space_mode, min_ratio)?;
            println!("{f} ({:.3}M)", f as f64 / 1e6);
        }
        Command::Ablate { mode, run } => {
            let r = cmd_ablate(&run.resolve()?, mode)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Export { run, member, out } => {
            let r = cmd_export(&run, member, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if !r.reproduced() {
                eprintln!(
                    "error: reloaded accuracy {} differs from logged {}",
                    r.reproduced_accuracy, r.logged_accuracy
                );
                return Ok(4);
            }
        }
        Command::Report { run } => {
            let rows = cmd_report(&run)?;
            println!("unit\tmember\tflops_ratio\tkept/full");
            for r in rows {
                println!("{}\t{}\t{:.3}\t{}/{}", r.unit, r.member, r.flops_ratio, r.kept, r.full);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let code = run(cli).unwrap_or_else(|e: Error| {
        eprintln!("error: {e}");
        exit_code(&e)
    });
    ExitCode::from(code as u8)
}
