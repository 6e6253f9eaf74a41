use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use deep_core::config::{validate, validate_stage, Diagnostic, PipelineConfig};
use deep_core::noise::Objective;
use deep_core::pipeline::{self, StageSummary, FULL_RUN};
use deep_core::sampler::Mode;
use deep_core::synth::WorldSpec;
use deep_core::Error;

#[derive(Parser)]
#[command(name = "deep", version, about = "Entity-aware denoising corpus pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world (KB, corpora, hypotheses, config) into --out.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML file with world parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Convert a TSV entity dump into the KB snapshot.
    BuildKb(StageArgs),
    /// Link entities in the monolingual corpus.
    Link(StageArgs),
    /// Pack documents into segments.
    Pack(StageArgs),
    /// Produce DAE or DEEP noised pairs.
    Noise(StageArgs),
    /// Induce the entity lexicon from DEEP pairs.
    Emit(StageArgs),
    /// Build per-epoch finetuning plans.
    Sample(StageArgs),
    /// Score hypotheses: BLEU, entity accuracy, frequency bins.
    Eval(StageArgs),
    /// Corpus and coverage statistics.
    Stats(StageArgs),
    /// Run link, pack, noise, emit, sample, eval and stats in order.
    Run(StageArgs),
    /// Check a config and print diagnostics.
    Validate(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory, overriding `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TSV entity dump for `build-kb`.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Multitask,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Dae,
    Deep,
}

enum Failure {
    Config(Vec<Diagnostic>),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(vec![Diagnostic::new("<config>", msg)]),
            other => Failure::Data(other),
        }
    }
}

fn load(args: &StageArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&args.config).map_err(Failure::Config)?;
    let cwd = std::env::current_dir().unwrap_or_default();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(m) = args.mode {
        cfg.sampler.mode = match m {
            ModeArg::Single => Mode::Single,
            ModeArg::Multitask => Mode::Multitask,
        };
    }
    if let Some(o) = args.objective {
        cfg.sampler.objective = match o {
            ObjectiveArg::Dae => Objective::Dae,
            ObjectiveArg::Deep => Objective::Deep,
        };
    }
    if let Some(e) = args.epochs {
        cfg.sampler.epochs = e;
    }
    if let Some(out) = &args.out {
        cfg.paths.output_dir = cwd.join(out);
    }
    if let Some(tsv) = &args.tsv {
        cfg.paths.kb_tsv = Some(cwd.join(tsv));
    }
    Ok(cfg)
}

fn print(summary: &StageSummary) {
    println!("{summary}");
}

fn stage(name: &str, args: &StageArgs) -> Result<(), Failure> {
    let cfg = load(args)?;
    let diags = validate_stage(&cfg, Some(name));
    if !diags.is_empty() {
        return Err(Failure::Config(diags));
    }
    print(&pipeline::run_stage(name, &cfg)?);
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { out, seed, spec } => {
            let mut world = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Failure::Data(Error::io(&path, e)))?;
                    toml::from_str::<WorldSpec>(&text).map_err(|e| {
                        Failure::Config(vec![Diagnostic::new("<spec>", e.message().to_string())])
                    })?
                }
                None => WorldSpec::default(),
            };
            if let Some(seed) = seed {
                world.seed = seed;
            }
            let (_, summary) = pipeline::synth(&world, &out)?;
            print(&summary);
            Ok(())
        }
        Command::BuildKb(a) => stage("build-kb", &a),
        Command::Link(a) => stage("link", &a),
        Command::Pack(a) => stage("pack", &a),
        Command::Noise(a) => stage("noise", &a),
        Command::Emit(a) => stage("emit", &a),
        Command::Sample(a) => stage("sample", &a),
        Command::Eval(a) => stage("eval", &a),
        Command::Stats(a) => stage("stats", &a),
        Command::Run(a) => {
            let mut cfg = load(&a)?;
            let diags = validate(&cfg);
            if !diags.is_empty() {
                return Err(Failure::Config(diags));
            }
            let objective = cfg.sampler.objective;
            for name in FULL_RUN {
                // The lexicon can only be induced from DEEP pairs.
                if name == "emit" && objective != Objective::Deep {
                    cfg.sampler.objective = Objective::Deep;
                    print(&pipeline::run_stage("noise", &cfg)?);
                    print(&pipeline::run_stage("emit", &cfg)?);
                    cfg.sampler.objective = objective;
                    continue;
                }
                print(&pipeline::run_stage(name, &cfg)?);
            }
            Ok(())
        }
        Command::Validate(a) => {
            let cfg = load(&a)?;
            let diags = validate(&cfg);
            if diags.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(Failure::Config(diags))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(diags)) => {
            for d in diags {
                eprintln!("config error: {d}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
