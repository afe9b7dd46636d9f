use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curvedit_cli::{context, CliError, ConfigSource, RunConfig, Stage, Task};

#[derive(Parser)]
#[command(name = "curvedit", version, about = "Memorization editing in curvature bases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Lm,
    Classifier,
}

impl From<PresetArg> for Task {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Lm => Task::Lm,
            PresetArg::Classifier => Task::Classifier,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config to start from when no --config is given.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Artifact directory (default: $CURVEDIT_WORKDIR, then ./curvedit-run).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Override a config field, e.g. --set train.steps=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for the sweep.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Restrict edit/eval to these model names.
    #[arg(long)]
    only: Vec<String>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(Common),
    /// Train the baseline model.
    Train(Common),
    /// Collect curvature factors for the MLP projections.
    KfacCollect(Common),
    /// Memorized-vs-clean activation ratios per eigenbasis band.
    AnalyzeBands(Common),
    /// Apply every configured edit.
    Edit(Common),
    /// Evaluate the baseline and edited models.
    Eval(Common),
    /// Sweep the retained curvature mass.
    Sweep(Common),
    /// Assemble the final tables.
    Report(Common),
    /// Run every stage in order.
    Pipeline(Common),
    /// Print the resolved config as JSON.
    ShowConfig(Common),
}

fn source(c: &Common) -> ConfigSource {
    ConfigSource {
        config_file: c.config.clone(),
        preset: c.preset.map(Task::from),
        workdir: c.workdir.clone(),
        overrides: c.overrides.clone(),
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    let (stages, common): (Vec<Stage>, Common) = match cmd {
        Command::GenData(c) => (vec![Stage::GenData], c),
        Command::Train(c) => (vec![Stage::Train], c),
        Command::KfacCollect(c) => (vec![Stage::KfacCollect], c),
        Command::AnalyzeBands(c) => (vec![Stage::AnalyzeBands], c),
        Command::Edit(c) => (vec![Stage::Edit], c),
        Command::Eval(c) => (vec![Stage::Eval], c),
        Command::Sweep(c) => (vec![Stage::Sweep], c),
        Command::Report(c) => (vec![Stage::Report], c),
        Command::Pipeline(c) => (Stage::ALL.to_vec(), c),
        Command::ShowConfig(c) => {
            let (config, _): (RunConfig, _) = curvedit_cli::resolve(&source(&c))?;
            print!("{}", config.to_json());
            return Ok(());
        }
    };
    let mut ctx = context(&source(&common))?;
    ctx.jobs = common.jobs.max(1);
    ctx.only = common.only;
    ctx.verbose = !common.quiet;
    for s in stages {
        if ctx.verbose {
            eprintln!("== {} ({})", s.name(), ctx.workdir.display());
        }
        let m = curvedit_cli::run_stage(s, &ctx)?;
        if ctx.verbose {
            for out in m.outputs.keys() {
                eprintln!("  wrote {out}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
