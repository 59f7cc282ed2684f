//! `gsdistill`: batch front end for the distillation pipeline.
//!
//! Every command reads the shared TOML config (with `--set key=value`
//! overrides), writes its artifacts under the configured output directory
//! and prints exactly one JSON summary line on stdout. Failures exit with
//! 1 (usage), 2 (config), 3 (data/format), 4 (numerical) or 5 (a checked
//! property did not hold).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsdistill::{Error, ErrorCategory};

#[derive(Debug, Parser)]
#[command(
    name = "gsdistill",
    version,
    about = "Multi-teacher feature distillation for Gaussian splatting scenes"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration file.
    #[arg(short, long, global = true, default_value = "configs/acceptance.toml")]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set pretrain.optim.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads; 1 gives bitwise-reproducible results.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory, overriding `output_dir` from the config.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the configured scenes and their teacher feature maps.
    Synth,
    /// Uplift teacher maps onto the training scenes' Gaussians.
    Uplift,
    /// Fit per-teacher standardizers on the training views.
    FitPhis,
    /// Plan camera views and overlapping pairs for a scene.
    PlanViews(commands::SceneArg),
    /// Render a scene before and after the configured augmentations.
    AugmentPreview(commands::SceneArg),
    /// Pretrain the encoder and heads on uplifted targets.
    Pretrain,
    /// Adapt a pretrained model to a scene from rendered teacher views.
    Adapt(commands::AdaptArgs),
    /// Zero-shot semantic segmentation against the language prototypes.
    EvalZeroshot(commands::ModelSceneArgs),
    /// Linear probe on frozen encoder features.
    ProbeLinear(commands::ProbeArgs),
    /// PCA false-color rendering of encoder features.
    Pca(commands::ModelSceneArgs),
    /// Instance retrieval under center perturbation.
    Retrieval(commands::RetrievalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck,
    /// Render color images and weight statistics of a scene's orbit views.
    Render(commands::SceneArg),
    /// Tabulate the uplift and adaptation resource logs.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Usage => 1,
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
    {
        eprintln!("error: cannot start the worker pool: {e}");
        return ExitCode::from(1);
    }
    let result = commands::Context::new(&cli.global).and_then(|ctx| match &cli.command {
        Command::Synth => ctx.synth(),
        Command::Uplift => ctx.uplift(),
        Command::FitPhis => ctx.fit_phis(),
        Command::PlanViews(a) => ctx.plan_views(a),
        Command::AugmentPreview(a) => ctx.augment_preview(a),
        Command::Pretrain => ctx.pretrain(),
        Command::Adapt(a) => ctx.adapt(a),
        Command::EvalZeroshot(a) => ctx.eval_zeroshot(a),
        Command::ProbeLinear(a) => ctx.probe_linear(a),
        Command::Pca(a) => ctx.pca(a),
        Command::Retrieval(a) => ctx.retrieval(a),
        Command::Gradcheck => ctx.gradcheck(),
        Command::Render(a) => ctx.render(a),
        Command::Report => ctx.report(),
    });
    match result {
        Ok(commands::Outcome { summary, passed }) => {
            println!("{summary}");
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(5)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
