use std::path::PathBuf;
use std::process::ExitCode;

use alod_cli::{cmd_compare, cmd_generate, cmd_serve, cmd_simulate, CliError, Config, Overrides, VERSION};
use alod_core::acquisition::Strategy;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "alod", version = VERSION, about = "Active learning for object detection: simulated and live runs")]
struct Cli {
    /// JSON config file; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; repeat for several.
    #[arg(long, global = true)]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Acquisition strategy (product, sum, uniform, entropy_sum); repeat
    /// to choose the strategies compared.
    #[arg(long, global = true)]
    strategy: Vec<Strategy>,
    #[arg(long, global = true)]
    cycles: Option<usize>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    port: Option<u16>,
    /// Let the simulated annotator finish batches while serving.
    #[arg(long, global = true)]
    simulate_annotator: bool,
    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic world and the auxiliary dataset.
    Generate,
    /// Run the full simulated loop for every seed.
    Simulate,
    /// Compare strategies from a shared warm start.
    Compare,
    /// Host the annotation API.
    Serve,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = Config::load(cli.config.as_deref())?;
    config.apply(&Overrides {
        seeds: cli.seed,
        out: cli.out,
        strategies: cli.strategy,
        cycles: cli.cycles,
        budget: cli.budget,
        port: cli.port,
        simulate_annotator: cli.simulate_annotator,
    });
    if cli.print_config {
        let text = serde_json::to_string_pretty(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{text}");
        return Ok(());
    }
    let path = cli.config.as_deref();
    match cli.command {
        None => Err(CliError::Config("no command given; see --help".into())),
        Some(Command::Generate) => cmd_generate(&config, path),
        Some(Command::Simulate) => cmd_simulate(&config, path).map(|_| ()),
        Some(Command::Compare) => cmd_compare(&config, path),
        Some(Command::Serve) => {
            tracing_subscriber::fmt().with_target(false).init();
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            runtime.block_on(async {
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                cmd_serve(&config, path, shutdown).await.map(|_| ())
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("alod: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
