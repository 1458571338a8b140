use carleman_lab::cli::{run, write_error_json, Command, Overrides};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Desk-scale laboratory for the wave-equation inverse source problem.
#[derive(Parser)]
#[command(name = "carleman-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,

    /// Path to the JSON configuration.
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the config's experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run inadmissible configurations as explicit negative controls.
    #[arg(long, global = true)]
    override_admissibility: bool,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Report distances, observation threshold, beta and observed faces.
    Geometry,
    /// Solve the forward problem and emit the field and its boundary trace.
    Forward,
    /// Check the conjugated-operator energy identity under grid refinement.
    VerifyIdentity,
    /// Sweep the weighted estimate over s and check boundedness.
    VerifyCarleman,
    /// Reconstruct the source from synthetic boundary data.
    Invert,
    /// Stability scan: random sources, noise ladder, error slopes.
    Stability,
    /// Compare operator spectra across observation times.
    CompareAdmissibility,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let command = match cli.command {
        CliCommand::Geometry => Command::Geometry,
        CliCommand::Forward => Command::Forward,
        CliCommand::VerifyIdentity => Command::VerifyIdentity,
        CliCommand::VerifyCarleman => Command::VerifyCarleman,
        CliCommand::Invert => Command::Invert,
        CliCommand::Stability => Command::Stability,
        CliCommand::CompareAdmissibility => Command::CompareAdmissibility,
    };
    let overrides = Overrides {
        seed: cli.seed,
        override_admissibility: cli.override_admissibility,
    };
    match run(command, &cli.config, &cli.out, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            write_error_json(&err, &cli.out);
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
