use clap::{Parser, Subcommand};

use spectragap::cli::{export_grid_function, run, Command as RunCommand, ExportFormat, RunError};
use spectragap::config::RunConfig;
use spectragap::mesh::GridFunction;

#[derive(Parser)]
#[command(
    name = "spectragap",
    version,
    about = "Finite-difference toolkit for Schrodinger quadratic forms: criticality classification, capacity, positive supersolutions, Hardy-type improvements"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the TOML config file
    #[arg(long)]
    config: String,
    /// key.path=value overrides, applied after the file parse (last wins)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write the JSON report here (default: stdout)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify the operator across a refinement schedule
    Classify(CommonArgs),
    /// Principal eigenvalue of the assembled form
    Eigen(CommonArgs),
    /// Harmonic capacity of the configured compact set
    Capacity(CommonArgs),
    /// Positive supersolution construction plus the AAP bound check
    Aap(CommonArgs),
    /// Picone improvement weight from two grid functions
    Improve(CommonArgs),
    /// Balance or oscillation probe
    Probe(CommonArgs),
    /// Re-encode a grid-text function as json, grid-text or csv-profile
    Export {
        /// Input grid-text file
        #[arg(long)]
        input: String,
        /// json | grid-text | csv-profile
        #[arg(long)]
        format: ExportFormatArg,
        #[arg(long)]
        out: String,
        /// Axis of the csv profile line (through the domain center)
        #[arg(long, default_value_t = 0)]
        axis: usize,
    },
}

#[derive(Clone)]
struct ExportFormatArg(ExportFormat);

impl std::str::FromStr for ExportFormatArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<ExportFormat>().map(ExportFormatArg)
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("SPECTRAGAP_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run_common(cmd: RunCommand, args: &CommonArgs) -> Result<(), RunError> {
    let cfg = RunConfig::from_file(&args.config, &args.set)?;
    let outcome = run(cmd, &cfg)?;
    match &args.out {
        Some(path) => std::fs::write(path, outcome.report_json + "\n")?,
        None => println!("{}", outcome.report_json),
    }
    eprintln!("{}", outcome.summary);
    Ok(())
}

fn main() {
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage and unknown-command problems are config errors: exit 1
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            // --help / --version print to stdout and exit 0
            print!("{e}");
            std::process::exit(0);
        }
    };
    let result = match &cli.command {
        Cmd::Classify(a) => run_common(RunCommand::Classify, a),
        Cmd::Eigen(a) => run_common(RunCommand::Eigen, a),
        Cmd::Capacity(a) => run_common(RunCommand::Capacity, a),
        Cmd::Aap(a) => run_common(RunCommand::Aap, a),
        Cmd::Improve(a) => run_common(RunCommand::Improve, a),
        Cmd::Probe(a) => run_common(RunCommand::Probe, a),
        Cmd::Export { input, format, out, axis } => (|| {
            let f = std::fs::File::open(input).map_err(RunError::Io)?;
            let gf = GridFunction::read_text(f).map_err(|e| RunError::Numerical(e.to_string()))?;
            export_grid_function(&gf, out, format.0, *axis)
        })(),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
