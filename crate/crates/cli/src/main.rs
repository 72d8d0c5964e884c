use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gatelab::monitor::Policy;
use gatelab::transitions::Strategy;
use gatelab_cli::{
    cmd_asm, cmd_check, cmd_fuzz, cmd_monitor, cmd_run, cmd_verify, load, parse_size, CheckOptions, Format, Property,
    Report, EXIT_USAGE,
};

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Gates {
    Zero,
    Nacl,
}

impl From<Gates> for Strategy {
    fn from(g: Gates) -> Strategy {
        match g {
            Gates::Zero => Strategy::ZeroCost,
            Gates::Nacl => Strategy::NaClHeavy,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PolicyArg {
    NaclDefault,
    AllPublic,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::NaclDefault => Policy::NaclDefault,
            PolicyArg::AllPublic => Policy::AllPublic,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Text,
    Records,
}

#[derive(Parser, Debug)]
#[command(name = "gatelab", version, about = "Run, monitor and verify gated assembly programs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Gate implementation.
    #[arg(long, value_enum, default_value = "zero", global = true)]
    gates: Gates,

    /// Confidentiality policy applied at trusted gatecalls.
    #[arg(long, value_enum, default_value = "nacl-default", global = true)]
    policy: PolicyArg,

    /// Step budget.
    #[arg(long, default_value_t = 100_000, global = true)]
    fuel: u64,

    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,

    #[arg(long, value_enum, default_value = "text", global = true)]
    format: FormatArg,

    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Assemble and check well-formedness for the selected gates.
    Asm { file: PathBuf },
    /// Execute on the concrete machine.
    Run { file: PathBuf },
    /// Execute under the overlay monitor.
    Monitor { file: PathBuf },
    /// Statically verify the library.
    Verify { file: PathBuf },
    /// Check trace properties: wb, csr, ra, ni (default: csr ra ni).
    Check { file: PathBuf, properties: Vec<Property> },
    /// Generate, verify, monitor and attack N random libraries.
    Fuzz {
        n: u64,
        /// Generator limits, e.g. `funcs=4,arity=2,calls=3,callbacks=50`.
        size: Option<String>,
    },
}

fn execute(cli: &Cli) -> Report {
    let gates = Strategy::from(cli.gates);
    let with_file = |file: &PathBuf, f: &dyn Fn(&gatelab::lang::Program) -> Report| match load(file) {
        Ok(p) => f(&p),
        Err(r) => r,
    };
    match &cli.command {
        Cmd::Asm { file } => with_file(file, &|p| cmd_asm(p, gates)),
        Cmd::Run { file } => with_file(file, &|p| cmd_run(p, gates, cli.fuel)),
        Cmd::Monitor { file } => with_file(file, &|p| cmd_monitor(p, cli.policy.into(), cli.fuel)),
        Cmd::Verify { file } => with_file(file, &|p| cmd_verify(p)),
        Cmd::Check { file, properties } => {
            let props = if properties.is_empty() {
                Property::DEFAULT.to_vec()
            } else {
                properties.clone()
            };
            let opts = CheckOptions {
                gates,
                policy: cli.policy.into(),
                seed: cli.seed,
                fuel: cli.fuel,
            };
            with_file(file, &|p| cmd_check(p, &props, &opts))
        }
        Cmd::Fuzz { n, size } => match parse_size(size.as_deref().unwrap_or("")) {
            Ok(params) => cmd_fuzz(*n, cli.seed, &params),
            Err(e) => Report {
                exit: EXIT_USAGE,
                text: format!("error: {e}\n"),
                records: Vec::new(),
            },
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let report = execute(&cli);
    let format = match cli.format {
        FormatArg::Text => Format::Text,
        FormatArg::Records => Format::Records,
    };
    let body = report.render(format);
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, body) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(EXIT_USAGE as u8);
            }
        }
        None if report.exit == EXIT_USAGE => eprint!("{body}"),
        None => print!("{body}"),
    }
    ExitCode::from(report.exit as u8)
}
