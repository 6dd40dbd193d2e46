use std::io::{self, BufRead, IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dbos_core::Durability;
use dbsh::{parse_config, Outcome, Shell, ShellConfig, ShellError};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DurabilityArg {
    Full,
    Off,
}

/// Operator shell for the dbos kernel.
///
/// Commands come from -c (in order), or else from standard input. A failing
/// command ends a non-interactive session with its exit status: 1 for usage
/// errors, 2 for engine errors.
#[derive(Debug, Parser)]
#[command(name = "dbsh", version)]
struct Args {
    /// Directory holding the log and snapshots; in-memory when omitted.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Worker threads running submitted tasks (0 disables execution).
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, value_enum, default_value = "full")]
    durability: DurabilityArg,
    /// Seed for benchmark workloads.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Principal issuing commands.
    #[arg(long = "as", default_value = "root")]
    principal: String,
    /// Container the principal acts in.
    #[arg(long, default_value_t = 0)]
    container: u64,
    /// Declared purpose for data access.
    #[arg(long, default_value = "admin")]
    purpose: String,
    /// File of `knob = value` lines applied at startup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Command to run; repeatable.
    #[arg(short = 'c', value_name = "COMMAND")]
    commands: Vec<String>,
}

fn source_of(line: &str) -> Option<&str> {
    line.trim().strip_prefix("query").map(str::trim)
}

/// Builds the shell from flags. Errors here are reported by the caller.
fn open(args: &Args) -> Result<Shell, ShellError> {
    let knobs = match &args.config {
        Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| ShellError::Usage(format!("{}: {e}", p.display())))?)?,
        None => Vec::new(),
    };
    let config = ShellConfig {
        data_dir: args.data_dir.clone(),
        workers: args.workers,
        durability: match args.durability {
            DurabilityArg::Full => Durability::Full,
            DurabilityArg::Off => Durability::Off,
        },
        seed: args.seed,
        principal: args.principal.clone(),
        container: args.container,
        purpose: args.purpose.clone(),
        knobs,
    };
    Shell::open(&config)
}

/// Runs the session. Every error is printed before it is returned.
fn run(args: Args) -> Result<(), ShellError> {
    let mut shell = open(&args).inspect_err(|e| eprintln!("{}", e.render(None)))?;
    let interactive = args.commands.is_empty() && io::stdin().is_terminal();
    let lines: Box<dyn Iterator<Item = io::Result<String>>> = if args.commands.is_empty() {
        Box::new(io::stdin().lock().lines())
    } else {
        Box::new(args.commands.into_iter().map(Ok))
    };
    let mut result = Ok(());
    let mut stdout = io::stdout();
    if interactive {
        print!("dbsh> ");
        let _ = stdout.flush();
    }
    for line in lines {
        let line = line.map_err(|e| ShellError::Usage(format!("reading input: {e}")))?;
        match shell.execute(&line) {
            Ok(Outcome::Quit) => break,
            Ok(Outcome::Output(text)) => print!("{text}"),
            Err(e) => {
                eprintln!("{}", e.render(source_of(&line)));
                if !interactive {
                    result = Err(e);
                    break;
                }
            }
        }
        if interactive {
            print!("dbsh> ");
        }
        let _ = stdout.flush();
    }
    shell.close().inspect_err(|e| eprintln!("{}", e.render(None)))?;
    result
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(e.exit_code() as u8),
    }
}
