use clap::{Parser, Subcommand};
use hindex::par::Execution;
use hindex_cli::config::{parse_config, Suite};
use hindex_cli::report::{emit_report, Format};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hindex", version, about = "Run experiment suites on the Heisenberg lattice")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the suite described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the suite named in the config.
        #[arg(long)]
        suite: Option<Suite>,
        /// Output directory; defaults to `output.dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the randomized property checks.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 1 runs everything sequentially.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let Cmd::Run { config, suite, out, seed, threads } = Cli::parse().cmd;
    let text = match std::fs::read_to_string(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(s) = suite {
        cfg.suite = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let exec = match threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        Some(1) => Execution::Sequential,
        Some(_t) => {
            #[cfg(feature = "parallel")]
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(_t).build_global() {
                eprintln!("warning: thread pool already initialized: {e}");
            }
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    let mut report = hindex_cli::run_suite(&cfg, exec);
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    if let Err(e) = emit_report(&mut report, &dir, Format::Json) {
        eprintln!("error: cannot write report to {}: {e}", dir.display());
        return ExitCode::from(1);
    }
    for c in &report.checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        let note = if c.note.is_empty() { String::new() } else { format!("  ({})", c.note) };
        println!(
            "[{status}] {} #{} {:.6e} {} {:e}{note}",
            c.name,
            c.criterion,
            c.value,
            c.comparison.symbol(),
            c.threshold
        );
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
