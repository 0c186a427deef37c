use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pdespline_cli::error::{EXIT_CONFIG, EXIT_NUMERICAL};
use pdespline_cli::{parse_config, run, RunOptions};

/// Joint PDE parameter and state estimation with PDE-penalized splines.
#[derive(Debug, Parser)]
#[command(name = "pdespline", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `io.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for replicates, bootstrap and chains.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    if args.threads == 0 {
        eprintln!("pdespline: --threads must be at least 1");
        return ExitCode::from(EXIT_CONFIG as u8);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
        eprintln!("pdespline: cannot start {} threads: {e}", args.threads);
        return ExitCode::from(EXIT_NUMERICAL as u8);
    }
    let result = parse_config(&args.config).and_then(|cfg| {
        run(
            &cfg,
            &RunOptions {
                output_dir: args.output_dir.clone(),
                verbose: args.verbose,
            },
        )
    });
    match result {
        Ok(report) => {
            if args.verbose {
                for f in &report.files {
                    eprintln!("pdespline: wrote {}", f.display());
                }
            }
            if report.warnings.is_empty() {
                ExitCode::SUCCESS
            } else {
                for w in &report.warnings {
                    eprintln!("pdespline: {w}");
                }
                ExitCode::from(EXIT_NUMERICAL as u8)
            }
        }
        Err(e) => {
            eprintln!("pdespline: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
