use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cellrate::cli::{self, exit_code, EXIT_CONFIG, EXIT_OTHER};
use cellrate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "cellrate",
    version,
    about = "Fairness-scheduled ergodic rates of cooperative multi-cell MIMO downlinks"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a JSON config and write its artifacts.
    ///
    /// Exit codes: 0 ok, 1 other failure, 2 config error, 3 solver did not
    /// converge (artifacts still written), 4 I/O failure.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output`, then `cellrate-out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 lets the pool decide.
        #[arg(long, env = "CELLRATE_THREADS")]
        threads: Option<usize>,
    },
    /// Merge run directories into gnuplot data files.
    Plot {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => run(config, out, seed, threads),
        Command::Plot { dirs, out } => match cli::emit_plot_data(&dirs, &out) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        },
    };
    ExitCode::from(code as u8)
}

fn run(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>) -> i32 {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return EXIT_OTHER;
        }
    }
    let mut cfg = match RunConfig::load(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    let dir = out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("cellrate-out"));
    match cli::run(&cfg, &dir) {
        Ok(o) => {
            println!("{}", o.out_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
