//! `depthar` command line: train, evaluate and run the autoregressive depth
//! model, verify its gradients, and trace bin refinement.
//!
//! Exit codes: 0 success, 1 invalid input (flags, configuration, file
//! contents), 2 runtime or numerical failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "depthar",
    version,
    about = "Autoregressive coarse-to-fine monocular depth estimation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic scenes and evaluate on a held-out split.
    Train(commands::train::Args),
    /// Evaluate a checkpoint on the held-out split.
    Eval(commands::eval::Args),
    /// Predict depth for a grayscale PNG and write a 16-bit depth PNG.
    Infer(commands::infer::Args),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(commands::gradcheck::Args),
    /// Print the per-step bin refinement trace at one probe pixel.
    BinsTrace(commands::bins_trace::Args),
}

fn main() -> ExitCode {
    depthar::tune_allocator_for_large_buffers();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are invalid input (1); --help/--version are
            // success (0).
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => commands::train::run(args),
        Cmd::Eval(args) => commands::eval::run(args),
        Cmd::Infer(args) => commands::infer::run(args),
        Cmd::Gradcheck(args) => commands::gradcheck::run(args),
        Cmd::BinsTrace(args) => commands::bins_trace::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
