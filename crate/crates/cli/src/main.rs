use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod bench;
mod build;
mod fetch;
mod plan_config;
mod serve;

#[derive(Parser, Debug)]
#[command(
    name = "dpir",
    version,
    about = "Two-server private embedding retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one server party.
    Serve(serve::ServeArgs),
    /// Privately fetch rows from a pair of servers.
    Fetch(fetch::FetchArgs),
    /// Create or inspect table files.
    #[command(subcommand)]
    Table(build::TableCommand),
    /// Create access traces.
    #[command(subcommand)]
    Trace(build::TraceCommand),
    /// Build the hot table, co-located table and client sidecars.
    Codesign(build::CodesignArgs),
    /// Measurement scenarios.
    #[command(subcommand)]
    Bench(bench::BenchCommand),
}

/// Options shared by every bench scenario.
#[derive(Args, Debug, Clone)]
pub struct CommonBenchArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Serve(a) => serve::run(a),
        Command::Fetch(a) => fetch::run(a),
        Command::Table(c) => build::table(c),
        Command::Trace(c) => build::trace(c),
        Command::Codesign(a) => build::codesign(a),
        Command::Bench(c) => bench::run(c),
    }
}
