use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use dpir_core::engine::{SchedulerConfig, DEFAULT_CHUNK_K};
use dpir_core::service::{load_table_dir, BatchPolicy, PirServer, ServerConfig};
use dpir_core::{PrfId, Strategy};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7700")]
    pub listen: String,
    /// Directory holding `*.dpt` table files.
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
    /// Fixed evaluation strategy; chosen per batch when omitted.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    /// Milliseconds a query may wait for a batch to fill.
    #[arg(long, default_value_t = 2)]
    pub max_delay: u64,
    /// Refuse keys built for any other PRF.
    #[arg(long)]
    pub prf: Option<PrfId>,
    #[arg(long, default_value_t = DEFAULT_CHUNK_K)]
    pub chunk_k: usize,
    #[arg(long, default_value_t = 1 << 30)]
    pub mem_budget_bytes: u64,
    /// Informational; both parties run the same code.
    #[arg(long, value_enum)]
    pub role: Option<Role>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn run(args: ServeArgs) -> Result<()> {
    let tables = load_table_dir(&args.tables)
        .with_context(|| format!("loading {}", args.tables.display()))?;
    if tables.is_empty() {
        bail!("no .dpt tables in {}", args.tables.display());
    }
    let config = ServerConfig {
        workers: args.workers.max(1),
        strategy: args.strategy,
        scheduler: SchedulerConfig {
            mem_budget_bytes: args.mem_budget_bytes,
            chunk_k: args.chunk_k,
            workers: args.workers.max(1),
        },
        batch: BatchPolicy {
            max_batch: args.max_batch.max(1),
            max_delay: Duration::from_millis(args.max_delay),
        },
        prf: args.prf,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let n = tables.len();
        let server = PirServer::new(tables, config)?;
        let listener = tokio::net::TcpListener::bind(&args.listen).await?;
        let addr = listener.local_addr()?;
        let role = args
            .role
            .map_or(String::new(), |r| format!(" as party {r:?}"));
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        eprintln!("serving {n} table(s){role}");
        server.serve(listener).await?;
        Ok(())
    })
}
