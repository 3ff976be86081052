use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use dpir_core::codesign::{build_colocated, build_hot_split, write_sidecar};
use dpir_core::service::TABLE_EXTENSION;
use dpir_core::{load_table, store_table, EmbeddingTable, PrfId, SyntheticTrace, Trace};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::plan_config::PlanConfig;

#[derive(Subcommand, Debug)]
pub enum TableCommand {
    /// Write a table of random rows.
    Random {
        #[arg(long, default_value_t = 1)]
        id: u32,
        #[arg(long)]
        entries: usize,
        /// Row width in bytes, a multiple of 16.
        #[arg(long, default_value_t = 64)]
        entry_bytes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a table file's header fields.
    Info { path: PathBuf },
    /// Print rows as hex, one per line.
    Rows {
        path: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum TraceCommand {
    /// Power-law trace with optional planted co-occurrence groups.
    Synth {
        #[arg(long)]
        entries: usize,
        #[arg(long, default_value_t = 10_000)]
        inferences: usize,
        #[arg(long, default_value_t = 8)]
        lookups: usize,
        #[arg(long, default_value_t = 1.0)]
        exponent: f64,
        #[arg(long, default_value_t = 1)]
        block: usize,
        #[arg(long, default_value_t = 0.0)]
        block_prob: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct CodesignArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    /// Companions stored next to each row.
    #[arg(long, default_value_t = 0)]
    pub colocate_c: usize,
    /// Rows in the hot table; 0 disables it.
    #[arg(long, default_value_t = 0, conflicts_with = "hot_fraction")]
    pub hot_size: usize,
    /// Hot table size as a fraction of the table.
    #[arg(long)]
    pub hot_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub q_hot: usize,
    #[arg(long)]
    pub q_full: usize,
    #[arg(long)]
    pub full_bin_size: usize,
    #[arg(long, default_value_t = 256)]
    pub hot_bin_size: usize,
    /// Id of the hot table; the full table's id plus one by default.
    #[arg(long)]
    pub hot_id: Option<u32>,
    #[arg(long, default_value_t = PrfId::Aes128Ctr)]
    pub prf: PrfId,
    /// Receives the server tables, the client sidecars and `plan.toml`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn table(cmd: TableCommand) -> Result<()> {
    match cmd {
        TableCommand::Random {
            id,
            entries,
            entry_bytes,
            seed,
            out,
        } => {
            let t = EmbeddingTable::random(
                id,
                entries,
                entry_bytes,
                &mut ChaCha20Rng::seed_from_u64(seed),
            )?;
            store_table(&t, &out)?;
            eprintln!(
                "wrote table {id}: {} rows ({} padded) of {entry_bytes} B",
                t.logical_entries(),
                t.num_entries()
            );
        }
        TableCommand::Info { path } => {
            let t = load_table(&path)?;
            println!("table_id {}", t.table_id());
            println!("entries {}", t.logical_entries());
            println!("padded_entries {}", t.num_entries());
            println!("entry_bytes {}", t.entry_bytes());
        }
        TableCommand::Rows { path, indices } => {
            let t = load_table(&path)?;
            for i in indices {
                if i >= t.logical_entries() {
                    bail!("row {i} out of range");
                }
                println!("{i} {}", hex::encode(t.row(i)));
            }
        }
    }
    Ok(())
}

pub fn trace(cmd: TraceCommand) -> Result<()> {
    match cmd {
        TraceCommand::Synth {
            entries,
            inferences,
            lookups,
            exponent,
            block,
            block_prob,
            seed,
            out,
        } => {
            let t = SyntheticTrace {
                num_entries: entries,
                inferences,
                lookups,
                exponent,
                block,
                block_prob,
            }
            .generate(&mut ChaCha20Rng::seed_from_u64(seed))?;
            t.store(&out)?;
        }
    }
    Ok(())
}

pub fn codesign(args: CodesignArgs) -> Result<()> {
    let table =
        load_table(&args.table).with_context(|| format!("loading {}", args.table.display()))?;
    let trace =
        Trace::load(&args.trace).with_context(|| format!("loading {}", args.trace.display()))?;
    let hot_size = match args.hot_fraction {
        Some(f) => (table.logical_entries() as f64 * f.clamp(0.0, 1.0)).round() as usize,
        None => args.hot_size,
    };
    let hot_id = args.hot_id.unwrap_or(table.table_id() + 1);
    let co = build_colocated(&table, &trace, args.colocate_c)?;
    let split = build_hot_split(&co.table, &trace, hot_size, hot_id, args.q_hot, args.q_full)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let path = |name: &str| args.out_dir.join(name);
    store_table(&co.table, path(&format!("full.{TABLE_EXTENSION}")))?;
    write_sidecar(path("companions.map"), &co.companions.to_bytes())?;
    if let Some(hot) = &split.hot_table {
        store_table(hot, path(&format!("hot.{TABLE_EXTENSION}")))?;
        write_sidecar(path("hot.map"), &split.hot_index_map.to_bytes())?;
    }
    let cfg = PlanConfig {
        prf: args.prf,
        full_table: table.table_id(),
        full_bin_size: args.full_bin_size,
        q_full: args.q_full,
        hot_table: split.hot_table.as_ref().map(|t| t.table_id()),
        hot_bin_size: args.hot_bin_size,
        q_hot: if split.hot_table.is_some() {
            args.q_hot
        } else {
            0
        },
        hot_map: split.hot_table.as_ref().map(|_| PathBuf::from("hot.map")),
        companions: Some(PathBuf::from("companions.map")),
        base_entry_bytes: Some(table.entry_bytes()),
        timeout_ms: 300,
    };
    std::fs::write(path("plan.toml"), toml::to_string(&cfg)?)?;
    eprintln!(
        "wrote {}: rows of {} B, hot table of {hot_size} rows",
        args.out_dir.display(),
        co.row_width()
    );
    Ok(())
}
