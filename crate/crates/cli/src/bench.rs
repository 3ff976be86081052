use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use dpir_core::codesign::{build_colocated, build_hot_split};
use dpir_core::engine::{SchedulerConfig, DEFAULT_CHUNK_K};
use dpir_core::harness::{
    machine_fingerprint, run_codesign_sweep, run_kernel_sweep, run_prf_sweep, write_codesign_csv,
    write_kernel_csv, write_prf_csv, KernelSweepSpec, PrfSweepSpec,
};
use dpir_core::planner::sweep::SweepConfig;
use dpir_core::service::{BatchPolicy, ClientConfig, PirClient, PirServer, ServerConfig};
use dpir_core::{EmbeddingTable, Planner, PrfId, Strategy, SyntheticTrace, Trace};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::CommonBenchArgs;

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// PRF calls, peak memory and throughput per evaluation strategy.
    Kernel(KernelArgs),
    /// Throughput of each PRF at one size and batch.
    Prf(PrfArgs),
    /// Best drop rate with and without co-design under cost budgets.
    Codesign(CodesignBenchArgs),
    /// Per-inference latency against two in-process servers on loopback.
    E2e(E2eArgs),
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    #[arg(long, value_delimiter = ',', default_value = "20")]
    pub log2_sizes: Vec<u32>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "branch-parallel,level-by-level,mem-bounded,cooperative"
    )]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "1,8,64,512")]
    pub batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value_t = DEFAULT_CHUNK_K)]
    pub chunk_k: usize,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
    /// Skip points whose memory bound exceeds this.
    #[arg(long)]
    pub mem_budget_bytes: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub entry_bytes: usize,
    #[arg(long, default_value_t = PrfId::Aes128Ctr)]
    pub prf: PrfId,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[command(flatten)]
    pub common: CommonBenchArgs,
}

#[derive(Args, Debug)]
pub struct PrfArgs {
    #[arg(long, default_value_t = 20)]
    pub log2_l: u32,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_K)]
    pub chunk_k: usize,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
    #[arg(long, default_value_t = 64)]
    pub entry_bytes: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[command(flatten)]
    pub common: CommonBenchArgs,
}

/// Where the access trace comes from: a file, or a synthetic power law.
#[derive(Args, Debug)]
pub struct TraceSource {
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1 << 14)]
    pub entries: usize,
    #[arg(long, default_value_t = 5000)]
    pub inferences: usize,
    #[arg(long, default_value_t = 16)]
    pub lookups: usize,
    #[arg(long, default_value_t = 1.0)]
    pub exponent: f64,
    #[arg(long, default_value_t = 4)]
    pub block: usize,
    #[arg(long, default_value_t = 0.5)]
    pub block_prob: f64,
}

impl TraceSource {
    fn load(&self, seed: u64) -> Result<Trace> {
        if let Some(p) = &self.trace {
            return Trace::load(p).with_context(|| format!("loading {}", p.display()));
        }
        Ok(SyntheticTrace {
            num_entries: self.entries,
            inferences: self.inferences,
            lookups: self.lookups,
            exponent: self.exponent,
            block: self.block,
            block_prob: self.block_prob,
        }
        .generate(&mut ChaCha20Rng::seed_from_u64(seed))?)
    }
}

#[derive(Args, Debug)]
pub struct CodesignBenchArgs {
    #[command(flatten)]
    pub source: TraceSource,
    /// Sweep grid and constraints in TOML.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub entry_bytes: usize,
    /// Budgets as `prf_calls:comm_bytes`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_budget)]
    pub budget: Vec<(u64, u64)>,
    #[command(flatten)]
    pub common: CommonBenchArgs,
}

#[derive(Args, Debug)]
pub struct E2eArgs {
    #[command(flatten)]
    pub source: TraceSource,
    #[arg(long, default_value_t = 256)]
    pub entry_bytes: usize,
    #[arg(long, default_value_t = 1024)]
    pub bin_size: usize,
    #[arg(long, default_value_t = 16)]
    pub q_full: usize,
    #[arg(long, default_value_t = 0)]
    pub hot_size: usize,
    #[arg(long, default_value_t = 256)]
    pub hot_bin_size: usize,
    #[arg(long, default_value_t = 0)]
    pub q_hot: usize,
    #[arg(long, default_value_t = 0)]
    pub colocate_c: usize,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    #[arg(long, default_value_t = 2)]
    pub max_delay: u64,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
    /// Inferences to time, taken from the start of the trace.
    #[arg(long, default_value_t = 200)]
    pub requests: usize,
    #[arg(long, default_value_t = PrfId::Aes128Ctr)]
    pub prf: PrfId,
    #[command(flatten)]
    pub common: CommonBenchArgs,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_budget(s: &str) -> Result<(u64, u64), String> {
    let (p, c) = s.split_once(':').ok_or("expected prf_calls:comm_bytes")?;
    let p = p.trim().parse().map_err(|e| format!("prf calls: {e}"))?;
    let c = c.trim().parse().map_err(|e| format!("comm bytes: {e}"))?;
    Ok((p, c))
}

fn output(common: &CommonBenchArgs) -> Result<Box<dyn Write>> {
    Ok(match &common.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn run(cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Kernel(a) => kernel(a),
        BenchCommand::Prf(a) => prf(a),
        BenchCommand::Codesign(a) => codesign(a),
        BenchCommand::E2e(a) => e2e(a),
    }
}

fn kernel(a: KernelArgs) -> Result<()> {
    let spec = KernelSweepSpec {
        log2_sizes: a.log2_sizes,
        strategies: a.strategies,
        batches: a.batches,
        chunks: vec![a.chunk_k],
        workers: a.workers.max(1),
        mem_budget_bytes: a.mem_budget_bytes,
        entry_bytes: a.entry_bytes,
        prf: a.prf,
        repetitions: a.reps.max(1),
        seed: a.common.seed,
    };
    let rows = run_kernel_sweep(&spec)?;
    let mismatched = rows
        .iter()
        .filter(|r| r.prf_calls != r.expected_prf_calls)
        .count();
    write_kernel_csv(&rows, output(&a.common)?)?;
    if mismatched > 0 {
        bail!("{mismatched} point(s) used an unexpected number of PRF calls");
    }
    Ok(())
}

fn prf(a: PrfArgs) -> Result<()> {
    let spec = PrfSweepSpec {
        log2_l: a.log2_l,
        batch: a.batch,
        chunk_k: a.chunk_k,
        workers: a.workers.max(1),
        entry_bytes: a.entry_bytes,
        repetitions: a.reps.max(1),
        seed: a.common.seed,
    };
    let rows = run_prf_sweep(&spec)?;
    write_prf_csv(&rows, output(&a.common)?)?;
    if let Some(r) = rows.iter().find(|r| !r.correct) {
        bail!("{} returned wrong rows", r.prf);
    }
    Ok(())
}

fn codesign(a: CodesignBenchArgs) -> Result<()> {
    let cfg =
        SweepConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let trace = a.source.load(a.common.seed)?;
    let logical = match &a.source.trace {
        Some(_) => trace
            .max_index()
            .map_or(0, |m| m as usize + 1)
            .max(a.source.entries),
        None => a.source.entries,
    };
    let report = run_codesign_sweep(
        &trace,
        logical,
        a.entry_bytes,
        &cfg.grid,
        &cfg.constraints,
        &a.budget,
        cfg.prf,
    )?;
    write_codesign_csv(&report, output(&a.common)?)?;
    let show = |d: Option<f64>| d.map_or("-".to_string(), |d| format!("{d:.4}"));
    eprintln!(
        "{:>14} {:>14} {:>10} {:>10} {:>8}",
        "prf_calls", "comm_bytes", "codesign", "baseline", "gap"
    );
    for b in &report.budgets {
        eprintln!(
            "{:>14} {:>14} {:>10} {:>10} {:>8}",
            b.max_prf_calls,
            b.max_comm_bytes,
            show(b.with_codesign),
            show(b.without_codesign),
            show(b.gap())
        );
    }
    Ok(())
}

fn e2e(a: E2eArgs) -> Result<()> {
    let trace = a.source.load(a.common.seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.common.seed);
    let table = EmbeddingTable::random(1, a.source.entries, a.entry_bytes, &mut rng)?;
    let co = build_colocated(&table, &trace, a.colocate_c)?;
    let split = build_hot_split(&co.table, &trace, a.hot_size, 2, a.q_hot, a.q_full)?;
    let planner = Planner::for_tables(&split, &co, a.hot_bin_size, a.bin_size, a.prf)?;
    let mut tables = std::collections::BTreeMap::new();
    tables.insert(1, split.full_table.clone());
    if let Some(hot) = &split.hot_table {
        tables.insert(hot.table_id(), hot.clone());
    }
    let config = ServerConfig {
        workers: a.workers.max(1),
        strategy: None,
        scheduler: SchedulerConfig {
            workers: a.workers.max(1),
            ..SchedulerConfig::default()
        },
        batch: BatchPolicy {
            max_batch: a.max_batch.max(1),
            max_delay: Duration::from_millis(a.max_delay),
        },
        prf: Some(a.prf),
    };
    let machine = machine_fingerprint();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let sa = PirServer::new(tables.clone(), config.clone())?
            .spawn("127.0.0.1:0")
            .await?;
        let sb = PirServer::new(tables, config)?.spawn("127.0.0.1:0").await?;
        let client = PirClient::new(ClientConfig {
            timeout: Duration::from_secs(30),
            ..ClientConfig::new(sa.to_string(), sb.to_string())
        });
        let mut out = csv::Writer::from_writer(output(&a.common)?);
        out.write_record([
            "inference",
            "keys",
            "wanted",
            "served",
            "dropped",
            "latency_ms",
            "machine",
        ])?;
        let mut total = Duration::ZERO;
        let mut dropped = 0usize;
        let mut wanted = 0usize;
        for (i, want) in trace.inferences().iter().take(a.requests).enumerate() {
            let plan = planner.plan(want, &mut rng)?;
            let start = Instant::now();
            let rows = client.fetch(&plan).await?;
            let elapsed = start.elapsed();
            for (&idx, row) in &rows {
                if row.as_slice() != table.row(idx as usize) {
                    bail!("row {idx} came back wrong");
                }
            }
            total += elapsed;
            dropped += plan.dropped.len();
            wanted += plan.served.len() + plan.covered.len() + plan.dropped.len();
            out.write_record([
                i.to_string(),
                plan.num_keys().to_string(),
                want.len().to_string(),
                rows.len().to_string(),
                plan.dropped.len().to_string(),
                format!("{:.3}", elapsed.as_secs_f64() * 1e3),
                machine.clone(),
            ])?;
        }
        out.flush()?;
        let n = a.requests.min(trace.len()).max(1);
        eprintln!(
            "{n} inferences, mean {:.2} ms, drop rate {:.4}",
            total.as_secs_f64() * 1e3 / n as f64,
            dropped as f64 / wanted.max(1) as f64
        );
        Ok(())
    })
}
