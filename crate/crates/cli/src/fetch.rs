use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Result};
use clap::Args;
use dpir_core::service::{ClientConfig, PirClient};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::plan_config::PlanConfig;

#[derive(Args, Debug)]
pub struct FetchArgs {
    #[arg(long)]
    pub server_a: String,
    #[arg(long)]
    pub server_b: String,
    #[arg(long)]
    pub plan_config: PathBuf,
    /// Row indices wanted by one inference, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<u32>,
    /// Re-plan dropped indices up to this many times in total.
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    /// Seed for key generation; fresh OS randomness when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: FetchArgs) -> Result<()> {
    let (cfg, dir) = PlanConfig::load(&args.plan_config)?;
    let client = PirClient::new(ClientConfig {
        timeout: Duration::from_millis(cfg.timeout_ms),
        ..ClientConfig::new(&args.server_a, &args.server_b)
    });
    let mut rng = match args.seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let info_a = client.table_info(&args.server_a).await?;
        let info_b = client.table_info(&args.server_b).await?;
        if info_a != info_b {
            bail!("the two servers host different tables");
        }
        let planner = cfg.planner(&dir, &info_a)?;
        let mut rows = BTreeMap::new();
        let mut pending = args.indices.clone();
        for round in 0..args.rounds.max(1) {
            if pending.is_empty() {
                break;
            }
            let plan = planner.plan(&pending, &mut rng)?;
            let start = Instant::now();
            let got = client.fetch(&plan).await?;
            eprintln!(
                "round {}: {} keys, {} served, {} covered, {} dropped, {:.1} ms",
                round + 1,
                plan.num_keys(),
                plan.served.len(),
                plan.covered.len(),
                plan.dropped.len(),
                start.elapsed().as_secs_f64() * 1e3
            );
            rows.extend(got);
            pending = plan.dropped;
        }
        for (i, row) in &rows {
            println!("{i} {}", hex::encode(row));
        }
        if !pending.is_empty() {
            let list: Vec<String> = pending.iter().map(u32::to_string).collect();
            eprintln!("dropped: {}", list.join(","));
        }
        Ok(())
    })
}
