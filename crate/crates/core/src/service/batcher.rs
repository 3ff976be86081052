//! Groups pending queries that address the same bin so they can be
//! evaluated as one engine batch.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{mpsc, oneshot};
use tokio::time::{sleep_until, Instant};

use crate::dpf::DpfKey;
use crate::engine::{select_strategy, EvalEngine, EvalPlan, SchedulerConfig, Strategy};
use crate::table::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPolicy {
    /// Largest group handed to the engine at once.
    pub max_batch: usize,
    /// How long the first query of a group may wait for company. Zero
    /// dispatches whatever is queued right away.
    pub max_delay: Duration,
}

impl BatchPolicy {
    pub fn sequential() -> Self {
        BatchPolicy {
            max_batch: 1,
            max_delay: Duration::ZERO,
        }
    }
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            max_batch: 64,
            max_delay: Duration::from_millis(2),
        }
    }
}

/// How a dispatched group is evaluated.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    /// Fixed strategy, or `None` to let the scheduler pick per group.
    pub strategy: Option<Strategy>,
    pub scheduler: SchedulerConfig,
}

pub(crate) type Reply = Result<Vec<u8>, String>;

pub(crate) struct Job {
    pub table: Arc<EmbeddingTable>,
    pub bin: u32,
    pub key: DpfKey,
    pub reply: oneshot::Sender<Reply>,
}

type GroupKey = (u32, u32, u32);

#[derive(Clone)]
pub struct Batcher {
    tx: mpsc::UnboundedSender<Job>,
}

impl Batcher {
    /// Start the batching task on the current runtime.
    pub fn spawn(policy: BatchPolicy, engine: Arc<EvalEngine>, settings: EvalSettings) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        let policy = BatchPolicy {
            max_batch: policy.max_batch.max(1),
            ..policy
        };
        tokio::spawn(run(rx, policy, Arc::new(Executor { engine, settings })));
        Batcher { tx }
    }

    pub(crate) async fn submit(&self, table: Arc<EmbeddingTable>, bin: u32, key: DpfKey) -> Reply {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Job {
                table,
                bin,
                key,
                reply,
            })
            .map_err(|_| "batcher stopped".to_string())?;
        rx.await.map_err(|_| "evaluation cancelled".to_string())?
    }
}

struct Group {
    deadline: Instant,
    jobs: Vec<Job>,
}

async fn run(mut rx: mpsc::UnboundedReceiver<Job>, policy: BatchPolicy, exec: Arc<Executor>) {
    let mut pending: HashMap<GroupKey, Group> = HashMap::new();
    loop {
        let next = pending.values().map(|g| g.deadline).min();
        let job = match next {
            Some(deadline) => tokio::select! {
                job = rx.recv() => job,
                _ = sleep_until(deadline) => {
                    let now = Instant::now();
                    let due: Vec<GroupKey> = pending
                        .iter()
                        .filter(|(_, g)| g.deadline <= now)
                        .map(|(k, _)| *k)
                        .collect();
                    for k in due {
                        exec.dispatch(pending.remove(&k).unwrap().jobs);
                    }
                    continue;
                }
            },
            None => rx.recv().await,
        };
        let Some(job) = job else { break };
        add(&mut pending, job, &policy, &exec);
        if policy.max_delay.is_zero() {
            while let Ok(job) = rx.try_recv() {
                add(&mut pending, job, &policy, &exec);
            }
            for (_, g) in pending.drain() {
                exec.dispatch(g.jobs);
            }
        }
    }
    for (_, g) in pending.drain() {
        exec.dispatch(g.jobs);
    }
}

fn add(
    pending: &mut HashMap<GroupKey, Group>,
    job: Job,
    policy: &BatchPolicy,
    exec: &Arc<Executor>,
) {
    let key = (job.table.table_id(), job.bin, job.key.depth());
    let group = pending.entry(key).or_insert_with(|| Group {
        deadline: Instant::now() + policy.max_delay,
        jobs: Vec::new(),
    });
    group.jobs.push(job);
    if group.jobs.len() >= policy.max_batch {
        exec.dispatch(pending.remove(&key).unwrap().jobs);
    }
}

struct Executor {
    engine: Arc<EvalEngine>,
    settings: EvalSettings,
}

impl Executor {
    fn plan(&self, leaves: usize, batch: usize) -> EvalPlan {
        let sched = &self.settings.scheduler;
        match self.settings.strategy {
            None => select_strategy(leaves as u64, batch, sched),
            Some(s) => {
                let batch = if s == Strategy::SingleQueryCooperative {
                    1
                } else {
                    batch
                };
                EvalPlan::new(s)
                    .with_batch(batch)
                    .with_chunk(sched.chunk_k.min(leaves).max(1))
                    .with_workers(sched.workers.max(1))
            }
        }
    }

    fn dispatch(self: &Arc<Self>, jobs: Vec<Job>) {
        if jobs.is_empty() {
            return;
        }
        let exec = self.clone();
        tokio::task::spawn_blocking(move || exec.evaluate(jobs));
    }

    fn evaluate(&self, jobs: Vec<Job>) {
        let table = jobs[0].table.clone();
        let leaves = jobs[0].key.num_entries() as usize;
        let start = jobs[0].bin as usize * leaves;
        let view = table.view().slice(start..start + leaves);
        let (keys, replies): (Vec<DpfKey>, Vec<oneshot::Sender<Reply>>) =
            jobs.into_iter().map(|j| (j.key, j.reply)).unzip();
        let plan = self.plan(leaves, keys.len());
        match self.engine.eval_batch(&keys, &view, &plan) {
            Ok((shares, _)) => {
                for (reply, share) in replies.into_iter().zip(shares) {
                    let _ = reply.send(Ok(share.0));
                }
            }
            Err(e) => {
                for reply in replies {
                    let _ = reply.send(Err(e.to_string()));
                }
            }
        }
    }
}
