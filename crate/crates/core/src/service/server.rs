//! Server daemon: answers query frames against the hosted tables.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use tokio::io::{AsyncWriteExt, BufReader, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use super::batcher::{BatchPolicy, Batcher, EvalSettings};
use super::wire::{
    encode_table_info, read_frame, write_frame, ErrorCode, ErrorPayload, Frame, MsgType,
    QueryPayload, ResponsePayload, TableInfo,
};
use super::ServiceError;
use crate::dpf::DpfKey;
use crate::engine::{EvalEngine, SchedulerConfig, Strategy};
use crate::prf::PrfId;
use crate::table::{load_table, EmbeddingTable};

/// File extension of table files picked up by [`load_table_dir`].
pub const TABLE_EXTENSION: &str = "dpt";

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub workers: usize,
    pub strategy: Option<Strategy>,
    pub scheduler: SchedulerConfig,
    pub batch: BatchPolicy,
    /// When set, keys for any other PRF are refused.
    pub prf: Option<PrfId>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            workers: 1,
            strategy: None,
            scheduler: SchedulerConfig::default(),
            batch: BatchPolicy::default(),
            prf: None,
        }
    }
}

/// Every `*.dpt` file in `dir`, keyed by table id.
pub fn load_table_dir(
    dir: impl AsRef<Path>,
) -> Result<BTreeMap<u32, EmbeddingTable>, ServiceError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == TABLE_EXTENSION))
        .collect();
    paths.sort();
    let mut tables = BTreeMap::new();
    for path in paths {
        let t = load_table(&path)?;
        let id = t.table_id();
        if tables.insert(id, t).is_some() {
            return Err(ServiceError::DuplicateTable(id));
        }
    }
    Ok(tables)
}

pub struct PirServer {
    tables: BTreeMap<u32, Arc<EmbeddingTable>>,
    engine: Arc<EvalEngine>,
    batcher: Batcher,
    prf: Option<PrfId>,
}

impl PirServer {
    /// Must be called inside a tokio runtime; starts the batcher.
    pub fn new(
        tables: BTreeMap<u32, EmbeddingTable>,
        config: ServerConfig,
    ) -> Result<Arc<Self>, ServiceError> {
        let engine = Arc::new(EvalEngine::new(config.workers.max(1))?);
        let scheduler = SchedulerConfig {
            workers: config.workers.max(1),
            ..config.scheduler
        };
        let batcher = Batcher::spawn(
            config.batch,
            engine.clone(),
            EvalSettings {
                strategy: config.strategy,
                scheduler,
            },
        );
        Ok(Arc::new(PirServer {
            tables: tables.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            engine,
            batcher,
            prf: config.prf,
        }))
    }

    pub fn table_info(&self) -> Vec<TableInfo> {
        self.tables
            .values()
            .map(|t| TableInfo {
                table_id: t.table_id(),
                num_entries: t.num_entries() as u64,
                logical_entries: t.logical_entries() as u64,
                entry_bytes: t.entry_bytes() as u32,
            })
            .collect()
    }

    /// PRF calls spent on all queries so far.
    pub fn prf_calls(&self) -> u64 {
        self.engine.prf_call_counter()
    }

    /// Accept connections until the listener fails.
    pub async fn serve(self: Arc<Self>, listener: TcpListener) -> Result<(), ServiceError> {
        loop {
            let (stream, _) = listener.accept().await?;
            let _ = stream.set_nodelay(true);
            tokio::spawn(self.clone().connection(stream));
        }
    }

    /// Bind `addr` and serve in a background task; returns the bound address.
    pub async fn spawn(self: Arc<Self>, addr: &str) -> Result<SocketAddr, ServiceError> {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        tokio::spawn(self.serve(listener));
        Ok(local)
    }

    async fn connection(self: Arc<Self>, stream: TcpStream) {
        let (rd, wr) = stream.into_split();
        let mut rd = BufReader::new(rd);
        let (tx, mut rx) = mpsc::unbounded_channel::<Frame>();
        let writer = tokio::spawn(async move {
            let mut wr = BufWriter::new(wr);
            while let Some(frame) = rx.recv().await {
                if write_frame(&mut wr, &frame).await.is_err() {
                    return;
                }
                if rx.is_empty() && wr.flush().await.is_err() {
                    return;
                }
            }
            let _ = wr.flush().await;
        });
        loop {
            match read_frame(&mut rd).await {
                Ok(Some(frame)) => self.clone().handle(frame, &tx),
                Ok(None) => break,
                Err(_) => {
                    // Garbage on the stream: drop the connection, no reply.
                    writer.abort();
                    return;
                }
            }
        }
        drop(tx);
        let _ = writer.await;
    }

    fn handle(self: Arc<Self>, frame: Frame, tx: &mpsc::UnboundedSender<Frame>) {
        match frame.msg_type {
            MsgType::TableInfo => {
                let _ = tx.send(Frame::new(
                    MsgType::TableInfo,
                    encode_table_info(&self.table_info()),
                ));
            }
            MsgType::Query => match QueryPayload::decode(&frame.payload) {
                Ok(q) => {
                    let tx = tx.clone();
                    tokio::spawn(async move {
                        let _ = tx.send(self.answer(q).await);
                    });
                }
                Err(_) => {
                    let _ = tx.send(error_frame(
                        0,
                        ErrorCode::BadKey,
                        "short query payload".into(),
                    ));
                }
            },
            MsgType::Response | MsgType::Error => {
                let _ = tx.send(error_frame(
                    0,
                    ErrorCode::Internal,
                    "unexpected message type".into(),
                ));
            }
        }
    }

    async fn answer(&self, q: QueryPayload) -> Frame {
        let id = q.request_id;
        let Some(table) = self.tables.get(&q.table_id) else {
            return error_frame(
                id,
                ErrorCode::UnknownTable,
                format!("no table {}", q.table_id),
            );
        };
        let key = match DpfKey::from_bytes(&q.key) {
            Ok(k) => k,
            Err(e) => return error_frame(id, ErrorCode::BadKey, e.to_string()),
        };
        if self.prf.is_some_and(|p| p != key.prf()) {
            return error_frame(
                id,
                ErrorCode::BadKey,
                format!("server only accepts {}", self.prf.unwrap()),
            );
        }
        let leaves = key.num_entries();
        if leaves > table.num_entries() as u64 {
            return error_frame(
                id,
                ErrorCode::BadKey,
                format!("key spans {leaves} rows, table has {}", table.num_entries()),
            );
        }
        let bins = table.num_entries() as u64 / leaves;
        if q.bin_id as u64 >= bins {
            return error_frame(
                id,
                ErrorCode::BinOutOfRange,
                format!("bin {} of {bins}", q.bin_id),
            );
        }
        match self.batcher.submit(table.clone(), q.bin_id, key).await {
            Ok(share) => ResponsePayload {
                request_id: id,
                share,
            }
            .into_frame(),
            Err(msg) => error_frame(id, ErrorCode::Internal, msg),
        }
    }
}

fn error_frame(request_id: u64, code: ErrorCode, message: String) -> Frame {
    ErrorPayload {
        request_id,
        code,
        message,
    }
    .into_frame()
}
