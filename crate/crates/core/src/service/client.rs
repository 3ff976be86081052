//! Client side: sends a plan's keys to both servers and rebuilds the rows.

use std::collections::BTreeMap;
use std::time::Duration;

use tokio::io::{AsyncWriteExt, BufReader, BufWriter};
use tokio::net::TcpStream;
use tokio::time::timeout;

use super::wire::{
    decode_table_info, read_frame, write_frame, ErrorPayload, Frame, MsgType, QueryPayload,
    ResponsePayload, TableInfo,
};
use super::ServiceError;
use crate::planner::{reconstruct, QueryPlan};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(300);

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub server_a: String,
    pub server_b: String,
    /// Budget for one plan's round trip to both servers.
    pub timeout: Duration,
    /// Extra attempts after a transport failure or timeout.
    pub retries: u32,
}

impl ClientConfig {
    pub fn new(server_a: impl Into<String>, server_b: impl Into<String>) -> Self {
        ClientConfig {
            server_a: server_a.into(),
            server_b: server_b.into(),
            timeout: DEFAULT_TIMEOUT,
            retries: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PirClient {
    config: ClientConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Party {
    A,
    B,
}

impl PirClient {
    pub fn new(config: ClientConfig) -> Self {
        PirClient { config }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Fetch and reconstruct every wanted row of `plan`. Either both
    /// servers answer every slot or nothing is returned.
    pub async fn fetch(&self, plan: &QueryPlan) -> Result<BTreeMap<u32, Vec<u8>>, ServiceError> {
        let (a, b) = self.shares(plan).await?;
        Ok(reconstruct(plan, &a, &b)?)
    }

    /// The raw shares of both servers, one per slot.
    pub async fn shares(
        &self,
        plan: &QueryPlan,
    ) -> Result<(Vec<Vec<u8>>, Vec<Vec<u8>>), ServiceError> {
        let mut attempt = 0;
        loop {
            let res = timeout(self.config.timeout, async {
                tokio::try_join!(
                    exchange(&self.config.server_a, frames(plan, Party::A)),
                    exchange(&self.config.server_b, frames(plan, Party::B)),
                )
            })
            .await
            .unwrap_or(Err(ServiceError::Timeout(self.config.timeout)));
            match res {
                Err(e) if e.is_transient() && attempt < self.config.retries => attempt += 1,
                other => return other,
            }
        }
    }

    /// Ask one server which tables it hosts.
    pub async fn table_info(&self, addr: &str) -> Result<Vec<TableInfo>, ServiceError> {
        timeout(self.config.timeout, async {
            let mut stream = TcpStream::connect(addr).await?;
            write_frame(&mut stream, &Frame::new(MsgType::TableInfo, Vec::new())).await?;
            match read_frame(&mut stream).await? {
                Some(f) if f.msg_type == MsgType::TableInfo => Ok(decode_table_info(&f.payload)?),
                Some(f) => Err(ServiceError::Protocol(format!(
                    "unexpected {:?} frame",
                    f.msg_type
                ))),
                None => Err(ServiceError::Protocol("connection closed".into())),
            }
        })
        .await
        .unwrap_or(Err(ServiceError::Timeout(self.config.timeout)))
    }
}

fn frames(plan: &QueryPlan, party: Party) -> Vec<Frame> {
    plan.slots()
        .enumerate()
        .map(|(i, q)| {
            let key = match party {
                Party::A => &q.key_a,
                Party::B => &q.key_b,
            };
            QueryPayload {
                request_id: i as u64,
                table_id: q.table_id,
                bin_id: q.bin_id,
                key: key.to_bytes(),
            }
            .into_frame()
        })
        .collect()
}

async fn exchange(addr: &str, frames: Vec<Frame>) -> Result<Vec<Vec<u8>>, ServiceError> {
    let n = frames.len();
    let stream = TcpStream::connect(addr).await?;
    let _ = stream.set_nodelay(true);
    let (rd, wr) = stream.into_split();
    let send = async move {
        let mut wr = BufWriter::new(wr);
        for f in &frames {
            write_frame(&mut wr, f).await?;
        }
        wr.flush().await?;
        Ok::<_, ServiceError>(wr)
    };
    let recv = async move {
        let mut rd = BufReader::new(rd);
        let mut out: Vec<Option<Vec<u8>>> = vec![None; n];
        for _ in 0..n {
            let frame = read_frame(&mut rd)
                .await?
                .ok_or_else(|| ServiceError::Protocol("server closed the connection".into()))?;
            match frame.msg_type {
                MsgType::Response => {
                    let r = ResponsePayload::decode(&frame.payload)?;
                    let slot = out
                        .get_mut(r.request_id as usize)
                        .filter(|s| s.is_none())
                        .ok_or_else(|| {
                            ServiceError::Protocol(format!(
                                "unexpected request id {}",
                                r.request_id
                            ))
                        })?;
                    *slot = Some(r.share);
                }
                MsgType::Error => {
                    let e = ErrorPayload::decode(&frame.payload)?;
                    return Err(ServiceError::Server {
                        code: e.code,
                        message: e.message,
                    });
                }
                other => {
                    return Err(ServiceError::Protocol(format!(
                        "unexpected {other:?} frame"
                    )))
                }
            }
        }
        Ok(out.into_iter().map(|s| s.unwrap()).collect())
    };
    let (_, shares) = tokio::try_join!(send, recv)?;
    Ok(shares)
}
