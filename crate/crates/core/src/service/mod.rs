//! The two-server deployment: frame codec, server daemon and client.
//!
//! Both servers run identical code; which one is "A" only matters to the
//! client, which sends party A's key of every slot to one and party B's to
//! the other.

pub mod batcher;
pub mod client;
pub mod server;
pub mod wire;

use std::time::Duration;

pub use batcher::{BatchPolicy, EvalSettings};
pub use client::{ClientConfig, PirClient, DEFAULT_TIMEOUT};
pub use server::{load_table_dir, PirServer, ServerConfig, TABLE_EXTENSION};
pub use wire::ErrorCode;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("server error {code:?}: {message}")]
    Server { code: ErrorCode, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("two tables with id {0}")]
    DuplicateTable(u32),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Plan(#[from] crate::planner::PlanError),
}

impl ServiceError {
    /// Worth another attempt: the connection broke or a server was slow.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ServiceError::Io(_)
                | ServiceError::Wire(_)
                | ServiceError::Timeout(_)
                | ServiceError::Protocol(_)
        )
    }
}
