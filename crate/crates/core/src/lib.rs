//! Two-server private information retrieval for embedding tables, built on
//! a distributed point function.
//!
//! The client turns each wanted row index into a pair of DPF keys, one per
//! server. Each server expands its key over the whole table, XOR-accumulates
//! the rows its leaves select, and returns the result; the XOR of the two
//! answers is the wanted row.

pub mod codesign;
pub mod dpf;
pub mod engine;
pub mod harness;
pub mod planner;
pub mod prf;
pub mod service;
pub mod table;
pub mod trace;

pub use codesign::{
    build_colocated, build_hot_split, CodesignError, ColocatedTable, Companions, HotIndexMap,
    HotSplit,
};
pub use dpf::{gen, DomainSpec, DpfError, DpfKey, LeafShare, TargetPoint};
pub use engine::{
    select_strategy, CostReport, EngineError, EvalEngine, EvalPlan, ResponseShare, Strategy,
};
pub use planner::{
    reconstruct, simulate_drop_rate, BinConfig, PlanError, Planner, PlannerSpec, QueryPlan,
    TableGeometry,
};
pub use prf::{prf_expand, Expander, PrfCounter, PrfError, PrfId, Seed};
pub use table::{load_table, store_table, EmbeddingTable, TableError, TableView};
pub use trace::{SyntheticTrace, Trace, TraceError};

/// `acc ^= src`, bytewise.
#[inline]
pub fn xor_into(acc: &mut [u8], src: &[u8]) {
    debug_assert_eq!(acc.len(), src.len());
    for (a, s) in acc.iter_mut().zip(src) {
        *a ^= s;
    }
}
