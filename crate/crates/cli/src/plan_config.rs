//! Client plan configuration file.
//!
//! ```toml
//! prf = "aes128-ctr"
//! full_table = 1
//! full_bin_size = 1024
//! q_full = 16
//! hot_table = 2          # optional
//! hot_bin_size = 256
//! q_hot = 4
//! hot_map = "hot.map"    # optional, relative to this file
//! companions = "companions.map"
//! timeout_ms = 300
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dpir_core::codesign::{Companions, HotIndexMap};
use dpir_core::service::wire::TableInfo;
use dpir_core::{Planner, PlannerSpec, PrfId, TableGeometry};
use serde::{Deserialize, Serialize};

fn default_timeout() -> u64 {
    300
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default)]
    pub prf: PrfId,
    pub full_table: u32,
    pub full_bin_size: usize,
    pub q_full: usize,
    pub hot_table: Option<u32>,
    #[serde(default)]
    pub hot_bin_size: usize,
    #[serde(default)]
    pub q_hot: usize,
    pub hot_map: Option<PathBuf>,
    pub companions: Option<PathBuf>,
    /// Row width before co-location; derived from the companion map when
    /// omitted.
    pub base_entry_bytes: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

impl PlanConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: PlanConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, dir))
    }

    /// Build a planner from this config and a server's table list.
    pub fn planner(&self, dir: &Path, tables: &[TableInfo]) -> Result<Planner> {
        let find = |id: u32| -> Result<TableGeometry> {
            let t = tables
                .iter()
                .find(|t| t.table_id == id)
                .ok_or_else(|| anyhow!("server does not host table {id}"))?;
            Ok(TableGeometry {
                table_id: id,
                num_entries: t.num_entries as usize,
                logical_entries: t.logical_entries as usize,
                row_width: t.entry_bytes as usize,
            })
        };
        let full = find(self.full_table)?;
        let hot = self.hot_table.map(find).transpose()?;
        let hot_map = match &self.hot_map {
            Some(p) => HotIndexMap::from_bytes(&std::fs::read(dir.join(p))?)?,
            None => HotIndexMap::default(),
        };
        let companions = match &self.companions {
            Some(p) => Companions::from_bytes(&std::fs::read(dir.join(p))?)?,
            None => Companions::none(full.logical_entries),
        };
        let base = self
            .base_entry_bytes
            .unwrap_or(full.row_width / (companions.c() + 1));
        if hot.is_some() != (self.hot_map.is_some()) {
            bail!("hot_table and hot_map must be given together");
        }
        Ok(Planner::new(PlannerSpec {
            full,
            full_bin_size: self.full_bin_size,
            hot,
            hot_bin_size: self.hot_bin_size.max(2),
            hot_map,
            companions,
            base_entry_bytes: base,
            q_hot: self.q_hot,
            q_full: self.q_full,
            prf: self.prf,
        })?)
    }
}
