//! Flat `key = value` run configuration: training keys plus `query.N.*`
//! workload keys.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use spart::cost::{parse_key_values, Workload};
use spart::trainer::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub train: Vec<(String, String)>,
    pub queries: Vec<(String, String)>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_key_values(text).map_err(|e| anyhow!(e))?;
        let mut out = FileConfig::default();
        for (k, v) in entries {
            if k.starts_with("query.") {
                out.queries.push((k, v));
            } else if TrainConfig::KEYS.contains(&k.as_str()) {
                out.train.push((k, v));
            } else {
                return Err(anyhow!("unknown config key {k:?}"));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn sets(&self, key: &str) -> bool {
        self.train.iter().any(|(k, _)| k == key)
    }

    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (k, v) in &self.train {
            cfg.set(k, v)?;
        }
        Ok(())
    }

    pub fn workload(&self) -> Result<Option<Workload>> {
        if self.queries.is_empty() {
            return Ok(None);
        }
        let w = Workload::from_entries(self.queries.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(Some(w))
    }
}

/// Training settings followed by the workload, in config-file syntax.
pub fn resolved_text(cfg: &TrainConfig, workload: Option<&Workload>) -> String {
    let mut out = cfg.to_config_string();
    if let Some(w) = workload {
        out.push_str(&w.to_config_string());
    }
    out
}
