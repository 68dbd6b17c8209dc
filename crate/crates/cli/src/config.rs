//! Optional TOML configuration. Keys use the long flag names with `_` for `-`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::exit::{fail, BAD_ARGS};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub label_backend: Option<String>,
    pub span_backend: Option<String>,
    pub planner_url: Option<String>,
    pub proxy_url: Option<String>,
    pub model: Option<String>,
    pub repairs: Option<usize>,
    pub batch: Option<usize>,
    pub parallel: Option<usize>,
    pub cache: Option<bool>,
    pub cache_dir: Option<PathBuf>,
    pub strict: Option<bool>,
    pub out: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = std::fs::read_to_string(path)
            .map_err(|e| fail(BAD_ARGS, format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| fail(BAD_ARGS, format!("parsing config {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys_and_rejects_unknown() {
        let c: FileConfig = toml::from_str("seed = 7\nbackend = \"mock:r.json\"\nparallel = 4\n").unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.parallel, Some(4));
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
    }
}
