use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigmine_core::mih::DEFAULT_BUCKET_COUNT;
use sigmine_core::{Error, Result};

/// Service settings, normally read from a TOML file.
///
/// Relative paths are resolved against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Volume used for patch images; optional.
    pub volume: Option<PathBuf>,
    /// Store directory.
    pub store: PathBuf,
    /// Multi-index file.
    pub index: PathBuf,
    pub bucket_count: usize,
    pub bind: SocketAddr,
    /// Default rank at which session presentation starts.
    pub rank_n: usize,
    /// Default NMS threshold in voxels.
    pub t: f64,
    /// Default number of ranked matches.
    pub k: usize,
    /// Largest accepted side of a patch image.
    pub max_patch_size: u32,
    /// Append-only session log; replayed at start-up.
    pub session_log: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            volume: None,
            store: PathBuf::from("store"),
            index: PathBuf::from("index.mih"),
            bucket_count: DEFAULT_BUCKET_COUNT,
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            rank_n: 50,
            t: 10.0,
            k: 50,
            max_patch_size: 256,
            session_log: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: ServiceConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.store);
        resolve(&mut cfg.index);
        cfg.volume.as_mut().map(resolve);
        cfg.session_log.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.rank_n == 0 || self.rank_n > self.k {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= rank_n <= k, got rank_n {} and k {}",
                self.rank_n, self.k
            )));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::InvalidArgument(format!("t must be positive, got {}", self.t)));
        }
        if self.max_patch_size == 0 {
            return Err(Error::InvalidArgument("max_patch_size must be at least 1".into()));
        }
        Ok(())
    }
}
