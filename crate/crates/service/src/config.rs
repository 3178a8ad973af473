use std::path::PathBuf;

/// Process settings, normally read from the environment:
///
/// | variable | default |
/// |---|---|
/// | `EXLOOP_PORT` | `8080` |
/// | `EXLOOP_MODEL` | none: a freshly initialized network |
/// | `EXLOOP_DATA_DIR` | `./exloop-data` |
/// | `EXLOOP_THRESHOLDS` | none: 0.40 for every class |
/// | `EXLOOP_SEED` | `0` |
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    pub model_path: Option<PathBuf>,
    /// Harvested images, manifests, models and templates live here.
    pub data_dir: PathBuf,
    pub thresholds_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            model_path: None,
            data_dir: PathBuf::from("exloop-data"),
            thresholds_path: None,
            seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = ServiceConfig::default();
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(p) = var("EXLOOP_PORT") {
            cfg.port = p.parse().map_err(|_| format!("EXLOOP_PORT is not a port: {p}"))?;
        }
        if let Some(s) = var("EXLOOP_SEED") {
            cfg.seed = s.parse().map_err(|_| format!("EXLOOP_SEED is not an integer: {s}"))?;
        }
        cfg.model_path = var("EXLOOP_MODEL").map(PathBuf::from);
        cfg.thresholds_path = var("EXLOOP_THRESHOLDS").map(PathBuf::from);
        if let Some(d) = var("EXLOOP_DATA_DIR") {
            cfg.data_dir = PathBuf::from(d);
        }
        Ok(cfg)
    }
}
