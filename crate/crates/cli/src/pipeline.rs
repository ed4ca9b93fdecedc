//! Plumbing shared by the subcommands: corpus IO, splitting, dimension
//! finalization, and run-directory management.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dpcpl::data::{
    load_interactions, make_split_spec, temporal_split, InteractionLog, SplitGranularity,
    SplitReport, SplitSpec, TsvSchema,
};
use dpcpl::ebm::ModelDims;
use dpcpl::error::{Error, Result};

use crate::config::RunConfig;

/// Load interactions.tsv from the configured data directory.
pub fn load_corpus(cfg: &RunConfig) -> Result<InteractionLog> {
    let dir = cfg.paths.data.as_ref().ok_or_else(|| {
        Error::Config("no data directory: set --data or paths.data in the config".into())
    })?;
    let path = dir.join("interactions.tsv");
    load_interactions(&path, &TsvSchema::default())
}

/// Model dimensions with the corpus-determined fields filled in. Explicit
/// nonzero values in the config must agree with the corpus.
pub fn finalize_dims(cfg: &RunConfig, log: &InteractionLog) -> Result<ModelDims> {
    let mut dims = cfg.model.clone();
    if dims.n_items == 0 {
        dims.n_items = log.n_items();
    } else if dims.n_items != log.n_items() {
        return Err(Error::Config(format!(
            "model.n_items = {} but the corpus has {} items",
            dims.n_items,
            log.n_items()
        )));
    }
    if dims.n_behaviors == 0 {
        dims.n_behaviors = log.n_behaviors();
    } else if dims.n_behaviors != log.n_behaviors() {
        return Err(Error::Config(format!(
            "model.n_behaviors = {} but the corpus has {} behaviors",
            dims.n_behaviors,
            log.n_behaviors()
        )));
    }
    dims.validate()?;
    Ok(dims)
}

/// Cut the corpus and assemble the leave-one-out split around the target
/// behavior.
pub fn split_corpus(cfg: &RunConfig, log: &InteractionLog) -> Result<(SplitSpec, SplitReport)> {
    let granularity =
        if cfg.split.per_user { SplitGranularity::PerUser } else { SplitGranularity::Global };
    let (pre, fine, report) = temporal_split(log, cfg.split.pretrain_fraction, granularity)?;
    let spec = make_split_spec(pre, fine, cfg.target_behavior)?;
    Ok((spec, report))
}

/// Create `<out>/run-<fingerprint8>-<unixtime>/`, echo the resolved config
/// into it, and announce it on stdout as `run_dir=<path>`.
pub fn create_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let base = cfg.paths.out_dir();
    let fp8: String = cfg.fingerprint().chars().take(8).collect();
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after 1970").as_secs();
    let mut dir = base.join(format!("run-{fp8}-{stamp}"));
    let mut suffix = 1;
    while dir.exists() {
        suffix += 1;
        dir = base.join(format!("run-{fp8}-{stamp}-r{suffix}"));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &echo_config(cfg)?)?;
    println!("run_dir={}", dir.display());
    Ok(dir)
}

/// The resolved config as TOML, prefixed with its fingerprints as comments.
pub fn echo_config(cfg: &RunConfig) -> Result<String> {
    let body = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    Ok(format!(
        "# fingerprint = {}\n# model_fingerprint = {}\n{body}",
        cfg.fingerprint(),
        cfg.model_fingerprint()
    ))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Render rows into a CSV file with the given header.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut s = String::with_capacity(rows.len() * 32 + header.len() + 1);
    s.push_str(header);
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}
