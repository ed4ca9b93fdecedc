//! Run configuration: one TOML file, flag overrides, canonical fingerprint.
//!
//! Precedence is flags > file > defaults. The fingerprint is the SHA-256 of
//! the canonical serialization — compact JSON of the resolved config with
//! filesystem paths and the derived eval fingerprint field reset to their
//! defaults, so relocating artifacts never changes a run's identity while
//! every hyperparameter does.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dpcpl::data::SynthConfig;
use dpcpl::ebm::ModelDims;
use dpcpl::error::{Error, Result};
use dpcpl::eval::EvalConfig;
use dpcpl::pretrain::PretrainConfig;
use dpcpl::prompt::PromptDims;
use dpcpl::tune::{TrainableSet, TuneConfig};

/// Prompt-side sizes that are not already pinned by the backbone. Width and
/// layer count always follow the model, and the statistics dimension follows
/// the corpus, so only the genuinely free knobs live here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    /// Factors per bank (N): each layer draws from its own bank plus the
    /// shared one, giving 2N gating candidates.
    pub n_factors: usize,
    /// Prompt tokens injected per layer (C).
    pub n_tokens: usize,
    /// Categorical attribute vocabulary size (0 when the corpus has none).
    pub attr_vocab: usize,
    /// Attribute slots per user.
    pub attr_slots: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings { n_factors: 8, n_tokens: 8, attr_vocab: 0, attr_slots: 1 }
    }
}

/// How the interaction log is cut into the pretrain and finetune halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    /// Fraction of events (by time order) that land in the pretrain half.
    pub pretrain_fraction: f64,
    /// Cut each user's own timeline instead of the global clock, so short
    /// histories keep events on both sides.
    pub per_user: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings { pretrain_fraction: 0.6, per_user: true }
    }
}

/// Filesystem locations. Excluded from the fingerprint: moving data around
/// must not masquerade as a different experiment.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding interactions.tsv and the id-map sidecars.
    pub data: Option<PathBuf>,
    /// Directory run directories are created under.
    pub out: Option<PathBuf>,
}

impl Paths {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream in the pipeline derives from it.
    pub seed: u64,
    /// Behavior index predictions are scored against downstream.
    pub target_behavior: usize,
    pub model: ModelDims,
    pub prompt: PromptSettings,
    pub synth: SynthConfig,
    pub split: SplitSettings,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Canonical serialization: compact JSON with location-only fields reset,
    /// field order fixed by the struct definitions.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.eval.fingerprint = String::new();
        serde_json::to_string(&c).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Fingerprint of only the fields that determine the pretrained backbone:
    /// seed, model, corpus, split, and pretraining settings. Checkpoints are
    /// stamped with this, so retuning with different prompt or eval settings
    /// still accepts the same backbone while any change that would alter its
    /// weights rejects it.
    pub fn model_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct ModelIdentity<'a> {
            seed: u64,
            model: &'a ModelDims,
            synth: &'a SynthConfig,
            split: &'a SplitSettings,
            pretrain: &'a PretrainConfig,
        }
        let id = ModelIdentity {
            seed: self.seed,
            model: &self.model,
            synth: &self.synth,
            split: &self.split,
            pretrain: &self.pretrain,
        };
        sha256_hex(serde_json::to_string(&id).expect("identity serializes").as_bytes())
    }

    /// Assemble the prompt dimensions for this config once the corpus-driven
    /// statistics dimension is known.
    pub fn prompt_dims(&self, stats_dim: usize) -> PromptDims {
        PromptDims {
            d: self.model.d,
            n_layers: self.model.n_layers,
            n_factors: self.prompt.n_factors,
            n_tokens: self.prompt.n_tokens,
            attr_vocab: self.prompt.attr_vocab,
            attr_slots: self.prompt.attr_slots,
            stats_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.pretrain_fraction > 0.0 && self.split.pretrain_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.pretrain_fraction must be in (0, 1), got {}",
                self.split.pretrain_fraction
            )));
        }
        if self.prompt.n_factors == 0 || self.prompt.n_tokens == 0 {
            return Err(Error::Config(format!(
                "prompt sizes must be positive: n_factors = {}, n_tokens = {}",
                self.prompt.n_factors, self.prompt.n_tokens
            )));
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Command-line overrides, all optional; `None`/`false` leaves the config
/// value alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub target_behavior: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Identity frequency filters (denoising off) in both stages.
    pub no_ds: bool,
    /// Static soft prompts instead of the per-user generator.
    pub no_ps: bool,
    /// Inject prompts at the first layer only.
    pub no_pg: bool,
    /// Drop the compactness regularizer (λ = 0).
    pub no_ct: bool,
    /// Unfreeze the backbone during tuning.
    pub full_finetune: bool,
    pub eval_ks: Option<Vec<usize>>,
    pub n_negatives: Option<usize>,
    pub cold_start: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.target_behavior {
            cfg.target_behavior = b;
        }
        if let Some(l) = self.lambda {
            cfg.tune.lambda = l;
        }
        if let Some(lr) = self.lr {
            cfg.pretrain.adam.lr = lr;
            cfg.tune.adam.lr = lr;
        }
        if let Some(e) = self.epochs {
            cfg.pretrain.epochs = e;
            cfg.tune.epochs = e;
        }
        if let Some(p) = &self.data {
            cfg.paths.data = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.paths.out = Some(p.clone());
        }
        if self.no_ds {
            cfg.model.no_denoise = true;
            cfg.tune.no_denoise = true;
        }
        if self.no_ps {
            cfg.tune.static_prompt = true;
        }
        if self.no_pg {
            cfg.tune.first_layer_only = true;
        }
        if self.no_ct {
            cfg.tune.no_compactness = true;
        }
        if self.full_finetune {
            cfg.tune.trainable = TrainableSet::Everything;
        }
        if let Some(ks) = &self.eval_ks {
            cfg.eval.ks = ks.clone();
        }
        if let Some(n) = self.n_negatives {
            cfg.eval.n_negatives = n;
        }
        if self.cold_start {
            cfg.eval.cold_start = true;
        }
    }
}

/// Load (file, then overrides, over defaults) and validate a run config.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_run_config(&text, path)?
        }
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Parse TOML into a RunConfig, translating deserializer failures into
/// errors that carry the full key path and, for misspelled keys, the nearest
/// valid name.
pub fn parse_run_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let de = toml::de::Deserializer::new(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| explain_config_error(&e, origin))
}

fn explain_config_error(
    err: &serde_path_to_error::Error<toml::de::Error>,
    origin: &Path,
) -> Error {
    let parent = err.path().to_string();
    let msg = err.inner().message().to_string();
    let origin = origin.display();

    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let mut tokens = backticked(&format!("`{rest}"));
        if !tokens.is_empty() {
            let offender = tokens.remove(0);
            // The path tracker usually already ends in the offending key.
            let full_key = if parent == offender || parent.ends_with(&format!(".{offender}")) {
                parent.clone()
            } else if parent.is_empty() || parent == "." {
                offender.clone()
            } else {
                format!("{parent}.{offender}")
            };
            let hint = match closest(&offender, &tokens) {
                Some(best) => format!("did you mean `{best}`?"),
                None if tokens.is_empty() => "this table accepts no keys".to_string(),
                None => format!("valid keys: {}", tokens.join(", ")),
            };
            return Error::Config(format!("unknown key `{full_key}` in {origin}: {hint}"));
        }
    }

    if parent.is_empty() || parent == "." {
        Error::Config(format!("invalid config {origin}: {msg}"))
    } else {
        Error::Config(format!("invalid value for `{parent}` in {origin}: {msg}"))
    }
}

/// All backticked tokens in a serde error message, in order.
fn backticked(msg: &str) -> Vec<String> {
    msg.split('`').skip(1).step_by(2).map(str::to_string).collect()
}

/// The candidate within edit distance max(2, len/3) of the offender, if any.
fn closest(offender: &str, candidates: &[String]) -> Option<String> {
    let budget = (offender.len() / 3).max(2);
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(offender, c), c))
        .filter(|&(d, _)| d <= budget)
        .min_by_key(|&(d, _)| d)
        .map(|(_, c)| c.clone())
}
