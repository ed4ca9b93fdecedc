//! Ranking evaluation under the sampled-negative leave-one-out protocol.
//!
//! Each evaluation user's held-out target-behavior item is ranked against a
//! fixed number of sampled items the user never interacted with; HR@K and
//! NDCG@K are averaged over users. Candidate sampling is deterministic per
//! (seed, user), so two runs with the same seed and model produce
//! byte-identical reports.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{InteractionRecord, SplitSpec};
use crate::ebm::{encode_user, EbmParams, ModelDims};
use crate::embedding::prepare_sequence;
use crate::error::{Error, Result};
use crate::prompt::PromptDims;
use crate::rng::{stream, substream_indexed};
use crate::tensor::Tensor;
use crate::tune::{build_layer_prompts, user_prompt_inputs, PromptPlan, PromptSource, PromptVars};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Hit ratio and NDCG for a single relevant item at the given 1-based rank.
/// The ideal DCG of one relevant item is 1, so NDCG reduces to the discount.
pub fn hr_ndcg_at_k(rank: usize, k: usize) -> (f64, f64) {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Rank candidate items by descending score u . e_v, ties broken by ascending
/// item id. Candidates must be distinct and within the item table.
pub fn rank_candidates(u: &Tensor, candidates: &[usize], item_table: &Tensor) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Invalid("cannot rank an empty candidate set".into()));
    }
    if u.rows() != 1 || u.cols() != item_table.cols() {
        return Err(Error::Shape {
            context: "candidate ranking".into(),
            expected: format!("1 x {} user vector", item_table.cols()),
            got: format!("{} x {}", u.rows(), u.cols()),
        });
    }
    let mut seen = BTreeSet::new();
    for &c in candidates {
        if c >= item_table.rows() {
            return Err(Error::Bounds {
                table: "items".into(),
                what: "candidate".into(),
                index: c,
                bound: item_table.rows(),
            });
        }
        if !seen.insert(c) {
            return Err(Error::Invalid(format!("duplicate candidate item {c}")));
        }
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&c| {
            let s: f64 = u.row(0).iter().zip(item_table.row(c)).map(|(a, b)| a * b).sum();
            (c, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(c, _)| c).collect())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Number of users actually evaluated; 0 flags an empty (e.g. cold-start)
    /// subset rather than an error.
    pub n_eval_users: usize,
    pub target_behavior: usize,
    pub n_negatives: usize,
    pub seed: u64,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// One CSV line per K with the run context repeated per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "k,hr,ndcg,n_eval_users,target_behavior,n_negatives,seed,config_fingerprint\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.10},{:.10},{},{},{},{},{}\n",
                r.k,
                r.hr,
                r.ndcg,
                self.n_eval_users,
                self.target_behavior,
                self.n_negatives,
                self.seed,
                self.config_fingerprint
            ));
        }
        out
    }

    /// Fixed-width console rendering.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "eval: {} users, target behavior {}, {} negatives, seed {}\n",
            self.n_eval_users, self.target_behavior, self.n_negatives, self.seed
        );
        out.push_str(&format!("{:>6}  {:>12}  {:>12}\n", "K", "HR@K", "NDCG@K"));
        for r in &self.rows {
            out.push_str(&format!("{:>6}  {:>12.6}  {:>12.6}\n", r.k, r.hr, r.ndcg));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cutoffs, deduplicated and sorted ascending before use.
    pub ks: Vec<usize>,
    pub n_negatives: usize,
    /// Restrict to cold-start users (at most 2 target-behavior events in the
    /// fine-tune split).
    pub cold_start: bool,
    /// Echoed into the report; the CLI sets this to the resolved-config hash.
    pub fingerprint: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![10, 20], n_negatives: 100, cold_start: false, fingerprint: String::new() }
    }
}

/// Restrict evaluation to users with at most 2 target-behavior interactions
/// in the fine-tune split.
pub fn cold_start_subset(spec: &SplitSpec) -> SplitSpec {
    let kept = spec
        .eval_users
        .iter()
        .filter(|ev| {
            let n = spec
                .finetune
                .user_records(ev.user)
                .iter()
                .filter(|r| r.behavior == spec.target_behavior)
                .count();
            n <= 2
        })
        .copied()
        .collect();
    spec.with_eval_users(kept)
}

/// Sample `n` distinct items the user never interacted with, deterministically
/// per (seed, user).
fn sample_eval_negatives(
    seed: u64,
    user: usize,
    n_items: usize,
    interacted: &[usize],
    n: usize,
) -> Result<Vec<usize>> {
    let eligible = n_items - interacted.len();
    if eligible < n {
        return Err(Error::Invalid(format!(
            "protocol error: user {user} has only {eligible} never-interacted items, \
             need {n} negatives"
        )));
    }
    let mut rng = substream_indexed(seed, stream::EVAL_NEGATIVES, user as u64);
    let mut picked = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.gen_range(0..n_items);
        if interacted.binary_search(&v).is_err() && picked.insert(v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Run the leave-one-out protocol. `encode` maps (user, context records) to
/// the 1 x d user representation; `item_table` holds the scoring embeddings.
pub fn evaluate(
    spec: &SplitSpec,
    item_table: &Tensor,
    encode: &mut dyn FnMut(usize, &[InteractionRecord]) -> Result<Tensor>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut ks: Vec<usize> = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::Config("eval cutoffs must be positive and non-empty".into()));
    }
    let n_items = spec.finetune.n_items();

    let mut hr_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    let mut n_users = 0usize;
    for ev in &spec.eval_users {
        let ctx = spec.train_records(ev.user);
        if ctx.is_empty() {
            continue;
        }
        let test_item = spec.finetune.user_records(ev.user)[ev.test_idx].item;
        let interacted = spec.interacted_items(ev.user);
        let negatives =
            sample_eval_negatives(seed, ev.user, n_items, &interacted, cfg.n_negatives)?;
        let mut candidates = negatives;
        candidates.push(test_item);

        let u = encode(ev.user, &ctx)?;
        let ranked = rank_candidates(&u, &candidates, item_table)?;
        let rank = 1 + ranked.iter().position(|&c| c == test_item).expect("test item is a candidate");
        for (i, &k) in ks.iter().enumerate() {
            let (hr, ndcg) = hr_ndcg_at_k(rank, k);
            hr_sums[i] += hr;
            ndcg_sums[i] += ndcg;
        }
        n_users += 1;
    }

    let rows = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let denom = n_users.max(1) as f64;
            EvalRow { k, hr: hr_sums[i] / denom, ndcg: ndcg_sums[i] / denom }
        })
        .collect();
    Ok(EvalReport {
        rows,
        n_eval_users: n_users,
        target_behavior: spec.target_behavior,
        n_negatives: cfg.n_negatives,
        seed,
        config_fingerprint: cfg.fingerprint.clone(),
    })
}

/// Build the standard model encoder: the frozen backbone, optionally with
/// tuned prompts injected. With prompts active, contexts are capped at the
/// plan's recent-history length first, matching what tuning saw.
pub fn model_encoder<'a>(
    backbone: &'a EbmParams<Tensor>,
    dims: &'a ModelDims,
    pdims: &'a PromptDims,
    prompts: Option<(&'a PromptSource, &'a PromptPlan)>,
    spec: &'a SplitSpec,
) -> impl FnMut(usize, &[InteractionRecord]) -> Result<Tensor> + 'a {
    move |user, ctx| {
        let mut tape = Tape::new();
        let bvars = backbone.to_vars(&mut tape);
        let u = match prompts {
            None => {
                let prep = prepare_sequence(ctx, dims.l_seq);
                encode_user(&mut tape, &bvars, dims, &prep, &[])?
            }
            Some((source, plan)) => {
                let start = ctx.len().saturating_sub(plan.l_seq_tune);
                let prep = prepare_sequence(&ctx[start..], dims.l_seq);
                let inputs = user_prompt_inputs(spec, plan, dims.n_behaviors, user);
                let generated;
                let static_vars;
                let pvars = match source {
                    PromptSource::Generated(p) => {
                        generated = p.to_vars(&mut tape);
                        PromptVars::Generated(&generated)
                    }
                    PromptSource::Static(toks) => {
                        static_vars = toks
                            .iter()
                            .map(|t| t.as_ref().map(|t| tape.leaf(t.clone())))
                            .collect::<Vec<_>>();
                        PromptVars::Static(&static_vars)
                    }
                };
                let up = build_layer_prompts(&mut tape, &pvars, &bvars, pdims, plan, &inputs)?;
                encode_user(&mut tape, &bvars, dims, &prep, &up.layers)?
            }
        };
        Ok(tape.value(u).clone())
    }
}
