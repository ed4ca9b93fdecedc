//! Frozen-backbone prompt tuning.
//!
//! After pre-training, the backbone is frozen and only the prompt side is
//! optimized: per-user prompts are generated (or, under the static-prompt
//! ablation, read from free learned token matrices shared across users),
//! injected into the encoder layers, and trained to rank the next
//! target-behavior item. The objective is the prediction loss plus an outer
//! lambda times the signed compactness term over the factor and prompt banks.
//! Backbone gradients flow through the graph (the prompt path needs them) but
//! are never applied unless the full-finetune comparison mode is requested.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{backward, Tape, Var};
use crate::data::{
    user_statistics, InteractionRecord, SplitSpec, Standardizer, UserStatistics,
};
use crate::ebm::{efl_tensor_param_count, encode_user, EbmParams, ModelDims};
use crate::embedding::prepare_sequence;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::pretrain::sample_negative_item;
use crate::prompt::{
    compactness_term, generate_prompts, init_prompt, CompactnessConfig, PromptDims, PromptInputs,
    PromptParams,
};
use crate::rng::{stream, substream, substream_indexed};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which parameter set the tuner is allowed to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Prompt-side parameters only; the backbone stays frozen (default).
    PromptOnly,
    /// Everything, including the backbone (comparison harness).
    Everything,
    /// Nothing (budget accounting and no-op runs).
    Nothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience in epochs without validation improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    /// Only the most recent events per user feed the tuner.
    pub l_seq_tune: usize,
    /// Outer weight on the signed compactness term.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub compactness: CompactnessConfig,
    /// Replace every frequency filter with the identity map.
    pub no_denoise: bool,
    /// Replace generated prompts with free learned tokens shared across users.
    pub static_prompt: bool,
    /// Inject prompts only at the first encoder layer.
    pub first_layer_only: bool,
    /// Drop the compactness term (equivalent to lambda = 0).
    pub no_compactness: bool,
    pub trainable: TrainableSet,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            epochs: 100,
            batch_size: 32,
            patience: 20,
            l_seq_tune: 32,
            lambda: 0.01,
            adam: AdamConfig::default(),
            compactness: CompactnessConfig::default(),
            no_denoise: false,
            static_prompt: false,
            first_layer_only: false,
            no_compactness: false,
            trainable: TrainableSet::PromptOnly,
        }
    }
}

impl TuneConfig {
    pub fn effective_lambda(&self) -> f64 {
        if self.no_compactness {
            0.0
        } else {
            self.lambda
        }
    }

    /// Per-layer injection switches.
    pub fn injected_layers(&self, n_layers: usize) -> Vec<bool> {
        (0..n_layers).map(|l| !self.first_layer_only || l == 0).collect()
    }
}

// ---------------------------------------------------------------------------
// Prompt injection as row operations
// ---------------------------------------------------------------------------

/// Prepend the prompt tokens to the hidden rows; `None` tokens are the
/// identity (zero-token injection).
pub fn inject_prompt_rows(tape: &mut Tape, tokens: Option<Var>, hidden: Var) -> Var {
    match tokens {
        Some(t) => tape.concat_rows(&[t, hidden]),
        None => hidden,
    }
}

/// Remove the first `n_tokens` rows again (inverse of injection).
pub fn strip_prompt_rows(tape: &mut Tape, x: Var, n_tokens: usize) -> Var {
    if n_tokens == 0 {
        return x;
    }
    let rows = tape.value(x).rows();
    tape.slice_rows(x, n_tokens, rows)
}

// ---------------------------------------------------------------------------
// Per-user prompt assembly shared by tuning and evaluation
// ---------------------------------------------------------------------------

/// The tuned prompt state: either the generator parameters or, under the
/// static-prompt ablation, free token matrices (one per injected layer).
#[derive(Clone, Debug, PartialEq)]
pub enum PromptSource {
    Generated(PromptParams<Tensor>),
    Static(Vec<Option<Tensor>>),
}

impl PromptSource {
    pub fn n_params(&self) -> usize {
        match self {
            PromptSource::Generated(p) => p.n_params(),
            PromptSource::Static(toks) => {
                toks.iter().flatten().map(|t| t.len()).sum()
            }
        }
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            PromptSource::Generated(p) => p.named(),
            PromptSource::Static(toks) => toks
                .iter()
                .enumerate()
                .filter_map(|(l, t)| t.as_ref().map(|t| (format!("static.{l}"), t)))
                .collect(),
        }
    }

    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        match self {
            PromptSource::Generated(p) => p.for_each_mut(|t, _| f(t)),
            PromptSource::Static(toks) => {
                for t in toks.iter_mut().flatten() {
                    f(t);
                }
            }
        }
    }
}

/// Tape-side view of a `PromptSource`.
pub enum PromptVars<'a> {
    Generated(&'a PromptParams<Var>),
    Static(&'a [Option<Var>]),
}

/// Everything derived once from the tuning split that prompt construction
/// needs: the fitted statistics standardizer, the recent-history cap, and the
/// per-layer injection switches.
#[derive(Clone, Debug)]
pub struct PromptPlan {
    pub standardizer: Standardizer,
    pub l_seq_tune: usize,
    pub injected: Vec<bool>,
}

/// The user's recent fine-tune history: train-portion records capped at the
/// most recent `l_seq_tune` events.
pub fn tuning_history(spec: &SplitSpec, user: usize, l_seq_tune: usize) -> Vec<InteractionRecord> {
    let recs = spec.train_records(user);
    let start = recs.len().saturating_sub(l_seq_tune);
    recs[start..].to_vec()
}

/// Fit the plan on the tuning split (statistics standardization is fit once,
/// over every user's recent history).
pub fn make_prompt_plan(spec: &SplitSpec, dims: &ModelDims, cfg: &TuneConfig) -> PromptPlan {
    let feats: Vec<Vec<f64>> = (0..spec.finetune.n_users())
        .map(|u| {
            user_statistics(&tuning_history(spec, u, cfg.l_seq_tune), dims.n_behaviors)
                .feature_vec()
        })
        .collect();
    PromptPlan {
        standardizer: Standardizer::fit(&feats),
        l_seq_tune: cfg.l_seq_tune,
        injected: cfg.injected_layers(dims.n_layers),
    }
}

/// Assemble one user's generator inputs from their recent history.
pub fn user_prompt_inputs(
    spec: &SplitSpec,
    plan: &PromptPlan,
    n_behaviors: usize,
    user: usize,
) -> PromptInputs {
    let hist = tuning_history(spec, user, plan.l_seq_tune);
    let stats = user_statistics(&hist, n_behaviors).feature_vec();
    let mut behavior_seqs = vec![Vec::new(); n_behaviors];
    for r in &hist {
        behavior_seqs[r.behavior].push(r.item);
    }
    PromptInputs {
        attrs: Vec::new(),
        standardized_stats: plan.standardizer.apply(&stats),
        behavior_seqs,
    }
}

/// One user's per-layer prompt tokens plus, on the generated path, the factor
/// and prompt banks the compactness term reads.
pub struct UserPrompts {
    pub layers: Vec<Option<Var>>,
    pub banks: Option<(Var, Var)>,
}

pub fn build_layer_prompts(
    tape: &mut Tape,
    vars: &PromptVars,
    backbone: &EbmParams<Var>,
    pdims: &PromptDims,
    plan: &PromptPlan,
    inputs: &PromptInputs,
) -> Result<UserPrompts> {
    match vars {
        PromptVars::Generated(p) => {
            let bundle = generate_prompts(tape, p, backbone, pdims, inputs)?;
            let layers = bundle
                .tokens
                .iter()
                .zip(&plan.injected)
                .map(|(&t, &on)| if on { Some(t) } else { None })
                .collect();
            Ok(UserPrompts { layers, banks: Some((bundle.e_bank, bundle.p_bank)) })
        }
        PromptVars::Static(toks) => Ok(UserPrompts { layers: toks.to_vec(), banks: None }),
    }
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// One example's total tuning loss on the tape: the pairwise prediction term
/// -log sigmoid(u (e_pos - e_neg)) plus the outer lambda times the signed
/// compactness term over the user's banks (when present).
pub fn tune_loss(
    tape: &mut Tape,
    u: Var,
    e_pos: Var,
    e_neg: Var,
    banks: Option<(Var, Var)>,
    pdims: &PromptDims,
    cfg: &TuneConfig,
) -> Var {
    let diff = tape.sub(e_pos, e_neg);
    let margin = tape.dot(u, diff);
    let neg = tape.scale(margin, -1.0);
    let pred = tape.softplus(neg);
    let lambda = cfg.effective_lambda();
    match banks {
        Some((e_bank, p_bank)) if lambda != 0.0 => {
            let ct = compactness_term(tape, e_bank, p_bank, pdims, &cfg.compactness);
            let weighted = tape.scale(ct, lambda);
            tape.add(pred, weighted)
        }
        _ => pred,
    }
}

// ---------------------------------------------------------------------------
// Parameter budget
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable: usize,
    pub total: usize,
}

impl ParamBudget {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Exact census of trainable vs total scalars for a tuning run. Under the
/// no-denoise ablation the frequency-filter tensors leave the graph entirely
/// and drop out of the total.
pub fn param_budget(
    backbone: &EbmParams<Tensor>,
    dims: &ModelDims,
    source: &PromptSource,
    cfg: &TuneConfig,
) -> ParamBudget {
    let mut backbone_count = backbone.n_params();
    if cfg.no_denoise {
        let per_layer = (dims.n_behaviors + 1) * efl_tensor_param_count(dims.d, dims.k_chunks);
        backbone_count -= dims.n_layers * per_layer;
    }
    let prompt_count = source.n_params();
    let total = backbone_count + prompt_count;
    let trainable = match cfg.trainable {
        TrainableSet::Nothing => 0,
        TrainableSet::PromptOnly => prompt_count,
        TrainableSet::Everything => total,
    };
    ParamBudget { trainable, total }
}

/// SHA-256 fingerprint of the backbone tensors (names, shapes, and exact
/// f64 bytes), used to verify the freeze contract.
pub fn backbone_hash(params: &EbmParams<Tensor>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.named() {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TuneEpochStats {
    pub epoch: usize,
    /// Mean prediction loss over the epoch's training examples.
    pub train_pred: f64,
    /// Prediction plus weighted compactness (the optimized objective).
    pub train_total: f64,
    /// Mean prediction loss on the fixed validation examples (NaN when the
    /// split has no validation users).
    pub valid_pred: f64,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    /// Best-on-validation prompt state.
    pub prompts: PromptSource,
    /// The backbone after tuning: identical to the input unless everything
    /// was trainable.
    pub backbone: EbmParams<Tensor>,
    pub curve: Vec<TuneEpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug)]
struct TuneItem<'a> {
    user: usize,
    ctx: &'a [InteractionRecord],
    pos_item: usize,
    neg_item: usize,
}

struct BatchOut {
    pred: f64,
    total: f64,
    prompt_grads: Option<Vec<Tensor>>,
    backbone_grads: Option<Vec<Tensor>>,
}

struct TuneCtx<'a> {
    backbone: &'a EbmParams<Tensor>,
    dims: &'a ModelDims,
    pdims: &'a PromptDims,
    plan: &'a PromptPlan,
    inputs: &'a [PromptInputs],
    cfg: &'a TuneConfig,
}

/// Mean prediction and total loss over a batch, with gradients for the
/// requested parameter sets. Prompts and the compactness term are built once
/// per distinct user in the batch.
fn run_tune_batch(
    ctx: &TuneCtx,
    source: &PromptSource,
    batch: &[TuneItem],
    want_prompt_grads: bool,
    want_backbone_grads: bool,
) -> Result<BatchOut> {
    let mut tape = Tape::new();
    let mut backbone_order = Vec::new();
    let bvars = ctx.backbone.map(&mut |t, _| {
        let v = tape.leaf(t.clone());
        backbone_order.push(v);
        v
    });
    let mut prompt_order = Vec::new();
    // Keeps the generated-path Vars alive for the borrow in PromptVars.
    let generated;
    let static_vars;
    let pvars = match source {
        PromptSource::Generated(p) => {
            generated = p.map(&mut |t, _| {
                let v = tape.leaf(t.clone());
                prompt_order.push(v);
                v
            });
            PromptVars::Generated(&generated)
        }
        PromptSource::Static(toks) => {
            static_vars = toks
                .iter()
                .map(|t| {
                    t.as_ref().map(|t| {
                        let v = tape.leaf(t.clone());
                        prompt_order.push(v);
                        v
                    })
                })
                .collect::<Vec<_>>();
            PromptVars::Static(&static_vars)
        }
    };

    let lambda = ctx.cfg.effective_lambda();
    let mut per_user: BTreeMap<usize, (UserPrompts, Option<Var>)> = BTreeMap::new();
    let mut pred_sum: Option<Var> = None;
    let mut ct_sum: Option<Var> = None;
    for item in batch {
        if !per_user.contains_key(&item.user) {
            let prompts = build_layer_prompts(
                &mut tape,
                &pvars,
                &bvars,
                ctx.pdims,
                ctx.plan,
                &ctx.inputs[item.user],
            )?;
            let ct = match (prompts.banks, lambda != 0.0) {
                (Some((e_bank, p_bank)), true) => {
                    Some(compactness_term(&mut tape, e_bank, p_bank, ctx.pdims, &ctx.cfg.compactness))
                }
                _ => None,
            };
            per_user.insert(item.user, (prompts, ct));
        }
        let (prompts, ct) = &per_user[&item.user];
        let prep = prepare_sequence(item.ctx, ctx.dims.l_seq);
        let u = encode_user(&mut tape, &bvars, ctx.dims, &prep, &prompts.layers)?;
        let e_pos = tape.gather_rows(bvars.item, &[item.pos_item]);
        let e_neg = tape.gather_rows(bvars.item, &[item.neg_item]);
        let diff = tape.sub(e_pos, e_neg);
        let margin = tape.dot(u, diff);
        let neg = tape.scale(margin, -1.0);
        let pred = tape.softplus(neg);
        pred_sum = Some(match pred_sum {
            Some(s) => tape.add(s, pred),
            None => pred,
        });
        if let Some(ct) = ct {
            ct_sum = Some(match ct_sum {
                Some(s) => tape.add(s, *ct),
                None => *ct,
            });
        }
    }
    let pred_sum = pred_sum.ok_or_else(|| Error::Invalid("empty tuning batch".into()))?;
    let inv = 1.0 / batch.len() as f64;
    let mean_pred = tape.scale(pred_sum, inv);
    let total = match ct_sum {
        Some(s) => {
            let mean_ct = tape.scale(s, inv * lambda);
            tape.add(mean_pred, mean_ct)
        }
        None => mean_pred,
    };
    let pred_value = tape.value(mean_pred).data()[0];
    let total_value = tape.value(total).data()[0];
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite tuning loss {total_value} (prediction part {pred_value})"
        )));
    }
    if !want_prompt_grads && !want_backbone_grads {
        return Ok(BatchOut { pred: pred_value, total: total_value, prompt_grads: None, backbone_grads: None });
    }
    let grads = backward(&tape, total);
    let pick = |order: &[Var], named: &[(String, &Tensor)]| -> Vec<Tensor> {
        order
            .iter()
            .zip(named.iter())
            .map(|(v, (_, t))| grads.get_or_zeros(*v, t.shape()))
            .collect()
    };
    let prompt_grads = want_prompt_grads.then(|| pick(&prompt_order, &source.named()));
    let backbone_grads = want_backbone_grads.then(|| pick(&backbone_order, &ctx.backbone.named()));
    Ok(BatchOut { pred: pred_value, total: total_value, prompt_grads, backbone_grads })
}

/// A training example: predict the item at `pos` within the user's recent
/// history from everything before it.
#[derive(Clone, Copy, Debug)]
struct TuneExample {
    user: usize,
    pos: usize,
}

pub fn run_tuning(
    backbone: &EbmParams<Tensor>,
    dims: &ModelDims,
    pdims: &PromptDims,
    spec: &SplitSpec,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    dims.validate()?;
    pdims.validate()?;
    if pdims.d != dims.d || pdims.n_layers != dims.n_layers {
        return Err(Error::Config(format!(
            "prompt dims (d = {}, layers = {}) must match the backbone (d = {}, layers = {})",
            pdims.d, pdims.n_layers, dims.d, dims.n_layers
        )));
    }
    let n_behaviors = spec.finetune.n_behaviors();
    let want_stats = UserStatistics::feature_dim(n_behaviors);
    if pdims.stats_dim != want_stats {
        return Err(Error::Config(format!(
            "stats_dim {} does not match the corpus ({} behaviors need {})",
            pdims.stats_dim, n_behaviors, want_stats
        )));
    }
    if dims.n_items != spec.finetune.n_items() || dims.n_behaviors != n_behaviors {
        return Err(Error::Config(format!(
            "model dims ({} items, {} behaviors) do not match the corpus ({}, {})",
            dims.n_items,
            dims.n_behaviors,
            spec.finetune.n_items(),
            n_behaviors
        )));
    }
    // The no-denoise ablation swaps every frequency filter for the identity.
    let mut dims = dims.clone();
    dims.no_denoise |= cfg.no_denoise;
    let dims = &dims;

    let plan = make_prompt_plan(spec, dims, cfg);
    let n_users = spec.finetune.n_users();
    let inputs: Vec<PromptInputs> =
        (0..n_users).map(|u| user_prompt_inputs(spec, &plan, n_behaviors, u)).collect();
    let hists: Vec<Vec<InteractionRecord>> =
        (0..n_users).map(|u| tuning_history(spec, u, cfg.l_seq_tune)).collect();

    // Training inventory: every target-behavior event with preceding context.
    let mut train: Vec<TuneExample> = Vec::new();
    for (user, hist) in hists.iter().enumerate() {
        for pos in 1..hist.len() {
            if hist[pos].behavior == spec.target_behavior {
                train.push(TuneExample { user, pos });
            }
        }
    }
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Invalid(
            "no tuning examples: no user has a target-behavior event with preceding context"
                .into(),
        ));
    }

    // Negatives come from items the user never touched under the target
    // behavior (across both data halves).
    let target_items: Vec<Vec<usize>> = (0..n_users)
        .map(|u| {
            let mut v: Vec<usize> = spec
                .pretrain
                .user_records(u)
                .iter()
                .chain(spec.finetune.user_records(u))
                .filter(|r| r.behavior == spec.target_behavior)
                .map(|r| r.item)
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    // Fixed validation examples: rank the held-out validation item from the
    // history strictly before it.
    let valid_ctxs: Vec<(usize, Vec<InteractionRecord>, usize)> = spec
        .eval_users
        .iter()
        .filter_map(|ev| {
            let vh = spec.valid_history(ev);
            if vh.is_empty() {
                return None;
            }
            let start = vh.len().saturating_sub(cfg.l_seq_tune);
            let item = spec.finetune.user_records(ev.user)[ev.valid_idx].item;
            Some((ev.user, vh[start..].to_vec(), item))
        })
        .collect();
    let valid_items: Vec<TuneItem> = {
        let mut rng = substream(seed, &format!("{}.{}", stream::TUNE, stream::VALID_NEGATIVES));
        valid_ctxs
            .iter()
            .map(|(user, ctx, pos_item)| {
                let neg = sample_negative_item(&mut rng, dims.n_items, &target_items[*user])?;
                Ok(TuneItem { user: *user, ctx, pos_item: *pos_item, neg_item: neg })
            })
            .collect::<Result<_>>()?
    };

    let mut source = match cfg.static_prompt {
        true => PromptSource::Static(
            plan.injected
                .iter()
                .map(|&on| on.then(|| Tensor::zeros(pdims.n_tokens, pdims.d)))
                .collect(),
        ),
        false => PromptSource::Generated(init_prompt(pdims, seed)?),
    };
    let mut live_backbone = backbone.clone();
    let hash_before = backbone_hash(&live_backbone);

    let train_prompts = cfg.trainable != TrainableSet::Nothing;
    let train_backbone = cfg.trainable == TrainableSet::Everything;
    let prompt_shapes: Vec<(usize, usize)> =
        source.named().iter().map(|(_, t)| t.shape()).collect();
    let backbone_shapes: Vec<(usize, usize)> =
        live_backbone.named().iter().map(|(_, t)| t.shape()).collect();
    let all_shapes: Vec<(usize, usize)> =
        prompt_shapes.iter().chain(backbone_shapes.iter()).copied().collect();
    let mut adam = Adam::new(cfg.adam, &all_shapes);
    let n_prompt_slots = prompt_shapes.len();

    let mut curve = Vec::new();
    let mut best_source = source.clone();
    let mut best_backbone = live_backbone.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut rng = substream_indexed(seed, stream::TUNE, epoch as u64);
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut rng);

        let mut pred_sum = 0.0;
        let mut total_sum = 0.0;
        for chunk in shuffled.chunks(cfg.batch_size.max(1)) {
            let items: Vec<TuneItem> = chunk
                .iter()
                .map(|ex| {
                    let hist = &hists[ex.user];
                    let neg =
                        sample_negative_item(&mut rng, dims.n_items, &target_items[ex.user])?;
                    Ok(TuneItem {
                        user: ex.user,
                        ctx: &hist[..ex.pos],
                        pos_item: hist[ex.pos].item,
                        neg_item: neg,
                    })
                })
                .collect::<Result<_>>()?;
            let ctx = TuneCtx {
                backbone: &live_backbone,
                dims,
                pdims,
                plan: &plan,
                inputs: &inputs,
                cfg,
            };
            let out = run_tune_batch(&ctx, &source, &items, train_prompts, train_backbone)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            pred_sum += out.pred * items.len() as f64;
            total_sum += out.total * items.len() as f64;
            if train_prompts || train_backbone {
                adam.begin_step();
                if let Some(grads) = out.prompt_grads {
                    let mut slot = 0;
                    source.for_each_mut(|t| {
                        adam.update(slot, t, &grads[slot]);
                        slot += 1;
                    });
                }
                if let Some(grads) = out.backbone_grads {
                    let mut slot = 0;
                    live_backbone.for_each_mut(|t, _| {
                        adam.update(n_prompt_slots + slot, t, &grads[slot]);
                        slot += 1;
                    });
                }
            }
        }
        let train_pred = pred_sum / shuffled.len() as f64;
        let train_total = total_sum / shuffled.len() as f64;

        let valid_pred = if valid_items.is_empty() {
            f64::NAN
        } else {
            let ctx =
                TuneCtx { backbone: &live_backbone, dims, pdims, plan: &plan, inputs: &inputs, cfg };
            let mut sum = 0.0;
            for chunk in valid_items.chunks(cfg.batch_size.max(1)) {
                let out = run_tune_batch(&ctx, &source, chunk, false, false)?;
                sum += out.pred * chunk.len() as f64;
            }
            sum / valid_items.len() as f64
        };
        curve.push(TuneEpochStats { epoch, train_pred, train_total, valid_pred });
        log::info!(
            "tune epoch {epoch}: train {train_pred:.6} (total {train_total:.6}), valid {valid_pred:.6}"
        );

        // Without validation users every epoch counts as an improvement.
        if valid_pred.is_nan() || valid_pred < best_valid {
            best_valid = valid_pred;
            best_source = source.clone();
            best_backbone = live_backbone.clone();
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if cfg.patience > 0 && bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if !train_backbone && backbone_hash(&live_backbone) != hash_before {
        return Err(Error::Invalid(
            "freeze contract violated: backbone parameters changed during prompt tuning".into(),
        ));
    }

    Ok(TuneOutcome {
        prompts: best_source,
        backbone: best_backbone,
        curve,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        generate_synthetic, make_split_spec, temporal_split, InteractionLog, SplitGranularity,
        SynthConfig,
    };
    use crate::ebm::init_ebm;
    use crate::numerics::grad_check;
    use crate::prompt::coding_rate_value;

    fn toy_dims(d: usize, n_items: usize, n_behaviors: usize) -> (ModelDims, PromptDims) {
        let dims = ModelDims {
            d,
            n_layers: 2,
            k_chunks: 2,
            l_seq: 8,
            l_max: 16,
            n_items,
            n_behaviors,
            ..Default::default()
        };
        let pdims = PromptDims {
            d,
            n_layers: 2,
            n_factors: 2,
            n_tokens: 2,
            attr_vocab: 0,
            attr_slots: 1,
            stats_dim: UserStatistics::feature_dim(n_behaviors),
        };
        (dims, pdims)
    }

    /// Hand-built corpus: each user interacts inside a private item pair so
    /// next-target-item prediction is memorizable.
    fn toy_spec(n_users: usize, reps: usize) -> SplitSpec {
        let mut records = Vec::new();
        for u in 0..n_users {
            let (a, b) = (2 * u, 2 * u + 1);
            for r in 0..reps {
                let t = (4 * r) as i64;
                records.push(InteractionRecord { user: u, item: a, timestamp: t, behavior: 1 });
                records.push(InteractionRecord { user: u, item: a, timestamp: t + 1, behavior: 0 });
                records.push(InteractionRecord { user: u, item: b, timestamp: t + 2, behavior: 1 });
                records.push(InteractionRecord { user: u, item: b, timestamp: t + 3, behavior: 0 });
            }
        }
        let user_orig = (0..n_users as u64).collect();
        let item_orig = (0..2 * n_users as u64).collect();
        let log =
            InteractionLog::from_parts(records, n_users, 2 * n_users, 2, user_orig, item_orig)
                .unwrap();
        let (pre, fine, _) = temporal_split(&log, 0.5, SplitGranularity::PerUser).unwrap();
        make_split_spec(pre, fine, 0).unwrap()
    }

    fn synth_spec(n_users: usize, seed: u64) -> SplitSpec {
        let cfg = SynthConfig {
            n_users,
            n_items: 30,
            n_behaviors: 2,
            seq_len: 14,
            n_latent_interests: 4,
            interests_per_user: 2,
            ..Default::default()
        };
        let log = generate_synthetic(&cfg, seed).unwrap();
        let (pre, fine, _) = temporal_split(&log, 0.5, SplitGranularity::PerUser).unwrap();
        make_split_spec(pre, fine, 0).unwrap()
    }

    #[test]
    fn injection_ops_concat_and_strip_exactly() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        // No tokens: identity, the very same node.
        let same = inject_prompt_rows(&mut tape, None, h);
        assert_eq!(same, h);
        assert_eq!(strip_prompt_rows(&mut tape, same, 0), h);

        let t = tape.leaf(Tensor::from_rows(&[vec![9.0, 8.0], vec![7.0, 6.0]]));
        let x = inject_prompt_rows(&mut tape, Some(t), h);
        let v = tape.value(x).clone();
        assert_eq!(v.shape(), (5, 2));
        assert_eq!(v.row(0), &[9.0, 8.0]);
        assert_eq!(v.row(1), &[7.0, 6.0]);
        assert_eq!(v.row(2), &[1.0, 2.0]);
        assert_eq!(v.row(4), &[5.0, 6.0]);

        let back = strip_prompt_rows(&mut tape, x, 2);
        assert_eq!(tape.value(back).data(), tape.value(h).data());
    }

    #[test]
    fn tune_loss_zero_margin_is_ln_two_and_flags_match() {
        let (_, pdims) = toy_dims(4, 8, 2);
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.9, 0.1]));
        let e = tape.leaf(Tensor::from_vec(1, 4, vec![0.5, 0.5, -0.5, 1.0]));
        let cfg = TuneConfig { lambda: 0.0, ..Default::default() };
        let l = tune_loss(&mut tape, u, e, e, None, &pdims, &cfg);
        let got = tape.value(l).data()[0];
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);

        // lambda = 0 and the no-compactness flag produce identical losses
        // even with banks present.
        let e_bank = tape.leaf(Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.4]; 6]));
        let p_bank = tape.leaf(Tensor::from_rows(&vec![vec![0.5, -0.1, 0.2, 0.0]; 2]));
        let a = tune_loss(&mut tape, u, e, e, Some((e_bank, p_bank)), &pdims, &cfg);
        let flag_cfg = TuneConfig { lambda: 0.01, no_compactness: true, ..Default::default() };
        let b = tune_loss(&mut tape, u, e, e, Some((e_bank, p_bank)), &pdims, &flag_cfg);
        assert_eq!(tape.value(a).data()[0], tape.value(b).data()[0]);
    }

    #[test]
    fn tune_loss_composes_the_prediction_and_coding_rate_oracles() {
        let (_, pdims) = toy_dims(4, 8, 2);
        let cfg = TuneConfig { lambda: 0.01, ..Default::default() };
        let u_row = vec![0.3, -0.2, 0.9, 0.1];
        let p_row = vec![0.5, 0.5, -0.5, 1.0];
        let n_row = vec![-0.1, 0.4, 0.2, -0.6];
        let mut e_rows = Vec::new();
        let mut rng = crate::rng::substream(3, "tune-oracle");
        for _ in 0..6 {
            e_rows.push((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        }
        let p_rows: Vec<Vec<f64>> =
            (0..2).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::from_vec(1, 4, u_row.clone()));
        let ep = tape.leaf(Tensor::from_vec(1, 4, p_row.clone()));
        let en = tape.leaf(Tensor::from_vec(1, 4, n_row.clone()));
        let e_bank = tape.leaf(Tensor::from_rows(&e_rows));
        let p_bank = tape.leaf(Tensor::from_rows(&p_rows));
        let l = tune_loss(&mut tape, u, ep, en, Some((e_bank, p_bank)), &pdims, &cfg);

        let margin: f64 =
            u_row.iter().zip(p_row.iter().zip(&n_row)).map(|(u, (p, n))| u * (p - n)).sum();
        let pred = (1.0 + (-margin).exp()).ln();
        let r_e = coding_rate_value(&Tensor::from_rows(&e_rows), pdims.n_factors, 1.0).unwrap();
        let r_p = coding_rate_value(&Tensor::from_rows(&p_rows), pdims.n_layers, 1.0).unwrap();
        let want = pred - 0.01 * (r_e + r_p);
        let got = tape.value(l).data()[0];
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn budget_counts_freeze_states_and_ablation_closed_form() {
        let (dims, pdims) = toy_dims(8, 20, 3);
        let pdims = PromptDims { stats_dim: UserStatistics::feature_dim(3), ..pdims };
        let backbone = init_ebm(&dims, 5).unwrap();
        let generated = PromptSource::Generated(init_prompt(&pdims, 5).unwrap());

        let frozen = TuneConfig { trainable: TrainableSet::Nothing, ..Default::default() };
        assert_eq!(param_budget(&backbone, &dims, &generated, &frozen).ratio(), 0.0);
        let full = TuneConfig { trainable: TrainableSet::Everything, ..Default::default() };
        assert_eq!(param_budget(&backbone, &dims, &generated, &full).ratio(), 1.0);

        let normal = TuneConfig::default();
        let b = param_budget(&backbone, &dims, &generated, &normal);
        assert_eq!(b.trainable, generated.n_params());
        assert_eq!(b.total, backbone.n_params() + generated.n_params());
        assert!(b.ratio() > 0.0 && b.ratio() < 1.0);

        // All three ablations at once: a plain residual/FFN encoder with one
        // learned prefix. Closed-form census of what remains.
        let cfg = TuneConfig {
            no_denoise: true,
            static_prompt: true,
            first_layer_only: true,
            ..Default::default()
        };
        let static_src = PromptSource::Static(
            cfg.injected_layers(dims.n_layers)
                .iter()
                .map(|&on| on.then(|| Tensor::zeros(pdims.n_tokens, pdims.d)))
                .collect(),
        );
        let got = param_budget(&backbone, &dims, &static_src, &cfg);
        let d = dims.d;
        let tables = dims.n_items * d + dims.l_max * d + dims.n_behaviors * d;
        let mixer = (dims.n_behaviors + 1) * d * d + d;
        let norms = 2 * (2 * d);
        let ffn = (d * 2 * d + 2 * d) + (2 * d * d + d);
        let per_layer = mixer + norms + ffn;
        let prefix = pdims.n_tokens * d;
        assert_eq!(got.total, tables + dims.n_layers * per_layer + prefix);
        assert_eq!(got.trainable, prefix);
    }

    #[test]
    fn zero_step_tuning_equals_manual_zero_prefix_injection() {
        let (dims, pdims) = toy_dims(4, 6, 2);
        let spec = toy_spec(3, 2);
        let backbone = init_ebm(&dims, 11).unwrap();
        let cfg = TuneConfig { epochs: 0, ..Default::default() };
        let out = run_tuning(&backbone, &dims, &pdims, &spec, &cfg, 11).unwrap();

        // Zero steps return the freshly initialized generator (projections
        // zero) and the untouched backbone.
        assert_eq!(out.backbone, backbone);
        match &out.prompts {
            PromptSource::Generated(p) => {
                assert_eq!(*p, init_prompt(&pdims, 11).unwrap());
                for proj in &p.projections {
                    assert!(proj.data().iter().all(|&x| x == 0.0));
                }
            }
            PromptSource::Static(_) => panic!("expected the generated path"),
        }

        // Encoding through the tuned prompts is bit-for-bit the same as
        // injecting explicit all-zero token matrices by hand.
        let plan = make_prompt_plan(&spec, &dims, &cfg);
        let inputs = user_prompt_inputs(&spec, &plan, 2, 0);
        let hist = tuning_history(&spec, 0, cfg.l_seq_tune);
        let prep = prepare_sequence(&hist, dims.l_seq);

        let mut tape = Tape::new();
        let bvars = backbone.to_vars(&mut tape);
        let p = match &out.prompts {
            PromptSource::Generated(p) => p.to_vars(&mut tape),
            PromptSource::Static(_) => unreachable!(),
        };
        let up =
            build_layer_prompts(&mut tape, &PromptVars::Generated(&p), &bvars, &pdims, &plan, &inputs)
                .unwrap();
        let tuned = encode_user(&mut tape, &bvars, &dims, &prep, &up.layers).unwrap();

        let zeros: Vec<Option<Var>> = (0..dims.n_layers)
            .map(|_| Some(tape.leaf(Tensor::zeros(pdims.n_tokens, pdims.d))))
            .collect();
        let manual = encode_user(&mut tape, &bvars, &dims, &prep, &zeros).unwrap();
        assert_eq!(tape.value(tuned).data(), tape.value(manual).data());
    }

    #[test]
    fn backbone_stays_bitwise_frozen_through_tuning() {
        let (dims, pdims) = toy_dims(4, 30, 2);
        let spec = synth_spec(12, 21);
        let backbone = init_ebm(&dims, 21).unwrap();
        let before = backbone_hash(&backbone);
        let cfg = TuneConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let out = run_tuning(&backbone, &dims, &pdims, &spec, &cfg, 21).unwrap();
        assert_eq!(backbone_hash(&out.backbone), before);
        // The prompt side did move.
        match &out.prompts {
            PromptSource::Generated(p) => assert_ne!(*p, init_prompt(&pdims, 21).unwrap()),
            PromptSource::Static(_) => panic!("expected the generated path"),
        }

        // Full-finetune comparison mode moves the backbone too.
        let full = TuneConfig {
            epochs: 2,
            batch_size: 8,
            trainable: TrainableSet::Everything,
            ..Default::default()
        };
        let out = run_tuning(&backbone, &dims, &pdims, &spec, &full, 21).unwrap();
        assert_ne!(backbone_hash(&out.backbone), before);
    }

    #[test]
    fn three_user_memorization_drives_prediction_loss_below_a_tenth() {
        let (dims, pdims) = toy_dims(16, 6, 2);
        let spec = toy_spec(3, 4);
        let backbone = init_ebm(&dims, 31).unwrap();
        let cfg = TuneConfig {
            epochs: 300,
            batch_size: 16,
            patience: 0,
            adam: AdamConfig { lr: 0.02, ..Default::default() },
            ..Default::default()
        };
        let out = run_tuning(&backbone, &dims, &pdims, &spec, &cfg, 31).unwrap();
        let last = out.curve.last().unwrap();
        assert!(
            last.train_pred < 0.1,
            "prompt tuning failed to memorize 3 users: final prediction loss {}",
            last.train_pred
        );
    }

    #[test]
    fn static_and_first_layer_ablations_shape_the_graph() {
        let (dims, pdims) = toy_dims(4, 30, 2);
        let spec = synth_spec(10, 41);
        let backbone = init_ebm(&dims, 41).unwrap();
        let cfg = TuneConfig {
            epochs: 2,
            batch_size: 8,
            static_prompt: true,
            first_layer_only: true,
            ..Default::default()
        };
        let out = run_tuning(&backbone, &dims, &pdims, &spec, &cfg, 41).unwrap();
        match &out.prompts {
            PromptSource::Static(toks) => {
                assert_eq!(toks.len(), dims.n_layers);
                let t0 = toks[0].as_ref().expect("layer 0 must carry tokens");
                assert_eq!(t0.shape(), (pdims.n_tokens, pdims.d));
                assert!(t0.data().iter().any(|&x| x != 0.0), "static tokens should train");
                assert!(toks[1].is_none(), "later layers must not inject");
            }
            PromptSource::Generated(_) => panic!("expected the static path"),
        }
    }

    #[test]
    fn tuning_is_deterministic_and_denoise_flag_changes_the_graph() {
        let (dims, pdims) = toy_dims(4, 30, 2);
        let spec = synth_spec(10, 51);
        let backbone = init_ebm(&dims, 51).unwrap();
        let cfg = TuneConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let a = run_tuning(&backbone, &dims, &pdims, &spec, &cfg, 51).unwrap();
        let b = run_tuning(&backbone, &dims, &pdims, &spec, &cfg, 51).unwrap();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(
            a.curve.last().unwrap().train_total.to_bits(),
            b.curve.last().unwrap().train_total.to_bits()
        );

        let nd = TuneConfig { no_denoise: true, ..cfg.clone() };
        let c = run_tuning(&backbone, &dims, &pdims, &spec, &nd, 51).unwrap();
        assert_ne!(
            a.curve[0].train_pred.to_bits(),
            c.curve[0].train_pred.to_bits(),
            "identity filters must change the loss"
        );
    }

    #[test]
    fn dimension_mismatches_are_config_errors() {
        let (dims, pdims) = toy_dims(4, 6, 2);
        let spec = toy_spec(3, 2);
        let backbone = init_ebm(&dims, 61).unwrap();
        let cfg = TuneConfig { epochs: 0, ..Default::default() };
        let bad_d = PromptDims { d: 8, ..pdims.clone() };
        assert!(matches!(
            run_tuning(&backbone, &dims, &bad_d, &spec, &cfg, 61),
            Err(Error::Config(_))
        ));
        let bad_stats = PromptDims { stats_dim: 3, ..pdims };
        assert!(matches!(
            run_tuning(&backbone, &dims, &bad_stats, &spec, &cfg, 61),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_objective_gradients_match_finite_differences() {
        let (dims, pdims) = toy_dims(4, 6, 2);
        let spec = toy_spec(2, 3);
        let backbone = init_ebm(&dims, 71).unwrap();
        let mut cfg = TuneConfig::default();
        cfg.l_seq_tune = 6;
        let plan = make_prompt_plan(&spec, &dims, &cfg);
        let inputs: Vec<PromptInputs> =
            (0..2).map(|u| user_prompt_inputs(&spec, &plan, 2, u)).collect();
        let hists: Vec<Vec<InteractionRecord>> =
            (0..2).map(|u| tuning_history(&spec, u, cfg.l_seq_tune)).collect();
        let mut prompt = init_prompt(&pdims, 71).unwrap();
        // Nonzero projections so the token path carries gradient signal.
        for (l, proj) in prompt.projections.iter_mut().enumerate() {
            let mut rng = substream_indexed(72, "tune-proj-fill", l as u64);
            *proj = Tensor::from_vec(
                pdims.d,
                pdims.n_tokens * pdims.d,
                (0..pdims.d * pdims.n_tokens * pdims.d).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            );
        }
        let items = vec![
            TuneItem { user: 0, ctx: &hists[0][..2], pos_item: hists[0][2].item, neg_item: 4 },
            TuneItem { user: 1, ctx: &hists[1][..3], pos_item: hists[1][3].item, neg_item: 5 },
        ];

        let source = PromptSource::Generated(prompt);
        let ctx = TuneCtx { backbone: &backbone, dims: &dims, pdims: &pdims, plan: &plan, inputs: &inputs, cfg: &cfg };
        let out = run_tune_batch(&ctx, &source, &items, true, true).unwrap();
        let analytic = out.prompt_grads.unwrap();
        for (g, (name, _)) in out.backbone_grads.unwrap().iter().zip(backbone.named()) {
            assert!(g.all_finite(), "backbone gradient {name} must stay finite");
        }

        let named = source.named();
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        let base: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let mut f = |tensors: &[Tensor]| -> Result<f64> {
            let moved = match &source {
                PromptSource::Generated(p) => {
                    let mut it = tensors.iter();
                    let mut clone = p.clone();
                    clone.for_each_mut(|t, _| *t = it.next().unwrap().clone());
                    PromptSource::Generated(clone)
                }
                PromptSource::Static(_) => unreachable!(),
            };
            let out = run_tune_batch(&ctx, &moved, &items, false, false)?;
            Ok(out.total)
        };
        let report = grad_check(&mut f, &names, &base, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "worst errors:\n{}", report.to_table());
    }
}
