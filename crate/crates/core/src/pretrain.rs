//! Denoising pre-training of the backbone.
//!
//! Every position of every user's sequence (past a minimum context) is a
//! training example: encode the prefix, then push the observed item above a
//! sampled negative item and the observed behavior above a sampled negative
//! behavior, both through a softplus margin loss. The last position per user
//! is held out for validation: its item is ranked against a fixed set of
//! sampled negatives, and the summed NDCG@10 + NDCG@20 over those users
//! drives early stopping and best-snapshot selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape, Var};
use crate::data::InteractionLog;
use crate::ebm::{encode_user, init_ebm, EbmParams, ModelDims};
use crate::embedding::prepare_sequence;
use crate::error::{Error, Result};
use crate::numerics::softplus;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, substream_indexed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Minimum prefix length before a position becomes a training example.
    pub min_context: usize,
    /// Epochs without validation improvement before stopping (0 disables).
    pub patience: usize,
    /// Negatives ranked against each held-out item during validation
    /// (capped at the user's count of never-interacted items).
    pub valid_negatives: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1000,
            batch_size: 128,
            min_context: 4,
            patience: 20,
            valid_negatives: 100,
            adam: AdamConfig::default(),
        }
    }
}

/// One (user, position) example: the prefix before `pos` is the context, the
/// record at `pos` is the prediction target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub user: usize,
    pub pos: usize,
}

/// Uniform item outside the (sorted) exclusion list, by rejection.
pub fn sample_negative_item(
    rng: &mut impl Rng,
    n_items: usize,
    excluded_sorted: &[usize],
) -> Result<usize> {
    if excluded_sorted.len() >= n_items {
        return Err(Error::Invalid(format!(
            "cannot sample a negative: all {n_items} items are excluded"
        )));
    }
    loop {
        let v = rng.gen_range(0..n_items);
        if excluded_sorted.binary_search(&v).is_err() {
            return Ok(v);
        }
    }
}

/// Uniform behavior other than the observed one; None when there is only one
/// behavior (no contrast exists).
pub fn sample_negative_behavior(
    rng: &mut impl Rng,
    n_behaviors: usize,
    observed: usize,
) -> Option<usize> {
    if n_behaviors < 2 {
        return None;
    }
    let draw = rng.gen_range(0..n_behaviors - 1);
    Some(if draw >= observed { draw + 1 } else { draw })
}

/// Scalar mirror of the example loss: softplus(-item margin) plus
/// softplus(-behavior margin) when a behavior contrast exists.
pub fn margin_loss(item_margin: f64, behavior_margin: Option<f64>) -> f64 {
    softplus(-item_margin) + behavior_margin.map_or(0.0, |m| softplus(-m))
}

/// Negatives drawn for one example.
#[derive(Clone, Copy, Debug)]
pub struct Negatives {
    pub item: usize,
    pub behavior: Option<usize>,
}

/// Build one example's loss on the tape.
pub fn example_loss(
    tape: &mut Tape,
    vars: &EbmParams<Var>,
    dims: &ModelDims,
    log: &InteractionLog,
    ex: TrainingExample,
    negs: Negatives,
) -> Result<Var> {
    let recs = log.user_records(ex.user);
    let target = recs[ex.pos];
    let prep = prepare_sequence(&recs[..ex.pos], dims.l_seq);
    let u = encode_user(tape, vars, dims, &prep, &[])?;

    let e_pos = tape.gather_rows(vars.item, &[target.item]);
    let e_neg = tape.gather_rows(vars.item, &[negs.item]);
    let diff = tape.sub(e_pos, e_neg);
    let item_margin = tape.dot(u, diff);
    let neg_margin = tape.scale(item_margin, -1.0);
    let loss = tape.softplus(neg_margin);

    match negs.behavior {
        Some(nb) => {
            let b_pos = tape.gather_rows(vars.behavior, &[target.behavior]);
            let b_neg = tape.gather_rows(vars.behavior, &[nb]);
            let bdiff = tape.sub(b_pos, b_neg);
            let b_margin = tape.dot(u, bdiff);
            let neg_b = tape.scale(b_margin, -1.0);
            let b_loss = tape.softplus(neg_b);
            Ok(tape.add(loss, b_loss))
        }
        None => Ok(loss),
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NDCG@10 + NDCG@20 of the held-out item among sampled negatives,
    /// averaged over validation users (higher is better).
    pub valid_ndcg: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Best-validation snapshot of the backbone.
    pub params: EbmParams<Tensor>,
    /// Optimizer state at the same snapshot point, so a checkpoint resumes
    /// from exactly the parameters it stores.
    pub optimizer: Adam,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean loss over a batch; optionally also the gradients in parameter order.
fn run_batch(
    params: &EbmParams<Tensor>,
    dims: &ModelDims,
    log: &InteractionLog,
    batch: &[(TrainingExample, Negatives)],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let mut order = Vec::new();
    let vars = params.map(&mut |t, _| {
        let v = tape.leaf(t.clone());
        order.push(v);
        v
    });
    let mut total: Option<Var> = None;
    for &(ex, negs) in batch {
        let l = example_loss(&mut tape, &vars, dims, log, ex, negs)?;
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(mean).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {value}")));
    }
    if !want_grads {
        return Ok((value, None));
    }
    let grads = backward(&tape, mean);
    let named = params.named();
    let g = order
        .iter()
        .zip(named.iter())
        .map(|(v, (_, t))| grads.get_or_zeros(*v, t.shape()))
        .collect();
    Ok((value, Some(g)))
}

pub fn run_pretraining(
    log: &InteractionLog,
    dims: &ModelDims,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    dims.validate()?;
    if dims.n_items != log.n_items() || dims.n_behaviors != log.n_behaviors() {
        return Err(Error::Config(format!(
            "model dims ({} items, {} behaviors) do not match the corpus ({}, {})",
            dims.n_items,
            dims.n_behaviors,
            log.n_items(),
            log.n_behaviors()
        )));
    }

    let mut params = init_ebm(dims, seed)?;

    // Example inventory: last eligible position per user is validation.
    let min_pos = cfg.min_context.max(1);
    let mut train: Vec<TrainingExample> = Vec::new();
    let mut valid: Vec<TrainingExample> = Vec::new();
    for user in 0..log.n_users() {
        let n = log.user_records(user).len();
        if n > min_pos {
            valid.push(TrainingExample { user, pos: n - 1 });
            train.extend((min_pos..n - 1).map(|pos| TrainingExample { user, pos }));
        }
    }
    if train.is_empty() {
        return Err(Error::Invalid(format!(
            "no pretraining examples: every user is shorter than min_context + 2 = {}",
            min_pos + 2
        )));
    }
    let exclusions: Vec<Vec<usize>> = (0..log.n_users()).map(|u| log.items_of_user(u)).collect();

    // Validation negatives are fixed once (one substream per user) so epoch
    // scores stay comparable across epochs and across runs.
    let valid_sets: Vec<(TrainingExample, Vec<usize>)> = valid
        .iter()
        .map(|&ex| {
            let negs = sample_valid_negatives(
                seed,
                ex.user,
                dims.n_items,
                &exclusions[ex.user],
                cfg.valid_negatives,
            );
            (ex, negs)
        })
        .collect();

    let shapes: Vec<(usize, usize)> = params.named().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = Adam::new(cfg.adam, &shapes);

    let mut curve = Vec::new();
    let mut best_params = params.clone();
    let mut best_adam = adam.clone();
    let mut best_valid = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut rng = substream_indexed(seed, stream::PRETRAIN, epoch as u64);
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in shuffled.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(TrainingExample, Negatives)> = chunk
                .iter()
                .map(|&ex| {
                    let target = log.user_records(ex.user)[ex.pos];
                    let item = sample_negative_item(&mut rng, dims.n_items, &exclusions[ex.user])?;
                    let behavior =
                        sample_negative_behavior(&mut rng, dims.n_behaviors, target.behavior);
                    Ok((ex, Negatives { item, behavior }))
                })
                .collect::<Result<_>>()?;
            let (value, grads) = run_batch(&params, dims, log, &batch, true)?;
            loss_sum += value * batch.len() as f64;
            let grads = grads.expect("training batch requested gradients");
            adam.begin_step();
            let mut slot = 0;
            params.for_each_mut(|t, _| {
                adam.update(slot, t, &grads[slot]);
                slot += 1;
            });
        }
        let train_loss = loss_sum / shuffled.len() as f64;

        let valid_ndcg = validation_ndcg(&params, dims, log, &valid_sets)?;
        curve.push(EpochStats { epoch, train_loss, valid_ndcg });
        log_epoch(epoch, train_loss, valid_ndcg);

        if valid_ndcg > best_valid {
            best_valid = valid_ndcg;
            best_params = params.clone();
            best_adam = adam.clone();
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

    Ok(PretrainOutcome {
        params: best_params,
        optimizer: best_adam,
        curve,
        best_epoch,
        stopped_early,
    })
}

/// Distinct items the user never interacted with, drawn from a per-user
/// substream. Asking for more than exist caps at the eligible count, so tiny
/// corpora still validate (with an easier ranking task).
fn sample_valid_negatives(
    seed: u64,
    user: usize,
    n_items: usize,
    excluded_sorted: &[usize],
    want: usize,
) -> Vec<usize> {
    let eligible = n_items - excluded_sorted.len();
    let want = want.min(eligible);
    let mut rng = substream_indexed(seed, stream::VALID_NEGATIVES, user as u64);
    let mut chosen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let v = rng.gen_range(0..n_items);
        if excluded_sorted.binary_search(&v).is_err() && chosen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Mean NDCG@10 + NDCG@20 of each held-out item ranked against its fixed
/// negatives, under the current parameters (forward passes only).
fn validation_ndcg(
    params: &EbmParams<Tensor>,
    dims: &ModelDims,
    log: &InteractionLog,
    valid_sets: &[(TrainingExample, Vec<usize>)],
) -> Result<f64> {
    let mut sum = 0.0;
    for (ex, negs) in valid_sets {
        let recs = log.user_records(ex.user);
        let target = recs[ex.pos].item;
        let mut tape = Tape::new();
        let vars = params.to_vars(&mut tape);
        let prep = prepare_sequence(&recs[..ex.pos], dims.l_seq);
        let enc = encode_user(&mut tape, &vars, dims, &prep, &[])?;
        let u = tape.value(enc);

        let mut candidates = negs.clone();
        candidates.push(target);
        let ranked = crate::eval::rank_candidates(&u, &candidates, &params.item)?;
        let rank = 1 + ranked
            .iter()
            .position(|&v| v == target)
            .expect("the held-out item is always a candidate");
        sum += crate::eval::hr_ndcg_at_k(rank, 10).1 + crate::eval::hr_ndcg_at_k(rank, 20).1;
    }
    Ok(sum / valid_sets.len() as f64)
}

fn log_epoch(epoch: usize, train: f64, valid: f64) {
    log::info!("pretrain epoch {epoch}: train loss {train:.6}, valid NDCG {valid:.6}");
}
