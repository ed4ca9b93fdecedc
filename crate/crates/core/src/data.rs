//! Interaction data: loading, filtering, splitting, per-user statistics, and
//! the synthetic multi-behavior corpus generator.
//!
//! Dense ids everywhere: a log's records reference users/items in
//! [0, n_users) x [0, n_items), with the original ids kept alongside so id
//! maps can be persisted. Records are globally sorted by (user, timestamp),
//! ties keeping input order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub behavior: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    records: Vec<InteractionRecord>,
    n_users: usize,
    n_items: usize,
    n_behaviors: usize,
    /// dense id -> original id, persisted as the id-map sidecar.
    user_orig: Vec<u64>,
    item_orig: Vec<u64>,
    /// dense user -> (start, end) range in `records`.
    user_index: Vec<(usize, usize)>,
}

impl InteractionLog {
    pub fn from_parts(
        mut records: Vec<InteractionRecord>,
        n_users: usize,
        n_items: usize,
        n_behaviors: usize,
        user_orig: Vec<u64>,
        item_orig: Vec<u64>,
    ) -> Result<Self> {
        if user_orig.len() != n_users || item_orig.len() != n_items {
            return Err(Error::Invalid("id map length does not match id space".into()));
        }
        for r in &records {
            if r.user >= n_users {
                return Err(Error::Bounds { table: "users".into(), what: "user".into(), index: r.user, bound: n_users });
            }
            if r.item >= n_items {
                return Err(Error::Bounds { table: "items".into(), what: "item".into(), index: r.item, bound: n_items });
            }
            if r.behavior >= n_behaviors {
                return Err(Error::Schema(format!(
                    "unknown behavior index {} (expected < {n_behaviors})",
                    r.behavior
                )));
            }
        }
        records.sort_by(|a, b| (a.user, a.timestamp).cmp(&(b.user, b.timestamp)));
        let user_index = build_user_index(&records, n_users);
        Ok(InteractionLog { records, n_users, n_items, n_behaviors, user_orig, item_orig, user_index })
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_behaviors(&self) -> usize {
        self.n_behaviors
    }

    pub fn user_orig(&self) -> &[u64] {
        &self.user_orig
    }

    pub fn item_orig(&self) -> &[u64] {
        &self.item_orig
    }

    pub fn user_records(&self, user: usize) -> &[InteractionRecord] {
        let (s, e) = self.user_index[user];
        &self.records[s..e]
    }

    /// Dense item ids the user touched under any behavior.
    pub fn items_of_user(&self, user: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.user_records(user).iter().map(|r| r.item).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

fn build_user_index(records: &[InteractionRecord], n_users: usize) -> Vec<(usize, usize)> {
    let mut index = vec![(0usize, 0usize); n_users];
    let mut i = 0;
    while i < records.len() {
        let u = records[i].user;
        let start = i;
        while i < records.len() && records[i].user == u {
            i += 1;
        }
        index[u] = (start, i);
    }
    index
}

// ---------------------------------------------------------------------------
// TSV loading
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    User,
    Item,
    Time,
    Behavior,
}

#[derive(Clone, Debug)]
pub struct TsvSchema {
    /// Meaning of each of the four columns, in file order.
    pub columns: [Column; 4],
    /// When set, behavior indices must be < this; otherwise inferred as max+1.
    pub n_behaviors: Option<usize>,
}

impl Default for TsvSchema {
    fn default() -> Self {
        TsvSchema { columns: [Column::User, Column::Item, Column::Time, Column::Behavior], n_behaviors: None }
    }
}

impl TsvSchema {
    fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for c in self.columns {
            let i = c as usize;
            if seen[i] {
                return Err(Error::Schema(format!("duplicate column {c:?} in schema")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Load a whitespace/tab-separated interaction file with 4 integer columns.
/// A first line with no integer fields is treated as an optional header.
/// User and item ids are densified in ascending original-id order.
pub fn load_interactions(path: &Path, schema: &TsvSchema) -> Result<InteractionLog> {
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    struct Raw {
        user: u64,
        item: u64,
        timestamp: i64,
        behavior: i64,
    }
    let mut raw: Vec<Raw> = Vec::new();
    let mut first_content_line = true;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if first_content_line {
            first_content_line = false;
            if fields.iter().all(|f| f.parse::<i64>().is_err()) {
                continue; // header
            }
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let mut parsed = [0i64; 4];
        for (i, f) in fields.iter().enumerate() {
            parsed[i] = f.parse::<i64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("column {} is not an integer: {f:?}", i + 1),
            })?;
        }
        let mut rec = Raw { user: 0, item: 0, timestamp: 0, behavior: 0 };
        for (i, c) in schema.columns.iter().enumerate() {
            match c {
                Column::User => {
                    rec.user = u64::try_from(parsed[i]).map_err(|_| Error::Parse {
                        path: path.into(),
                        line: lineno + 1,
                        msg: format!("negative user id {}", parsed[i]),
                    })?;
                }
                Column::Item => {
                    rec.item = u64::try_from(parsed[i]).map_err(|_| Error::Parse {
                        path: path.into(),
                        line: lineno + 1,
                        msg: format!("negative item id {}", parsed[i]),
                    })?;
                }
                Column::Time => rec.timestamp = parsed[i],
                Column::Behavior => rec.behavior = parsed[i],
            }
        }
        if rec.behavior < 0 {
            return Err(Error::Schema(format!("negative behavior index at line {}", lineno + 1)));
        }
        raw.push(rec);
    }
    if raw.is_empty() {
        return Err(Error::Invalid(format!("no interaction records in {}", path.display())));
    }

    let mut user_ids: Vec<u64> = raw.iter().map(|r| r.user).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut item_ids: Vec<u64> = raw.iter().map(|r| r.item).collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let user_map: BTreeMap<u64, usize> = user_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let item_map: BTreeMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let max_behavior = raw.iter().map(|r| r.behavior as usize).max().unwrap_or(0);
    let n_behaviors = match schema.n_behaviors {
        Some(n) => {
            if max_behavior >= n {
                return Err(Error::Schema(format!(
                    "unknown behavior index {max_behavior} (schema declares {n} behaviors)"
                )));
            }
            n
        }
        None => max_behavior + 1,
    };

    let records: Vec<InteractionRecord> = raw
        .iter()
        .map(|r| InteractionRecord {
            user: user_map[&r.user],
            item: item_map[&r.item],
            timestamp: r.timestamp,
            behavior: r.behavior as usize,
        })
        .collect();
    InteractionLog::from_parts(records, user_ids.len(), item_ids.len(), n_behaviors, user_ids, item_ids)
}

/// Write a log back out as a 4-column TSV using original ids
/// (user, item, timestamp, behavior).
pub fn save_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in &log.records {
        buf.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            log.user_orig[r.user], log.item_orig[r.item], r.timestamp, r.behavior
        ));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Persist the original->dense id maps as sidecar files (one mapping per
/// line: `<original>\t<dense>`).
pub fn write_idmaps(log: &InteractionLog, dir: &Path) -> Result<()> {
    for (name, ids) in [("users.idmap", &log.user_orig), ("items.idmap", &log.item_orig)] {
        let path = dir.join(name);
        let mut buf = String::new();
        for (dense, orig) in ids.iter().enumerate() {
            buf.push_str(&format!("{orig}\t{dense}\n"));
        }
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Filtering and splitting
// ---------------------------------------------------------------------------

/// Iteratively drop users and items with fewer than `min_count` records until
/// a fixpoint, then re-densify ids (original ids are preserved through the
/// rename). The behavior count is kept even if a behavior disappears.
pub fn filter_min_interactions(log: &InteractionLog, min_count: usize) -> InteractionLog {
    let mut keep: Vec<InteractionRecord> = log.records.clone();
    loop {
        let mut user_cnt = vec![0usize; log.n_users];
        let mut item_cnt = vec![0usize; log.n_items];
        for r in &keep {
            user_cnt[r.user] += 1;
            item_cnt[r.item] += 1;
        }
        let before = keep.len();
        keep.retain(|r| user_cnt[r.user] >= min_count && item_cnt[r.item] >= min_count);
        if keep.len() == before {
            break;
        }
    }
    // Re-densify in ascending old-dense order (stable under record order).
    let mut user_seen = vec![false; log.n_users];
    let mut item_seen = vec![false; log.n_items];
    for r in &keep {
        user_seen[r.user] = true;
        item_seen[r.item] = true;
    }
    let mut user_new = vec![usize::MAX; log.n_users];
    let mut user_orig = Vec::new();
    for (old, seen) in user_seen.iter().enumerate() {
        if *seen {
            user_new[old] = user_orig.len();
            user_orig.push(log.user_orig[old]);
        }
    }
    let mut item_new = vec![usize::MAX; log.n_items];
    let mut item_orig = Vec::new();
    for (old, seen) in item_seen.iter().enumerate() {
        if *seen {
            item_new[old] = item_orig.len();
            item_orig.push(log.item_orig[old]);
        }
    }
    let records: Vec<InteractionRecord> = keep
        .into_iter()
        .map(|r| InteractionRecord { user: user_new[r.user], item: item_new[r.item], ..r })
        .collect();
    let n_users = user_orig.len();
    let n_items = item_orig.len();
    InteractionLog::from_parts(records, n_users, n_items, log.n_behaviors, user_orig, item_orig)
        .expect("filtered log is structurally valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitGranularity {
    PerUser,
    Global,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitReport {
    pub n_users: usize,
    pub n_records_pretrain: usize,
    pub n_records_finetune: usize,
    /// Users whose fine-tune half came out empty (kept entirely in pretrain).
    pub flagged_users: Vec<usize>,
}

/// ceil(ratio * n) with protection against float slop on exact products.
fn ceil_ratio(ratio: f64, n: usize) -> usize {
    let r = ratio * n as f64;
    let rounded = r.round();
    let v = if (r - rounded).abs() < 1e-9 { rounded } else { r.ceil() };
    (v as usize).min(n)
}

/// Chronological split: the first ceil(ratio*n) records go to the pretrain
/// half. Per-user by default; `Global` cuts on the global timestamp order
/// instead. Both halves keep the parent's id space.
pub fn temporal_split(
    log: &InteractionLog,
    ratio: f64,
    granularity: SplitGranularity,
) -> Result<(InteractionLog, InteractionLog, SplitReport)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut pre: Vec<InteractionRecord> = Vec::new();
    let mut fine: Vec<InteractionRecord> = Vec::new();
    match granularity {
        SplitGranularity::PerUser => {
            for u in 0..log.n_users {
                let recs = log.user_records(u);
                let cut = ceil_ratio(ratio, recs.len());
                pre.extend_from_slice(&recs[..cut]);
                fine.extend_from_slice(&recs[cut..]);
            }
        }
        SplitGranularity::Global => {
            let mut order: Vec<usize> = (0..log.records.len()).collect();
            order.sort_by_key(|&i| (log.records[i].timestamp, i));
            let cut = ceil_ratio(ratio, order.len());
            let mut is_pre = vec![false; order.len()];
            for &i in &order[..cut] {
                is_pre[i] = true;
            }
            for (i, r) in log.records.iter().enumerate() {
                if is_pre[i] {
                    pre.push(*r);
                } else {
                    fine.push(*r);
                }
            }
        }
    }
    let mk = |records: Vec<InteractionRecord>| {
        InteractionLog::from_parts(
            records,
            log.n_users,
            log.n_items,
            log.n_behaviors,
            log.user_orig.clone(),
            log.item_orig.clone(),
        )
        .expect("split halves share a valid id space")
    };
    let pre_log = mk(pre);
    let fine_log = mk(fine);
    let flagged: Vec<usize> =
        (0..log.n_users).filter(|&u| fine_log.user_records(u).is_empty()).collect();
    let report = SplitReport {
        n_users: log.n_users,
        n_records_pretrain: pre_log.records.len(),
        n_records_finetune: fine_log.records.len(),
        flagged_users: flagged,
    };
    Ok((pre_log, fine_log, report))
}

// ---------------------------------------------------------------------------
// Leave-one-out evaluation split
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalUser {
    pub user: usize,
    /// Index into the user's fine-tune records of the held-out test target.
    pub test_idx: usize,
    /// Index of the validation target (the second-to-last target interaction).
    pub valid_idx: usize,
}

#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub pretrain: InteractionLog,
    pub finetune: InteractionLog,
    pub target_behavior: usize,
    pub eval_users: Vec<EvalUser>,
    /// Users excluded for lacking two target-behavior interactions.
    pub n_excluded: usize,
    eval_index: BTreeMap<usize, usize>,
}

impl SplitSpec {
    pub fn eval_user(&self, user: usize) -> Option<&EvalUser> {
        self.eval_index.get(&user).map(|&i| &self.eval_users[i])
    }

    /// Fine-tune records available for training/encoding for this user:
    /// everything before the test target, minus the validation target.
    /// Non-eval users contribute their full fine-tune history.
    pub fn train_records(&self, user: usize) -> Vec<InteractionRecord> {
        let recs = self.finetune.user_records(user);
        match self.eval_user(user) {
            Some(ev) => recs[..ev.test_idx]
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != ev.valid_idx)
                .map(|(_, r)| *r)
                .collect(),
            None => recs.to_vec(),
        }
    }

    /// History strictly before the validation target (for validation ranking).
    pub fn valid_history(&self, ev: &EvalUser) -> Vec<InteractionRecord> {
        self.finetune.user_records(ev.user)[..ev.valid_idx].to_vec()
    }

    /// The same split restricted to a subset of its evaluation users.
    pub fn with_eval_users(&self, eval_users: Vec<EvalUser>) -> SplitSpec {
        let eval_index = eval_users.iter().enumerate().map(|(i, ev)| (ev.user, i)).collect();
        SplitSpec {
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            target_behavior: self.target_behavior,
            eval_users,
            n_excluded: self.n_excluded,
            eval_index,
        }
    }

    /// Items of a user across both halves (used to exclude eval negatives).
    pub fn interacted_items(&self, user: usize) -> Vec<usize> {
        let mut v = self.pretrain.items_of_user(user);
        v.extend(self.finetune.items_of_user(user));
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Build the leave-one-out spec: per user the last target-behavior interaction
/// becomes the test item and the second-to-last the validation item; users
/// without two target interactions are excluded (counted).
pub fn make_split_spec(
    pretrain: InteractionLog,
    finetune: InteractionLog,
    target_behavior: usize,
) -> Result<SplitSpec> {
    if target_behavior >= finetune.n_behaviors {
        return Err(Error::Config(format!(
            "target behavior {target_behavior} out of range (n_behaviors = {})",
            finetune.n_behaviors
        )));
    }
    let mut eval_users = Vec::new();
    let mut n_excluded = 0;
    for u in 0..finetune.n_users() {
        let recs = finetune.user_records(u);
        let targets: Vec<usize> =
            recs.iter().enumerate().filter(|(_, r)| r.behavior == target_behavior).map(|(i, _)| i).collect();
        if targets.len() >= 2 {
            eval_users.push(EvalUser {
                user: u,
                test_idx: targets[targets.len() - 1],
                valid_idx: targets[targets.len() - 2],
            });
        } else {
            n_excluded += 1;
        }
    }
    let eval_index = eval_users.iter().enumerate().map(|(i, e)| (e.user, i)).collect();
    Ok(SplitSpec { pretrain, finetune, target_behavior, eval_users, n_excluded, eval_index })
}

// ---------------------------------------------------------------------------
// Per-user statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct UserStatistics {
    /// Interaction count per behavior; sums to the record count.
    pub counts: Vec<usize>,
    /// Conversion ratios for ordered pairs (b1, b2), b1 != b2, lexicographic:
    /// count(b2)/count(b1), with 0 as the sentinel when count(b1) == 0.
    pub ratios: Vec<f64>,
    pub total_length: usize,
}

pub fn user_statistics(records: &[InteractionRecord], n_behaviors: usize) -> UserStatistics {
    let mut counts = vec![0usize; n_behaviors];
    for r in records {
        counts[r.behavior] += 1;
    }
    let mut ratios = Vec::with_capacity(n_behaviors * n_behaviors.saturating_sub(1));
    for b1 in 0..n_behaviors {
        for b2 in 0..n_behaviors {
            if b1 == b2 {
                continue;
            }
            let r = if counts[b1] > 0 { counts[b2] as f64 / counts[b1] as f64 } else { 0.0 };
            ratios.push(r);
        }
    }
    UserStatistics { counts, ratios, total_length: records.len() }
}

impl UserStatistics {
    /// Flat feature layout: per-behavior counts, conversion ratios, total.
    pub fn feature_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        v.extend_from_slice(&self.ratios);
        v.push(self.total_length as f64);
        v
    }

    pub fn feature_dim(n_behaviors: usize) -> usize {
        n_behaviors * n_behaviors + 1
    }
}

/// Corpus-level standardizer (population mean/std, std floored at 1 so sparse
/// constant features cannot blow up the inputs).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(vectors: &[Vec<f64>]) -> Standardizer {
        assert!(!vectors.is_empty(), "standardizer needs at least one vector");
        let dim = vectors[0].len();
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(1.0)).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.mean.len(), "standardizer dimension mismatch");
        v.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Synthetic multi-behavior corpus: items are partitioned into latent interest
/// clusters; each user draws interactions from their assigned clusters with
/// behavior escalation (each event escalates to the next behavior level with
/// `escalation_prob`, reusing the same item); a `noise_rate` fraction of
/// level-0 ("click") records then has its item replaced uniformly at random.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_behaviors: usize,
    /// Events generated per user (timestamps 0..seq_len).
    pub seq_len: usize,
    pub n_latent_interests: usize,
    pub interests_per_user: usize,
    pub escalation_prob: f64,
    pub noise_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            n_items: 1000,
            n_behaviors: 4,
            seq_len: 30,
            n_latent_interests: 12,
            interests_per_user: 2,
            escalation_prob: 0.7,
            noise_rate: 0.2,
        }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<InteractionLog> {
    if cfg.n_items < cfg.n_latent_interests || cfg.n_latent_interests == 0 {
        return Err(Error::Config(format!(
            "need n_items >= n_latent_interests >= 1, got {} items, {} interests",
            cfg.n_items, cfg.n_latent_interests
        )));
    }
    if cfg.n_users == 0 || cfg.seq_len == 0 || cfg.n_behaviors == 0 {
        return Err(Error::Config("synthetic corpus dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.noise_rate) || !(0.0..=1.0).contains(&cfg.escalation_prob) {
        return Err(Error::Config("noise_rate and escalation_prob must lie in [0, 1]".into()));
    }
    let interests_per_user = cfg.interests_per_user.clamp(1, cfg.n_latent_interests);

    // Cluster c owns the contiguous item range [bounds[c], bounds[c+1]).
    let k = cfg.n_latent_interests;
    let bounds: Vec<usize> = (0..=k).map(|c| c * cfg.n_items / k).collect();

    let mut records = Vec::with_capacity(cfg.n_users * cfg.seq_len);
    for u in 0..cfg.n_users {
        let mut rng_clean = rng::substream_indexed(seed, "synth-user", u as u64);
        let mut interests: Vec<usize> = Vec::with_capacity(interests_per_user);
        while interests.len() < interests_per_user {
            let c = rng_clean.gen_range(0..k);
            if !interests.contains(&c) {
                interests.push(c);
            }
        }
        let mut events: Vec<(usize, usize)> = Vec::with_capacity(cfg.seq_len);
        while events.len() < cfg.seq_len {
            let c = interests[rng_clean.gen_range(0..interests.len())];
            let item = rng_clean.gen_range(bounds[c]..bounds[c + 1]);
            events.push((item, 0));
            let mut level = 0;
            while level + 1 < cfg.n_behaviors
                && events.len() < cfg.seq_len
                && rng_clean.gen_range(0.0..1.0) < cfg.escalation_prob
            {
                level += 1;
                events.push((item, level));
            }
        }
        // Noise pass on its own stream: the clean skeleton (and every draw for
        // it) is identical across noise_rate values for a fixed seed.
        let mut rng_noise = rng::substream_indexed(seed, "synth-noise", u as u64);
        for (t, (item, behavior)) in events.iter_mut().enumerate() {
            if *behavior == 0 {
                let coin: f64 = rng_noise.gen_range(0.0..1.0);
                let replacement = rng_noise.gen_range(0..cfg.n_items);
                if coin < cfg.noise_rate {
                    *item = replacement;
                }
            }
            records.push(InteractionRecord { user: u, item: *item, timestamp: t as i64, behavior: *behavior });
        }
    }
    let user_orig: Vec<u64> = (0..cfg.n_users as u64).collect();
    let item_orig: Vec<u64> = (0..cfg.n_items as u64).collect();
    InteractionLog::from_parts(records, cfg.n_users, cfg.n_items, cfg.n_behaviors, user_orig, item_orig)
}
