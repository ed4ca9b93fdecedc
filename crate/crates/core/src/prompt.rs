//! Customized prompt generation.
//!
//! Three per-user information vectors — embedded profile attributes through
//! an MLP, standardized interaction statistics through an MLP, and a GRU
//! summary of the per-behavior item sequences — are stacked into Q_u. The
//! prompt factorized gate (PFG) attention-pools Q_u into N factors per layer
//! plus N shared factors, gates each layer's 2N factors into a pre-projection
//! prompt p_l, and projects p_l into that layer's C injected tokens. The
//! projections start at zero, so freshly initialized prompts inject exactly
//! nothing. A coding-rate term over the factor bank and prompt matrix keeps
//! the learned prompts from collapsing onto each other.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cholesky, Tape, Var};
use crate::ebm::{impl_visits, table_init, xavier, EbmParams, Linear};
use crate::error::{Error, Result};
use crate::rng::init_stream;
use crate::tensor::{matmul_nt, Tensor};

// ---------------------------------------------------------------------------
// Dimensions and parameters
// ---------------------------------------------------------------------------

/// Number of stacked prompt-information vectors in Q_u (attributes,
/// statistics, behavior summary).
pub const N_INFO: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptDims {
    /// Embedding width; must match the backbone.
    pub d: usize,
    /// Backbone layer count (one token matrix per layer).
    pub n_layers: usize,
    /// Factors per group (N).
    pub n_factors: usize,
    /// Prompt tokens injected per layer (C).
    pub n_tokens: usize,
    /// Attribute vocabulary size (0 when the corpus carries no profile
    /// attributes; the learned default token then feeds the MLP).
    pub attr_vocab: usize,
    /// Attribute slots per user.
    pub attr_slots: usize,
    /// Statistics feature dimension (n_behaviors^2 + 1).
    pub stats_dim: usize,
}

impl Default for PromptDims {
    fn default() -> Self {
        PromptDims {
            d: 32,
            n_layers: 2,
            n_factors: 8,
            n_tokens: 8,
            attr_vocab: 0,
            attr_slots: 1,
            stats_dim: 0,
        }
    }
}

impl PromptDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_factors == 0 || self.n_tokens == 0 || self.stats_dim == 0 {
            return Err(Error::Config(format!(
                "prompt dims must be positive: d = {}, n_factors = {}, n_tokens = {}, stats_dim = {}",
                self.d, self.n_factors, self.n_tokens, self.stats_dim
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("prompt generation needs at least one layer".into()));
        }
        if self.attr_slots == 0 {
            return Err(Error::Config("attr_slots must be at least 1".into()));
        }
        Ok(())
    }

    fn attr_input_dim(&self) -> usize {
        self.attr_slots * self.d
    }
}

/// Two-layer MLP with GELU between the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

/// Standard GRU cell, weights stored input x output:
///   z = sigmoid(x Wz + h Uz + bz)
///   r = sigmoid(x Wr + h Ur + br)
///   c = tanh(x Wh + (r * h) Uh + bh)
///   h' = (1 - z) * h + z * c
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams<T> {
    pub wz: T,
    pub uz: T,
    pub bz: T,
    pub wr: T,
    pub ur: T,
    pub br: T,
    pub wh: T,
    pub uh: T,
    pub bh: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptParams<T> {
    /// Attribute embedding table (attr_vocab rows; a single placeholder row
    /// when the corpus has no attributes).
    pub attr_embed: T,
    /// Learned stand-in for a missing attribute profile, at MLP-input width.
    pub attr_default: T,
    pub attr_mlp: Mlp2<T>,
    pub stats_mlp: Mlp2<T>,
    pub gru: GruParams<T>,
    /// Factor score vectors: n_layers + 1 tensors of N x d (layer groups
    /// first, the shared group last). Row n scores factor (g, n).
    pub scores: Vec<T>,
    /// Per-layer gate over the 2N concatenated factors: (2N d) x 2N.
    pub gates: Vec<T>,
    /// Per-layer token projection d -> (C d); starts at zero.
    pub projections: Vec<T>,
}

impl_visits!(GruParams, wz, uz, bz, wr, ur, br, wh, uh, bh);

impl<T> Mlp2<T> {
    pub(crate) fn map_nested<'a, U>(
        &'a self,
        path: &str,
        f: &mut impl FnMut(&'a T, &str) -> U,
    ) -> Mlp2<U> {
        Mlp2 {
            l1: self.l1.map_at(&format!("{path}.l1"), f),
            l2: self.l2.map_at(&format!("{path}.l2"), f),
        }
    }
    pub(crate) fn for_each_mut_nested(&mut self, path: &str, f: &mut impl FnMut(&mut T, &str)) {
        self.l1.for_each_mut_at(&format!("{path}.l1"), f);
        self.l2.for_each_mut_at(&format!("{path}.l2"), f);
    }
}

impl<T> PromptParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T, &str) -> U) -> PromptParams<U> {
        PromptParams {
            attr_embed: f(&self.attr_embed, "attr_embed"),
            attr_default: f(&self.attr_default, "attr_default"),
            attr_mlp: self.attr_mlp.map_nested("attr_mlp", f),
            stats_mlp: self.stats_mlp.map_nested("stats_mlp", f),
            gru: self.gru.map_at("gru", f),
            scores: self
                .scores
                .iter()
                .enumerate()
                .map(|(g, t)| f(t, &format!("scores.{g}")))
                .collect(),
            gates: self
                .gates
                .iter()
                .enumerate()
                .map(|(l, t)| f(t, &format!("gates.{l}")))
                .collect(),
            projections: self
                .projections
                .iter()
                .enumerate()
                .map(|(l, t)| f(t, &format!("projections.{l}")))
                .collect(),
        }
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&'a T, &str)) {
        self.map(&mut |t, name| f(t, name));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut T, &str)) {
        f(&mut self.attr_embed, "attr_embed");
        f(&mut self.attr_default, "attr_default");
        self.attr_mlp.for_each_mut_nested("attr_mlp", &mut f);
        self.stats_mlp.for_each_mut_nested("stats_mlp", &mut f);
        self.gru.for_each_mut_at("gru", &mut f);
        for (g, t) in self.scores.iter_mut().enumerate() {
            f(t, &format!("scores.{g}"));
        }
        for (l, t) in self.gates.iter_mut().enumerate() {
            f(t, &format!("gates.{l}"));
        }
        for (l, t) in self.projections.iter_mut().enumerate() {
            f(t, &format!("projections.{l}"));
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.for_each(|t, name| out.push((name.to_string(), t)));
        out
    }
}

impl PromptParams<Tensor> {
    pub fn to_vars(&self, tape: &mut Tape) -> PromptParams<Var> {
        self.map(&mut |t, _| tape.leaf(t.clone()))
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|t, _| n += t.len());
        n
    }
}

fn init_mlp2(seed: u64, path: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp2<Tensor> {
    let w = |suffix: &str, r, c| {
        let mut rng = init_stream(seed, &format!("{path}.{suffix}"));
        xavier(&mut rng, r, c)
    };
    Mlp2 {
        l1: Linear { w: w("l1.w", d_in, d_hidden), b: Tensor::zeros(1, d_hidden) },
        l2: Linear { w: w("l2.w", d_hidden, d_out), b: Tensor::zeros(1, d_out) },
    }
}

pub fn init_prompt(dims: &PromptDims, seed: u64) -> Result<PromptParams<Tensor>> {
    dims.validate()?;
    let d = dims.d;
    let stream = |path: &str| init_stream(seed, &format!("prompt.{path}"));
    let attr_embed = table_init(&mut stream("attr_embed"), dims.attr_vocab.max(1), d);
    let attr_default = table_init(&mut stream("attr_default"), 1, dims.attr_input_dim());
    let gru = {
        let w = |name: &str| xavier(&mut stream(name), d, d);
        GruParams {
            wz: w("gru.wz"),
            uz: w("gru.uz"),
            bz: Tensor::zeros(1, d),
            wr: w("gru.wr"),
            ur: w("gru.ur"),
            br: Tensor::zeros(1, d),
            wh: w("gru.wh"),
            uh: w("gru.uh"),
            bh: Tensor::zeros(1, d),
        }
    };
    let n = dims.n_factors;
    let scores = (0..=dims.n_layers)
        .map(|g| xavier(&mut stream(&format!("scores.{g}")), n, d))
        .collect();
    let gates = (0..dims.n_layers)
        .map(|l| xavier(&mut stream(&format!("gates.{l}")), 2 * n * d, 2 * n))
        .collect();
    // Zero projections: a fresh prompt generator injects exactly nothing.
    let projections = (0..dims.n_layers).map(|_| Tensor::zeros(d, dims.n_tokens * d)).collect();
    Ok(PromptParams {
        attr_embed,
        attr_default,
        attr_mlp: init_mlp2(seed, "prompt.attr_mlp", dims.attr_input_dim(), d, d),
        stats_mlp: init_mlp2(seed, "prompt.stats_mlp", dims.stats_dim, d, d),
        gru,
        scores,
        gates,
        projections,
    })
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn mlp2_forward(tape: &mut Tape, m: &Mlp2<Var>, x: Var) -> Var {
    let h = tape.matmul(x, m.l1.w);
    let h = tape.add_row(h, m.l1.b);
    let h = tape.gelu(h);
    let o = tape.matmul(h, m.l2.w);
    tape.add_row(o, m.l2.b)
}

/// Attribute prompt: embed the user's profile attributes, concatenate, and
/// run the MLP. An empty profile uses the learned default token instead.
pub fn gen_attr_prompt(
    tape: &mut Tape,
    p: &PromptParams<Var>,
    dims: &PromptDims,
    attrs: &[usize],
) -> Result<Var> {
    let input = if attrs.is_empty() {
        p.attr_default
    } else {
        if attrs.len() != dims.attr_slots {
            return Err(Error::Invalid(format!(
                "expected {} profile attributes, got {}",
                dims.attr_slots,
                attrs.len()
            )));
        }
        let vocab = tape.value(p.attr_embed).rows();
        for &a in attrs {
            if a >= vocab {
                return Err(Error::Bounds {
                    table: "attributes".into(),
                    what: "attribute".into(),
                    index: a,
                    bound: vocab,
                });
            }
        }
        let rows = tape.gather_rows(p.attr_embed, attrs);
        tape.reshape(rows, 1, dims.attr_input_dim())
    };
    Ok(mlp2_forward(tape, &p.attr_mlp, input))
}

/// Statistics prompt from an already-standardized feature vector.
pub fn gen_statis_prompt(
    tape: &mut Tape,
    p: &PromptParams<Var>,
    dims: &PromptDims,
    standardized: &[f64],
) -> Result<Var> {
    if standardized.len() != dims.stats_dim {
        return Err(Error::Shape {
            context: "statistics prompt".into(),
            expected: format!("{} features", dims.stats_dim),
            got: format!("{}", standardized.len()),
        });
    }
    let x = tape.leaf(Tensor::from_vec(1, dims.stats_dim, standardized.to_vec()));
    Ok(mlp2_forward(tape, &p.stats_mlp, x))
}

fn gru_step(tape: &mut Tape, g: &GruParams<Var>, x: Var, h: Var) -> Var {
    let z = {
        let a = tape.matmul(x, g.wz);
        let b = tape.matmul(h, g.uz);
        let s = tape.add(a, b);
        let s = tape.add_row(s, g.bz);
        tape.sigmoid(s)
    };
    let r = {
        let a = tape.matmul(x, g.wr);
        let b = tape.matmul(h, g.ur);
        let s = tape.add(a, b);
        let s = tape.add_row(s, g.br);
        tape.sigmoid(s)
    };
    let c = {
        let a = tape.matmul(x, g.wh);
        let rh = tape.mul(r, h);
        let b = tape.matmul(rh, g.uh);
        let s = tape.add(a, b);
        let s = tape.add_row(s, g.bh);
        tape.tanh(s)
    };
    // h' = (1 - z) * h + z * c
    let zh = tape.mul(z, h);
    let keep = tape.sub(h, zh);
    let zc = tape.mul(z, c);
    tape.add(keep, zc)
}

/// Behavior prompt: run the shared-weight GRU over each behavior's item
/// subsequence (inputs are the frozen backbone's item + behavior embedding
/// rows), take the final hidden state per non-empty behavior, and average.
/// Returns the vector and a flag set when every sequence was empty (the
/// vector is then exactly zero).
pub fn gen_behavior_prompt(
    tape: &mut Tape,
    p: &PromptParams<Var>,
    backbone: &EbmParams<Var>,
    dims: &PromptDims,
    behavior_seqs: &[Vec<usize>],
) -> Result<(Var, bool)> {
    let n_items = tape.value(backbone.item).rows();
    let mut finals = Vec::new();
    for (b, seq) in behavior_seqs.iter().enumerate() {
        if seq.is_empty() {
            continue;
        }
        for &v in seq {
            if v >= n_items {
                return Err(Error::Bounds {
                    table: "items".into(),
                    what: "item".into(),
                    index: v,
                    bound: n_items,
                });
            }
        }
        let items = tape.gather_rows(backbone.item, seq);
        let beh = tape.gather_rows(backbone.behavior, &vec![b; seq.len()]);
        let xs = tape.add(items, beh);
        let mut h = tape.leaf(Tensor::zeros(1, dims.d));
        for t in 0..seq.len() {
            let x_t = tape.slice_rows(xs, t, t + 1);
            h = gru_step(tape, &p.gru, x_t, h);
        }
        finals.push(h);
    }
    if finals.is_empty() {
        return Ok((tape.leaf(Tensor::zeros(1, dims.d)), true));
    }
    let stacked = if finals.len() == 1 { finals[0] } else { tape.concat_rows(&finals) };
    let weights = vec![1.0 / finals.len() as f64; finals.len()];
    let scaled = tape.scale_rows(stacked, &weights);
    let ones = tape.leaf(Tensor::filled(1, finals.len(), 1.0));
    Ok((tape.matmul(ones, scaled), false))
}

// ---------------------------------------------------------------------------
// Prompt factorized gate
// ---------------------------------------------------------------------------

/// Attention-pool Q_u into the factor bank: for each group g (layers then
/// shared) and factor n, scores = Q_u w_{g,n}, weights = softmax(scores),
/// factor = weights^T Q_u. Output rows: group-major, (n_layers + 1) * N x d.
pub fn pfg_factors(tape: &mut Tape, p: &PromptParams<Var>, q_u: Var) -> Var {
    let mut rows = Vec::new();
    for score_table in &p.scores {
        let n = tape.value(*score_table).rows();
        for i in 0..n {
            let w = tape.slice_rows(*score_table, i, i + 1);
            let wt = tape.transpose(w);
            let s = tape.matmul(q_u, wt);
            let st = tape.transpose(s);
            let a = tape.softmax_rows(st);
            rows.push(tape.matmul(a, q_u));
        }
    }
    tape.concat_rows(&rows)
}

/// Gate layer l's N factors with the N shared factors into the pre-projection
/// prompt p_l, then project into the C x d token matrix.
pub fn pfg_prompt(
    tape: &mut Tape,
    p: &PromptParams<Var>,
    dims: &PromptDims,
    e_bank: Var,
    layer: usize,
) -> Result<(Var, Var)> {
    let n = dims.n_factors;
    let l_total = dims.n_layers;
    if layer >= l_total {
        return Err(Error::Bounds {
            table: "layers".into(),
            what: "layer".into(),
            index: layer,
            bound: l_total,
        });
    }
    let layer_rows = tape.slice_rows(e_bank, layer * n, (layer + 1) * n);
    let shared_rows = tape.slice_rows(e_bank, l_total * n, (l_total + 1) * n);
    let factors = tape.concat_rows(&[layer_rows, shared_rows]);
    let phi = tape.reshape(factors, 1, 2 * n * dims.d);
    let logits = tape.matmul(phi, p.gates[layer]);
    let beta = tape.softmax_rows(logits);
    let p_l = tape.matmul(beta, factors);
    let flat = tape.matmul(p_l, p.projections[layer]);
    let tokens = tape.reshape(flat, dims.n_tokens, dims.d);
    Ok((p_l, tokens))
}

/// Everything the tuner needs for one user, generated on the tape.
pub struct PromptBundle {
    /// Per-layer injected token matrices (C x d).
    pub tokens: Vec<Var>,
    /// Factor bank E, ((n_layers + 1) N) x d.
    pub e_bank: Var,
    /// Pre-projection prompts stacked, n_layers x d.
    pub p_bank: Var,
    /// Stacked information vectors Q_u (N_INFO x d).
    pub q_u: Var,
    /// True when the user had no behavior sequences at all.
    pub behavior_fallback: bool,
}

/// Raw per-user generator inputs (statistics already standardized).
#[derive(Clone, Debug)]
pub struct PromptInputs {
    pub attrs: Vec<usize>,
    pub standardized_stats: Vec<f64>,
    /// Item sequence per behavior, chronological.
    pub behavior_seqs: Vec<Vec<usize>>,
}

pub fn generate_prompts(
    tape: &mut Tape,
    p: &PromptParams<Var>,
    backbone: &EbmParams<Var>,
    dims: &PromptDims,
    inputs: &PromptInputs,
) -> Result<PromptBundle> {
    let q_attr = gen_attr_prompt(tape, p, dims, &inputs.attrs)?;
    let q_statis = gen_statis_prompt(tape, p, dims, &inputs.standardized_stats)?;
    let (q_b, behavior_fallback) =
        gen_behavior_prompt(tape, p, backbone, dims, &inputs.behavior_seqs)?;
    let q_u = tape.concat_rows(&[q_attr, q_statis, q_b]);
    let e_bank = pfg_factors(tape, p, q_u);
    let mut tokens = Vec::with_capacity(dims.n_layers);
    let mut p_rows = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let (p_l, toks) = pfg_prompt(tape, p, dims, e_bank, l)?;
        p_rows.push(p_l);
        tokens.push(toks);
    }
    let p_bank = if p_rows.len() == 1 { p_rows[0] } else { tape.concat_rows(&p_rows) };
    Ok(PromptBundle { tokens, e_bank, p_bank, q_u, behavior_fallback })
}

// ---------------------------------------------------------------------------
// Coding-rate compactness
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompactnessSign {
    /// Subtract the rate from the minimized objective (higher rate = more
    /// diverse prompts, the default reading).
    PromoteDiversity,
    /// Add the rate as written (compresses the banks).
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompactnessConfig {
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub eps_e2: f64,
    pub eps_p2: f64,
    pub sign: CompactnessSign,
}

impl Default for CompactnessConfig {
    fn default() -> Self {
        CompactnessConfig {
            lambda_e: 1.0,
            lambda_p: 1.0,
            eps_e2: 1.0,
            eps_p2: 1.0,
            sign: CompactnessSign::PromoteDiversity,
        }
    }
}

/// Scalar coding rate 0.5 logdet(I + (d / (denom eps2)) M M^T).
pub fn coding_rate_value(m: &Tensor, denom: usize, eps2: f64) -> Result<f64> {
    if denom == 0 || !(eps2 > 0.0) {
        return Err(Error::Config("coding rate needs denom >= 1 and eps2 > 0".into()));
    }
    let coef = m.cols() as f64 / (denom as f64 * eps2);
    let gram = matmul_nt(m, m);
    let mut g = Tensor::zeros(m.rows(), m.rows());
    for i in 0..m.rows() {
        for j in 0..m.rows() {
            let v = coef * gram.get(i, j) + if i == j { 1.0 } else { 0.0 };
            g.set(i, j, v);
        }
    }
    let l = cholesky(&g)
        .ok_or_else(|| Error::Numeric("coding-rate Gram matrix is not positive definite".into()))?;
    // logdet(G) = 2 sum(ln diag(L)); the rate is half of that.
    Ok((0..m.rows()).map(|i| l.get(i, i).ln()).sum())
}

/// One user's signed compactness term on the tape:
/// lambda_e R(E, N, eps_e2) + lambda_p R(P, n_layers, eps_p2), negated under
/// the diversity-promoting sign.
pub fn compactness_term(
    tape: &mut Tape,
    e_bank: Var,
    p_bank: Var,
    dims: &PromptDims,
    cfg: &CompactnessConfig,
) -> Var {
    let d_e = tape.value(e_bank).cols() as f64;
    let d_p = tape.value(p_bank).cols() as f64;
    let coef_e = d_e / (dims.n_factors as f64 * cfg.eps_e2);
    let coef_p = d_p / (dims.n_layers as f64 * cfg.eps_p2);
    let r_e = tape.coding_rate(e_bank, coef_e);
    let r_p = tape.coding_rate(p_bank, coef_p);
    let term_e = tape.scale(r_e, cfg.lambda_e);
    let term_p = tape.scale(r_p, cfg.lambda_p);
    let total = tape.add(term_e, term_p);
    match cfg.sign {
        CompactnessSign::PromoteDiversity => tape.scale(total, -1.0),
        CompactnessSign::Literal => total,
    }
}

/// Scalar mirror of `compactness_term` for reporting and tests.
pub fn compactness_value(
    e_bank: &Tensor,
    p_bank: &Tensor,
    dims: &PromptDims,
    cfg: &CompactnessConfig,
) -> Result<f64> {
    let r_e = coding_rate_value(e_bank, dims.n_factors, cfg.eps_e2)?;
    let r_p = coding_rate_value(p_bank, dims.n_layers, cfg.eps_p2)?;
    let total = cfg.lambda_e * r_e + cfg.lambda_p * r_p;
    Ok(match cfg.sign {
        CompactnessSign::PromoteDiversity => -total,
        CompactnessSign::Literal => total,
    })
}

/// Mean pairwise cosine similarity between the rows of a matrix (diversity
/// diagnostic for the prompt bank; zero rows contribute similarity 0).
pub fn mean_pairwise_cosine(m: &Tensor) -> f64 {
    let n = m.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (m.row(i), m.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                total += dot / (na * nb);
            }
            pairs += 1;
        }
    }
    total / pairs as f64
}
