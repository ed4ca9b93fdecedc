//! The multi-behavior denoising backbone.
//!
//! Each layer runs one frequency-domain filtering block (EFL) per behavior
//! view plus one over the whole sequence, mixes the filtered streams with a
//! row-wise linear map, and finishes with the usual post-norm residual FFN.
//! An EFL lifts the (masked) sequence into the frequency domain, applies a
//! chunk-diagonal two-layer complex MLP shared across frequency bins, and
//! transforms back; everything is built on the autodiff tape so the same
//! forward serves training and inference.
//!
//! Parameter structs are generic over the leaf type `T`: `Tensor` for
//! storage, `Var` once pushed onto a tape. `map`/`for_each(_mut)` walk the
//! tensors in a stable order with dotted path names, which the optimizer,
//! checkpointing, and the census all rely on.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embedding::{behavior_view_mask, embed_sequence, PreparedSequence};
use crate::error::{Error, Result};
use crate::numerics::n_bins;
use crate::rng::init_stream;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Dimensions
// ---------------------------------------------------------------------------

/// Hyperparameters of the backbone (model side only; data-dependent sizes are
/// filled in when the model is built against a corpus).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Embedding width.
    pub d: usize,
    pub n_layers: usize,
    /// Number of diagonal chunks in the complex MLP; must divide `d`.
    pub k_chunks: usize,
    /// Sequence window length fed to the model.
    pub l_seq: usize,
    /// Position-table capacity (>= any window the model will see).
    pub l_max: usize,
    pub n_items: usize,
    pub n_behaviors: usize,
    /// Keep all L frequency bins (redundant conjugate half included) instead
    /// of the compact floor(L/2)+1 layout.
    pub full_spectrum: bool,
    /// Bypass the frequency filters entirely (ablation).
    pub no_denoise: bool,
    /// Pool the user representation as the mean of valid rows instead of the
    /// last row.
    pub mean_pool: bool,
    pub ln_eps: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 32,
            n_layers: 2,
            k_chunks: 4,
            l_seq: 32,
            l_max: 64,
            n_items: 0,
            n_behaviors: 0,
            full_spectrum: false,
            no_denoise: false,
            mean_pool: false,
            ln_eps: 1e-8,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_chunks == 0 || self.d % self.k_chunks != 0 {
            return Err(Error::Config(format!(
                "k_chunks must divide d: d = {}, k_chunks = {}",
                self.d, self.k_chunks
            )));
        }
        if self.l_seq == 0 || self.l_seq > self.l_max {
            return Err(Error::Config(format!(
                "need 0 < l_seq <= l_max, got l_seq = {}, l_max = {}",
                self.l_seq, self.l_max
            )));
        }
        if self.n_items == 0 || self.n_behaviors == 0 {
            return Err(Error::Config("model needs n_items and n_behaviors from the corpus".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn chunk_width(&self) -> usize {
        self.d / self.k_chunks
    }
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// in x out; forward is x @ w + b.
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexLinear<T> {
    pub wr: T,
    pub wi: T,
    pub br: T,
    pub bi: T,
}

/// One chunk's two-layer complex MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EflBlock<T> {
    pub l1: ComplexLinear<T>,
    pub l2: ComplexLinear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EflParams<T> {
    pub blocks: Vec<EflBlock<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmLayerParams<T> {
    /// One filter per behavior view...
    pub efl_behavior: Vec<EflParams<T>>,
    /// ...plus one over the full sequence.
    pub efl_overall: EflParams<T>,
    /// (n_behaviors + 1) * d -> d fusion of the filtered streams.
    pub mixer: Linear<T>,
    pub norm1: LayerNormParams<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub norm2: LayerNormParams<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmParams<T> {
    pub item: T,
    pub pos: T,
    pub behavior: T,
    pub layers: Vec<EbmLayerParams<T>>,
}

macro_rules! impl_visits {
    ($ty:ident, $( $field:ident ),+) => {
        impl<T> $ty<T> {
            pub(crate) fn map_at<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&'a T, &str) -> U) -> $ty<U> {
                $ty { $( $field: f(&self.$field, &format!("{path}.{}", stringify!($field))) ),+ }
            }
            pub(crate) fn for_each_mut_at(&mut self, path: &str, f: &mut impl FnMut(&mut T, &str)) {
                $( f(&mut self.$field, &format!("{path}.{}", stringify!($field))); )+
            }
        }
    };
}
pub(crate) use impl_visits;

impl_visits!(Linear, w, b);
impl_visits!(ComplexLinear, wr, wi, br, bi);
impl_visits!(LayerNormParams, gain, bias);

impl<T> EflBlock<T> {
    fn map_at<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&'a T, &str) -> U) -> EflBlock<U> {
        EflBlock {
            l1: self.l1.map_at(&format!("{path}.l1"), f),
            l2: self.l2.map_at(&format!("{path}.l2"), f),
        }
    }
    fn for_each_mut_at(&mut self, path: &str, f: &mut impl FnMut(&mut T, &str)) {
        self.l1.for_each_mut_at(&format!("{path}.l1"), f);
        self.l2.for_each_mut_at(&format!("{path}.l2"), f);
    }
}

impl<T> EflParams<T> {
    /// Map every tensor to a new value, handing the closure the tensor and
    /// its path-qualified name.
    pub fn map_at<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&'a T, &str) -> U) -> EflParams<U> {
        EflParams {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(c, b)| b.map_at(&format!("{path}.blocks.{c}"), f))
                .collect(),
        }
    }
    fn for_each_mut_at(&mut self, path: &str, f: &mut impl FnMut(&mut T, &str)) {
        for (c, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut_at(&format!("{path}.blocks.{c}"), f);
        }
    }
}

impl<T> EbmLayerParams<T> {
    fn map_at<'a, U>(&'a self, path: &str, f: &mut impl FnMut(&'a T, &str) -> U) -> EbmLayerParams<U> {
        EbmLayerParams {
            efl_behavior: self
                .efl_behavior
                .iter()
                .enumerate()
                .map(|(b, e)| e.map_at(&format!("{path}.efl_behavior.{b}"), f))
                .collect(),
            efl_overall: self.efl_overall.map_at(&format!("{path}.efl_overall"), f),
            mixer: self.mixer.map_at(&format!("{path}.mixer"), f),
            norm1: self.norm1.map_at(&format!("{path}.norm1"), f),
            ffn1: self.ffn1.map_at(&format!("{path}.ffn1"), f),
            ffn2: self.ffn2.map_at(&format!("{path}.ffn2"), f),
            norm2: self.norm2.map_at(&format!("{path}.norm2"), f),
        }
    }
    fn for_each_mut_at(&mut self, path: &str, f: &mut impl FnMut(&mut T, &str)) {
        for (b, e) in self.efl_behavior.iter_mut().enumerate() {
            e.for_each_mut_at(&format!("{path}.efl_behavior.{b}"), f);
        }
        self.efl_overall.for_each_mut_at(&format!("{path}.efl_overall"), f);
        self.mixer.for_each_mut_at(&format!("{path}.mixer"), f);
        self.norm1.for_each_mut_at(&format!("{path}.norm1"), f);
        self.ffn1.for_each_mut_at(&format!("{path}.ffn1"), f);
        self.ffn2.for_each_mut_at(&format!("{path}.ffn2"), f);
        self.norm2.for_each_mut_at(&format!("{path}.norm2"), f);
    }
}

impl<T> EbmParams<T> {
    /// Rebuild the structure with a new leaf type, visiting tensors in the
    /// stable dotted-path order.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T, &str) -> U) -> EbmParams<U> {
        EbmParams {
            item: f(&self.item, "item"),
            pos: f(&self.pos, "pos"),
            behavior: f(&self.behavior, "behavior"),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map_at(&format!("layers.{l}"), f))
                .collect(),
        }
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&'a T, &str)) {
        self.map(&mut |t, name| f(t, name));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut T, &str)) {
        f(&mut self.item, "item");
        f(&mut self.pos, "pos");
        f(&mut self.behavior, "behavior");
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut_at(&format!("layers.{l}"), &mut f);
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.for_each(|t, name| out.push((name.to_string(), t)));
        out
    }
}

impl EbmParams<Tensor> {
    /// Push every tensor onto the tape as a leaf.
    pub fn to_vars(&self, tape: &mut Tape) -> EbmParams<Var> {
        self.map(&mut |t, _| tape.leaf(t.clone()))
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|t, _| n += t.len());
        n
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

pub(crate) fn xavier(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Embedding tables use a width-based uniform range (a fan-in rule over the
/// vocabulary would shrink rows toward zero as the catalog grows).
pub(crate) fn table_init(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn init_complex_linear(seed: u64, path: &str, dc: usize) -> ComplexLinear<Tensor> {
    let init = |suffix: &str, rows, cols, weight: bool| {
        let full = format!("{path}.{suffix}");
        let mut rng = init_stream(seed, &full);
        if weight {
            xavier(&mut rng, rows, cols)
        } else {
            Tensor::zeros(rows, cols)
        }
    };
    ComplexLinear {
        wr: init("wr", dc, dc, true),
        wi: init("wi", dc, dc, true),
        br: init("br", 1, dc, false),
        bi: init("bi", 1, dc, false),
    }
}

fn init_efl(seed: u64, path: &str, dims: &ModelDims) -> EflParams<Tensor> {
    let dc = dims.chunk_width();
    let blocks = (0..dims.k_chunks)
        .map(|c| EflBlock {
            l1: init_complex_linear(seed, &format!("{path}.blocks.{c}.l1"), dc),
            l2: init_complex_linear(seed, &format!("{path}.blocks.{c}.l2"), dc),
        })
        .collect();
    EflParams { blocks }
}

fn init_linear(seed: u64, path: &str, rows: usize, cols: usize) -> Linear<Tensor> {
    let mut rng = init_stream(seed, &format!("{path}.w"));
    Linear { w: xavier(&mut rng, rows, cols), b: Tensor::zeros(1, cols) }
}

/// Deterministic initialization: every tensor draws from its own named
/// substream, so adding or reordering unrelated tensors cannot shift values.
pub fn init_ebm(dims: &ModelDims, seed: u64) -> Result<EbmParams<Tensor>> {
    dims.validate()?;
    let d = dims.d;
    let item = {
        let mut rng = init_stream(seed, "item");
        table_init(&mut rng, dims.n_items, d)
    };
    let pos = {
        let mut rng = init_stream(seed, "pos");
        table_init(&mut rng, dims.l_max, d)
    };
    let behavior = {
        let mut rng = init_stream(seed, "behavior");
        table_init(&mut rng, dims.n_behaviors, d)
    };
    let layers = (0..dims.n_layers)
        .map(|l| {
            let p = format!("layers.{l}");
            EbmLayerParams {
                efl_behavior: (0..dims.n_behaviors)
                    .map(|b| init_efl(seed, &format!("{p}.efl_behavior.{b}"), dims))
                    .collect(),
                efl_overall: init_efl(seed, &format!("{p}.efl_overall"), dims),
                mixer: init_linear(seed, &format!("{p}.mixer"), (dims.n_behaviors + 1) * d, d),
                norm1: LayerNormParams { gain: Tensor::filled(1, d, 1.0), bias: Tensor::zeros(1, d) },
                ffn1: init_linear(seed, &format!("{p}.ffn1"), d, 2 * d),
                ffn2: init_linear(seed, &format!("{p}.ffn2"), 2 * d, d),
                norm2: LayerNormParams { gain: Tensor::filled(1, d, 1.0), bias: Tensor::zeros(1, d) },
            }
        })
        .collect();
    Ok(EbmParams { item, pos, behavior, layers })
}

// ---------------------------------------------------------------------------
// Census
// ---------------------------------------------------------------------------

/// Parameters of one frequency filter including its d*d slice of the mixer
/// (the filter's share of the fusion map): (1 + 4/k) d^2 + 4 d.
pub fn efl_param_count(d: usize, k: usize) -> usize {
    efl_tensor_param_count(d, k) + d * d
}

/// Tensors inside one filter alone: k chunks x 2 layers x (2 (d/k)^2 complex
/// weight components + 2 (d/k) bias components) = 4 d^2 / k + 4 d.
pub fn efl_tensor_param_count(d: usize, k: usize) -> usize {
    assert!(k > 0 && d % k == 0, "k must divide d");
    4 * d * d / k + 4 * d
}

/// Per-tensor parameter counts in path order plus the grand total.
pub fn param_census(params: &EbmParams<Tensor>) -> (Vec<(String, usize)>, usize) {
    let mut rows = Vec::new();
    let mut total = 0;
    params.for_each(|t, name| {
        rows.push((name.to_string(), t.len()));
        total += t.len();
    });
    (rows, total)
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn complex_affine(tape: &mut Tape, l: &ComplexLinear<Var>, xr: Var, xi: Var) -> (Var, Var) {
    // (xr + i xi)(wr + i wi) + (br + i bi)
    let rr = tape.matmul(xr, l.wr);
    let ii = tape.matmul(xi, l.wi);
    let re = tape.sub(rr, ii);
    let re = tape.add_row(re, l.br);
    let ri = tape.matmul(xr, l.wi);
    let ir = tape.matmul(xi, l.wr);
    let im = tape.add(ri, ir);
    let im = tape.add_row(im, l.bi);
    (re, im)
}

/// Chunk-diagonal two-layer complex MLP over a stacked spectrum
/// (rows 0..bins real parts, bins..2*bins imaginary parts). The nonlinearity
/// acts on real and imaginary parts separately.
fn chunked_complex_mlp(tape: &mut Tape, p: &EflParams<Var>, spec: Var, bins: usize, d: usize) -> Var {
    let k = p.blocks.len();
    debug_assert!(d % k == 0);
    let dc = d / k;
    let xr = tape.slice_rows(spec, 0, bins);
    let xi = tape.slice_rows(spec, bins, 2 * bins);
    let mut outs_r = Vec::with_capacity(k);
    let mut outs_i = Vec::with_capacity(k);
    for (c, blk) in p.blocks.iter().enumerate() {
        let xr_c = tape.slice_cols(xr, c * dc, (c + 1) * dc);
        let xi_c = tape.slice_cols(xi, c * dc, (c + 1) * dc);
        let (hr, hi) = complex_affine(tape, &blk.l1, xr_c, xi_c);
        let ar = tape.gelu(hr);
        let ai = tape.gelu(hi);
        let (or_, oi) = complex_affine(tape, &blk.l2, ar, ai);
        outs_r.push(or_);
        outs_i.push(oi);
    }
    let r = if k == 1 { outs_r[0] } else { tape.concat_cols(&outs_r) };
    let i = if k == 1 { outs_i[0] } else { tape.concat_cols(&outs_i) };
    tape.concat_rows(&[r, i])
}

/// One frequency filter: select rows with `pre_mask`, transform, filter in
/// the frequency domain, transform back, and zero the rows that don't exist
/// (`post_mask`). `no_denoise` bypasses the frequency path entirely.
pub fn efl_forward(
    tape: &mut Tape,
    p: &EflParams<Var>,
    x: Var,
    pre_mask: &[f64],
    post_mask: &[f64],
    full_spectrum: bool,
    no_denoise: bool,
) -> Var {
    let sel = tape.scale_rows(x, pre_mask);
    if no_denoise {
        return tape.scale_rows(sel, post_mask);
    }
    let (l, d) = tape.value(x).shape();
    let bins = n_bins(l, full_spectrum);
    let spec = tape.rfft_stacked(sel, full_spectrum);
    let y = chunked_complex_mlp(tape, p, spec, bins, d);
    let out = tape.irfft_stacked(y, l, full_spectrum);
    tape.scale_rows(out, post_mask)
}

/// Row masks for one layer invocation: `exist` marks rows that are real
/// (valid records or injected prompt rows), `views[b]` selects the valid rows
/// carrying behavior b (prompt rows belong to no view).
pub struct LayerMasks {
    pub exist: Vec<f64>,
    pub views: Vec<Vec<f64>>,
}

impl LayerMasks {
    pub fn new(behaviors: &[usize], exist: Vec<f64>, n_behaviors: usize) -> Self {
        let views = (0..n_behaviors).map(|b| behavior_view_mask(behaviors, &exist, b)).collect();
        LayerMasks { exist, views }
    }
}

pub fn ebm_layer_forward(
    tape: &mut Tape,
    lp: &EbmLayerParams<Var>,
    x: Var,
    masks: &LayerMasks,
    dims: &ModelDims,
) -> Var {
    let mut streams = Vec::with_capacity(masks.views.len() + 1);
    for (b, view) in masks.views.iter().enumerate() {
        streams.push(efl_forward(
            tape,
            &lp.efl_behavior[b],
            x,
            view,
            &masks.exist,
            dims.full_spectrum,
            dims.no_denoise,
        ));
    }
    streams.push(efl_forward(
        tape,
        &lp.efl_overall,
        x,
        &masks.exist,
        &masks.exist,
        dims.full_spectrum,
        dims.no_denoise,
    ));
    let cat = tape.concat_cols(&streams);
    let mixed = tape.matmul(cat, lp.mixer.w);
    let mixed = tape.add_row(mixed, lp.mixer.b);
    let res = tape.add(x, mixed);
    let h = tape.layer_norm(res, lp.norm1.gain, lp.norm1.bias, dims.ln_eps);
    let h = tape.scale_rows(h, &masks.exist);
    let f = tape.matmul(h, lp.ffn1.w);
    let f = tape.add_row(f, lp.ffn1.b);
    let f = tape.gelu(f);
    let f = tape.matmul(f, lp.ffn2.w);
    let f = tape.add_row(f, lp.ffn2.b);
    let res2 = tape.add(h, f);
    let out = tape.layer_norm(res2, lp.norm2.gain, lp.norm2.bias, dims.ln_eps);
    tape.scale_rows(out, &masks.exist)
}

/// Encode one user's prepared sequence into a 1 x d representation.
///
/// `prompts` holds an optional C x d token matrix per layer; a layer's tokens
/// are prepended to its input rows and sliced back off after the layer, so
/// they shape the computation without surviving into the output. Prompt rows
/// count as existing for the overall filter but belong to no behavior view
/// and receive no positional embedding.
pub fn encode_user(
    tape: &mut Tape,
    params: &EbmParams<Var>,
    dims: &ModelDims,
    prep: &PreparedSequence,
    prompts: &[Option<Var>],
) -> Result<Var> {
    if prep.n_valid == 0 {
        return Err(Error::Invalid("cannot encode an empty interaction sequence".into()));
    }
    if !prompts.is_empty() && prompts.len() != dims.n_layers {
        return Err(Error::Shape {
            context: "prompt injection".into(),
            expected: format!("{} per-layer prompt slots", dims.n_layers),
            got: format!("{}", prompts.len()),
        });
    }
    let l = prep.len();
    let mut x = embed_sequence(tape, params.item, params.pos, params.behavior, prep)?;

    let plain = LayerMasks::new(&prep.behaviors, prep.mask.clone(), dims.n_behaviors);
    for (li, lp) in params.layers.iter().enumerate() {
        let prompt = prompts.get(li).copied().flatten();
        x = match prompt {
            Some(p) => {
                let c = tape.value(p).rows();
                let ext = tape.concat_rows(&[p, x]);
                let mut behaviors = vec![usize::MAX; c];
                behaviors.extend_from_slice(&prep.behaviors);
                let mut exist = vec![1.0; c];
                exist.extend_from_slice(&prep.mask);
                let masks = LayerMasks::new(&behaviors, exist, dims.n_behaviors);
                let out = ebm_layer_forward(tape, lp, ext, &masks, dims);
                tape.slice_rows(out, c, c + l)
            }
            None => ebm_layer_forward(tape, lp, x, &plain, dims),
        };
    }

    if dims.mean_pool {
        let weights: Vec<f64> = prep.mask.iter().map(|&m| m / prep.n_valid as f64).collect();
        let scaled = tape.scale_rows(x, &weights);
        let ones = tape.leaf(Tensor::filled(1, l, 1.0));
        Ok(tape.matmul(ones, scaled))
    } else {
        // Left-padding guarantees the final row is the most recent record.
        Ok(tape.slice_rows(x, l - 1, l))
    }
}
