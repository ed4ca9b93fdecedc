//! Column-wise real FFT with a fixed normalization convention, plus the
//! gradient-checking harness used to validate every differentiable operation.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! 1/L factor. `full = false` keeps the floor(L/2)+1 non-redundant bins of a
//! real signal; `full = true` keeps all L bins (parity mode — the filter then
//! acts on negative frequencies independently and the inverse takes the real
//! part).

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Spectrum of a real L x d matrix, transformed column-wise along the time
/// axis. `re`/`im` have `n_bins(source_len, full)` rows and d columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
    pub source_len: usize,
    pub full: bool,
}

pub fn n_bins(source_len: usize, full: bool) -> usize {
    if full {
        source_len
    } else {
        source_len / 2 + 1
    }
}

/// Unnormalized complex DFT of every column; `inverse` flips the exponent
/// sign (still unnormalized). This is the single kernel all four transform
/// directions are built from.
fn dft_columns(re: &Tensor, im: Option<&Tensor>, inverse: bool) -> (Tensor, Tensor) {
    let (l, d) = re.shape();
    if let Some(im) = im {
        assert_eq!(im.shape(), (l, d), "dft_columns re/im shape mismatch");
    }
    let mut out_re = Tensor::zeros(l, d);
    let mut out_im = Tensor::zeros(l, d);
    PLANNER.with(|p| {
        let fft = if inverse {
            p.borrow_mut().plan_fft_inverse(l)
        } else {
            p.borrow_mut().plan_fft_forward(l)
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for c in 0..d {
            for t in 0..l {
                buf[t] = Complex64::new(re.get(t, c), im.map_or(0.0, |m| m.get(t, c)));
            }
            fft.process(&mut buf);
            for t in 0..l {
                out_re.set(t, c, buf[t].re);
                out_im.set(t, c, buf[t].im);
            }
        }
    });
    (out_re, out_im)
}

/// Forward transform of a real sequence matrix (time runs down the rows).
pub fn rfft_cols(x: &Tensor, full: bool) -> Result<ComplexSpectrum> {
    let (l, d) = x.shape();
    if l == 0 || d == 0 {
        return Err(Error::Invalid(format!("rfft_cols requires a non-empty matrix, got {l}x{d}")));
    }
    let (fre, fim) = dft_columns(x, None, false);
    let bins = n_bins(l, full);
    let mut re = Tensor::zeros(bins, d);
    let mut im = Tensor::zeros(bins, d);
    for b in 0..bins {
        re.row_mut(b).copy_from_slice(fre.row(b));
        im.row_mut(b).copy_from_slice(fim.row(b));
    }
    Ok(ComplexSpectrum { re, im, source_len: l, full })
}

/// Inverse transform back to a real L x d matrix with 1/L normalization.
///
/// In half mode the stored bins are mirrored with conjugate symmetry before
/// inverting; the imaginary parts of the DC and (even L) Nyquist bins do not
/// influence the output, matching the adjoint used for gradients.
pub fn irfft_cols(spec: &ComplexSpectrum) -> Result<Tensor> {
    let l = spec.source_len;
    let d = spec.re.cols();
    let bins = n_bins(l, spec.full);
    if spec.re.shape() != (bins, d) || spec.im.shape() != (bins, d) {
        return Err(Error::Shape {
            context: "irfft_cols".into(),
            expected: format!("{bins}x{d} spectrum for source_len {l} (full={})", spec.full),
            got: format!("re {:?}, im {:?}", spec.re.shape(), spec.im.shape()),
        });
    }
    let (full_re, full_im) = if spec.full {
        (spec.re.clone(), spec.im.clone())
    } else {
        let mut fre = Tensor::zeros(l, d);
        let mut fim = Tensor::zeros(l, d);
        for b in 0..bins {
            fre.row_mut(b).copy_from_slice(spec.re.row(b));
            fim.row_mut(b).copy_from_slice(spec.im.row(b));
        }
        // Mirror interior bins: X[L-j] = conj(X[j]). The (even-L) Nyquist bin
        // maps onto itself and is left as stored.
        for j in 1..bins {
            let mj = l - j;
            if mj > j {
                for c in 0..d {
                    fre.set(mj, c, spec.re.get(j, c));
                    fim.set(mj, c, -spec.im.get(j, c));
                }
            }
        }
        (fre, fim)
    };
    let (ire, _iim) = dft_columns(&full_re, Some(&full_im), true);
    let mut out = ire;
    out.scale_assign(1.0 / l as f64);
    Ok(out)
}

/// Adjoint of `rfft_cols` viewed as a real-linear map R^{Lxd} -> (re, im).
/// Used as the backward pass of the forward transform.
pub(crate) fn rfft_adjoint(g_re: &Tensor, g_im: &Tensor, source_len: usize, full: bool) -> Tensor {
    let l = source_len;
    let d = g_re.cols();
    let bins = n_bins(l, full);
    assert_eq!(g_re.shape(), (bins, d));
    assert_eq!(g_im.shape(), (bins, d));
    // grad_x[t] = Re( sum_j (gRe_j + i gIm_j) e^{+i 2pi j t / L} ): zero-extend
    // the cotangent bins (no mirroring) and run an unnormalized inverse DFT.
    let (ere, eim) = if full {
        (g_re.clone(), g_im.clone())
    } else {
        let mut ere = Tensor::zeros(l, d);
        let mut eim = Tensor::zeros(l, d);
        for b in 0..bins {
            ere.row_mut(b).copy_from_slice(g_re.row(b));
            eim.row_mut(b).copy_from_slice(g_im.row(b));
        }
        (ere, eim)
    };
    let (re, _) = dft_columns(&ere, Some(&eim), true);
    re
}

/// Adjoint of `irfft_cols`: maps a cotangent on the real output back to
/// (re, im) cotangents on the spectrum.
pub(crate) fn irfft_adjoint(g: &Tensor, source_len: usize, full: bool) -> (Tensor, Tensor) {
    let l = source_len;
    let d = g.cols();
    assert_eq!(g.rows(), l);
    let (fre, fim) = dft_columns(g, None, false);
    let bins = n_bins(l, full);
    let mut g_re = Tensor::zeros(bins, d);
    let mut g_im = Tensor::zeros(bins, d);
    let inv_l = 1.0 / l as f64;
    for b in 0..bins {
        let interior = if full { true } else { b != 0 && !(l % 2 == 0 && b == l / 2) };
        let w = if full {
            inv_l
        } else if interior {
            2.0 * inv_l
        } else {
            inv_l
        };
        for c in 0..d {
            g_re.set(b, c, w * fre.get(b, c));
            // DC / Nyquist imaginary parts are dropped by the forward map, so
            // their cotangent is exactly zero in half mode.
            let gi = if full || interior { w * fim.get(b, c) } else { 0.0 };
            g_im.set(b, c, gi);
        }
    }
    (g_re, g_im)
}

// ---------------------------------------------------------------------------
// Scalar activation functions, shared by the autodiff ops and by test oracles.
// ---------------------------------------------------------------------------

/// tanh-approximation GELU (the derivative below matches this definition).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|}).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub threshold: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.threshold)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, e| m.max(e.max_rel_err))
    }

    /// Plain-text table, one row per parameter tensor.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("tensor\tn_coords\tmax_rel_err\tworst_coord\tanalytic\tnumeric\tstatus\n");
        for e in &self.entries {
            let status = if e.max_rel_err < self.threshold { "pass" } else { "FAIL" };
            s.push_str(&format!(
                "{}\t{}\t{:.3e}\t{}\t{:.9e}\t{:.9e}\t{}\n",
                e.name, e.n_coords, e.max_rel_err, e.worst_coord, e.analytic_at_worst, e.numeric_at_worst, status
            ));
        }
        s
    }
}

/// Central-difference gradient check.
///
/// `f` must be a deterministic function of the tensors it is handed;
/// `analytic` holds one gradient tensor per base tensor (matching shapes).
/// Relative error per coordinate: |ga - gn| / max(1, |ga|, |gn|).
pub fn grad_check(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    names: &[&str],
    base: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    assert_eq!(base.len(), analytic.len(), "one analytic gradient per tensor");
    assert_eq!(base.len(), names.len(), "one name per tensor");
    let mut work: Vec<Tensor> = base.to_vec();
    let mut entries = Vec::with_capacity(base.len());
    for ti in 0..base.len() {
        assert_eq!(base[ti].shape(), analytic[ti].shape(), "gradient shape mismatch for {}", names[ti]);
        let mut worst = GradCheckEntry {
            name: names[ti].to_string(),
            n_coords: base[ti].len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..base[ti].len() {
            let orig = base[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let fp = f(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let fm = f(&work)?;
            work[ti].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while perturbing {}[{}]: f+ = {fp}, f- = {fm}",
                    names[ti], i
                )));
            }
            let gn = (fp - fm) / (2.0 * step);
            let ga = analytic[ti].data()[i];
            let rel = (ga - gn).abs() / 1.0f64.max(ga.abs()).max(gn.abs());
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_coord = i;
                worst.analytic_at_worst = ga;
                worst.numeric_at_worst = gn;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries, threshold, step })
}
