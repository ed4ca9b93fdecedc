//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each op records one node holding the forward value and a closure that maps
//! the node's cotangent to cotangent contributions for its parents. Gradients
//! are validated end-to-end by the central-difference harness in `numerics`;
//! closures capture clones of whatever forward values they need, which keeps
//! the borrow structure trivial at the price of a few small copies.

use crate::numerics::{self, gelu, gelu_prime, n_bins, sigmoid, softplus};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros if the leaf never influenced the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        match &self.g[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value entered the tape");
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input: parameters and data enter the graph through leaves.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    // -- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                vec![(a.0, g.clone()), (b.0, neg)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            out,
            Some(Box::new(move |g| {
                let ga = Tensor::from_vec(g.rows(), g.cols(), g.data().iter().zip(cb.data()).map(|(x, y)| x * y).collect());
                let gb = Tensor::from_vec(g.rows(), g.cols(), g.data().iter().zip(ca.data()).map(|(x, y)| x * y).collect());
                vec![(a.0, ga), (b.0, gb)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.scale_assign(c);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                ga.scale_assign(c);
                vec![(a.0, ga)]
            })),
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let va = &self.nodes[a.0].value;
        let out = va.map(&f);
        let ca = va.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let data = g.data().iter().zip(ca.data()).map(|(gy, &x)| gy * df(x)).collect();
                vec![(a.0, Tensor::from_vec(g.rows(), g.cols(), data))]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, gelu_prime)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    // -- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ca, cb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, matmul_nt(g, &cb)), (b.0, matmul_tn(&ca, g))]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transposed();
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.transposed())])))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.nodes[a.0].value.reshaped(rows, cols);
        let (or, oc) = self.nodes[a.0].value.shape();
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.reshaped(or, oc))])))
    }

    /// X (m x n) + broadcast row b (1 x n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rows(), 1, "add_row expects a 1xn bias");
        assert_eq!(va.cols(), vb.cols(), "add_row width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                vec![(a.0, g.clone()), (b.0, gb)]
            })),
        )
    }

    /// Multiply each row by a constant weight (masking / view selection).
    pub fn scale_rows(&mut self, a: Var, weights: &[f64]) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rows(), weights.len(), "scale_rows weight count");
        let mut out = va.clone();
        for (r, &w) in weights.iter().enumerate() {
            for x in out.row_mut(r) {
                *x *= w;
            }
        }
        let w: Vec<f64> = weights.to_vec();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                for (r, &wr) in w.iter().enumerate() {
                    for x in ga.row_mut(r) {
                        *x *= wr;
                    }
                }
                vec![(a.0, ga)]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ranges = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            ranges.push((p.0, rows, rows + v.rows()));
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(
            out,
            Some(Box::new(move |g| {
                ranges
                    .iter()
                    .map(|&(id, r0, r1)| {
                        let mut part = Tensor::zeros(r1 - r0, g.cols());
                        for r in r0..r1 {
                            part.row_mut(r - r0).copy_from_slice(g.row(r));
                        }
                        (id, part)
                    })
                    .collect()
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(r0 <= r1 && r1 <= va.rows(), "slice_rows out of range");
        let mut out = Tensor::zeros(r1 - r0, va.cols());
        for r in r0..r1 {
            out.row_mut(r - r0).copy_from_slice(va.row(r));
        }
        let (rows, cols) = va.shape();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(rows, cols);
                for r in r0..r1 {
                    ga.row_mut(r).copy_from_slice(g.row(r - r0));
                }
                vec![(a.0, ga)]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            widths.push((p.0, total, total + v.cols()));
            total += v.cols();
        }
        let mut out = Tensor::zeros(rows, total);
        for &(id, c0, c1) in &widths {
            let v = &self.nodes[id].value;
            for r in 0..rows {
                out.row_mut(r)[c0..c1].copy_from_slice(v.row(r));
            }
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                widths
                    .iter()
                    .map(|&(id, c0, c1)| {
                        let mut part = Tensor::zeros(g.rows(), c1 - c0);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[c0..c1]);
                        }
                        (id, part)
                    })
                    .collect()
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(c0 <= c1 && c1 <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), c1 - c0);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[c0..c1]);
        }
        let (rows, cols) = va.shape();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[c0..c1].copy_from_slice(g.row(r));
                }
                vec![(a.0, ga)]
            })),
        )
    }

    /// Embedding lookup: out[i] = table[idx[i]]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = &self.nodes[table.0].value;
        let mut out = Tensor::zeros(idx.len(), vt.cols());
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < vt.rows(), "gather_rows index {r} out of {}", vt.rows());
            out.row_mut(i).copy_from_slice(vt.row(r));
        }
        let idx: Vec<usize> = idx.to_vec();
        let (rows, cols) = vt.shape();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gt = Tensor::zeros(rows, cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (acc, x) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                vec![(table.0, gt)]
            })),
        )
    }

    // -- reductions and normalizers --------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let s: f64 = va.data().iter().sum();
        let (rows, cols) = va.shape();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                vec![(a.0, Tensor::filled(rows, cols, g.data()[0]))]
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let n = va.len() as f64;
        let s: f64 = va.data().iter().sum();
        let (rows, cols) = va.shape();
        self.push(
            Tensor::scalar(s / n),
            Some(Box::new(move |g| {
                vec![(a.0, Tensor::filled(rows, cols, g.data()[0] / n))]
            })),
        )
    }

    /// sum(a .* b) as a 1x1 scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "dot shape mismatch");
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                let gs = g.data()[0];
                let mut ga = cb.clone();
                ga.scale_assign(gs);
                let mut gb = ca.clone();
                gb.scale_assign(gs);
                vec![(a.0, ga), (b.0, gb)]
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let s = out.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let sr = s.row(r);
                    let gr = g.row(r);
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (o, (&si, &gi)) in ga.row_mut(r).iter_mut().zip(sr.iter().zip(gr)) {
                        *o = si * (gi - dot);
                    }
                }
                vec![(a.0, ga)]
            })),
        )
    }

    /// Row-wise layer norm with learned gain/bias (both 1 x n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let (rows, cols) = vx.shape();
        assert_eq!(self.nodes[gain.0].value.shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(self.nodes[bias.0].value.shape(), (1, cols), "layer_norm bias shape");
        let nf = cols as f64;
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mu: f64 = row.iter().sum::<f64>() / nf;
            let var: f64 = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / nf;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &xi) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (xi - mu) * is;
            }
        }
        let vg = self.nodes[gain.0].value.clone();
        let mut out = Tensor::zeros(rows, cols);
        {
            let vb = &self.nodes[bias.0].value;
            for r in 0..rows {
                for c in 0..cols {
                    out.set(r, c, xhat.get(r, c) * vg.get(0, c) + vb.get(0, c));
                }
            }
        }
        let xh = xhat;
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                let mut gb = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xh.row(r);
                    // d/dgain, d/dbias accumulate over rows.
                    for c in 0..cols {
                        gg.data_mut()[c] += gr[c] * xr[c];
                        gb.data_mut()[c] += gr[c];
                    }
                    // gx = inv_std * (h - mean(h) - xhat * mean(h .* xhat)), h = g .* gain
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for c in 0..cols {
                        let h = gr[c] * vg.get(0, c);
                        mean_h += h;
                        mean_hx += h * xr[c];
                    }
                    mean_h /= nf;
                    mean_hx /= nf;
                    for c in 0..cols {
                        let h = gr[c] * vg.get(0, c);
                        gx.set(r, c, inv_std[r] * (h - mean_h - xr[c] * mean_hx));
                    }
                }
                vec![(x.0, gx), (gain.0, gg), (bias.0, gb)]
            })),
        )
    }

    // -- spectral ops -----------------------------------------------------

    /// Forward FFT of an L x d real matrix; the result stacks the real rows on
    /// top of the imaginary rows: (2*bins) x d.
    pub fn rfft_stacked(&mut self, a: Var, full: bool) -> Var {
        let va = &self.nodes[a.0].value;
        let l = va.rows();
        let spec = numerics::rfft_cols(va, full).expect("rfft on non-empty matrix");
        let bins = n_bins(l, full);
        let d = va.cols();
        let mut out = Tensor::zeros(2 * bins, d);
        for b in 0..bins {
            out.row_mut(b).copy_from_slice(spec.re.row(b));
            out.row_mut(bins + b).copy_from_slice(spec.im.row(b));
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gre = Tensor::zeros(bins, d);
                let mut gim = Tensor::zeros(bins, d);
                for b in 0..bins {
                    gre.row_mut(b).copy_from_slice(g.row(b));
                    gim.row_mut(b).copy_from_slice(g.row(bins + b));
                }
                vec![(a.0, numerics::rfft_adjoint(&gre, &gim, l, full))]
            })),
        )
    }

    /// Inverse FFT from a stacked (2*bins) x d spectrum back to source_len x d.
    pub fn irfft_stacked(&mut self, s: Var, source_len: usize, full: bool) -> Var {
        let vs = &self.nodes[s.0].value;
        let bins = n_bins(source_len, full);
        let d = vs.cols();
        assert_eq!(vs.rows(), 2 * bins, "irfft_stacked row count");
        let mut re = Tensor::zeros(bins, d);
        let mut im = Tensor::zeros(bins, d);
        for b in 0..bins {
            re.row_mut(b).copy_from_slice(vs.row(b));
            im.row_mut(b).copy_from_slice(vs.row(bins + b));
        }
        let spec = numerics::ComplexSpectrum { re, im, source_len, full };
        let out = numerics::irfft_cols(&spec).expect("well-shaped spectrum");
        self.push(
            out,
            Some(Box::new(move |g| {
                let (gre, gim) = numerics::irfft_adjoint(g, source_len, full);
                let mut gs = Tensor::zeros(2 * bins, d);
                for b in 0..bins {
                    gs.row_mut(b).copy_from_slice(gre.row(b));
                    gs.row_mut(bins + b).copy_from_slice(gim.row(b));
                }
                vec![(s.0, gs)]
            })),
        )
    }

    /// 0.5 * logdet(I + coef * M M^T) via Cholesky; backward solves against the
    /// factor: dR/dM = coef * (I + coef M M^T)^{-1} M.
    pub fn coding_rate(&mut self, m: Var, coef: f64) -> Var {
        let vm = &self.nodes[m.0].value;
        let rows = vm.rows();
        let mut gram = matmul_nt(vm, vm);
        gram.scale_assign(coef);
        for i in 0..rows {
            let v = gram.get(i, i) + 1.0;
            gram.set(i, i, v);
        }
        let chol = cholesky(&gram).expect("I + coef*MM^T is positive definite");
        let logdet: f64 = (0..rows).map(|i| chol.get(i, i).ln()).sum::<f64>() * 2.0;
        let cm = vm.clone();
        self.push(
            Tensor::scalar(0.5 * logdet),
            Some(Box::new(move |g| {
                let gs = g.data()[0];
                // Solve G X = M column-block via the stored factor.
                let x = cholesky_solve(&chol, &cm);
                let mut gm = x;
                gm.scale_assign(gs * coef);
                vec![(m.0, gm)]
            })),
        )
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "cholesky needs a square matrix");
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Solve (L L^T) X = B given the Cholesky factor L.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let cols = b.cols();
    let mut y = b.clone();
    // forward substitution L y = b
    for i in 0..n {
        for k in 0..i {
            let lik = l.get(i, k);
            for c in 0..cols {
                let v = y.get(i, c) - lik * y.get(k, c);
                y.set(i, c, v);
            }
        }
        let d = l.get(i, i);
        for c in 0..cols {
            let v = y.get(i, c) / d;
            y.set(i, c, v);
        }
    }
    // back substitution L^T x = y
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l.get(k, i);
            for c in 0..cols {
                let v = y.get(i, c) - lki * y.get(k, c);
                y.set(i, c, v);
            }
        }
        let d = l.get(i, i);
        for c in 0..cols {
            let v = y.get(i, c) / d;
            y.set(i, c, v);
        }
    }
    y
}

/// Reverse accumulation from a scalar root.
pub fn backward(tape: &Tape, root: Var) -> Grads {
    assert_eq!(tape.nodes[root.0].value.shape(), (1, 1), "backward root must be scalar");
    let mut g: Vec<Option<Tensor>> = (0..tape.nodes.len()).map(|_| None).collect();
    g[root.0] = Some(Tensor::scalar(1.0));
    for i in (0..=root.0).rev() {
        let Some(gi) = g[i].take() else { continue };
        if let Some(back) = &tape.nodes[i].back {
            for (pid, contrib) in back(&gi) {
                match &mut g[pid] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        g[i] = Some(gi);
    }
    Grads { g }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::tensor::Tensor;
    use rand::Rng;

    /// Generic helper: build a scalar function of named tensors both as a tape
    /// graph (for analytic grads) and as a closure (for finite differences).
    fn check(
        names: &[&str],
        base: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = base.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = backward(&tape, root);
        let analytic: Vec<Tensor> =
            vars.iter().zip(base).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
        let mut f = |p: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = p.iter().map(|x| t.leaf(x.clone())).collect();
            let r = build(&mut t, &vs);
            Ok(t.value(r).data()[0])
        };
        let rep = grad_check(&mut f, names, base, &analytic, 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "gradient check failed:\n{}", rep.to_table());
    }

    fn randt(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::substream(seed, "autodiff-test");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let a = randt(3, 4, 1);
        let b = randt(3, 4, 2);
        check(&["a", "b"], &[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let g = t.gelu(m);
            let sp = t.softplus(g);
            let tt = t.tanh(sp);
            let sg = t.sigmoid(tt);
            t.mean(sg)
        });
    }

    #[test]
    fn matmul_and_structure_grads() {
        let a = randt(3, 4, 3);
        let b = randt(4, 2, 4);
        let c = randt(1, 2, 5);
        check(&["a", "b", "c"], &[a, b, c], |t, v| {
            let mm = t.matmul(v[0], v[1]);
            let ar = t.add_row(mm, v[2]);
            let tr = t.transpose(ar);
            let sl = t.slice_rows(tr, 0, 2);
            let cc = t.concat_cols(&[sl, sl]);
            let rs = t.reshape(cc, 2, 6);
            let sc = t.scale_rows(rs, &[1.0, 0.0]);
            t.sum(sc)
        });
    }

    #[test]
    fn softmax_layernorm_gather_grads() {
        let x = randt(3, 5, 6);
        let gain = randt(1, 5, 7);
        let bias = randt(1, 5, 8);
        let table = randt(4, 5, 9);
        check(&["x", "gain", "bias", "table"], &[x, gain, bias, table], |t, v| {
            let g = t.gather_rows(v[3], &[2, 0, 2]);
            let s = t.add(v[0], g);
            let ln = t.layer_norm(s, v[1], v[2], 1e-8);
            let sm = t.softmax_rows(ln);
            let d = t.dot(sm, s);
            let sp = t.softplus(d);
            t.sum(sp)
        });
    }

    #[test]
    fn fft_grads_half_and_full() {
        for full in [false, true] {
            for l in [6usize, 9] {
                let x = randt(l, 3, 10 + l as u64);
                let names = ["x"];
                check(&names, &[x], |t, v| {
                    let s = t.rfft_stacked(v[0], full);
                    let g = t.gelu(s);
                    let y = t.irfft_stacked(g, l, full);
                    let m = t.mul(y, y);
                    t.sum(m)
                });
            }
        }
    }

    #[test]
    fn coding_rate_grad_and_values() {
        // R(0) = 0.
        let zero = Tensor::zeros(3, 4);
        let mut tape = Tape::new();
        let v = tape.leaf(zero);
        let r = tape.coding_rate(v, 2.0);
        assert_eq!(tape.value(r).data()[0], 0.0);

        // R(I_2) with coef 1: 0.5 * logdet(2 I) = ln 2.
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(eye);
        let r = tape.coding_rate(v, 1.0);
        assert!((tape.value(r).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let m = randt(3, 5, 11);
        check(&["m"], &[m], |t, v| t.coding_rate(v[0], 0.7));
    }

    #[test]
    fn fan_out_accumulates() {
        // Same var used twice: gradients must sum.
        let a = Tensor::scalar(2.0);
        let mut tape = Tape::new();
        let v = tape.leaf(a);
        let m = tape.mul(v, v);
        let grads = backward(&tape, m);
        assert_eq!(grads.get(v).unwrap().data()[0], 4.0);
    }
}
