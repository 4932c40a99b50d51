//! Reverse-mode tape. Every op appends one node holding its value, its
//! parent handles and a closure mapping the output gradient to parent
//! gradients; `backward` walks the nodes once in reverse.

use crate::tensor::{mismatch, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(grad_out, parent values, own value) -> parent grads`.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Zeros for nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `a[m,k] · b[k,n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `x·Φ(x)` with the exact Gaussian CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gaussian_cdf(x)
}

/// Sum in ascending order, so any permutation of `vals` gives the same bits.
fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

impl Tape {
    /// Finiteness checking follows the build profile (on in debug builds).
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: "leaf", value, parents: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    fn push(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: BackwardFn) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|v| v.0).collect(),
            backward: Some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(mismatch("backward", format!("loss must have one element, shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = bw(&g, &parents, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len(), "{} returned wrong gradient count", node.op);
            for (&p, gp) in node.parents.iter().zip(pg) {
                accumulate(&mut grads[p], gp);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], mm(av.data(), bv.data(), m, k, n));
        self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(move |g, p, _| {
                let bt = transpose_raw(p[1].data(), k, n);
                let ga = mm(g.data(), &bt, m, n, k);
                let at = transpose_raw(p[0].data(), m, k);
                let gb = mm(&at, g.data(), k, m, n);
                vec![Tensor::from_parts(vec![m, k], ga), Tensor::from_parts(vec![k, n], gb)]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(mismatch("transpose", format!("expected rank 2, got {:?}", av.shape())));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let out = Tensor::from_parts(vec![n, m], transpose_raw(av.data(), m, n));
        self.push(
            "transpose",
            out,
            &[a],
            Box::new(move |g, _, _| vec![Tensor::from_parts(vec![m, n], transpose_raw(g.data(), n, m))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let from = av.shape().to_vec();
        let out = av.reshaped(shape)?;
        self.push(
            "reshape",
            out,
            &[a],
            Box::new(move |g, _, _| vec![Tensor::from_parts(from.clone(), g.data().to_vec())]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add", out, &[a, b], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|g, p, _| {
                let prod = |t: &Tensor| {
                    Tensor::from_parts(t.shape().to_vec(), g.data().iter().zip(t.data()).map(|(x, y)| x * y).collect())
                };
                vec![prod(p[1]), prod(p[0])]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, &[a], Box::new(move |g, _, _| vec![g.map(|v| v * s)]))
    }

    /// `x[…, d] + b[d]`, broadcast over all leading positions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = *xv.shape().last().unwrap_or(&0);
        if bv.rank() != 1 || bv.shape()[0] != d {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let data = xv.data().iter().enumerate().map(|(i, v)| v + bv.data()[i % d]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(
            "add_bias",
            out,
            &[x, b],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; d];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % d] += v;
                }
                vec![g.clone(), Tensor::from_parts(vec![d], gb)]
            }),
        )
    }

    /// `x[…, d_in] · w[d_in, d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().ok_or_else(|| mismatch("linear", "rank-0 input"))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(mismatch("linear", format!("{xs:?} · {ws:?}")));
        }
        let rows = xs.iter().product::<usize>() / d_in.max(1);
        let flat = self.reshape(x, &[rows, d_in])?;
        let prod = self.matmul(flat, w)?;
        let biased = self.add_bias(prod, b)?;
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(biased, &out_shape)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(
            "relu",
            out,
            &[a],
            Box::new(|g, p, _| {
                let d = g.data().iter().zip(p[0].data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 });
                vec![Tensor::from_parts(g.shape().to_vec(), d.collect())]
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        self.push(
            "gelu",
            out,
            &[a],
            Box::new(|g, p, _| {
                let d = g.data().iter().zip(p[0].data()).map(|(g, &x)| g * (gaussian_cdf(x) + x * gaussian_pdf(x)));
                vec![Tensor::from_parts(g.shape().to_vec(), d.collect())]
            }),
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner) = av.axis_split("softmax", axis)?;
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (out[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] /= sum;
                }
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(
            "softmax",
            out,
            &[a],
            Box::new(move |g, _, y| {
                let (gd, yd) = (g.data(), y.data());
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                vec![Tensor::from_parts(g.shape().to_vec(), gx)]
            }),
        )
    }

    /// Normalizes each trailing-axis vector to zero mean and unit (population)
    /// variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().ok_or_else(|| mismatch("layer_norm", "rank-0 input"))?;
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", format!("{:?} with γ {:?} β {:?}", xv.shape(), gv.shape(), bv.shape())));
        }
        let normalize = move |xs: &[f64]| -> (Vec<f64>, f64) {
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            (xs.iter().map(|v| (v - mean) * inv).collect(), inv)
        };
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let (xh, _) = normalize(row);
            out.extend(xh.iter().enumerate().map(|(j, h)| h * gv.data()[j] + bv.data()[j]));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _| {
                let (xd, gam) = (p[0].data(), p[1].data());
                let mut gx = Vec::with_capacity(xd.len());
                let (mut gg, mut gb) = (vec![0.0; d], vec![0.0; d]);
                for (row, grow) in xd.chunks(d).zip(g.data().chunks(d)) {
                    let (xh, inv) = normalize(row);
                    let dxh: Vec<f64> = (0..d).map(|j| grow[j] * gam[j]).collect();
                    for j in 0..d {
                        gg[j] += grow[j] * xh[j];
                        gb[j] += grow[j];
                    }
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(&xh).map(|(a, b)| a * b).sum();
                    let n = d as f64;
                    gx.extend((0..d).map(|j| inv / n * (n * dxh[j] - s1 - xh[j] * s2)));
                }
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), gx),
                    Tensor::from_parts(vec![d], gg),
                    Tensor::from_parts(vec![d], gb),
                ]
            }),
        )
    }

    /// Arithmetic mean along `axis`, which is removed from the shape. Each
    /// reduction sums in sorted order, making the result bit-identical under
    /// any permutation along that axis.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner) = av.axis_split("mean", axis)?;
        if len == 0 {
            return Err(mismatch("mean", "empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = av.data()[(o * len + k) * inner + i];
                }
                out[o * inner + i] = sorted_sum(&mut buf) / len as f64;
            }
        }
        let mut shape = av.shape().to_vec();
        let in_shape = shape.clone();
        shape.remove(axis);
        self.push(
            "mean",
            Tensor::from_parts(shape, out),
            &[a],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                vec![Tensor::from_parts(in_shape.clone(), gx)]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.data().iter().sum());
        self.push("sum", out, &[a], Box::new(move |g, _, _| vec![Tensor::filled(&shape, g.data()[0])]))
    }

    /// `Σ a ⊙ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        let av = self.value(a);
        same_shape("weighted_sum", av, w)?;
        let out = Tensor::scalar(av.data().iter().zip(w.data()).map(|(x, y)| x * y).sum());
        let w = w.clone();
        self.push("weighted_sum", out, &[a], Box::new(move |g, _, _| vec![w.map(|v| v * g.data()[0])]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| mismatch("concat", "no parts"))?);
        let base = first.shape().to_vec();
        first.axis_split("concat", axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.value(p).data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            parts,
            Box::new(move |g, p, _| {
                let mut pieces: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (piece, &l) in pieces.iter_mut().zip(&lens) {
                        piece.extend_from_slice(&g.data()[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                pieces.into_iter().zip(p).map(|(d, pv)| Tensor::from_parts(pv.shape().to_vec(), d)).collect()
            }),
        )
    }

    /// `len` entries of `a` starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, full, inner) = av.axis_split("slice", axis)?;
        if start + len > full {
            return Err(mismatch("slice", format!("[{start}, {}) exceeds {full}", start + len)));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        let in_shape = shape.clone();
        shape[axis] = len;
        self.push(
            "slice",
            Tensor::from_parts(shape, out),
            &[a],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Tensor::from_parts(in_shape.clone(), gx)]
            }),
        )
    }

    /// Inverse of [`Tape::concat`]: consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let (_, full, _) = self.value(a).axis_split("split", axis)?;
        if sizes.iter().sum::<usize>() != full {
            return Err(mismatch("split", format!("sizes {sizes:?} do not sum to {full}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Nearest-neighbour ×2 upsampling of `[c, h, w]`.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let [c, h, w] = *av.shape() else {
            return Err(mismatch("upsample_nearest2x", format!("expected [c,h,w], got {:?}", av.shape())));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = av.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(
            "upsample_nearest2x",
            Tensor::from_parts(vec![c, h2, w2], out),
            &[a],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            gx[(ch * h + y / 2) * w + x / 2] += g.data()[(ch * h2 + y) * w2 + x];
                        }
                    }
                }
                vec![Tensor::from_parts(vec![c, h, w], gx)]
            }),
        )
    }

    /// Same-padded stride-1 convolution of `x[c_in,h,w]` with
    /// `k[c_out,c_in,kh,kw]` (odd kernel sides) plus `b[c_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let ([ci, h, w], [co, ci2, kh, kw]) = (xv.shape(), kv.shape()) else {
            return Err(mismatch("conv2d", format!("{:?} * {:?}", xv.shape(), kv.shape())));
        };
        let (ci, h, w, co, kh, kw) = (*ci, *h, *w, *co, *kh, *kw);
        if ci != *ci2 || kh % 2 == 0 || kw % 2 == 0 || bv.shape() != [co] {
            return Err(mismatch("conv2d", format!("{:?} * {:?} + {:?}", xv.shape(), kv.shape(), bv.shape())));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        // Calls f(out_index, in_index, kernel_index) for every valid tap.
        let taps = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for o in 0..co {
                for i in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let ki = ((o * ci + i) * kh + dy) * kw + dx;
                            for y in 0..h {
                                let yy = y + dy;
                                if yy < ph || yy - ph >= h {
                                    continue;
                                }
                                for xx in 0..w {
                                    let xs = xx + dx;
                                    if xs < pw || xs - pw >= w {
                                        continue;
                                    }
                                    f((o * h + y) * w + xx, (i * h + yy - ph) * w + xs - pw, ki);
                                }
                            }
                        }
                    }
                }
            }
        };
        let mut out: Vec<f64> = (0..co * h * w).map(|j| bv.data()[j / (h * w)]).collect();
        let (xd, kd) = (xv.data(), kv.data());
        taps(&mut |oi, ii, ki| out[oi] += kd[ki] * xd[ii]);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![co, h, w], out),
            &[x, k, b],
            Box::new(move |g, p, _| {
                let (xd, kd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gk = vec![0.0; kd.len()];
                taps(&mut |oi, ii, ki| {
                    gx[ii] += gd[oi] * kd[ki];
                    gk[ki] += gd[oi] * xd[ii];
                });
                let gb = (0..co).map(|o| gd[o * h * w..(o + 1) * h * w].iter().sum()).collect();
                vec![
                    Tensor::from_parts(p[0].shape().to_vec(), gx),
                    Tensor::from_parts(p[1].shape().to_vec(), gk),
                    Tensor::from_parts(vec![co], gb),
                ]
            }),
        )
    }

    /// Inference-mode batch normalization of `x[c,h,w]` with per-channel
    /// running statistics `mean`, `var` and affine `gamma`, `beta`.
    pub fn batch_norm_infer(&mut self, x: Var, mean: Var, var: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w] = *xv.shape() else {
            return Err(mismatch("batch_norm_infer", format!("expected [c,h,w], got {:?}", xv.shape())));
        };
        for v in [mean, var, gamma, beta] {
            if self.shape(v) != [c] {
                return Err(mismatch("batch_norm_infer", format!("statistic {:?} for {c} channels", self.shape(v))));
            }
        }
        let hw = h * w;
        let (m, va, ga, be) = (self.value(mean).data(), self.value(var).data(), self.value(gamma).data(), self.value(beta).data());
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let ch = j / hw;
                ga[ch] * (v - m[ch]) / (va[ch] + eps).sqrt() + be[ch]
            })
            .collect();
        self.push(
            "batch_norm_infer",
            Tensor::from_parts(vec![c, h, w], out),
            &[x, mean, var, gamma, beta],
            Box::new(move |g, p, _| {
                let (xd, m, va, ga) = (p[0].data(), p[1].data(), p[2].data(), p[3].data());
                let mut gx = vec![0.0; xd.len()];
                let (mut gm, mut gv, mut gg, mut gb) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                for (j, (&gj, &xj)) in g.data().iter().zip(xd).enumerate() {
                    let ch = j / hw;
                    let inv = 1.0 / (va[ch] + eps).sqrt();
                    let centered = xj - m[ch];
                    gx[j] = gj * ga[ch] * inv;
                    gm[ch] -= gj * ga[ch] * inv;
                    gv[ch] -= 0.5 * gj * ga[ch] * centered * inv * inv * inv;
                    gg[ch] += gj * centered * inv;
                    gb[ch] += gj;
                }
                let t = |d| Tensor::from_parts(vec![c], d);
                vec![Tensor::from_parts(vec![c, h, w], gx), t(gm), t(gv), t(gg), t(gb)]
            }),
        )
    }

    /// `[c,h,w]` to `[(h/p)(w/p), c·p·p]`: one row per patch in row-major
    /// patch order, each row channel-major then row-major within the patch.
    pub fn patchify(&mut self, a: Var, p: usize) -> Result<Var> {
        let av = self.value(a);
        let [c, h, w] = *av.shape() else {
            return Err(mismatch("patchify", format!("expected [c,h,w], got {:?}", av.shape())));
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(TensorError::PatchDivisibility { h, w, patch: p });
        }
        let (nh, nw) = (h / p, w / p);
        let row_len = c * p * p;
        // Source index for each output slot.
        let src: Vec<usize> = (0..nh * nw * row_len)
            .map(|j| {
                let (patch, r) = (j / row_len, j % row_len);
                let (py, px) = (patch / nw, patch % nw);
                let (ch, dy, dx) = (r / (p * p), (r / p) % p, r % p);
                (ch * h + py * p + dy) * w + px * p + dx
            })
            .collect();
        let out = src.iter().map(|&s| av.data()[s]).collect();
        self.push(
            "patchify",
            Tensor::from_parts(vec![nh * nw, row_len], out),
            &[a],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for (j, &s) in src.iter().enumerate() {
                    gx[s] = g.data()[j];
                }
                vec![Tensor::from_parts(vec![c, h, w], gx)]
            }),
        )
    }
}
