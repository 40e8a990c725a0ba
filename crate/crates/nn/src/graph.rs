//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass. Calling
//! [`Graph::backward`] with a seed gradient for one node walks the tape in
//! reverse and returns gradients for the trainable parameters that were used.
//! Convolutions are im2col + sgemm; the column buffer is recomputed during
//! the backward pass instead of being kept alive.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub type Var = usize;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn new(store: &'s ParamStore, training: bool, seed: u64) -> Self {
        flush_denormals();
        Self {
            store,
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v].op {
            Op::Param(id) => &self.store.get(*id).value,
            _ => self.nodes[v].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: trainable,
        });
        self.nodes.len() - 1
    }

    /// Stride-1 "same" convolution; `w` is (O, C, k, k) with odd k.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(NnError::Shape(format!(
                "conv weight {ws:?} incompatible with input channels {c}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(NnError::Shape("conv bias shape".into()));
            }
        }
        let (o, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![0.0f32; n * o * hw];
        let mut cols = if k > 1 { vec![0.0f32; ckk * hw] } else { Vec::new() };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let xi = &xv[i * c * hw..(i + 1) * c * hw];
                let src = if k > 1 {
                    im2col(xi, c, h, wd, k, dilation, &mut cols);
                    &cols[..]
                } else {
                    xi
                };
                let yi = &mut out[i * o * hw..(i + 1) * o * hw];
                gemm(o, ckk, hw, wv, (ckk, 1), src, (hw, 1), 0.0, yi, (hw, 1));
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, row) in yi.chunks_exact_mut(hw).enumerate() {
                        let bias = bv[oc];
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(vec![n, o, h, wd], out)?,
            Op::Conv { x, w, b, dilation },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.ng(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let needs = self.ng(x);
        self.push(t, Op::Sigmoid(x), needs)
    }

    /// 2×2 max-pool, stride 2. Spatial extents must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!("max-pool needs even extents, got {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = base + 2 * r * w + 2 * q;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * q + dc;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + r * ow + q;
                    out[o] = xv[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2 { x, argmax },
            needs,
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for r in 0..oh {
                let srow = &src[(r / 2) * w..(r / 2 + 1) * w];
                let drow = &mut dst[r * ow..(r + 1) * ow];
                for (q, d) in drow.iter_mut().enumerate() {
                    *d = srow[q / 2];
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out).expect("shape"),
            Op::Upsample2(x),
            needs,
        )
    }

    /// Channel concatenation of NCHW tensors with equal N, H, W.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut ctot = 0;
        for &v in xs {
            let (n2, c2, h2, w2) = self.value(v).dims4();
            if (n2, h2, w2) != (n, h, w) {
                return Err(NnError::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(v).shape(),
                    self.value(xs[0]).shape()
                )));
            }
            ctot += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for i in 0..n {
            for &v in xs {
                let c = self.value(v).shape()[1];
                out.extend_from_slice(&self.value(v).data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let needs = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new(vec![n, ctot, h, w], out)?,
            Op::Concat(xs.to_vec()),
            needs,
        ))
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// `x` (N, in), `w` (out, in), `b` (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).shape() != [ws[0]] {
            return Err(NnError::Shape(format!("linear: x {xs:?}, w {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            0.0,
            &mut out,
            (fout, 1),
        );
        let bv = self.value(b).data();
        for row in out.chunks_exact_mut(fout) {
            for (v, bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, needs))
    }

    /// Reverse pass from `root`, seeded with `seed` = dL/d(root).
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.value(root).shape() {
            return Err(NnError::Shape(format!(
                "seed gradient {:?} vs root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(seed);
        let mut out = Grads::new(self.store.len());

        for v in (0..=root).rev() {
            let Some(gy) = grads[v].take() else { continue };
            if !self.nodes[v].needs_grad {
                continue;
            }
            match &self.nodes[v].op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, gy),
                Op::Conv { x, w, b, dilation } => {
                    self.conv_backward(*x, *w, *b, *dilation, &gy, &mut grads);
                }
                Op::Relu(x) => {
                    if self.ng(*x) {
                        let y = self.value(v).data();
                        let mut g = gy;
                        for (gv, yv) in g.data_mut().iter_mut().zip(y) {
                            if *yv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        add_grad(&mut grads, *x, g);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.ng(*x) {
                        let y = self.value(v).data();
                        let mut g = gy;
                        for (gv, yv) in g.data_mut().iter_mut().zip(y) {
                            *gv *= yv * (1.0 - yv);
                        }
                        add_grad(&mut grads, *x, g);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.ng(*x) {
                        let mut g = Tensor::zeros(self.value(*x).shape());
                        let gd = g.data_mut();
                        for (gv, &idx) in gy.data().iter().zip(argmax) {
                            gd[idx as usize] += gv;
                        }
                        add_grad(&mut grads, *x, g);
                    }
                }
                Op::Upsample2(x) => {
                    if self.ng(*x) {
                        let (n, c, h, w) = self.value(*x).dims4();
                        let mut g = Tensor::zeros(&[n, c, h, w]);
                        let (oh, ow) = (2 * h, 2 * w);
                        let gd = g.data_mut();
                        for plane in 0..n * c {
                            let src = &gy.data()[plane * oh * ow..(plane + 1) * oh * ow];
                            let dst = &mut gd[plane * h * w..(plane + 1) * h * w];
                            for r in 0..oh {
                                for q in 0..ow {
                                    dst[(r / 2) * w + q / 2] += src[r * ow + q];
                                }
                            }
                        }
                        add_grad(&mut grads, *x, g);
                    }
                }
                Op::Concat(xs) => {
                    let (n, ctot, h, w) = gy.dims4();
                    let hw = h * w;
                    let mut off = 0;
                    for &x in xs {
                        let c = self.value(x).shape()[1];
                        if self.ng(x) {
                            let mut part = Vec::with_capacity(n * c * hw);
                            for i in 0..n {
                                let start = (i * ctot + off) * hw;
                                part.extend_from_slice(&gy.data()[start..start + c * hw]);
                            }
                            add_grad(&mut grads, x, Tensor::new(vec![n, c, h, w], part)?);
                        }
                        off += c;
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.ng(*x) {
                        let mut g = gy;
                        for (gv, m) in g.data_mut().iter_mut().zip(mask) {
                            *gv *= m;
                        }
                        add_grad(&mut grads, *x, g);
                    }
                }
                Op::Reshape(x) => {
                    if self.ng(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        add_grad(&mut grads, *x, gy.reshape(shape)?);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, fin) = (xs[0], xs[1]);
                    let fout = self.value(*w).shape()[0];
                    if self.ng(*w) {
                        let mut gw = vec![0.0f32; fout * fin];
                        gemm(
                            fout,
                            n,
                            fin,
                            gy.data(),
                            (1, fout),
                            self.value(*x).data(),
                            (fin, 1),
                            0.0,
                            &mut gw,
                            (fin, 1),
                        );
                        add_grad(&mut grads, *w, Tensor::new(vec![fout, fin], gw)?);
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0f32; fout];
                        for row in gy.data().chunks_exact(fout) {
                            for (a, r) in gb.iter_mut().zip(row) {
                                *a += r;
                            }
                        }
                        add_grad(&mut grads, *b, Tensor::new(vec![fout], gb)?);
                    }
                    if self.ng(*x) {
                        let mut gx = vec![0.0f32; n * fin];
                        gemm(
                            n,
                            fout,
                            fin,
                            gy.data(),
                            (fout, 1),
                            self.value(*w).data(),
                            (fin, 1),
                            0.0,
                            &mut gx,
                            (fin, 1),
                        );
                        add_grad(&mut grads, *x, Tensor::new(vec![n, fin], gx)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape();
        let (o, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = c * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gyd = gy.data();

        if let Some(b) = b.filter(|&b| self.ng(b)) {
            let mut gb = vec![0.0f32; o];
            for i in 0..n {
                for (oc, acc) in gb.iter_mut().enumerate() {
                    let start = (i * o + oc) * hw;
                    *acc += gyd[start..start + hw].iter().sum::<f32>();
                }
            }
            add_grad(grads, b, Tensor::new(vec![o], gb).expect("shape"));
        }

        let want_w = self.ng(w);
        let want_x = self.ng(x);
        let mut gw = if want_w { vec![0.0f32; o * ckk] } else { Vec::new() };
        let mut gx = if want_x { vec![0.0f32; n * c * hw] } else { Vec::new() };
        let mut cols = if k > 1 { vec![0.0f32; ckk * hw] } else { Vec::new() };
        for i in 0..n {
            let gyi = &gyd[i * o * hw..(i + 1) * o * hw];
            if want_w {
                let xi = &xv[i * c * hw..(i + 1) * c * hw];
                let src = if k > 1 {
                    im2col(xi, c, h, wd, k, dilation, &mut cols);
                    &cols[..]
                } else {
                    xi
                };
                gemm(o, hw, ckk, gyi, (hw, 1), src, (1, hw), 1.0, &mut gw, (ckk, 1));
            }
            if want_x {
                let gxi = &mut gx[i * c * hw..(i + 1) * c * hw];
                if k > 1 {
                    gemm(ckk, o, hw, wv, (1, ckk), gyi, (hw, 1), 0.0, &mut cols, (hw, 1));
                    col2im(&cols, c, h, wd, k, dilation, gxi);
                } else {
                    gemm(c, o, hw, wv, (1, c), gyi, (hw, 1), 0.0, gxi, (hw, 1));
                }
            }
        }
        if want_w {
            add_grad(grads, w, Tensor::new(ws.to_vec(), gw).expect("shape"));
        }
        if want_x {
            add_grad(grads, x, Tensor::new(vec![n, c, h, wd], gx).expect("shape"));
        }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Sets flush-to-zero and denormals-are-zero for the calling thread.
/// Subnormal activations and gradients otherwise slow sgemm down several
/// times once a network has partly converged.
pub fn flush_denormals() {
    #[cfg(any(target_arch = "x86_64", all(target_arch = "x86", target_feature = "sse")))]
    #[allow(deprecated)]
    unsafe {
        #[cfg(target_arch = "x86")]
        use std::arch::x86::{_mm_getcsr, _mm_setcsr};
        #[cfg(target_arch = "x86_64")]
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

/// Logistic function, kept strictly inside (0, 1) even where f32 saturates.
pub fn sigmoid(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

/// `c = a·b + beta·c` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    beta: f32,
    c: &mut [f32],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb) && c.len() >= span(m, n, sc));
    // SAFETY: the assertion above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

fn span(rows: usize, cols: usize, s: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.0 + (cols - 1) * s.1 + 1
    }
}

/// Valid output column range for a kernel tap at offset `off` (may be negative).
fn valid_range(off: isize, len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, d: usize, cols: &mut [f32]) {
    let pad = (d * (k - 1) / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            let dy = (ki * d) as isize - pad;
            for kj in 0..k {
                let dx = (kj * d) as isize - pad;
                let row = &mut cols[((ch * k + ki) * k + kj) * hw..][..hw];
                let (q0, q1) = valid_range(dx, w);
                for r in 0..h {
                    let out = &mut row[r * w..(r + 1) * w];
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize || q0 >= q1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    out[..q0].fill(0.0);
                    out[q1..].fill(0.0);
                    let s0 = (q0 as isize + dx) as usize;
                    out[q0..q1].copy_from_slice(&src[s0..s0 + (q1 - q0)]);
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, d: usize, x: &mut [f32]) {
    let pad = (d * (k - 1) / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            let dy = (ki * d) as isize - pad;
            for kj in 0..k {
                let dx = (kj * d) as isize - pad;
                let row = &cols[((ch * k + ki) * k + kj) * hw..][..hw];
                let (q0, q1) = valid_range(dx, w);
                if q0 >= q1 {
                    continue;
                }
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let s0 = (q0 as isize + dx) as usize;
                    let dst = &mut plane[sr as usize * w + s0..sr as usize * w + s0 + (q1 - q0)];
                    for (dv, sv) in dst.iter_mut().zip(&row[r * w + q0..r * w + q1]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}
