//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep visits each node once, last
//! to first.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy { x: Var, s: Var, idx: usize },
    StraightThrough { w: Var, idx: usize },
    GradScale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Softmax(Var),
    Index(Var, usize),
    Gather(Vec<Var>),
    Bilinear { a: Var, m: Vec<f64>, b: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    KernelPrefix { w: Var, full: [usize; 4] },
    VecPrefix(Var),
    PadChannels { x: Var, c_in: usize },
    ChannelPrefix { x: Var, c_in: usize },
    Concat(Var, Var),
    Affine { x: Var, scale: Var, bias: Var },
    Normalize { x: Var, inv_std: Vec<f64> },
    Resize { x: Var, h: usize, w: usize },
    Ohem { logits: Var, labels: Vec<usize>, selected: Vec<usize>, probs: Vec<f64> },
    Kl { student: Var, teacher_logp: Vec<f64>, student_p: Vec<f64>, student_logp: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_connected(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    softmax_slice(z)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::Mul(a, b)))
    }

    /// Sum of a non-empty list of same-shape nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::Shape("empty sum".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let v = t.data().iter().map(|x| x * k).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, v).expect("same len"), Op::Scale(a, k))
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape("add_const length".into()));
        }
        let t = self.value(a);
        let v = t.data().iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::AddConst(a)))
    }

    /// `x * s[idx]` where `s` is a vector node.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let k = self.value(s).data()[idx];
        let t = self.value(x);
        let v = t.data().iter().map(|a| a * k).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, v).expect("same len"), Op::ScaleBy { x, s, idx })
    }

    /// Scalar node whose value is exactly 1 and whose gradient flows to `w[idx]`.
    pub fn straight_through(&mut self, w: Var, idx: usize) -> Var {
        self.push(Tensor::scalar(1.0), Op::StraightThrough { w, idx })
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `k`.
    pub fn grad_scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::GradScale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().map(|x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, v).expect("same len"), Op::Relu(a))
    }

    /// Softmax of a flat vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let p = softmax_slice(self.value(a).data());
        self.push(Tensor::vector(p), Op::Softmax(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).data()[i];
        self.push(Tensor::scalar(v), Op::Index(a, i))
    }

    /// Stack scalar nodes into a vector.
    pub fn gather(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.scalar(x)).collect();
        self.push(Tensor::vector(v), Op::Gather(xs.to_vec()))
    }

    /// Scalar `aᵀ M b` with a constant row-major matrix `M` of shape |a|×|b|.
    pub fn bilinear(&mut self, a: Var, m: Vec<f64>, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if m.len() != na * nb {
            return Err(Error::Shape(format!("bilinear {na}x{nb} with {} entries", m.len())));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut s = 0.0;
        for i in 0..na {
            for j in 0..nb {
                s += av[i] * m[i * nb + j] * bv[j];
            }
        }
        Ok(self.push(Tensor::scalar(s), Op::Bilinear { a, m, b }))
    }

    /// k×k convolution, zero padding k/2, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv input {xs:?} with kernel {ws:?}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Shape(format!("unsupported stride {stride}")));
        }
        let geom = ConvGeom { n: xs[0], ci: xs[1], h: xs[2], w: xs[3], co: ws[0], k: ws[2], stride };
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), geom);
        let t = Tensor::new(vec![geom.n, geom.co, geom.ho(), geom.wo()], y)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom }))
    }

    /// Leading `[out, inp]` block of an `[O, I, k, k]` kernel.
    pub fn kernel_prefix(&mut self, w: Var, out: usize, inp: usize) -> Result<Var> {
        let s = self.shape(w);
        if s.len() != 4 || out > s[0] || inp > s[1] {
            return Err(Error::Shape(format!("kernel prefix [{out},{inp}] of {s:?}")));
        }
        let full = [s[0], s[1], s[2], s[3]];
        let kk = full[2] * full[3];
        let src = self.value(w).data();
        let mut v = Vec::with_capacity(out * inp * kk);
        for o in 0..out {
            let base = o * full[1] * kk;
            v.extend_from_slice(&src[base..base + inp * kk]);
        }
        let t = Tensor::new(vec![out, inp, full[2], full[3]], v)?;
        Ok(self.push(t, Op::KernelPrefix { w, full }))
    }

    /// Leading `n` entries of a vector.
    pub fn vec_prefix(&mut self, v: Var, n: usize) -> Result<Var> {
        let src = self.value(v).data();
        if n > src.len() {
            return Err(Error::Shape(format!("prefix {n} of {}", src.len())));
        }
        let t = Tensor::vector(src[..n].to_vec());
        Ok(self.push(t, Op::VecPrefix(v)))
    }

    /// Zero-pad channels of an NCHW tensor up to `c`.
    pub fn pad_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let (n, ci, h, w) = self.value(x).dims4();
        if c < ci {
            return Err(Error::Shape(format!("cannot pad {ci} channels to {c}")));
        }
        if c == ci {
            return Ok(x);
        }
        let src = self.value(x).data();
        let plane = h * w;
        let mut v = vec![0.0; n * c * plane];
        for b in 0..n {
            v[b * c * plane..b * c * plane + ci * plane].copy_from_slice(&src[b * ci * plane..(b + 1) * ci * plane]);
        }
        let t = Tensor::new(vec![n, c, h, w], v)?;
        Ok(self.push(t, Op::PadChannels { x, c_in: ci }))
    }

    pub fn channel_prefix(&mut self, x: Var, c: usize) -> Result<Var> {
        let (_, ci, _, _) = self.value(x).dims4();
        if c > ci {
            return Err(Error::Shape(format!("channel prefix {c} of {ci}")));
        }
        let t = self.value(x).channel_prefix(c);
        Ok(self.push(t, Op::ChannelPrefix { x, c_in: ci }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape("concat spatial mismatch".into()));
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut v = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            v.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            v.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let t = Tensor::new(vec![n, ca + cb, h, w], v)?;
        Ok(self.push(t, Op::Concat(a, b)))
    }

    /// Per-channel `x * scale[c] + bias[c]`.
    pub fn affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if self.value(scale).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape("affine parameter length".into()));
        }
        let plane = h * w;
        let (sv, bv) = (self.value(scale).data(), self.value(bias).data());
        let mut v = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for e in &mut v[off..off + plane] {
                    *e = *e * sv[ch] + bv[ch];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], v)?;
        Ok(self.push(t, Op::Affine { x, scale, bias }))
    }

    /// Per-channel standardization with statistics over `N × H × W` of this batch.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut v = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let span = |i: usize| (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let mean = (0..n).map(|i| v[span(i)].iter().sum::<f64>()).sum::<f64>() / m;
            let var = (0..n).map(|i| v[span(i)].iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                v[span(i)].iter_mut().for_each(|a| *a = (*a - mean) * is);
            }
            inv_std.push(is);
        }
        let t = Tensor::new(vec![n, c, h, w], v)?;
        Ok(self.push(t, Op::Normalize { x, inv_std }))
    }

    /// Bilinear resize (align-corners=false) to `h × w`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, hi, wi) = self.value(x).dims4();
        if h == 0 || w == 0 {
            return Err(Error::Shape("resize to empty".into()));
        }
        if (h, w) == (hi, wi) {
            return Ok(x);
        }
        let y = kernels::resize_forward(self.value(x).data(), n * c, hi, wi, h, w);
        let t = Tensor::new(vec![n, c, h, w], y)?;
        Ok(self.push(t, Op::Resize { x, h: hi, w: wi }))
    }

    /// Mean cross-entropy over the `keep_fraction` hardest pixels.
    pub fn ohem_cross_entropy(&mut self, logits: Var, labels: &[usize], keep_fraction: f64) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4();
        let pixels = n * h * w;
        if labels.len() != pixels {
            return Err(Error::Shape(format!("{} labels for {pixels} pixels", labels.len())));
        }
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::Invalid(format!("keep_fraction {keep_fraction} outside (0, 1]")));
        }
        let keep = ((keep_fraction * pixels as f64) - 1e-9).ceil() as usize;
        if keep == 0 {
            return Err(Error::Invalid("OHEM selected no pixels".into()));
        }
        let z = self.value(logits).data();
        let plane = h * w;
        let mut probs = vec![0.0; n * k * plane];
        let mut losses = vec![0.0; pixels];
        let mut col = vec![0.0; k];
        for b in 0..n {
            for p in 0..plane {
                for c in 0..k {
                    col[c] = z[(b * k + c) * plane + p];
                }
                let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = col.iter().map(|v| (v - m).exp()).sum();
                let lse = m + s.ln();
                let px = b * plane + p;
                let y = labels[px];
                if y >= k {
                    return Err(Error::Shape(format!("label {y} for {k} classes")));
                }
                losses[px] = lse - col[y];
                for c in 0..k {
                    probs[(b * k + c) * plane + p] = (col[c] - lse).exp();
                }
            }
        }
        let mut order: Vec<usize> = (0..pixels).collect();
        if keep < pixels {
            order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            order.truncate(keep);
            order.sort_unstable();
        }
        let loss = order.iter().map(|&i| losses[i]).sum::<f64>() / keep as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Ohem { logits, labels: labels.to_vec(), selected: order, probs },
        ))
    }

    /// Mean over pixels of KL(softmax(student) ‖ softmax(teacher)); the teacher is a constant.
    pub fn kl_distill(&mut self, student: Var, teacher: &Tensor) -> Result<Var> {
        if self.shape(student) != teacher.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(student), teacher.shape())));
        }
        let (n, k, h, w) = self.value(student).dims4();
        let plane = h * w;
        let log_softmax = |z: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; z.len()];
            let mut col = vec![0.0; k];
            for b in 0..n {
                for p in 0..plane {
                    for c in 0..k {
                        col[c] = z[(b * k + c) * plane + p];
                    }
                    let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    for c in 0..k {
                        out[(b * k + c) * plane + p] = col[c] - lse;
                    }
                }
            }
            out
        };
        let slogp = log_softmax(self.value(student).data());
        let tlogp = log_softmax(teacher.data());
        let sp: Vec<f64> = slogp.iter().map(|v| v.exp()).collect();
        let total: f64 = sp.iter().zip(&slogp).zip(&tlogp).map(|((p, ls), lt)| p * (ls - lt)).sum();
        let loss = total / (n * plane) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kl { student, teacher_logp: tlogp, student_p: sp, student_logp: slogp },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.len()]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g);
                accumulate(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(&mut grads[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[a.0], &ga);
                accumulate(&mut grads[b.0], &gb);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::AddConst(a) => accumulate(&mut grads[a.0], g),
            Op::ScaleBy { x, s, idx } => {
                let sv = self.nodes[s.0].value.data();
                let xv = self.nodes[x.0].value.data();
                let gx: Vec<f64> = g.iter().map(|v| v * sv[*idx]).collect();
                accumulate(&mut grads[x.0], &gx);
                let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                let mut gs = vec![0.0; sv.len()];
                gs[*idx] = dot;
                accumulate(&mut grads[s.0], &gs);
            }
            Op::StraightThrough { w, idx } => {
                let n = self.nodes[w.0].value.len();
                let mut gw = vec![0.0; n];
                gw[*idx] = g[0];
                accumulate(&mut grads[w.0], &gw);
            }
            Op::GradScale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(&mut grads[a.0], &vec![g[0] / n as f64; n]);
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                let ga: Vec<f64> = g.iter().zip(av).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let dot: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                let ga: Vec<f64> = p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Index(a, idx) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                ga[*idx] = g[0];
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Gather(xs) => {
                for (k, x) in xs.iter().enumerate() {
                    accumulate(&mut grads[x.0], &[g[k]]);
                }
            }
            Op::Bilinear { a, m, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (na, nb) = (av.len(), bv.len());
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for r in 0..na {
                    for c in 0..nb {
                        let mv = m[r * nb + c];
                        ga[r] += g[0] * mv * bv[c];
                        gb[c] += g[0] * av[r] * mv;
                    }
                }
                accumulate(&mut grads[a.0], &ga);
                accumulate(&mut grads[b.0], &gb);
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    *geom,
                );
                accumulate(&mut grads[x.0], &gx);
                accumulate(&mut grads[w.0], &gw);
            }
            Op::KernelPrefix { w, full } => {
                let s = node.value.shape();
                let kk = full[2] * full[3];
                let mut gw = vec![0.0; full.iter().product()];
                for o in 0..s[0] {
                    let dst = o * full[1] * kk;
                    let src = o * s[1] * kk;
                    gw[dst..dst + s[1] * kk].copy_from_slice(&g[src..src + s[1] * kk]);
                }
                accumulate(&mut grads[w.0], &gw);
            }
            Op::VecPrefix(v) => {
                let mut gv = vec![0.0; self.nodes[v.0].value.len()];
                gv[..g.len()].copy_from_slice(g);
                accumulate(&mut grads[v.0], &gv);
            }
            Op::PadChannels { x, c_in } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let mut gx = Vec::with_capacity(n * c_in * plane);
                for b in 0..n {
                    gx.extend_from_slice(&g[b * c * plane..b * c * plane + c_in * plane]);
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::ChannelPrefix { x, c_in } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let mut gx = vec![0.0; n * c_in * plane];
                for b in 0..n {
                    gx[b * c_in * plane..b * c_in * plane + c * plane]
                        .copy_from_slice(&g[b * c * plane..(b + 1) * c * plane]);
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Concat(a, b) => {
                let (n, _, h, w) = node.value.dims4();
                let ca = self.nodes[a.0].value.dims4().1;
                let cb = self.nodes[b.0].value.dims4().1;
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                accumulate(&mut grads[a.0], &ga);
                accumulate(&mut grads[b.0], &gb);
            }
            Op::Affine { x, scale, bias } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let xv = self.nodes[x.0].value.data();
                let sv = self.nodes[scale.0].value.data();
                let mut gx = vec![0.0; g.len()];
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for p in off..off + plane {
                            gx[p] = g[p] * sv[ch];
                            gs[ch] += g[p] * xv[p];
                            gb[ch] += g[p];
                        }
                    }
                }
                accumulate(&mut grads[x.0], &gx);
                accumulate(&mut grads[scale.0], &gs);
                accumulate(&mut grads[bias.0], &gb);
            }
            Op::Normalize { x, inv_std } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let m = (n * plane) as f64;
                let y = node.value.data();
                let mut gx = vec![0.0; g.len()];
                for (ch, &is) in inv_std.iter().enumerate() {
                    let span = |i: usize| (i * c + ch) * plane..(i * c + ch + 1) * plane;
                    let (mut mg, mut mgy) = (0.0, 0.0);
                    for i in 0..n {
                        for p in span(i) {
                            mg += g[p];
                            mgy += g[p] * y[p];
                        }
                    }
                    let (mg, mgy) = (mg / m, mgy / m);
                    for i in 0..n {
                        for p in span(i) {
                            gx[p] = is * (g[p] - mg - y[p] * mgy);
                        }
                    }
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Resize { x, h, w } => {
                let (n, c, ho, wo) = node.value.dims4();
                let gx = kernels::resize_backward(g, n * c, *h, *w, ho, wo);
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Ohem { logits, labels, selected, probs } => {
                let (n, k, h, w) = self.nodes[logits.0].value.dims4();
                let plane = h * w;
                let scale = g[0] / selected.len() as f64;
                let mut gz = vec![0.0; n * k * plane];
                for &px in selected {
                    let (b, p) = (px / plane, px % plane);
                    for c in 0..k {
                        let idx = (b * k + c) * plane + p;
                        let target = if labels[px] == c { 1.0 } else { 0.0 };
                        gz[idx] = (probs[idx] - target) * scale;
                    }
                }
                let _ = (h, w);
                accumulate(&mut grads[logits.0], &gz);
            }
            Op::Kl { student, teacher_logp, student_p, student_logp } => {
                let (n, k, h, w) = self.nodes[student.0].value.dims4();
                let plane = h * w;
                let scale = g[0] / (n * plane) as f64;
                let mut gz = vec![0.0; n * k * plane];
                for b in 0..n {
                    for p in 0..plane {
                        let mut kl = 0.0;
                        for c in 0..k {
                            let i = (b * k + c) * plane + p;
                            kl += student_p[i] * (student_logp[i] - teacher_logp[i]);
                        }
                        for c in 0..k {
                            let i = (b * k + c) * plane + p;
                            gz[i] = scale * student_p[i] * (student_logp[i] - teacher_logp[i] - kl);
                        }
                    }
                }
                accumulate(&mut grads[student.0], &gz);
            }
        }
    }
}
