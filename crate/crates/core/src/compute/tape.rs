//! Reverse-mode tape over dense tensors.
//!
//! Forward values are computed eagerly as nodes are recorded; `backward`
//! walks the tape in reverse creation order and accumulates gradients, so a
//! tensor used several times receives the sum of its per-use gradients.
//! Reductions inside every primitive run in a fixed order: two forwards over
//! identical inputs are bit-identical.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sparse::SparseMatrix;
use crate::tensor::{matmul, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

/// Whether batch statistics are computed (train) or running ones used (eval).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-channel batch statistics produced by a train-mode batch norm, handed
/// back so the owning layer can fold them into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Elements per channel that entered the statistics.
    pub count: usize,
}

enum Op<T: Real> {
    Leaf,
    Add(Val, Val),
    Scale(Val, T),
    Relu(Val),
    Sigmoid(Val),
    Matmul(Val, Val),
    Linear {
        x: Val,
        w: Val,
        b: Option<Val>,
    },
    Conv2d {
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        padding: usize,
    },
    BatchNormTrain {
        x: Val,
        gamma: Val,
        beta: Val,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Val,
        gamma: Val,
        beta: Val,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Val),
    Mean(Val),
    SpMm {
        a: Arc<SparseMatrix<T>>,
        x: Val,
    },
    SelectRows {
        x: Val,
        rows: Arc<Vec<usize>>,
    },
    WeightedBce {
        p: Val,
        labels: Arc<Vec<T>>,
        pos_weight: T,
        eps: T,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every tape node that needed them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Val) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Val {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor. `needs_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Val {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Val {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Val, c: T) -> Val {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        let value = self.value(x).map(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(value, needs, Op::Sigmoid(x))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} @ {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Matmul(a, b)))
    }

    /// `y = x @ w^T + b` with `x: n x d`, `w: o x d`, `b: o`.
    pub fn linear(&mut self, x: Val, w: Val, b: Option<Val>) -> Result<Val> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape(format!("linear input {:?} weight {:?}", sx, sw)));
        }
        let (n, d, o) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            let sb = self.value(b).shape();
            if sb != [o] {
                return Err(Error::shape(format!("linear bias {:?} wants [{}]", sb, o)));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * o];
        for i in 0..n {
            let xrow = &xd[i * d..(i + 1) * d];
            let orow = &mut out[i * o..(i + 1) * o];
            for (j, ov) in orow.iter_mut().enumerate() {
                let wrow = &wd[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for (&xv, &wv) in xrow.iter().zip(wrow.iter()) {
                    acc += xv * wv;
                }
                *ov = acc;
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for row in out.chunks_mut(o) {
                for (ov, &bv) in row.iter_mut().zip(bd.iter()) {
                    *ov += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, needs, Op::Linear { x, w, b }))
    }

    /// Cross-correlation with zero padding: `x: N x Ci x H x W`,
    /// `w: Co x Ci x kh x kw`.
    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        padding: usize,
    ) -> Result<Val> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d input {:?} kernel {:?}", sx, sw)));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {:?} larger than padded input {:?}",
                sw, sx
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        if let Some(b) = b {
            let sb = self.value(b).shape();
            if sb != [co] {
                return Err(Error::shape(format!("conv2d bias {:?} wants [{}]", sb, co)));
            }
        }
        let xd = self.value(x).data();
        let kd = self.value(w).data();
        let bias: Option<Vec<T>> = b.map(|b| self.value(b).data().to_vec());
        let geo = ConvGeometry {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let per_image: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|img| {
                let xs = &xd[img * ci * h * wd..(img + 1) * ci * h * wd];
                let cols = im2col(xs, &geo);
                let mut y = matmul(kd, &cols, co, ci * kh * kw, ho * wo);
                if let Some(bias) = &bias {
                    for c in 0..co {
                        let bv = bias[c];
                        for v in &mut y[c * ho * wo..(c + 1) * ho * wo] {
                            *v += bv;
                        }
                    }
                }
                y
            })
            .collect();
        let mut out = Vec::with_capacity(n * co * ho * wo);
        for y in per_image {
            out.extend_from_slice(&y);
        }
        let value = Tensor::new(vec![n, co, ho, wo], out)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            value,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Train-mode batch normalization over `N x C x H x W`, returning the
    /// batch statistics for running-estimate updates.
    pub fn batchnorm_train(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        eps: T,
    ) -> Result<(Val, BatchStats<T>)> {
        let sx = self.value(x).shape().to_vec();
        let c = self.check_bn_shapes(&sx, gamma, beta)?;
        let (n, h, w) = (sx[0], sx[2], sx[3]);
        let m = n * h * w;
        if m == 0 {
            return Err(Error::shape("batchnorm over empty batch"));
        }
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let m_t = T::of(m as f64);
        for ch in 0..c {
            let mut acc = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for &v in &xd[base..base + h * w] {
                    acc += v;
                }
            }
            mean[ch] = acc / m_t;
            let mu = mean[ch];
            let mut acc2 = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for &v in &xd[base..base + h * w] {
                    let d = v - mu;
                    acc2 += d * d;
                }
            }
            var[ch] = acc2 / m_t;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for k in 0..h * w {
                    out[base + k] = (xd[base + k] - mu) * is * g + be;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: m,
        };
        let v = self.push(
            value,
            needs,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Val> {
        let sx = self.value(x).shape().to_vec();
        let c = self.check_bn_shapes(&sx, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batchnorm running stats len {} wants {}",
                running_mean.len(),
                c
            )));
        }
        let (n, h, w) = (sx[0], sx[2], sx[3]);
        let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mean = running_mean.to_vec();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for k in 0..h * w {
                    out[base + k] = (xd[base + k] - mu) * is * g + be;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            needs,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        ))
    }

    fn check_bn_shapes(&self, sx: &[usize], gamma: Val, beta: Val) -> Result<usize> {
        if sx.len() != 4 {
            return Err(Error::shape(format!("batchnorm input {:?} wants 4-d", sx)));
        }
        let c = sx[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(v).shape();
            if s != [c] {
                return Err(Error::shape(format!("batchnorm {} {:?} wants [{}]", name, s, c)));
            }
        }
        Ok(c)
    }

    /// `N x C x H x W -> N x C` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Val) -> Result<Val> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool input {:?} wants 4-d", sx)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = T::of((h * w) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut acc = T::zero();
            for &v in &xd[i * h * w..(i + 1) * h * w] {
                acc += v;
            }
            out[i] = acc / hw;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::GlobalAvgPool(x)))
    }

    /// Mean over all elements, producing a scalar node.
    pub fn mean(&mut self, x: Val) -> Val {
        let xd = self.value(x).data();
        let mut acc = T::zero();
        for &v in xd {
            acc += v;
        }
        let value = Tensor::scalar(acc / T::of(xd.len() as f64));
        let needs = self.needs(x);
        self.push(value, needs, Op::Mean(x))
    }

    /// Sparse-constant times dense-node product: `a @ x`.
    pub fn spmm(&mut self, a: Arc<SparseMatrix<T>>, x: Val) -> Result<Val> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 || sx[0] != a.ncols() {
            return Err(Error::shape(format!(
                "spmm {}x{} @ {:?}",
                a.nrows(),
                a.ncols(),
                sx
            )));
        }
        let d = sx[1];
        let out = a.matmul_dense(self.value(x).data(), d);
        let value = Tensor::new(vec![a.nrows(), d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SpMm { a, x }))
    }

    /// Gather rows of a matrix.
    pub fn select_rows(&mut self, x: Val, rows: Vec<usize>) -> Result<Val> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::shape(format!("select_rows input {:?} wants 2-d", sx)));
        }
        let (n, d) = (sx[0], sx[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(format!("row {} out of bounds for {} rows", bad, n)));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            needs,
            Op::SelectRows {
                x,
                rows: Arc::new(rows),
            },
        ))
    }

    /// Class-weighted binary cross entropy over a `B x C` probability matrix.
    ///
    /// Positives are weighted by the negative/positive count ratio of the
    /// whole batch label matrix (1 when there is no positive); per-sample
    /// losses are averaged over the batch dimension. Probabilities are
    /// clamped to `[eps, 1 - eps]` inside the logs.
    pub fn weighted_bce(&mut self, p: Val, labels: &Tensor<T>, eps: T) -> Result<Val> {
        let sp = self.value(p).shape().to_vec();
        if sp.len() != 2 || labels.shape() != sp.as_slice() {
            return Err(Error::shape(format!(
                "weighted_bce probs {:?} labels {:?}",
                sp,
                labels.shape()
            )));
        }
        let (bsz, _c) = (sp[0], sp[1]);
        let ld = labels.data();
        let n_pos = ld.iter().filter(|&&y| y > T::of(0.5)).count();
        let n_neg = ld.len() - n_pos;
        let pos_weight = if n_pos > 0 {
            T::of(n_neg as f64) / T::of(n_pos as f64)
        } else {
            T::one()
        };
        let pd = self.value(p).data();
        let one = T::one();
        let hi = one - eps;
        let mut total = T::zero();
        for (&pv, &yv) in pd.iter().zip(ld.iter()) {
            let pc = pv.max(eps).min(hi);
            if yv > T::of(0.5) {
                total -= pos_weight * pc.ln();
            } else {
                total -= (one - pc).ln();
            }
        }
        let value = Tensor::scalar(total / T::of(bsz as f64));
        let needs = self.needs(p);
        let labels_arc = Arc::new(ld.to_vec());
        Ok(self.push(
            value,
            needs,
            Op::WeightedBce {
                p,
                labels: labels_arc,
                pos_weight,
                eps,
            },
        ))
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: Val) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward wants a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gy = grads[idx].take().unwrap();
            grads[idx] = Some(gy.clone());
            self.backprop_node(idx, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Val,
        contribution: Tensor<T>,
    ) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.clone())?;
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|g| g * c))?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = gy.zip_map(xv, |g, v| if v > T::zero() { g } else { T::zero() })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[idx].value;
                let gx = gy.zip_map(yv, |g, y| g * y * (T::one() - y))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // ga = gy @ b^T
                    let ga = matmul_nt(gy.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                }
                if self.needs(*b) {
                    // gb = a^T @ gy
                    let gb = matmul_tn(self.value(*a).data(), gy.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, d, o) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    // gx = gy @ w
                    let gx = matmul(gy.data(), self.value(*w).data(), n, o, d);
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], gx)?)?;
                }
                if self.needs(*w) {
                    // gw = gy^T @ x
                    let gw = matmul_tn(gy.data(), self.value(*x).data(), n, o, d);
                    self.accumulate(grads, *w, Tensor::new(vec![o, d], gw)?)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in gy.data().chunks(o) {
                            for (g, &v) in gb.iter_mut().zip(row.iter()) {
                                *g += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![o], gb)?)?;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                self.backprop_conv2d(*x, *w, *b, *stride, *padding, gy, grads)?;
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                self.backprop_bn_train(*x, *gamma, *beta, mean, inv_std, gy, grads)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                self.backprop_bn_eval(*x, *gamma, *beta, mean, inv_std, gy, grads)?;
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.value(*x).shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let inv = T::of((h * w) as f64).recip();
                let gyd = gy.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for i in 0..n * c {
                    let g = gyd[i] * inv;
                    for v in &mut gx[i * h * w..(i + 1) * h * w] {
                        *v = g;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx.to_vec(), gx)?)?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = gy.scalar_value() / T::of(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g))?;
            }
            Op::SpMm { a, x } => {
                let d = self.value(*x).shape()[1];
                let gx = a.matmul_dense_transposed(gy.data(), d);
                self.accumulate(grads, *x, Tensor::new(vec![a.ncols(), d], gx)?)?;
            }
            Op::SelectRows { x, rows } => {
                let sx = self.value(*x).shape();
                let d = sx[1];
                let mut gx = vec![T::zero(); sx[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    let src = &gy.data()[i * d..(i + 1) * d];
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for (o, &s) in dst.iter_mut().zip(src.iter()) {
                        *o += s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx.to_vec(), gx)?)?;
            }
            Op::WeightedBce {
                p,
                labels,
                pos_weight,
                eps,
            } => {
                let pv = self.value(*p);
                let bsz = pv.shape()[0];
                let g = gy.scalar_value() / T::of(bsz as f64);
                let one = T::one();
                let mut gp = vec![T::zero(); pv.numel()];
                for ((gpv, &prob), &y) in gp.iter_mut().zip(pv.data().iter()).zip(labels.iter()) {
                    if y > T::of(0.5) {
                        *gpv = -g * *pos_weight / prob.max(*eps);
                    } else {
                        *gpv = g / (one - prob).max(*eps);
                    }
                }
                self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), gp)?)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        padding: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let sy = gy.shape();
        let (ho, wo) = (sy[2], sy[3]);
        let geo = ConvGeometry {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let xd = self.value(x).data();
        let kd = self.value(w).data();
        let gyd = gy.data();
        let ckk = ci * kh * kw;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let need_b = b.map(|b| self.needs(b)).unwrap_or(false);
        // Per-image partials, reduced sequentially in image order.
        let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|img| {
                let gy_img = &gyd[img * co * ho * wo..(img + 1) * co * ho * wo];
                let gx_img = if need_x {
                    // gcols = w^T @ gy  (ckk x co) @ (co x howo)
                    let gcols = matmul_tn(kd, gy_img, co, ckk, ho * wo);
                    Some(col2im(&gcols, &geo))
                } else {
                    None
                };
                let gw_img = if need_w {
                    let xs = &xd[img * ci * h * wd..(img + 1) * ci * h * wd];
                    let cols = im2col(xs, &geo);
                    // gw = gy @ cols^T  (co x howo) @ (howo x ckk)
                    Some(matmul_nt(gy_img, &cols, co, ho * wo, ckk))
                } else {
                    None
                };
                let gb_img = if need_b {
                    let mut gb = vec![T::zero(); co];
                    for c in 0..co {
                        let mut acc = T::zero();
                        for &v in &gy_img[c * ho * wo..(c + 1) * ho * wo] {
                            acc += v;
                        }
                        gb[c] = acc;
                    }
                    Some(gb)
                } else {
                    None
                };
                (gx_img, gw_img, gb_img)
            })
            .collect();
        if need_x {
            let mut gx = Vec::with_capacity(n * ci * h * wd);
            for part in &parts {
                gx.extend_from_slice(part.0.as_ref().unwrap());
            }
            self.accumulate(grads, x, Tensor::new(sx.clone(), gx)?)?;
        }
        if need_w {
            let mut gw = vec![T::zero(); co * ckk];
            for part in &parts {
                for (acc, &v) in gw.iter_mut().zip(part.1.as_ref().unwrap().iter()) {
                    *acc += v;
                }
            }
            self.accumulate(grads, w, Tensor::new(sw, gw)?)?;
        }
        if let Some(b) = b {
            if need_b {
                let mut gb = vec![T::zero(); co];
                for part in &parts {
                    for (acc, &v) in gb.iter_mut().zip(part.2.as_ref().unwrap().iter()) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, b, Tensor::new(vec![co], gb)?)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_bn_train(
        &self,
        x: Val,
        gamma: Val,
        beta: Val,
        mean: &[T],
        inv_std: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let sx = self.value(x).shape().to_vec();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let m = T::of((n * h * w) as f64);
        let xd = self.value(x).data();
        let gyd = gy.data();
        let gd = self.value(gamma).data();
        let mut gx = vec![T::zero(); xd.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, is, g) = (mean[ch], inv_std[ch], gd[ch]);
            // First pass: sums of gxhat and gxhat * xhat.
            let mut sum_gxhat = T::zero();
            let mut sum_gxhat_xhat = T::zero();
            let mut sum_gy = T::zero();
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for k in 0..h * w {
                    let gyv = gyd[base + k];
                    let xhat = (xd[base + k] - mu) * is;
                    let gxhat = gyv * g;
                    sum_gxhat += gxhat;
                    sum_gxhat_xhat += gxhat * xhat;
                    sum_gy += gyv;
                    ggamma[ch] += gyv * xhat;
                }
            }
            gbeta[ch] = sum_gy;
            // gx = (gxhat - mean(gxhat) - xhat * mean(gxhat * xhat)) * inv_std
            let mean_gxhat = sum_gxhat / m;
            let mean_gxhat_xhat = sum_gxhat_xhat / m;
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for k in 0..h * w {
                    let xhat = (xd[base + k] - mu) * is;
                    let gxhat = gyd[base + k] * g;
                    gx[base + k] = (gxhat - mean_gxhat - xhat * mean_gxhat_xhat) * is;
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(sx, gx)?)?;
        self.accumulate(grads, gamma, Tensor::new(vec![c], ggamma)?)?;
        self.accumulate(grads, beta, Tensor::new(vec![c], gbeta)?)?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_bn_eval(
        &self,
        x: Val,
        gamma: Val,
        beta: Val,
        mean: &[T],
        inv_std: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let sx = self.value(x).shape().to_vec();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let xd = self.value(x).data();
        let gyd = gy.data();
        let gd = self.value(gamma).data();
        let mut gx = vec![T::zero(); xd.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, is, g) = (mean[ch], inv_std[ch], gd[ch]);
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for k in 0..h * w {
                    let gyv = gyd[base + k];
                    gx[base + k] = gyv * g * is;
                    ggamma[ch] += gyv * (xd[base + k] - mu) * is;
                    gbeta[ch] += gyv;
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(sx, gx)?)?;
        self.accumulate(grads, gamma, Tensor::new(vec![c], ggamma)?)?;
        self.accumulate(grads, beta, Tensor::new(vec![c], gbeta)?)?;
        Ok(())
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

/// Unfold one image `ci x h x w` into `(ci*kh*kw) x (ho*wo)` patch columns.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols_w = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.ci * g.kh * g.kw * cols_w];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * cols_w;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        cols[row + oy * g.wo + ox] = x[(c * g.h + iy) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-column gradients back onto the input image (scatter-add).
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols_w = g.ho * g.wo;
    let mut x = vec![T::zero(); g.ci * g.h * g.w];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * cols_w;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        x[(c * g.h + iy) * g.w + ix as usize] += cols[row + oy * g.wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// `c = a @ b^T` with `a: m x k`, `b: n x k`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, ov) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *ov = acc;
        }
    }
    out
}

/// `c = a^T @ b` with `a: m x k`, `b: m x n`.
fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for t in 0..m {
        let arow = &a[t * k..(t + 1) * k];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}
