//! Eager tape-based reverse-mode autodiff.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! walks the record in reverse. Construction order is already topological
//! (an op can only reference earlier vars), so no explicit sort is needed.
//! A fresh tape is built per training step; leaves copy their values in, and
//! the optimizer reads gradients back out by [`Var`] id.

use super::array::Array;
use super::kernels;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Recorded operation together with whatever context its backward needs.
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    /// `y[r, :] = x[r, :] + b` over the trailing axis.
    BiasRows(Var, Var),
    /// `y[b, c, :, :] = x[b, c, :, :] + b[c]` over the channel axis.
    BiasChannels(Var, Var),
    Matmul(Var, Var),
    /// Batched matmul `[B,M,K] x [B,K,N]`.
    Bmm(Var, Var),
    /// Batched matmul with transposed right operand `[B,M,K] x [B,N,K]^T`.
    BmmNt(Var, Var),
    Conv2d { x: Var, w: Var, k: usize, stride: usize, pad: usize },
    AvgPool2(Var),
    UpsampleNearest2(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, invstd: Vec<T> },
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<T>, invstd: Vec<T> },
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxLast(Var),
    CrossEntropyMean { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
    /// `[B, C, H, W] -> [B, C]` spatial mean.
    MeanSpatial(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    /// `[B, C] -> [B, C, H, W]` broadcast.
    TileSpatial(Var),
    /// `y[b, t, :] = x[b, t, :] * s[b, :]` for x `[B, T, D]`, s `[B, D]`.
    MulBcastRows(Var, Var),
    /// `y[b, t, :] = x[b, t, :] + s[b, :]` for x `[B, T, D]`, s `[B, D]`.
    AddBcastRows(Var, Var),
}

/// Reverse-mode autodiff tape generic over the element type.
pub struct Tape<T: Scalar> {
    values: Vec<Array<T>>,
    ops: Vec<Op<T>>,
    needs: Vec<bool>,
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Current value of a var.
    pub fn value(&self, v: Var) -> &Array<T> {
        &self.values[v.0]
    }

    /// Gradient of a var after [`Tape::backward`]; `None` if no gradient
    /// flowed to it (or it does not require one).
    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.grads[v.0].as_ref()
    }

    /// Record a differentiable leaf (parameters, trainable inputs).
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a non-differentiable input (data, masks, targets).
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn push_op(&mut self, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        self.push(value, op, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    // ----- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_in_place(self.value(b));
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| x - y).collect();
        let out = Array::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| x * y).collect();
        let out = Array::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        Ok(self.push_op(out, Op::Scale(a, c), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        Ok(self.push_op(out, Op::AddScalar(a), &[a]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * sigmoid(v));
        Ok(self.push_op(out, Op::Silu(a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_tanh);
        Ok(self.push_op(out, Op::Gelu(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::ZERO));
        Ok(self.push_op(out, Op::Relu(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        Ok(self.push_op(out, Op::Tanh(a), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.abs());
        Ok(self.push_op(out, Op::Abs(a), &[a]))
    }

    // ----- bias broadcasts -------------------------------------------------

    /// Add a vector `b[D]` to every row of `x[..., D]`.
    pub fn bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self
            .value(x)
            .shape()
            .last()
            .ok_or_else(|| Error::shape("bias_rows", "x must have rank >= 1".to_string()))?;
        if self.value(b).shape() != [d] {
            return Err(Error::shape(
                "bias_rows",
                format!("x {:?} vs b {:?}", self.value(x).shape(), self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        Ok(self.push_op(out, Op::BiasRows(x, b), &[x, b]))
    }

    /// Add a vector `b[C]` to every channel plane of `x[B, C, H, W]`.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(b).shape() != [xs[1]] {
            return Err(Error::shape(
                "bias_channels",
                format!("x {:?} vs b {:?}", xs, self.value(b).shape()),
            ));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bb = bv[i % c];
            for v in plane.iter_mut() {
                *v += bb;
            }
        }
        Ok(self.push_op(out, Op::BiasChannels(x, b), &[x, b]))
    }

    /// `y[b, t, :] = x[b, t, :] * s[b, :]` for x `[B, T, D]` and s `[B, D]`.
    pub fn mul_bcast_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (bs, t, d) = self.bcast_rows_dims("mul_bcast_rows", x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for b in 0..bs {
            let sb = &sv[b * d..(b + 1) * d];
            for row in out.data_mut()[b * t * d..(b + 1) * t * d].chunks_mut(d) {
                for (v, &ss) in row.iter_mut().zip(sb) {
                    *v *= ss;
                }
            }
        }
        Ok(self.push_op(out, Op::MulBcastRows(x, s), &[x, s]))
    }

    /// `y[b, t, :] = x[b, t, :] + s[b, :]` for x `[B, T, D]` and s `[B, D]`.
    pub fn add_bcast_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (bs, t, d) = self.bcast_rows_dims("add_bcast_rows", x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for b in 0..bs {
            let sb = &sv[b * d..(b + 1) * d];
            for row in out.data_mut()[b * t * d..(b + 1) * t * d].chunks_mut(d) {
                for (v, &ss) in row.iter_mut().zip(sb) {
                    *v += ss;
                }
            }
        }
        Ok(self.push_op(out, Op::AddBcastRows(x, s), &[x, s]))
    }

    fn bcast_rows_dims(&self, op: &'static str, x: Var, s: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        if xs.len() != 3 || ss.len() != 2 || xs[0] != ss[0] || xs[2] != ss[1] {
            return Err(Error::shape(op, format!("x {:?} vs s {:?}", xs, ss)));
        }
        Ok((xs[0], xs[1], xs[2]))
    }

    // ----- matrix products -------------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Array::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::ZERO,
            out.data_mut(),
            n as isize,
            1,
        );
        Ok(self.push_op(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Batched `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Array::zeros(&[bs, m, n]);
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                n as isize,
                1,
                T::ZERO,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        Ok(self.push_op(out, Op::Bmm(a, b), &[a, b]))
    }

    /// Batched `[B, M, K] x [B, N, K]^T -> [B, M, N]` (right operand stored
    /// row-major and read transposed, as in attention logits `Q K^T`).
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("bmm_nt", format!("{:?} x {:?}^T", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = Array::zeros(&[bs, m, n]);
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                1,
                k as isize,
                T::ZERO,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        Ok(self.push_op(out, Op::BmmNt(a, b), &[a, b]))
    }

    // ----- convolution and resampling ---------------------------------------

    /// 2D convolution of `x[B, Cin, H, W]` with `w[Cout, Cin, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", xs, ws)));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} stride {} pad {} on {}x{}", k, k, stride, pad, h, wd),
            ));
        }
        let ho = kernels::conv_out(h, k, stride, pad);
        let wo = kernels::conv_out(wd, k, stride, pad);
        let kk = cin * k * k;
        let mut out = Array::zeros(&[b, cout, ho, wo]);
        let mut col = vec![T::ZERO; kk * ho * wo];
        for i in 0..b {
            kernels::im2col(
                &self.value(x).data()[i * cin * h * wd..(i + 1) * cin * h * wd],
                cin,
                h,
                wd,
                k,
                stride,
                pad,
                ho,
                wo,
                &mut col,
            );
            T::gemm(
                cout,
                kk,
                ho * wo,
                T::ONE,
                self.value(w).data(),
                kk as isize,
                1,
                &col,
                (ho * wo) as isize,
                1,
                T::ZERO,
                &mut out.data_mut()[i * cout * ho * wo..(i + 1) * cout * ho * wo],
                (ho * wo) as isize,
                1,
            );
        }
        Ok(self.push_op(out, Op::Conv2d { x, w, k, stride, pad }, &[x, w]))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{:?}", xs)));
        }
        let mut out = Array::zeros(&[xs[0], xs[1], xs[2] / 2, xs[3] / 2]);
        kernels::avg_pool2(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], out.data_mut());
        Ok(self.push_op(out, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_nearest2", format!("{:?}", xs)));
        }
        let mut out = Array::zeros(&[xs[0], xs[1], xs[2] * 2, xs[3] * 2]);
        kernels::upsample_nearest2(
            self.value(x).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            out.data_mut(),
        );
        Ok(self.push_op(out, Op::UpsampleNearest2(x), &[x]))
    }

    // ----- normalization -----------------------------------------------------

    /// Group normalization over `x[B, C, H, W]` with affine `gamma[C]`, `beta[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || groups == 0 || xs[1] % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("x {:?} with {} groups", xs, groups),
            ));
        }
        if self.value(gamma).shape() != [xs[1]] || self.value(beta).shape() != [xs[1]] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "gamma {:?} / beta {:?} for {} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    xs[1]
                ),
            ));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cg = c / groups;
        let chunk = cg * hw;
        let mut mean = vec![T::ZERO; b * groups];
        let mut invstd = vec![T::ZERO; b * groups];
        kernels::norm_stats(self.value(x).data(), chunk, eps, &mut mean, &mut invstd);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for bi in 0..b {
            for ci in 0..c {
                let (m, is) = {
                    let gi = bi * groups + ci / cg;
                    (mean[gi], invstd[gi])
                };
                let plane = &mut out.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let (ga, be) = (gv[ci], bv[ci]);
                for v in plane.iter_mut() {
                    *v = (*v - m) * is * ga + be;
                }
            }
        }
        Ok(self.push_op(out, Op::GroupNorm { x, gamma, beta, groups, mean, invstd }, &[x, gamma, beta]))
    }

    /// Layer normalization over the trailing axis, with optional affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "x must have rank >= 1".to_string()))?;
        for v in [gamma, beta].into_iter().flatten() {
            if self.value(v).shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for width {}", self.value(v).shape(), d),
                ));
            }
        }
        let rows = self.value(x).numel() / d;
        let mut mean = vec![T::ZERO; rows];
        let mut invstd = vec![T::ZERO; rows];
        kernels::norm_stats(self.value(x).data(), d, eps, &mut mean, &mut invstd);
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let (m, is) = (mean[r], invstd[r]);
            for (j, v) in row.iter_mut().enumerate() {
                let mut y = (*v - m) * is;
                if let Some(g) = &gv {
                    y *= g[j];
                }
                if let Some(b) = &bv {
                    y += b[j];
                }
                *v = y;
            }
        }
        let mut inputs = vec![x];
        inputs.extend([gamma, beta].into_iter().flatten());
        Ok(self.push_op(out, Op::LayerNorm { x, gamma, beta, mean, invstd }, &inputs))
    }

    // ----- softmax and losses -------------------------------------------------

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("softmax_last", "x must have rank >= 1".to_string()))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        Ok(self.push_op(out, Op::SoftmaxLast(x), &[x]))
    }

    /// Mean cross-entropy of `logits[B, C]` against class indices.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.value(logits).shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy_mean",
                format!("logits {:?} vs {} labels", xs, labels.len()),
            ));
        }
        let (b, c) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {} out of range for {} classes", bad, c)));
        }
        let mut probs = self.value(logits).data().to_vec();
        for row in probs.chunks_mut(c) {
            softmax_row(row);
        }
        let mut loss = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs[i * c + l].to_f64().max(1e-300).ln();
        }
        let out = Array::scalar(T::from_f64(loss / b as f64));
        Ok(self.push_op(
            out,
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(T::from_f64(self.value(x).sum_f64()));
        Ok(self.push_op(out, Op::SumAll(x), &[x]))
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(T::from_f64(self.value(x).mean_f64()));
        Ok(self.push_op(out, Op::MeanAll(x), &[x]))
    }

    /// Spatial mean `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("mean_spatial", format!("{:?}", xs)));
        }
        let hw = xs[2] * xs[3];
        let mut out = Array::zeros(&[xs[0], xs[1]]);
        for (i, plane) in self.value(x).data().chunks(hw).enumerate() {
            let s: f64 = plane.iter().map(|v| v.to_f64()).sum();
            out.data_mut()[i] = T::from_f64(s / hw as f64);
        }
        Ok(self.push_op(out, Op::MeanSpatial(x), &[x]))
    }

    // ----- shape manipulation ---------------------------------------------------

    /// Contiguous slice `start..start+len` along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("axis {} range {}..{} of {:?}", axis, start, start + len, xs),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut oshape = xs.clone();
        oshape[axis] = len;
        let mut out = Array::zeros(&oshape);
        let src = self.value(x).data();
        for o in 0..outer {
            let s = &src[(o * xs[axis] + start) * inner..(o * xs[axis] + start + len) * inner];
            out.data_mut()[o * len * inner..(o + 1) * len * inner].copy_from_slice(s);
        }
        Ok(self.push_op(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Concatenate along one axis; all other dims must match.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of zero tensors".to_string()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut total = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut oshape = first.clone();
        oshape[axis] = total;
        let mut out = Array::zeros(&oshape);
        for o in 0..outer {
            let mut off = 0usize;
            for &v in xs {
                let len = self.value(v).shape()[axis];
                let src = &self.value(v).data()[o * len * inner..(o + 1) * len * inner];
                out.data_mut()[(o * total + off) * inner..(o * total + off + len) * inner]
                    .copy_from_slice(src);
                off += len;
            }
        }
        Ok(self.push_op(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Permute axes.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {:?} of {:?}", perm, xs)));
        }
        let out = permute_copy(self.value(x), perm);
        Ok(self.push_op(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Reshape to a new shape with identical element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// Broadcast `[B, C] -> [B, C, H, W]`.
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vs = self.value(v).shape().to_vec();
        if vs.len() != 2 || h == 0 || w == 0 {
            return Err(Error::shape("tile_spatial", format!("{:?} -> h={} w={}", vs, h, w)));
        }
        let mut out = Array::zeros(&[vs[0], vs[1], h, w]);
        for (i, &val) in self.value(v).data().iter().enumerate() {
            out.data_mut()[i * h * w..(i + 1) * h * w].fill(val);
        }
        Ok(self.push_op(out, Op::TileSpatial(v), &[v]))
    }

    // ----- backward ---------------------------------------------------------

    /// Run reverse-mode accumulation from a single-element loss var.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be a single element, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Array::full(self.value(loss).shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.dispatch_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contribution: Array<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_in_place(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn dispatch_backward(&mut self, i: usize, g: &Array<T>) {
        // Ops are immutable once recorded; swap out to appease the borrow
        // checker while we read values and accumulate gradients.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip_mul(g, self.value(*b));
                let gb = zip_mul(g, self.value(*a));
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.acc(*a, g.clone()),
            Op::BiasRows(x, b) => {
                let d = self.value(*b).numel();
                let mut db = Array::zeros(&[d]);
                for row in g.data().chunks(d) {
                    for (s, &v) in db.data_mut().iter_mut().zip(row) {
                        *s += v;
                    }
                }
                self.acc(*x, g.clone());
                self.acc(*b, db);
            }
            Op::BiasChannels(x, b) => {
                let c = self.value(*b).numel();
                let hw = self.value(*x).numel() / (self.value(*x).shape()[0] * c);
                let mut db = Array::zeros(&[c]);
                for (i, plane) in g.data().chunks(hw).enumerate() {
                    let s: f64 = plane.iter().map(|v| v.to_f64()).sum();
                    let slot = &mut db.data_mut()[i % c];
                    *slot += T::from_f64(s);
                }
                self.acc(*x, g.clone());
                self.acc(*b, db);
            }
            Op::MulBcastRows(x, s) => {
                let (bs, t, d) = {
                    let xs = self.value(*x).shape();
                    (xs[0], xs[1], xs[2])
                };
                let mut dx = g.clone();
                let sv = self.value(*s).data();
                for b in 0..bs {
                    let sb = &sv[b * d..(b + 1) * d];
                    for row in dx.data_mut()[b * t * d..(b + 1) * t * d].chunks_mut(d) {
                        for (v, &ss) in row.iter_mut().zip(sb) {
                            *v *= ss;
                        }
                    }
                }
                let mut ds = Array::zeros(&[bs, d]);
                let xv = self.value(*x).data();
                for b in 0..bs {
                    let acc = &mut ds.data_mut()[b * d..(b + 1) * d];
                    for ti in 0..t {
                        let base = (b * t + ti) * d;
                        for j in 0..d {
                            acc[j] += g.data()[base + j] * xv[base + j];
                        }
                    }
                }
                self.acc(*x, dx);
                self.acc(*s, ds);
            }
            Op::AddBcastRows(x, s) => {
                let (bs, t, d) = {
                    let xs = self.value(*x).shape();
                    (xs[0], xs[1], xs[2])
                };
                let mut ds = Array::zeros(&[bs, d]);
                for b in 0..bs {
                    let acc = &mut ds.data_mut()[b * d..(b + 1) * d];
                    for ti in 0..t {
                        let base = (b * t + ti) * d;
                        for j in 0..d {
                            acc[j] += g.data()[base + j];
                        }
                    }
                }
                self.acc(*x, g.clone());
                self.acc(*s, ds);
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                let mut da = Array::zeros(&[m, k]);
                T::gemm(
                    m,
                    n,
                    k,
                    T::ONE,
                    g.data(),
                    n as isize,
                    1,
                    self.value(*b).data(),
                    1,
                    n as isize,
                    T::ZERO,
                    da.data_mut(),
                    k as isize,
                    1,
                );
                let mut db = Array::zeros(&[k, n]);
                T::gemm(
                    k,
                    m,
                    n,
                    T::ONE,
                    self.value(*a).data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    T::ZERO,
                    db.data_mut(),
                    n as isize,
                    1,
                );
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1], s[2])
                };
                let n = self.value(*b).shape()[2];
                let mut da = Array::zeros(&[bs, m, k]);
                let mut db = Array::zeros(&[bs, k, n]);
                for i in 0..bs {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        &self.value(*b).data()[i * k * n..(i + 1) * k * n],
                        1,
                        n as isize,
                        T::ZERO,
                        &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                    );
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                        1,
                        k as isize,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        T::ZERO,
                        &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                        n as isize,
                        1,
                    );
                }
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::BmmNt(a, b) => {
                let (bs, m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1], s[2])
                };
                let n = self.value(*b).shape()[1];
                let mut da = Array::zeros(&[bs, m, k]);
                let mut db = Array::zeros(&[bs, n, k]);
                for i in 0..bs {
                    // da = g * b ; g [M, N], b [N, K]
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        &self.value(*b).data()[i * n * k..(i + 1) * n * k],
                        k as isize,
                        1,
                        T::ZERO,
                        &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                    );
                    // db = g^T * a ; g^T [N, M], a [M, K]
                    T::gemm(
                        n,
                        m,
                        k,
                        T::ONE,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        1,
                        n as isize,
                        &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                        T::ZERO,
                        &mut db.data_mut()[i * n * k..(i + 1) * n * k],
                        k as isize,
                        1,
                    );
                }
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Conv2d { x, w, k, stride, pad } => {
                let (k, stride, pad) = (*k, *stride, *pad);
                let xs = self.value(*x).shape().to_vec();
                let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.value(*w).shape()[0];
                let ho = kernels::conv_out(h, k, stride, pad);
                let wo = kernels::conv_out(wd, k, stride, pad);
                let kk = cin * k * k;
                let mut dw = Array::zeros(&[cout, cin, k, k]);
                let mut dx = Array::zeros(&xs);
                let mut col = vec![T::ZERO; kk * ho * wo];
                let mut dcol = vec![T::ZERO; kk * ho * wo];
                for i in 0..b {
                    // Recompute the unfolded input rather than caching it.
                    kernels::im2col(
                        &self.value(*x).data()[i * cin * h * wd..(i + 1) * cin * h * wd],
                        cin,
                        h,
                        wd,
                        k,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut col,
                    );
                    let gy = &g.data()[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                    // dW += gy * col^T
                    T::gemm(
                        cout,
                        ho * wo,
                        kk,
                        T::ONE,
                        gy,
                        (ho * wo) as isize,
                        1,
                        &col,
                        1,
                        (ho * wo) as isize,
                        T::ONE,
                        dw.data_mut(),
                        kk as isize,
                        1,
                    );
                    // dcol = W^T * gy
                    T::gemm(
                        kk,
                        cout,
                        ho * wo,
                        T::ONE,
                        self.value(*w).data(),
                        1,
                        kk as isize,
                        gy,
                        (ho * wo) as isize,
                        1,
                        T::ZERO,
                        &mut dcol,
                        (ho * wo) as isize,
                        1,
                    );
                    kernels::col2im_acc(
                        &dcol,
                        cin,
                        h,
                        wd,
                        k,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut dx.data_mut()[i * cin * h * wd..(i + 1) * cin * h * wd],
                    );
                }
                self.acc(*x, dx);
                self.acc(*w, dw);
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let mut dx = Array::zeros(&xs);
                kernels::avg_pool2_back(g.data(), xs[0] * xs[1], xs[2], xs[3], dx.data_mut());
                self.acc(*x, dx);
            }
            Op::UpsampleNearest2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let mut dx = Array::zeros(&xs);
                kernels::upsample_nearest2_back(g.data(), xs[0] * xs[1], xs[2], xs[3], dx.data_mut());
                self.acc(*x, dx);
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, invstd } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cg = c / groups;
                let chunk = cg * hw;
                let gv = self.value(*gamma).data().to_vec();
                let xv = self.value(*x).data();
                let mut dgamma = Array::zeros(&[c]);
                let mut dbeta = Array::zeros(&[c]);
                let mut dx = Array::zeros(&xs);
                for bi in 0..b {
                    for gi in 0..*groups {
                        let (m, is) = (mean[bi * groups + gi], invstd[bi * groups + gi]);
                        let base = (bi * c + gi * cg) * hw;
                        // First pass: per-group reductions of dxhat and dxhat*xhat.
                        let mut sum_dxh = 0.0f64;
                        let mut sum_dxh_xh = 0.0f64;
                        for cj in 0..cg {
                            let ga = gv[gi * cg + cj];
                            for p in 0..hw {
                                let idx = base + cj * hw + p;
                                let xh = ((xv[idx] - m) * is).to_f64();
                                let dxh = (g.data()[idx] * ga).to_f64();
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let n = chunk as f64;
                        for cj in 0..cg {
                            let ci = gi * cg + cj;
                            let ga = gv[ci];
                            let mut dga = 0.0f64;
                            let mut dbe = 0.0f64;
                            for p in 0..hw {
                                let idx = base + cj * hw + p;
                                let xh = ((xv[idx] - m) * is).to_f64();
                                let gy = g.data()[idx].to_f64();
                                dga += gy * xh;
                                dbe += gy;
                                let dxh = gy * ga.to_f64();
                                dx.data_mut()[idx] = T::from_f64(
                                    is.to_f64() * (dxh - sum_dxh / n - xh * sum_dxh_xh / n),
                                );
                            }
                            dgamma.data_mut()[ci] += T::from_f64(dga);
                            dbeta.data_mut()[ci] += T::from_f64(dbe);
                        }
                    }
                }
                self.acc(*x, dx);
                self.acc(*gamma, dgamma);
                self.acc(*beta, dbeta);
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let d = *self.value(*x).shape().last().expect("validated at record");
                let xv = self.value(*x).data();
                let gv = gamma.map(|g| self.value(g).data().to_vec());
                let mut dgamma = gamma.map(|_| Array::zeros(&[d]));
                let mut dbeta = beta.map(|_| Array::zeros(&[d]));
                let mut dx = Array::zeros(self.value(*x).shape());
                for (r, grow) in g.data().chunks(d).enumerate() {
                    let (m, is) = (mean[r], invstd[r]);
                    let mut sum_dxh = 0.0f64;
                    let mut sum_dxh_xh = 0.0f64;
                    for j in 0..d {
                        let xh = ((xv[r * d + j] - m) * is).to_f64();
                        let ga = gv.as_ref().map_or(1.0, |g| g[j].to_f64());
                        let dxh = grow[j].to_f64() * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let xh = ((xv[r * d + j] - m) * is).to_f64();
                        let gy = grow[j].to_f64();
                        if let Some(dg) = &mut dgamma {
                            dg.data_mut()[j] += T::from_f64(gy * xh);
                        }
                        if let Some(db) = &mut dbeta {
                            db.data_mut()[j] += T::from_f64(gy);
                        }
                        let ga = gv.as_ref().map_or(1.0, |g| g[j].to_f64());
                        let dxh = gy * ga;
                        dx.data_mut()[r * d + j] = T::from_f64(
                            is.to_f64() * (dxh - sum_dxh / n - xh * sum_dxh_xh / n),
                        );
                    }
                }
                self.acc(*x, dx);
                if let (Some(gv), Some(dg)) = (*gamma, dgamma) {
                    self.acc(gv, dg);
                }
                if let (Some(bv), Some(db)) = (*beta, dbeta) {
                    self.acc(bv, db);
                }
            }
            Op::Silu(x) => {
                let dx = zip_map(g, self.value(*x), |gy, v| {
                    let s = sigmoid(v);
                    gy * s * (T::ONE + v * (T::ONE - s))
                });
                self.acc(*x, dx);
            }
            Op::Gelu(x) => {
                let dx = zip_map(g, self.value(*x), |gy, v| gy * gelu_tanh_grad(v));
                self.acc(*x, dx);
            }
            Op::Relu(x) => {
                let dx = zip_map(g, self.value(*x), |gy, v| {
                    if v > T::ZERO {
                        gy
                    } else {
                        T::ZERO
                    }
                });
                self.acc(*x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.values[i];
                let dx = zip_map(g, y, |gy, yv| gy * (T::ONE - yv * yv));
                self.acc(*x, dx);
            }
            Op::Abs(x) => {
                let dx = zip_map(g, self.value(*x), |gy, v| {
                    if v > T::ZERO {
                        gy
                    } else if v < T::ZERO {
                        -gy
                    } else {
                        T::ZERO
                    }
                });
                self.acc(*x, dx);
            }
            Op::SoftmaxLast(x) => {
                let y = &self.values[i];
                let d = *y.shape().last().expect("validated at record");
                let mut dx = Array::zeros(y.shape());
                for (r, (yrow, grow)) in y.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let dot: f64 =
                        yrow.iter().zip(grow).map(|(&yv, &gv)| yv.to_f64() * gv.to_f64()).sum();
                    for j in 0..d {
                        dx.data_mut()[r * d + j] =
                            yrow[j] * (grow[j] - T::from_f64(dot));
                    }
                }
                self.acc(*x, dx);
            }
            Op::CrossEntropyMean { logits, labels, probs } => {
                let b = labels.len();
                let c = self.value(*logits).shape()[1];
                let scale = g.item() / T::from_f64(b as f64);
                let mut dx = Array::zeros(&[b, c]);
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let p = probs[i * c + j];
                        let delta = if j == l { T::ONE } else { T::ZERO };
                        dx.data_mut()[i * c + j] = (p - delta) * scale;
                    }
                }
                self.acc(*logits, dx);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.acc(*x, Array::full(self.value(*x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let gv = g.item() / T::from_f64(n as f64);
                self.acc(*x, Array::full(self.value(*x).shape(), gv));
            }
            Op::MeanSpatial(x) => {
                let xs = self.value(*x).shape().to_vec();
                let hw = xs[2] * xs[3];
                let mut dx = Array::zeros(&xs);
                let inv = T::from_f64(1.0 / hw as f64);
                for (i, &gy) in g.data().iter().enumerate() {
                    dx.data_mut()[i * hw..(i + 1) * hw].fill(gy * inv);
                }
                self.acc(*x, dx);
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let len = g.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = Array::zeros(&xs);
                for o in 0..outer {
                    let dst = &mut dx.data_mut()
                        [(o * xs[*axis] + start) * inner..(o * xs[*axis] + start + len) * inner];
                    dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let total = self.values[i].shape()[*axis];
                let first = self.value(xs[0]).shape().to_vec();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let mut off = 0usize;
                for &v in xs {
                    let len = self.value(v).shape()[*axis];
                    let mut dv = Array::zeros(self.value(v).shape());
                    for o in 0..outer {
                        let src =
                            &g.data()[(o * total + off) * inner..(o * total + off + len) * inner];
                        dv.data_mut()[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                    }
                    off += len;
                    self.acc(v, dv);
                }
            }
            Op::Permute { x, perm } => {
                // Gradient of a permutation is the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(*x, permute_copy(g, &inv));
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(self.value(*x).shape()).expect("same numel");
                self.acc(*x, dx);
            }
            Op::TileSpatial(v) => {
                let vs = self.value(*v).shape().to_vec();
                let hw = g.numel() / (vs[0] * vs[1]);
                let mut dv = Array::zeros(&vs);
                for (i, plane) in g.data().chunks(hw).enumerate() {
                    let s: f64 = plane.iter().map(|x| x.to_f64()).sum();
                    dv.data_mut()[i] = T::from_f64(s);
                }
                self.acc(*v, dv);
            }
        }
        self.ops[i] = op;
    }
}

#[inline(always)]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

/// Tanh-approximated GELU.
fn gelu_tanh<T: Scalar>(v: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * v * (T::ONE + (c * (v + a * v * v * v)).tanh())
}

fn gelu_tanh_grad<T: Scalar>(v: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let du = c * (T::ONE + three * a * v * v);
    half * (T::ONE + t) + half * v * (T::ONE - t * t) * du
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn zip_mul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.shape(), data).expect("zip_map shapes verified")
}

fn permute_copy<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let xs = x.shape();
    let rank = xs.len();
    let oshape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let mut out = Array::zeros(&oshape);
    if rank == 0 {
        out.data_mut()[0] = x.data()[0];
        return out;
    }
    // Strides of the input, then reordered to output axis order.
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * xs[i + 1];
    }
    let ostrides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let numel = x.numel();
    let mut src = 0usize;
    for o in 0..numel {
        out.data_mut()[o] = x.data()[src];
        // Odometer increment over the output index space.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += ostrides[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            src -= ostrides[ax] * oshape[ax];
            idx[ax] = 0;
        }
    }
    out
}
