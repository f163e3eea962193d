//! Primitive trainable layers. Each layer registers its parameters in a
//! [`ParamStore`] at construction and, at forward time, looks its vars up in
//! the slice returned by `ParamStore::leaf_all` for the current tape.

use super::store::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar, Tape, Var};
use rand::Rng;

fn uniform_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array<T> {
    let bound = T::from_f64(1.0 / (fan_in as f64).sqrt());
    Array::rand_uniform(rng, shape, -bound, bound)
}

/// Fully connected layer; weight layout `[in, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[in_dim, out_dim], in_dim))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), uniform_init(rng, &[out_dim], in_dim))?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// Zero-initialized variant (used where a layer must start as the zero
    /// map, e.g. modulation emitters and final projections).
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Array::zeros(&[in_dim, out_dim]))?;
        let b =
            if bias { Some(store.add(format!("{name}.b"), Array::zeros(&[out_dim]))?) } else { None };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// Apply to `[..., in_dim]`; the leading axes are flattened and restored.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("linear", "rank-0 input".to_string()))?;
        if d != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs in_dim {}", xs, self.in_dim),
            ));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = if xs.len() == 2 { x } else { tape.reshape(x, &[rows, d])? };
        let mut y = tape.matmul(flat, ps[self.w.0])?;
        if let Some(b) = self.b {
            y = tape.bias_rows(y, ps[b.0])?;
        }
        if xs.len() == 2 {
            Ok(y)
        } else {
            let mut oshape = xs;
            *oshape.last_mut().expect("non-empty") = self.out_dim;
            tape.reshape(y, &oshape)
        }
    }

    /// Parameter count for this layer's configuration.
    pub fn count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

/// 2D convolution layer with square kernels.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan = in_ch * k * k;
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[out_ch, in_ch, k, k], fan))?;
        let b = Some(store.add(format!("{name}.b"), uniform_init(rng, &[out_ch], fan))?);
        Ok(Conv2d { w, b, in_ch, out_ch, k, stride, pad })
    }

    /// Zero-initialized variant for residual output heads.
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Array::zeros(&[out_ch, in_ch, k, k]))?;
        let b = Some(store.add(format!("{name}.b"), Array::zeros(&[out_ch]))?);
        Ok(Conv2d { w, b, in_ch, out_ch, k, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let mut y = tape.conv2d(x, ps[self.w.0], self.stride, self.pad)?;
        if let Some(b) = self.b {
            y = tape.bias_channels(y, ps[b.0])?;
        }
        Ok(y)
    }

    pub fn count(in_ch: usize, out_ch: usize, k: usize) -> usize {
        out_ch * in_ch * k * k + out_ch
    }
}

/// Group normalization with affine parameters.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm {name:?}: {channels} channels not divisible into {groups} groups"
            )));
        }
        let gamma = store.add(format!("{name}.g"), Array::full(&[channels], T::ONE))?;
        let beta = store.add(format!("{name}.b"), Array::zeros(&[channels]))?;
        Ok(GroupNorm { gamma, beta, groups, eps: 1e-5 })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        tape.group_norm(x, ps[self.gamma.0], ps[self.beta.0], self.groups, self.eps)
    }

    pub fn count(channels: usize) -> usize {
        2 * channels
    }
}

/// Layer normalization over the trailing axis, optionally affine.
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.g"), Array::full(&[dim], T::ONE))?;
        let beta = store.add(format!("{name}.b"), Array::zeros(&[dim]))?;
        Ok(LayerNorm { gamma: Some(gamma), beta: Some(beta), eps: 1e-5 })
    }

    /// Affine-free layer norm (plain standardization).
    pub fn plain() -> Self {
        LayerNorm { gamma: None, beta: None, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma.map(|g| ps[g.0]), self.beta.map(|b| ps[b.0]), self.eps)
    }
}
