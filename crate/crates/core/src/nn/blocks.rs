//! Composite blocks shared by the editor backbones and the flow transformer:
//! multi-head self-attention, GEGLU feed-forward, pre-norm transformer block,
//! and the GroupNorm+SiLU+Conv residual block with its pooled/upsampled
//! variants.

use super::layers::{Conv2d, GroupNorm, LayerNorm, Linear};
use super::store::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use rand::Rng;

/// Multi-head self-attention over `[B, T, D]` with `D = heads * d_head`.
pub struct Mhsa {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
    pub d_head: usize,
}

impl Mhsa {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        heads: usize,
        d_head: usize,
    ) -> Result<Self> {
        let d = heads * d_head;
        // Projection biases are omitted on q/k/v and kept on the output,
        // the usual attention parameterization.
        let q = Linear::new(store, rng, &format!("{name}.q"), d, d, false)?;
        let k = Linear::new(store, rng, &format!("{name}.k"), d, d, false)?;
        let v = Linear::new(store, rng, &format!("{name}.v"), d, d, false)?;
        let o = Linear::new(store, rng, &format!("{name}.o"), d, d, true)?;
        Ok(Mhsa { q, k, v, o, heads, d_head })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        let d = self.heads * self.d_head;
        if xs.len() != 3 || xs[2] != d {
            return Err(Error::shape("mhsa", format!("input {:?} for width {}", xs, d)));
        }
        let (b, t) = (xs[0], xs[1]);
        let split = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
            let y = tape.reshape(y, &[b, t, self.heads, self.d_head])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * self.heads, t, self.d_head])
        };
        let q = self.q.forward(tape, ps, x)?;
        let k = self.k.forward(tape, ps, x)?;
        let v = self.v.forward(tape, ps, x)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let logits = tape.bmm_nt(q, k)?;
        let logits = tape.scale(logits, T::from_f64(1.0 / (self.d_head as f64).sqrt()))?;
        let attn = tape.softmax_last(logits)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, t, self.d_head])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        self.o.forward(tape, ps, ctx)
    }

    pub fn count(heads: usize, d_head: usize) -> usize {
        let d = heads * d_head;
        3 * Linear::count(d, d, false) + Linear::count(d, d, true)
    }
}

/// GEGLU feed-forward: project to 2x the hidden width, gate one half with
/// GELU of the other, project back.
pub struct GegluMlp {
    proj: Linear,
    out: Linear,
    pub inner: usize,
}

impl GegluMlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        mult: usize,
    ) -> Result<Self> {
        let inner = dim * mult;
        let proj = Linear::new(store, rng, &format!("{name}.proj"), dim, 2 * inner, true)?;
        let out = Linear::new(store, rng, &format!("{name}.out"), inner, dim, true)?;
        Ok(GegluMlp { proj, out, inner })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let h = self.proj.forward(tape, ps, x)?;
        let last = tape.value(h).shape().len() - 1;
        let val = tape.slice(h, last, 0, self.inner)?;
        let gate = tape.slice(h, last, self.inner, self.inner)?;
        let gate = tape.gelu(gate)?;
        let h = tape.mul(val, gate)?;
        self.out.forward(tape, ps, h)
    }

    pub fn count(dim: usize, mult: usize) -> usize {
        let inner = dim * mult;
        Linear::count(dim, 2 * inner, true) + Linear::count(inner, dim, true)
    }
}

/// Pre-norm transformer block: LN → self-attention → residual, then
/// LN → GEGLU MLP → residual.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: LayerNorm,
    mlp: GegluMlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        heads: usize,
        d_head: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        let d = heads * d_head;
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: Mhsa::new(store, rng, &format!("{name}.attn"), heads, d_head)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            mlp: GegluMlp::new(store, rng, &format!("{name}.mlp"), d, ff_mult)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, ps, x)?;
        let h = self.attn.forward(tape, ps, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, ps, x)?;
        let h = self.mlp.forward(tape, ps, h)?;
        tape.add(x, h)
    }

    pub fn count(heads: usize, d_head: usize, ff_mult: usize) -> usize {
        let d = heads * d_head;
        2 * 2 * d + Mhsa::count(heads, d_head) + GegluMlp::count(d, ff_mult)
    }
}

/// Residual conv block: (GN → SiLU → Conv3x3) twice plus a skip connection,
/// with a 1x1 projection on the skip when the channel count changes.
pub struct ResNet2d {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResNet2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        gn_groups: usize,
    ) -> Result<Self> {
        let skip = if in_ch != out_ch {
            Some(Conv2d::new(store, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0)?)
        } else {
            None
        };
        Ok(ResNet2d {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), in_ch, gn_groups)?,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1)?,
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), out_ch, gn_groups)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1)?,
            skip,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let h = self.gn1.forward(tape, ps, x)?;
        let h = tape.silu(h)?;
        let h = self.conv1.forward(tape, ps, h)?;
        let h = self.gn2.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, ps, h)?;
        let sk = match &self.skip {
            Some(conv) => conv.forward(tape, ps, x)?,
            None => x,
        };
        tape.add(sk, h)
    }

    pub fn count(in_ch: usize, out_ch: usize) -> usize {
        let skip = if in_ch != out_ch { Conv2d::count(in_ch, out_ch, 1) } else { 0 };
        GroupNorm::count(in_ch)
            + Conv2d::count(in_ch, out_ch, 3)
            + GroupNorm::count(out_ch)
            + Conv2d::count(out_ch, out_ch, 3)
            + skip
    }
}

/// Nearest-neighbour 2x upsample followed by a 3x3 "resize" convolution.
pub struct UpsampleResizeConv {
    conv: Conv2d,
}

impl UpsampleResizeConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(UpsampleResizeConv {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), channels, channels, 3, 1, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &[Var], x: Var) -> Result<Var> {
        let h = tape.upsample_nearest2(x)?;
        self.conv.forward(tape, ps, h)
    }

    pub fn count(channels: usize) -> usize {
        Conv2d::count(channels, channels, 3)
    }
}
