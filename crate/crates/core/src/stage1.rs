//! Latent lip editor: the one-step residual model at the heart of the
//! pipeline's first stage.
//!
//! The editor sees a 52-channel latent canvas — 4 channels of the input
//! frame's latents, 36 channels of adapted reference features, and a 12-dim
//! lips vector broadcast over space — and predicts a latent *residual*. The
//! edited latent is always `input + residual`, so a zero prediction returns
//! the input untouched. Two interchangeable backbones (a skip-connected conv
//! UNet and a ViT-style transformer) share this contract.
//!
//! Training happens in two phases over the synthetic world:
//!
//! 1. **Masked reconstruction** — the lower face is blanked out and the model
//!    learns to repaint it from a reference frame plus the ground-truth lips
//!    vector, under a weighted sum of latent, pixel, and feature losses.
//! 2. **Self-refinement** — the frozen reconstruction model generates
//!    pseudo-pairs (a real frame and a lip-edited variant of it), and a copy
//!    of the model is fine-tuned to map between them *without* any mask on
//!    its input, which is what inference needs.

use crate::checkpoint;
use crate::codec::{downsample_mask, CodecModel, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::lips::{crop_mouth, LipsEncoder, LipsVector, LIPS_DIM, MOUTH_CROP_SIZE, RESIDUAL_DIM, RESIDUAL_L2_PENALTY};
use crate::metrics::psnr_masked;
use crate::nn::{ArchPlan, Conv2d, GroupNorm, Linear, ParamStore, ResNet2d, TransformerBlock};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::sub_rng;
use crate::tensor::{Array, Tape, Var};
use crate::world::{apply_image, apply_mask, mask_bbox, sample_augment, Augment, ClipSample};
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

/// Channels of adapted reference features fed to the editor.
pub const REF_FEAT_CHANNELS: usize = 36;

/// Total editor input channels: input latents, reference features, lips.
pub const EDITOR_IN_CHANNELS: usize = LATENT_CHANNELS + REF_FEAT_CHANNELS + LIPS_DIM;

/// Probability that a refinement step trains on the real-to-synthetic
/// direction of a pseudo-pair (the remainder trains synthetic-to-real).
pub const REAL_TO_SYNTH_PROB: f64 = 2.0 / 3.0;

static EDITOR_FORWARDS: AtomicU64 = AtomicU64::new(0);

/// Total editor forward passes since process start, across all models.
/// Throughput probes read this before and after a timed window.
pub fn editor_forward_count() -> u64 {
    EDITOR_FORWARDS.load(Ordering::Relaxed)
}

// ---------------------------------------------------------------------------
// Backbone selection
// ---------------------------------------------------------------------------

/// Which network family predicts the latent residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Unet,
    Transformer,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Unet => "unet",
            BackboneKind::Transformer => "transformer",
        })
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(BackboneKind::Unet),
            "transformer" => Ok(BackboneKind::Transformer),
            other => Err(Error::invalid(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Width profile: `Desk` is the small configuration every test trains;
/// `Full` reproduces the published channel plumbing for audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthProfile {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct UnetDims {
    /// Channel widths of the three resolution levels, shallow to deep.
    pub widths: [usize; 3],
    pub gn_groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct VitDims {
    /// Width of the shallow projection that frames the token stack.
    pub proj: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_head: usize,
    pub gn_groups: usize,
}

impl WidthProfile {
    pub fn unet_dims(self) -> UnetDims {
        match self {
            WidthProfile::Desk => UnetDims { widths: [24, 32, 40], gn_groups: 8 },
            WidthProfile::Full => UnetDims { widths: [384, 512, 640], gn_groups: 32 },
        }
    }

    pub fn vit_dims(self) -> VitDims {
        match self {
            WidthProfile::Desk => {
                VitDims { proj: 32, d_model: 128, blocks: 4, heads: 4, d_head: 32, gn_groups: 8 }
            }
            WidthProfile::Full => {
                VitDims { proj: 128, d_model: 1024, blocks: 16, heads: 16, d_head: 64, gn_groups: 32 }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reference adapter
// ---------------------------------------------------------------------------

/// Lifts reference-frame latents (4 channels) to the 36-channel feature map
/// the editor conditions on. Trains jointly with the editor.
pub struct RefAdapter {
    store: ParamStore<f32>,
    c0: Conv2d,
    gn: GroupNorm,
    c1: Conv2d,
}

impl RefAdapter {
    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "adapter-init");
        let c0 = Conv2d::new(&mut store, &mut rng, "adapter.c0", LATENT_CHANNELS, REF_FEAT_CHANNELS, 3, 1, 1)?;
        let gn = GroupNorm::new(&mut store, "adapter.gn", REF_FEAT_CHANNELS, 4)?;
        let c1 = Conv2d::new(&mut store, &mut rng, "adapter.c1", REF_FEAT_CHANNELS, REF_FEAT_CHANNELS, 3, 1, 1)?;
        Ok(RefAdapter { store, c0, gn, c1 })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// `[B, 4, h, w]` reference latents -> `[B, 36, h, w]` features.
    pub fn forward_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], z_ref: Var) -> Result<Var> {
        let shape = tape.value(z_ref).shape().to_vec();
        if shape.len() != 4 || shape[1] != LATENT_CHANNELS {
            return Err(Error::shape(
                "ref_adapter",
                format!("expected [B, {LATENT_CHANNELS}, h, w], got {shape:?}"),
            ));
        }
        let h = self.c0.forward(tape, ps, z_ref)?;
        let h = self.gn.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        self.c1.forward(tape, ps, h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    /// Load a trained adapter; parameters come back frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let mut adapter = RefAdapter::new(0)?;
        checkpoint::load_into(path, &mut adapter.store)?;
        adapter.store.freeze_all();
        Ok(adapter)
    }
}

// ---------------------------------------------------------------------------
// Input assembly
// ---------------------------------------------------------------------------

/// Assembled 52-channel editor input. Channel layout: `0..4` input latents,
/// `4..40` adapted reference features, `40..52` the lips vector broadcast to
/// every spatial position.
pub struct EditorInput {
    var: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl EditorInput {
    pub fn var(&self) -> Var {
        self.var
    }
}

/// Concatenate input latents, reference features, and a lips vector along the
/// channel axis. Rejects any permuted or mis-sized arrangement.
pub fn assemble_input(
    tape: &mut Tape<f32>,
    z_input: Var,
    ref_feat: Var,
    lips: Var,
) -> Result<EditorInput> {
    let zs = tape.value(z_input).shape().to_vec();
    if zs.len() != 4 || zs[1] != LATENT_CHANNELS {
        return Err(Error::shape(
            "assemble_input",
            format!("input latents must be [B, {LATENT_CHANNELS}, h, w], got {zs:?}"),
        ));
    }
    let (b, h, w) = (zs[0], zs[2], zs[3]);
    let rs = tape.value(ref_feat).shape().to_vec();
    if rs != [b, REF_FEAT_CHANNELS, h, w] {
        return Err(Error::shape(
            "assemble_input",
            format!("reference features must be [{b}, {REF_FEAT_CHANNELS}, {h}, {w}], got {rs:?}"),
        ));
    }
    let ls = tape.value(lips).shape().to_vec();
    if ls != [b, LIPS_DIM] {
        return Err(Error::shape(
            "assemble_input",
            format!("lips must be [{b}, {LIPS_DIM}], got {ls:?}"),
        ));
    }
    let lips_map = tape.tile_spatial(lips, h, w)?;
    let var = tape.concat(&[z_input, ref_feat, lips_map], 1)?;
    Ok(EditorInput { var, batch: b, h, w })
}

// ---------------------------------------------------------------------------
// UNet backbone
// ---------------------------------------------------------------------------

struct DownStage {
    blocks: Vec<ResNet2d>,
    after_pool: Option<ResNet2d>,
}

impl DownStage {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        groups: usize,
        pool: bool,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        blocks.push(ResNet2d::new(store, rng, &format!("{name}.r0"), in_ch, out_ch, groups)?);
        for i in 1..4 {
            blocks.push(ResNet2d::new(store, rng, &format!("{name}.r{i}"), out_ch, out_ch, groups)?);
        }
        let after_pool = if pool {
            Some(ResNet2d::new(store, rng, &format!("{name}.down"), out_ch, out_ch, groups)?)
        } else {
            None
        };
        Ok(DownStage { blocks, after_pool })
    }

    /// Returns `(skip, out)`: `skip` feeds the mirrored up stage at this
    /// resolution; `out` (pooled when configured) feeds the next stage down.
    fn forward(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, ps, h)?;
        }
        let out = match &self.after_pool {
            Some(block) => {
                let pooled = tape.avg_pool2(h)?;
                block.forward(tape, ps, pooled)?
            }
            None => h,
        };
        Ok((h, out))
    }
}

struct UpStage {
    blocks: Vec<ResNet2d>,
    after_up: Option<ResNet2d>,
}

impl UpStage {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        concat_ch: usize,
        out_ch: usize,
        groups: usize,
        upsample: bool,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(5);
        blocks.push(ResNet2d::new(store, rng, &format!("{name}.r0"), concat_ch, out_ch, groups)?);
        for i in 1..5 {
            blocks.push(ResNet2d::new(store, rng, &format!("{name}.r{i}"), out_ch, out_ch, groups)?);
        }
        let after_up = if upsample {
            Some(ResNet2d::new(store, rng, &format!("{name}.up"), out_ch, out_ch, groups)?)
        } else {
            None
        };
        Ok(UpStage { blocks, after_up })
    }

    fn forward(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var, skip: Var) -> Result<Var> {
        let mut h = tape.concat(&[x, skip], 1)?;
        for block in &self.blocks {
            h = block.forward(tape, ps, h)?;
        }
        if let Some(block) = &self.after_up {
            let up = tape.upsample_nearest2(h)?;
            h = block.forward(tape, ps, up)?;
        }
        Ok(h)
    }
}

/// Three-level residual UNet over the latent grid. Skip connections join
/// each down stage's pre-pool activations to the mirrored up stage, and the
/// output conv starts at zero so a fresh model predicts a zero residual.
struct UnetEditor {
    input: Conv2d,
    d1: DownStage,
    d2: DownStage,
    d3: DownStage,
    mid: Vec<ResNet2d>,
    u1: UpStage,
    u2: UpStage,
    u3: UpStage,
    out_gn: GroupNorm,
    out_conv: Conv2d,
}

impl UnetEditor {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        prefix: &str,
        dims: &UnetDims,
    ) -> Result<Self> {
        let [w0, w1, w2] = dims.widths;
        let g = dims.gn_groups;
        let input = Conv2d::new(store, rng, &format!("{prefix}.input"), EDITOR_IN_CHANNELS, w0, 3, 1, 1)?;
        let d1 = DownStage::new(store, rng, &format!("{prefix}.d1"), w0, w0, g, true)?;
        let d2 = DownStage::new(store, rng, &format!("{prefix}.d2"), w0, w1, g, true)?;
        let d3 = DownStage::new(store, rng, &format!("{prefix}.d3"), w1, w2, g, false)?;
        let mid = (0..2)
            .map(|i| ResNet2d::new(store, rng, &format!("{prefix}.mid.r{i}"), w2, w2, g))
            .collect::<Result<Vec<_>>>()?;
        let u1 = UpStage::new(store, rng, &format!("{prefix}.u1"), 2 * w2, w2, g, true)?;
        let u2 = UpStage::new(store, rng, &format!("{prefix}.u2"), w2 + w1, w1, g, true)?;
        let u3 = UpStage::new(store, rng, &format!("{prefix}.u3"), w1 + w0, w0, g, false)?;
        let out_gn = GroupNorm::new(store, &format!("{prefix}.out.gn"), w0, g)?;
        let out_conv = Conv2d::zeros(store, &format!("{prefix}.out.conv"), w0, LATENT_CHANNELS, 3, 1, 1)?;
        Ok(UnetEditor { input, d1, d2, d3, mid, u1, u2, u3, out_gn, out_conv })
    }

    fn forward(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != EDITOR_IN_CHANNELS || xs[2] % 4 != 0 || xs[3] % 4 != 0 {
            return Err(Error::shape(
                "unet_editor",
                format!("expected [B, {EDITOR_IN_CHANNELS}, 4k, 4k], got {xs:?}"),
            ));
        }
        let h = self.input.forward(tape, ps, x)?;
        let (s1, h) = self.d1.forward(tape, ps, h)?;
        let (s2, h) = self.d2.forward(tape, ps, h)?;
        let (s3, h) = self.d3.forward(tape, ps, h)?;
        let mut m = h;
        for block in &self.mid {
            m = block.forward(tape, ps, m)?;
        }
        let u = self.u1.forward(tape, ps, m, s3)?;
        let u = self.u2.forward(tape, ps, u, s2)?;
        let u = self.u3.forward(tape, ps, u, s1)?;
        let o = self.out_gn.forward(tape, ps, u)?;
        let o = tape.silu(o)?;
        self.out_conv.forward(tape, ps, o)
    }

    fn plan(dims: &UnetDims) -> ArchPlan {
        let [w0, w1, w2] = dims.widths;
        let rn = ResNet2d::count;
        let mut plan = ArchPlan::new("latent editor (UNet)");
        plan.push("input", "Conv2d(k3, s1, p1)", format!("{EDITOR_IN_CHANNELS} -> {w0}"), Conv2d::count(EDITOR_IN_CHANNELS, w0, 3));
        plan.push("down1", "4 x ResNet2D + 1 x ResNet2D (AvgPool)", format!("{w0} -> {w0}"), 5 * rn(w0, w0));
        plan.push("down2", "4 x ResNet2D + 1 x ResNet2D (AvgPool)", format!("{w0} -> {w1}"), rn(w0, w1) + 4 * rn(w1, w1));
        plan.push("down3", "4 x ResNet2D", format!("{w1} -> {w2}"), rn(w1, w2) + 3 * rn(w2, w2));
        plan.push("mid", "2 x ResNet2D", format!("{w2} -> {w2}"), 2 * rn(w2, w2));
        plan.push("up1", "5 x ResNet2D + 1 x ResNet2D (Upsample)", format!("{} -> {w2}", 2 * w2), rn(2 * w2, w2) + 5 * rn(w2, w2));
        plan.push("up2", "5 x ResNet2D + 1 x ResNet2D (Upsample)", format!("{} -> {w1}", w2 + w1), rn(w2 + w1, w1) + 5 * rn(w1, w1));
        plan.push("up3", "5 x ResNet2D", format!("{} -> {w0}", w1 + w0), rn(w1 + w0, w0) + 4 * rn(w0, w0));
        plan.push(
            "output",
            "GroupNorm + SiLU + Conv2d(k3, s1, p1)",
            format!("{w0} -> {LATENT_CHANNELS}"),
            GroupNorm::count(w0) + Conv2d::count(w0, LATENT_CHANNELS, 3),
        );
        plan
    }
}

// ---------------------------------------------------------------------------
// Transformer backbone
// ---------------------------------------------------------------------------

/// ViT-style backbone: 1x1 projections in and out of a token stack that
/// attends over all latent positions. Deliberately carries no positional
/// encoding — position information reaches it only through the token
/// contents themselves.
struct VitEditor {
    input: Conv2d,
    pre_gn: GroupNorm,
    pre: Conv2d,
    blocks: Vec<TransformerBlock>,
    post: Conv2d,
    out: Conv2d,
    d_model: usize,
}

impl VitEditor {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        prefix: &str,
        dims: &VitDims,
    ) -> Result<Self> {
        let input = Conv2d::new(store, rng, &format!("{prefix}.input"), EDITOR_IN_CHANNELS, dims.proj, 1, 1, 0)?;
        let pre_gn = GroupNorm::new(store, &format!("{prefix}.pre.gn"), dims.proj, dims.gn_groups)?;
        let pre = Conv2d::new(store, rng, &format!("{prefix}.pre.conv"), dims.proj, dims.d_model, 1, 1, 0)?;
        let blocks = (0..dims.blocks)
            .map(|i| {
                TransformerBlock::new(store, rng, &format!("{prefix}.block{i}"), dims.heads, dims.d_head, 4)
            })
            .collect::<Result<Vec<_>>>()?;
        let post = Conv2d::new(store, rng, &format!("{prefix}.post"), dims.d_model, dims.proj, 1, 1, 0)?;
        let out = Conv2d::zeros(store, &format!("{prefix}.out"), dims.proj, LATENT_CHANNELS, 1, 1, 0)?;
        Ok(VitEditor { input, pre_gn, pre, blocks, post, out, d_model: dims.d_model })
    }

    fn forward(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != EDITOR_IN_CHANNELS {
            return Err(Error::shape(
                "vit_editor",
                format!("expected [B, {EDITOR_IN_CHANNELS}, h, w], got {xs:?}"),
            ));
        }
        let (b, h, w) = (xs[0], xs[2], xs[3]);
        let v = self.input.forward(tape, ps, x)?;
        let v = self.pre_gn.forward(tape, ps, v)?;
        let v = self.pre.forward(tape, ps, v)?;
        let v = tape.permute(v, &[0, 2, 3, 1])?;
        let mut tokens = tape.reshape(v, &[b, h * w, self.d_model])?;
        for block in &self.blocks {
            tokens = block.forward(tape, ps, tokens)?;
        }
        let v = tape.reshape(tokens, &[b, h, w, self.d_model])?;
        let v = tape.permute(v, &[0, 3, 1, 2])?;
        let v = self.post.forward(tape, ps, v)?;
        self.out.forward(tape, ps, v)
    }

    fn plan(dims: &VitDims) -> ArchPlan {
        let (p, d) = (dims.proj, dims.d_model);
        let mut plan = ArchPlan::new("latent editor (transformer)");
        plan.push("input_proj", "Conv2d(k1, s1)", format!("{EDITOR_IN_CHANNELS} -> {p}"), Conv2d::count(EDITOR_IN_CHANNELS, p, 1));
        plan.push(
            "pre_proj",
            "GroupNorm + Conv2d(k1, s1)",
            format!("{p} -> {d}"),
            GroupNorm::count(p) + Conv2d::count(p, d, 1),
        );
        plan.push(
            "blocks",
            format!(
                "{} x (LN + MHSA {}h x {}d + LN + GEGLU x4), no positional encoding",
                dims.blocks, dims.heads, dims.d_head
            ),
            format!("{d} -> {d}"),
            dims.blocks * TransformerBlock::count(dims.heads, dims.d_head, 4),
        );
        plan.push("post_proj", "Conv2d(k1, s1)", format!("{d} -> {p}"), Conv2d::count(d, p, 1));
        plan.push("output_proj", "Conv2d(k1, s1)", format!("{p} -> {LATENT_CHANNELS}"), Conv2d::count(p, LATENT_CHANNELS, 1));
        plan
    }
}

// ---------------------------------------------------------------------------
// Editor model wrapper
// ---------------------------------------------------------------------------

enum EditorNet {
    Unet(UnetEditor),
    Vit(VitEditor),
}

/// A residual latent editor with its own parameter store. `role` namespaces
/// the parameters (e.g. `editor.recon.*` vs `editor.lipschange.*`) so the
/// two training phases produce distinct, non-colliding checkpoints.
pub struct EditorModel {
    store: ParamStore<f32>,
    net: EditorNet,
    kind: BackboneKind,
    profile: WidthProfile,
    role: String,
}

impl EditorModel {
    pub fn new(kind: BackboneKind, profile: WidthProfile, role: &str, seed: u64) -> Result<Self> {
        if role.is_empty() || !role.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(Error::invalid(format!(
                "editor role must be non-empty lowercase ascii, got {role:?}"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "editor-init");
        let prefix = format!("editor.{role}");
        let net = match kind {
            BackboneKind::Unet => {
                EditorNet::Unet(UnetEditor::new(&mut store, &mut rng, &prefix, &profile.unet_dims())?)
            }
            BackboneKind::Transformer => {
                EditorNet::Vit(VitEditor::new(&mut store, &mut rng, &prefix, &profile.vit_dims())?)
            }
        };
        Ok(EditorModel { store, net, kind, profile, role: role.to_string() })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn profile(&self) -> WidthProfile {
        self.profile
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    /// Predict the latent residual for an assembled input.
    pub fn forward_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], input: &EditorInput) -> Result<Var> {
        EDITOR_FORWARDS.fetch_add(1, Ordering::Relaxed);
        match &self.net {
            EditorNet::Unet(net) => net.forward(tape, ps, input.var),
            EditorNet::Vit(net) => net.forward(tape, ps, input.var),
        }
    }

    /// Predict the residual and compose the edited latents. The composition
    /// is exact addition: `edited = base + residual`, nothing else.
    pub fn predict_and_compose(
        &self,
        tape: &mut Tape<f32>,
        ps: &[Var],
        input: &EditorInput,
        z_base: Var,
    ) -> Result<(Var, Var)> {
        let bs = tape.value(z_base).shape().to_vec();
        if bs != [input.batch, LATENT_CHANNELS, input.h, input.w] {
            return Err(Error::shape(
                "predict_and_compose",
                format!("base latents {bs:?} do not match assembled input"),
            ));
        }
        let residual = self.forward_on_tape(tape, ps, input)?;
        let composed = tape.add(z_base, residual)?;
        Ok((residual, composed))
    }

    /// Analytic per-stage audit of a configuration, without allocating it.
    pub fn plan(kind: BackboneKind, profile: WidthProfile) -> ArchPlan {
        match kind {
            BackboneKind::Unet => UnetEditor::plan(&profile.unet_dims()),
            BackboneKind::Transformer => VitEditor::plan(&profile.vit_dims()),
        }
    }

    /// Copy all weights from another editor of the same shape, translating
    /// the role prefix. Returns the number of parameters copied.
    pub fn init_from(&mut self, source: &EditorModel) -> Result<usize> {
        if self.kind != source.kind || self.profile != source.profile {
            return Err(Error::invalid(
                "editors must share backbone kind and width profile to share weights",
            ));
        }
        let from = format!("editor.{}.", source.role);
        let to = format!("editor.{}.", self.role);
        let renamed: Vec<(String, Array<f32>)> = source
            .store
            .iter()
            .map(|(name, value)| (name.replacen(&from, &to, 1), value.clone()))
            .collect();
        let n = renamed.len();
        for (name, value) in renamed {
            self.store.set(&name, value)?;
        }
        Ok(n)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    /// Load a trained editor; parameters come back frozen.
    pub fn load(path: &Path, kind: BackboneKind, profile: WidthProfile, role: &str) -> Result<Self> {
        let mut model = EditorModel::new(kind, profile, role, 0)?;
        checkpoint::load_into(path, &mut model.store)?;
        model.store.freeze_all();
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Perceptual proxy
// ---------------------------------------------------------------------------

const PROXY_WIDTHS: [usize; 3] = [8, 16, 24];

/// Two small conv pyramids that stand in for off-the-shelf perceptual
/// networks: a frozen random *texture* stack and an *identity* stack
/// pretrained to classify synthetic identities. Both are frozen while the
/// editor trains; losses compare their per-level feature maps.
pub struct PerceptualProxy {
    store: ParamStore<f32>,
    texture: Vec<(Conv2d, GroupNorm)>,
    identity: Vec<(Conv2d, GroupNorm)>,
    id_head: Linear,
    pub n_classes: usize,
}

impl PerceptualProxy {
    pub fn new(seed: u64, n_classes: usize) -> Result<Self> {
        let mut proxy = Self::build(seed, n_classes)?;
        // The texture stack is used as-is: random frozen filters behind
        // per-level normalization make a serviceable multi-scale distance.
        proxy.store.freeze_prefix("proxy.phi.");
        Ok(proxy)
    }

    fn build(seed: u64, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!(
                "identity stack needs >= 2 classes, got {n_classes}"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "proxy-init");
        let build = |store: &mut ParamStore<f32>,
                     rng: &mut rand_chacha::ChaCha8Rng,
                     prefix: &str|
         -> Result<Vec<(Conv2d, GroupNorm)>> {
            let mut levels = Vec::with_capacity(3);
            let mut in_ch = 3;
            for (i, &out_ch) in PROXY_WIDTHS.iter().enumerate() {
                let conv = Conv2d::new(store, rng, &format!("{prefix}.c{i}"), in_ch, out_ch, 3, 2, 1)?;
                let gn = GroupNorm::new(store, &format!("{prefix}.gn{i}"), out_ch, 4)?;
                levels.push((conv, gn));
                in_ch = out_ch;
            }
            Ok(levels)
        };
        let texture = build(&mut store, &mut rng, "proxy.phi")?;
        let identity = build(&mut store, &mut rng, "proxy.psi")?;
        let id_head = Linear::new(&mut store, &mut rng, "proxy.psi.head", PROXY_WIDTHS[2], n_classes, true)?;
        Ok(PerceptualProxy { store, texture, identity, id_head, n_classes })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// True once both stacks are frozen, i.e. safe to compute editor losses.
    pub fn is_ready(&self) -> bool {
        self.store.all_frozen()
    }

    fn stack_features(
        levels: &[(Conv2d, GroupNorm)],
        tape: &mut Tape<f32>,
        ps: &[Var],
        x: Var,
    ) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(levels.len());
        let mut h = x;
        for (conv, gn) in levels {
            h = conv.forward(tape, ps, h)?;
            h = gn.forward(tape, ps, h)?;
            h = tape.silu(h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Per-level texture features of `[B, 3, H, W]` images.
    pub fn texture_features(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Vec<Var>> {
        Self::stack_features(&self.texture, tape, ps, x)
    }

    /// Per-level identity features of `[B, 3, H, W]` images.
    pub fn identity_features(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Vec<Var>> {
        Self::stack_features(&self.identity, tape, ps, x)
    }

    /// Pooled deepest identity feature of one `[3, H, W]` frame; used as an
    /// identity embedding when comparing edited outputs to their source.
    pub fn identity_embedding(&self, img: &Array<f32>) -> Result<Vec<f32>> {
        let shape = img.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("identity_embedding", format!("expected [3, H, W], got {shape:?}")));
        }
        let batched = img.clone().reshaped(&[1, 3, shape[1], shape[2]])?;
        let mut tape = Tape::new();
        let ps = self.store.leaf_all(&mut tape);
        let x = tape.constant(batched);
        let feats = self.identity_features(&mut tape, &ps, x)?;
        let last = *feats.last().expect("three levels");
        let pooled = tape.mean_spatial(last)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    fn logits_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Var> {
        let feats = self.identity_features(tape, ps, x)?;
        let last = *feats.last().expect("three levels");
        let pooled = tape.mean_spatial(last)?;
        self.id_head.forward(tape, ps, pooled)
    }

    /// Train the identity stack to classify which synthetic identity a frame
    /// shows, then freeze it. Fails when held-out accuracy stays below
    /// `cfg.min_accuracy`.
    pub fn pretrain_identity(
        &mut self,
        clips: &[ClipSample],
        cfg: &IdentityPretrainConfig,
        seed: u64,
    ) -> Result<IdentityPretrainStats> {
        let mut class_of: Vec<u64> = Vec::new();
        let mut images: Vec<&Array<f32>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for clip in clips {
            let id = clip.identity.identity_id;
            let class = match class_of.iter().position(|&c| c == id) {
                Some(i) => i,
                None => {
                    class_of.push(id);
                    class_of.len() - 1
                }
            };
            for frame in &clip.frames {
                images.push(&frame.image);
                labels.push(class);
            }
        }
        if class_of.len() != self.n_classes {
            return Err(Error::invalid(format!(
                "identity stack was sized for {} classes but clips contain {}",
                self.n_classes,
                class_of.len()
            )));
        }
        let mut train_idx = Vec::new();
        let mut held_idx = Vec::new();
        for i in 0..images.len() {
            if i % 8 == 7 {
                held_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
        held_idx.truncate(96);
        let mut rng = sub_rng(seed, "proxy-id-pretrain");
        let sched = LrSchedule::one_cycle(cfg.peak_lr, cfg.peak_lr * 1e-3, cfg.iters);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut loss_curve = Vec::new();
        let mut iters_run = 0;
        for it in 0..cfg.iters {
            iters_run = it + 1;
            let mut batch = Vec::with_capacity(cfg.batch);
            let mut batch_labels = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let i = train_idx[rng.random_range(0..train_idx.len())];
                let img = if rng.random::<f64>() < cfg.augment_prob {
                    let aug = sample_augment(&mut rng);
                    apply_image(&aug, images[i])?
                } else {
                    images[i].clone()
                };
                batch.push(img);
                batch_labels.push(labels[i]);
            }
            let refs: Vec<&Array<f32>> = batch.iter().collect();
            let x = stack_frames(&refs)?;
            let mut tape = Tape::new();
            let ps = self.store.leaf_all(&mut tape);
            let xv = tape.constant(x);
            let logits = self.logits_on_tape(&mut tape, &ps, xv)?;
            let loss = tape.cross_entropy_mean(logits, &batch_labels)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::training(format!(
                    "identity pretraining loss became non-finite at iter {it}"
                )));
            }
            if it % 25 == 0 {
                loss_curve.push((it, loss_val as f64));
            }
            tape.backward(loss)?;
            let lr = sched.lr_at(it)?;
            let trainable = self.store.trainable_indices();
            let grads: Vec<Option<Array<f32>>> =
                trainable.iter().map(|&i| tape.grad(ps[i]).cloned()).collect();
            let grad_refs: Vec<Option<&Array<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
            let mut params = self.store.trainable_mut();
            opt.step(&mut params, &grad_refs, lr)?;
            if (it + 1) % cfg.eval_every == 0
                && self.accuracy(&images, &labels, &held_idx)? >= cfg.target_accuracy
            {
                break;
            }
        }
        let held_out_accuracy = self.accuracy(&images, &labels, &held_idx)?;
        if held_out_accuracy < cfg.min_accuracy {
            return Err(Error::training(format!(
                "identity accuracy {held_out_accuracy:.3} below required {:.3} after {iters_run} iters",
                cfg.min_accuracy
            )));
        }
        self.store.freeze_prefix("proxy.psi.");
        Ok(IdentityPretrainStats { iters_run, held_out_accuracy, loss_curve })
    }

    fn accuracy(&self, images: &[&Array<f32>], labels: &[usize], idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::invalid("accuracy needs a non-empty index set"));
        }
        let mut correct = 0usize;
        for chunk in idx.chunks(16) {
            let imgs: Vec<&Array<f32>> = chunk.iter().map(|&i| images[i]).collect();
            let x = stack_frames(&imgs)?;
            let mut tape = Tape::new();
            let ps = self.store.leaf_all(&mut tape);
            let xv = tape.constant(x);
            let logits = self.logits_on_tape(&mut tape, &ps, xv)?;
            let vals = tape.value(logits);
            let n = self.n_classes;
            for (k, &i) in chunk.iter().enumerate() {
                let row = &vals.data()[k * n..(k + 1) * n];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .expect("non-empty row");
                if pred == labels[i] {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / idx.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    /// Load a pretrained proxy; class count is recovered from the head shape
    /// and all parameters come back frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::load_entries(path)?;
        let head = entries
            .iter()
            .find(|(name, _)| name == "proxy.psi.head.w")
            .ok_or_else(|| Error::Checkpoint("proxy checkpoint is missing its identity head".into()))?;
        let n_classes = *head.1.shape().last().unwrap_or(&0);
        let mut proxy = PerceptualProxy::build(0, n_classes)?;
        checkpoint::load_into(path, &mut proxy.store)?;
        proxy.store.freeze_all();
        Ok(proxy)
    }
}

#[derive(Debug, Clone)]
pub struct IdentityPretrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub peak_lr: f64,
    /// Hard floor on held-out accuracy; below this the run fails.
    pub min_accuracy: f64,
    /// Early-stop target checked every `eval_every` iterations.
    pub target_accuracy: f64,
    pub eval_every: u64,
    pub augment_prob: f64,
}

impl Default for IdentityPretrainConfig {
    fn default() -> Self {
        IdentityPretrainConfig {
            iters: 500,
            batch: 8,
            peak_lr: 2e-3,
            min_accuracy: 0.9,
            target_accuracy: 0.99,
            eval_every: 50,
            augment_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdentityPretrainStats {
    pub iters_run: u64,
    pub held_out_accuracy: f64,
    pub loss_curve: Vec<(u64, f64)>,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Weights of the six editor loss terms plus the lips-area gate threshold.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lat: f64,
    pub lat_masked: f64,
    pub pix_masked: f64,
    pub pix_lips: f64,
    pub texture: f64,
    pub identity: f64,
    /// Minimum lips-mask pixel count for a sample's lips term to count.
    pub lips_area_min: usize,
}

/// Gate threshold: half a percent of the frame's pixels, rounded.
pub fn lips_area_min_for(image_size: usize) -> usize {
    (0.005 * (image_size * image_size) as f64).round() as usize
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lat: 0.1,
            lat_masked: 0.1,
            pix_masked: 10.0,
            pix_lips: 100.0,
            texture: 50.0,
            identity: 5.0,
            lips_area_min: lips_area_min_for(64),
        }
    }
}

impl LossWeights {
    pub fn weighted_total(&self, t: &LossTerms) -> f64 {
        self.lat * t.lat
            + self.lat_masked * t.lat_masked
            + self.pix_masked * t.pix_masked
            + self.pix_lips * t.pix_lips
            + self.texture * t.texture
            + self.identity * t.identity
    }
}

/// Raw (unweighted) values of the six loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub lat: f64,
    pub lat_masked: f64,
    pub pix_masked: f64,
    pub pix_lips: f64,
    pub texture: f64,
    pub identity: f64,
}

impl LossTerms {
    /// All six terms set to the same value; handy for arithmetic checks.
    pub fn uniform(v: f64) -> Self {
        LossTerms { lat: v, lat_masked: v, pix_masked: v, pix_lips: v, texture: v, identity: v }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// Weighted sum of the six terms (the optimized objective before any
    /// auxiliary regularizers).
    pub total: f64,
    /// How many samples in the batch passed the lips-area gate.
    pub lips_active: usize,
}

/// Everything the loss needs for one batch. Latents are `[B, 4, hl, wl]`,
/// images `[B, 3, H, W]`, masks single-channel binary maps at the matching
/// resolution.
pub struct LossInputs<'a> {
    pub z_residual_pred: Var,
    pub z_residual_true: Var,
    pub x_pred: Var,
    pub x_true: Var,
    pub m_latent: &'a Array<f32>,
    pub m_pixel: &'a Array<f32>,
    pub m_lips: &'a Array<f32>,
}

fn expand_mask(mask: &Array<f32>, channels: usize) -> Result<Array<f32>> {
    let shape = mask.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape("expand_mask", format!("expected [B, 1, H, W], got {shape:?}")));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut out = Array::zeros(&[b, channels, h, w]);
    let hw = h * w;
    for bi in 0..b {
        let src = &mask.data()[bi * hw..(bi + 1) * hw];
        for c in 0..channels {
            out.data_mut()[(bi * channels + c) * hw..(bi * channels + c + 1) * hw]
                .copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Mean absolute value over the support of a binary mask, broadcast across
/// `channels`. An empty mask contributes a constant zero.
fn masked_abs_mean(
    tape: &mut Tape<f32>,
    abs_diff: Var,
    mask: &Array<f32>,
    channels: usize,
) -> Result<Var> {
    let support = mask.data().iter().filter(|v| **v > 0.0).count() * channels;
    if support == 0 {
        return Ok(tape.constant(Array::scalar(0.0f32)));
    }
    let expanded = expand_mask(mask, channels)?;
    let mv = tape.constant(expanded);
    let picked = tape.mul(abs_diff, mv)?;
    let sum = tape.sum_all(picked)?;
    tape.scale(sum, 1.0 / support as f32)
}

/// Zero out every sample whose lips mask covers fewer than `area_min`
/// pixels. Returns the gated mask and how many samples stayed active.
fn gate_lips_mask(mask: &Array<f32>, area_min: usize) -> Result<(Array<f32>, usize)> {
    let shape = mask.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape("gate_lips_mask", format!("expected [B, 1, H, W], got {shape:?}")));
    }
    let hw = shape[2] * shape[3];
    let mut gated = mask.clone();
    let mut active = 0;
    for bi in 0..shape[0] {
        let slab = &mut gated.data_mut()[bi * hw..(bi + 1) * hw];
        let area = slab.iter().filter(|v| **v > 0.0).count();
        if area >= area_min {
            active += 1;
        } else {
            slab.fill(0.0);
        }
    }
    Ok((gated, active))
}

fn feature_mae(
    tape: &mut Tape<f32>,
    pred_feats: &[Var],
    true_feats: &[Var],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&p, &t) in pred_feats.iter().zip(true_feats) {
        let d = tape.sub(p, t)?;
        let a = tape.abs(d)?;
        let m = tape.mean_all(a)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, m)?,
            None => m,
        });
    }
    acc.ok_or_else(|| Error::invalid("feature loss needs at least one level"))
}

/// Compute the six-term editor loss on the tape. Returns the weighted total
/// (differentiable) and a detached breakdown of the raw terms.
///
/// Terms: plain and masked latent-residual MAE, masked and lips-gated pixel
/// MAE of the decoded frame, and per-level feature MAE through the frozen
/// texture and identity stacks.
pub fn compute_losses(
    tape: &mut Tape<f32>,
    proxy: &PerceptualProxy,
    ps_proxy: &[Var],
    io: &LossInputs,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if !proxy.is_ready() {
        return Err(Error::invalid(
            "perceptual proxy must be pretrained and frozen before editor losses",
        ));
    }
    let zs = tape.value(io.z_residual_pred).shape().to_vec();
    if zs != tape.value(io.z_residual_true).shape() {
        return Err(Error::shape("compute_losses", "latent residual shapes disagree".to_string()));
    }
    let xs = tape.value(io.x_pred).shape().to_vec();
    if xs != tape.value(io.x_true).shape() || xs.len() != 4 || xs[1] != 3 {
        return Err(Error::shape("compute_losses", format!("pixel shapes disagree: {xs:?}")));
    }

    let dz = tape.sub(io.z_residual_pred, io.z_residual_true)?;
    let dz_abs = tape.abs(dz)?;
    let lat = tape.mean_all(dz_abs)?;
    let lat_masked = masked_abs_mean(tape, dz_abs, io.m_latent, zs[1])?;

    let dx = tape.sub(io.x_pred, io.x_true)?;
    let dx_abs = tape.abs(dx)?;
    let pix_masked = masked_abs_mean(tape, dx_abs, io.m_pixel, 3)?;
    let (gated, lips_active) = gate_lips_mask(io.m_lips, w.lips_area_min)?;
    let pix_lips = masked_abs_mean(tape, dx_abs, &gated, 3)?;

    let tex_pred = proxy.texture_features(tape, ps_proxy, io.x_pred)?;
    let tex_true = proxy.texture_features(tape, ps_proxy, io.x_true)?;
    let texture = feature_mae(tape, &tex_pred, &tex_true)?;
    let id_pred = proxy.identity_features(tape, ps_proxy, io.x_pred)?;
    let id_true = proxy.identity_features(tape, ps_proxy, io.x_true)?;
    let identity = feature_mae(tape, &id_pred, &id_true)?;

    let terms = LossTerms {
        lat: tape.value(lat).item() as f64,
        lat_masked: tape.value(lat_masked).item() as f64,
        pix_masked: tape.value(pix_masked).item() as f64,
        pix_lips: tape.value(pix_lips).item() as f64,
        texture: tape.value(texture).item() as f64,
        identity: tape.value(identity).item() as f64,
    };

    let mut total = tape.scale(lat, w.lat as f32)?;
    for (term, weight) in [
        (lat_masked, w.lat_masked),
        (pix_masked, w.pix_masked),
        (pix_lips, w.pix_lips),
        (texture, w.texture),
        (identity, w.identity),
    ] {
        let scaled = tape.scale(term, weight as f32)?;
        total = tape.add(total, scaled)?;
    }
    let breakdown = LossBreakdown { total: w.weighted_total(&terms), terms, lips_active };
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Data plumbing shared by both training phases
// ---------------------------------------------------------------------------

/// Zero the axis-aligned bounding box of a mask's support in an image. An
/// empty mask leaves the image unchanged.
pub fn mask_fill_bbox(img: &Array<f32>, mask: &Array<f32>) -> Result<Array<f32>> {
    let shape = img.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("mask_fill_bbox", format!("expected [3, H, W], got {shape:?}")));
    }
    let mut out = img.clone();
    let Some((y0, x0, y1, x1)) = mask_bbox(mask)? else {
        return Ok(out);
    };
    let (h, w) = (shape[1], shape[2]);
    for c in 0..3 {
        for y in y0..=y1.min(h - 1) {
            let row = (c * h + y) * w;
            out.data_mut()[row + x0..=row + x1.min(w - 1)].fill(0.0);
        }
    }
    Ok(out)
}

/// Ones over the bounding-box rectangle of a mask's support, `[1, H, W]`.
pub fn bbox_rect_mask(mask: &Array<f32>) -> Result<Array<f32>> {
    let shape = mask.shape().to_vec();
    let mut out = Array::zeros(&shape);
    let Some((y0, x0, y1, x1)) = mask_bbox(mask)? else {
        return Ok(out);
    };
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    for y in y0..=y1.min(h - 1) {
        out.data_mut()[y * w + x0..=y * w + x1.min(w - 1)].fill(1.0);
    }
    Ok(out)
}

/// Stack equally-shaped arrays along a fresh leading batch axis.
fn stack_frames(arrs: &[&Array<f32>]) -> Result<Array<f32>> {
    let first = arrs.first().ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let item = first.shape().to_vec();
    let mut shape = vec![arrs.len()];
    shape.extend_from_slice(&item);
    let mut out = Array::zeros(&shape);
    let n = first.numel();
    for (i, a) in arrs.iter().enumerate() {
        if a.shape() != item.as_slice() {
            return Err(Error::shape(
                "stack_frames",
                format!("item {} has shape {:?}, expected {item:?}", i, a.shape()),
            ));
        }
        out.data_mut()[i * n..(i + 1) * n].copy_from_slice(a.data());
    }
    Ok(out)
}

fn binarize_latent_mask(m_pix: &Array<f32>) -> Result<Array<f32>> {
    let mut m = downsample_mask(m_pix)?;
    for v in m.data_mut() {
        *v = if *v > 0.0 { 1.0 } else { 0.0 };
    }
    Ok(m)
}

/// Pick a reference frame index at a temporal gap from `frame`, preferring
/// `min_gap..=max_gap`; falls back to any other index on short clips.
fn pick_ref_index<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    frame: usize,
    min_gap: usize,
    max_gap: usize,
) -> usize {
    for _ in 0..32 {
        let gap = rng.random_range(min_gap..=max_gap);
        let j = if rng.random::<bool>() { frame.checked_add(gap) } else { frame.checked_sub(gap) };
        if let Some(j) = j {
            if j < len && j != frame {
                return j;
            }
        }
    }
    let mut j = rng.random_range(0..len);
    if j == frame {
        j = (j + 1) % len;
    }
    j
}

/// One assembled training batch: editor inputs, targets, reference frames,
/// and the masks the losses weigh by. For reconstruction the input is the
/// masked source and the target is the source itself; for refinement the
/// input/target come from pseudo-pairs and carry no masking.
struct EditBatch {
    inputs: Vec<Array<f32>>,
    targets: Vec<Array<f32>>,
    refs: Vec<Array<f32>>,
    m_pix: Vec<Array<f32>>,
    m_lips: Vec<Array<f32>>,
}

/// Run one optimization step of the editor (+ adapter + lips heads) on a
/// prepared batch. Returns the loss breakdown and the optimized total
/// (weighted losses plus the residual-magnitude regularizer).
#[allow(clippy::too_many_arguments)]
fn editor_training_step(
    editor: &mut EditorModel,
    adapter: &mut RefAdapter,
    lips_enc: &mut LipsEncoder,
    codec: &CodecModel,
    proxy: &PerceptualProxy,
    batch: &EditBatch,
    weights: &LossWeights,
    opt: &mut AdamW<f32>,
    lr: f64,
) -> Result<(LossBreakdown, f64)> {
    let b = batch.inputs.len();
    let input_refs: Vec<&Array<f32>> = batch.inputs.iter().collect();
    let target_refs: Vec<&Array<f32>> = batch.targets.iter().collect();
    let ref_refs: Vec<&Array<f32>> = batch.refs.iter().collect();
    let x_in = stack_frames(&input_refs)?;
    let x_tgt = stack_frames(&target_refs)?;
    let x_ref = stack_frames(&ref_refs)?;
    let m_pix_refs: Vec<&Array<f32>> = batch.m_pix.iter().collect();
    let m_lips_refs: Vec<&Array<f32>> = batch.m_lips.iter().collect();
    let m_pix = stack_frames(&m_pix_refs)?;
    let m_lips = stack_frames(&m_lips_refs)?;
    let m_lat = binarize_latent_mask(&m_pix)?;

    // Latents come from the frozen codec, so they are plain constants.
    let z_in = codec.encode(&x_in)?;
    let z_tgt = codec.encode(&x_tgt)?;
    let z_ref = codec.encode(&x_ref)?;

    // Lips conditioning is read off the *target* frame so the lips heads
    // keep training: pooled features feed the main head on the tape, mouth
    // crops feed the residual head, absent mouths contribute zero rows.
    let feats = lips_enc.features_batch(&target_refs)?;
    let mut crops: Vec<Array<f32>> = Vec::with_capacity(b);
    let mut presence = Array::zeros(&[b, RESIDUAL_DIM]);
    for (i, (img, lm)) in batch.targets.iter().zip(&batch.m_lips).enumerate() {
        match crop_mouth(img, lm)? {
            Some(c) => {
                crops.push(c);
                presence.data_mut()[i * RESIDUAL_DIM..(i + 1) * RESIDUAL_DIM].fill(1.0);
            }
            None => crops.push(Array::zeros(&[3, MOUTH_CROP_SIZE, MOUTH_CROP_SIZE])),
        }
    }
    let crop_refs: Vec<&Array<f32>> = crops.iter().collect();
    let crop_batch = stack_frames(&crop_refs)?;

    let mut tape = Tape::new();
    let ps_ed = editor.store.leaf_all(&mut tape);
    let ps_ad = adapter.store.leaf_all(&mut tape);
    let ps_lips = lips_enc.store().leaf_all(&mut tape);
    let ps_codec = codec.store().leaf_all(&mut tape);
    let ps_proxy = proxy.store().leaf_all(&mut tape);

    let z_in_c = tape.constant(z_in);
    let z_tgt_c = tape.constant(z_tgt);
    let z_ref_c = tape.constant(z_ref);
    let z_residual_true = tape.sub(z_tgt_c, z_in_c)?;

    let ref_feat = adapter.forward_on_tape(&mut tape, &ps_ad, z_ref_c)?;
    let feats_c = tape.constant(feats);
    let main = lips_enc.head_on_tape(&mut tape, &ps_lips, feats_c)?;
    let crops_c = tape.constant(crop_batch);
    let residual_raw = lips_enc.residual_on_tape(&mut tape, &ps_lips, crops_c)?;
    let presence_c = tape.constant(presence);
    let residual = tape.mul(residual_raw, presence_c)?;
    let lips_vec = tape.concat(&[main, residual], 1)?;

    let input = assemble_input(&mut tape, z_in_c, ref_feat, lips_vec)?;
    let (z_residual_pred, z_edit) = editor.predict_and_compose(&mut tape, &ps_ed, &input, z_in_c)?;
    let x_pred = codec.decode_on_tape(&mut tape, &ps_codec, z_edit)?;
    let x_true_c = tape.constant(x_tgt);

    let io = LossInputs {
        z_residual_pred,
        z_residual_true,
        x_pred,
        x_true: x_true_c,
        m_latent: &m_lat,
        m_pixel: &m_pix,
        m_lips: &m_lips,
    };
    let (loss, breakdown) = compute_losses(&mut tape, proxy, &ps_proxy, &io, weights)?;
    // Keep the learned 4-dim residual from drifting large: penalize its
    // mean square so it only encodes what the main 8 dims cannot.
    let res_sq = tape.mul(residual, residual)?;
    let res_pen = tape.mean_all(res_sq)?;
    let res_pen = tape.scale(res_pen, RESIDUAL_L2_PENALTY)?;
    let total = tape.add(loss, res_pen)?;
    let total_val = tape.value(total).item() as f64;
    tape.backward(total)?;

    let mut grads: Vec<Option<Array<f32>>> = Vec::new();
    for (store, ps) in [
        (&editor.store, &ps_ed),
        (&adapter.store, &ps_ad),
        (lips_enc.store(), &ps_lips),
    ] {
        for i in store.trainable_indices() {
            grads.push(tape.grad(ps[i]).cloned());
        }
    }
    let grad_refs: Vec<Option<&Array<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
    let mut params: Vec<&mut Array<f32>> = Vec::new();
    params.extend(editor.store.trainable_mut());
    params.extend(adapter.store.trainable_mut());
    params.extend(lips_enc.store_mut().trainable_mut());
    opt.step(&mut params, &grad_refs, lr)?;
    Ok((breakdown, total_val))
}

struct LossLog {
    writer: Option<std::io::BufWriter<std::fs::File>>,
}

impl LossLog {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let writer = match path {
            Some(p) => {
                let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(w, "iter,lat,lat_masked,pix_masked,pix_lips,texture,identity,total,lr")?;
                Some(w)
            }
            None => None,
        };
        Ok(LossLog { writer })
    }

    fn row(&mut self, it: u64, b: &LossBreakdown, total: f64, lr: f64) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let t = &b.terms;
            writeln!(
                w,
                "{it},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{lr:.3e}",
                t.lat, t.lat_masked, t.pix_masked, t.pix_lips, t.texture, t.identity, total
            )?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

fn split_train_eval(clips: &[ClipSample]) -> (Vec<&ClipSample>, Vec<&ClipSample>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        if clips.len() >= 8 && i % 8 == 7 {
            eval.push(c);
        } else {
            train.push(c);
        }
    }
    if eval.is_empty() {
        if let Some(last) = train.last() {
            eval.push(*last);
        }
    }
    (train, eval)
}

// ---------------------------------------------------------------------------
// Phase 1: masked reconstruction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReconTrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Temporal gap range for reference-frame sampling.
    pub min_gap: usize,
    pub max_gap: usize,
    pub eval_every: u64,
    /// Frames scored per evaluation pass.
    pub eval_frames: usize,
    /// Early-stop once held-out masked-region PSNR reaches this.
    pub target_psnr: f64,
    /// Probability of color-jitter/flip augmentation per training sample.
    pub augment_prob: f64,
    pub loss_csv: Option<PathBuf>,
    /// Print evaluation results to stderr as training progresses.
    pub progress: bool,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        ReconTrainConfig {
            iters: 4000,
            batch: 8,
            peak_lr: 2.5e-4,
            final_lr: 1e-8,
            min_gap: 5,
            max_gap: 30,
            eval_every: 200,
            eval_frames: 12,
            target_psnr: 29.0,
            augment_prob: 0.25,
            loss_csv: None,
            progress: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconStats {
    pub iters_run: u64,
    pub final_masked_psnr: f64,
    pub loss_curve: Vec<(u64, f64)>,
}

/// Phase-1 training: repaint the blanked lower face from a reference frame
/// and the target lips vector. Trains the editor, the reference adapter, and
/// the unfrozen lips-encoder heads jointly.
#[allow(clippy::too_many_arguments)]
pub fn train_reconstruction(
    editor: &mut EditorModel,
    adapter: &mut RefAdapter,
    lips_enc: &mut LipsEncoder,
    codec: &CodecModel,
    proxy: &PerceptualProxy,
    clips: &[ClipSample],
    cfg: &ReconTrainConfig,
    seed: u64,
) -> Result<ReconStats> {
    if clips.is_empty() {
        return Err(Error::invalid("reconstruction training needs at least one clip"));
    }
    if !codec.is_frozen() {
        return Err(Error::invalid("codec must be trained and frozen before the editor"));
    }
    let (train, eval) = split_train_eval(clips);
    let weights = LossWeights::default();
    let sched = LrSchedule::one_cycle(cfg.peak_lr, cfg.final_lr, cfg.iters);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = sub_rng(seed, "stage1-recon");
    let mut log = LossLog::open(&cfg.loss_csv)?;
    let mut loss_curve = Vec::new();
    let mut iters_run = 0;
    for it in 0..cfg.iters {
        iters_run = it + 1;
        let mut batch = EditBatch {
            inputs: Vec::with_capacity(cfg.batch),
            targets: Vec::with_capacity(cfg.batch),
            refs: Vec::with_capacity(cfg.batch),
            m_pix: Vec::with_capacity(cfg.batch),
            m_lips: Vec::with_capacity(cfg.batch),
        };
        for _ in 0..cfg.batch {
            let clip = train[rng.random_range(0..train.len())];
            let i = rng.random_range(0..clip.len());
            let j = pick_ref_index(&mut rng, clip.len(), i, cfg.min_gap, cfg.max_gap);
            let aug = if rng.random::<f64>() < cfg.augment_prob {
                sample_augment(&mut rng)
            } else {
                Augment::NONE
            };
            let src = apply_image(&aug, &clip.frames[i].image)?;
            let reference = apply_image(&aug, &clip.frames[j].image)?;
            let m_pix = apply_mask(&aug, &clip.frames[i].mask)?;
            let m_lips = apply_mask(&aug, &clip.frames[i].lips_mask)?;
            batch.inputs.push(mask_fill_bbox(&src, &m_pix)?);
            batch.targets.push(src);
            batch.refs.push(reference);
            batch.m_pix.push(m_pix);
            batch.m_lips.push(m_lips);
        }
        let (breakdown, total) =
            editor_training_step(editor, adapter, lips_enc, codec, proxy, &batch, &weights, &mut opt, sched.lr_at(it)?)?;
        if !total.is_finite() {
            return Err(Error::training(format!(
                "reconstruction loss became non-finite at iter {it}"
            )));
        }
        log.row(it, &breakdown, total, sched.lr_at(it)?)?;
        loss_curve.push((it, total));
        if (it + 1) % cfg.eval_every == 0 {
            let psnr = evaluate_masked_reconstruction(editor, adapter, lips_enc, codec, &eval, cfg.eval_frames)?;
            if cfg.progress {
                eprintln!("recon iter {:5}  loss {total:8.4}  held-out masked psnr {psnr:6.2} dB", it + 1);
            }
            if psnr >= cfg.target_psnr {
                break;
            }
        }
    }
    log.finish()?;
    let final_masked_psnr =
        evaluate_masked_reconstruction(editor, adapter, lips_enc, codec, &eval, cfg.eval_frames)?;
    Ok(ReconStats { iters_run, final_masked_psnr, loss_curve })
}

/// Mean masked-region PSNR of reconstructions over held-out clips: the lower
/// face is blanked, repainted from a reference frame and the frame's own
/// lips vector, and scored against the original inside the blanked box.
pub fn evaluate_masked_reconstruction(
    editor: &EditorModel,
    adapter: &RefAdapter,
    lips_enc: &LipsEncoder,
    codec: &CodecModel,
    clips: &[&ClipSample],
    max_frames: usize,
) -> Result<f64> {
    if clips.is_empty() || max_frames == 0 {
        return Err(Error::invalid("masked-reconstruction eval needs clips and frames"));
    }
    let mut scores = Vec::new();
    'outer: for clip in clips {
        let stride = (clip.len() / 4).max(1);
        for i in (0..clip.len()).step_by(stride) {
            let frame = &clip.frames[i];
            let j = if i + 10 < clip.len() { i + 10 } else { i.saturating_sub(10) };
            let reference = &clip.frames[if j == i { (i + 1) % clip.len() } else { j }];
            let lips = lips_enc.encode(&frame.image, &frame.lips_mask)?.vector;
            let masked = mask_fill_bbox(&frame.image, &frame.mask)?;
            let out = run_editor(editor, adapter, codec, &masked, &reference.image, &lips)?;
            let region = bbox_rect_mask(&frame.mask)?;
            scores.push(psnr_masked(&out, &frame.image, &region)?);
            if scores.len() >= max_frames {
                break 'outer;
            }
        }
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

// ---------------------------------------------------------------------------
// Phase 2: self-refinement on pseudo-pairs
// ---------------------------------------------------------------------------

/// Direction of one pseudo-pair training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDirection {
    /// Input is the real frame, target is its synthesized lip edit.
    RealToSynth,
    /// Input is the synthesized edit, target is the real frame.
    SynthToReal,
}

/// Draw a training direction: real-to-synthetic two thirds of the time.
pub fn sample_direction<R: Rng + ?Sized>(rng: &mut R) -> PairDirection {
    if rng.random::<f64>() < REAL_TO_SYNTH_PROB {
        PairDirection::RealToSynth
    } else {
        PairDirection::SynthToReal
    }
}

/// One direction of a pseudo-pair: map `input` to `target`, driven by the
/// lips vector that describes the target's mouth.
#[derive(Debug, Clone)]
pub struct PseudoPair {
    pub input: Array<f32>,
    pub target: Array<f32>,
    pub lips: LipsVector,
    pub direction: PairDirection,
}

/// Both directions over one (real, synthetic) frame pair. The synthetic
/// frame is shared: `real_to_synth.target` and `synth_to_real.input` are the
/// same image.
#[derive(Debug, Clone)]
pub struct PseudoPairs {
    pub real_to_synth: PseudoPair,
    pub synth_to_real: PseudoPair,
}

/// Generate a pseudo-pair from one real frame: blank its lower face, repaint
/// it with `target_lips` through the (reconstruction-trained) editor, and
/// return both training directions over the result.
#[allow(clippy::too_many_arguments)]
pub fn make_pseudo_pairs(
    editor: &EditorModel,
    adapter: &RefAdapter,
    lips_enc: &LipsEncoder,
    codec: &CodecModel,
    src_image: &Array<f32>,
    edit_mask: &Array<f32>,
    lips_mask: &Array<f32>,
    ref_image: &Array<f32>,
    target_lips: &LipsVector,
) -> Result<PseudoPairs> {
    let masked = mask_fill_bbox(src_image, edit_mask)?;
    let mut synth = run_editor(editor, adapter, codec, &masked, ref_image, target_lips)?;
    for v in synth.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let real_lips = lips_enc.encode(src_image, lips_mask)?.vector;
    Ok(PseudoPairs {
        real_to_synth: PseudoPair {
            input: src_image.clone(),
            target: synth.clone(),
            lips: *target_lips,
            direction: PairDirection::RealToSynth,
        },
        synth_to_real: PseudoPair {
            input: synth,
            target: src_image.clone(),
            lips: real_lips,
            direction: PairDirection::SynthToReal,
        },
    })
}

/// Sample a lips vector to drive pseudo-pair generation: half the time from
/// another frame of the same clip, otherwise from a random other clip.
pub fn sample_refinement_lips<R: Rng + ?Sized>(
    rng: &mut R,
    clips: &[&ClipSample],
    clip_idx: usize,
    frame_idx: usize,
    lips_enc: &LipsEncoder,
) -> Result<LipsVector> {
    let (c, f) = if rng.random::<bool>() || clips.len() < 2 {
        let clip = clips[clip_idx];
        let mut f = rng.random_range(0..clip.len());
        if f == frame_idx {
            f = (f + 1) % clip.len();
        }
        (clip_idx, f)
    } else {
        let mut c = rng.random_range(0..clips.len());
        if c == clip_idx {
            c = (c + 1) % clips.len();
        }
        (c, rng.random_range(0..clips[c].len()))
    };
    let frame = &clips[c].frames[f];
    Ok(lips_enc.encode(&frame.image, &frame.lips_mask)?.vector)
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub iters: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub min_gap: usize,
    pub max_gap: usize,
    /// Probability of color-jitter/flip augmentation per training sample.
    pub augment_prob: f64,
    pub loss_csv: Option<PathBuf>,
    /// Print running losses to stderr as training progresses.
    pub progress: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iters: 1200,
            batch: 8,
            peak_lr: 5e-5,
            final_lr: 1e-8,
            min_gap: 5,
            max_gap: 30,
            augment_prob: 0.25,
            loss_csv: None,
            progress: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineStats {
    pub iters_run: u64,
    pub loss_curve: Vec<(u64, f64)>,
    pub real_to_synth_steps: u64,
    pub synth_to_real_steps: u64,
}

/// Phase-2 training: start a fresh editor from the reconstruction weights
/// and fine-tune it on pseudo-pairs *without masking its input*, so the
/// model learns to edit fully visible frames. Masks still weight the losses.
/// On success the refined editor, the adapter, and the lips encoder are all
/// frozen — they are the inference artifacts.
#[allow(clippy::too_many_arguments)]
pub fn refine_lipschange(
    recon: &EditorModel,
    adapter: &mut RefAdapter,
    lips_enc: &mut LipsEncoder,
    codec: &CodecModel,
    proxy: &PerceptualProxy,
    clips: &[ClipSample],
    cfg: &RefineConfig,
    seed: u64,
) -> Result<(EditorModel, RefineStats)> {
    if clips.is_empty() {
        return Err(Error::invalid("refinement needs at least one clip"));
    }
    let mut editor = EditorModel::new(recon.kind, recon.profile, "lipschange", seed)?;
    editor.init_from(recon)?;
    let (train, _) = split_train_eval(clips);
    let weights = LossWeights::default();
    let sched = LrSchedule::one_cycle(cfg.peak_lr, cfg.final_lr, cfg.iters);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = sub_rng(seed, "stage1-refine");
    let mut log = LossLog::open(&cfg.loss_csv)?;
    let mut loss_curve = Vec::new();
    let mut r2s_steps = 0u64;
    let mut s2r_steps = 0u64;
    let mut iters_run = 0;
    for it in 0..cfg.iters {
        iters_run = it + 1;
        let mut batch = EditBatch {
            inputs: Vec::with_capacity(cfg.batch),
            targets: Vec::with_capacity(cfg.batch),
            refs: Vec::with_capacity(cfg.batch),
            m_pix: Vec::with_capacity(cfg.batch),
            m_lips: Vec::with_capacity(cfg.batch),
        };
        for _ in 0..cfg.batch {
            let ci = rng.random_range(0..train.len());
            let clip = train[ci];
            let i = rng.random_range(0..clip.len());
            let j = pick_ref_index(&mut rng, clip.len(), i, cfg.min_gap, cfg.max_gap);
            let target_lips = sample_refinement_lips(&mut rng, &train, ci, i, lips_enc)?;
            let aug = if rng.random::<f64>() < cfg.augment_prob {
                sample_augment(&mut rng)
            } else {
                Augment::NONE
            };
            let src = apply_image(&aug, &clip.frames[i].image)?;
            let reference = apply_image(&aug, &clip.frames[j].image)?;
            let m_pix = apply_mask(&aug, &clip.frames[i].mask)?;
            let m_lips = apply_mask(&aug, &clip.frames[i].lips_mask)?;
            let pairs = make_pseudo_pairs(
                recon, adapter, lips_enc, codec, &src, &m_pix, &m_lips, &reference, &target_lips,
            )?;
            let pair = match sample_direction(&mut rng) {
                PairDirection::RealToSynth => {
                    r2s_steps += 1;
                    pairs.real_to_synth
                }
                PairDirection::SynthToReal => {
                    s2r_steps += 1;
                    pairs.synth_to_real
                }
            };
            batch.inputs.push(pair.input);
            batch.targets.push(pair.target);
            batch.refs.push(reference);
            batch.m_pix.push(m_pix);
            batch.m_lips.push(m_lips);
        }
        let (breakdown, total) = editor_training_step(
            &mut editor, adapter, lips_enc, codec, proxy, &batch, &weights, &mut opt,
            sched.lr_at(it)?,
        )?;
        if !total.is_finite() {
            return Err(Error::training(format!("refinement loss became non-finite at iter {it}")));
        }
        log.row(it, &breakdown, total, sched.lr_at(it)?)?;
        loss_curve.push((it, total));
        if cfg.progress && (it + 1) % 100 == 0 {
            let tail = &loss_curve[loss_curve.len().saturating_sub(100)..];
            let mean = tail.iter().map(|(_, l)| l).sum::<f64>() / tail.len() as f64;
            eprintln!("refine iter {:5}  mean loss {mean:8.4}", it + 1);
        }
    }
    log.finish()?;
    editor.store.freeze_all();
    adapter.store.freeze_all();
    lips_enc.store_mut().freeze_all();
    Ok((
        editor,
        RefineStats { iters_run, loss_curve, real_to_synth_steps: r2s_steps, synth_to_real_steps: s2r_steps },
    ))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Full editor pass over one frame: encode, adapt the reference, assemble,
/// predict the residual, compose, decode. No masking anywhere.
fn run_editor(
    editor: &EditorModel,
    adapter: &RefAdapter,
    codec: &CodecModel,
    frame: &Array<f32>,
    reference: &Array<f32>,
    lips: &LipsVector,
) -> Result<Array<f32>> {
    let shape = frame.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("run_editor", format!("expected [3, H, W], got {shape:?}")));
    }
    let z_in = codec.encode(frame)?;
    let z_ref = codec.encode(reference)?;
    let zs = z_in.shape().to_vec();
    let z_in = z_in.reshaped(&[1, zs[0], zs[1], zs[2]])?;
    let z_ref = z_ref.reshaped(&[1, zs[0], zs[1], zs[2]])?;
    let mut tape = Tape::new();
    let ps_ed = editor.store.leaf_all(&mut tape);
    let ps_ad = adapter.store.leaf_all(&mut tape);
    let ps_codec = codec.store().leaf_all(&mut tape);
    let z_in_c = tape.constant(z_in);
    let z_ref_c = tape.constant(z_ref);
    let ref_feat = adapter.forward_on_tape(&mut tape, &ps_ad, z_ref_c)?;
    let lips_c = tape.constant(lips.to_array().reshaped(&[1, LIPS_DIM])?);
    let input = assemble_input(&mut tape, z_in_c, ref_feat, lips_c)?;
    let (_, z_edit) = editor.predict_and_compose(&mut tape, &ps_ed, &input, z_in_c)?;
    let x = codec.decode_on_tape(&mut tape, &ps_codec, z_edit)?;
    let mut out = tape.value(x).clone();
    let os = out.shape()[1..].to_vec();
    out = out.reshaped(&os)?;
    Ok(out)
}

/// Edit one fully visible frame to match a lips vector. Requires finalized
/// (frozen) weights; output is clamped to `[0, 1]` and deterministic.
pub fn infer_edit(
    editor: &EditorModel,
    adapter: &RefAdapter,
    codec: &CodecModel,
    frame: &Array<f32>,
    reference: &Array<f32>,
    lips: &LipsVector,
) -> Result<Array<f32>> {
    if !editor.store.all_frozen() || !adapter.store.all_frozen() || !codec.is_frozen() {
        return Err(Error::invalid(
            "inference requires finalized weights: editor, adapter and codec must be frozen",
        ));
    }
    let mut out = run_editor(editor, adapter, codec, frame, reference, lips)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}
