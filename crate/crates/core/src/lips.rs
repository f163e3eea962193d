//! Pose-only lips embedding.
//!
//! Turns a face frame into a compact 12-dim vector describing the mouth
//! configuration while staying as blind as possible to identity and
//! background. The vector is a concatenation of two parts:
//!
//! * main (8 dims) — a trainable MLP head on top of a convolutional
//!   backbone that was pretrained to regress the scripted mouth pose and
//!   then frozen;
//! * residual (4 dims) — a small CNN over a fixed-size crop of the mouth
//!   region, zero-initialised so it only grows terms the main part cannot
//!   express.
//!
//! A distilled single-pass encoder reproduces the combined vector from the
//! full frame without needing a mouth mask, for use on frames where no mask
//! exists (e.g. edited outputs at inference time).
//!
//! All image entry points first canonicalise the (uniform) background to a
//! fixed gray so that background colour cannot leak into the embedding.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{mse, pearson};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamStore, ResNet2d};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::sub_rng;
use crate::tensor::{Array, Tape, Var};
use crate::world::{
    apply_image, apply_mask, bilinear_resize, make_masks, mask_bbox, render_face, sample_augment,
    synth_identity, ClipSample, GroundTruthPose, HeadPose, RenderOptions,
};
use rand::Rng;
use std::path::Path;

/// Dims of the backbone+head ("main") part of the lips vector.
pub const MAIN_DIM: usize = 8;
/// Dims of the mouth-crop residual part.
pub const RESIDUAL_DIM: usize = 4;
/// Total lips vector length.
pub const LIPS_DIM: usize = MAIN_DIM + RESIDUAL_DIM;
/// Side length of the resampled mouth crop fed to the residual net.
pub const MOUTH_CROP_SIZE: usize = 24;
/// Pixels of margin added around the mouth-mask bounding box before cropping.
pub const MOUTH_CROP_MARGIN: usize = 2;
/// Gray level every uniform background is remapped to before encoding.
pub const CANONICAL_BG: f32 = 0.2;
/// L2 penalty weight applied to the residual output during joint training.
pub const RESIDUAL_L2_PENALTY: f32 = 1e-3;
/// Feature width produced by the frozen backbone.
pub const BACKBONE_FEAT_DIM: usize = 64;

/// Input side length the encoders operate on.
const INPUT_SIZE: usize = 64;
/// Soft match width for deciding whether a pixel belongs to the background.
const BG_MATCH_SIGMA: f32 = 0.02;

/// 12-dim mouth-pose embedding: `[0..8)` main, `[8..12)` residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipsVector(pub [f32; LIPS_DIM]);

impl LipsVector {
    /// Concatenate the 8-dim main and 4-dim residual parts.
    pub fn combine(main: &[f32], residual: &[f32]) -> Result<Self> {
        if main.len() != MAIN_DIM {
            return Err(Error::invalid(format!(
                "lips main part must have {MAIN_DIM} dims, got {}",
                main.len()
            )));
        }
        if residual.len() != RESIDUAL_DIM {
            return Err(Error::invalid(format!(
                "lips residual part must have {RESIDUAL_DIM} dims, got {}",
                residual.len()
            )));
        }
        let mut data = [0.0f32; LIPS_DIM];
        data[..MAIN_DIM].copy_from_slice(main);
        data[MAIN_DIM..].copy_from_slice(residual);
        Ok(LipsVector(data))
    }

    /// The 8-dim backbone+head part.
    pub fn main(&self) -> &[f32] {
        &self.0[..MAIN_DIM]
    }

    /// The 4-dim mouth-crop residual part.
    pub fn residual(&self) -> &[f32] {
        &self.0[MAIN_DIM..]
    }

    /// Inverse of [`LipsVector::combine`].
    pub fn split(&self) -> (&[f32], &[f32]) {
        (self.main(), self.residual())
    }

    pub fn as_slice(&self) -> &[f32; LIPS_DIM] {
        &self.0
    }

    pub fn to_array(&self) -> Array<f32> {
        Array::from_vec(&[LIPS_DIM], self.0.to_vec()).expect("fixed-size vector")
    }

    /// Euclidean distance to another lips vector.
    pub fn distance(&self, other: &LipsVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Replicate a lips vector over a spatial grid: output `[12, h, w]` with
/// `out[c, y, x] == v[c]` for every position.
pub fn expand_spatial(v: &LipsVector, h: usize, w: usize) -> Result<Array<f32>> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("expand_spatial: zero spatial size"));
    }
    let mut out = Array::zeros(&[LIPS_DIM, h, w]);
    let data = out.data_mut();
    for (c, val) in v.0.iter().enumerate() {
        data[c * h * w..(c + 1) * h * w].fill(*val);
    }
    Ok(out)
}

/// Remap the uniform background of a `[3, H, W]` frame to [`CANONICAL_BG`].
///
/// The background colour is estimated from the four image corners (the face
/// never reaches them), and every pixel is shifted toward the canonical gray
/// in proportion to a soft colour-match score, so exactly-background pixels
/// land exactly on the canonical value while face pixels are untouched. The
/// transform is idempotent.
pub fn canonicalize_background(img: &Array<f32>) -> Result<Array<f32>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            "canonicalize_background",
            format!("expected [3, H, W], got {shape:?}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    if h < 4 || w < 4 {
        return Err(Error::invalid("canonicalize_background: image smaller than 4x4"));
    }
    let data = img.data();
    let mut bg = [0.0f64; 3];
    for c in 0..3 {
        let plane = &data[c * h * w..(c + 1) * h * w];
        let mut sum = 0.0f64;
        for (y0, x0) in [(0, 0), (0, w - 2), (h - 2, 0), (h - 2, w - 2)] {
            for dy in 0..2 {
                for dx in 0..2 {
                    sum += plane[(y0 + dy) * w + (x0 + dx)] as f64;
                }
            }
        }
        bg[c] = sum / 16.0;
    }
    let inv_two_sigma_sq = 1.0 / (2.0 * (BG_MATCH_SIGMA as f64) * (BG_MATCH_SIGMA as f64));
    let mut out = img.clone();
    let out_data = out.data_mut();
    for p in 0..h * w {
        let mut d2 = 0.0f64;
        for c in 0..3 {
            let d = data[c * h * w + p] as f64 - bg[c];
            d2 += d * d;
        }
        let sigma = (-d2 * inv_two_sigma_sq).exp();
        for c in 0..3 {
            let shift = (CANONICAL_BG as f64 - bg[c]) * sigma;
            out_data[c * h * w + p] = (data[c * h * w + p] as f64 + shift) as f32;
        }
    }
    Ok(out)
}

/// Canonicalise each frame and stack into a `[B, 3, H, W]` batch.
fn canon_stack(imgs: &[&Array<f32>]) -> Result<Array<f32>> {
    if imgs.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let shape = imgs[0].shape().to_vec();
    let mut out = Array::zeros(&[imgs.len(), shape[0], shape[1], shape[2]]);
    let stride = imgs[0].numel();
    for (i, img) in imgs.iter().enumerate() {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(
                "canon_stack",
                format!("mixed frame shapes {:?} vs {:?}", img.shape(), shape),
            ));
        }
        let canon = canonicalize_background(img)?;
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(canon.data());
    }
    Ok(out)
}

/// Extract the mouth region of a frame as a fixed `[3, 24, 24]` crop.
///
/// The crop covers the bounding box of the lips mask plus a small margin,
/// resampled bilinearly; the frame background is canonicalised first.
/// Returns `None` when the mask is empty (no visible mouth).
pub fn crop_mouth(img: &Array<f32>, lips_mask: &Array<f32>) -> Result<Option<Array<f32>>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("crop_mouth", format!("expected [3, H, W], got {shape:?}")));
    }
    if lips_mask.shape() != [1, shape[1], shape[2]] {
        return Err(Error::shape(
            "crop_mouth",
            format!("mask {:?} does not match image {shape:?}", lips_mask.shape()),
        ));
    }
    let Some((y0, x0, y1, x1)) = mask_bbox(lips_mask)? else {
        return Ok(None);
    };
    let (h, w) = (shape[1], shape[2]);
    let y0 = y0.saturating_sub(MOUTH_CROP_MARGIN);
    let x0 = x0.saturating_sub(MOUTH_CROP_MARGIN);
    let y1 = (y1 + MOUTH_CROP_MARGIN).min(h - 1);
    let x1 = (x1 + MOUTH_CROP_MARGIN).min(w - 1);
    let (ch, cw) = (y1 - y0 + 1, x1 - x0 + 1);
    let canon = canonicalize_background(img)?;
    let data = canon.data();
    let mut sub = Array::zeros(&[3, ch, cw]);
    let sub_data = sub.data_mut();
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                sub_data[(c * ch + y) * cw + x] = data[(c * h + (y0 + y)) * w + (x0 + x)];
            }
        }
    }
    Ok(Some(bilinear_resize(&sub, MOUTH_CROP_SIZE, MOUTH_CROP_SIZE)?))
}

/// Residual part of an encoding plus the mouth-visibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEncoding {
    pub residual: [f32; RESIDUAL_DIM],
    /// True when the lips mask was empty and the residual defaulted to zero.
    pub mouth_absent: bool,
}

/// Full encoding of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipsEncoding {
    pub vector: LipsVector,
    pub mouth_absent: bool,
}

/// Two-part lips encoder: frozen pose backbone + trainable head, and the
/// mouth-crop residual net.
pub struct LipsEncoder {
    store: ParamStore<f32>,
    c0: Conv2d,
    c1: Conv2d,
    gn1: GroupNorm,
    c2: Conv2d,
    gn2: GroupNorm,
    c3: Conv2d,
    fc: Linear,
    probe: Linear,
    h0: Linear,
    h1: Linear,
    r0: Conv2d,
    r1: Conv2d,
    r2: Conv2d,
    rfc: Linear,
}

impl LipsEncoder {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = sub_rng(seed, "lips-init");
        let mut store = ParamStore::new();
        let c0 = Conv2d::new(&mut store, &mut rng, "lips.backbone.c0", 3, 12, 3, 2, 1)?;
        let c1 = Conv2d::new(&mut store, &mut rng, "lips.backbone.c1", 12, 24, 3, 2, 1)?;
        let gn1 = GroupNorm::new(&mut store, "lips.backbone.gn1", 24, 8)?;
        let c2 = Conv2d::new(&mut store, &mut rng, "lips.backbone.c2", 24, 32, 3, 2, 1)?;
        let gn2 = GroupNorm::new(&mut store, "lips.backbone.gn2", 32, 8)?;
        let c3 = Conv2d::new(&mut store, &mut rng, "lips.backbone.c3", 32, 32, 3, 2, 1)?;
        let fc = Linear::new(
            &mut store,
            &mut rng,
            "lips.backbone.fc",
            32 * (INPUT_SIZE / 16) * (INPUT_SIZE / 16),
            BACKBONE_FEAT_DIM,
            true,
        )?;
        let probe = Linear::new(&mut store, &mut rng, "lips.backbone.probe", MAIN_DIM, 4, true)?;
        let h0 = Linear::new(&mut store, &mut rng, "lips.head.h0", BACKBONE_FEAT_DIM, 32, true)?;
        let h1 = Linear::new(&mut store, &mut rng, "lips.head.h1", 32, MAIN_DIM, true)?;
        let r0 = Conv2d::new(&mut store, &mut rng, "lips.residual.c0", 3, 8, 3, 2, 1)?;
        let r1 = Conv2d::new(&mut store, &mut rng, "lips.residual.c1", 8, 16, 3, 2, 1)?;
        let r2 = Conv2d::new(&mut store, &mut rng, "lips.residual.c2", 16, 16, 3, 2, 1)?;
        let rfc = Linear::new(&mut store, &mut rng, "lips.residual.fc", 16 * 3 * 3, RESIDUAL_DIM, true)?;
        // Zero the residual projection so the residual starts inert and only
        // grows what the main part cannot express.
        store.set("lips.residual.fc.w", Array::zeros(&[16 * 3 * 3, RESIDUAL_DIM]))?;
        store.set("lips.residual.fc.b", Array::zeros(&[RESIDUAL_DIM]))?;
        Ok(LipsEncoder {
            store,
            c0,
            c1,
            gn1,
            c2,
            gn2,
            c3,
            fc,
            probe,
            h0,
            h1,
            r0,
            r1,
            r2,
            rfc,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn backbone_frozen(&self) -> bool {
        self.store.is_frozen("lips.backbone.c0.w").unwrap_or(false)
    }

    fn backbone_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != INPUT_SIZE || shape[3] != INPUT_SIZE {
            return Err(Error::shape(
                "lips_backbone",
                format!("expected [B, 3, {INPUT_SIZE}, {INPUT_SIZE}], got {shape:?}"),
            ));
        }
        let b = shape[0];
        let h = self.c0.forward(tape, ps, x)?;
        let h = tape.silu(h)?;
        let h = self.c1.forward(tape, ps, h)?;
        let h = self.gn1.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        let h = self.c2.forward(tape, ps, h)?;
        let h = self.gn2.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        let h = self.c3.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        let flat = 32 * (INPUT_SIZE / 16) * (INPUT_SIZE / 16);
        let h = tape.reshape(h, &[b, flat])?;
        let h = self.fc.forward(tape, ps, h)?;
        tape.silu(h)
    }

    /// Trainable head on top of `[B, 64]` backbone features -> `[B, 8]`.
    pub fn head_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], feats: Var) -> Result<Var> {
        let h = self.h0.forward(tape, ps, feats)?;
        let h = tape.silu(h)?;
        self.h1.forward(tape, ps, h)
    }

    /// Pose-regression probe used during backbone pretraining: `[B, 8] -> [B, 4]`.
    fn probe_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], main: Var) -> Result<Var> {
        self.probe.forward(tape, ps, main)
    }

    /// Residual net over `[B, 3, 24, 24]` mouth crops -> `[B, 4]`.
    pub fn residual_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], crops: Var) -> Result<Var> {
        let shape = tape.value(crops).shape().to_vec();
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != MOUTH_CROP_SIZE
            || shape[3] != MOUTH_CROP_SIZE
        {
            return Err(Error::shape(
                "lips_residual",
                format!("expected [B, 3, {MOUTH_CROP_SIZE}, {MOUTH_CROP_SIZE}], got {shape:?}"),
            ));
        }
        let b = shape[0];
        let h = self.r0.forward(tape, ps, crops)?;
        let h = tape.silu(h)?;
        let h = self.r1.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        let h = self.r2.forward(tape, ps, h)?;
        let h = tape.silu(h)?;
        let h = tape.reshape(h, &[b, 16 * 3 * 3])?;
        self.rfc.forward(tape, ps, h)
    }

    /// Frozen-backbone features for a batch of raw frames (no gradients).
    pub fn features_batch(&self, imgs: &[&Array<f32>]) -> Result<Array<f32>> {
        let x = canon_stack(imgs)?;
        let mut tape = Tape::new();
        let ps = self.store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let f = self.backbone_on_tape(&mut tape, &ps, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Main 8-dim part for one `[3, 64, 64]` frame.
    pub fn encode_main(&self, img: &Array<f32>) -> Result<Vec<f32>> {
        let x = canon_stack(&[img])?;
        let mut tape = Tape::new();
        let ps = self.store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let f = self.backbone_on_tape(&mut tape, &ps, xv)?;
        let m = self.head_on_tape(&mut tape, &ps, f)?;
        Ok(tape.value(m).data().to_vec())
    }

    /// Residual 4-dim part for one frame given its lips mask. An empty mask
    /// yields a zero residual and sets the absent-mouth flag.
    pub fn encode_residual(&self, img: &Array<f32>, lips_mask: &Array<f32>) -> Result<ResidualEncoding> {
        let Some(crop) = crop_mouth(img, lips_mask)? else {
            return Ok(ResidualEncoding { residual: [0.0; RESIDUAL_DIM], mouth_absent: true });
        };
        let shape = crop.shape().to_vec();
        let batched = crop.reshaped(&[1, shape[0], shape[1], shape[2]])?;
        let mut tape = Tape::new();
        let ps = self.store.leaf_all(&mut tape);
        let xv = tape.constant(batched);
        let r = self.residual_on_tape(&mut tape, &ps, xv)?;
        let vals = tape.value(r).data();
        let mut residual = [0.0f32; RESIDUAL_DIM];
        residual.copy_from_slice(vals);
        Ok(ResidualEncoding { residual, mouth_absent: false })
    }

    /// Full 12-dim encoding of one frame.
    pub fn encode(&self, img: &Array<f32>, lips_mask: &Array<f32>) -> Result<LipsEncoding> {
        let main = self.encode_main(img)?;
        let res = self.encode_residual(img, lips_mask)?;
        Ok(LipsEncoding {
            vector: LipsVector::combine(&main, &res.residual)?,
            mouth_absent: res.mouth_absent,
        })
    }

    /// Pretrain the backbone (through the head and a 4-dim probe) to regress
    /// the scripted mouth pose, then freeze everything under `lips.backbone.`.
    ///
    /// Fails when the held-out pose MSE stays above `cfg.max_mse`.
    pub fn pretrain_backbone(
        &mut self,
        clips: &[ClipSample],
        cfg: &BackbonePretrainConfig,
        seed: u64,
    ) -> Result<BackbonePretrainStats> {
        let mut images: Vec<&Array<f32>> = Vec::new();
        let mut poses: Vec<[f32; 4]> = Vec::new();
        for clip in clips {
            for frame in &clip.frames {
                images.push(&frame.image);
                poses.push(frame.gt_pose.as_array());
            }
        }
        if images.len() < 8 {
            return Err(Error::invalid(format!(
                "backbone pretraining needs >= 8 frames, got {}",
                images.len()
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
        held_idx.truncate(128);
        let mut rng = sub_rng(seed, "lips-pretrain");
        let sched = LrSchedule::one_cycle(cfg.peak_lr, cfg.peak_lr * 1e-3, cfg.iters);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut loss_curve = Vec::new();
        let mut iters_run = 0;
        for it in 0..cfg.iters {
            iters_run = it + 1;
            let mut batch_imgs: Vec<Array<f32>> = Vec::with_capacity(cfg.batch);
            let mut targets = Array::zeros(&[cfg.batch, 4]);
            for bi in 0..cfg.batch {
                let i = train_idx[rng.random_range(0..train_idx.len())];
                let img = if rng.random::<f64>() < cfg.augment_prob {
                    let aug = sample_augment(&mut rng);
                    apply_image(&aug, images[i])?
                } else {
                    images[i].clone()
                };
                batch_imgs.push(img);
                targets.data_mut()[bi * 4..(bi + 1) * 4].copy_from_slice(&poses[i]);
            }
            let refs: Vec<&Array<f32>> = batch_imgs.iter().collect();
            let x = canon_stack(&refs)?;
            let mut tape = Tape::new();
            let ps = self.store.leaf_all(&mut tape);
            let xv = tape.constant(x);
            let tv = tape.constant(targets);
            let f = self.backbone_on_tape(&mut tape, &ps, xv)?;
            let m = self.head_on_tape(&mut tape, &ps, f)?;
            let p = self.probe_on_tape(&mut tape, &ps, m)?;
            let d = tape.sub(p, tv)?;
            let d2 = tape.mul(d, d)?;
            let loss = tape.mean_all(d2)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::training(format!(
                    "backbone pretraining loss became non-finite at iter {it}"
                )));
            }
            if it % 25 == 0 {
                loss_curve.push((it, loss_val));
            }
            tape.backward(loss)?;
            let lr = sched.lr_at(it)?;
            let trainable = self.store.trainable_indices();
            let grads: Vec<Option<Array<f32>>> =
                trainable.iter().map(|&i| tape.grad(ps[i]).cloned()).collect();
            let grad_refs: Vec<Option<&Array<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
            let mut params = self.store.trainable_mut();
            opt.step(&mut params, &grad_refs, lr)?;
            if (it + 1) % cfg.eval_every == 0 {
                let m = self.pose_mse(&images, &poses, &held_idx)?;
                if m <= cfg.target_mse {
                    break;
                }
            }
        }
        let held_out_mse = self.pose_mse(&images, &poses, &held_idx)?;
        if held_out_mse > cfg.max_mse {
            return Err(Error::training(format!(
                "backbone pose MSE {held_out_mse:.4} above allowed {:.4} after {iters_run} iters",
                cfg.max_mse
            )));
        }
        self.store.freeze_prefix("lips.backbone.");
        Ok(BackbonePretrainStats { iters_run, held_out_mse, loss_curve })
    }

    /// Held-out pose-regression MSE through the current head and probe.
    fn pose_mse(&self, images: &[&Array<f32>], poses: &[[f32; 4]], idx: &[usize]) -> Result<f64> {
        let mut preds = Array::zeros(&[idx.len(), 4]);
        let mut targets = Array::zeros(&[idx.len(), 4]);
        for (row, chunk) in idx.chunks(16).enumerate() {
            let imgs: Vec<&Array<f32>> = chunk.iter().map(|&i| images[i]).collect();
            let x = canon_stack(&imgs)?;
            let mut tape = Tape::new();
            let ps = self.store.leaf_all(&mut tape);
            let xv = tape.constant(x);
            let f = self.backbone_on_tape(&mut tape, &ps, xv)?;
            let m = self.head_on_tape(&mut tape, &ps, f)?;
            let p = self.probe_on_tape(&mut tape, &ps, m)?;
            let vals = tape.value(p).data().to_vec();
            let base = row * 16 * 4;
            preds.data_mut()[base..base + vals.len()].copy_from_slice(&vals);
            for (k, &i) in chunk.iter().enumerate() {
                targets.data_mut()[base + k * 4..base + (k + 1) * 4].copy_from_slice(&poses[i]);
            }
        }
        mse(&preds, &targets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    /// Load a fully trained encoder; all parameters come back frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let mut enc = LipsEncoder::new(0)?;
        checkpoint::load_into(path, &mut enc.store)?;
        enc.store.freeze_all();
        Ok(enc)
    }
}

/// Settings for pose-regression pretraining of the backbone.
#[derive(Debug, Clone)]
pub struct BackbonePretrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub peak_lr: f64,
    /// Hard bound on held-out pose MSE; training fails above it.
    pub max_mse: f64,
    /// Early-stop bound checked every `eval_every` iters.
    pub target_mse: f64,
    pub eval_every: u64,
    pub augment_prob: f64,
}

impl Default for BackbonePretrainConfig {
    fn default() -> Self {
        BackbonePretrainConfig {
            iters: 900,
            batch: 8,
            peak_lr: 1.5e-3,
            max_mse: 0.01,
            target_mse: 0.004,
            eval_every: 100,
            augment_prob: 0.5,
        }
    }
}

/// Summary of a backbone pretraining run.
#[derive(Debug, Clone)]
pub struct BackbonePretrainStats {
    pub iters_run: u64,
    pub held_out_mse: f64,
    pub loss_curve: Vec<(u64, f32)>,
}

/// Single-pass full-frame encoder distilled from a [`LipsEncoder`]:
/// a stem convolution, eight residual blocks, and a linear read-out.
pub struct DistilledEncoder {
    store: ParamStore<f32>,
    stem: Conv2d,
    blocks: Vec<ResNet2d>,
    head: Linear,
}

/// (in-channels, out-channels, downsample-before) plan of the eight blocks.
const DISTILLED_BLOCKS: [(usize, usize, bool); 8] = [
    (12, 16, true),
    (16, 16, false),
    (16, 24, true),
    (24, 24, false),
    (24, 32, true),
    (32, 32, false),
    (32, 32, false),
    (32, 32, false),
];

impl DistilledEncoder {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = sub_rng(seed, "lips-distilled-init");
        let mut store = ParamStore::new();
        let stem = Conv2d::new(&mut store, &mut rng, "lips.distilled.stem", 3, 12, 3, 2, 1)?;
        let mut blocks = Vec::new();
        for (i, (cin, cout, _)) in DISTILLED_BLOCKS.iter().enumerate() {
            blocks.push(ResNet2d::new(
                &mut store,
                &mut rng,
                &format!("lips.distilled.b{i}"),
                *cin,
                *cout,
                4,
            )?);
        }
        let flat = 32 * (INPUT_SIZE / 16) * (INPUT_SIZE / 16);
        let head = Linear::new(&mut store, &mut rng, "lips.distilled.head", flat, LIPS_DIM, true)?;
        Ok(DistilledEncoder { store, stem, blocks, head })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn forward_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != INPUT_SIZE || shape[3] != INPUT_SIZE {
            return Err(Error::shape(
                "distilled_encoder",
                format!("expected [B, 3, {INPUT_SIZE}, {INPUT_SIZE}], got {shape:?}"),
            ));
        }
        let b = shape[0];
        let mut h = self.stem.forward(tape, ps, x)?;
        for (block, (_, _, pool)) in self.blocks.iter().zip(DISTILLED_BLOCKS.iter()) {
            if *pool {
                h = tape.avg_pool2(h)?;
            }
            h = block.forward(tape, ps, h)?;
        }
        let flat = 32 * (INPUT_SIZE / 16) * (INPUT_SIZE / 16);
        let h = tape.reshape(h, &[b, flat])?;
        self.head.forward(tape, ps, h)
    }

    /// Encode a batch of raw frames to `[B, 12]` (no gradients).
    pub fn encode_batch(&self, imgs: &[&Array<f32>]) -> Result<Array<f32>> {
        let x = canon_stack(imgs)?;
        let mut tape = Tape::new();
        let ps = self.store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let out = self.forward_on_tape(&mut tape, &ps, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Encode one `[3, 64, 64]` frame without needing a mouth mask.
    pub fn encode(&self, img: &Array<f32>) -> Result<LipsVector> {
        let out = self.encode_batch(&[img])?;
        let mut data = [0.0f32; LIPS_DIM];
        data.copy_from_slice(out.data());
        Ok(LipsVector(data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut enc = DistilledEncoder::new(0)?;
        checkpoint::load_into(path, &mut enc.store)?;
        enc.store.freeze_all();
        Ok(enc)
    }
}

/// Settings for distilling the two-part encoder into the single-pass one.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub iters: u64,
    pub batch: usize,
    pub peak_lr: f64,
    /// Hard bound on held-out student-vs-teacher MSE; distillation fails above it.
    pub max_mse: f64,
    /// Early-stop bound checked every `eval_every` iters.
    pub target_mse: f64,
    pub eval_every: u64,
    pub augment_prob: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iters: 1400,
            batch: 8,
            peak_lr: 2e-3,
            max_mse: 1e-3,
            target_mse: 4e-4,
            eval_every: 100,
            augment_prob: 0.5,
        }
    }
}

/// Summary of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillStats {
    pub iters_run: u64,
    pub held_out_mse: f64,
    pub loss_curve: Vec<(u64, f32)>,
}

/// Distill `teacher` into a single-pass full-frame encoder.
///
/// The student sees whole frames only (no mouth crops or masks); teacher
/// targets are recomputed per augmented sample. Fails when the held-out MSE
/// between student and teacher vectors stays above `cfg.max_mse`.
pub fn distill(
    teacher: &LipsEncoder,
    clips: &[ClipSample],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(DistilledEncoder, DistillStats)> {
    let mut frames: Vec<(&Array<f32>, &Array<f32>)> = Vec::new();
    for clip in clips {
        for frame in &clip.frames {
            frames.push((&frame.image, &frame.lips_mask));
        }
    }
    if frames.len() < 8 {
        return Err(Error::invalid(format!("distillation needs >= 8 frames, got {}", frames.len())));
    }
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for i in 0..frames.len() {
        if i % 8 == 7 {
            held_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    held_idx.truncate(96);
    let mut held_targets = Array::zeros(&[held_idx.len(), LIPS_DIM]);
    for (k, &i) in held_idx.iter().enumerate() {
        let enc = teacher.encode(frames[i].0, frames[i].1)?;
        held_targets.data_mut()[k * LIPS_DIM..(k + 1) * LIPS_DIM]
            .copy_from_slice(enc.vector.as_slice());
    }
    let mut student = DistilledEncoder::new(seed)?;
    let mut rng = sub_rng(seed, "lips-distill");
    let sched = LrSchedule::one_cycle(cfg.peak_lr, cfg.peak_lr * 1e-3, cfg.iters);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut loss_curve = Vec::new();
    let mut iters_run = 0;
    for it in 0..cfg.iters {
        iters_run = it + 1;
        let mut batch_imgs: Vec<Array<f32>> = Vec::with_capacity(cfg.batch);
        let mut targets = Array::zeros(&[cfg.batch, LIPS_DIM]);
        for bi in 0..cfg.batch {
            let (img, mask) = frames[train_idx[rng.random_range(0..train_idx.len())]];
            let (img, mask) = if rng.random::<f64>() < cfg.augment_prob {
                let aug = sample_augment(&mut rng);
                (apply_image(&aug, img)?, apply_mask(&aug, mask)?)
            } else {
                (img.clone(), mask.clone())
            };
            let enc = teacher.encode(&img, &mask)?;
            targets.data_mut()[bi * LIPS_DIM..(bi + 1) * LIPS_DIM]
                .copy_from_slice(enc.vector.as_slice());
            batch_imgs.push(img);
        }
        let refs: Vec<&Array<f32>> = batch_imgs.iter().collect();
        let x = canon_stack(&refs)?;
        let mut tape = Tape::new();
        let ps = student.store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let tv = tape.constant(targets);
        let out = student.forward_on_tape(&mut tape, &ps, xv)?;
        let d = tape.sub(out, tv)?;
        let d2 = tape.mul(d, d)?;
        let loss = tape.mean_all(d2)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::training(format!("distillation loss became non-finite at iter {it}")));
        }
        if it % 25 == 0 {
            loss_curve.push((it, loss_val));
        }
        tape.backward(loss)?;
        let lr = sched.lr_at(it)?;
        let trainable = student.store.trainable_indices();
        let grads: Vec<Option<Array<f32>>> =
            trainable.iter().map(|&i| tape.grad(ps[i]).cloned()).collect();
        let grad_refs: Vec<Option<&Array<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let mut params = student.store.trainable_mut();
        opt.step(&mut params, &grad_refs, lr)?;
        if (it + 1) % cfg.eval_every == 0 {
            let m = distill_mse(&student, &frames, &held_idx, &held_targets)?;
            if m <= cfg.target_mse {
                break;
            }
        }
    }
    let held_out_mse = distill_mse(&student, &frames, &held_idx, &held_targets)?;
    if held_out_mse > cfg.max_mse {
        return Err(Error::training(format!(
            "distilled encoder MSE {held_out_mse:.2e} above allowed {:.2e} after {iters_run} iters",
            cfg.max_mse
        )));
    }
    student.store.freeze_all();
    Ok((student, DistillStats { iters_run, held_out_mse, loss_curve }))
}

fn distill_mse(
    student: &DistilledEncoder,
    frames: &[(&Array<f32>, &Array<f32>)],
    idx: &[usize],
    targets: &Array<f32>,
) -> Result<f64> {
    let mut preds = Array::zeros(&[idx.len(), LIPS_DIM]);
    for (row, chunk) in idx.chunks(16).enumerate() {
        let imgs: Vec<&Array<f32>> = chunk.iter().map(|&i| frames[i].0).collect();
        let out = student.encode_batch(&imgs)?;
        let base = row * 16 * LIPS_DIM;
        preds.data_mut()[base..base + out.numel()].copy_from_slice(out.data());
    }
    mse(&preds, targets)
}

/// How identity-blind and pose-sensitive an encoder is.
#[derive(Debug, Clone, Copy)]
pub struct DisentanglementReport {
    /// Mean embedding distance between different identities rendered with the
    /// same mouth pose and head placement.
    pub cross_id_same_pose: f64,
    /// Median embedding distance between different mouth poses of the same
    /// identity.
    pub median_inter_pose: f64,
}

fn random_pose<R: Rng + ?Sized>(rng: &mut R) -> GroundTruthPose {
    GroundTruthPose {
        openness: rng.random_range(0.0..1.0),
        width: rng.random_range(0.0..1.0),
        jaw_drop: rng.random_range(0.0..1.0),
        corner_curl: rng.random_range(-1.0..1.0),
    }
}

fn random_head<R: Rng + ?Sized>(rng: &mut R) -> HeadPose {
    HeadPose {
        tx: rng.random_range(-3.0..3.0),
        ty: rng.random_range(-2.0..2.0),
        rot: rng.random_range(-0.06..0.06),
        scale: rng.random_range(0.92..1.08),
    }
}

/// Compare encodings across identities (same pose) and across poses
/// (same identity) on freshly rendered frames.
pub fn measure_disentanglement(
    enc: &LipsEncoder,
    n_pairs: usize,
    image_size: usize,
    seed: u64,
) -> Result<DisentanglementReport> {
    if n_pairs == 0 {
        return Err(Error::invalid("measure_disentanglement: zero pairs"));
    }
    let mut rng = sub_rng(seed, "lips-disentangle");
    let ids: Vec<_> = (0..8).map(|i| synth_identity(seed.wrapping_add(31 + i), image_size)).collect();
    let opts = RenderOptions::default();
    let mut cross = 0.0f64;
    for _ in 0..n_pairs {
        let pose = random_pose(&mut rng);
        let head = random_head(&mut rng);
        let a = rng.random_range(0..ids.len());
        let mut b = rng.random_range(0..ids.len() - 1);
        if b >= a {
            b += 1;
        }
        let va = encode_rendered(enc, &ids[a], &pose, &head, &opts)?;
        let vb = encode_rendered(enc, &ids[b], &pose, &head, &opts)?;
        cross += va.distance(&vb);
    }
    let mut inter = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let id = &ids[rng.random_range(0..ids.len())];
        let head = random_head(&mut rng);
        let p1 = random_pose(&mut rng);
        let p2 = random_pose(&mut rng);
        let v1 = encode_rendered(enc, id, &p1, &head, &opts)?;
        let v2 = encode_rendered(enc, id, &p2, &head, &opts)?;
        inter.push(v1.distance(&v2));
    }
    inter.sort_by(|a, b| a.total_cmp(b));
    let median = if inter.len() % 2 == 1 {
        inter[inter.len() / 2]
    } else {
        0.5 * (inter[inter.len() / 2 - 1] + inter[inter.len() / 2])
    };
    Ok(DisentanglementReport {
        cross_id_same_pose: cross / n_pairs as f64,
        median_inter_pose: median,
    })
}

/// Pearson correlation between embedding distance and true pose distance
/// over random same-identity pose pairs.
pub fn measure_pose_sensitivity(
    enc: &LipsEncoder,
    n_pairs: usize,
    image_size: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs < 2 {
        return Err(Error::invalid("measure_pose_sensitivity: need >= 2 pairs"));
    }
    let mut rng = sub_rng(seed, "lips-pose-sense");
    let ids: Vec<_> = (0..8).map(|i| synth_identity(seed.wrapping_add(71 + i), image_size)).collect();
    let opts = RenderOptions::default();
    let mut emb_d = Vec::with_capacity(n_pairs);
    let mut pose_d = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let id = &ids[rng.random_range(0..ids.len())];
        let head = random_head(&mut rng);
        let p1 = random_pose(&mut rng);
        let p2 = random_pose(&mut rng);
        let v1 = encode_rendered(enc, id, &p1, &head, &opts)?;
        let v2 = encode_rendered(enc, id, &p2, &head, &opts)?;
        emb_d.push(v1.distance(&v2));
        let (a1, a2) = (p1.as_array(), p2.as_array());
        pose_d.push(
            a1.iter()
                .zip(a2.iter())
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
        );
    }
    Ok(pearson(&emb_d, &pose_d)?.corr)
}

fn encode_rendered(
    enc: &LipsEncoder,
    id: &crate::world::IdentitySpec,
    pose: &GroundTruthPose,
    head: &HeadPose,
    opts: &RenderOptions,
) -> Result<LipsVector> {
    let img = render_face(id, pose, head, opts)?;
    let (_, m_lips) = make_masks(id, head)?;
    Ok(enc.encode(&img, &m_lips)?.vector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{face_coords, synth_clip, WorldConfig};

    fn test_frame(seed: u64) -> (crate::world::IdentitySpec, Array<f32>, Array<f32>) {
        let id = synth_identity(seed, 64);
        let pose = GroundTruthPose { openness: 0.6, width: 0.5, jaw_drop: 0.4, corner_curl: 0.2 };
        let head = HeadPose { tx: 1.0, ty: -0.5, rot: 0.02, scale: 1.0 };
        let img = render_face(&id, &pose, &head, &RenderOptions::default()).unwrap();
        let (_, m_lips) = make_masks(&id, &head).unwrap();
        (id, img, m_lips)
    }

    #[test]
    fn combine_and_split_preserve_the_concat_layout() {
        let main: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let residual: Vec<f32> = (8..12).map(|i| i as f32).collect();
        let v = LipsVector::combine(&main, &residual).unwrap();
        for (i, x) in v.as_slice().iter().enumerate() {
            assert_eq!(*x, i as f32);
        }
        let (m, r) = v.split();
        assert_eq!(m, &main[..]);
        assert_eq!(r, &residual[..]);
        assert!(LipsVector::combine(&main[..7], &residual).is_err());
        assert!(LipsVector::combine(&main, &residual[..3]).is_err());
    }

    #[test]
    fn expand_spatial_replicates_every_channel() {
        let v = LipsVector(core::array::from_fn(|i| i as f32 * 0.5 - 2.0));
        let grid = expand_spatial(&v, 3, 5).unwrap();
        assert_eq!(grid.shape(), [12, 3, 5]);
        for c in 0..12 {
            for p in 0..15 {
                assert_eq!(grid.data()[c * 15 + p], v.0[c]);
            }
        }
        assert!(expand_spatial(&v, 0, 5).is_err());
    }

    #[test]
    fn background_canonicalization_is_exact_and_idempotent() {
        let (_, img, _) = test_frame(3);
        // Default background is already canonical: a no-op.
        let canon = canonicalize_background(&img).unwrap();
        let diff = img
            .data()
            .iter()
            .zip(canon.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "canonical frame modified by {diff}");
        let twice = canonicalize_background(&canon).unwrap();
        let diff2 = canon
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff2 < 1e-6, "not idempotent: {diff2}");
    }

    /// Paint a different uniform colour strictly outside the face ellipse.
    fn repaint_outside_face(
        img: &Array<f32>,
        id: &crate::world::IdentitySpec,
        head: &HeadPose,
        value: f32,
    ) -> Array<f32> {
        let mut out = img.clone();
        let s = id.image_size;
        let center = s as f32 / 2.0 - 0.5;
        let (a, b) = id.face_axes;
        let n = s * s;
        let data = out.data_mut();
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = face_coords(x as f32, y as f32, center, head);
                let f = (fx / a) * (fx / a) + (fy / b) * (fy / b);
                if f > 1.2 {
                    for c in 0..3 {
                        data[c * n + y * s + x] = value;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn main_encoding_ignores_background_repaints() {
        let (id, img, _) = test_frame(5);
        let head = HeadPose { tx: 1.0, ty: -0.5, rot: 0.02, scale: 1.0 };
        let repainted = repaint_outside_face(&img, &id, &head, 0.31);
        let enc = LipsEncoder::new(7).unwrap();
        let a = enc.encode_main(&img).unwrap();
        let b = enc.encode_main(&repainted).unwrap();
        assert_eq!(a.len(), 8);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-3, "background repaint moved main encoding by {diff}");
    }

    #[test]
    fn frozen_backbone_gets_no_gradient_while_head_does() {
        let mut enc = LipsEncoder::new(11).unwrap();
        enc.store_mut().freeze_prefix("lips.backbone.");
        assert!(enc.backbone_frozen());
        let (_, img, _) = test_frame(13);
        let x = canon_stack(&[&img]).unwrap();
        let mut tape = Tape::new();
        let ps = enc.store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let f = enc.backbone_on_tape(&mut tape, &ps, xv).unwrap();
        let m = enc.head_on_tape(&mut tape, &ps, f).unwrap();
        let loss = tape.mean_all(m).unwrap();
        tape.backward(loss).unwrap();
        let conv_id = enc.store.id("lips.backbone.c0.w").unwrap();
        let fc_id = enc.store.id("lips.backbone.fc.w").unwrap();
        let head_id = enc.store.id("lips.head.h0.w").unwrap();
        assert!(tape.grad(ps[conv_id.0]).is_none());
        assert!(tape.grad(ps[fc_id.0]).is_none());
        let hg = tape.grad(ps[head_id.0]).expect("head must receive gradient");
        assert!(hg.data().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn residual_starts_at_zero_and_flags_missing_mouths() {
        let enc = LipsEncoder::new(17).unwrap();
        let (_, img, m_lips) = test_frame(19);
        let r = enc.encode_residual(&img, &m_lips).unwrap();
        assert!(!r.mouth_absent);
        assert_eq!(r.residual, [0.0; 4], "zero-initialised residual must start inert");
        let empty = Array::zeros(&[1, 64, 64]);
        let r2 = enc.encode_residual(&img, &empty).unwrap();
        assert!(r2.mouth_absent);
        assert_eq!(r2.residual, [0.0; 4]);
    }

    #[test]
    fn mouth_crop_tracks_the_mask_bounding_box() {
        let (_, img, m_lips) = test_frame(23);
        let crop = crop_mouth(&img, &m_lips).unwrap().expect("mouth visible");
        assert_eq!(crop.shape(), [3, 24, 24]);
        // Build the same crop by hand.
        let (y0, x0, y1, x1) = mask_bbox(&m_lips).unwrap().unwrap();
        let (y0, x0) = (y0 - MOUTH_CROP_MARGIN, x0 - MOUTH_CROP_MARGIN);
        let (y1, x1) = (y1 + MOUTH_CROP_MARGIN, x1 + MOUTH_CROP_MARGIN);
        let canon = canonicalize_background(&img).unwrap();
        let (ch, cw) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut sub = Array::zeros(&[3, ch, cw]);
        for c in 0..3 {
            for y in 0..ch {
                for x in 0..cw {
                    sub.data_mut()[(c * ch + y) * cw + x] =
                        canon.data()[(c * 64 + y0 + y) * 64 + x0 + x];
                }
            }
        }
        let expect = bilinear_resize(&sub, 24, 24).unwrap();
        assert_eq!(crop.data(), expect.data());
        let empty = Array::zeros(&[1, 64, 64]);
        assert!(crop_mouth(&img, &empty).unwrap().is_none());
    }

    fn pretrain_dataset(n_ids: u64, frames: usize) -> Vec<ClipSample> {
        let cfg = WorldConfig::desk();
        let opts = RenderOptions::default();
        (0..n_ids)
            .map(|i| {
                let id = synth_identity(100 + i, cfg.image_size);
                synth_clip(&id, 500 + i, frames, &cfg, &opts).unwrap()
            })
            .collect()
    }

    #[test]
    fn backbone_pretraining_reaches_the_pose_mse_bound_and_freezes() {
        let clips = pretrain_dataset(4, 28);
        let mut enc = LipsEncoder::new(29).unwrap();
        let cfg = BackbonePretrainConfig::default();
        let stats = enc.pretrain_backbone(&clips, &cfg, 31).unwrap();
        assert!(stats.held_out_mse <= 0.01, "pose MSE {:.4} too high", stats.held_out_mse);
        assert!(enc.backbone_frozen());
        assert!(enc.store.is_frozen("lips.backbone.probe.w").unwrap());
        assert!(!enc.store.is_frozen("lips.head.h0.w").unwrap());
        assert!(!enc.store.is_frozen("lips.residual.fc.w").unwrap());
    }

    #[test]
    fn pretraining_fails_honestly_when_the_bound_is_unreachable() {
        let clips = pretrain_dataset(2, 12);
        let mut enc = LipsEncoder::new(37).unwrap();
        let cfg = BackbonePretrainConfig {
            iters: 10,
            eval_every: 1000,
            max_mse: 1e-9,
            ..BackbonePretrainConfig::default()
        };
        let err = enc.pretrain_backbone(&clips, &cfg, 41).unwrap_err();
        assert!(err.to_string().contains("MSE"));
        assert!(!enc.backbone_frozen());
    }

    #[test]
    fn distillation_tracks_the_teacher_and_freezes_the_student() {
        let clips = pretrain_dataset(2, 16);
        let teacher = LipsEncoder::new(43).unwrap();
        let cfg = DistillConfig {
            iters: 120,
            batch: 4,
            max_mse: f64::INFINITY,
            target_mse: 1e-5,
            eval_every: 60,
            ..DistillConfig::default()
        };
        let (student, stats) = distill(&teacher, &clips, &cfg, 47).unwrap();
        assert!(student.store.all_frozen());
        let first = stats.loss_curve.first().unwrap().1;
        let last = stats.loss_curve.last().unwrap().1;
        assert!(last < first, "distillation loss did not decrease: {first} -> {last}");
        let v = student.encode(&clips[0].frames[0].image).unwrap();
        assert!(v.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn distillation_fails_honestly_when_the_bound_is_unreachable() {
        let clips = pretrain_dataset(1, 12);
        let teacher = LipsEncoder::new(53).unwrap();
        let cfg = DistillConfig {
            iters: 5,
            batch: 2,
            max_mse: 0.0,
            eval_every: 1000,
            ..DistillConfig::default()
        };
        assert!(distill(&teacher, &clips, &cfg, 59).is_err());
    }

    #[test]
    fn measurement_helpers_produce_finite_statistics() {
        let enc = LipsEncoder::new(61).unwrap();
        let report = measure_disentanglement(&enc, 6, 64, 67).unwrap();
        assert!(report.cross_id_same_pose.is_finite() && report.cross_id_same_pose >= 0.0);
        assert!(report.median_inter_pose.is_finite() && report.median_inter_pose >= 0.0);
        let corr = measure_pose_sensitivity(&enc, 8, 64, 71).unwrap();
        assert!((-1.0..=1.0).contains(&corr));
    }

    #[test]
    fn checkpoint_round_trip_restores_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lips.flck");
        let enc = LipsEncoder::new(73).unwrap();
        for (name, _) in enc.store.iter() {
            assert!(name.starts_with("lips."), "unexpected parameter name {name}");
        }
        enc.save(&path).unwrap();
        let loaded = LipsEncoder::load(&path).unwrap();
        assert!(loaded.store.all_frozen());
        let (_, img, m_lips) = test_frame(79);
        let a = enc.encode(&img, &m_lips).unwrap();
        let b = loaded.encode(&img, &m_lips).unwrap();
        assert_eq!(a, b);
        let spath = dir.path().join("student.flck");
        let student = DistilledEncoder::new(83).unwrap();
        student.save(&spath).unwrap();
        let sloaded = DistilledEncoder::load(&spath).unwrap();
        assert_eq!(
            student.encode(&img).unwrap().as_slice(),
            sloaded.encode(&img).unwrap().as_slice()
        );
    }
}
