//! Frozen convolutional autoencoder over a stride-8, 4-channel latent grid.
//!
//! All latent editing happens in this codec's latent space: a (C, H, W)
//! image maps to a (4, H/8, W/8) latent and back. The codec is trained once
//! on synthetic frames (L1 plus a small gradient-difference term), then
//! frozen; every later stage treats it as an immutable fixture. Masks enter
//! the latent space by 8×8 average pooling, not by encoding.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::{Conv2d, GroupNorm, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::sub_rng;
use crate::tensor::{Array, Tape, Var};
use crate::world::{apply_image, sample_augment, ClipSample};
use rand::Rng;
use std::path::Path;

/// Channels of the latent grid.
pub const LATENT_CHANNELS: usize = 4;
/// Spatial downsampling factor image → latent.
pub const LATENT_STRIDE: usize = 8;

/// Internal widths of the encoder/decoder pyramid.
const W0: usize = 16;
const W1: usize = 24;
const W2: usize = 32;
const W3: usize = 48;
const GN_GROUPS: usize = 8;

struct Encoder {
    c0: Conv2d,
    c1: Conv2d,
    c2: Conv2d,
    n2: GroupNorm,
    c3: Conv2d,
    n3: GroupNorm,
    c4: Conv2d,
    n4: GroupNorm,
    head: Conv2d,
}

struct Decoder {
    c0: Conv2d,
    n0: GroupNorm,
    u1: Conv2d,
    n1: GroupNorm,
    u2: Conv2d,
    n2: GroupNorm,
    u3: Conv2d,
    c4: Conv2d,
    out: Conv2d,
}

/// Stride-8 autoencoder with a freeze latch.
pub struct CodecModel {
    store: ParamStore<f32>,
    enc: Encoder,
    dec: Decoder,
}

impl CodecModel {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = sub_rng(seed, "codec-init");
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let enc = Encoder {
            c0: Conv2d::new(s, r, "codec.enc.c0", 3, W0, 3, 1, 1)?,
            c1: Conv2d::new(s, r, "codec.enc.c1", W0, W1, 3, 2, 1)?,
            c2: Conv2d::new(s, r, "codec.enc.c2", W1, W2, 3, 2, 1)?,
            n2: GroupNorm::new(s, "codec.enc.n2", W2, GN_GROUPS)?,
            c3: Conv2d::new(s, r, "codec.enc.c3", W2, W3, 3, 2, 1)?,
            n3: GroupNorm::new(s, "codec.enc.n3", W3, GN_GROUPS)?,
            c4: Conv2d::new(s, r, "codec.enc.c4", W3, W3, 3, 1, 1)?,
            n4: GroupNorm::new(s, "codec.enc.n4", W3, GN_GROUPS)?,
            head: Conv2d::new(s, r, "codec.enc.head", W3, LATENT_CHANNELS, 3, 1, 1)?,
        };
        let dec = Decoder {
            c0: Conv2d::new(s, r, "codec.dec.c0", LATENT_CHANNELS, W3, 3, 1, 1)?,
            n0: GroupNorm::new(s, "codec.dec.n0", W3, GN_GROUPS)?,
            u1: Conv2d::new(s, r, "codec.dec.u1", W3, W2, 3, 1, 1)?,
            n1: GroupNorm::new(s, "codec.dec.n1", W2, GN_GROUPS)?,
            u2: Conv2d::new(s, r, "codec.dec.u2", W2, W1, 3, 1, 1)?,
            n2: GroupNorm::new(s, "codec.dec.n2", W1, GN_GROUPS)?,
            u3: Conv2d::new(s, r, "codec.dec.u3", W1, W0, 3, 1, 1)?,
            c4: Conv2d::new(s, r, "codec.dec.c4", W0, W0, 3, 1, 1)?,
            out: Conv2d::new(s, r, "codec.dec.out", W0, 3, 3, 1, 1)?,
        };
        Ok(CodecModel { store, enc, dec })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.all_frozen()
    }

    /// Attempt a named weight update; rejected once frozen.
    pub fn set_weight(&mut self, name: &str, value: Array<f32>) -> Result<()> {
        self.store.set(name, value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    /// Load a codec checkpoint; the result is frozen, matching its role as
    /// an immutable fixture for the rest of the pipeline.
    pub fn load(path: &Path) -> Result<Self> {
        let mut model = CodecModel::new(0)?;
        checkpoint::load_into(path, &mut model.store)?;
        model.freeze();
        Ok(model)
    }

    /// Differentiable encoder pass over [B, 3, H, W] (H, W divisible by 8).
    pub fn encode_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] % LATENT_STRIDE != 0
            || shape[3] % LATENT_STRIDE != 0
        {
            return Err(Error::shape(
                "codec.encode",
                format!("expected [B, 3, 8k, 8k], got {shape:?}"),
            ));
        }
        let e = &self.enc;
        let mut h = e.c0.forward(tape, ps, x)?;
        h = tape.silu(h)?;
        h = e.c1.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = e.c2.forward(tape, ps, h)?;
        h = e.n2.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = e.c3.forward(tape, ps, h)?;
        h = e.n3.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = e.c4.forward(tape, ps, h)?;
        h = e.n4.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        e.head.forward(tape, ps, h)
    }

    /// Differentiable decoder pass over [B, 4, h, w].
    pub fn decode_on_tape(&self, tape: &mut Tape<f32>, ps: &[Var], z: Var) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 4 || shape[1] != LATENT_CHANNELS {
            return Err(Error::shape(
                "codec.decode",
                format!("expected [B, {LATENT_CHANNELS}, h, w], got {shape:?}"),
            ));
        }
        let d = &self.dec;
        let mut h = d.c0.forward(tape, ps, z)?;
        h = d.n0.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = tape.upsample_nearest2(h)?;
        h = d.u1.forward(tape, ps, h)?;
        h = d.n1.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = tape.upsample_nearest2(h)?;
        h = d.u2.forward(tape, ps, h)?;
        h = d.n2.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = tape.upsample_nearest2(h)?;
        h = d.u3.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        h = d.c4.forward(tape, ps, h)?;
        h = tape.silu(h)?;
        d.out.forward(tape, ps, h)
    }

    fn run_no_grad(
        &self,
        input: &Array<f32>,
        expect_ch: usize,
        f: impl Fn(&Self, &mut Tape<f32>, &[Var], Var) -> Result<Var>,
    ) -> Result<Array<f32>> {
        let squeeze = input.shape().len() == 3;
        let batched = if squeeze {
            let mut shape = vec![1];
            shape.extend_from_slice(input.shape());
            input.clone().reshaped(&shape)?
        } else {
            input.clone()
        };
        if batched.shape().len() != 4 || batched.shape()[1] != expect_ch {
            return Err(Error::shape(
                "codec.run",
                format!("expected channel count {expect_ch}, got {:?}", input.shape()),
            ));
        }
        let mut tape = Tape::new();
        let ps = self.store.leaf_all(&mut tape);
        let x = tape.constant(batched);
        let y = f(self, &mut tape, &ps, x)?;
        let out = tape.value(y).clone();
        if squeeze {
            let shape = out.shape()[1..].to_vec();
            out.reshaped(&shape)
        } else {
            Ok(out)
        }
    }

    /// Encode a [3, H, W] image (or [B, 3, H, W] batch) to latents.
    pub fn encode(&self, img: &Array<f32>) -> Result<Array<f32>> {
        self.run_no_grad(img, 3, |m, t, ps, x| m.encode_on_tape(t, ps, x))
    }

    /// Decode latents back to image space, clamped to [0,1].
    pub fn decode(&self, z: &Array<f32>) -> Result<Array<f32>> {
        let mut out =
            self.run_no_grad(z, LATENT_CHANNELS, |m, t, ps, x| m.decode_on_tape(t, ps, x))?;
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// 8×8 average pooling of a [1, H, W] (or [B, 1, H, W]) binary mask into
/// soft latent-resolution weights in [0,1].
pub fn downsample_mask(mask: &Array<f32>) -> Result<Array<f32>> {
    let shape = mask.shape().to_vec();
    let (lead, h, w) = match shape.len() {
        3 => (vec![shape[0]], shape[1], shape[2]),
        4 => (vec![shape[0], shape[1]], shape[2], shape[3]),
        _ => {
            return Err(Error::shape(
                "downsample_mask",
                format!("expected [1, H, W] or [B, 1, H, W], got {shape:?}"),
            ))
        }
    };
    if *lead.last().expect("non-empty") != 1 {
        return Err(Error::shape("downsample_mask", format!("mask must have 1 channel, got {shape:?}")));
    }
    if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
        return Err(Error::shape(
            "downsample_mask",
            format!("spatial dims must be divisible by {LATENT_STRIDE}, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / LATENT_STRIDE, w / LATENT_STRIDE);
    let batch: usize = lead.iter().product();
    let mut oshape = lead;
    oshape.push(oh);
    oshape.push(ow);
    let mut out = Array::zeros(&oshape);
    let src = mask.data();
    let dst = out.data_mut();
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..LATENT_STRIDE {
                    for dx in 0..LATENT_STRIDE {
                        acc += src
                            [b * h * w + (oy * LATENT_STRIDE + dy) * w + ox * LATENT_STRIDE + dx]
                            as f64;
                    }
                }
                dst[b * oh * ow + oy * ow + ox] =
                    (acc / (LATENT_STRIDE * LATENT_STRIDE) as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Codec training hyperparameters.
#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    /// Maximum optimization steps.
    pub iters: u64,
    pub batch: usize,
    pub peak_lr: f64,
    /// Required held-out PSNR; falling short is a training failure.
    pub min_psnr: f64,
    /// Early-stop threshold once held-out PSNR reaches this value.
    pub target_psnr: f64,
    pub eval_every: u64,
    /// Weight of the finite-difference gradient loss term.
    pub grad_loss_weight: f32,
    /// Probability of applying the standard flip/jitter augmentation to a
    /// training frame (the rest of the batch trains on raw renders).
    pub augment_prob: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            iters: 3600,
            batch: 4,
            peak_lr: 2e-3,
            min_psnr: 28.0,
            target_psnr: 32.5,
            eval_every: 100,
            grad_loss_weight: 0.3,
            augment_prob: 0.5,
        }
    }
}

/// Summary of a codec training run.
#[derive(Debug, Clone)]
pub struct CodecTrainStats {
    pub iters_run: u64,
    pub final_psnr: f64,
    /// (iteration, training loss) samples.
    pub loss_curve: Vec<(u64, f32)>,
}

fn batch_images(frames: &[&Array<f32>]) -> Result<Array<f32>> {
    let shape = frames[0].shape();
    let mut out = Array::zeros(&[frames.len(), shape[0], shape[1], shape[2]]);
    let stride = frames[0].numel();
    for (i, f) in frames.iter().enumerate() {
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(f.data());
    }
    Ok(out)
}

/// Mean absolute difference of horizontal+vertical finite differences —
/// sharpens reconstructed edges beyond plain L1.
fn gradient_diff_loss(tape: &mut Tape<f32>, y: Var, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let mut terms = Vec::new();
    for (axis, n) in [(3usize, w), (2usize, h)] {
        let ya = tape.slice(y, axis, 1, n - 1)?;
        let yb = tape.slice(y, axis, 0, n - 1)?;
        let dy = tape.sub(ya, yb)?;
        let xa = tape.slice(x, axis, 1, n - 1)?;
        let xb = tape.slice(x, axis, 0, n - 1)?;
        let dx = tape.sub(xa, xb)?;
        let diff = tape.sub(dy, dx)?;
        let diff = tape.abs(diff)?;
        terms.push(tape.mean_all(diff)?);
    }
    tape.add(terms[0], terms[1])
}

fn held_out_psnr(model: &CodecModel, frames: &[&Array<f32>]) -> Result<f64> {
    let mut total = 0.0f64;
    for chunk in frames.chunks(8) {
        let x = batch_images(chunk)?;
        let y = model.decode(&model.encode(&x)?)?;
        for (i, f) in chunk.iter().enumerate() {
            let numel = f.numel();
            let rec = Array::from_vec(
                &f.shape().to_vec(),
                y.data()[i * numel..(i + 1) * numel].to_vec(),
            )?;
            total += psnr(&rec, f)?;
        }
    }
    Ok(total / frames.len() as f64)
}

/// Train the codec on synthetic clips until it reconstructs held-out frames
/// at `min_psnr` dB or better, then freeze it. Fails with the final PSNR if
/// the threshold is out of reach within the iteration budget.
pub fn train_codec(
    clips: &[ClipSample],
    cfg: &CodecTrainConfig,
    seed: u64,
) -> Result<(CodecModel, CodecTrainStats)> {
    let all: Vec<&Array<f32>> = clips.iter().flat_map(|c| c.frames.iter().map(|f| &f.image)).collect();
    if all.len() < 4 {
        return Err(Error::invalid(format!("codec training needs >= 4 frames, got {}", all.len())));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, f) in all.iter().enumerate() {
        if i % 10 == 9 {
            held.push(*f);
        } else {
            train.push(*f);
        }
    }
    if held.is_empty() {
        held.push(*all.last().expect("non-empty"));
    }
    held.truncate(48);
    let mut model = CodecModel::new(seed)?;
    let mut rng = sub_rng(seed, "codec-train");
    let sched = LrSchedule::one_cycle(cfg.peak_lr, cfg.peak_lr * 1e-3, cfg.iters);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut loss_curve = Vec::new();
    let mut iters_run = 0;
    let mut best_psnr = f64::NEG_INFINITY;
    for it in 0..cfg.iters {
        iters_run = it + 1;
        let mut batch: Vec<Array<f32>> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let f = train[rng.random_range(0..train.len())];
            if rng.random::<f64>() < cfg.augment_prob {
                let aug = sample_augment(&mut rng);
                batch.push(apply_image(&aug, f)?);
            } else {
                batch.push(f.clone());
            }
        }
        let refs: Vec<&Array<f32>> = batch.iter().collect();
        let x = batch_images(&refs)?;
        let mut tape = Tape::new();
        let ps = model.store.leaf_all(&mut tape);
        let xv = tape.constant(x);
        let z = model.encode_on_tape(&mut tape, &ps, xv)?;
        let y = model.decode_on_tape(&mut tape, &ps, z)?;
        let d = tape.sub(y, xv)?;
        let d2 = tape.mul(d, d)?;
        let mse = tape.mean_all(d2)?;
        let gd = gradient_diff_loss(&mut tape, y, xv)?;
        let gd = tape.scale(gd, cfg.grad_loss_weight)?;
        let loss = tape.add(mse, gd)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::training(format!("codec loss became non-finite at iter {it}")));
        }
        if it % 25 == 0 {
            loss_curve.push((it, loss_val));
        }
        tape.backward(loss)?;
        let lr = sched.lr_at(it)?;
        let trainable = model.store.trainable_indices();
        let grads: Vec<Option<Array<f32>>> =
            trainable.iter().map(|&i| tape.grad(ps[i]).cloned()).collect();
        let grad_refs: Vec<Option<&Array<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let mut params = model.store.trainable_mut();
        opt.step(&mut params, &grad_refs, lr)?;
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters {
            let p = held_out_psnr(&model, &held)?;
            best_psnr = best_psnr.max(p);
            if p >= cfg.target_psnr {
                break;
            }
        }
    }
    let final_psnr = held_out_psnr(&model, &held)?;
    if final_psnr < cfg.min_psnr {
        return Err(Error::training(format!(
            "codec held-out PSNR {final_psnr:.2} dB below required {:.2} dB after {iters_run} iters",
            cfg.min_psnr
        )));
    }
    model.freeze();
    Ok((model, CodecTrainStats { iters_run, final_psnr, loss_curve }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{synth_clip, synth_identity, RenderOptions, WorldConfig};

    #[test]
    fn encode_shape_follows_the_stride_eight_law() {
        let model = CodecModel::new(1).unwrap();
        let img = Array::zeros(&[3, 64, 64]);
        let z = model.encode(&img).unwrap();
        assert_eq!(z.shape(), [4, 8, 8]);
        let img32 = Array::zeros(&[3, 32, 32]);
        assert_eq!(model.encode(&img32).unwrap().shape(), [4, 4, 4]);
        let batch = Array::zeros(&[2, 3, 64, 64]);
        assert_eq!(model.encode(&batch).unwrap().shape(), [2, 4, 8, 8]);
    }

    #[test]
    fn zero_image_round_trips_to_finite_values() {
        let model = CodecModel::new(2).unwrap();
        let z = model.encode(&Array::zeros(&[3, 64, 64])).unwrap();
        assert!(z.data().iter().all(|v| v.is_finite()));
        let y = model.decode(&z).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y.shape(), [3, 64, 64]);
    }

    #[test]
    fn identical_images_produce_identical_latents() {
        let model = CodecModel::new(3).unwrap();
        let mut rng = sub_rng(9, "t");
        let img: Array<f32> = Array::rand_uniform(&mut rng, &[3, 64, 64], 0.0, 1.0);
        assert_eq!(model.encode(&img).unwrap(), model.encode(&img).unwrap());
    }

    #[test]
    fn wrong_input_shapes_are_rejected() {
        let model = CodecModel::new(1).unwrap();
        assert!(model.encode(&Array::zeros(&[1, 64, 64])).is_err());
        assert!(model.encode(&Array::zeros(&[3, 60, 64])).is_err());
        assert!(model.decode(&Array::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn frozen_codec_rejects_weight_updates() {
        let mut model = CodecModel::new(1).unwrap();
        let w = model.store().get("codec.enc.c0.w").unwrap().clone();
        model.set_weight("codec.enc.c0.w", w.clone()).unwrap();
        model.freeze();
        assert!(model.is_frozen());
        let err = model.set_weight("codec.enc.c0.w", w).unwrap_err();
        assert!(matches!(err, Error::Frozen(_)));
    }

    #[test]
    fn mask_downsampling_is_an_eight_by_eight_average() {
        let ones = Array::full(&[1, 16, 16], 1.0f32);
        let m = downsample_mask(&ones).unwrap();
        assert_eq!(m.shape(), [1, 2, 2]);
        assert!(m.data().iter().all(|&v| v == 1.0));
        let zeros = Array::zeros(&[1, 16, 16]);
        assert!(downsample_mask(&zeros).unwrap().data().iter().all(|&v| v == 0.0));
        // Half-covered 8x8 block averages to 0.5.
        let mut half = Array::zeros(&[1, 8, 8]);
        for y in 0..4 {
            for x in 0..8 {
                half.data_mut()[y * 8 + x] = 1.0;
            }
        }
        let m = downsample_mask(&half).unwrap();
        assert_eq!(m.shape(), [1, 1, 1]);
        assert_eq!(m.data()[0], 0.5);
    }

    #[test]
    fn checkpoint_round_trips_weights_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.flck");
        let model = CodecModel::new(7).unwrap();
        model.save(&path).unwrap();
        let back = CodecModel::load(&path).unwrap();
        assert!(back.is_frozen());
        for (name, value) in model.store().iter() {
            assert_eq!(back.store().get(name).unwrap(), value, "param {name}");
        }
    }

    #[test]
    fn encoder_sensitivity_to_single_pixel_stays_bounded() {
        // Regression guard on the encoder's local gain at fixed init: a
        // one-pixel perturbation of size delta moves the latent by at most
        // K * delta with K frozen here.
        let model = CodecModel::new(0).unwrap();
        let mut rng = sub_rng(4, "lipschitz");
        let img: Array<f32> = Array::rand_uniform(&mut rng, &[3, 64, 64], 0.0, 1.0);
        let z0 = model.encode(&img).unwrap();
        let delta = 0.25f32;
        let mut worst = 0.0f64;
        for &(c, y, x) in &[(0usize, 10usize, 12usize), (1, 33, 40), (2, 55, 7)] {
            let mut p = img.clone();
            p.data_mut()[c * 64 * 64 + y * 64 + x] += delta;
            let z1 = model.encode(&p).unwrap();
            let dist: f64 = z0
                .data()
                .iter()
                .zip(z1.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(dist / delta as f64);
        }
        const K: f64 = 10.0;
        assert!(worst <= K, "encoder gain {worst} exceeded frozen bound {K}");
    }

    #[test]
    fn short_training_run_reduces_loss_and_freezes() {
        let cfg_world = WorldConfig::desk();
        let mut clips = Vec::new();
        for i in 0..2 {
            let id = synth_identity(i, cfg_world.image_size);
            clips.push(synth_clip(&id, 100 + i, 6, &cfg_world, &RenderOptions::default()).unwrap());
        }
        let cfg = CodecTrainConfig {
            iters: 30,
            batch: 2,
            min_psnr: 0.0,
            target_psnr: 1e9,
            eval_every: 1000,
            ..CodecTrainConfig::default()
        };
        let (model, stats) = train_codec(&clips, &cfg, 11).unwrap();
        assert!(model.is_frozen());
        assert!(stats.loss_curve.len() >= 2);
        let first = stats.loss_curve.first().unwrap().1;
        let last = stats.loss_curve.last().unwrap().1;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(stats.final_psnr.is_finite());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_codec(&[], &CodecTrainConfig::default(), 0).is_err());
    }
}
