//! Audio-to-lips flow matching: the pipeline's second stage.
//!
//! A transformer learns the velocity field of an optimal-transport
//! conditional flow in 12-dim lips-pose space. Training interpolates between
//! Gaussian noise and a real lips-pose sequence at a random time `t` and
//! regresses the constant velocity `z_lips - ε`; inference integrates the
//! learned field from noise to `t = 1` with explicit Euler steps, conditioned
//! on per-frame audio features, an emotion vector, head poses, and K
//! reference lips vectors of the target identity.
//!
//! The backbone follows a DiT-style layout: token embedding over
//! `[lips ‖ head-pose]` per frame, fixed sinusoidal positions, a sinusoidal
//! time embedding, and AdaLN-modulated attention/MLP blocks whose gates start
//! at zero so every block is the identity at initialization. The final
//! projection also starts at zero, which pins the initial training loss to
//! the mean squared magnitude of the target velocities.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lips::{DistilledEncoder, LIPS_DIM};
use crate::metrics::mse;
use crate::nn::{ArchPlan, LayerNorm, Linear, Mhsa, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::sub_rng;
use crate::tensor::{Array, Tape, Var};
use crate::world::{ClipSample, N_EMOTIONS};
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Dimensions of the sinusoidal time embedding fed to the time MLP.
pub const TIME_EMBED_DIM: usize = 256;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Shape of a flow-matching transformer. `Desk` sizes train in seconds on a
/// CPU; `full()` reproduces the published configuration for audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FmtConfig {
    /// Sequence length in frames; the positional table is built for exactly
    /// this many tokens.
    pub t_frames: usize,
    pub d_audio: usize,
    pub d_pose: usize,
    pub d_hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Number of reference lips vectors K concatenated into the condition.
    pub n_refs: usize,
}

impl FmtConfig {
    pub fn desk() -> Self {
        FmtConfig {
            t_frames: 16,
            d_audio: 32,
            d_pose: 8,
            d_hidden: 128,
            blocks: 4,
            heads: 4,
            d_head: 32,
            n_refs: 4,
        }
    }

    pub fn full() -> Self {
        FmtConfig {
            t_frames: 60,
            d_audio: 512,
            d_pose: 16,
            d_hidden: 1024,
            blocks: 8,
            heads: 8,
            d_head: 128,
            n_refs: 4,
        }
    }

    /// Same configuration with a different reference count (ablation knob).
    pub fn with_refs(mut self, k: usize) -> Self {
        self.n_refs = k;
        self
    }

    /// Per-token input width: lips dims plus head-pose dims.
    pub fn d_in(&self) -> usize {
        LIPS_DIM + self.d_pose
    }

    /// Condition width: flattened reference lips, audio, emotion.
    pub fn d_cond(&self) -> usize {
        LIPS_DIM * self.n_refs + self.d_audio + N_EMOTIONS
    }

    fn validate(&self) -> Result<()> {
        if self.t_frames == 0 || self.n_refs == 0 || self.blocks == 0 {
            return Err(Error::invalid("fmt config needs positive sizes"));
        }
        if self.heads * self.d_head != self.d_hidden {
            return Err(Error::invalid(format!(
                "hidden size {} must equal heads x head dim {}x{}",
                self.d_hidden, self.heads, self.d_head
            )));
        }
        if self.d_hidden % 2 != 0 {
            return Err(Error::invalid("hidden size must be even for sinusoidal positions"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Flow samples
// ---------------------------------------------------------------------------

/// One training point of the conditional flow: noise `eps`, interpolation
/// time `t`, interpolated state `z_t`, and target velocity `u`.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub t: f32,
    /// `[T, 12]` standard normal draw.
    pub eps: Array<f32>,
    /// `[T, 12]` interpolant `(1 - t) eps + t z_lips`.
    pub z_t: Array<f32>,
    /// `[T, 12]` velocity target `z_lips - eps`.
    pub u: Array<f32>,
}

impl FlowSample {
    /// Build a sample from explicit noise and time (tests force endpoints
    /// through this). The interpolation laws hold exactly as written.
    pub fn from_parts(z_lips: &Array<f32>, eps: Array<f32>, t: f32) -> Result<FlowSample> {
        let shape = z_lips.shape().to_vec();
        if shape.len() != 2 || shape[1] != LIPS_DIM || shape[0] == 0 {
            return Err(Error::shape(
                "flow_sample",
                format!("lips sequence must be [T, {LIPS_DIM}], got {shape:?}"),
            ));
        }
        if eps.shape() != shape.as_slice() {
            return Err(Error::shape("flow_sample", "noise shape must match the sequence".to_string()));
        }
        if !(0.0..=1.0).contains(&t) || !z_lips.data().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("flow sample needs finite z_lips and t in [0, 1]"));
        }
        let mut z_t = Array::zeros(&shape);
        let mut u = Array::zeros(&shape);
        for i in 0..z_lips.numel() {
            let z = z_lips.data()[i];
            let e = eps.data()[i];
            z_t.data_mut()[i] = (1.0 - t) * e + t * z;
            u.data_mut()[i] = z - e;
        }
        Ok(FlowSample { t, eps, z_t, u })
    }
}

/// Draw `t ~ U(0,1)` and `eps ~ N(0, I)` and interpolate; deterministic per
/// seed.
pub fn make_flow_sample(z_lips: &Array<f32>, seed: u64) -> Result<FlowSample> {
    let mut rng = sub_rng(seed, "flow-sample");
    let t: f32 = rng.random();
    let eps = Array::randn(&mut rng, z_lips.shape(), 1.0);
    FlowSample::from_parts(z_lips, eps, t)
}

/// Flow-matching objective: mean squared error between the predicted and
/// target velocity over every frame and dimension.
pub fn fm_loss(v_pred: &Array<f32>, u: &Array<f32>) -> Result<f64> {
    mse(v_pred, u)
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

/// Everything the velocity field is conditioned on, for one sequence.
#[derive(Debug, Clone)]
pub struct ConditionPack {
    /// `[T, d_audio]` per-frame audio features.
    pub audio: Array<f32>,
    /// Emotion probability vector.
    pub emotion: [f32; N_EMOTIONS],
    /// `[K, 12]` reference lips vectors; concatenation order matters.
    pub ref_lips: Array<f32>,
    /// `[T, d_pose]` per-frame head poses.
    pub head_pose: Array<f32>,
}

impl ConditionPack {
    /// Check the pack against a model configuration; returns T.
    pub fn validate(&self, cfg: &FmtConfig) -> Result<usize> {
        let a = self.audio.shape().to_vec();
        if a.len() != 2 || a[1] != cfg.d_audio {
            return Err(Error::invalid(format!(
                "audio must be [T, {}], got {a:?}",
                cfg.d_audio
            )));
        }
        let t = a[0];
        if t != cfg.t_frames {
            return Err(Error::invalid(format!(
                "sequence length {t} does not match the model's {} frames",
                cfg.t_frames
            )));
        }
        if self.head_pose.shape() != [t, cfg.d_pose] {
            return Err(Error::invalid(format!(
                "head pose must be [{t}, {}], got {:?}",
                cfg.d_pose,
                self.head_pose.shape()
            )));
        }
        if self.ref_lips.shape() != [cfg.n_refs, LIPS_DIM] {
            return Err(Error::invalid(format!(
                "reference lips must be [{}, {LIPS_DIM}], got {:?}",
                cfg.n_refs,
                self.ref_lips.shape()
            )));
        }
        let sum: f32 = self.emotion.iter().sum();
        if self.emotion.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::invalid("emotion must be a probability vector"));
        }
        Ok(t)
    }

    /// Flatten into the `[T, d_cond]` matrix the condition embedding reads:
    /// per frame, `[ref lips (row-major) ‖ audio_t ‖ emotion]`.
    fn to_rows(&self, cfg: &FmtConfig) -> Result<Array<f32>> {
        let t = self.validate(cfg)?;
        let d_cond = cfg.d_cond();
        let refs_flat = self.ref_lips.data();
        let mut out = Array::zeros(&[t, d_cond]);
        for f in 0..t {
            let row = &mut out.data_mut()[f * d_cond..(f + 1) * d_cond];
            row[..refs_flat.len()].copy_from_slice(refs_flat);
            let a0 = refs_flat.len();
            row[a0..a0 + cfg.d_audio]
                .copy_from_slice(&self.audio.data()[f * cfg.d_audio..(f + 1) * cfg.d_audio]);
            row[a0 + cfg.d_audio..].copy_from_slice(&self.emotion);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal tables
// ---------------------------------------------------------------------------

/// Sinusoidal embedding of a continuous time in `[0, 1]`, scaled by 1000 so
/// the frequency bank resolves it well: `[cos(ts f_i) ‖ sin(ts f_i)]`.
fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let ts = t * 1000.0;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f32).ln() * i as f32 / half as f32).exp();
        out[i] = (ts * freq).cos();
        out[half + i] = (ts * freq).sin();
    }
    out
}

/// Fixed transformer positional table `[T, d]`:
/// `pe[p, 2i] = sin(p w_i)`, `pe[p, 2i+1] = cos(p w_i)`.
fn positional_encoding(t_frames: usize, d: usize) -> Array<f32> {
    let mut out = Array::zeros(&[t_frames, d]);
    for p in 0..t_frames {
        for i in 0..d / 2 {
            let w = (-(10000f32).ln() * (2 * i) as f32 / d as f32).exp();
            out.data_mut()[p * d + 2 * i] = (p as f32 * w).sin();
            out.data_mut()[p * d + 2 * i + 1] = (p as f32 * w).cos();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// One AdaLN-modulated transformer block. The modulation MLP emits six
/// `d_hidden`-wide chunks per token — shift/scale/gate for the attention
/// path, then shift/scale/gate for the MLP path — and is zero-initialized,
/// so the whole block is the identity map until training moves the gates.
struct FmtBlock {
    ada: Linear,
    attn: Mhsa,
    mlp0: Linear,
    mlp1: Linear,
    norm: LayerNorm,
}

impl FmtBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        cfg: &FmtConfig,
    ) -> Result<Self> {
        let d = cfg.d_hidden;
        let ada = Linear::zeros(store, &format!("{name}.ada"), d, 6 * d, true)?;
        let attn = Mhsa::new(store, rng, &format!("{name}.attn"), cfg.heads, cfg.d_head)?;
        let mlp0 = Linear::new(store, rng, &format!("{name}.mlp.l0"), d, 4 * d, true)?;
        let mlp1 = Linear::new(store, rng, &format!("{name}.mlp.l1"), 4 * d, d, true)?;
        Ok(FmtBlock { ada, attn, mlp0, mlp1, norm: LayerNorm::plain() })
    }

    fn count(cfg: &FmtConfig) -> usize {
        let d = cfg.d_hidden;
        Linear::count(d, 6 * d, true)
            + Mhsa::count(cfg.heads, cfg.d_head)
            + Linear::count(d, 4 * d, true)
            + Linear::count(4 * d, d, true)
    }

    fn forward(&self, tape: &mut Tape<f32>, ps: &[Var], x: Var, cond: Var) -> Result<Var> {
        let d = tape.value(x).shape()[2];
        let act = tape.silu(cond)?;
        let mods = self.ada.forward(tape, ps, act)?;
        let chunk = |tape: &mut Tape<f32>, k: usize| tape.slice(mods, 2, k * d, d);
        let shift_a = chunk(tape, 0)?;
        let scale_a = chunk(tape, 1)?;
        let gate_a = chunk(tape, 2)?;
        let shift_m = chunk(tape, 3)?;
        let scale_m = chunk(tape, 4)?;
        let gate_m = chunk(tape, 5)?;

        let h = self.norm.forward(tape, ps, x)?;
        let h = modulate(tape, h, shift_a, scale_a)?;
        let h = self.attn.forward(tape, ps, h)?;
        let h = tape.mul(gate_a, h)?;
        let x = tape.add(x, h)?;

        let h = self.norm.forward(tape, ps, x)?;
        let h = modulate(tape, h, shift_m, scale_m)?;
        let h = self.mlp0.forward(tape, ps, h)?;
        let h = tape.gelu(h)?;
        let h = self.mlp1.forward(tape, ps, h)?;
        let h = tape.mul(gate_m, h)?;
        tape.add(x, h)
    }
}

fn modulate(tape: &mut Tape<f32>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let gain = tape.add_scalar(scale, 1.0)?;
    let scaled = tape.mul(h, gain)?;
    tape.add(scaled, shift)
}

/// The flow-matching transformer: predicts a velocity field over lips-pose
/// sequences from the noisy state, the flow time, and a condition pack.
pub struct FmtModel {
    store: ParamStore<f32>,
    cfg: FmtConfig,
    token_embed: Linear,
    token_norm: LayerNorm,
    time0: Linear,
    time1: Linear,
    cond_embed: Linear,
    blocks: Vec<FmtBlock>,
    out_norm: LayerNorm,
    out_mod: Linear,
    out_proj: Linear,
    /// `[T, d_hidden]` fixed positional table (not a parameter).
    pos: Array<f32>,
}

impl FmtModel {
    pub fn new(cfg: FmtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "fmt-init");
        let d = cfg.d_hidden;
        let token_embed = Linear::new(&mut store, &mut rng, "fmt.token", cfg.d_in(), d, true)?;
        let time0 = Linear::new(&mut store, &mut rng, "fmt.time.l0", TIME_EMBED_DIM, d, true)?;
        let time1 = Linear::new(&mut store, &mut rng, "fmt.time.l1", d, d, true)?;
        let cond_embed = Linear::new(&mut store, &mut rng, "fmt.cond", cfg.d_cond(), d, true)?;
        let blocks = (0..cfg.blocks)
            .map(|i| FmtBlock::new(&mut store, &mut rng, &format!("fmt.block{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let out_mod = Linear::zeros(&mut store, "fmt.out.mod", d, 2 * d, true)?;
        let out_proj = Linear::zeros(&mut store, "fmt.out.proj", d, LIPS_DIM, true)?;
        let pos = positional_encoding(cfg.t_frames, d);
        Ok(FmtModel {
            store,
            cfg,
            token_embed,
            token_norm: LayerNorm::plain(),
            time0,
            time1,
            cond_embed,
            blocks,
            out_norm: LayerNorm::plain(),
            out_mod,
            out_proj,
            pos,
        })
    }

    pub fn config(&self) -> &FmtConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Batched velocity prediction on the tape. Inputs: `z_t` `[B, T, 12]`,
    /// `head` `[B, T, d_pose]`, `cond_rows` `[B, T, d_cond]`, `t_sin`
    /// `[B, 256]` sinusoidal time embeddings.
    fn velocity_on_tape(
        &self,
        tape: &mut Tape<f32>,
        ps: &[Var],
        z_t: Var,
        head: Var,
        cond_rows: Var,
        t_sin: Var,
    ) -> Result<Var> {
        let shape = tape.value(z_t).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let d = self.cfg.d_hidden;

        let tokens = tape.concat(&[z_t, head], 2)?;
        let x = self.token_embed.forward(tape, ps, tokens)?;
        let x = self.token_norm.forward(tape, ps, x)?;
        let mut pos_b = Array::zeros(&[b, t, d]);
        for bi in 0..b {
            pos_b.data_mut()[bi * t * d..(bi + 1) * t * d].copy_from_slice(self.pos.data());
        }
        let pos_c = tape.constant(pos_b);
        let mut x = tape.add(x, pos_c)?;

        let tv = self.time0.forward(tape, ps, t_sin)?;
        let tv = tape.silu(tv)?;
        let tv = self.time1.forward(tape, ps, tv)?;
        // Broadcast the [B, d] time vector over frames to [B, T, d].
        let tv = tape.tile_spatial(tv, t, 1)?;
        let tv = tape.permute(tv, &[0, 2, 3, 1])?;
        let tv = tape.reshape(tv, &[b, t, d])?;
        let c = self.cond_embed.forward(tape, ps, cond_rows)?;
        let cond = tape.add(c, tv)?;

        for block in &self.blocks {
            x = block.forward(tape, ps, x, cond)?;
        }

        let m = tape.silu(cond)?;
        let m = self.out_mod.forward(tape, ps, m)?;
        let shift = tape.slice(m, 2, 0, d)?;
        let scale = tape.slice(m, 2, d, d)?;
        let h = self.out_norm.forward(tape, ps, x)?;
        let h = modulate(tape, h, shift, scale)?;
        self.out_proj.forward(tape, ps, h)
    }

    /// Analytic per-stage audit of a configuration, without allocating it.
    pub fn plan(cfg: &FmtConfig) -> ArchPlan {
        let d = cfg.d_hidden;
        let mut plan = ArchPlan::new("flow-matching transformer");
        plan.push(
            "input_embed",
            "Linear over [lips, head pose] per frame, no affine norm",
            format!("{} -> {d}", cfg.d_in()),
            Linear::count(cfg.d_in(), d, true),
        );
        plan.push(
            "pos_enc",
            "fixed sinusoidal, added to tokens",
            format!("{} x {d}", cfg.t_frames),
            0,
        );
        plan.push(
            "time_embed",
            "sinusoidal 256 + Linear + SiLU + Linear",
            format!("{TIME_EMBED_DIM} -> {d}"),
            Linear::count(TIME_EMBED_DIM, d, true) + Linear::count(d, d, true),
        );
        plan.push(
            "cond_embed",
            "Linear over [ref lips x K, audio, emotion] per frame",
            format!("{} -> {d}", cfg.d_cond()),
            Linear::count(cfg.d_cond(), d, true),
        );
        plan.push(
            "blocks",
            format!(
                "{} x (AdaLN MHSA {}h x {}d + AdaLN MLP x4 GELU; gates {d} -> {})",
                cfg.blocks,
                cfg.heads,
                cfg.d_head,
                6 * d
            ),
            format!("{d} -> {d}"),
            cfg.blocks * FmtBlock::count(cfg),
        );
        plan.push(
            "output",
            "LayerNorm (no affine) + SiLU + Linear shift/scale + Linear",
            format!("{d} -> {LIPS_DIM}"),
            Linear::count(d, 2 * d, true) + Linear::count(d, LIPS_DIM, true),
        );
        plan
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)
    }

    /// Load a trained model; parameters come back frozen.
    pub fn load(path: &Path, cfg: FmtConfig) -> Result<Self> {
        let mut model = FmtModel::new(cfg, 0)?;
        checkpoint::load_into(path, &mut model.store)?;
        model.store.freeze_all();
        Ok(model)
    }
}

/// Predict the velocity field for one sequence: `z_t` `[T, 12]` at flow time
/// `t`, under a condition pack. Length or shape mismatches are rejected.
pub fn fmt_forward(
    model: &FmtModel,
    z_t: &Array<f32>,
    t: f32,
    c: &ConditionPack,
) -> Result<Array<f32>> {
    let frames = c.validate(&model.cfg)?;
    if z_t.shape() != [frames, LIPS_DIM] {
        return Err(Error::invalid(format!(
            "state must be [{frames}, {LIPS_DIM}], got {:?}",
            z_t.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    let cond_rows = c.to_rows(&model.cfg)?;
    let mut tape = Tape::new();
    let ps = model.store.leaf_all(&mut tape);
    let z = tape.constant(z_t.clone().reshaped(&[1, frames, LIPS_DIM])?);
    let head = tape.constant(c.head_pose.clone().reshaped(&[1, frames, model.cfg.d_pose])?);
    let cond = tape.constant(cond_rows.reshaped(&[1, frames, model.cfg.d_cond()])?);
    let t_sin = tape.constant(Array::from_vec(
        &[1, TIME_EMBED_DIM],
        timestep_embedding(t, TIME_EMBED_DIM),
    )?);
    let v = model.velocity_on_tape(&mut tape, &ps, z, head, cond, t_sin)?;
    tape.value(v).clone().reshaped(&[frames, LIPS_DIM])
}

/// Integrate the learned field from seeded noise to `t = 1` with `n_steps`
/// uniform explicit Euler steps; returns the predicted `[T, 12]` sequence.
pub fn sample_poses(
    model: &FmtModel,
    c: &ConditionPack,
    n_steps: usize,
    seed: u64,
) -> Result<Array<f32>> {
    if n_steps < 1 {
        return Err(Error::invalid("sampling needs at least one Euler step"));
    }
    let frames = c.validate(&model.cfg)?;
    let mut rng = sub_rng(seed, "flow-euler-init");
    let mut z = Array::randn(&mut rng, &[frames, LIPS_DIM], 1.0);
    let dt = 1.0f32 / n_steps as f32;
    for k in 0..n_steps {
        let t = k as f32 / n_steps as f32;
        let v = fmt_forward(model, &z, t, c)?;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += dt * vi;
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// One clip prepared for flow training: per-frame lips targets from the
/// distilled encoder, aligned audio features, the emotion vector, and head
/// poses. Windows of `t_frames` are cut from it during training.
#[derive(Debug, Clone)]
pub struct FmExample {
    /// `[n, 12]` lips vectors, one per frame.
    pub z_lips: Array<f32>,
    /// `[n, d_audio]` audio features.
    pub audio: Array<f32>,
    pub emotion: [f32; N_EMOTIONS],
    /// `[n, d_pose]` head poses.
    pub head_pose: Array<f32>,
}

impl FmExample {
    pub fn len(&self) -> usize {
        self.z_lips.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of `z_lips` at `idx`, stacked `[K, 12]`, in the given order.
    pub fn ref_rows(&self, idx: &[usize]) -> Result<Array<f32>> {
        let n = self.len();
        let mut out = Array::zeros(&[idx.len(), LIPS_DIM]);
        for (k, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::invalid(format!("reference frame {i} out of range 0..{n}")));
            }
            out.data_mut()[k * LIPS_DIM..(k + 1) * LIPS_DIM]
                .copy_from_slice(&self.z_lips.data()[i * LIPS_DIM..(i + 1) * LIPS_DIM]);
        }
        Ok(out)
    }

    fn rows(src: &Array<f32>, start: usize, len: usize) -> Result<Array<f32>> {
        let w = src.shape()[1];
        let mut out = Array::zeros(&[len, w]);
        out.data_mut()
            .copy_from_slice(&src.data()[start * w..(start + len) * w]);
        Ok(out)
    }

    /// Cut a `t_frames` window starting at `start` and pair it with the
    /// given reference rows: returns the lips target and the condition pack.
    pub fn window(
        &self,
        start: usize,
        t_frames: usize,
        refs: Array<f32>,
    ) -> Result<(Array<f32>, ConditionPack)> {
        if start + t_frames > self.len() {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds clip of {} frames",
                start + t_frames,
                self.len()
            )));
        }
        let z = Self::rows(&self.z_lips, start, t_frames)?;
        let pack = ConditionPack {
            audio: Self::rows(&self.audio, start, t_frames)?,
            emotion: self.emotion,
            ref_lips: refs,
            head_pose: Self::rows(&self.head_pose, start, t_frames)?,
        };
        Ok((z, pack))
    }
}

/// Prepare a synthetic clip for flow training: lips targets come from the
/// distilled single-pass encoder over the raw frames.
pub fn clip_to_fm_example(clip: &ClipSample, encoder: &DistilledEncoder) -> Result<FmExample> {
    let n = clip.len();
    if clip.audio.len() != n || clip.head_poses.len() != n {
        return Err(Error::invalid(format!(
            "clip with {n} frames has {} audio frames and {} head poses",
            clip.audio.len(),
            clip.head_poses.len()
        )));
    }
    let frames: Vec<&Array<f32>> = clip.frames.iter().map(|f| &f.image).collect();
    let z_lips = encoder.encode_batch(&frames)?;
    let d_a = clip.audio.features[0].len();
    let mut audio = Array::zeros(&[n, d_a]);
    for (i, f) in clip.audio.features.iter().enumerate() {
        audio.data_mut()[i * d_a..(i + 1) * d_a].copy_from_slice(f);
    }
    let d_p = clip.head_poses[0].len();
    let mut head = Array::zeros(&[n, d_p]);
    for (i, p) in clip.head_poses.iter().enumerate() {
        head.data_mut()[i * d_p..(i + 1) * d_p].copy_from_slice(p);
    }
    Ok(FmExample { z_lips, audio, emotion: clip.audio.emotion_one_hot(), head_pose: head })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FmTrainConfig {
    pub iters: u64,
    pub batch: usize,
    /// Constant AdamW learning rate, applied at every iteration.
    pub lr: f64,
    pub eval_every: u64,
    /// Held-out windows scored per evaluation pass.
    pub eval_windows: usize,
    /// Early-stop once held-out loss falls below this; `<= 0` disables.
    pub target_loss: f64,
    pub loss_csv: Option<PathBuf>,
    /// Print evaluation results to stderr as training progresses.
    pub progress: bool,
}

impl Default for FmTrainConfig {
    fn default() -> Self {
        FmTrainConfig {
            iters: 3000,
            batch: 8,
            lr: 5e-5,
            eval_every: 200,
            eval_windows: 16,
            target_loss: 0.0,
            loss_csv: None,
            progress: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FmStats {
    pub iters_run: u64,
    pub final_eval_loss: f64,
    pub loss_curve: Vec<(u64, f64)>,
}

fn split_examples(data: &[FmExample]) -> (Vec<&FmExample>, Vec<&FmExample>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, ex) in data.iter().enumerate() {
        if data.len() >= 8 && i % 8 == 7 {
            held.push(ex);
        } else {
            train.push(ex);
        }
    }
    if held.is_empty() {
        if let Some(last) = train.last() {
            held.push(*last);
        }
    }
    (train, held)
}

struct FmBatch {
    z_t: Array<f32>,
    head: Array<f32>,
    cond: Array<f32>,
    t_sin: Array<f32>,
    u: Array<f32>,
}

fn draw_batch<R: Rng + ?Sized>(
    rng: &mut R,
    examples: &[&FmExample],
    cfg: &FmtConfig,
    batch: usize,
) -> Result<FmBatch> {
    let t = cfg.t_frames;
    let k = cfg.n_refs;
    let d_cond = cfg.d_cond();
    let mut z_t = Array::zeros(&[batch, t, LIPS_DIM]);
    let mut head = Array::zeros(&[batch, t, cfg.d_pose]);
    let mut cond = Array::zeros(&[batch, t, d_cond]);
    let mut t_sin = Array::zeros(&[batch, TIME_EMBED_DIM]);
    let mut u = Array::zeros(&[batch, t, LIPS_DIM]);
    for bi in 0..batch {
        let ex = examples[rng.random_range(0..examples.len())];
        if ex.len() < t {
            return Err(Error::invalid(format!(
                "clip of {} frames is shorter than the {t}-frame window",
                ex.len()
            )));
        }
        let start = rng.random_range(0..=ex.len() - t);
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..ex.len())).collect();
        let refs = ex.ref_rows(&idx)?;
        let (z, pack) = ex.window(start, t, refs)?;
        let sample = make_flow_sample(&z, rng.random())?;
        let rows = pack.to_rows(cfg)?;
        let n = t * LIPS_DIM;
        z_t.data_mut()[bi * n..(bi + 1) * n].copy_from_slice(sample.z_t.data());
        u.data_mut()[bi * n..(bi + 1) * n].copy_from_slice(sample.u.data());
        let hp = t * cfg.d_pose;
        head.data_mut()[bi * hp..(bi + 1) * hp].copy_from_slice(pack.head_pose.data());
        let cn = t * d_cond;
        cond.data_mut()[bi * cn..(bi + 1) * cn].copy_from_slice(rows.data());
        t_sin.data_mut()[bi * TIME_EMBED_DIM..(bi + 1) * TIME_EMBED_DIM]
            .copy_from_slice(&timestep_embedding(sample.t, TIME_EMBED_DIM));
    }
    Ok(FmBatch { z_t, head, cond, t_sin, u })
}

fn batch_loss_on_tape(model: &FmtModel, batch: FmBatch) -> Result<(Tape<f32>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let ps = model.store.leaf_all(&mut tape);
    let z = tape.constant(batch.z_t);
    let head = tape.constant(batch.head);
    let cond = tape.constant(batch.cond);
    let t_sin = tape.constant(batch.t_sin);
    let u = tape.constant(batch.u);
    let v = model.velocity_on_tape(&mut tape, &ps, z, head, cond, t_sin)?;
    let d = tape.sub(v, u)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean_all(sq)?;
    Ok((tape, ps, loss))
}

/// Mean held-out flow-matching loss over deterministic windows.
pub fn evaluate_fm(
    model: &FmtModel,
    examples: &[&FmExample],
    windows: usize,
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() || windows == 0 {
        return Err(Error::invalid("evaluation needs examples and windows"));
    }
    let mut rng = sub_rng(seed, "fm-eval");
    let batch = draw_batch(&mut rng, examples, &model.cfg, windows)?;
    let (tape, _ps, loss) = batch_loss_on_tape(model, batch)?;
    Ok(tape.value(loss).item() as f64)
}

/// Train the velocity field with AdamW at a constant learning rate. Fails on
/// non-finite losses; early-stops once held-out loss reaches `target_loss`.
pub fn train_fm(
    model: &mut FmtModel,
    data: &[FmExample],
    cfg: &FmTrainConfig,
    seed: u64,
) -> Result<FmStats> {
    if data.is_empty() {
        return Err(Error::invalid("flow training needs at least one example"));
    }
    let (train, held) = split_examples(data);
    let mut rng = sub_rng(seed, "fm-train");
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut writer = match &cfg.loss_csv {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(w, "iter,loss,lr")?;
            Some(w)
        }
        None => None,
    };
    let mut loss_curve = Vec::new();
    let mut iters_run = 0;
    for it in 0..cfg.iters {
        iters_run = it + 1;
        let batch = draw_batch(&mut rng, &train, &model.cfg, cfg.batch)?;
        let (mut tape, ps, loss) = batch_loss_on_tape(model, batch)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::training(format!("flow loss became non-finite at iter {it}")));
        }
        if let Some(w) = &mut writer {
            writeln!(w, "{it},{loss_val:.6},{:.3e}", cfg.lr)?;
        }
        loss_curve.push((it, loss_val));
        tape.backward(loss)?;
        let trainable = model.store.trainable_indices();
        let grads: Vec<Option<Array<f32>>> =
            trainable.iter().map(|&i| tape.grad(ps[i]).cloned()).collect();
        let grad_refs: Vec<Option<&Array<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let mut params = model.store.trainable_mut();
        opt.step(&mut params, &grad_refs, cfg.lr)?;
        if (it + 1) % cfg.eval_every == 0 {
            let eval = evaluate_fm(model, &held, cfg.eval_windows, seed)?;
            if cfg.progress {
                eprintln!("fm iter {:5}  loss {loss_val:8.4}  held-out {eval:8.4}", it + 1);
            }
            if cfg.target_loss > 0.0 && eval <= cfg.target_loss {
                break;
            }
        }
    }
    if let Some(w) = &mut writer {
        w.flush()?;
    }
    let final_eval_loss = evaluate_fm(model, &held, cfg.eval_windows, seed)?;
    Ok(FmStats { iters_run, final_eval_loss, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{synth_clip, synth_identity, RenderOptions, WorldConfig};

    fn tiny_cfg() -> FmtConfig {
        FmtConfig { t_frames: 6, d_audio: 5, d_pose: 3, d_hidden: 32, blocks: 2, heads: 2, d_head: 16, n_refs: 2 }
    }

    fn synthetic_example(cfg: &FmtConfig, n: usize, seed: u64) -> FmExample {
        let mut rng = sub_rng(seed, "fm-test-example");
        let mut z = Array::zeros(&[n, LIPS_DIM]);
        for f in 0..n {
            for d in 0..LIPS_DIM {
                z.data_mut()[f * LIPS_DIM + d] =
                    ((f as f32) * 0.37 + d as f32).sin() * 0.5 + 0.1 * d as f32;
            }
        }
        let mut emotion = [0.0; N_EMOTIONS];
        emotion[seed as usize % N_EMOTIONS] = 1.0;
        FmExample {
            z_lips: z,
            audio: Array::randn(&mut rng, &[n, cfg.d_audio], 1.0),
            emotion,
            head_pose: Array::randn(&mut rng, &[n, cfg.d_pose], 0.5),
        }
    }

    fn pack_for(cfg: &FmtConfig, ex: &FmExample, start: usize) -> (Array<f32>, ConditionPack) {
        let refs = ex.ref_rows(&(0..cfg.n_refs).collect::<Vec<_>>()).unwrap();
        ex.window(start, cfg.t_frames, refs).unwrap()
    }

    /// Put small random weights into the zero-initialized gates and output
    /// so the field becomes a nontrivial function of state and time.
    fn randomize_field(model: &mut FmtModel, seed: u64, std: f32) {
        let mut rng = sub_rng(seed, "fm-test-randomize");
        let names: Vec<String> = model
            .store()
            .iter()
            .filter(|(n, _)| n.contains(".ada.") || n.starts_with("fmt.out."))
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let shape = model.store().get(&name).unwrap().shape().to_vec();
            model.store_mut().set(&name, Array::randn(&mut rng, &shape, std)).unwrap();
        }
    }

    #[test]
    fn flow_samples_hold_the_interpolation_laws_exactly() {
        let mut rng = sub_rng(1, "t");
        let z = Array::randn(&mut rng, &[5, LIPS_DIM], 1.0);
        let s = make_flow_sample(&z, 77).unwrap();
        assert!((0.0..=1.0).contains(&s.t));
        for i in 0..z.numel() {
            let expect_zt = (1.0 - s.t) * s.eps.data()[i] + s.t * z.data()[i];
            assert_eq!(s.z_t.data()[i], expect_zt);
            assert_eq!(s.u.data()[i], z.data()[i] - s.eps.data()[i]);
        }
        let eps = s.eps.clone();
        let at_one = FlowSample::from_parts(&z, eps.clone(), 1.0).unwrap();
        assert_eq!(at_one.z_t.data(), z.data());
        let at_zero = FlowSample::from_parts(&z, eps.clone(), 0.0).unwrap();
        assert_eq!(at_zero.z_t.data(), eps.data());
        let self_target = FlowSample::from_parts(&eps, eps.clone(), 0.3).unwrap();
        assert!(self_target.u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_samples_are_deterministic_per_seed() {
        let mut rng = sub_rng(2, "t");
        let z = Array::randn(&mut rng, &[4, LIPS_DIM], 1.0);
        let a = make_flow_sample(&z, 5).unwrap();
        let b = make_flow_sample(&z, 5).unwrap();
        assert_eq!(a.t, b.t);
        assert_eq!(a.eps.data(), b.eps.data());
        let c = make_flow_sample(&z, 6).unwrap();
        assert!(a.t != c.t || a.eps.data() != c.eps.data());
    }

    #[test]
    fn flow_samples_reject_bad_inputs() {
        let mut z = Array::zeros(&[3, LIPS_DIM]);
        z.data_mut()[0] = f32::NAN;
        assert!(make_flow_sample(&z, 1).is_err());
        let ok = Array::zeros(&[3, LIPS_DIM]);
        assert!(FlowSample::from_parts(&ok, Array::zeros(&[3, LIPS_DIM]), 1.5).is_err());
        assert!(FlowSample::from_parts(&ok, Array::zeros(&[2, LIPS_DIM]), 0.5).is_err());
    }

    #[test]
    fn fm_loss_is_the_mean_squared_velocity_error() {
        let mut rng = sub_rng(3, "t");
        let u = Array::randn(&mut rng, &[4, LIPS_DIM], 1.0);
        assert_eq!(fm_loss(&u, &u).unwrap(), 0.0);
        let off = u.clone().map(|v| v + 1.0);
        assert!((fm_loss(&off, &u).unwrap() - 1.0).abs() < 1e-6);
        let err1 = fm_loss(&Array::zeros(&[4, LIPS_DIM]), &u).unwrap();
        let doubled = u.clone().map(|v| -v);
        let err2 = fm_loss(&doubled, &u).unwrap();
        assert!((err2 - 4.0 * err1).abs() < 1e-4 * err2.max(1.0));
    }

    #[test]
    fn fresh_models_predict_zero_velocity_so_init_loss_is_the_target_power() {
        let cfg = tiny_cfg();
        let model = FmtModel::new(cfg, 9).unwrap();
        let ex = synthetic_example(&cfg, 10, 4);
        let (z, pack) = pack_for(&cfg, &ex, 2);
        let sample = make_flow_sample(&z, 11).unwrap();
        let v = fmt_forward(&model, &sample.z_t, sample.t, &pack).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let init_loss = fm_loss(&v, &sample.u).unwrap();
        let power = sample.u.data().iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>()
            / sample.u.numel() as f64;
        assert!((init_loss - power).abs() < 1e-9);
    }

    #[test]
    fn blocks_are_the_identity_map_at_initialization() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = sub_rng(12, "t");
        let block = FmtBlock::new(&mut store, &mut rng, "fmt.block0", &cfg).unwrap();
        let mut tape = Tape::new();
        let ps = store.leaf_all(&mut tape);
        let x = tape.constant(Array::randn(&mut rng, &[2, cfg.t_frames, cfg.d_hidden], 1.0));
        let c = tape.constant(Array::randn(&mut rng, &[2, cfg.t_frames, cfg.d_hidden], 1.0));
        let y = block.forward(&mut tape, &ps, x, c).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn full_profile_plan_matches_the_published_table() {
        let plan = FmtModel::plan(&FmtConfig::full());
        let expect = [
            ("input_embed", "28 -> 1024"),
            ("pos_enc", "60 x 1024"),
            ("time_embed", "256 -> 1024"),
            ("cond_embed", "567 -> 1024"),
            ("blocks", "1024 -> 1024"),
            ("output", "1024 -> 12"),
        ];
        assert_eq!(plan.rows.len(), expect.len());
        for ((stage, dims), row) in expect.iter().zip(&plan.rows) {
            assert_eq!(row.stage, *stage);
            assert_eq!(row.dims, *dims, "stage {stage}");
        }
        let blocks = plan.row("blocks").unwrap();
        assert!(blocks.detail.starts_with("8 x"));
        assert!(blocks.detail.contains("8h x 128d"));
        assert!(blocks.detail.contains("1024 -> 6144"));
        assert_eq!(plan.row("pos_enc").unwrap().params, 0);
    }

    #[test]
    fn desk_model_matches_its_plan_parameter_for_parameter() {
        let model = FmtModel::new(FmtConfig::desk(), 5).unwrap();
        let plan = FmtModel::plan(&FmtConfig::desk());
        assert_eq!(model.store().param_count(), plan.total_params());
        assert!(model.store().iter().all(|(n, _)| n.starts_with("fmt.")));
    }

    #[test]
    fn forward_rejects_mismatched_lengths_and_shapes() {
        let cfg = tiny_cfg();
        let model = FmtModel::new(cfg, 7).unwrap();
        let ex = synthetic_example(&cfg, 10, 8);
        let (z, pack) = pack_for(&cfg, &ex, 0);
        // Wrong state length.
        let short = Array::zeros(&[cfg.t_frames - 1, LIPS_DIM]);
        assert!(matches!(fmt_forward(&model, &short, 0.5, &pack), Err(Error::InvalidArgument(_))));
        // Audio sequence length different from the model's frame count.
        let mut bad = pack.clone();
        bad.audio = Array::zeros(&[cfg.t_frames + 1, cfg.d_audio]);
        assert!(matches!(fmt_forward(&model, &z, 0.5, &bad), Err(Error::InvalidArgument(_))));
        // Wrong number of reference rows.
        let mut bad = pack.clone();
        bad.ref_lips = Array::zeros(&[cfg.n_refs + 1, LIPS_DIM]);
        assert!(fmt_forward(&model, &z, 0.5, &bad).is_err());
        // Emotion that is not a probability vector.
        let mut bad = pack.clone();
        bad.emotion = [0.5; N_EMOTIONS];
        assert!(fmt_forward(&model, &z, 0.5, &bad).is_err());
        // Flow time outside the unit interval.
        assert!(fmt_forward(&model, &z, 1.5, &pack).is_err());
    }

    #[test]
    fn reference_order_changes_the_prediction() {
        let cfg = tiny_cfg();
        let mut model = FmtModel::new(cfg, 13).unwrap();
        randomize_field(&mut model, 14, 0.05);
        let ex = synthetic_example(&cfg, 10, 15);
        let (z, pack) = pack_for(&cfg, &ex, 1);
        let mut swapped = pack.clone();
        let d = LIPS_DIM;
        for i in 0..d {
            swapped.ref_lips.data_mut().swap(i, d + i);
        }
        let a = fmt_forward(&model, &z, 0.4, &pack).unwrap();
        let b = fmt_forward(&model, &z, 0.4, &swapped).unwrap();
        let diff: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-4, "permuting reference rows should change the output (diff {diff})");
    }

    #[test]
    fn one_euler_step_integrates_a_constant_field_exactly() {
        let cfg = tiny_cfg();
        let mut model = FmtModel::new(cfg, 16).unwrap();
        // Velocity equals the output bias everywhere: a constant field.
        let mut rng = sub_rng(17, "t");
        let bias = Array::randn(&mut rng, &[LIPS_DIM], 1.0);
        model.store_mut().set("fmt.out.proj.b", bias.clone()).unwrap();
        let ex = synthetic_example(&cfg, 8, 18);
        let (_, pack) = pack_for(&cfg, &ex, 0);
        let out = sample_poses(&model, &pack, 1, 19).unwrap();
        let mut expect = {
            let mut r = sub_rng(19, "flow-euler-init");
            Array::randn(&mut r, &[cfg.t_frames, LIPS_DIM], 1.0)
        };
        for f in 0..cfg.t_frames {
            for d in 0..LIPS_DIM {
                expect.data_mut()[f * LIPS_DIM + d] += bias.data()[d];
            }
        }
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn constant_field_endpoints_are_step_count_invariant() {
        let cfg = tiny_cfg();
        let mut model = FmtModel::new(cfg, 20).unwrap();
        let mut rng = sub_rng(21, "t");
        model
            .store_mut()
            .set("fmt.out.proj.b", Array::randn(&mut rng, &[LIPS_DIM], 1.0))
            .unwrap();
        let ex = synthetic_example(&cfg, 8, 22);
        let (_, pack) = pack_for(&cfg, &ex, 0);
        let reference = sample_poses(&model, &pack, 1, 23).unwrap();
        for n in [2, 3, 4, 8, 16] {
            let z = sample_poses(&model, &pack, n, 23).unwrap();
            let max_diff = z
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-5, "n={n} drifted by {max_diff}");
        }
    }

    #[test]
    fn sampler_rejects_zero_steps_and_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let model = FmtModel::new(cfg, 24).unwrap();
        let ex = synthetic_example(&cfg, 8, 25);
        let (_, pack) = pack_for(&cfg, &ex, 0);
        assert!(matches!(sample_poses(&model, &pack, 0, 1), Err(Error::InvalidArgument(_))));
        let a = sample_poses(&model, &pack, 4, 9).unwrap();
        let b = sample_poses(&model, &pack, 4, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample_poses(&model, &pack, 4, 10).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn euler_error_shrinks_as_the_step_count_doubles() {
        let cfg = tiny_cfg();
        let mut model = FmtModel::new(cfg, 26).unwrap();
        randomize_field(&mut model, 27, 0.08);
        let ex = synthetic_example(&cfg, 8, 28);
        let (_, pack) = pack_for(&cfg, &ex, 0);
        let reference = sample_poses(&model, &pack, 128, 30).unwrap();
        let mut last = f32::INFINITY;
        for n in [2, 4, 8, 16] {
            let z = sample_poses(&model, &pack, n, 30).unwrap();
            let err: f32 = z
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt();
            assert!(err < last, "error should shrink: n={n} err={err} previous={last}");
            last = err;
        }
    }

    #[test]
    fn training_smoke_runs_with_a_constant_learning_rate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut model = FmtModel::new(cfg, 31).unwrap();
        let data: Vec<FmExample> = (0..2).map(|i| synthetic_example(&cfg, 12, 40 + i)).collect();
        let csv = dir.path().join("fm.csv");
        let tcfg = FmTrainConfig {
            iters: 10,
            batch: 2,
            eval_every: 5,
            eval_windows: 2,
            loss_csv: Some(csv.clone()),
            ..FmTrainConfig::default()
        };
        let stats = train_fm(&mut model, &data, &tcfg, 41).unwrap();
        assert_eq!(stats.iters_run, 10);
        assert_eq!(stats.loss_curve.len(), 10);
        assert!(stats.loss_curve.iter().all(|(_, l)| l.is_finite()));
        assert!(stats.final_eval_loss.is_finite());
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11, "header plus one row per iter");
        for line in &lines[1..] {
            let lr: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(lr, 5e-5, "learning rate must stay constant");
        }
    }

    #[test]
    fn checkpoints_round_trip_and_load_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut model = FmtModel::new(cfg, 50).unwrap();
        randomize_field(&mut model, 51, 0.05);
        let path = dir.path().join("fmt.bin");
        model.save(&path).unwrap();
        let loaded = FmtModel::load(&path, cfg).unwrap();
        assert!(loaded.store().all_frozen());
        let ex = synthetic_example(&cfg, 8, 52);
        let (z, pack) = pack_for(&cfg, &ex, 0);
        let a = fmt_forward(&model, &z, 0.7, &pack).unwrap();
        let b = fmt_forward(&loaded, &z, 0.7, &pack).unwrap();
        assert_eq!(a.data(), b.data());
        // A mismatched configuration cannot absorb the checkpoint.
        assert!(FmtModel::load(&path, FmtConfig::desk()).is_err());
    }

    #[test]
    fn clips_convert_to_flow_examples_with_aligned_shapes() {
        let wc = WorldConfig::desk();
        let id = synth_identity(60, wc.image_size);
        let clip = synth_clip(&id, 61, 9, &wc, &RenderOptions::default()).unwrap();
        let enc = DistilledEncoder::new(62).unwrap();
        let ex = clip_to_fm_example(&clip, &enc).unwrap();
        assert_eq!(ex.len(), 9);
        assert_eq!(ex.z_lips.shape(), &[9, LIPS_DIM]);
        assert_eq!(ex.audio.shape(), &[9, wc.d_a]);
        assert_eq!(ex.head_pose.shape(), &[9, wc.d_p]);
        assert!((ex.emotion.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        // Reference rows preserve order.
        let refs = ex.ref_rows(&[3, 1]).unwrap();
        assert_eq!(refs.data()[..LIPS_DIM], ex.z_lips.data()[3 * LIPS_DIM..4 * LIPS_DIM]);
        assert!(ex.ref_rows(&[9]).is_err());
    }

    #[test]
    fn ablation_grid_configurations_all_build() {
        for k in [1usize, 4, 8, 16, 32] {
            let cfg = FmtConfig::desk().with_refs(k);
            let model = FmtModel::new(cfg, 70).unwrap();
            assert_eq!(model.config().n_refs, k);
            assert_eq!(model.config().d_cond(), 12 * k + 32 + 7);
        }
    }
}
