//! Clip assembly and the versioned on-disk clip format.
//!
//! A clip is generated audio-first: the feature track is drawn, ground-truth
//! mouth poses are computed from it by `pose_fn`, a smooth head-pose track is
//! drawn, and every frame is rendered with its analytic masks. Clips can be
//! exported as a directory of 8-bit RGB PNG frames plus one JSON sidecar
//! (format key "synthworld/1") and re-imported.

use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::tensor::Array;
use crate::world::audio::{pose_fn, synth_audio, AudioTrack, GroundTruthPose};
use crate::world::identity::IdentitySpec;
use crate::world::render::{make_masks, render_face, HeadPose, RenderOptions};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Version key written into every clip sidecar.
pub const CLIP_FORMAT: &str = "synthworld/1";

/// Global dimensions of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub image_size: usize,
    /// Audio feature width per frame.
    pub d_a: usize,
    /// Head-pose vector width (>= 4).
    pub d_p: usize,
    pub frame_rate: f32,
}

impl WorldConfig {
    pub fn desk() -> Self {
        WorldConfig { image_size: 64, d_a: 32, d_p: 8, frame_rate: 25.0 }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One rendered frame with its analytic ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    /// RGB image [3, s, s] in [0,1].
    pub image: Array<f32>,
    /// Lower-face editing mask [1, s, s], binary.
    pub mask: Array<f32>,
    /// Lips-region mask [1, s, s], binary; contained in `mask`.
    pub lips_mask: Array<f32>,
    pub gt_pose: GroundTruthPose,
    pub head: HeadPose,
}

/// A full synthetic clip: frames, audio, and pose tracks of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub identity: IdentitySpec,
    pub frames: Vec<FrameSample>,
    pub audio: AudioTrack,
    /// Per-frame head-pose vectors of width d_p.
    pub head_poses: Vec<Vec<f32>>,
    pub seed: u64,
}

impl ClipSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Smooth bounded head motion: per-axis sinusoids with random amplitude,
/// period (20–80 frames) and phase.
fn head_track(seed: u64, n_frames: usize) -> Vec<HeadPose> {
    let mut rng = sub_rng(seed, "head");
    let mut osc = |amp_lo: f32, amp_hi: f32| {
        let amp = rng.random_range(amp_lo..amp_hi);
        let omega = std::f32::consts::TAU / rng.random_range(20.0..80.0);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        move |t: usize| amp * (omega * t as f32 + phase).sin()
    };
    let fx = osc(0.5, 3.5);
    let fy = osc(0.5, 3.5);
    let fr = osc(0.01, 0.07);
    let fs = osc(0.005, 0.04);
    (0..n_frames)
        .map(|t| HeadPose { tx: fx(t), ty: fy(t), rot: fr(t), scale: 1.0 + fs(t) })
        .collect()
}

/// Generate a clip for an identity. Deterministic in (identity, seed, n).
pub fn synth_clip(
    identity: &IdentitySpec,
    seed: u64,
    n_frames: usize,
    cfg: &WorldConfig,
    opts: &RenderOptions,
) -> Result<ClipSample> {
    if n_frames < 2 {
        return Err(Error::invalid(format!("clip needs at least 2 frames, got {n_frames}")));
    }
    if identity.image_size != cfg.image_size {
        return Err(Error::invalid(format!(
            "identity rendered at {} but world configured for {}",
            identity.image_size, cfg.image_size
        )));
    }
    let audio = synth_audio(seed, n_frames, cfg.d_a, cfg.frame_rate);
    let heads = head_track(seed, n_frames);
    let mut frames = Vec::with_capacity(n_frames);
    let mut head_poses = Vec::with_capacity(n_frames);
    for (t, head) in heads.iter().enumerate() {
        let gt_pose = pose_fn(&audio, t);
        let image = render_face(identity, &gt_pose, head, opts)?;
        let (mask, lips_mask) = make_masks(identity, head)?;
        head_poses.push(head.vector(cfg.d_p)?);
        frames.push(FrameSample { image, mask, lips_mask, gt_pose, head: *head });
    }
    Ok(ClipSample { identity: identity.clone(), frames, audio, head_poses, seed })
}

#[derive(Serialize, Deserialize)]
struct ClipSidecar {
    format: String,
    seed: u64,
    n_frames: usize,
    frame_rate: f32,
    emotion_label: usize,
    identity: IdentitySpec,
    audio_features: Vec<Vec<f32>>,
    gt_poses: Vec<GroundTruthPose>,
    head_poses: Vec<Vec<f32>>,
}

fn png_path(dir: &Path, t: usize) -> std::path::PathBuf {
    dir.join(format!("frame_{t:04}.png"))
}

/// Write a [3, H, W] image in [0,1] as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Array<f32>) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape("save_png", format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let data = img.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push((data[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer length matches dimensions");
    rgb.save(path).map_err(|e| Error::invalid(format!("png write {}: {e}", path.display())))
}

/// Load an 8-bit RGB PNG as a [3, H, W] array in [0,1].
pub fn load_png(path: &Path) -> Result<Array<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("png read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array::zeros(&[3, h, w]);
    let data = out.data_mut();
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Export a clip as PNG frames plus a "synthworld/1" JSON sidecar.
pub fn export_clip(clip: &ClipSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, frame) in clip.frames.iter().enumerate() {
        save_png(&png_path(dir, t), &frame.image)?;
    }
    let sidecar = ClipSidecar {
        format: CLIP_FORMAT.to_string(),
        seed: clip.seed,
        n_frames: clip.frames.len(),
        frame_rate: clip.audio.frame_rate,
        emotion_label: clip.audio.emotion_label,
        identity: clip.identity.clone(),
        audio_features: clip.audio.features.clone(),
        gt_poses: clip.frames.iter().map(|f| f.gt_pose).collect(),
        head_poses: clip.head_poses.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::invalid(format!("sidecar encode: {e}")))?;
    std::fs::write(dir.join("clip.json"), json)?;
    Ok(())
}

/// Import a clip directory written by [`export_clip`]. Masks are recomputed
/// analytically from the identity and head poses; images round-trip through
/// 8-bit quantization.
pub fn import_clip(dir: &Path) -> Result<ClipSample> {
    let raw = std::fs::read_to_string(dir.join("clip.json"))?;
    let sidecar: ClipSidecar =
        serde_json::from_str(&raw).map_err(|e| Error::invalid(format!("sidecar decode: {e}")))?;
    if sidecar.format != CLIP_FORMAT {
        return Err(Error::invalid(format!(
            "unsupported clip format {:?}, expected {CLIP_FORMAT:?}",
            sidecar.format
        )));
    }
    let n = sidecar.n_frames;
    if sidecar.gt_poses.len() != n || sidecar.head_poses.len() != n || sidecar.audio_features.len() != n
    {
        return Err(Error::invalid("sidecar track lengths disagree with n_frames"));
    }
    let audio = AudioTrack {
        features: sidecar.audio_features,
        emotion_label: sidecar.emotion_label,
        frame_rate: sidecar.frame_rate,
    };
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let hp = &sidecar.head_poses[t];
        if hp.len() < 4 {
            return Err(Error::invalid("head pose vector shorter than 4"));
        }
        let head = HeadPose { tx: hp[0], ty: hp[1], rot: hp[2], scale: hp[3] };
        let image = load_png(&png_path(dir, t))?;
        let (mask, lips_mask) = make_masks(&sidecar.identity, &head)?;
        frames.push(FrameSample { image, mask, lips_mask, gt_pose: sidecar.gt_poses[t], head });
    }
    Ok(ClipSample {
        identity: sidecar.identity,
        frames,
        audio,
        head_poses: sidecar.head_poses,
        seed: sidecar.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::identity::synth_identity;

    fn small_clip(seed: u64, n: usize) -> ClipSample {
        let cfg = WorldConfig::desk();
        let id = synth_identity(seed, cfg.image_size);
        synth_clip(&id, seed * 31 + 1, n, &cfg, &RenderOptions::default()).unwrap()
    }

    #[test]
    fn clips_are_bit_identical_per_seed() {
        let a = small_clip(2, 6);
        let b = small_clip(2, 6);
        assert_eq!(a, b);
        let c = small_clip(3, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn tracks_have_equal_length_and_valid_poses() {
        let clip = small_clip(5, 12);
        assert_eq!(clip.frames.len(), 12);
        assert_eq!(clip.audio.len(), 12);
        assert_eq!(clip.head_poses.len(), 12);
        for f in &clip.frames {
            f.gt_pose.validate().unwrap();
            f.head.validate().unwrap();
            for (a, b) in f.lips_mask.data().iter().zip(f.mask.data()) {
                assert!(a <= b, "lips mask leaked outside edit mask");
            }
        }
    }

    #[test]
    fn gt_pose_is_recomputable_from_audio_alone() {
        let clip = small_clip(8, 15);
        for (t, f) in clip.frames.iter().enumerate() {
            assert_eq!(f.gt_pose, pose_fn(&clip.audio, t), "frame {t}");
        }
    }

    #[test]
    fn too_short_clips_are_rejected() {
        let cfg = WorldConfig::desk();
        let id = synth_identity(0, cfg.image_size);
        let err = synth_clip(&id, 0, 1, &cfg, &RenderOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn export_import_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let clip = small_clip(4, 5);
        export_clip(&clip, dir.path()).unwrap();
        let back = import_clip(dir.path()).unwrap();
        assert_eq!(back.identity, clip.identity);
        assert_eq!(back.audio, clip.audio);
        assert_eq!(back.head_poses, clip.head_poses);
        assert_eq!(back.seed, clip.seed);
        for (a, b) in back.frames.iter().zip(&clip.frames) {
            assert_eq!(a.gt_pose, b.gt_pose);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.lips_mask, b.lips_mask);
            let max_err = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-6, "png round trip error {max_err}");
        }
    }

    #[test]
    fn wrong_format_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let clip = small_clip(4, 3);
        export_clip(&clip, dir.path()).unwrap();
        let path = dir.path().join("clip.json");
        let txt = std::fs::read_to_string(&path).unwrap().replace("synthworld/1", "synthworld/9");
        std::fs::write(&path, txt).unwrap();
        assert!(import_clip(dir.path()).is_err());
    }
}
