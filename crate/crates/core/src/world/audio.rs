//! Synthetic audio features and the published audio→pose map.
//!
//! Audio features are a per-channel AR(1) process plus an emotion-dependent
//! bias. Ground-truth mouth pose is a fixed deterministic function of the
//! last three audio frames and the emotion label (`pose_fn`), so a model
//! conditioned on causally-windowed audio can learn the mapping, and tests
//! can recompute the exact pose from the track alone.

use crate::error::{Error, Result};
use crate::rng::sub_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Number of emotion classes.
pub const N_EMOTIONS: usize = 7;

/// AR(1) smoothness of the audio feature process.
const AR_RHO: f32 = 0.72;

/// Causal window weights over (a_t, a_{t-1}, a_{t-2}).
const WINDOW_W: [f32; 3] = [0.5, 0.3, 0.2];

/// Ground-truth mouth configuration; the oracle every lips vector must track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPose {
    /// Mouth opening in [0,1]; 0 renders a fully closed mouth.
    pub openness: f32,
    /// Mouth width factor in [0,1].
    pub width: f32,
    /// Jaw drop in [0,1] (shifts the mouth down, widens the opening).
    pub jaw_drop: f32,
    /// Corner curl in [-1,1]; positive = smile.
    pub corner_curl: f32,
}

impl GroundTruthPose {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32, name: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::invalid(format!("pose {name} = {v} outside [0,1]")));
            }
            Ok(())
        };
        unit(self.openness, "openness")?;
        unit(self.width, "width")?;
        unit(self.jaw_drop, "jaw_drop")?;
        if !(-1.0..=1.0).contains(&self.corner_curl) || !self.corner_curl.is_finite() {
            return Err(Error::invalid(format!(
                "pose corner_curl = {} outside [-1,1]",
                self.corner_curl
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.openness, self.width, self.jaw_drop, self.corner_curl]
    }
}

/// Per-frame audio feature track with its emotion label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTrack {
    /// `features[t]` is the d_a-dim feature vector of frame t.
    pub features: Vec<Vec<f32>>,
    pub emotion_label: usize,
    pub frame_rate: f32,
}

impl AudioTrack {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// One-hot emotion probability vector.
    pub fn emotion_one_hot(&self) -> [f32; N_EMOTIONS] {
        let mut e = [0.0; N_EMOTIONS];
        e[self.emotion_label] = 1.0;
        e
    }
}

/// Emotion-dependent bias of audio channel `ch` — a fixed analytic table.
fn emotion_bias(emotion: usize, ch: usize) -> f32 {
    0.9 * (1.7 * (emotion as f32 + 1.0) * (ch as f32 + 1.0) + 0.3 * emotion as f32).sin()
}

/// Per-emotion rest positions and tanh amplitudes for the four pose fields.
const REST_OPEN: [f32; N_EMOTIONS] = [0.22, 0.30, 0.18, 0.38, 0.26, 0.20, 0.34];
const AMP_OPEN: [f32; N_EMOTIONS] = [0.30, 0.38, 0.26, 0.42, 0.34, 0.30, 0.38];
const REST_WIDTH: [f32; N_EMOTIONS] = [0.50, 0.60, 0.42, 0.66, 0.54, 0.46, 0.58];
const AMP_WIDTH: [f32; N_EMOTIONS] = [0.20, 0.24, 0.18, 0.26, 0.22, 0.20, 0.24];
const REST_JAW: [f32; N_EMOTIONS] = [0.18, 0.24, 0.14, 0.30, 0.22, 0.16, 0.26];
const AMP_JAW: [f32; N_EMOTIONS] = [0.26, 0.30, 0.22, 0.32, 0.28, 0.26, 0.30];
const REST_CURL: [f32; N_EMOTIONS] = [0.00, 0.45, -0.40, 0.55, 0.15, -0.25, 0.30];
const AMP_CURL: [f32; N_EMOTIONS] = [0.28, 0.32, 0.28, 0.32, 0.30, 0.28, 0.30];

const GAIN_OPEN: f32 = 1.8;
const GAIN_OTHER: f32 = 1.5;

/// Generate an audio track of `n_frames` with the given feature width.
pub fn synth_audio(seed: u64, n_frames: usize, d_a: usize, frame_rate: f32) -> AudioTrack {
    let mut rng = sub_rng(seed, "audio");
    let emotion_label = rng.random_range(0..N_EMOTIONS);
    let mut state = vec![0.0f32; d_a];
    let innov = (1.0 - AR_RHO * AR_RHO).sqrt();
    let mut features = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        for s in state.iter_mut() {
            let xi: f32 = StandardNormal.sample(&mut rng);
            *s = AR_RHO * *s + innov * xi;
        }
        features.push(
            state
                .iter()
                .enumerate()
                .map(|(ch, &s)| s + emotion_bias(emotion_label, ch))
                .collect(),
        );
    }
    AudioTrack { features, emotion_label, frame_rate }
}

/// Mean of one of the four contiguous channel groups of a feature vector.
fn group_mean(a: &[f32], group: usize) -> f32 {
    let gs = a.len() / 4;
    debug_assert!(gs > 0, "d_a must be at least 4");
    let part = &a[group * gs..(group + 1) * gs];
    part.iter().sum::<f32>() / gs as f32
}

/// The published audio→pose map: pose at frame `t` from the causal window
/// (a_t, a_{t-1}, a_{t-2}) — indices clamped at the clip start — and the
/// emotion label. Zero audio features yield exactly the per-emotion rest
/// pose; the emotion-dependent feature bias shifts poses per emotion.
pub fn pose_fn(audio: &AudioTrack, t: usize) -> GroundTruthPose {
    let e = audio.emotion_label;
    let mut raw = [0.0f32; 4];
    for (j, w) in WINDOW_W.iter().enumerate() {
        let idx = t.saturating_sub(j);
        let frame = &audio.features[idx];
        for (g, r) in raw.iter_mut().enumerate() {
            *r += w * group_mean(frame, g);
        }
    }
    let clamp01 = |v: f32| v.clamp(0.0, 1.0);
    GroundTruthPose {
        openness: clamp01(REST_OPEN[e] + AMP_OPEN[e] * (GAIN_OPEN * raw[0]).tanh()),
        width: clamp01(REST_WIDTH[e] + AMP_WIDTH[e] * (GAIN_OTHER * raw[1]).tanh()),
        jaw_drop: clamp01(REST_JAW[e] + AMP_JAW[e] * (GAIN_OTHER * raw[2]).tanh()),
        corner_curl: (REST_CURL[e] + AMP_CURL[e] * (GAIN_OTHER * raw[3]).tanh()).clamp(-1.0, 1.0),
    }
}

/// Rest pose of an emotion (pose_fn at zero audio).
pub fn rest_pose(emotion: usize) -> GroundTruthPose {
    GroundTruthPose {
        openness: REST_OPEN[emotion],
        width: REST_WIDTH[emotion],
        jaw_drop: REST_JAW[emotion],
        corner_curl: REST_CURL[emotion],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_is_deterministic_per_seed() {
        assert_eq!(synth_audio(3, 8, 16, 25.0), synth_audio(3, 8, 16, 25.0));
        assert_ne!(synth_audio(3, 8, 16, 25.0), synth_audio(4, 8, 16, 25.0));
    }

    #[test]
    fn zero_audio_gives_rest_pose_exactly() {
        for e in 0..N_EMOTIONS {
            let track = AudioTrack {
                features: vec![vec![0.0f32; 16]; 5],
                emotion_label: e,
                frame_rate: 25.0,
            };
            for t in 0..5 {
                let p = pose_fn(&track, t);
                let r = rest_pose(e);
                assert!((p.openness - r.openness).abs() < 1e-6);
                assert!((p.width - r.width).abs() < 1e-6);
                assert!((p.jaw_drop - r.jaw_drop).abs() < 1e-6);
                assert!((p.corner_curl - r.corner_curl).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_is_causal_in_audio() {
        let track = synth_audio(9, 12, 32, 25.0);
        let mut altered = track.clone();
        // Changing a FUTURE frame must not affect the pose at t.
        for v in altered.features[7].iter_mut() {
            *v += 10.0;
        }
        let p0 = pose_fn(&track, 4);
        let p1 = pose_fn(&altered, 4);
        assert_eq!(p0, p1);
        // Changing a frame inside the window must affect it.
        let mut inside = track.clone();
        for v in inside.features[4].iter_mut() {
            *v += 10.0;
        }
        assert_ne!(pose_fn(&track, 4), pose_fn(&inside, 4));
    }

    #[test]
    fn poses_stay_in_range() {
        for seed in 0..50 {
            let track = synth_audio(seed, 20, 32, 25.0);
            for t in 0..track.len() {
                pose_fn(&track, t).validate().unwrap();
            }
        }
    }
}
