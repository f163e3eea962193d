//! Deterministic procedural talking-face world.
//!
//! Generates identities, audio-feature tracks, ground-truth mouth poses,
//! head motion, rendered frames, and analytic masks — a fully synthetic
//! stand-in for real talking-head data in which every quantity a model must
//! learn is also available to tests as an exact oracle.

pub mod audio;
pub mod augment;
pub mod clip;
pub mod identity;
pub mod render;

pub use audio::{pose_fn, rest_pose, synth_audio, AudioTrack, GroundTruthPose, N_EMOTIONS};
pub use augment::{apply_image, apply_mask, sample_augment, Augment, Jitter};
pub use clip::{
    export_clip, import_clip, load_png, save_png, synth_clip, ClipSample, FrameSample,
    WorldConfig, CLIP_FORMAT,
};
pub use identity::{synth_identity, EyeParams, IdentitySpec};
pub use render::{
    bilinear_resize, face_coords, inner_mouth_pixels, make_masks, mask_bbox, render_face,
    HeadPose, RenderOptions, INNER_MOUTH_THRESH,
};
