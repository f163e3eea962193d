//! Run configuration: one flat key=value file drives every stage.
//!
//! A configuration plus the code version fully determines a run, so every
//! tunable lives here and serializes losslessly. Values come from four
//! layers, each overriding the previous: built-in desk defaults, the
//! `FLASHLIPS_PROFILE` environment variable, the config file, and explicit
//! `key=value` overrides (CLI flags).

use crate::error::{Error, Result};
use crate::stage1::BackboneKind;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Scale preset: `Desk` trains on a CPU in minutes; `Paper` carries the
/// published model dimensions (used for audits and dumps, not training).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid(format!("unknown profile '{other}' (desk|paper)"))),
        }
    }
}

/// Everything a full pipeline run needs. Field-by-field serializable to a
/// flat key=value file; see [`RunConfig::KEYS`] for the documented keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Directory for checkpoints, reports, and rendered frames.
    pub out_dir: PathBuf,
    /// Training-world size: identities (one clip each) and frames per clip.
    pub n_identities: usize,
    pub frames_per_clip: usize,
    /// Held-out evaluation world: clip count and frames per clip.
    pub eval_clips: usize,
    pub eval_frames: usize,
    pub codec_iters: u64,
    pub lips_iters: u64,
    pub proxy_iters: u64,
    pub recon_iters: u64,
    pub refine_iters: u64,
    pub distill_iters: u64,
    pub fm_iters: u64,
    /// Reference lips vectors fed to the flow model.
    pub fm_refs: usize,
    /// Euler steps used when sampling pose trajectories.
    pub sample_steps: usize,
    pub backbone: BackboneKind,
    /// Print training progress to stderr.
    pub progress: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 7,
            out_dir: PathBuf::from("artifacts"),
            n_identities: 12,
            frames_per_clip: 40,
            eval_clips: 20,
            eval_frames: 24,
            codec_iters: 2900,
            lips_iters: 2600,
            proxy_iters: 2500,
            recon_iters: 3000,
            refine_iters: 1200,
            distill_iters: 1400,
            fm_iters: 3000,
            fm_refs: 4,
            sample_steps: 10,
            backbone: BackboneKind::Unet,
            progress: false,
        }
    }
}

impl RunConfig {
    /// The documented key set, in serialization order.
    pub const KEYS: [&'static str; 18] = [
        "profile",
        "seed",
        "out_dir",
        "world.identities",
        "world.frames",
        "eval.clips",
        "eval.frames",
        "codec.iters",
        "lips.iters",
        "proxy.iters",
        "stage1.backbone",
        "stage1.recon_iters",
        "stage1.refine_iters",
        "distill.iters",
        "stage2.iters",
        "stage2.refs",
        "stage2.sample_steps",
        "progress",
    ];

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad value '{v}' for key '{key}'")))
        }
        let value = value.trim();
        match key {
            "profile" => self.profile = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "world.identities" => self.n_identities = num(key, value)?,
            "world.frames" => self.frames_per_clip = num(key, value)?,
            "eval.clips" => self.eval_clips = num(key, value)?,
            "eval.frames" => self.eval_frames = num(key, value)?,
            "codec.iters" => self.codec_iters = num(key, value)?,
            "lips.iters" => self.lips_iters = num(key, value)?,
            "proxy.iters" => self.proxy_iters = num(key, value)?,
            "stage1.backbone" => self.backbone = value.parse()?,
            "stage1.recon_iters" => self.recon_iters = num(key, value)?,
            "stage1.refine_iters" => self.refine_iters = num(key, value)?,
            "distill.iters" => self.distill_iters = num(key, value)?,
            "stage2.iters" => self.fm_iters = num(key, value)?,
            "stage2.refs" => self.fm_refs = num(key, value)?,
            "stage2.sample_steps" => self.sample_steps = num(key, value)?,
            "progress" => self.progress = num(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a flat key=value document into `self`. Blank lines and lines
    /// starting with `#` are ignored; later assignments win.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Serialize every field as `key=value` lines, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "profile={}", self.profile);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "out_dir={}", self.out_dir.display());
        let _ = writeln!(out, "world.identities={}", self.n_identities);
        let _ = writeln!(out, "world.frames={}", self.frames_per_clip);
        let _ = writeln!(out, "eval.clips={}", self.eval_clips);
        let _ = writeln!(out, "eval.frames={}", self.eval_frames);
        let _ = writeln!(out, "codec.iters={}", self.codec_iters);
        let _ = writeln!(out, "lips.iters={}", self.lips_iters);
        let _ = writeln!(out, "proxy.iters={}", self.proxy_iters);
        let _ = writeln!(out, "stage1.backbone={}", self.backbone);
        let _ = writeln!(out, "stage1.recon_iters={}", self.recon_iters);
        let _ = writeln!(out, "stage1.refine_iters={}", self.refine_iters);
        let _ = writeln!(out, "distill.iters={}", self.distill_iters);
        let _ = writeln!(out, "stage2.iters={}", self.fm_iters);
        let _ = writeln!(out, "stage2.refs={}", self.fm_refs);
        let _ = writeln!(out, "stage2.sample_steps={}", self.sample_steps);
        let _ = writeln!(out, "progress={}", self.progress);
        out
    }

    /// Build a configuration from the four layers: defaults, the
    /// `FLASHLIPS_PROFILE` environment fallback, an optional config file,
    /// and explicit overrides (in that order; later layers win).
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Ok(profile) = std::env::var("FLASHLIPS_PROFILE") {
            if !profile.is_empty() {
                cfg.profile = profile.parse()?;
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::invalid(format!("cannot read config '{}': {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.frames_per_clip < 2 {
            return Err(Error::invalid("world needs >= 1 identity and >= 2 frames per clip"));
        }
        if self.eval_clips == 0 || self.eval_frames < 2 {
            return Err(Error::invalid("evaluation needs >= 1 clip and >= 2 frames per clip"));
        }
        if self.fm_refs == 0 {
            return Err(Error::invalid("stage2.refs must be >= 1"));
        }
        if self.sample_steps == 0 {
            return Err(Error::invalid("stage2.sample_steps must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_every_field() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.backbone = BackboneKind::Transformer;
        cfg.fm_refs = 8;
        cfg.out_dir = PathBuf::from("/tmp/somewhere");
        cfg.progress = true;
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_blanks_and_later_overrides_are_handled() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\nseed=3\nseed = 4\n  stage2.refs = 16  \n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.fm_refs, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no.such.key", "1").is_err());
        assert!(cfg.set("seed", "banana").is_err());
        assert!(cfg.set("stage1.backbone", "resnet").is_err());
        assert!(cfg.apply_text("just a line without equals\n").is_err());
    }

    #[test]
    fn layering_puts_overrides_above_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed=11\nstage2.refs=8\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[("seed".to_string(), "12".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 12);
        assert_eq!(cfg.fm_refs, 8);
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.sample_steps = 0;
        assert!(cfg.validate().is_err());
        cfg = RunConfig::default();
        cfg.frames_per_clip = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn profiles_parse_and_print() {
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
        assert_eq!(Profile::Paper.to_string(), "paper");
        assert!("gpu".parse::<Profile>().is_err());
    }
}
