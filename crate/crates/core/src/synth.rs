//! Synthetic three-class action dataset.
//!
//! A 16-joint skeleton (10 upper, 6 lower) performs one of:
//!
//! * `wave`: arms oscillate vertically, legs still;
//! * `kick`: legs swing forward and back, arms still;
//! * `jump`: the body bobs vertically while knees and ankles lag and the
//!   wrists swing, so both halves move relative to the pelvis.
//!
//! Each clip draws its own phase, amplitude (±20%), frequency (±10%) and
//! length, then gets i.i.d. Gaussian jitter on every sample.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::motion::{
    write_clip, BodyPartition, ClipDescriptor, DatasetManifest, MotionClip, MotionError, Result,
};
use crate::rng;

pub const SKELETON: [&str; 16] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

const REST: [[f64; 3]; 16] = [
    [0.0, 1.0, 0.0],
    [0.0, 1.25, 0.0],
    [0.0, 1.5, 0.0],
    [0.0, 1.7, 0.0],
    [0.2, 1.45, 0.0],
    [0.45, 1.45, 0.0],
    [0.7, 1.45, 0.0],
    [-0.2, 1.45, 0.0],
    [-0.45, 1.45, 0.0],
    [-0.7, 1.45, 0.0],
    [0.1, 0.95, 0.0],
    [0.1, 0.5, 0.0],
    [0.1, 0.05, 0.0],
    [-0.1, 0.95, 0.0],
    [-0.1, 0.5, 0.0],
    [-0.1, 0.05, 0.0],
];

const L_ELBOW: usize = 5;
const L_WRIST: usize = 6;
const R_ELBOW: usize = 8;
const R_WRIST: usize = 9;
const L_KNEE: usize = 11;
const L_ANKLE: usize = 12;
const R_KNEE: usize = 14;
const R_ANKLE: usize = 15;

/// Nominal oscillation period in frames, before the per-clip frequency factor.
pub const BASE_PERIOD: f64 = 20.0;

pub fn partition() -> BodyPartition {
    BodyPartition {
        upper: (0..10).collect(),
        lower: (10..16).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Wave,
    Kick,
    Jump,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Wave, Action::Kick, Action::Jump];

    pub fn label(self) -> &'static str {
        match self {
            Action::Wave => "wave",
            Action::Kick => "kick",
            Action::Jump => "jump",
        }
    }
}

/// Per-clip draw of the motion parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub frames: usize,
    pub phase: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl MotionParams {
    /// Angular frequency in radians per frame.
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency / BASE_PERIOD
    }
}

/// Noise-free joint positions in `f64`, `frames x 16 x 3`.
pub fn render(action: Action, p: &MotionParams) -> Array3<f64> {
    let mut out = Array3::zeros((p.frames, SKELETON.len(), 3));
    let a = p.amplitude;
    for t in 0..p.frames {
        let s = (p.omega() * t as f64 + p.phase).sin();
        for (j, rest) in REST.iter().enumerate() {
            let mut pos = *rest;
            match action {
                Action::Wave => match j {
                    L_ELBOW => pos[1] += 0.15 * a * s,
                    L_WRIST => pos[1] += 0.30 * a * s,
                    R_ELBOW => pos[1] -= 0.15 * a * s,
                    R_WRIST => pos[1] -= 0.30 * a * s,
                    _ => {}
                },
                Action::Kick => match j {
                    L_KNEE => pos[2] += 0.25 * a * s,
                    L_ANKLE => pos[2] += 0.50 * a * s,
                    R_KNEE => pos[2] -= 0.25 * a * s,
                    R_ANKLE => pos[2] -= 0.50 * a * s,
                    _ => {}
                },
                Action::Jump => {
                    pos[1] += match j {
                        L_KNEE | R_KNEE => 0.10 * a * s,
                        L_ANKLE | R_ANKLE => 0.0,
                        L_WRIST | R_WRIST => 0.30 * a * s,
                        _ => 0.20 * a * s,
                    };
                }
            }
            for c in 0..3 {
                out[[t, j, c]] = pos[c];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub clips_per_class: usize,
    /// Inclusive frame-count range.
    pub frames: (usize, usize),
    pub jitter_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            clips_per_class: 30,
            frames: (40, 60),
            jitter_sigma: 0.01,
        }
    }
}

/// Generates every clip in memory, class by class.
pub fn synth_clips(cfg: &SynthConfig) -> Result<Vec<MotionClip>> {
    if cfg.clips_per_class == 0 {
        return Err(MotionError::InvalidClip("clips_per_class must be at least 1".into()));
    }
    let (lo, hi) = cfg.frames;
    if lo < 2 || hi < lo {
        return Err(MotionError::InvalidClip(format!("bad frame range {lo}..={hi}")));
    }
    if !(cfg.jitter_sigma >= 0.0 && cfg.jitter_sigma.is_finite()) {
        return Err(MotionError::InvalidClip("jitter sigma must be finite and >= 0".into()));
    }
    let mut rng = rng::stream(cfg.seed, rng::SYNTH);
    let noise = Normal::new(0.0, cfg.jitter_sigma).expect("sigma validated");
    let mut clips = Vec::with_capacity(3 * cfg.clips_per_class);
    for action in Action::ALL {
        for i in 0..cfg.clips_per_class {
            let params = MotionParams {
                frames: rng.gen_range(lo..=hi),
                phase: rng.gen_range(0.0..2.0 * PI),
                amplitude: rng.gen_range(0.8..1.2),
                frequency: rng.gen_range(0.9..1.1),
            };
            let clean = render(action, &params);
            let data = clean.mapv(|v| (v + noise.sample(&mut rng)) as f32);
            clips.push(MotionClip::new(
                format!("{}_{i:03}", action.label()),
                action.label(),
                data,
            )?);
        }
    }
    Ok(clips)
}

/// Writes clips plus `manifest.json` into `out_dir` and returns the manifest.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let clips = synth_clips(cfg)?;
    fs::create_dir_all(out_dir).map_err(|source| MotionError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut descriptors = Vec::with_capacity(clips.len());
    for clip in &clips {
        let file = PathBuf::from(format!("{}.haad", clip.id));
        write_clip(&out_dir.join(&file), clip)?;
        descriptors.push(ClipDescriptor {
            id: clip.id.clone(),
            label: clip.label.clone(),
            path: file,
            frames: clip.frames(),
            joints: clip.joints(),
            channels: clip.channels(),
        });
    }
    let manifest = DatasetManifest {
        skeleton: SKELETON.iter().map(|s| s.to_string()).collect(),
        partition: partition(),
        clips: descriptors,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.json";
