//! Motion clips, dataset manifests, body partitions and the clip codec.
//!
//! Clip files are little-endian:
//!
//! | bytes   | content                                  |
//! |---------|------------------------------------------|
//! | 0..4    | ASCII `HAAD`                             |
//! | 4..8    | format version, `u32` = 1                |
//! | 8..20   | frames, joints, channels as `u32`        |
//! | 20..    | `f32` samples, frame-major, joint-major, channel-minor |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLIP_MAGIC: &[u8; 4] = b"HAAD";
pub const CLIP_VERSION: u32 = 1;
const CLIP_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("partition overlap at joint {0}")]
    PartitionOverlap(usize),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("bad magic in clip file")]
    BadMagic,
    #[error("unsupported clip version {0}")]
    Version(u32),
    #[error("truncated clip: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite sample at frame {frame}, joint {joint}, channel {channel}")]
    NonFinite {
        frame: usize,
        joint: usize,
        channel: usize,
    },
    #[error("clip {id}: dimension mismatch, manifest says {expected:?}, file has {found:?}")]
    DimensionMismatch {
        id: String,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}

pub type Result<T> = std::result::Result<T, MotionError>;

/// One skeletal sequence, `frames x joints x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub id: String,
    pub label: String,
    data: Array3<f32>,
}

impl MotionClip {
    pub fn new(id: impl Into<String>, label: impl Into<String>, data: Array3<f32>) -> Result<Self> {
        let (h, j, c) = data.dim();
        if h < 2 || j < 2 || !(c == 3 || c == 6) {
            return Err(MotionError::InvalidClip(format!(
                "need frames >= 2, joints >= 2, channels in {{3, 6}}; got {h}x{j}x{c}"
            )));
        }
        if let Some(((frame, joint, channel), _)) =
            data.indexed_iter().find(|(_, v)| !v.is_finite())
        {
            return Err(MotionError::NonFinite {
                frame,
                joint,
                channel,
            });
        }
        Ok(Self {
            id: id.into(),
            label: label.into(),
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Pose dimension `joints * channels`.
    pub fn pose_dim(&self) -> usize {
        self.joints() * self.channels()
    }
}

pub fn encode_clip(clip: &MotionClip) -> Vec<u8> {
    let (h, j, c) = clip.data.dim();
    let mut out = Vec::with_capacity(CLIP_HEADER_LEN + 4 * h * j * c);
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in [h, j, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in clip.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_clip(id: &str, label: &str, bytes: &[u8]) -> Result<MotionClip> {
    if bytes.len() < CLIP_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != CLIP_MAGIC {
            return Err(MotionError::BadMagic);
        }
        return Err(MotionError::Truncated {
            expected: CLIP_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(MotionError::BadMagic);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CLIP_VERSION {
        return Err(MotionError::Version(version));
    }
    let (h, j, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let expected = CLIP_HEADER_LEN + 4 * h * j * c;
    if bytes.len() < expected {
        return Err(MotionError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes[CLIP_HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let data = Array3::from_shape_vec((h, j, c), values).expect("length checked");
    MotionClip::new(id, label, data)
}

pub fn write_clip(path: &Path, clip: &MotionClip) -> Result<()> {
    fs::write(path, encode_clip(clip)).map_err(|source| MotionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Upper/lower split of the skeleton's joints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartition {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl BodyPartition {
    /// Checks that the two sets are non-empty, disjoint and cover `0..joints`.
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.upper.is_empty() || self.lower.is_empty() {
            return Err(MotionError::Partition("upper and lower must be non-empty".into()));
        }
        let mut seen = vec![false; joints];
        for &j in self.upper.iter().chain(&self.lower) {
            if j >= joints {
                return Err(MotionError::Partition(format!(
                    "joint {j} out of range for {joints} joints"
                )));
            }
            if seen[j] {
                return Err(MotionError::PartitionOverlap(j));
            }
            seen[j] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(MotionError::Partition(format!("joint {missing} is in neither set")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDescriptor {
    pub id: String,
    pub label: String,
    pub path: PathBuf,
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub skeleton: Vec<String>,
    pub partition: BodyPartition,
    pub clips: Vec<ClipDescriptor>,
    /// Directory that relative clip paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn joints(&self) -> usize {
        self.skeleton.len()
    }

    /// Channel count shared by every clip, if there are any.
    pub fn channels(&self) -> Option<usize> {
        self.clips.first().map(|c| c.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let joints = self.joints();
        if joints < 2 {
            return Err(MotionError::Manifest("skeleton needs at least 2 joints".into()));
        }
        self.partition.validate(joints)?;
        let channels = self.channels();
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.clips {
            if c.label.is_empty() {
                return Err(MotionError::Manifest(format!("clip {} has an empty label", c.id)));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(MotionError::Manifest(format!("duplicate clip id {}", c.id)));
            }
            if c.joints != joints {
                return Err(MotionError::Manifest(format!(
                    "clip {} has {} joints, skeleton has {joints}",
                    c.id, c.joints
                )));
            }
            if Some(c.channels) != channels || !(c.channels == 3 || c.channels == 6) {
                return Err(MotionError::Manifest(format!(
                    "clip {} has {} channels; all clips must share 3 or 6",
                    c.id, c.channels
                )));
            }
            if c.frames < 2 {
                return Err(MotionError::Manifest(format!("clip {} has fewer than 2 frames", c.id)));
            }
        }
        Ok(())
    }

    pub fn clip_path(&self, desc: &ClipDescriptor) -> PathBuf {
        if desc.path.is_absolute() {
            desc.path.clone()
        } else {
            self.base_dir.join(&desc.path)
        }
    }

    /// Reads and checks one clip against its descriptor.
    pub fn read_clip(&self, desc: &ClipDescriptor) -> Result<MotionClip> {
        let path = self.clip_path(desc);
        let bytes = fs::read(&path).map_err(|source| MotionError::Io {
            path: path.clone(),
            source,
        })?;
        let clip = decode_clip(&desc.id, &desc.label, &bytes)?;
        let found = clip.data.dim();
        let expected = (desc.frames, desc.joints, desc.channels);
        if found != expected {
            return Err(MotionError::DimensionMismatch {
                id: desc.id.clone(),
                expected,
                found,
            });
        }
        Ok(clip)
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.clips {
            if !out.contains(&c.label.as_str()) {
                out.push(&c.label);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|source| MotionError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let mut f = fs::File::create(path).map_err(|source| MotionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(json.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|source| MotionError::Io {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Parses and validates a manifest. Clip files are not opened.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|source| MotionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| MotionError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

/// Flattens a clip to a `P x H` trajectory matrix, row `p` holding joint
/// `p / channels`, channel `p % channels`. Coordinate clips are made relative
/// to joint 0 first.
pub fn preprocess(clip: &MotionClip) -> Array2<f64> {
    let (h, j, c) = clip.data.dim();
    let center = c == 3;
    Array2::from_shape_fn((j * c, h), |(p, t)| {
        let (joint, ch) = (p / c, p % c);
        let v = clip.data[[t, joint, ch]] as f64;
        if center {
            v - clip.data[[t, 0, ch]] as f64
        } else {
            v
        }
    })
}

/// Splits trajectory rows by body part, keeping the partition's joint order.
pub fn split_parts(
    traj: &Array2<f64>,
    partition: &BodyPartition,
    channels: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let joints = traj.nrows() / channels;
    let take = |idx: &[usize]| -> Result<Array2<f64>> {
        if let Some(&bad) = idx.iter().find(|&&j| j >= joints) {
            return Err(MotionError::Partition(format!(
                "joint {bad} out of range for {joints} joints"
            )));
        }
        let rows: Vec<usize> = idx
            .iter()
            .flat_map(|&j| (0..channels).map(move |c| j * channels + c))
            .collect();
        Ok(traj.select(ndarray::Axis(0), &rows))
    };
    Ok((take(&partition.upper)?, take(&partition.lower)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip_4x2x3() -> MotionClip {
        let data = Array3::from_shape_fn((4, 2, 3), |(h, j, c)| (h * 6 + j * 3 + c) as f32 * 0.5);
        MotionClip::new("c0", "wave", data).unwrap()
    }

    #[test]
    fn codec_reads_header_dimensions() {
        let bytes = encode_clip(&clip_4x2x3());
        assert_eq!(&bytes[..4], b"HAAD");
        assert_eq!(bytes.len(), 20 + 24 * 4);
        let c = decode_clip("c0", "wave", &bytes).unwrap();
        assert_eq!(c.data().dim(), (4, 2, 3));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode_clip(&clip_4x2x3());
        let err = decode_clip("c0", "wave", &bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().starts_with("truncated clip"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_clip(&clip_4x2x3());
        bytes[0] = b'X';
        assert!(matches!(decode_clip("c", "l", &bytes), Err(MotionError::BadMagic)));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode_clip(&clip_4x2x3());
        bytes[20 + 4 * 7..20 + 4 * 8].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_clip("c", "l", &bytes).unwrap_err();
        assert!(err.to_string().starts_with("non-finite sample"), "{err}");
    }

    #[test]
    fn partition_overlap_detected() {
        let p = BodyPartition {
            upper: vec![0, 1, 5],
            lower: vec![2, 3, 4, 5],
        };
        let err = p.validate(6).unwrap_err();
        assert_eq!(err.to_string(), "partition overlap at joint 5");
    }

    #[test]
    fn partition_must_cover_all_joints() {
        let p = BodyPartition {
            upper: vec![0],
            lower: vec![2],
        };
        assert!(p.validate(3).is_err());
    }

    #[test]
    fn preprocess_centres_on_root() {
        let data = Array3::from_shape_fn((5, 3, 3), |(h, _, c)| (h + c) as f32);
        let clip = MotionClip::new("a", "b", data).unwrap();
        assert!(preprocess(&clip).iter().all(|&v| v == 0.0));
        assert_eq!(preprocess(&clip_4x2x3()).dim(), (6, 4));
    }

    #[test]
    fn rotation_clips_are_not_centred() {
        let data = Array3::from_shape_fn((2, 2, 6), |(h, j, c)| (h * 12 + j * 6 + c) as f32);
        let clip = MotionClip::new("r", "x", data).unwrap();
        let x = preprocess(&clip);
        assert_eq!(x.dim(), (12, 2));
        assert_eq!(x[[7, 1]], 19.0);
    }

    #[test]
    fn split_single_joint_parts() {
        let x = preprocess(&clip_4x2x3());
        let p = BodyPartition {
            upper: vec![0],
            lower: vec![1],
        };
        let (up, low) = split_parts(&x, &p, 3).unwrap();
        assert_eq!(up, x.slice(ndarray::s![0..3, ..]).to_owned());
        assert_eq!(low, x.slice(ndarray::s![3..6, ..]).to_owned());
        let bad = BodyPartition {
            upper: vec![0],
            lower: vec![2],
        };
        assert!(split_parts(&x, &bad, 3).is_err());
    }

    #[test]
    fn uestc_style_split_sizes() {
        let x = Array2::<f64>::zeros((25 * 6, 8));
        let p = BodyPartition {
            upper: (0..17).collect(),
            lower: (17..25).collect(),
        };
        p.validate(25).unwrap();
        let (up, low) = split_parts(&x, &p, 6).unwrap();
        assert_eq!((up.nrows(), low.nrows()), (102, 48));
    }

    fn arb_clip() -> impl Strategy<Value = MotionClip> {
        (2usize..6, 2usize..5, prop_oneof![Just(3usize), Just(6usize)]).prop_flat_map(|(h, j, c)| {
            proptest::collection::vec(-1e3f32..1e3, h * j * c).prop_map(move |v| {
                MotionClip::new("p", "q", Array3::from_shape_vec((h, j, c), v).unwrap()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn codec_round_trip_is_bit_exact(clip in arb_clip()) {
            let back = decode_clip("p", "q", &encode_clip(&clip)).unwrap();
            prop_assert_eq!(back.data().dim(), clip.data().dim());
            for (a, b) in back.data().iter().zip(clip.data().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn centring_is_translation_invariant(
            clip in arb_clip(),
            shift in proptest::array::uniform3(-50i32..50),
        ) {
            prop_assume!(clip.channels() == 3);
            let moved = clip.data().mapv(|v| v) + &ndarray::Array1::from(
                shift.iter().map(|&s| s as f32).collect::<Vec<_>>(),
            );
            let moved = MotionClip::new("p", "q", moved).unwrap();
            let (a, b) = (preprocess(&clip), preprocess(&moved));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-3 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn split_is_a_row_partition(j in 2usize..8, cut in 1usize..7) {
            prop_assume!(cut < j);
            let x = Array2::from_shape_fn((j * 3, 4), |(r, c)| (r * 4 + c) as f64);
            let p = BodyPartition { upper: (0..cut).collect(), lower: (cut..j).collect() };
            let (up, low) = split_parts(&x, &p, 3).unwrap();
            let joined = ndarray::concatenate(ndarray::Axis(0), &[up.view(), low.view()]).unwrap();
            prop_assert_eq!(joined, x);
        }
    }
}
