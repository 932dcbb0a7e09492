//! Anomaly scores and ROC analysis.
//!
//! Higher scores mean "more anomalous", and anomalous clips are the positive
//! class of the ROC curve.
//!
//! ```
//! use haad::scoring::{roc_auc, ScoreRecord};
//!
//! let rec = |s: f64, normal: bool| ScoreRecord {
//!     clip_id: String::new(),
//!     label: String::new(),
//!     is_normal: normal,
//!     score: s,
//! };
//! let records = [rec(1.0, true), rec(3.0, true), rec(2.0, false), rec(4.0, false)];
//! let (auc, roc) = roc_auc(&records).unwrap();
//! assert_eq!(auc, 0.75);
//! assert_eq!(roc.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
//! assert_eq!(roc.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
//! ```

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};

use crate::motion::{DatasetManifest, MotionClip};
use crate::trainer::{HaadModel, TrainedModel};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 3;

/// Penultimate flow features of the training clips, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    vectors: Array2<f64>,
}

impl FeatureBank {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Config("feature bank must be non-empty".into()));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }
}

/// Mean of the `k` smallest Euclidean distances from `query` to the bank.
/// Equal distances are taken in bank order.
pub fn knn_score(query: ArrayView1<f64>, bank: &FeatureBank, k: usize) -> Result<f64> {
    if k == 0 || k > bank.len() {
        return Err(Error::KOutOfRange { k, bank: bank.len() });
    }
    if query.len() != bank.dim() {
        return Err(Error::Config(format!(
            "query has width {}, bank has {}",
            query.len(),
            bank.dim()
        )));
    }
    let mut dist: Vec<f64> = bank
        .vectors
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    // Stable, so ties keep the lower index first.
    dist.sort_by(f64::total_cmp);
    Ok(dist[..k].iter().sum::<f64>() / k as f64)
}

/// NLL of a clip under the trained model.
pub fn nll_score(clip: &MotionClip, model: &TrainedModel) -> Result<f64> {
    let net = model.network()?;
    Ok(net.evaluate(&model.params, &model.input_for(clip)?)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Knn { k: usize },
    Nll,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::Knn { k: DEFAULT_K }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Knn { .. } => f.write_str("knn"),
            Scheme::Nll => f.write_str("nll"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Scheme::default()),
            "nll" => Ok(Scheme::Nll),
            other => Err(Error::Config(format!("unknown scheme {other:?}, expected knn or nll"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub clip_id: String,
    pub label: String,
    pub is_normal: bool,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Clips scoring at or above this are flagged; the first point uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub records: Vec<ScoreRecord>,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

impl ScoreReport {
    pub fn from_records(records: Vec<ScoreRecord>) -> Result<Self> {
        let (auc, roc) = roc_auc(&records)?;
        Ok(Self { records, roc, auc })
    }
}

/// Scores clips that are already in memory, keeping their order.
pub fn score_clips(clips: &[MotionClip], model: &TrainedModel, scheme: Scheme) -> Result<Vec<ScoreRecord>> {
    let net = model.network()?;
    clips
        .iter()
        .map(|clip| {
            if clip.joints() != model.skeleton.len() || clip.channels() != model.channels {
                return Err(Error::SkeletonMismatch(format!(
                    "clip {} has {} joints x {} channels, model expects {} x {}",
                    clip.id,
                    clip.joints(),
                    clip.channels(),
                    model.skeleton.len(),
                    model.channels
                )));
            }
            let score = score_one(&net, model, clip, scheme)?;
            Ok(ScoreRecord {
                clip_id: clip.id.clone(),
                label: clip.label.clone(),
                is_normal: clip.label == model.normal_label(),
                score,
            })
        })
        .collect()
}

fn score_one(net: &HaadModel, model: &TrainedModel, clip: &MotionClip, scheme: Scheme) -> Result<f64> {
    let (nll, v) = net.evaluate(&model.params, &model.input_for(clip)?)?;
    match scheme {
        Scheme::Nll => Ok(nll),
        Scheme::Knn { k } => knn_score(v.view(), &model.bank, k),
    }
}

/// Scores every clip of a manifest in manifest order.
pub fn score_dataset(manifest: &DatasetManifest, model: &TrainedModel, scheme: Scheme) -> Result<Vec<ScoreRecord>> {
    if manifest.skeleton != model.skeleton || manifest.partition != model.partition {
        return Err(Error::SkeletonMismatch(
            "test manifest skeleton or partition differs from the model's".into(),
        ));
    }
    if let Scheme::Knn { k } = scheme {
        if k == 0 || k > model.bank.len() {
            return Err(Error::KOutOfRange {
                k,
                bank: model.bank.len(),
            });
        }
    }
    let clips = manifest
        .clips
        .iter()
        .map(|c| manifest.read_clip(c).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    score_clips(&clips, model, scheme)
}

/// ROC curve and its trapezoidal area, sweeping distinct scores from high to low.
pub fn roc_auc(records: &[ScoreRecord]) -> Result<(f64, Vec<RocPoint>)> {
    let pos = records.iter().filter(|r| !r.is_normal).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::NonFinite(format!("score of {}", r.clip_id)));
    }
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].is_normal {
                fp += 1;
            } else {
                tp += 1;
            }
            i += 1;
        }
        let prev = *roc.last().expect("seeded with origin");
        let p = RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        roc.push(p);
    }
    Ok((auc, roc))
}

pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    Ok(roc_auc(records)?.0)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `clip_id,label,is_normal,score`.
pub fn write_scores_csv(mut w: impl Write, records: &[ScoreRecord]) -> std::io::Result<()> {
    writeln!(w, "clip_id,label,is_normal,score")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.clip_id, r.label, u8::from(r.is_normal), r.score)?;
    }
    Ok(())
}

/// `threshold,fpr,tpr`.
pub fn write_roc_csv(mut w: impl Write, roc: &[RocPoint]) -> std::io::Result<()> {
    writeln!(w, "threshold,fpr,tpr")?;
    for p in roc {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

pub fn save_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, records).map_err(io_err(path))?;
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn save_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    let mut buf = Vec::new();
    write_roc_csv(&mut buf, roc).map_err(io_err(path))?;
    std::fs::write(path, buf).map_err(io_err(path))
}
