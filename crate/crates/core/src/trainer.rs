//! One-class training and the model file.
//!
//! Only clips carrying the normal label are read. They are split once into a
//! fit set and a monitoring holdout; each step runs every clip of a batch
//! through its own graph path, averages the NLLs and takes one Adam step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Binding, Graph, ParamStore};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput};
use crate::flow::{nll, FlowConfig, FlowNetwork, FlowOutput, PreparedFlow};
use crate::motion::{BodyPartition, DatasetManifest, MotionClip};
use crate::rng;
use crate::scoring::FeatureBank;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub normal_label: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            normal_label: String::new(),
            epochs: 50,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-5,
            seed: 1,
            adam: AdamConfig::default(),
            encoder: EncoderConfig::default(),
            flow: FlowConfig::default(),
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return Err(Error::Config("need 0 < lr_end <= lr_start".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
        }
        self.encoder.validate()
    }
}

/// `lr_start·(lr_end/lr_start)^(e/epochs)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch == 0 {
        return config.lr_start;
    }
    if epoch >= config.epochs {
        return config.lr_end;
    }
    let t = epoch as f64 / config.epochs as f64;
    config.lr_start * (config.lr_end / config.lr_start).powf(t)
}

/// Bias-corrected Adam over a named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Array2<f64>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Array2<f64>> {
        self.v.get(name)
    }

    /// Parameters without a gradient entry are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(gr) = grads.get(name) {
                if gr.dim() != p.dim() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adam",
                        lhs: p.dim(),
                        rhs: gr.dim(),
                    }
                    .into());
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(gr) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(gr)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Encoder plus flow, sized for one skeleton layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HaadModel {
    pub encoder: Encoder,
    pub flow: FlowNetwork,
}

impl HaadModel {
    pub fn new(config: &TrainConfig, partition: &BodyPartition, channels: usize) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone(), partition, channels)?;
        let flow = FlowNetwork::new(config.encoder.fuse_dim, &config.flow)?;
        Ok(Self { encoder, flow })
    }

    /// Every parameter name and shape, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut all = self.encoder.param_shapes();
        all.extend(self.flow.param_shapes());
        all.sort();
        all
    }

    pub fn init_params(&self, seed: u64, slope_init: f64) -> Result<ParamStore> {
        let mut rng = rng::stream(seed, rng::INIT);
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, &mut rng)?;
        self.flow.init_params(&mut store, &mut rng, slope_init)?;
        Ok(store)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        flow: &PreparedFlow,
        input: &EncoderInput,
    ) -> Result<FlowOutput> {
        let feats = self.encoder.forward(g, b, input)?;
        self.flow.forward_prepared(g, flow, feats.all)
    }

    /// NLL and penultimate feature of one clip under frozen parameters.
    pub fn evaluate(&self, params: &ParamStore, input: &EncoderInput) -> Result<(f64, Array1<f64>)> {
        let mut g = Graph::new();
        let b = g.bind_frozen(params);
        let prepared = self.flow.prepare(&mut g, &b)?;
        let out = self.forward(&mut g, &b, &prepared, input)?;
        let loss = nll(&mut g, &out);
        Ok((g.scalar(loss), g.value(out.v).column(0).to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub holdout_nll: Option<f64>,
}

/// Everything needed to score new clips.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub skeleton: Vec<String>,
    pub partition: BodyPartition,
    pub channels: usize,
    pub params: ParamStore,
    pub bank: FeatureBank,
    pub history: Vec<EpochStats>,
    pub final_train_nll: f64,
}

impl TrainedModel {
    pub fn network(&self) -> Result<HaadModel> {
        HaadModel::new(&self.config, &self.partition, self.channels)
    }

    pub fn normal_label(&self) -> &str {
        &self.config.normal_label
    }

    pub fn input_for(&self, clip: &MotionClip) -> Result<EncoderInput> {
        EncoderInput::from_clip(clip, &self.partition, self.config.encoder.dct_coeffs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_model(self)?;
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        decode_model(&bytes)
    }
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path)
}

/// Trains on the manifest's clips with `config.normal_label`.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainedModel> {
    train_with(manifest, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    let clips = manifest
        .clips
        .iter()
        .filter(|c| c.label == config.normal_label)
        .map(|c| manifest.read_clip(c).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() && !manifest.clips.iter().any(|c| c.label == config.normal_label) {
        return Err(Error::LabelNotFound(config.normal_label.clone()));
    }
    train_clips(&manifest.skeleton, &manifest.partition, &clips, config, on_epoch)
}

/// Trains on in-memory clips; clips with other labels are ignored.
pub fn train_clips(
    skeleton: &[String],
    partition: &BodyPartition,
    clips: &[MotionClip],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    config.validate()?;
    let normal: Vec<&MotionClip> = clips
        .iter()
        .filter(|c| c.label == config.normal_label)
        .collect();
    if normal.is_empty() {
        return Err(Error::LabelNotFound(config.normal_label.clone()));
    }
    if normal.len() < 2 {
        return Err(Error::InsufficientNormal {
            label: config.normal_label.clone(),
            found: normal.len(),
        });
    }
    let channels = normal[0].channels();
    partition.validate(normal[0].joints())?;
    let inputs = normal
        .iter()
        .map(|c| EncoderInput::from_clip(c, partition, config.encoder.dct_coeffs))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, rng::SPLIT));
    let n_hold = (inputs.len() as f64 * config.holdout_fraction).floor() as usize;
    let mut holdout = order[..n_hold].to_vec();
    let mut fit = order[n_hold..].to_vec();
    holdout.sort_unstable();
    fit.sort_unstable();

    let model = HaadModel::new(config, partition, channels)?;
    let mut params = model.init_params(config.seed, config.flow.slope_init)?;
    let mut adam = Adam::new(config.adam);
    let mut shuffle_rng = rng::stream(config.seed, rng::SHUFFLE);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = lr_at(epoch - 1, config);
        let mut batch_order = fit.clone();
        batch_order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (step, batch) in batch_order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let b = g.bind(&params);
            let prepared = model.flow.prepare(&mut g, &b)?;
            let mut sum = None;
            for &i in batch {
                let out = model.forward(&mut g, &b, &prepared, &inputs[i])?;
                let l = nll(&mut g, &out);
                sum = Some(match sum {
                    Some(s) => g.add(s, l)?,
                    None => l,
                });
            }
            let sum = sum.expect("chunks are non-empty");
            let batch_sum = g.scalar(sum);
            if !batch_sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                });
            }
            total += batch_sum;
            let loss = g.scale(sum, 1.0 / batch.len() as f64);
            g.backward(loss)?;
            adam.update(&mut params, &b.grads(&g), lr)?;
        }
        let holdout_nll = if holdout.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for &i in &holdout {
                s += model.evaluate(&params, &inputs[i])?.0;
            }
            Some(s / holdout.len() as f64)
        };
        let stats = EpochStats {
            epoch,
            lr,
            train_nll: total / fit.len() as f64,
            holdout_nll,
        };
        log::debug!("epoch {epoch}: train nll {}", stats.train_nll);
        on_epoch(&stats);
        history.push(stats);
    }

    let mut bank = Array2::zeros((fit.len(), model.flow.dim));
    let mut final_nll = 0.0;
    for (row, &i) in fit.iter().enumerate() {
        let (l, v) = model.evaluate(&params, &inputs[i])?;
        final_nll += l;
        bank.row_mut(row).assign(&v);
    }
    Ok(TrainedModel {
        config: config.clone(),
        skeleton: skeleton.to_vec(),
        partition: partition.clone(),
        channels,
        params,
        bank: FeatureBank::new(bank)?,
        history,
        final_train_nll: final_nll / fit.len() as f64,
    })
}

pub const MODEL_MAGIC: &[u8; 8] = b"HAADMDL1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: TrainConfig,
    skeleton: Vec<String>,
    partition: BodyPartition,
    channels: usize,
    params: Vec<ParamEntry>,
    bank: [usize; 2],
    history: Vec<EpochStats>,
    final_train_nll: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

/// `HAADMDL1`, u32 LE header length, JSON header, f64 LE parameters in
/// header order, then the feature bank row-major.
pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        config: model.config.clone(),
        skeleton: model.skeleton.clone(),
        partition: model.partition.clone(),
        channels: model.channels,
        params: model
            .params
            .iter()
            .map(|(n, p)| ParamEntry {
                name: n.to_string(),
                shape: [p.nrows(), p.ncols()],
            })
            .collect(),
        bank: [model.bank.len(), model.bank.dim()],
        history: model.history.clone(),
        final_train_nll: model.final_train_nll,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * (model.params.scalar_count() + model.bank.vectors().len()));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in model.bank.vectors().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn truncated() -> Error {
    Error::ModelFormat("truncated model".into())
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 8 {
        return Err(truncated());
    }
    if &bytes[..8] != MODEL_MAGIC {
        if &bytes[..7] == &MODEL_MAGIC[..7] {
            return Err(Error::ModelFormat(format!(
                "version mismatch: file has {}, expected 1",
                bytes[7] as char
            )));
        }
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let len_bytes: [u8; 4] = bytes.get(8..12).ok_or_else(truncated)?.try_into().unwrap();
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(truncated)?;
    let header: ModelHeader =
        serde_json::from_slice(json).map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;

    let net = HaadModel::new(&header.config, &header.partition, header.channels)?;
    let expected: Vec<ParamEntry> = net
        .param_shapes()
        .into_iter()
        .map(|(name, (r, c))| ParamEntry { name, shape: [r, c] })
        .collect();
    if expected != header.params {
        return Err(Error::ModelFormat(format!(
            "parameter-count mismatch: header lists {} tensors, config implies {}",
            header.params.len(),
            expected.len()
        )));
    }
    if header.bank[1] != net.flow.dim || header.bank[0] == 0 {
        return Err(Error::ModelFormat(format!(
            "bank shape {:?} does not fit flow width {}",
            header.bank, net.flow.dim
        )));
    }

    let mut floats = bytes[12 + len..].chunks(8);
    let mut next = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| match floats.next() {
                Some(c) if c.len() == 8 => Ok(f64::from_le_bytes(c.try_into().unwrap())),
                _ => Err(truncated()),
            })
            .collect()
    };
    let mut params = ParamStore::new();
    for entry in &header.params {
        let [r, c] = entry.shape;
        let data = next(r * c)?;
        params.insert(entry.name.clone(), Array2::from_shape_vec((r, c), data).unwrap())?;
    }
    let [n, d] = header.bank;
    let bank = Array2::from_shape_vec((n, d), next(n * d)?).unwrap();
    if floats.next().is_some() {
        return Err(Error::ModelFormat("trailing bytes after feature bank".into()));
    }
    Ok(TrainedModel {
        config: header.config,
        skeleton: header.skeleton,
        partition: header.partition,
        channels: header.channels,
        params,
        bank: FeatureBank::new(bank)?,
        history: header.history,
        final_train_nll: header.final_train_nll,
    })
}
