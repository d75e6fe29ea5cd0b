use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{DropoutMasks, MilError, MilModel, Nonlinearity, Params, Prediction, ATTENTION_DIM, PARAM_NAMES};
use super::optim::{cosine_lr, AdamW};
use super::Result;
use crate::encoder::ADAPTER_DIM;
use crate::preprocess::AugmentConfig;
use crate::rng::{derive_seed, stream, Rng};
use crate::store::{Checkpoint, FeatureBag, NamedTensor, PatchCoord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Samples whose gradients are averaged before each optimizer step.
    pub grad_accum: usize,
    /// Fraction of instances kept per plane or cuboid slab at each step.
    pub patch_sample_rate: f64,
    pub dropout: f64,
    /// Also drop units of the gated attention hidden layer.
    pub attention_dropout: bool,
    /// Z-score features with training statistics, folded into `W_enc` and
    /// `b_enc` after training so the model consumes raw features.
    pub standardize_features: bool,
    /// Applied only when training straight from volumes.
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr0: 2e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            grad_accum: 10,
            patch_sample_rate: 0.5,
            dropout: 0.5,
            attention_dropout: true,
            standardize_features: true,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MilError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.grad_accum == 0 {
            return bad("grad_accum must be at least 1".into());
        }
        if !(self.patch_sample_rate > 0.0 && self.patch_sample_rate <= 1.0) {
            return bad(format!("patch_sample_rate {} is outside (0, 1]", self.patch_sample_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if !(self.lr0 > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr0 {
            return bad("need 0 <= lr_min <= lr0 and lr0 > 0".into());
        }
        Ok(())
    }
}

/// First 8 bytes (little endian) of the SHA-256 of the JSON-encoded value.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub optimizer_steps: u64,
}

/// Keep `max(1, round(rate * n))` instances from every group sharing a depth
/// origin; the returned indices are ascending.
pub fn stratified_subsample(coords: &[PatchCoord], rate: f64, rng: &mut Rng) -> Vec<usize> {
    if rate >= 1.0 {
        return (0..coords.len()).collect();
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, c) in coords.iter().enumerate() {
        groups.entry(c.origin[0]).or_default().push(j);
    }
    let mut out = Vec::with_capacity((coords.len() as f64 * rate).ceil() as usize + groups.len());
    for members in groups.values() {
        let take = ((rate * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend(index::sample(rng, members.len(), take).into_iter().map(|i| members[i]));
    }
    out.sort_unstable();
    out
}

struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    fn fit(mats: &[Array2<f64>], k: usize) -> Self {
        let n: usize = mats.iter().map(|m| m.nrows()).sum();
        let mut mean = Array1::zeros(k);
        for m in mats {
            mean += &m.sum_axis(Axis(0));
        }
        mean /= n.max(1) as f64;
        let mut var = Array1::<f64>::zeros(k);
        for m in mats {
            for row in m.rows() {
                let d = &row - &mean;
                var += &(&d * &d);
            }
        }
        var /= n.max(1) as f64;
        let scale = var.mapv(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    fn identity(k: usize) -> Self {
        Self { mean: Array1::zeros(k), scale: Array1::ones(k) }
    }

    fn apply(&self, m: &mut Array2<f64>) {
        for mut row in m.rows_mut() {
            row -= &self.mean;
            row /= &self.scale;
        }
    }

    /// Rewrite the adapter so it takes raw features.
    fn fold(&self, p: &mut Params) {
        for mut row in p.w_enc.rows_mut() {
            row /= &self.scale;
        }
        p.b_enc -= &p.w_enc.dot(&self.mean);
    }
}

const TRAIN_SALT: u64 = 0x7472_6169_6e00;

/// Train on whole bags with labels in `{0, 1}`.
pub fn train(bags: &[FeatureBag], labels: &[u8], cfg: &TrainConfig) -> Result<(MilModel, AdamW, TrainLog)> {
    cfg.validate()?;
    if bags.len() != labels.len() {
        return Err(MilError::InvalidConfig(format!("{} bags but {} labels", bags.len(), labels.len())));
    }
    if bags.len() < 2 {
        return Err(MilError::InvalidConfig("need at least 2 training samples".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(MilError::InvalidConfig("labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(MilError::SingleClass);
    }
    let k = bags[0].dim();
    for b in bags {
        if b.dim() != k {
            return Err(MilError::DimMismatch { expected: k, actual: b.dim() });
        }
        if b.is_empty() {
            return Err(MilError::EmptyBag(b.sample_id().to_string()));
        }
    }
    let mut mats: Vec<Array2<f64>> = bags.iter().map(FeatureBag::to_matrix).collect();
    let standardizer = if cfg.standardize_features { Standardizer::fit(&mats, k) } else { Standardizer::identity(k) };
    mats.iter_mut().for_each(|m| standardizer.apply(m));

    let base = derive_seed(cfg.seed, TRAIN_SALT);
    let mut model = MilModel::init(k, &mut stream(base, u64::MAX));
    let mut opt = AdamW::new(k, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..bags.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr0, cfg.lr_min, epoch, cfg.epochs);
        let mut rng = stream(base, epoch as u64);
        order.shuffle(&mut rng);
        let mut acc = Params::zeros(k);
        let mut pending = 0usize;
        let mut loss_sum = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            let keep = stratified_subsample(bags[i].coords(), cfg.patch_sample_rate, &mut rng);
            let h = mats[i].select(Axis(0), &keep);
            let masks = (cfg.dropout > 0.0)
                .then(|| DropoutMasks::sample(h.nrows(), cfg.dropout, cfg.attention_dropout, &mut rng));
            let (loss, g) = model.loss_and_gradients(h.view(), labels[i] as f64, masks.as_ref())?;
            loss_sum += loss;
            acc.add_scaled(&g, 1.0);
            pending += 1;
            if pending == cfg.grad_accum || pos + 1 == order.len() {
                acc.scale(1.0 / pending as f64);
                opt.update(&mut model.params, &acc, lr);
                log.optimizer_steps += 1;
                acc = Params::zeros(k);
                pending = 0;
            }
        }
        if !model.params.is_finite() {
            return Err(MilError::NonFinite("parameters after update"));
        }
        let mean_loss = loss_sum / bags.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.3e}, loss {mean_loss:.5}");
        log.epochs.push(EpochLog { epoch, lr, mean_loss });
    }
    standardizer.fold(&mut model.params);
    Ok((model, opt, log))
}

/// Evaluation-mode prediction over the whole bag.
pub fn predict(model: &MilModel, bag: &FeatureBag) -> Result<Prediction> {
    if bag.dim() != model.input_dim() {
        return Err(MilError::DimMismatch { expected: model.input_dim(), actual: bag.dim() });
    }
    model.predict_matrix(bag.sample_id(), bag.to_matrix().view())
}

fn tensors(p: &Params) -> Result<Vec<NamedTensor>> {
    PARAM_NAMES
        .iter()
        .zip(p.shapes())
        .zip(p.slices())
        .map(|((name, shape), data)| Ok(NamedTensor::new(*name, shape, data.to_vec())?))
        .collect()
}

pub fn to_checkpoint(model: &MilModel, opt: Option<&AdamW>, config_hash: u64, seed: u64) -> Result<Checkpoint> {
    if model.nonlinearity != Nonlinearity::Gated {
        return Err(MilError::Checkpoint("only the gated network can be stored".into()));
    }
    let (first_moment, second_moment, step) = match opt {
        Some(o) => (tensors(&o.m)?, tensors(&o.v)?, o.step),
        None => (Vec::new(), Vec::new(), 0),
    };
    Ok(Checkpoint { config_hash, seed, step, params: tensors(&model.params)?, first_moment, second_moment })
}

fn params_from(tensors: &[NamedTensor]) -> Result<Params> {
    if tensors.len() != PARAM_NAMES.len() {
        return Err(MilError::Checkpoint(format!("expected {} tensors, found {}", PARAM_NAMES.len(), tensors.len())));
    }
    let find = |name: &str| {
        let mut it = tensors.iter().filter(|t| t.name == name);
        match (it.next(), it.next()) {
            (Some(t), None) => Ok(t),
            (None, _) => Err(MilError::Checkpoint(format!("missing tensor {name}"))),
            _ => Err(MilError::Checkpoint(format!("tensor {name} appears more than once"))),
        }
    };
    let w_enc = find("W_enc")?;
    let k = match w_enc.shape.as_slice() {
        [r, k] if *r == ADAPTER_DIM => *k,
        s => return Err(MilError::Checkpoint(format!("W_enc has shape {s:?}"))),
    };
    let mut p = Params::zeros(k);
    let shapes = p.shapes();
    for ((name, shape), slot) in PARAM_NAMES.iter().zip(shapes).zip(p.slices_mut()) {
        let t = find(name)?;
        if t.shape != shape {
            return Err(MilError::Checkpoint(format!("{name} has shape {:?}, expected {shape:?}", t.shape)));
        }
        slot.copy_from_slice(&t.data);
    }
    debug_assert_eq!(p.v.nrows(), ATTENTION_DIM);
    Ok(p)
}

pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(MilModel, Option<AdamW>)> {
    ckpt.validate()?;
    let params = params_from(&ckpt.params)?;
    if !params.is_finite() {
        return Err(MilError::NonFinite("checkpoint parameters"));
    }
    let opt = if ckpt.first_moment.is_empty() {
        None
    } else {
        let d = TrainConfig::default();
        Some(AdamW {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            step: ckpt.step,
            m: params_from(&ckpt.first_moment)?,
            v: params_from(&ckpt.second_moment)?,
        })
    };
    Ok((MilModel { params, nonlinearity: Nonlinearity::Gated }, opt))
}
