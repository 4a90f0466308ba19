use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::augment::crop_at;
use crate::checkpoint::{self, CheckpointMeta, RngState};
use crate::data::{FatigueClass, VolumeSeries, N_CLASSES};
use crate::encoder::{forward, init_encoder, stack_batch, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::NamedTensors;

/// Scans per forward pass at inference.
const PREDICT_CHUNK: usize = 8;

/// Encoder plus a linear head on its pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub encoder: EncoderParams<f32>,
    /// `(6, lstm_hidden)`.
    pub head_weight: Array2<f32>,
    pub head_bias: Array1<f32>,
    /// Timepoints of the centre crop fed to the encoder.
    pub crop_len: usize,
}

impl ClassifierModel {
    /// Wraps an encoder with a small random head.
    pub fn new(encoder: EncoderParams<f32>, crop_len: usize, seed: u64) -> Result<Self> {
        use rand::Rng as _;
        if crop_len == 0 {
            return Err(Error::Config("crop length must be positive".into()));
        }
        let h = encoder.cfg.lstm_hidden;
        let bound = 1.0 / (h as f32).sqrt();
        let mut rng = rng_from(seed);
        let head_weight = Array2::from_shape_simple_fn((N_CLASSES, h), || rng.random_range(-bound..bound));
        Ok(ClassifierModel { encoder, head_weight, head_bias: Array1::zeros(N_CLASSES), crop_len })
    }

    /// Fresh encoder and head from one seed.
    pub fn fresh(cfg: &crate::encoder::EncoderConfig, crop_len: usize, seed: u64) -> Result<Self> {
        let enc = init_encoder(cfg, crate::rng::derive_seed(seed, 0))?;
        Self::new(enc, crop_len, crate::rng::derive_seed(seed, 1))
    }

    pub(crate) fn head_tensors(&self) -> NamedTensors<f32> {
        let mut t = NamedTensors::new();
        t.insert("head.weight".into(), self.head_weight.clone().into_dyn());
        t.insert("head.bias".into(), self.head_bias.clone().into_dyn());
        t
    }

    pub(crate) fn set_head_tensors(&mut self, t: &NamedTensors<f32>) {
        self.head_weight = t["head.weight"].clone().into_dimensionality().expect("2-D head");
        self.head_bias = t["head.bias"].clone().into_dimensionality().expect("1-D head");
    }

    /// `(B, 6)` logits from `(B, H)` features.
    pub fn logits(&self, features: ArrayView2<f32>) -> Array2<f32> {
        features.dot(&self.head_weight.t()) + &self.head_bias
    }

    pub fn save(&self, dir: &Path, config: serde_json::Value, epoch: u64, rng: RngState) -> Result<()> {
        let mut tensors = self.head_tensors();
        checkpoint::add_prefixed(&mut tensors, &self.encoder.tensors, "encoder");
        let mut cfg = serde_json::json!({ "encoder": self.encoder.cfg, "crop_len": self.crop_len });
        if let (Some(obj), serde_json::Value::Object(extra)) = (cfg.as_object_mut(), config) {
            for (k, v) in extra {
                obj.entry(k).or_insert(v);
            }
        }
        let meta = CheckpointMeta::new("classifier", epoch, rng, cfg);
        checkpoint::write_checkpoint(dir, meta, &tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read_checkpoint(dir)?;
        if meta.kind != "classifier" {
            return Err(Error::Format(format!("{} is a {} checkpoint, not a classifier", dir.display(), meta.kind)));
        }
        let encoder = checkpoint::encoder_from(&meta, &tensors, dir)?;
        let crop_len = meta
            .config
            .get("crop_len")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("{}: missing crop_len", dir.display())))? as usize;
        let h = encoder.cfg.lstm_hidden;
        let (w, b) = match (tensors.get("head.weight"), tensors.get("head.bias")) {
            (Some(w), Some(b)) if w.shape() == [N_CLASSES, h] && b.shape() == [N_CLASSES] => (w, b),
            _ => return Err(Error::Shape(format!("{}: head must be ({N_CLASSES}, {h}) plus ({N_CLASSES})", dir.display()))),
        };
        let mut model = ClassifierModel::new(encoder, crop_len, 0)?;
        model.head_weight = w.clone().into_dimensionality().expect("checked");
        model.head_bias = b.clone().into_dimensionality().expect("checked");
        Ok(model)
    }
}

/// Centre crop of `n` timepoints.
pub(crate) fn center_crop(vs: &VolumeSeries, n: usize) -> Result<VolumeSeries> {
    let t = vs.n_timepoints();
    if n > t {
        return Err(Error::Shape(format!("cannot crop {n} timepoints from {t}")));
    }
    crop_at(vs, (t - n) / 2, n)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub type Prediction = (FatigueClass, [f64; N_CLASSES]);

fn to_prediction(probs: Vec<f64>) -> Prediction {
    let mut p = [0.0; N_CLASSES];
    p.copy_from_slice(&probs);
    (FatigueClass::ALL[argmax(&probs)], p)
}

/// Class and probabilities for one scan, using the encoder in eval mode.
pub fn predict(model: &ClassifierModel, scan: &VolumeSeries) -> Result<Prediction> {
    Ok(predict_batch(model, &[scan])?.remove(0))
}

pub fn predict_batch(model: &ClassifierModel, scans: &[&VolumeSeries]) -> Result<Vec<Prediction>> {
    let enc = model.encoder.clone().with_mode(Mode::Eval);
    let mut out = Vec::with_capacity(scans.len());
    for chunk in scans.chunks(PREDICT_CHUNK) {
        let crops = chunk
            .iter()
            .map(|s| center_crop(s, model.crop_len))
            .collect::<Result<Vec<_>>>()?;
        let x = stack_batch(&crops.iter().collect::<Vec<_>>())?;
        let pass = forward(&enc, x.view(), 0)?;
        let logits = model.logits(pass.pooled.view());
        for row in logits.axis_iter(Axis(0)) {
            let l: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            out.push(to_prediction(softmax(&l)));
        }
    }
    Ok(out)
}
