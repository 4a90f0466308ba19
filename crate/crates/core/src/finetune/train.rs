use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_scans, truth_of, Metrics, Truth};
use super::model::{predict_batch, softmax, ClassifierModel};
use crate::augment::temporal_crop;
use crate::checkpoint::load_encoder;
use crate::data::{load_scans, make_kfold, DatasetIndex, SplitSpec, VolumeSeries, N_CLASSES};
use crate::encoder::{backward, forward, stack_batch, update_running_stats, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::rng::{derive_path, derive_seed, rng_from};
use crate::tensor::NamedTensors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: u64,
    /// Weight the loss by inverse class frequency in the training split.
    pub balance_classes: bool,
    pub weight_decay: f64,
    /// Stop once training accuracy reaches this; 0 disables.
    pub target_train_acc: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            lr: 1e-3,
            batch_size: 8,
            freeze_encoder: false,
            early_stop_patience: 10,
            balance_classes: false,
            weight_decay: 0.0,
            target_train_acc: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "finetune.epochs, finetune.batch_size and finetune.early_stop_patience must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_train_acc) {
            return Err(Error::Config("finetune.target_train_acc must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("finetune.lr must be positive and finetune.weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Where the encoder weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSource {
    Checkpoint(PathBuf),
    Fresh(EncoderConfig),
}

impl EncoderSource {
    pub fn provenance(&self, seed: u64) -> String {
        match self {
            EncoderSource::Checkpoint(p) => format!("checkpoint:{}", p.display()),
            EncoderSource::Fresh(_) => format!("fresh:seed={seed}"),
        }
    }

    /// Encoder plus a seeded head.
    pub fn build(&self, crop_len: usize, seed: u64) -> Result<ClassifierModel> {
        match self {
            EncoderSource::Checkpoint(dir) => ClassifierModel::new(load_encoder(dir)?, crop_len, derive_seed(seed, 1)),
            EncoderSource::Fresh(cfg) => ClassifierModel::fresh(cfg, crop_len, seed),
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Weights from the selected epoch.
    pub model: ClassifierModel,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: u64,
    pub provenance: String,
}

/// A scan with its label.
pub type Labeled<'a> = (&'a VolumeSeries, Truth);

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (lse - logits[target]).max(0.0)
}

fn class_weights(train: &[Labeled], balance: bool) -> [f64; N_CLASSES] {
    if !balance {
        return [1.0; N_CLASSES];
    }
    let mut counts = [0usize; N_CLASSES];
    for (_, t) in train {
        counts[t.label.index()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut w = [0.0; N_CLASSES];
    for (wi, &c) in w.iter_mut().zip(&counts) {
        if c > 0 {
            *wi = train.len() as f64 / (present * c as f64);
        }
    }
    w
}

/// Accuracy and mean cross-entropy in eval mode with centre crops.
fn score(model: &ClassifierModel, data: &[Labeled]) -> Result<(f64, f64)> {
    let scans: Vec<&VolumeSeries> = data.iter().map(|d| d.0).collect();
    let preds = predict_batch(model, &scans)?;
    let mut hits = 0usize;
    let mut loss = 0.0;
    for ((class, probs), (_, t)) in preds.iter().zip(data) {
        hits += (*class == t.label) as usize;
        loss -= probs[t.label.index()].max(f64::MIN_POSITIVE).ln();
    }
    let n = data.len() as f64;
    Ok((hits as f64 / n, loss / n))
}

/// Supervised training of `model` on in-memory scans.
pub fn finetune_scans(
    mut model: ClassifierModel,
    train: &[Labeled],
    val: &[Labeled],
    cfg: &FinetuneConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&FinetuneEpoch),
) -> Result<(ClassifierModel, Vec<FinetuneEpoch>, u64)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Size("fine-tuning needs a non-empty training split".into()));
    }
    let weights = class_weights(train, cfg.balance_classes);
    let frozen = cfg.freeze_encoder;
    let mut head_opt = Optimizer::<f32>::adam(cfg.weight_decay);
    let mut enc_opt = Optimizer::<f32>::adam(cfg.weight_decay);

    let mut history = Vec::new();
    let mut best: Option<(f64, f64, u64, ClassifierModel)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(derive_path(seed, &[1, epoch])));
        let mut total_loss = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = derive_path(seed, &[2, epoch, step as u64]);
            let crops = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| temporal_crop(train[i].0, model.crop_len, derive_seed(step_seed, j as u64)))
                .collect::<Result<Vec<_>>>()?;
            let x = stack_batch(&crops.iter().collect::<Vec<_>>())?;
            model.encoder.mode = if frozen { Mode::Eval } else { Mode::Train };
            let pass = forward(&model.encoder, x.view(), derive_seed(step_seed, 1 << 32))?;
            let logits = model.logits(pass.features.view());

            let wsum: f64 = idx.iter().map(|&i| weights[train[i].1.label.index()]).sum();
            let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
            let mut loss = 0.0;
            for (r, &i) in idx.iter().enumerate() {
                let target = train[i].1.label.index();
                let w = weights[target] / wsum;
                let l: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
                loss += w * cross_entropy(&l, target);
                for (c, p) in softmax(&l).into_iter().enumerate() {
                    let y = if c == target { 1.0 } else { 0.0 };
                    dlogits[[r, c]] = (w * (p - y)) as f32;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite classification loss {loss} at epoch {epoch}, step {step}"
                )));
            }
            total_loss += loss * idx.len() as f64;

            let mut head_grads = NamedTensors::new();
            head_grads.insert("head.weight".into(), dlogits.t().dot(&pass.features).into_dyn());
            head_grads.insert("head.bias".into(), dlogits.sum_axis(Axis(0)).into_dyn());
            let enc_grads = if frozen {
                None
            } else {
                let dfeat = dlogits.dot(&model.head_weight);
                Some(backward(&model.encoder, &pass, None, Some(dfeat.view()))?)
            };
            let mut head = model.head_tensors();
            head_opt.step(&mut head, &head_grads, cfg.lr)?;
            model.set_head_tensors(&head);
            if let Some(g) = enc_grads {
                update_running_stats(&mut model.encoder, &pass);
                enc_opt.step(&mut model.encoder.tensors, &g, cfg.lr)?;
            }
        }
        model.encoder.mode = Mode::Eval;
        let (train_acc, _) = score(&model, train)?;
        let (val_acc, val_loss) = if val.is_empty() {
            (None, None)
        } else {
            let (a, l) = score(&model, val)?;
            (Some(a), Some(l))
        };
        let entry = FinetuneEpoch {
            epoch,
            train_loss: total_loss / train.len() as f64,
            train_acc,
            val_acc,
            val_loss,
        };
        on_epoch(&entry);
        history.push(entry);

        match (val_acc, val_loss) {
            (Some(a), Some(l)) => {
                let improved = best.as_ref().is_none_or(|(ba, bl, ..)| a > *ba || (a == *ba && l < *bl));
                if improved {
                    best = Some((a, l, epoch, model.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        break;
                    }
                }
            }
            _ => best = Some((0.0, 0.0, epoch, model.clone())),
        }
        if cfg.target_train_acc > 0.0 && train_acc >= cfg.target_train_acc {
            break;
        }
    }
    let (_, _, best_epoch, mut chosen) = best.expect("at least one epoch ran");
    chosen.encoder.mode = Mode::Eval;
    Ok((chosen, history, best_epoch))
}

fn labeled<'a>(dataset: &DatasetIndex, scans: &'a [VolumeSeries], ids: &[usize]) -> Result<Vec<Labeled<'a>>> {
    ids.iter()
        .map(|&i| {
            let rec = dataset
                .records()
                .get(i)
                .ok_or_else(|| Error::Validation(format!("split refers to record {i} of {}", dataset.len())))?;
            Ok((&scans[i], truth_of(rec)?))
        })
        .collect()
}

/// Fine-tunes on the split's train ids, selecting by its val ids.
pub fn finetune(
    source: &EncoderSource,
    dataset: &DatasetIndex,
    split: &SplitSpec,
    cfg: &FinetuneConfig,
    crop_len: usize,
    seed: u64,
    on_epoch: &mut dyn FnMut(&FinetuneEpoch),
) -> Result<FinetuneOutcome> {
    if split.train.is_empty() {
        return Err(Error::Size("fine-tuning needs a non-empty training split".into()));
    }
    let scans = load_scans(dataset.records())?;
    finetune_loaded(source, dataset, &scans, split, cfg, crop_len, seed, on_epoch)
}

/// As [`finetune`] with the dataset's scans already loaded, in record order.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loaded(
    source: &EncoderSource,
    dataset: &DatasetIndex,
    scans: &[VolumeSeries],
    split: &SplitSpec,
    cfg: &FinetuneConfig,
    crop_len: usize,
    seed: u64,
    on_epoch: &mut dyn FnMut(&FinetuneEpoch),
) -> Result<FinetuneOutcome> {
    let train = labeled(dataset, scans, &split.train)?;
    let val = labeled(dataset, scans, &split.val)?;
    let model = source.build(crop_len, seed)?;
    let (model, history, best_epoch) = finetune_scans(model, &train, &val, cfg, seed, on_epoch)?;
    Ok(FinetuneOutcome { model, history, best_epoch, provenance: source.provenance(seed) })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy fractions as percentages, `"mean ± std"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValResult {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub folds: Vec<Metrics>,
    pub summary: String,
}

/// Trains and tests one model per fold of a k-fold partition.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    dataset: &DatasetIndex,
    k: usize,
    source: &EncoderSource,
    cfg: &FinetuneConfig,
    crop_len: usize,
    seed: u64,
    on_fold: &mut dyn FnMut(usize, &Metrics),
) -> Result<CrossValResult> {
    let folds = make_kfold(dataset, k, seed)?;
    let scans = load_scans(dataset.records())?;
    let mut metrics = Vec::with_capacity(k);
    for (f, split) in folds.iter().enumerate() {
        let fold_seed = derive_seed(seed, f as u64);
        let out = finetune_loaded(source, dataset, &scans, split, cfg, crop_len, fold_seed, &mut |_| {})?;
        let test = labeled(dataset, &scans, &split.test)?;
        let (s, t): (Vec<&VolumeSeries>, Vec<Truth>) = test.into_iter().unzip();
        let m = evaluate_scans(&out.model, &s, &t)?;
        on_fold(f, &m);
        metrics.push(m);
    }
    let accs: Vec<f64> = metrics.iter().map(|m| m.overall_acc).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    Ok(CrossValResult { mean_acc, std_acc, folds: metrics, summary: format_mean_std(mean_acc, std_acc) })
}

/// Path-free helper for callers that hold an encoder checkpoint.
pub fn source_from(checkpoint: Option<&Path>, fresh: &EncoderConfig) -> EncoderSource {
    match checkpoint {
        Some(p) => EncoderSource::Checkpoint(p.to_path_buf()),
        None => EncoderSource::Fresh(fresh.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FatigueClass, Group};
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            conv_channels: [4, 4, 4],
            lstm_hidden: 8,
            embed_dim: 4,
            input_depth: 2,
            input_hw: (8, 8),
            ..EncoderConfig::default()
        }
    }

    /// Class-dependent mean intensity plus noise.
    fn toy(n_per_class: usize, classes: u8, seed: u64) -> Vec<(VolumeSeries, Truth)> {
        let mut rng = rng_from(seed);
        let mut out = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per_class {
                let data = Array4::from_shape_simple_fn((6, 2, 8, 8), || {
                    let e: f32 = StandardNormal.sample(&mut rng);
                    c as f32 * 2.0 + 0.3 * e
                });
                let t = Truth { label: FatigueClass::new(c).unwrap(), group: Some(Group::Hc) };
                out.push((VolumeSeries::from_data(data).unwrap(), t));
            }
        }
        out
    }

    #[test]
    fn cross_entropy_properties() {
        assert!(cross_entropy(&[0.0, 0.0], 0) > 0.0);
        assert!((cross_entropy(&[0.0, 0.0], 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(cross_entropy(&[800.0, 0.0], 0), 0.0);
        assert!(cross_entropy(&[0.0, 50.0], 0) > 49.0);
    }

    proptest! {
        #[test]
        fn cross_entropy_non_negative(l in prop::collection::vec(-20.0f64..20.0, 6), t in 0usize..6) {
            prop_assert!(cross_entropy(&l, t) >= 0.0);
        }
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let data = toy(3, 2, 1);
        let train: Vec<Labeled> = data.iter().map(|(s, t)| (s, *t)).collect();
        let model = ClassifierModel::fresh(&tiny(), 4, 3).unwrap();
        let cfg = FinetuneConfig { epochs: 3, freeze_encoder: true, ..Default::default() };
        let (out, hist, _) = finetune_scans(model.clone(), &train, &[], &cfg, 5, &mut |_| {}).unwrap();
        assert_eq!(out.encoder.tensors, model.encoder.tensors);
        assert_ne!(out.head_weight, model.head_weight);
        assert_eq!(hist.len(), 3);
    }

    #[test]
    fn learns_separable_toy_problem_deterministically() {
        let data = toy(6, 3, 2);
        let train: Vec<Labeled> = data.iter().map(|(s, t)| (s, *t)).collect();
        let cfg = FinetuneConfig { epochs: 40, lr: 1e-2, batch_size: 6, ..Default::default() };
        let run = || {
            let model = ClassifierModel::fresh(&tiny(), 4, 7).unwrap();
            finetune_scans(model, &train, &[], &cfg, 11, &mut |_| {}).unwrap()
        };
        let (a, hist_a, _) = run();
        let (b, hist_b, _) = run();
        assert_eq!(hist_a, hist_b);
        assert_eq!(a, b);
        assert!(hist_a.last().unwrap().train_acc >= 0.95, "{:?}", hist_a.last());
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let data = toy(3, 2, 4);
        let all: Vec<Labeled> = data.iter().map(|(s, t)| (s, *t)).collect();
        let cfg = FinetuneConfig { epochs: 30, early_stop_patience: 2, ..Default::default() };
        let model = ClassifierModel::fresh(&tiny(), 4, 1).unwrap();
        let (_, hist, best) = finetune_scans(model, &all[..4], &all[4..], &cfg, 1, &mut |_| {}).unwrap();
        let best_acc = hist[best as usize].val_acc.unwrap();
        assert!(hist.iter().all(|h| h.val_acc.unwrap() <= best_acc));
        assert!(hist.len() as u64 > best);
        assert!(hist.len() as u64 <= (best + 1 + 2).min(cfg.epochs));
    }

    #[test]
    fn stops_at_target_train_accuracy() {
        let data = toy(3, 2, 4);
        let all: Vec<Labeled> = data.iter().map(|(s, t)| (s, *t)).collect();
        let cfg = FinetuneConfig { epochs: 40, target_train_acc: 0.5, ..Default::default() };
        let model = ClassifierModel::fresh(&tiny(), 4, 1).unwrap();
        let (_, hist, _) = finetune_scans(model, &all, &[], &cfg, 1, &mut |_| {}).unwrap();
        let last = hist.last().unwrap();
        assert!(last.train_acc >= 0.5);
        assert!(hist[..hist.len() - 1].iter().all(|h| h.train_acc < 0.5));
        let bad = FinetuneConfig { target_train_acc: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let model = ClassifierModel::fresh(&tiny(), 4, 1).unwrap();
        let r = finetune_scans(model, &[], &[], &FinetuneConfig::default(), 0, &mut |_| {});
        assert!(matches!(r, Err(Error::Size(_))));
    }

    #[test]
    fn mean_std_and_format() {
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[0.7, 0.8, 0.9]);
        assert!((m - 0.8).abs() < 1e-12);
        assert!((s - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(format_mean_std(0.7435, 0.0123), "74.35 ± 1.23");
    }

    #[test]
    fn balanced_weights_are_inverse_frequency() {
        let data = toy(1, 2, 1);
        let mut train: Vec<Labeled> = data.iter().map(|(s, t)| (s, *t)).collect();
        train.push(train[0]);
        train.push(train[0]);
        let w = class_weights(&train, true);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        assert_eq!(class_weights(&train, false), [1.0; N_CLASSES]);
    }
}
