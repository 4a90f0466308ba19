use serde::{Deserialize, Serialize};

use super::model::{predict_batch, ClassifierModel};
use crate::data::{load_scans, FatigueClass, Group, ScanRecord, VolumeSeries, N_CLASSES};
use crate::error::{Error, Result};

pub type Confusion = [[u64; N_CLASSES]; N_CLASSES];

/// Accuracies and a confusion matrix (rows true, columns predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hc_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tbi_acc: Option<f64>,
    pub confusion: Confusion,
    pub n: u64,
}

/// Ground truth for one evaluated scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub label: FatigueClass,
    pub group: Option<Group>,
}

pub fn metrics_from_predictions(truth: &[Truth], predicted: &[FatigueClass]) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Size("no records to evaluate".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!("{} labels, {} predictions", truth.len(), predicted.len())));
    }
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    let mut by_group = [(0u64, 0u64); 2];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.label.index()][p.index()] += 1;
        if let Some(g) = t.group {
            let slot = &mut by_group[matches!(g, Group::Tbi) as usize];
            slot.0 += (t.label == *p) as u64;
            slot.1 += 1;
        }
    }
    let n = truth.len() as u64;
    let trace: u64 = (0..N_CLASSES).map(|i| confusion[i][i]).sum();
    let acc = |(hit, total): (u64, u64)| (total > 0).then(|| hit as f64 / total as f64);
    Ok(Metrics {
        overall_acc: trace as f64 / n as f64,
        hc_acc: acc(by_group[0]),
        tbi_acc: acc(by_group[1]),
        confusion,
        n,
    })
}

pub(crate) fn truth_of(record: &ScanRecord) -> Result<Truth> {
    let label = record.label().ok_or_else(|| {
        Error::Validation(format!("record {} has no fatigue score", record.path.display()))
    })?;
    Ok(Truth { label, group: record.group })
}

/// Metrics of `model` on labeled scans already in memory.
pub fn evaluate_scans(model: &ClassifierModel, scans: &[&VolumeSeries], truth: &[Truth]) -> Result<Metrics> {
    if scans.is_empty() {
        return Err(Error::Size("no records to evaluate".into()));
    }
    let preds = predict_batch(model, scans)?;
    let classes: Vec<FatigueClass> = preds.iter().map(|p| p.0).collect();
    metrics_from_predictions(truth, &classes)
}

/// Loads each record's scan and evaluates `model` on them.
pub fn evaluate(model: &ClassifierModel, records: &[ScanRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Size("no records to evaluate".into()));
    }
    let truth = records.iter().map(truth_of).collect::<Result<Vec<_>>>()?;
    let scans = load_scans(records)?;
    evaluate_scans(model, &scans.iter().collect::<Vec<_>>(), &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth(labels: &[u8], group: Option<Group>) -> Vec<Truth> {
        labels.iter().map(|&l| Truth { label: FatigueClass::new(l).unwrap(), group }).collect()
    }

    #[test]
    fn oracle_predictor() {
        let labels: Vec<u8> = (0..12).map(|i| i % 6).collect();
        let t = truth(&labels, Some(Group::Hc));
        let preds: Vec<FatigueClass> = t.iter().map(|t| t.label).collect();
        let m = metrics_from_predictions(&t, &preds).unwrap();
        assert_eq!(m.overall_acc, 1.0);
        assert_eq!(m.hc_acc, Some(1.0));
        assert_eq!(m.tbi_acc, None);
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                assert_eq!(m.confusion[i][j], if i == j { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let labels: Vec<u8> = (0..60).map(|i| i % 6).collect();
        let t = truth(&labels, None);
        let m = metrics_from_predictions(&t, &[FatigueClass::ALL[0]; 60]).unwrap();
        assert!((m.overall_acc - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.hc_acc, None);
        assert_eq!(m.confusion.iter().map(|r| r[0]).sum::<u64>(), 60);
    }

    #[test]
    fn group_accuracies() {
        let mut t = truth(&[0, 1], Some(Group::Hc));
        t.extend(truth(&[2, 3], Some(Group::Tbi)));
        let p: Vec<FatigueClass> = [0u8, 0, 2, 2].iter().map(|&c| FatigueClass::new(c).unwrap()).collect();
        let m = metrics_from_predictions(&t, &p).unwrap();
        assert_eq!((m.hc_acc, m.tbi_acc, m.overall_acc), (Some(0.5), Some(0.5), 0.5));
        let json = serde_json::to_value(metrics_from_predictions(&truth(&[1], None), &p[..1]).unwrap()).unwrap();
        assert!(json.get("hc_acc").is_none());
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(matches!(metrics_from_predictions(&[], &[]), Err(Error::Size(_))));
        assert!(matches!(
            metrics_from_predictions(&truth(&[1], None), &[]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn confusion_counts_every_record(pairs in prop::collection::vec((0u8..6, 0u8..6, 0u8..3), 1..80)) {
            let t: Vec<Truth> = pairs.iter().map(|&(l, _, g)| Truth {
                label: FatigueClass::new(l).unwrap(),
                group: [None, Some(Group::Hc), Some(Group::Tbi)][g as usize],
            }).collect();
            let p: Vec<FatigueClass> = pairs.iter().map(|&(_, q, _)| FatigueClass::new(q).unwrap()).collect();
            let m = metrics_from_predictions(&t, &p).unwrap();
            let total: u64 = m.confusion.iter().flatten().sum();
            prop_assert_eq!(total, m.n);
            let trace: u64 = (0..6).map(|i| m.confusion[i][i]).sum();
            prop_assert_eq!(m.overall_acc, trace as f64 / m.n as f64);
            if t.iter().all(|x| x.group == Some(Group::Hc)) {
                prop_assert_eq!(m.hc_acc, Some(m.overall_acc));
                prop_assert_eq!(m.tbi_acc, None);
            }
        }
    }
}
