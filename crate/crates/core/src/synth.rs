//! Synthetic labeled scans with a class-graded ROI oscillation, a nearest
//! template baseline, and ingestion of external unlabeled NIfTI trees.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_scans, read_header, save_nifti, FatigueClass, Group, ScanRecord, Task, VolumeSeries, DatasetIndex,
    N_CLASSES,
};
use crate::error::{Error, IoContext, Result};
use crate::rng::{derive_path, derive_seed, rng_from};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    /// `(T, Z, Y, X)`.
    pub shape: [usize; 4],
    /// `(z, y, x)` voxel coordinates.
    pub roi_center: [f64; 3],
    pub roi_radius_vox: f64,
    pub base_amplitude: f64,
    pub amplitude_step: f64,
    pub noise_sigma: f64,
    pub drift_period_s: f64,
    pub tr_seconds: f64,
    pub hc_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 20,
            shape: [40, 16, 32, 32],
            roi_center: [8.0, 16.0, 16.0],
            roi_radius_vox: 4.0,
            base_amplitude: 0.5,
            amplitude_step: 0.5,
            noise_sigma: 0.2,
            drift_period_s: 20.0,
            tr_seconds: 2.0,
            hc_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth.{m}")));
        if self.n_per_class == 0 {
            return bad("n_per_class must be at least 1".into());
        }
        if self.shape.contains(&0) {
            return bad(format!("shape {:?} has a zero extent", self.shape));
        }
        for (axis, (&c, &n)) in self.roi_center.iter().zip(&self.shape[1..]).enumerate() {
            if !(c >= 0.0 && c <= (n - 1) as f64) {
                return bad(format!("roi_center {:?} lies outside the volume on axis {axis}", self.roi_center));
            }
        }
        if !(self.roi_radius_vox > 0.0) {
            return bad("roi_radius_vox must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        if !(self.drift_period_s > 0.0 && self.tr_seconds > 0.0) {
            return bad("drift_period_s and tr_seconds must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hc_fraction) {
            return bad("hc_fraction must lie in [0, 1]".into());
        }
        if !(self.base_amplitude.is_finite() && self.amplitude_step.is_finite()) {
            return bad("amplitudes must be finite".into());
        }
        Ok(())
    }

    pub fn amplitude(&self, class: FatigueClass) -> f64 {
        self.base_amplitude + class.index() as f64 * self.amplitude_step
    }

    /// `(Z, Y, X)` mask of voxels within the ROI radius.
    pub fn roi_mask(&self) -> Array3<bool> {
        let [_, z, y, x] = self.shape;
        let [cz, cy, cx] = self.roi_center;
        let r2 = self.roi_radius_vox * self.roi_radius_vox;
        Array3::from_shape_fn((z, y, x), |(k, j, i)| {
            let d2 = (k as f64 - cz).powi(2) + (j as f64 - cy).powi(2) + (i as f64 - cx).powi(2);
            d2 <= r2
        })
    }
}

/// One synthetic scan plus its score and group.
pub fn synth_scan(spec: &SynthSpec, class: FatigueClass, i: usize) -> Result<(VolumeSeries, f64, Group)> {
    let seed = derive_path(spec.seed, &[class.index() as u64, i as u64]);
    let mut rng = rng_from(seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (lo, hi) = class.score_range();
    let score = (rng.random_range(lo..hi) * 10.0).floor() / 10.0;
    let n_hc = (spec.hc_fraction * spec.n_per_class as f64).round() as usize;
    let group = if i < n_hc { Group::Hc } else { Group::Tbi };

    let [t, z, y, x] = spec.shape;
    let mut data = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let mut noise_rng = rng_from(derive_seed(seed, 1));
        Array4::from_shape_simple_fn((t, z, y, x), || normal.sample(&mut noise_rng) as f32)
    } else {
        Array4::zeros((t, z, y, x))
    };
    let amp = spec.amplitude(class);
    let mask = spec.roi_mask();
    for (ti, mut vol) in data.axis_iter_mut(Axis(0)).enumerate() {
        let s = (amp * (2.0 * PI * ti as f64 * spec.tr_seconds / spec.drift_period_s + phase).sin()) as f32;
        ndarray::Zip::from(&mut vol).and(&mask).for_each(|v, &m| {
            if m {
                *v += s;
            }
        });
    }
    let vs = VolumeSeries::new(data, [1.0; 3], spec.tr_seconds)?;
    Ok((vs, score, group))
}

/// Writes `6 · n_per_class` scans and `manifest.tsv` under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let jobs: Vec<(FatigueClass, usize)> = FatigueClass::ALL
        .iter()
        .flat_map(|&c| (0..spec.n_per_class).map(move |i| (c, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, i)| {
            let (vs, score, group) = synth_scan(spec, c, i)?;
            let path = out_dir.join(format!("scan_c{}_{i:03}.nii", c.index()));
            save_nifti(&vs, &path)?;
            let task = if i % 2 == 0 { Task::ZeroBack } else { Task::TwoBack };
            ScanRecord::labeled(path, format!("sub-c{}n{i:03}", c.index()), group, task, 0, score)
        })
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex::new(records)?;
    index.save(out_dir.join(MANIFEST_FILE))?;
    Ok(index)
}

/// Population temporal standard deviation of every voxel.
pub fn temporal_std(vs: &VolumeSeries) -> Array3<f64> {
    let d = vs.data();
    let n = d.shape()[0] as f64;
    let mean = d.mapv(|v| v as f64).sum_axis(Axis(0)) / n;
    let mut var = Array3::<f64>::zeros(mean.raw_dim());
    for vol in d.axis_iter(Axis(0)) {
        ndarray::Zip::from(&mut var).and(&vol).and(&mean).for_each(|acc, &v, &m| {
            *acc += (v as f64 - m).powi(2);
        });
    }
    var.mapv(|v| (v / n).sqrt())
}

/// Held-out accuracy of a nearest-template classifier on the mean temporal
/// standard deviation inside a data-driven ROI.
pub fn baseline_oracle(index: &DatasetIndex, seed: u64) -> Result<f64> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, r) in index.records().iter().enumerate() {
        let label = r
            .label()
            .ok_or_else(|| Error::Validation(format!("record {} has no fatigue score", r.path.display())))?;
        by_class[label.index()].push(i);
    }
    let present: Vec<usize> = (0..N_CLASSES).filter(|&c| !by_class[c].is_empty()).collect();
    if present.is_empty() {
        return Err(Error::Size("baseline needs labeled records".into()));
    }
    if let Some(&c) = present.iter().find(|&&c| by_class[c].len() < 2) {
        return Err(Error::Size(format!("class {c} has fewer than 2 records")));
    }
    let mut held_in = Vec::new();
    let mut held_out = Vec::new();
    for &c in &present {
        let mut ids = by_class[c].clone();
        ids.shuffle(&mut rng_from(derive_seed(seed, c as u64)));
        let half = ids.len() / 2;
        held_in.extend(ids[..half].iter().map(|&i| (i, c)));
        held_out.extend(ids[half..].iter().map(|&i| (i, c)));
    }
    let scans = load_scans(index.records())?;
    let stds: Vec<Array3<f64>> = scans.par_iter().map(temporal_std).collect();
    let shape = stds[0].shape().to_vec();
    if stds.iter().any(|s| s.shape() != shape.as_slice()) {
        return Err(Error::Shape("baseline needs equally shaped volumes".into()));
    }

    let mut mean_map = Array3::<f64>::zeros(stds[0].raw_dim());
    for &(i, _) in &held_in {
        mean_map += &stds[i];
    }
    mean_map /= held_in.len() as f64;
    let mut sorted: Vec<f64> = mean_map.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max = *sorted.last().unwrap();
    let threshold = (median + max) / 2.0;
    let mask = mean_map.mapv(|v| v > threshold);
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let feature = |i: usize| -> f64 {
        stds[i].iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / count
    };

    let mut templates = [(0.0, 0usize); N_CLASSES];
    for &(i, c) in &held_in {
        templates[c].0 += feature(i);
        templates[c].1 += 1;
    }
    let hits = held_out
        .iter()
        .filter(|&&(i, c)| {
            let f = feature(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for &k in &present {
                let d = (f - templates[k].0 / templates[k].1 as f64).abs();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1 == c
        })
        .count();
    Ok(hits as f64 / held_out.len() as f64)
}

/// Outcome of indexing an external directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScan {
    pub index: DatasetIndex,
    /// Files that matched but failed validation, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub warning: Option<String>,
}

impl ExternalScan {
    /// One skipped path per line.
    pub fn skip_report(&self) -> String {
        self.skipped.iter().map(|(p, _)| format!("{}\n", p.display())).collect()
    }
}

/// Recursively indexes 4D NIfTI files under `dir` whose name or relative path
/// matches the glob `pattern`, as unlabeled records.
pub fn scan_external_dir(dir: &Path, pattern: &str) -> Result<ExternalScan> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let pat = glob::Pattern::new(pattern).map_err(|e| Error::Config(format!("bad pattern {pattern:?}: {e}")))?;
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| {
            let p = e.path().unwrap_or(dir).to_path_buf();
            Error::io(p, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path()).to_path_buf();
        let name = entry.file_name().to_string_lossy();
        if pat.matches(&name) || pat.matches_path(&rel) {
            files.push(rel);
        }
    }
    files.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for rel in files {
        let path = dir.join(&rel);
        match read_header(&path).and_then(|h| h.shape().map(|s| (h.dim[0], s))) {
            Ok((4, _)) => {
                let s = rel.to_string_lossy();
                let subject = s.strip_suffix(".gz").unwrap_or(&s);
                let subject = subject.strip_suffix(".nii").unwrap_or(subject).to_string();
                records.push(ScanRecord::unlabeled(path, subject, 0));
            }
            Ok((d, _)) => skipped.push((path, format!("{d}-D image, expected 4-D"))),
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    let warning = records
        .is_empty()
        .then(|| format!("no 4-D NIfTI files matching {pattern:?} under {}", dir.display()));
    Ok(ExternalScan { index: DatasetIndex::new(records)?, skipped, warning })
}
