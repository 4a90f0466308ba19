//! Normalization and smoothing of raw scans.
//!
//! A deliberately small pipeline: per-timepoint 3D Gaussian smoothing, then
//! per-voxel temporal z-normalization, then optional symmetric clipping.

use ndarray::{Array4, ArrayViewMut3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::VolumeSeries;
use crate::error::{Error, Result};

/// `2 * sqrt(2 * ln 2)`
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub smooth_fwhm_mm: f64,
    pub znorm: bool,
    /// Clip normalized values to `±clamp_sigma`; 0 disables.
    pub clamp_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            smooth_fwhm_mm: 6.0,
            znorm: true,
            clamp_sigma: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn disabled() -> Self {
        Self {
            smooth_fwhm_mm: 0.0,
            znorm: false,
            clamp_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_fwhm_mm >= 0.0 && self.smooth_fwhm_mm.is_finite()) {
            return Err(Error::Range(format!("smooth_fwhm_mm = {}", self.smooth_fwhm_mm)));
        }
        if !(self.clamp_sigma >= 0.0 && self.clamp_sigma.is_finite()) {
            return Err(Error::Range(format!("clamp_sigma = {}", self.clamp_sigma)));
        }
        Ok(())
    }
}

/// Per-voxel temporal z-score with population std; flat voxels become zero.
pub fn temporal_znorm(vs: &VolumeSeries) -> Result<VolumeSeries> {
    if vs.n_timepoints() < 2 {
        return Err(Error::Shape(format!(
            "temporal normalization needs at least 2 timepoints, got {}",
            vs.n_timepoints()
        )));
    }
    let mut data = vs.data().to_owned();
    znorm_in_place(&mut data);
    vs.with_data(data)
}

/// Same as [`temporal_znorm`] but a single timepoint maps to zeros.
pub(crate) fn znorm_in_place(data: &mut Array4<f32>) {
    let t = data.shape()[0];
    for mut series in data.lanes_mut(Axis(0)) {
        let mean = series.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
        let var = series.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std <= 1e-7 * (mean.abs() + 1.0) {
            series.fill(0.0);
        } else {
            series.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
        }
    }
}

/// Normalized Gaussian taps over `[-ceil(4 sigma), ceil(4 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection into `[0, n)`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur of one `(z, y, x)` volume; sigmas in voxels.
pub(crate) fn smooth_volume(mut vol: ArrayViewMut3<f32>, sigmas_vox: [f64; 3]) {
    for (axis, &sigma) in sigmas_vox.iter().enumerate() {
        let kernel = gaussian_kernel(sigma);
        if kernel.len() == 1 {
            continue;
        }
        let radius = (kernel.len() / 2) as i64;
        let n = vol.shape()[axis];
        let mut line = vec![0f64; n];
        for mut lane in vol.lanes_mut(Axis(axis)) {
            for (dst, &v) in line.iter_mut().zip(lane.iter()) {
                *dst = v as f64;
            }
            for (i, out) in lane.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    acc += w * line[reflect(i as i64 + j as i64 - radius, n)];
                }
                *out = acc as f32;
            }
        }
    }
}

/// Gaussian smoothing of every timepoint; `fwhm_mm = 0` is the identity.
pub fn spatial_smooth(vs: &VolumeSeries, fwhm_mm: f64) -> Result<VolumeSeries> {
    if !(fwhm_mm >= 0.0 && fwhm_mm.is_finite()) {
        return Err(Error::Range(format!("fwhm must be non-negative, got {fwhm_mm}")));
    }
    if fwhm_mm == 0.0 {
        return Ok(vs.clone());
    }
    let sigma_mm = fwhm_mm / FWHM_TO_SIGMA;
    let sigmas = vs.voxel_dims_mm().map(|d| sigma_mm / d);
    let mut data = vs.data().to_owned();
    for vol in data.outer_iter_mut() {
        smooth_volume(vol, sigmas);
    }
    vs.with_data(data)
}

/// Smooth, then normalize, then clip.
pub fn run_pipeline(vs: &VolumeSeries, cfg: &PreprocessConfig) -> Result<VolumeSeries> {
    cfg.validate()?;
    let mut out = spatial_smooth(vs, cfg.smooth_fwhm_mm)?;
    if cfg.znorm {
        out = temporal_znorm(&out)?;
    }
    if cfg.clamp_sigma > 0.0 {
        let c = cfg.clamp_sigma as f32;
        let data = out.data().mapv(|v| v.clamp(-c, c));
        out = out.with_data(data)?;
    }
    Ok(out)
}
