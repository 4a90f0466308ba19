//! Seeded two-view augmentation for contrastive pretraining.
//!
//! A view is a random temporal crop followed by one shared random affine,
//! temporal z-normalization, percentile intensity rescaling to `[0, 1]` and
//! exactly one of blur, gamma, motion or noise. Everything is a pure function
//! of `(input, config, seed)`.

use ndarray::{s, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::VolumeSeries;
use crate::error::{Error, Result};
use crate::preprocess::{smooth_volume, znorm_in_place};
use crate::rng::{derive_seed, rng_from, Rng};

/// Motion-branch transforms are drawn from the affine bounds scaled by this.
const MOTION_BOUND_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_len: usize,
    pub affine_max_deg: f64,
    pub affine_max_translate_vox: f64,
    pub affine_max_scale_delta: f64,
    /// Lower/upper percentiles clipped before min-max scaling.
    pub intensity_rescale_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub gamma_log_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    pub motion_max_transforms: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_len: 16,
            affine_max_deg: 10.0,
            affine_max_translate_vox: 4.0,
            affine_max_scale_delta: 0.1,
            intensity_rescale_range: (0.5, 99.5),
            blur_sigma_range: (0.25, 1.5),
            gamma_log_range: (-0.3, 0.3),
            noise_sigma_range: (0.01, 0.1),
            motion_max_transforms: 2,
        }
    }
}

impl AugmentConfig {
    /// Every random branch collapsed to the identity.
    pub fn identity(crop_len: usize) -> Self {
        Self {
            crop_len,
            affine_max_deg: 0.0,
            affine_max_translate_vox: 0.0,
            affine_max_scale_delta: 0.0,
            intensity_rescale_range: (0.5, 99.5),
            blur_sigma_range: (0.0, 0.0),
            gamma_log_range: (0.0, 0.0),
            noise_sigma_range: (0.0, 0.0),
            motion_max_transforms: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_len == 0 {
            return Err(Error::Range("crop_len must be at least 1".into()));
        }
        let nonneg = [
            ("affine_max_deg", self.affine_max_deg),
            ("affine_max_translate_vox", self.affine_max_translate_vox),
            ("affine_max_scale_delta", self.affine_max_scale_delta),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Range(format!("{name} = {v}")));
            }
        }
        if self.affine_max_scale_delta >= 1.0 {
            return Err(Error::Range("affine_max_scale_delta must be < 1".into()));
        }
        let ranges = [
            ("blur_sigma_range", self.blur_sigma_range, 0.0),
            ("noise_sigma_range", self.noise_sigma_range, 0.0),
            ("gamma_log_range", self.gamma_log_range, f64::NEG_INFINITY),
        ];
        for (name, (lo, hi), floor) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= floor) {
                return Err(Error::Range(format!("{name} = ({lo}, {hi})")));
            }
        }
        let (plo, phi) = self.intensity_rescale_range;
        if !(0.0 <= plo && plo < phi && phi <= 100.0) {
            return Err(Error::Range(format!("intensity_rescale_range = ({plo}, {phi})")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn symmetric(rng: &mut Rng, max: f64) -> f64 {
    uniform(rng, (-max, max))
}

/// Rotation (degrees about z, y, x), translation (voxels, z/y/x) and isotropic
/// scale of a sampling map centred on the volume.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub rot_deg: [f64; 3],
    pub translate_vox: [f64; 3],
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rot_deg: [0.0; 3],
        translate_vox: [0.0; 3],
        scale: 1.0,
    };

    fn sample(rng: &mut Rng, max_deg: f64, max_translate: f64, max_scale_delta: f64) -> Self {
        let rot_deg = [(); 3].map(|_| symmetric(rng, max_deg));
        let translate_vox = [(); 3].map(|_| symmetric(rng, max_translate));
        let scale = 1.0 + symmetric(rng, max_scale_delta);
        Self {
            rot_deg,
            translate_vox,
            scale,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// 3×3 linear part acting on `(z, y, x)` offsets from the centre.
    fn matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rot_deg.map(f64::to_radians);
        // rotation about z (in the y-x plane), then y (z-x plane), then x (z-y plane)
        let rz = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rx = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
            let mut r = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
                }
            }
            r
        };
        let mut m = mul(mul(rz, ry), rx);
        for row in &mut m {
            for v in row.iter_mut() {
                *v /= self.scale;
            }
        }
        m
    }
}

/// Trilinear taps for every output voxel of a `(z, y, x)` grid.
struct Resampler {
    taps: Vec<[(usize, f32); 8]>,
}

impl Resampler {
    fn new(dims: [usize; 3], params: &AffineParams) -> Self {
        let m = params.matrix();
        let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let mut taps = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let off = [z as f64 - centre[0], y as f64 - centre[1], x as f64 - centre[2]];
                    let src: [f64; 3] = std::array::from_fn(|i| {
                        (0..3).map(|k| m[i][k] * off[k]).sum::<f64>()
                            + centre[i]
                            + params.translate_vox[i]
                    });
                    taps.push(Self::corners(src, dims));
                }
            }
        }
        Self { taps }
    }

    fn corners(src: [f64; 3], dims: [usize; 3]) -> [(usize, f32); 8] {
        let base = src.map(f64::floor);
        let frac: [f64; 3] = std::array::from_fn(|i| src[i] - base[i]);
        let mut out = [(0usize, 0f32); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut flat = 0usize;
            let mut inside = true;
            for i in 0..3 {
                let bit = (c >> (2 - i)) & 1;
                let idx = base[i] as i64 + bit as i64;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                if idx < 0 || idx >= dims[i] as i64 {
                    inside = false;
                } else {
                    flat = flat * dims[i] + idx as usize;
                }
            }
            *slot = if inside && w > 0.0 { (flat, w as f32) } else { (0, 0.0) };
        }
        out
    }

    fn apply(&self, src: ArrayView3<f32>, mut dst: ArrayViewMut3<f32>) {
        let src = src.as_standard_layout();
        let flat = src.as_slice().expect("standard layout");
        for (out, taps) in dst.iter_mut().zip(&self.taps) {
            *out = taps.iter().map(|&(i, w)| w * flat[i]).sum();
        }
    }
}

fn affine_in_place(data: &mut Array4<f32>, params: &AffineParams, t_range: std::ops::Range<usize>) {
    if params.is_identity() || t_range.is_empty() {
        return;
    }
    let dims = [data.shape()[1], data.shape()[2], data.shape()[3]];
    let resampler = Resampler::new(dims, params);
    for t in t_range {
        let src = data.index_axis(Axis(0), t).to_owned();
        resampler.apply(src.view(), data.index_axis_mut(Axis(0), t));
    }
}

/// Linear-interpolated percentile (`q` in 0..=100) of an unsorted buffer.
fn percentile(values: &mut [f32], q: f64) -> f32 {
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let k = pos.floor() as usize;
    let (_, kth, right) = values.select_nth_unstable_by(k, f32::total_cmp);
    let lo = *kth;
    let frac = (pos - k as f64) as f32;
    if frac == 0.0 || right.is_empty() {
        return lo;
    }
    let hi = right.iter().copied().fold(f32::INFINITY, f32::min);
    lo + frac * (hi - lo)
}

fn rescale_in_place(data: &mut Array4<f32>, (plo, phi): (f64, f64)) {
    let mut buf: Vec<f32> = data.iter().copied().collect();
    let lo = percentile(&mut buf, plo);
    let hi = percentile(&mut buf, phi);
    let span = hi - lo;
    if !(span > f32::EPSILON * (lo.abs() + hi.abs()).max(1.0)) {
        data.fill(0.0);
        return;
    }
    data.mapv_inplace(|v| (v.clamp(lo, hi) - lo) / span);
}

/// The one randomly chosen intensity or geometry perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Blur { sigma_vox: f64 },
    Gamma { gamma: f64 },
    /// `(first timepoint, transform)` segments; earlier timepoints stay put.
    Motion { segments: Vec<(usize, AffineParams)> },
    Noise { sigma: f64, seed: u64 },
}

impl Branch {
    pub fn index(&self) -> usize {
        match self {
            Branch::Blur { .. } => 0,
            Branch::Gamma { .. } => 1,
            Branch::Motion { .. } => 2,
            Branch::Noise { .. } => 3,
        }
    }
}

/// All random draws of one `spatial_augment` call.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub affine: AffineParams,
    pub branch: Branch,
}

impl AugmentPlan {
    pub fn sample(cfg: &AugmentConfig, n_timepoints: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let affine = AffineParams::sample(
            &mut rng,
            cfg.affine_max_deg,
            cfg.affine_max_translate_vox,
            cfg.affine_max_scale_delta,
        );
        let branch = match rng.random_range(0..4u32) {
            0 => Branch::Blur {
                sigma_vox: uniform(&mut rng, cfg.blur_sigma_range),
            },
            1 => Branch::Gamma {
                gamma: uniform(&mut rng, cfg.gamma_log_range).exp(),
            },
            2 => {
                let k = if cfg.motion_max_transforms == 0 {
                    0
                } else {
                    rng.random_range(1..=cfg.motion_max_transforms)
                };
                let mut segments: Vec<(usize, AffineParams)> = (0..k)
                    .map(|_| {
                        let start = rng.random_range(0..n_timepoints);
                        let p = AffineParams::sample(
                            &mut rng,
                            cfg.affine_max_deg * MOTION_BOUND_SCALE,
                            cfg.affine_max_translate_vox * MOTION_BOUND_SCALE,
                            0.0,
                        );
                        (start, p)
                    })
                    .collect();
                segments.sort_by_key(|(s, _)| *s);
                Branch::Motion { segments }
            }
            _ => Branch::Noise {
                sigma: uniform(&mut rng, cfg.noise_sigma_range),
                seed: rng.random(),
            },
        };
        Self { affine, branch }
    }

    fn apply(&self, cfg: &AugmentConfig, data: &mut Array4<f32>) {
        let t = data.shape()[0];
        affine_in_place(data, &self.affine, 0..t);
        znorm_in_place(data);
        rescale_in_place(data, cfg.intensity_rescale_range);
        match &self.branch {
            Branch::Blur { sigma_vox } => {
                if *sigma_vox > 0.0 {
                    for vol in data.outer_iter_mut() {
                        smooth_volume(vol, [*sigma_vox; 3]);
                    }
                }
            }
            Branch::Gamma { gamma } => {
                let g = *gamma as f32;
                if g != 1.0 {
                    data.mapv_inplace(|v| v.max(0.0).powf(g));
                }
            }
            Branch::Motion { segments } => {
                for (i, (start, params)) in segments.iter().enumerate() {
                    let end = segments.get(i + 1).map_or(t, |(s, _)| *s);
                    affine_in_place(data, params, *start..end);
                }
            }
            Branch::Noise { sigma, seed } => {
                if *sigma > 0.0 {
                    let normal = Normal::new(0.0f32, *sigma as f32).expect("finite sigma");
                    let mut rng = rng_from(*seed);
                    data.mapv_inplace(|v| v + normal.sample(&mut rng));
                }
            }
        }
    }
}

/// `n` consecutive timepoints from a seeded uniform start in `[0, T - n]`.
pub fn temporal_crop(vs: &VolumeSeries, n: usize, seed: u64) -> Result<VolumeSeries> {
    let t = vs.n_timepoints();
    if n == 0 || n > t {
        return Err(Error::Shape(format!("cannot crop {n} timepoints from {t}")));
    }
    let start = rng_from(seed).random_range(0..=t - n);
    crop_at(vs, start, n)
}

pub(crate) fn crop_at(vs: &VolumeSeries, start: usize, n: usize) -> Result<VolumeSeries> {
    let data = vs.data().slice(s![start..start + n, .., .., ..]).to_owned();
    vs.with_data(data)
}

pub fn spatial_augment(vs: &VolumeSeries, cfg: &AugmentConfig, seed: u64) -> Result<VolumeSeries> {
    cfg.validate()?;
    let plan = AugmentPlan::sample(cfg, vs.n_timepoints(), seed);
    let mut data = vs.data().to_owned();
    plan.apply(cfg, &mut data);
    vs.with_data(data)
}

/// Two independently augmented views of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: VolumeSeries,
    pub view_b: VolumeSeries,
    pub seed_a: u64,
    pub seed_b: u64,
}

fn make_view(vs: &VolumeSeries, cfg: &AugmentConfig, seed: u64) -> Result<VolumeSeries> {
    let cropped = temporal_crop(vs, cfg.crop_len, derive_seed(seed, 0))?;
    spatial_augment(&cropped, cfg, derive_seed(seed, 1))
}

pub fn make_view_pair(vs: &VolumeSeries, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    let (seed_a, seed_b) = (derive_seed(seed, 0), derive_seed(seed, 1));
    Ok(ViewPair {
        view_a: make_view(vs, cfg, seed_a)?,
        view_b: make_view(vs, cfg, seed_b)?,
        seed_a,
        seed_b,
    })
}
