use ndarray::{Array4, ArrayView4};

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// A 4D scan indexed `(t, z, y, x)` with its acquisition geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    data: Array4<f32>,
    voxel_dims_mm: [f64; 3],
    tr_seconds: f64,
    affine: Affine,
}

impl VolumeSeries {
    pub fn new(data: Array4<f32>, voxel_dims_mm: [f64; 3], tr_seconds: f64) -> Result<Self> {
        Self::with_affine(data, voxel_dims_mm, tr_seconds, IDENTITY_AFFINE)
    }

    pub fn with_affine(
        data: Array4<f32>,
        voxel_dims_mm: [f64; 3],
        tr_seconds: f64,
        affine: Affine,
    ) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::Shape(format!("empty dimension in {:?}", data.shape())));
        }
        if !voxel_dims_mm.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::Validation(format!(
                "voxel dimensions must be positive, got {voxel_dims_mm:?}"
            )));
        }
        if !(tr_seconds.is_finite() && tr_seconds > 0.0) {
            return Err(Error::Validation(format!(
                "repetition time must be positive, got {tr_seconds}"
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Validation(format!("{bad} non-finite voxels")));
        }
        Ok(Self {
            data,
            voxel_dims_mm,
            tr_seconds,
            affine,
        })
    }

    /// Unit voxels and a 2 s repetition time.
    pub fn from_data(data: Array4<f32>) -> Result<Self> {
        Self::new(data, [1.0, 1.0, 1.0], 2.0)
    }

    /// Same geometry, new voxel data (time length may differ).
    pub fn with_data(&self, data: Array4<f32>) -> Result<Self> {
        Self::with_affine(data, self.voxel_dims_mm, self.tr_seconds, self.affine)
    }

    pub fn data(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    /// `(t, z, y, x)`
    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn n_timepoints(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn voxel_dims_mm(&self) -> [f64; 3] {
        self.voxel_dims_mm
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr_seconds
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }
}
