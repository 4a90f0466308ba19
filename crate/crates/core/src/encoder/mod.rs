//! CNN + LSTM + attention encoder for 4D scans.

mod config;
mod model;
mod params;

pub use config::EncoderConfig;
pub use model::{
    attention_weights, backward, encode, forward, pooled_features, update_running_stats, ForwardPass,
};
pub use params::{init_encoder, is_learnable, tensor_layout, EncoderParams, Mode, BN_EPS, BN_MOMENTUM};

use ndarray::{Array5, Axis};

use crate::data::VolumeSeries;
use crate::error::{Error, Result};

/// Stack equally shaped scans into a `(B, T, Z, Y, X)` batch.
pub fn stack_batch(scans: &[&VolumeSeries]) -> Result<Array5<f32>> {
    let first = scans
        .first()
        .ok_or_else(|| Error::Size("cannot stack an empty batch".into()))?;
    let shape = first.shape();
    let views = scans
        .iter()
        .map(|s| {
            if s.shape() == shape {
                Ok(s.data())
            } else {
                Err(Error::Shape(format!("{:?} vs {:?} in one batch", s.shape(), shape)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ndarray::stack(Axis(0), &views).expect("equal shapes"))
}
