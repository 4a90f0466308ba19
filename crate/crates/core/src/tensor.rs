//! Scalar trait and named-tensor maps shared by the encoder and optimizers.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of model tensors (`f32` for training, `f64`
/// for derivative checks).
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Tensors addressed by hierarchical dotted names, iterated in name order.
pub type NamedTensors<F> = BTreeMap<String, ArrayD<F>>;

pub fn cast_tensors<F: Scalar, G: Scalar>(src: &NamedTensors<F>) -> NamedTensors<G> {
    src.iter()
        .map(|(k, v)| (k.clone(), v.mapv(|x| G::from(x).expect("finite cast"))))
        .collect()
}

pub fn check_same_shapes<F, G>(a: &NamedTensors<F>, b: &NamedTensors<G>) -> Result<()> {
    if a.len() != b.len() || a.keys().ne(b.keys()) {
        return Err(Error::Shape("tensor maps have different names".into()));
    }
    for ((name, x), y) in a.iter().zip(b.values()) {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

pub fn count_elements<F>(t: &NamedTensors<F>) -> usize {
    t.values().map(|v| v.len()).sum()
}
