use crate::error::{Error, Result};
use crate::tensor::{check_same_shapes, NamedTensors, Scalar};

/// `θ_k ← m θ_k + (1 − m) θ_q` on every tensor, running statistics included.
pub fn momentum_update<F: Scalar>(
    key: &mut NamedTensors<F>,
    query: &NamedTensors<F>,
    m: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Range(format!("momentum must lie in [0, 1), got {m}")));
    }
    check_same_shapes(key, query)?;
    let mf = F::lit(m);
    let rest = F::lit(1.0 - m);
    for (name, k) in key.iter_mut() {
        let q = &query[name];
        k.zip_mut_with(q, |a, &b| *a = mf * *a + rest * b);
    }
    Ok(())
}
