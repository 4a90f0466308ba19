use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `a·b / (|a| |b|)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_tau<F: Scalar>(tau: F) -> Result<()> {
    if tau > F::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Range(format!("temperature must be positive, got {tau}")))
    }
}

fn log_sum_exp<F: Scalar>(xs: impl Iterator<Item = F> + Clone) -> F {
    let max = xs.clone().fold(F::neg_infinity(), F::max);
    max + xs.fold(F::zero(), |a, x| a + (x - max).exp()).ln()
}

/// Loss from precomputed similarities: positive first, then the negatives.
pub fn info_nce_from_sims<F: Scalar>(pos_sim: F, neg_sims: &[F], tau: F) -> Result<F> {
    check_tau(tau)?;
    let l0 = pos_sim / tau;
    let logits = std::iter::once(l0).chain(neg_sims.iter().map(|&s| s / tau));
    Ok(log_sum_exp(logits) - l0)
}

/// Contrastive loss of one query against its positive key and a queue of
/// negatives; similarities are dot products of unit vectors.
pub fn info_nce<F: Scalar>(
    q: ArrayView1<F>,
    k_pos: ArrayView1<F>,
    queue: ArrayView2<F>,
    tau: F,
) -> Result<F> {
    Ok(info_nce_with_grad(q, k_pos, queue, tau)?.0)
}

/// Loss and its gradient with respect to `q`.
pub fn info_nce_with_grad<F: Scalar>(
    q: ArrayView1<F>,
    k_pos: ArrayView1<F>,
    queue: ArrayView2<F>,
    tau: F,
) -> Result<(F, Array1<F>)> {
    check_tau(tau)?;
    let d = q.len();
    if k_pos.len() != d || (queue.nrows() > 0 && queue.ncols() != d) {
        return Err(Error::Shape(format!(
            "query dim {d}, key dim {}, queue {:?}",
            k_pos.len(),
            queue.shape()
        )));
    }
    let l0 = q.dot(&k_pos) / tau;
    let negs = queue.dot(&q) / tau;
    let lse = log_sum_exp(std::iter::once(l0).chain(negs.iter().copied()));
    let loss = lse - l0;
    // d/dq = ((p0 - 1) k+ + sum_i p_i k_i) / tau
    let p0 = (l0 - lse).exp();
    let mut grad = k_pos.mapv(|k| (p0 - F::one()) * k);
    if queue.nrows() > 0 {
        let p = negs.mapv(|l| (l - lse).exp());
        grad += &queue.t().dot(&p);
    }
    grad.mapv_inplace(|g| g / tau);
    Ok((loss, grad))
}

/// Mean loss over a batch of `(query, positive)` rows sharing one queue, with
/// the gradient of the mean with respect to every query row.
pub fn info_nce_batch<F: Scalar>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    queue: ArrayView2<F>,
    tau: F,
) -> Result<(F, Array2<F>)> {
    check_tau(tau)?;
    if q.shape() != k.shape() || (queue.nrows() > 0 && queue.ncols() != q.ncols()) {
        return Err(Error::Shape(format!(
            "queries {:?}, keys {:?}, queue {:?}",
            q.shape(),
            k.shape(),
            queue.shape()
        )));
    }
    let b = q.nrows();
    let bf = F::from_usize(b).unwrap();
    let negs = q.dot(&queue.t()) / tau;
    let mut loss = F::zero();
    let mut grad = Array2::<F>::zeros(q.raw_dim());
    for i in 0..b {
        let l0 = q.row(i).dot(&k.row(i)) / tau;
        let row = negs.row(i);
        let lse = log_sum_exp(std::iter::once(l0).chain(row.iter().copied()));
        loss += lse - l0;
        let p0 = (l0 - lse).exp();
        let mut g = grad.row_mut(i);
        g.scaled_add(p0 - F::one(), &k.row(i));
        if queue.nrows() > 0 {
            let p = row.mapv(|l| (l - lse).exp());
            g += &queue.t().dot(&p);
        }
        g.mapv_inplace(|v| v / (tau * bf));
    }
    Ok((loss / bf, grad))
}
