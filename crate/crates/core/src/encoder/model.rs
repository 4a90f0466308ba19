//! Forward and backward passes of the spatio-temporal encoder.
//!
//! Per timepoint the `Z` slices of a volume are the input channels of three
//! `conv -> batchnorm -> relu` blocks; global average pooling gives one
//! feature vector per timepoint, an LSTM runs over time, dot-product
//! attention with a learned vector pools the hidden states, and a linear
//! projection plus L2 normalization yields the embedding.
//!
//! Activations are kept channel-major, `(channels, frames * h * w)`, where a
//! frame is one `(sample, timepoint)` pair ordered sample-major.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView5, Axis, IxDyn, Zip};
use rand::Rng as _;

use super::params::{EncoderParams, Mode, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{NamedTensors, Scalar};

struct ConvGeom {
    cin: usize,
    frames: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

struct ConvBlock<F> {
    geom: ConvGeom,
    cols: Array2<F>,
    xhat: Array2<F>,
    inv_std: Array1<F>,
    act: Array2<F>,
}

struct LstmTrace<F> {
    /// `(B*T, C)` inputs, row `b*T + t`.
    x: Array2<F>,
    /// `(T, B, 4H)` post-activation gates `i, f, g, o`.
    gates: Array3<F>,
    /// `(T+1, B, H)`, index 0 is the zero initial state.
    c: Array3<F>,
    h: Array3<F>,
    tanh_c: Array3<F>,
}

/// Everything the backward pass needs, plus the outputs.
pub struct ForwardPass<F> {
    pub batch: usize,
    pub steps: usize,
    /// `(B, D)` unit-norm rows.
    pub embeddings: Array2<F>,
    /// `(B, H)` attention-pooled hidden state.
    pub pooled: Array2<F>,
    /// `pooled` after dropout; the classifier input.
    pub features: Array2<F>,
    /// `(B, T)` softmax weights over time.
    pub attention: Array2<F>,
    mode: Mode,
    blocks: Vec<ConvBlock<F>>,
    /// Per block: batch mean and unbiased variance (training mode only).
    bn_stats: Vec<(Array1<F>, Array1<F>)>,
    lstm: LstmTrace<F>,
    dropout_mask: Option<Array2<F>>,
    z_norm: Array1<F>,
}

fn check_batch<F: Scalar>(params: &EncoderParams<F>, batch: &ArrayView5<F>) -> Result<()> {
    let cfg = &params.cfg;
    let sh = batch.shape();
    if sh[0] == 0 || sh[1] == 0 {
        return Err(Error::Shape(format!("empty batch {sh:?}")));
    }
    if sh[2] != cfg.input_depth || (sh[3], sh[4]) != cfg.input_hw {
        return Err(Error::Shape(format!(
            "batch {sh:?} does not match encoder input (B, n, {}, {}, {})",
            cfg.input_depth, cfg.input_hw.0, cfg.input_hw.1
        )));
    }
    Ok(())
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom) -> Array2<F> {
    let p = g.oh * g.ow;
    let width = g.frames * p;
    let mut cols = vec![F::zero(); g.cin * g.k * g.k * width];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * width;
                for f in 0..g.frames {
                    let src = &x[(c * g.frames + f) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row + f * p..][..p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.cin * g.k * g.k, width), cols).expect("im2col shape")
}

fn col2im<F: Scalar>(cols: &Array2<F>, g: &ConvGeom) -> Array2<F> {
    let p = g.oh * g.ow;
    let width = g.frames * p;
    let cols = cols.as_slice().expect("contiguous");
    let mut x = Array2::<F>::zeros((g.cin, g.frames * g.h * g.w));
    let xs = x.as_slice_mut().expect("contiguous");
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * width;
                for f in 0..g.frames {
                    let src = &cols[row + f * p..][..p];
                    let dst = &mut xs[(c * g.frames + f) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// `(B, n, Z, H, W)` to channel-major `(Z, B*n*H*W)`.
fn to_channel_major<F: Scalar>(batch: &ArrayView5<F>) -> Array2<F> {
    let sh = batch.shape();
    let (z, rest) = (sh[2], sh[0] * sh[1] * sh[3] * sh[4]);
    let permuted = batch.view().permuted_axes([2, 0, 1, 3, 4]);
    let owned = permuted.as_standard_layout().into_owned();
    owned.into_shape_with_order((z, rest)).expect("contiguous reshape")
}

pub fn forward<F: Scalar>(
    params: &EncoderParams<F>,
    batch: ArrayView5<F>,
    dropout_seed: u64,
) -> Result<ForwardPass<F>> {
    check_batch(params, &batch)?;
    let cfg = &params.cfg;
    let (b, t) = (batch.shape()[0], batch.shape()[1]);
    let frames = b * t;
    let train = params.mode == Mode::Train;
    let eps = F::lit(BN_EPS);

    let mut x = to_channel_major(&batch);
    let (mut h, mut w) = cfg.input_hw;
    let mut cin = cfg.input_depth;
    let mut blocks = Vec::with_capacity(3);
    let mut bn_stats = Vec::new();
    for (l, &cout) in cfg.conv_channels.iter().enumerate() {
        let l = l + 1;
        let geom = ConvGeom {
            cin,
            frames,
            h,
            w,
            oh: cfg.conv_out(h),
            ow: cfg.conv_out(w),
            k: cfg.kernel,
            stride: cfg.stride,
            pad: cfg.padding(),
        };
        let cols = im2col(x.as_slice().expect("contiguous"), &geom);
        let weight = params
            .v4(&format!("conv{l}.weight"))
            .into_shape_with_order((cout, cin * cfg.kernel * cfg.kernel))
            .expect("weight reshape");
        let mut y = weight.dot(&cols);
        let bias = params.v1(&format!("conv{l}.bias"));
        let gain = params.v1(&format!("bn{l}.gain"));
        let beta = params.v1(&format!("bn{l}.bias"));
        let m = y.shape()[1];
        let mut inv_std = Array1::<F>::zeros(cout);
        let mut batch_mean = Array1::<F>::zeros(cout);
        let mut batch_var = Array1::<F>::zeros(cout);
        for (c, mut row) in y.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| v + bias[c]);
            let (mean, var) = if train {
                let mf = F::from_usize(m).unwrap();
                let mean = row.sum() / mf;
                let var = row.fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / mf;
                batch_mean[c] = mean;
                batch_var[c] = if m > 1 {
                    var * mf / F::from_usize(m - 1).unwrap()
                } else {
                    var
                };
                (mean, var)
            } else {
                (
                    params.v1(&format!("bn{l}.running_mean"))[c],
                    params.v1(&format!("bn{l}.running_var"))[c],
                )
            };
            let is = F::one() / (var + eps).sqrt();
            inv_std[c] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let xhat = y;
        let mut act = xhat.clone();
        for (c, mut row) in act.outer_iter_mut().enumerate() {
            let (g, bb) = (gain[c], beta[c]);
            row.mapv_inplace(|v| (g * v + bb).max(F::zero()));
        }
        if train {
            bn_stats.push((batch_mean, batch_var));
        }
        x = act.clone();
        (h, w, cin) = (geom.oh, geom.ow, cout);
        blocks.push(ConvBlock {
            geom,
            cols,
            xhat,
            inv_std,
            act,
        });
    }

    // global average pool -> (frames, C3), row = b*T + t
    let p = h * w;
    let pf = F::from_usize(p).unwrap();
    let mut feats = Array2::<F>::zeros((frames, cin));
    for (c, row) in x.outer_iter().enumerate() {
        let row = row.as_slice().expect("contiguous");
        for f in 0..frames {
            feats[[f, c]] = row[f * p..(f + 1) * p].iter().fold(F::zero(), |a, &v| a + v) / pf;
        }
    }

    let lstm = lstm_forward(params, feats, b, t);
    let hd = cfg.lstm_hidden;

    // attention over time
    let v = params.v1("attn.vector");
    let mut attention = Array2::<F>::zeros((b, t));
    let mut pooled = Array2::<F>::zeros((b, hd));
    for bi in 0..b {
        let scores: Vec<F> = (0..t).map(|ti| lstm.h.slice(s![ti + 1, bi, ..]).dot(&v)).collect();
        let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total = exps.iter().copied().fold(F::zero(), |a, e| a + e);
        for ti in 0..t {
            let a = exps[ti] / total;
            attention[[bi, ti]] = a;
            pooled
                .row_mut(bi)
                .scaled_add(a, &lstm.h.slice(s![ti + 1, bi, ..]));
        }
    }

    let dropout_mask = if train && cfg.dropout > 0.0 {
        let keep = 1.0 - cfg.dropout;
        let scale = F::lit(1.0 / keep);
        let mut rng = rng_from(dropout_seed);
        Some(Array2::from_shape_simple_fn((b, hd), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        }))
    } else {
        None
    };
    let features = match &dropout_mask {
        Some(mask) => &pooled * mask,
        None => pooled.clone(),
    };

    let mut z = features.dot(&params.v2("proj.weight").t());
    z += &params.v1("proj.bias");
    let tiny = F::lit(1e-12);
    let z_norm: Array1<F> = z
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(tiny))
        .collect();
    let mut embeddings = z;
    for (mut row, &n) in embeddings.outer_iter_mut().zip(z_norm.iter()) {
        row.mapv_inplace(|v| v / n);
    }

    Ok(ForwardPass {
        batch: b,
        steps: t,
        embeddings,
        pooled,
        features,
        attention,
        mode: params.mode,
        blocks,
        bn_stats,
        lstm,
        dropout_mask,
        z_norm,
    })
}

fn lstm_forward<F: Scalar>(params: &EncoderParams<F>, x: Array2<F>, b: usize, t: usize) -> LstmTrace<F> {
    let hd = params.cfg.lstm_hidden;
    let w_ih = params.v2("lstm.weight_ih");
    let w_hh = params.v2("lstm.weight_hh");
    let bias = params.v1("lstm.bias");
    let xw = x.dot(&w_ih.t());
    let mut gates = Array3::<F>::zeros((t, b, 4 * hd));
    let mut c = Array3::<F>::zeros((t + 1, b, hd));
    let mut h = Array3::<F>::zeros((t + 1, b, hd));
    let mut tanh_c = Array3::<F>::zeros((t, b, hd));
    for ti in 0..t {
        let hprev = h.index_axis(Axis(0), ti).to_owned();
        let mut pre = hprev.dot(&w_hh.t());
        for bi in 0..b {
            let mut row = pre.row_mut(bi);
            row += &xw.row(bi * t + ti);
            row += &bias;
        }
        for bi in 0..b {
            for j in 0..hd {
                let i_g = sigmoid(pre[[bi, j]]);
                let f_g = sigmoid(pre[[bi, hd + j]]);
                let g_g = pre[[bi, 2 * hd + j]].tanh();
                let o_g = sigmoid(pre[[bi, 3 * hd + j]]);
                let cn = f_g * c[[ti, bi, j]] + i_g * g_g;
                let tc = cn.tanh();
                gates[[ti, bi, j]] = i_g;
                gates[[ti, bi, hd + j]] = f_g;
                gates[[ti, bi, 2 * hd + j]] = g_g;
                gates[[ti, bi, 3 * hd + j]] = o_g;
                c[[ti + 1, bi, j]] = cn;
                tanh_c[[ti, bi, j]] = tc;
                h[[ti + 1, bi, j]] = o_g * tc;
            }
        }
    }
    LstmTrace { x, gates, c, h, tanh_c }
}

/// Gradients of every learnable tensor given upstream gradients on the
/// embeddings and/or the (post-dropout) features.
pub fn backward<F: Scalar>(
    params: &EncoderParams<F>,
    pass: &ForwardPass<F>,
    d_embeddings: Option<ArrayView2<F>>,
    d_features: Option<ArrayView2<F>>,
) -> Result<NamedTensors<F>> {
    let cfg = &params.cfg;
    let (b, t, hd) = (pass.batch, pass.steps, cfg.lstm_hidden);
    let mut grads = NamedTensors::new();
    let put = |g: &mut NamedTensors<F>, name: &str, v: ArrayD<F>| {
        g.insert(name.to_string(), v);
    };

    let mut d_feat = match d_features {
        Some(d) => {
            if d.shape() != [b, hd] {
                return Err(Error::Shape(format!("feature gradient {:?}", d.shape())));
            }
            d.to_owned()
        }
        None => Array2::zeros((b, hd)),
    };
    let proj_w = params.v2("proj.weight");
    match d_embeddings {
        Some(de) => {
            if de.shape() != [b, cfg.embed_dim] {
                return Err(Error::Shape(format!("embedding gradient {:?}", de.shape())));
            }
            let e = &pass.embeddings;
            let mut dz = de.to_owned();
            for bi in 0..b {
                let proj = e.row(bi).dot(&de.row(bi));
                let n = pass.z_norm[bi];
                Zip::from(dz.row_mut(bi))
                    .and(e.row(bi))
                    .for_each(|d, &ev| *d = (*d - ev * proj) / n);
            }
            put(&mut grads, "proj.weight", dz.t().dot(&pass.features).into_dyn());
            put(&mut grads, "proj.bias", dz.sum_axis(Axis(0)).into_dyn());
            d_feat += &dz.dot(&proj_w);
        }
        None => {
            put(&mut grads, "proj.weight", ArrayD::zeros(proj_w.shape()));
            put(&mut grads, "proj.bias", ArrayD::zeros(IxDyn(&[cfg.embed_dim])));
        }
    }
    let d_pooled = match &pass.dropout_mask {
        Some(mask) => d_feat * mask,
        None => d_feat,
    };

    // attention
    let lstm = &pass.lstm;
    let v = params.v1("attn.vector");
    let mut dh = Array3::<F>::zeros((t, b, hd));
    let mut dv = Array1::<F>::zeros(hd);
    for bi in 0..b {
        let dp = d_pooled.row(bi);
        let da: Vec<F> = (0..t).map(|ti| dp.dot(&lstm.h.slice(s![ti + 1, bi, ..]))).collect();
        let mix = (0..t).fold(F::zero(), |acc, ti| acc + pass.attention[[bi, ti]] * da[ti]);
        for ti in 0..t {
            let a = pass.attention[[bi, ti]];
            let ds = a * (da[ti] - mix);
            let hrow = lstm.h.slice(s![ti + 1, bi, ..]);
            dv.scaled_add(ds, &hrow);
            let mut dhr = dh.slice_mut(s![ti, bi, ..]);
            dhr.scaled_add(a, &dp);
            dhr.scaled_add(ds, &v);
        }
    }
    put(&mut grads, "attn.vector", dv.into_dyn());

    // LSTM, backward through time
    let w_ih = params.v2("lstm.weight_ih");
    let w_hh = params.v2("lstm.weight_hh");
    let c3 = w_ih.shape()[1];
    let mut d_wih = Array2::<F>::zeros((4 * hd, c3));
    let mut d_whh = Array2::<F>::zeros((4 * hd, hd));
    let mut d_bias = Array1::<F>::zeros(4 * hd);
    let mut dx = Array2::<F>::zeros((b * t, c3));
    let mut dh_next = Array2::<F>::zeros((b, hd));
    let mut dc_next = Array2::<F>::zeros((b, hd));
    let one = F::one();
    for ti in (0..t).rev() {
        let mut dgates = Array2::<F>::zeros((b, 4 * hd));
        for bi in 0..b {
            for j in 0..hd {
                let dhv = dh[[ti, bi, j]] + dh_next[[bi, j]];
                let i_g = lstm.gates[[ti, bi, j]];
                let f_g = lstm.gates[[ti, bi, hd + j]];
                let g_g = lstm.gates[[ti, bi, 2 * hd + j]];
                let o_g = lstm.gates[[ti, bi, 3 * hd + j]];
                let tc = lstm.tanh_c[[ti, bi, j]];
                let dc = dhv * o_g * (one - tc * tc) + dc_next[[bi, j]];
                let d_o = dhv * tc;
                let d_i = dc * g_g;
                let d_g = dc * i_g;
                let d_f = dc * lstm.c[[ti, bi, j]];
                dc_next[[bi, j]] = dc * f_g;
                dgates[[bi, j]] = d_i * i_g * (one - i_g);
                dgates[[bi, hd + j]] = d_f * f_g * (one - f_g);
                dgates[[bi, 2 * hd + j]] = d_g * (one - g_g * g_g);
                dgates[[bi, 3 * hd + j]] = d_o * o_g * (one - o_g);
            }
        }
        let hprev = lstm.h.index_axis(Axis(0), ti);
        d_whh += &dgates.t().dot(&hprev);
        d_bias += &dgates.sum_axis(Axis(0));
        dh_next = dgates.dot(&w_hh);
        let dxt = dgates.dot(&w_ih);
        for bi in 0..b {
            let r = bi * t + ti;
            dx.row_mut(r).assign(&dxt.row(bi));
            d_wih.scaled_add(one, &outer(dgates.row(bi), lstm.x.row(r)));
        }
    }
    put(&mut grads, "lstm.weight_ih", d_wih.into_dyn());
    put(&mut grads, "lstm.weight_hh", d_whh.into_dyn());
    put(&mut grads, "lstm.bias", d_bias.into_dyn());

    // global average pool
    let last = pass.blocks.last().expect("three blocks");
    let p = last.geom.oh * last.geom.ow;
    let pf = F::from_usize(p).unwrap();
    let mut d_act = Array2::<F>::zeros(last.act.raw_dim());
    for (c, mut row) in d_act.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("contiguous");
        for f in 0..b * t {
            let g = dx[[f, c]] / pf;
            row[f * p..(f + 1) * p].iter_mut().for_each(|v| *v = g);
        }
    }

    for (li, block) in pass.blocks.iter().enumerate().rev() {
        let l = li + 1;
        let gain = params.v1(&format!("bn{l}.gain"));
        let cout = block.act.shape()[0];
        let m = block.act.shape()[1];
        let mf = F::from_usize(m).unwrap();
        let mut dy = d_act;
        let mut d_gain = Array1::<F>::zeros(cout);
        let mut d_beta = Array1::<F>::zeros(cout);
        for c in 0..cout {
            let xhat = block.xhat.row(c);
            let act = block.act.row(c);
            let mut drow = dy.row_mut(c);
            Zip::from(&mut drow).and(&act).for_each(|d, &a| {
                if a <= F::zero() {
                    *d = F::zero();
                }
            });
            let (sum_dy, sum_dy_xhat) = Zip::from(&drow)
                .and(&xhat)
                .fold((F::zero(), F::zero()), |(s1, s2), &d, &xh| (s1 + d, s2 + d * xh));
            d_gain[c] = sum_dy_xhat;
            d_beta[c] = sum_dy;
            let g = gain[c];
            let is = block.inv_std[c];
            if pass.mode == Mode::Train {
                // dx = is/M * (M*g*dy - g*sum(dy) - xhat*g*sum(dy*xhat))
                Zip::from(&mut drow).and(&xhat).for_each(|d, &xh| {
                    *d = g * is * (*d - sum_dy / mf - xh * sum_dy_xhat / mf);
                });
            } else {
                drow.mapv_inplace(|d| d * g * is);
            }
        }
        put(&mut grads, &format!("bn{l}.gain"), d_gain.into_dyn());
        put(&mut grads, &format!("bn{l}.bias"), d_beta.into_dyn());

        let g = &block.geom;
        put(&mut grads, &format!("conv{l}.bias"), dy.sum_axis(Axis(1)).into_dyn());
        let dw = dy.dot(&block.cols.t());
        put(
            &mut grads,
            &format!("conv{l}.weight"),
            dw.into_shape_with_order(IxDyn(&[cout, g.cin, g.k, g.k]))
                .expect("weight grad shape"),
        );
        if li > 0 {
            let weight = params
                .v4(&format!("conv{l}.weight"))
                .into_shape_with_order((cout, g.cin * g.k * g.k))
                .expect("weight reshape");
            let dcols = weight.t().dot(&dy);
            d_act = col2im(&dcols, g);
        } else {
            d_act = Array2::zeros((0, 0));
        }
    }
    Ok(grads)
}

fn outer<F: Scalar>(a: ndarray::ArrayView1<F>, b: ndarray::ArrayView1<F>) -> Array2<F> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Fold the batch statistics of a training-mode pass into the running averages.
pub fn update_running_stats<F: Scalar>(params: &mut EncoderParams<F>, pass: &ForwardPass<F>) {
    let mom = F::lit(BN_MOMENTUM);
    for (li, (mean, var)) in pass.bn_stats.iter().enumerate() {
        let l = li + 1;
        for (name, stat) in [("running_mean", mean), ("running_var", var)] {
            let t = params
                .tensors
                .get_mut(&format!("bn{l}.{name}"))
                .expect("running stat");
            Zip::from(t.view_mut())
                .and(&stat.view().into_dyn())
                .for_each(|r, &s| *r = (F::one() - mom) * *r + mom * s);
        }
    }
}

/// Unit-norm `(B, D)` embeddings.
pub fn encode<F: Scalar>(params: &EncoderParams<F>, batch: ArrayView5<F>) -> Result<Array2<F>> {
    Ok(forward(params, batch, 0)?.embeddings)
}

/// `(B, lstm_hidden)` attention-pooled features before projection.
pub fn pooled_features<F: Scalar>(params: &EncoderParams<F>, batch: ArrayView5<F>) -> Result<Array2<F>> {
    Ok(forward(params, batch, 0)?.pooled)
}

/// `(B, n)` attention weights over timepoints.
pub fn attention_weights<F: Scalar>(params: &EncoderParams<F>, batch: ArrayView5<F>) -> Result<Array2<F>> {
    Ok(forward(params, batch, 0)?.attention)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};
    use ndarray::Array5;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            conv_channels: [4, 4, 4],
            lstm_hidden: 8,
            embed_dim: 4,
            input_depth: 2,
            input_hw: (8, 8),
            ..EncoderConfig::default()
        }
    }

    fn random_batch<F: Scalar>(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<F> {
        let mut rng = rng_from(seed);
        Array5::from_shape_simple_fn(shape, || {
            let v: f64 = StandardNormal.sample(&mut rng);
            F::lit(v)
        })
    }

    fn scalar_loss(pass: &ForwardPass<f64>, re: &Array2<f64>, rf: &Array2<f64>) -> f64 {
        (&pass.embeddings * re).sum() + (&pass.features * rf).sum()
    }

    fn gradient_check(mode: Mode, dropout: f64) {
        let cfg = EncoderConfig { dropout, ..tiny_cfg() };
        let params = init_encoder::<f64>(&cfg, 11).unwrap().with_mode(mode);
        // give running stats non-trivial values for the eval-mode check
        let mut params = params;
        for (k, v) in params.tensors.iter_mut() {
            if k.ends_with("running_var") {
                v.mapv_inplace(|x| x * 1.7);
            } else if k.ends_with("running_mean") {
                v.mapv_inplace(|_| 0.05);
            }
        }
        let x = random_batch::<f64>((2, 3, 2, 8, 8), 5);
        let re = random_batch::<f64>((1, 1, 1, 2, 4), 6).into_shape_with_order((2, 4)).unwrap();
        let rf = random_batch::<f64>((1, 1, 1, 2, 8), 7).into_shape_with_order((2, 8)).unwrap();
        let pass = forward(&params, x.view(), 3).unwrap();
        let grads = backward(&params, &pass, Some(re.view()), Some(rf.view())).unwrap();
        let learnable: Vec<String> = params.learnable_names().cloned().collect();
        assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), learnable);

        let h = 1e-6;
        let mut worst = 0.0f64;
        for name in &learnable {
            for i in 0..params.tensors[name].len() {
                let mut p = params.clone();
                p.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
                let up = scalar_loss(&forward(&p, x.view(), 3).unwrap(), &re, &rf);
                p.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= 2.0 * h;
                let down = scalar_loss(&forward(&p, x.view(), 3).unwrap(), &re, &rf);
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[name].as_slice().unwrap()[i];
                let diff = (numeric - analytic).abs();
                let scale = numeric.abs().max(analytic.abs());
                if diff > 1e-7 {
                    let rel = diff / scale;
                    worst = worst.max(rel);
                    assert!(rel < 1e-3, "{name}[{i}]: analytic {analytic} numeric {numeric}");
                }
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences_train() {
        gradient_check(Mode::Train, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_eval() {
        gradient_check(Mode::Eval, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        gradient_check(Mode::Train, 0.3);
    }

    #[test]
    fn output_contracts() {
        let cfg = tiny_cfg();
        let params = init_encoder::<f32>(&cfg, 1).unwrap().with_mode(Mode::Eval);
        let x = random_batch::<f32>((3, 5, 2, 8, 8), 2);
        let pass = forward(&params, x.view(), 0).unwrap();
        assert_eq!(pass.embeddings.shape(), &[3, 4]);
        assert_eq!(pass.pooled.shape(), &[3, 8]);
        for row in pass.embeddings.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
        for row in pass.attention.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
        }
        // projection of the pooled features, normalized, is the embedding
        let mut z = pass.pooled.dot(&params.v2("proj.weight").t());
        z += &params.v1("proj.bias");
        for (zr, er) in z.outer_iter().zip(pass.embeddings.outer_iter()) {
            let n = zr.dot(&zr).sqrt();
            for (a, b) in zr.iter().zip(er.iter()) {
                assert!((a / n - b).abs() < 1e-5);
            }
        }
        assert_eq!(encode(&params, x.view()).unwrap(), pass.embeddings);

        let bad = random_batch::<f32>((1, 2, 3, 8, 8), 0);
        assert!(matches!(encode(&params, bad.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn single_step_attention_is_identity() {
        let params = init_encoder::<f32>(&tiny_cfg(), 1).unwrap().with_mode(Mode::Eval);
        let x = random_batch::<f32>((2, 1, 2, 8, 8), 3);
        let pass = forward(&params, x.view(), 0).unwrap();
        assert!(pass.attention.iter().all(|&a| a == 1.0));
        for bi in 0..2 {
            assert_eq!(pass.pooled.row(bi), pass.lstm.h.slice(s![1, bi, ..]));
        }
    }

    #[test]
    fn zero_input_is_finite_and_eval_is_deterministic() {
        let params = init_encoder::<f32>(&tiny_cfg(), 4).unwrap().with_mode(Mode::Eval);
        let zeros = Array5::<f32>::zeros((2, 4, 2, 8, 8));
        let e = encode(&params, zeros.view()).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        let x = random_batch::<f32>((2, 4, 2, 8, 8), 9);
        assert_eq!(encode(&params, x.view()).unwrap(), encode(&params, x.view()).unwrap());
    }

    #[test]
    fn batch_rows_are_independent_in_eval() {
        let params = init_encoder::<f32>(&tiny_cfg(), 4).unwrap().with_mode(Mode::Eval);
        let x = random_batch::<f32>((3, 4, 2, 8, 8), 10);
        let all = encode(&params, x.view()).unwrap();
        for i in 0..3 {
            let one = x.slice(s![i..i + 1, .., .., .., ..]);
            let e = encode(&params, one).unwrap();
            for (a, b) in e.row(0).iter().zip(all.row(i).iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn time_order_matters() {
        let params = init_encoder::<f32>(&tiny_cfg(), 4).unwrap().with_mode(Mode::Eval);
        for seed in 0..5 {
            let x = random_batch::<f32>((1, 5, 2, 8, 8), 20 + seed);
            let mut rev = x.clone();
            rev.invert_axis(Axis(1));
            assert_ne!(encode(&params, x.view()).unwrap(), encode(&params, rev.view()).unwrap());
        }
    }

    #[test]
    fn constant_input_gives_uniform_attention_after_warm_start() {
        // No recurrence and a closed forget gate: every step sees the same
        // input and the same (empty) memory, so all scores are equal.
        let mut params = init_encoder::<f32>(&tiny_cfg(), 4).unwrap().with_mode(Mode::Eval);
        params.tensors.get_mut("lstm.weight_hh").unwrap().fill(0.0);
        let hd = 8;
        params
            .tensors
            .get_mut("lstm.bias")
            .unwrap()
            .slice_mut(s![hd..2 * hd])
            .fill(-30.0);
        let x = Array5::<f32>::from_elem((2, 6, 2, 8, 8), 0.7);
        let a = attention_weights(&params, x.view()).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-5), "{a:?}");
    }

    #[test]
    fn running_stats_follow_batch_moments() {
        let mut params = init_encoder::<f32>(&tiny_cfg(), 4).unwrap();
        let x = random_batch::<f32>((2, 3, 2, 8, 8), 12);
        let pass = forward(&params, x.view(), 0).unwrap();
        update_running_stats(&mut params, &pass);
        let (mean, var) = &pass.bn_stats[0];
        let rm = params.v1("bn1.running_mean");
        let rv = params.v1("bn1.running_var");
        for c in 0..4 {
            assert!((rm[c] - 0.1 * mean[c]).abs() < 1e-6);
            assert!((rv[c] - (0.9 + 0.1 * var[c])).abs() < 1e-6);
        }
    }
}
