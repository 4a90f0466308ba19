use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{cast_tensors, check_same_shapes, count_elements, NamedTensors, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Every tensor of the encoder, learnable or running statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F: Scalar> {
    pub cfg: EncoderConfig,
    pub tensors: NamedTensors<F>,
    pub mode: Mode,
}

/// Names and shapes implied by a configuration, in declaration order.
pub fn tensor_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let k = cfg.kernel;
    let h = cfg.lstm_hidden;
    let mut out = Vec::new();
    let mut cin = cfg.input_depth;
    for (i, &c) in cfg.conv_channels.iter().enumerate() {
        let l = i + 1;
        out.push((format!("conv{l}.weight"), vec![c, cin, k, k]));
        out.push((format!("conv{l}.bias"), vec![c]));
        for s in ["gain", "bias", "running_mean", "running_var"] {
            out.push((format!("bn{l}.{s}"), vec![c]));
        }
        cin = c;
    }
    out.push(("lstm.weight_ih".into(), vec![4 * h, cin]));
    out.push(("lstm.weight_hh".into(), vec![4 * h, h]));
    out.push(("lstm.bias".into(), vec![4 * h]));
    out.push(("attn.vector".into(), vec![h]));
    out.push(("proj.weight".into(), vec![cfg.embed_dim, h]));
    out.push(("proj.bias".into(), vec![cfg.embed_dim]));
    out
}

/// Running statistics are carried along but never receive gradients.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

pub fn init_encoder<F: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams<F>> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let mut tensors = NamedTensors::new();
    let mut conv_fan_in = 1usize;
    for (name, shape) in tensor_layout(cfg) {
        let n: usize = shape.iter().product();
        if name.starts_with("conv") && name.ends_with(".weight") {
            conv_fan_in = shape[1..].iter().product();
        }
        let bound = if name.starts_with("conv") {
            Some(1.0 / (conv_fan_in as f64).sqrt())
        } else if name.starts_with("lstm") || name.starts_with("proj") {
            Some(1.0 / (cfg.lstm_hidden as f64).sqrt())
        } else if name == "attn.vector" {
            Some(0.01)
        } else {
            None
        };
        let values: Vec<F> = match bound {
            Some(b) => (0..n).map(|_| F::lit(rng.random_range(-b..b))).collect(),
            None if name.ends_with(".gain") || name.ends_with(".running_var") => vec![F::one(); n],
            None => vec![F::zero(); n],
        };
        tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).expect("shape"));
    }
    Ok(EncoderParams {
        cfg: cfg.clone(),
        tensors,
        mode: Mode::Train,
    })
}

impl<F: Scalar> EncoderParams<F> {
    pub fn from_tensors(cfg: EncoderConfig, tensors: NamedTensors<F>, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        let expected = tensor_layout(&cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in expected {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!("{name}: {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Shape(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { cfg, tensors, mode })
    }

    pub fn param_count(&self) -> usize {
        count_elements(&self.tensors)
    }

    pub fn learnable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|k| is_learnable(k))
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        EncoderParams {
            cfg: self.cfg.clone(),
            tensors: cast_tensors(&self.tensors),
            mode: self.mode,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        check_same_shapes(&self.tensors, &other.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn get(&self, name: &str) -> &ArrayD<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("encoder tensor {name} missing"))
    }

    pub(crate) fn v1(&self, name: &str) -> ArrayView1<'_, F> {
        self.get(name).view().into_dimensionality::<Ix1>().expect("rank 1")
    }

    pub(crate) fn v2(&self, name: &str) -> ArrayView2<'_, F> {
        self.get(name).view().into_dimensionality::<Ix2>().expect("rank 2")
    }

    pub(crate) fn v4(&self, name: &str) -> ArrayView4<'_, F> {
        self.get(name).view().into_dimensionality::<Ix4>().expect("rank 4")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form element count, written out independently of `tensor_layout`.
    fn expected_count(cfg: &EncoderConfig) -> usize {
        let [c1, c2, c3] = cfg.conv_channels;
        let k2 = cfg.kernel * cfg.kernel;
        let z = cfg.input_depth;
        let h = cfg.lstm_hidden;
        let d = cfg.embed_dim;
        let conv = c1 * z * k2 + c1 + c2 * c1 * k2 + c2 + c3 * c2 * k2 + c3;
        let bn = 4 * (c1 + c2 + c3);
        let lstm = 4 * h * c3 + 4 * h * h + 4 * h;
        conv + bn + lstm + h + d * h + d
    }

    #[test]
    fn default_shapes_and_count() {
        let cfg = EncoderConfig::default();
        let p = init_encoder::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.get("conv1.weight").shape(), &[64, 32, 3, 3]);
        assert_eq!(p.get("lstm.weight_ih").shape(), &[1024, 256]);
        assert_eq!(p.get("proj.weight").shape(), &[128, 256]);
        assert_eq!(p.param_count(), expected_count(&cfg));
        // 18432+64 + 73728+128 + 294912+256 + 1792 + 262144+262144+1024 + 256 + 32768+128
        assert_eq!(expected_count(&cfg), 947_776);
        let tiny = EncoderConfig {
            conv_channels: [4, 4, 4],
            lstm_hidden: 8,
            embed_dim: 4,
            input_depth: 2,
            input_hw: (8, 8),
            ..EncoderConfig::default()
        };
        assert_eq!(init_encoder::<f64>(&tiny, 1).unwrap().param_count(), expected_count(&tiny));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = EncoderConfig::compact(4, (8, 8));
        let a = init_encoder::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, init_encoder::<f32>(&cfg, 3).unwrap());
        assert_ne!(a, init_encoder::<f32>(&cfg, 4).unwrap());
        assert!(a.get("bn2.gain").iter().all(|&v| v == 1.0));
        assert!(a.get("bn2.bias").iter().all(|&v| v == 0.0));
        assert!(a.get("attn.vector").iter().all(|&v| v.abs() <= 0.01));
        let bound = 1.0 / (4.0f32 * 9.0).sqrt();
        assert!(a.get("conv1.weight").iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn from_tensors_validates() {
        let cfg = EncoderConfig::compact(4, (8, 8));
        let a = init_encoder::<f32>(&cfg, 3).unwrap();
        assert!(EncoderParams::from_tensors(cfg.clone(), a.tensors.clone(), Mode::Eval).is_ok());
        let mut t = a.tensors.clone();
        t.insert("proj.bias".into(), ArrayD::zeros(IxDyn(&[3])));
        assert!(matches!(EncoderParams::from_tensors(cfg.clone(), t, Mode::Eval), Err(Error::Shape(_))));
        let mut t = a.tensors;
        t.remove("attn.vector");
        assert!(EncoderParams::from_tensors(cfg, t, Mode::Eval).is_err());
    }
}
