use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-forward state: training flag, dropout randomness, and the running
/// batch-norm statistics produced in training mode.
pub struct RunState<T> {
    pub train: bool,
    pub rng: Option<ChaCha8Rng>,
    pub bn_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Real> RunState<T> {
    pub fn infer() -> Self {
        Self {
            train: false,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    /// Writes collected running statistics into `store`.
    pub fn apply_bn_updates(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, value) in self.bn_updates.drain(..) {
            store.set_buffer(&name, value)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for an NCHW (or `[B, F]`) input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |detail: String| Error::shape(self.name(), detail);
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 4 || input[1] != in_channels {
                    return Err(err(format!("expected [B,{in_channels},H,W], got {input:?}")));
                }
                let dim = |s: usize| {
                    super::kernels::ConvGeom::out_dim(s, kernel, stride, padding)
                        .ok_or_else(|| err(format!("kernel {kernel} too large for {input:?}")))
                };
                Ok(vec![input[0], filters, dim(input[2])?, dim(input[3])?])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.len() < 2 || input[1] != channels {
                    return Err(err(format!("expected {channels} channels, got {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { kernel, stride } => {
                if input.len() != 4 || input[2] < kernel || input[3] < kernel || stride == 0 {
                    return Err(err(format!("cannot pool {input:?}")));
                }
                Ok(vec![
                    input[0],
                    input[1],
                    (input[2] - kernel) / stride + 1,
                    (input[3] - kernel) / stride + 1,
                ])
            }
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                if input.len() != 2 || input[1] != in_features {
                    return Err(err(format!("expected [B,{in_features}], got {input:?}")));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return Err(err("scalar input".into()));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }

    pub fn init_params<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                bias,
                ..
            } => init_conv(store, prefix, in_channels, filters, kernel, bias, rng),
            LayerSpec::BatchNorm { channels } => init_bn(store, prefix, channels),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                bias,
            } => init_dense(store, prefix, in_features, out_features, bias, rng),
            _ => {}
        }
    }
}

fn name_layer(prefix: &str, spec: &LayerSpec) -> impl Fn(Error) -> Error {
    let layer = format!("{} `{prefix}`", spec.name());
    move |e| match e {
        Error::Shape { detail, .. } => Error::Shape {
            context: layer.clone(),
            detail,
        },
        other => other,
    }
}

/// Applies one catalogue layer whose parameters live under `prefix`.
pub fn layer_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    st: &mut RunState<T>,
    spec: &LayerSpec,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    spec.output_shape(g.shape(x)).map_err(name_layer(prefix, spec))?;
    let out = match *spec {
        LayerSpec::Conv2d {
            stride,
            padding,
            bias,
            ..
        } => conv(g, p, prefix, x, stride, padding, bias),
        LayerSpec::BatchNorm { .. } => batch_norm(g, p, st, prefix, x),
        LayerSpec::Relu => Ok(g.relu(x)),
        LayerSpec::MaxPool { kernel, stride } => g.max_pool2d(x, kernel, stride),
        LayerSpec::FullyConnected { bias, .. } => dense(g, p, prefix, x, bias),
        LayerSpec::Dropout { rate } => dropout(g, st, x, rate),
        LayerSpec::Flatten => g.flatten(x),
        LayerSpec::Softmax => g.softmax_last(x),
    };
    out.map_err(name_layer(prefix, spec))
}

pub fn init_conv<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    let fan_in = (in_ch * k * k) as f64;
    store.insert_param(
        format!("{prefix}.weight"),
        Tensor::randn(&[out_ch, in_ch, k, k], 1.0 / fan_in.sqrt(), rng),
    );
    if bias {
        store.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
    }
}

pub fn init_dense<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_f: usize,
    out_f: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    store.insert_param(
        format!("{prefix}.weight"),
        Tensor::randn(&[out_f, in_f], 1.0 / (in_f as f64).sqrt(), rng),
    );
    if bias {
        store.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[out_f]));
    }
}

/// Equalized learning rate: weights are stored at unit variance and
/// multiplied by `1/√fan_in` at every use, so Adam's roughly lr-sized
/// steps are the same relative size in every layer.
pub fn he_gain(shape: &[usize]) -> f64 {
    1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt()
}

pub fn init_conv_eq<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    store.insert_param(format!("{prefix}.weight"), Tensor::randn(&[out_ch, in_ch, k, k], 1.0, rng));
    if bias {
        store.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
    }
}

pub fn init_dense_eq<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_f: usize,
    out_f: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    store.insert_param(format!("{prefix}.weight"), Tensor::randn(&[out_f, in_f], 1.0, rng));
    if bias {
        store.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[out_f]));
    }
}

/// The stored weight `name` times its He gain.
pub fn scaled_weight<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str) -> Result<Var> {
    let w = g.param(p, name)?;
    let c = he_gain(g.shape(w));
    Ok(g.scale(w, c))
}

pub fn init_bn<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
    store.insert_param(format!("{prefix}.weight"), Tensor::ones(&[channels]));
    store.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
}

/// Convolution with optional per-channel bias; kernel size comes from the
/// stored weight.
pub fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
    bias: bool,
) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.weight"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    if bias {
        let b = g.param(p, &format!("{prefix}.bias"))?;
        g.add_channel(y, b)
    } else {
        Ok(y)
    }
}

pub fn dense<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    bias: bool,
) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.weight"))?;
    let b = if bias {
        Some(g.param(p, &format!("{prefix}.bias"))?)
    } else {
        None
    };
    g.linear(x, w, b)
}

/// [`conv`] with an equalized-learning-rate weight.
pub fn conv_eq<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
    bias: bool,
) -> Result<Var> {
    let w = scaled_weight(g, p, &format!("{prefix}.weight"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    if bias {
        let b = g.param(p, &format!("{prefix}.bias"))?;
        g.add_channel(y, b)
    } else {
        Ok(y)
    }
}

/// [`dense`] with an equalized-learning-rate weight.
pub fn dense_eq<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    bias: bool,
) -> Result<Var> {
    let w = scaled_weight(g, p, &format!("{prefix}.weight"))?;
    let b = if bias {
        Some(g.param(p, &format!("{prefix}.bias"))?)
    } else {
        None
    };
    g.linear(x, w, b)
}

/// Batch norm over axis 1; batch statistics and running-stat updates in
/// training mode, stored running statistics otherwise.
pub fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    st: &mut RunState<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(p, &format!("{prefix}.weight"))?;
    let beta = g.param(p, &format!("{prefix}.bias"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let rm = p.buffer(&mean_name)?;
    let rv = p.buffer(&var_name)?;
    if st.train {
        let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
        let m = T::of(BN_MOMENTUM);
        let blend = |old: &Tensor<T>, new: &[T]| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(&o, &n)| (T::one() - m) * o + m * n)
                .collect();
            Tensor::new(old.shape().to_vec(), data).expect("same shape")
        };
        st.bn_updates.push((mean_name, blend(rm, &stats.mean)));
        st.bn_updates.push((var_name, blend(rv, &stats.var)));
        Ok(y)
    } else {
        g.batch_norm_infer(x, gamma, beta, rm.data(), rv.data(), BN_EPS)
    }
}

/// Inverted dropout; identity outside training mode.
pub fn dropout<T: Real>(g: &mut Graph<T>, st: &mut RunState<T>, x: Var, rate: f64) -> Result<Var> {
    if !st.train || rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::invalid("dropout rate must be below 1"));
    }
    let rng = st
        .rng
        .as_mut()
        .ok_or_else(|| Error::invalid("training-mode dropout needs an RNG"))?;
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() >= rate { keep } else { T::zero() })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}
