//! Model representation and forward inference with per-layer capture.
//!
//! A [`NetworkModel`] is an ordered list of layers over a fixed input
//! shape. Convolution layers may carry batch-norm parameters and a ReLU;
//! residual blocks are expressed with begin/end markers whose branches
//! must agree in shape. [`forward`] evaluates one sample and can record
//! taps: the pre-normalization feature map `Z` and the post-activation
//! map `A` of any layer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{conv2d, Matrix, Tensor3, Tensor4, Vector};

/// Per-layer activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply(self, data: &mut [f64]) {
        if self == Activation::Relu {
            for v in data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Batch normalization parameters for one convolution layer.
///
/// `sigma` is the running standard deviation with any stabilizing
/// epsilon already folded in, so the transform is literally
/// `gamma * (z - mu) / sigma + beta` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl BatchNormParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let m = gamma.len();
        if beta.len() != m || mu.len() != m || sigma.len() != m {
            return Err(Error::InvalidBatchNorm {
                detail: format!(
                    "array lengths differ: gamma {}, beta {}, mu {}, sigma {}",
                    m,
                    beta.len(),
                    mu.len(),
                    sigma.len()
                ),
            });
        }
        for (i, &s) in sigma.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidBatchNorm {
                    detail: format!("sigma[{i}] = {s} must be positive"),
                });
            }
        }
        for arr in [&gamma, &beta, &mu] {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidBatchNorm {
                    detail: "non-finite parameter".into(),
                });
            }
        }
        Ok(Self {
            gamma,
            beta,
            mu,
            sigma,
        })
    }

    /// Builds from `(variance, epsilon)` pairs, folding them into
    /// `sigma = sqrt(var + eps)`.
    pub fn from_var_eps(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mu: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<Self> {
        let sigma = var.iter().map(|&v| math::sqrt(v + eps)).collect();
        Self::new(gamma, beta, mu, sigma)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Parameters restricted to the listed channels, in order.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let pick = |arr: &[f64]| -> Result<Vec<f64>> {
            keep.iter()
                .map(|&i| {
                    arr.get(i).copied().ok_or_else(|| Error::InvalidBatchNorm {
                        detail: format!("channel {} out of {}", i, arr.len()),
                    })
                })
                .collect()
        };
        Self::new(
            pick(&self.gamma)?,
            pick(&self.beta)?,
            pick(&self.mu)?,
            pick(&self.sigma)?,
        )
    }
}

/// One layer of a [`NetworkModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        weights: Tensor4,
        stride: usize,
        padding: usize,
        bn: Option<BatchNormParams>,
        activation: Activation,
    },
    Fc {
        weights: Matrix,
        bias: Option<Vector>,
        activation: Activation,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Saves the current activation as the identity branch of a residual
    /// block.
    ResidualBegin,
    /// Adds the saved identity branch back, then applies `activation`.
    ResidualEnd {
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::Fc { .. } => "fc",
            Self::MaxPool { .. } => "maxpool",
            Self::AvgPool { .. } => "avgpool",
            Self::Flatten => "flatten",
            Self::ResidualBegin => "residual_begin",
            Self::ResidualEnd { .. } => "residual_end",
        }
    }
}

/// Shape of the data flowing out of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeInfo {
    Map { c: usize, w: usize, h: usize },
    Flat { len: usize },
}

/// Ordered layer graph with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<LayerSpec>,
    pub input_shape: (usize, usize, usize),
    pub metadata: BTreeMap<String, String>,
}

fn pool_dim(extent: usize, kernel: usize, stride: usize, layer: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Geometry {
            detail: format!("layer {layer}: pool kernel and stride must be positive"),
        });
    }
    if extent < kernel {
        return Err(Error::Geometry {
            detail: format!("layer {layer}: pool kernel {kernel} exceeds extent {extent}"),
        });
    }
    let span = extent - kernel;
    if span % stride != 0 {
        return Err(Error::Geometry {
            detail: format!("layer {layer}: pool stride {stride} does not divide {span}"),
        });
    }
    Ok(span / stride + 1)
}

impl NetworkModel {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: (usize, usize, usize),
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let model = Self {
            layers,
            input_shape,
            metadata,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks layer-to-layer shape consistency and residual nesting,
    /// returning the shape flowing out of every layer.
    pub fn validate(&self) -> Result<Vec<ShapeInfo>> {
        let (c, w, h) = self.input_shape;
        let mut current = ShapeInfo::Map { c, w, h };
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut residual_stack: Vec<ShapeInfo> = Vec::new();

        for (idx, layer) in self.layers.iter().enumerate() {
            let mismatch = |detail: String| Error::ShapeMismatch {
                context: "NetworkModel::validate",
                detail: format!("layer {idx}: {detail}"),
            };
            current = match layer {
                LayerSpec::Conv {
                    weights,
                    stride,
                    padding,
                    bn,
                    ..
                } => {
                    let ShapeInfo::Map { c, w, h } = current else {
                        return Err(mismatch("conv needs a feature-map input".into()));
                    };
                    let (m, n, k1, k2) = weights.shape();
                    if n != c {
                        return Err(mismatch(format!("conv expects {n} channels, input has {c}")));
                    }
                    if k1 != k2 {
                        return Err(mismatch(format!("kernels must be square, got {k1}x{k2}")));
                    }
                    if let Some(bn) = bn {
                        if bn.channels() != m {
                            return Err(Error::InvalidBatchNorm {
                                detail: format!(
                                    "layer {idx}: bn has {} channels, conv produces {m}",
                                    bn.channels()
                                ),
                            });
                        }
                    }
                    if *stride == 0 {
                        return Err(Error::Geometry {
                            detail: format!("layer {idx}: stride must be positive"),
                        });
                    }
                    let span = |e: usize| -> Result<usize> {
                        let padded = e + 2 * padding;
                        if padded < k1 || (padded - k1) % stride != 0 {
                            return Err(Error::Geometry {
                                detail: format!("layer {idx}: conv geometry invalid"),
                            });
                        }
                        Ok((padded - k1) / stride + 1)
                    };
                    ShapeInfo::Map {
                        c: m,
                        w: span(w)?,
                        h: span(h)?,
                    }
                }
                LayerSpec::Fc { weights, bias, .. } => {
                    let ShapeInfo::Flat { len } = current else {
                        return Err(mismatch("fc needs a flattened input".into()));
                    };
                    if weights.cols() != len {
                        return Err(mismatch(format!(
                            "fc expects {} inputs, got {len}",
                            weights.cols()
                        )));
                    }
                    if let Some(b) = bias {
                        if b.len() != weights.rows() {
                            return Err(mismatch(format!(
                                "bias has {} entries, fc produces {}",
                                b.len(),
                                weights.rows()
                            )));
                        }
                    }
                    ShapeInfo::Flat {
                        len: weights.rows(),
                    }
                }
                LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                    let ShapeInfo::Map { c, w, h } = current else {
                        return Err(mismatch("pool needs a feature-map input".into()));
                    };
                    ShapeInfo::Map {
                        c,
                        w: pool_dim(w, *kernel, *stride, idx)?,
                        h: pool_dim(h, *kernel, *stride, idx)?,
                    }
                }
                LayerSpec::Flatten => {
                    let ShapeInfo::Map { c, w, h } = current else {
                        return Err(mismatch("flatten needs a feature-map input".into()));
                    };
                    ShapeInfo::Flat { len: c * w * h }
                }
                LayerSpec::ResidualBegin => {
                    residual_stack.push(current);
                    current
                }
                LayerSpec::ResidualEnd { .. } => {
                    let Some(saved) = residual_stack.pop() else {
                        return Err(mismatch("residual end without begin".into()));
                    };
                    if saved != current {
                        return Err(mismatch("residual branches disagree in shape".into()));
                    }
                    current
                }
            };
            shapes.push(current);
        }
        if !residual_stack.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "NetworkModel::validate",
                detail: "unclosed residual block".into(),
            });
        }
        Ok(shapes)
    }
}

/// Data flowing between layers: a feature map or a flattened vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Map(Tensor3),
    Flat(Vector),
}

impl Feature {
    pub fn data(&self) -> &[f64] {
        match self {
            Self::Map(t) => t.data(),
            Self::Flat(v) => v.data(),
        }
    }

    pub fn as_map(&self) -> Option<&Tensor3> {
        match self {
            Self::Map(t) => Some(t),
            Self::Flat(_) => None,
        }
    }

    pub fn as_flat(&self) -> Option<&Vector> {
        match self {
            Self::Flat(v) => Some(v),
            Self::Map(_) => None,
        }
    }

    fn apply(&mut self, act: Activation) {
        match self {
            Self::Map(t) => act.apply(t.data_mut()),
            Self::Flat(v) => act.apply(v.data_mut()),
        }
    }
}

/// Captured layer state: `pre` is the feature map before normalization
/// and activation (`Z`), `post` the layer output (`A`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub pre: Feature,
    pub post: Feature,
}

/// Taps for a batch of samples: layer index to one [`Tap`] per sample,
/// in sample order.
#[derive(Debug, Clone, Default)]
pub struct TapRecord {
    pub taps: BTreeMap<usize, Vec<Tap>>,
}

impl TapRecord {
    pub fn layer(&self, idx: usize) -> Result<&[Tap]> {
        self.taps
            .get(&idx)
            .map(Vec::as_slice)
            .ok_or(Error::MissingTap { layer: idx })
    }
}

/// Applies batch normalization per channel:
/// `out[i] = gamma[i] * (z[i] - mu[i]) / sigma[i] + beta[i]`.
pub fn batch_norm_apply(z: &Tensor3, bn: &BatchNormParams) -> Result<Tensor3> {
    let (c, w, h) = z.shape();
    if bn.channels() != c {
        return Err(Error::ShapeMismatch {
            context: "batch_norm_apply",
            detail: format!("{} channels vs {} bn entries", c, bn.channels()),
        });
    }
    let mut out = z.clone();
    let plane = w * h;
    for ch in 0..c {
        let g = bn.gamma[ch];
        let b = bn.beta[ch];
        let m = bn.mu[ch];
        let s = bn.sigma[ch];
        let slice = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        for v in slice.iter_mut() {
            *v = g * (*v - m) / s + b;
        }
    }
    Ok(out)
}

fn max_pool(input: &Tensor3, kernel: usize, stride: usize, layer: usize) -> Result<Tensor3> {
    let (c, w, h) = input.shape();
    let ow = pool_dim(w, kernel, stride, layer)?;
    let oh = pool_dim(h, kernel, stride, layer)?;
    let mut out = Tensor3::zeros(c, ow, oh);
    for ch in 0..c {
        for ox in 0..ow {
            for oy in 0..oh {
                let mut best = f64::NEG_INFINITY;
                for kx in 0..kernel {
                    for ky in 0..kernel {
                        let v = input.at(ch, ox * stride + kx, oy * stride + ky);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.set(ch, ox, oy, best);
            }
        }
    }
    Ok(out)
}

fn avg_pool(input: &Tensor3, kernel: usize, stride: usize, layer: usize) -> Result<Tensor3> {
    let (c, w, h) = input.shape();
    let ow = pool_dim(w, kernel, stride, layer)?;
    let oh = pool_dim(h, kernel, stride, layer)?;
    let area = (kernel * kernel) as f64;
    let mut out = Tensor3::zeros(c, ow, oh);
    for ch in 0..c {
        for ox in 0..ow {
            for oy in 0..oh {
                let mut acc = 0.0;
                for kx in 0..kernel {
                    for ky in 0..kernel {
                        acc += input.at(ch, ox * stride + kx, oy * stride + ky);
                    }
                }
                out.set(ch, ox, oy, acc / area);
            }
        }
    }
    Ok(out)
}

/// Runs one sample through the model, capturing taps at the requested
/// layer indices. Taps never perturb the computation.
pub fn forward(
    model: &NetworkModel,
    input: &Tensor3,
    capture: &BTreeSet<usize>,
) -> Result<(Feature, BTreeMap<usize, Tap>)> {
    if input.shape() != model.input_shape {
        return Err(Error::ShapeMismatch {
            context: "forward",
            detail: format!(
                "input {:?} vs model {:?}",
                input.shape(),
                model.input_shape
            ),
        });
    }
    let mut current = Feature::Map(input.clone());
    let mut taps = BTreeMap::new();
    let mut residual_stack: Vec<Feature> = Vec::new();

    for (idx, layer) in model.layers.iter().enumerate() {
        let mismatch = |detail: &str| Error::ShapeMismatch {
            context: "forward",
            detail: format!("layer {idx}: {detail}"),
        };
        let mut pre: Option<Feature> = None;
        current = match layer {
            LayerSpec::Conv {
                weights,
                stride,
                padding,
                bn,
                activation,
            } => {
                let map = current.as_map().ok_or_else(|| mismatch("expected map"))?;
                let z = conv2d(map, weights, *stride, *padding)?;
                if capture.contains(&idx) {
                    pre = Some(Feature::Map(z.clone()));
                }
                let mut a = Feature::Map(match bn {
                    Some(bn) => batch_norm_apply(&z, bn)?,
                    None => z,
                });
                a.apply(*activation);
                a
            }
            LayerSpec::Fc {
                weights,
                bias,
                activation,
            } => {
                let x = current.as_flat().ok_or_else(|| mismatch("expected flat"))?;
                let mut z = weights.matvec(x)?;
                if let Some(b) = bias {
                    for (zi, bi) in z.data_mut().iter_mut().zip(b.data()) {
                        *zi += bi;
                    }
                }
                if capture.contains(&idx) {
                    pre = Some(Feature::Flat(z.clone()));
                }
                let mut a = Feature::Flat(z);
                a.apply(*activation);
                a
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let map = current.as_map().ok_or_else(|| mismatch("expected map"))?;
                Feature::Map(max_pool(map, *kernel, *stride, idx)?)
            }
            LayerSpec::AvgPool { kernel, stride } => {
                let map = current.as_map().ok_or_else(|| mismatch("expected map"))?;
                Feature::Map(avg_pool(map, *kernel, *stride, idx)?)
            }
            LayerSpec::Flatten => {
                let map = current.as_map().ok_or_else(|| mismatch("expected map"))?;
                Feature::Flat(Vector::from(map.data().to_vec()))
            }
            LayerSpec::ResidualBegin => {
                residual_stack.push(current.clone());
                current
            }
            LayerSpec::ResidualEnd { activation } => {
                let saved = residual_stack
                    .pop()
                    .ok_or_else(|| mismatch("residual end without begin"))?;
                let (Feature::Map(a), Feature::Map(b)) = (&current, &saved) else {
                    return Err(mismatch("residual add needs feature maps"));
                };
                if a.shape() != b.shape() {
                    return Err(mismatch("residual branches disagree in shape"));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| x + y)
                    .collect();
                let (c, w, h) = a.shape();
                let mut sum = Feature::Map(Tensor3::new(c, w, h, data)?);
                if capture.contains(&idx) {
                    pre = Some(sum.clone());
                }
                sum.apply(*activation);
                sum
            }
        };
        if capture.contains(&idx) {
            taps.insert(
                idx,
                Tap {
                    pre: pre.unwrap_or_else(|| current.clone()),
                    post: current.clone(),
                },
            );
        }
    }
    Ok((current, taps))
}

/// Runs every sample through the model, collecting outputs plus a
/// [`TapRecord`] across the batch.
pub fn forward_batch(
    model: &NetworkModel,
    inputs: &[Tensor3],
    capture: &BTreeSet<usize>,
) -> Result<(Vec<Feature>, TapRecord)> {
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut record = TapRecord::default();
    for input in inputs {
        let (out, taps) = forward(model, input, capture)?;
        outputs.push(out);
        for (idx, tap) in taps {
            record.taps.entry(idx).or_default().push(tap);
        }
    }
    Ok((outputs, record))
}

struct SynthRng {
    rng: ChaCha8Rng,
    unit: Normal<f64>,
    small: Normal<f64>,
    affine: Uniform<f64>,
}

impl SynthRng {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            unit: Normal::new(0.0, 1.0).expect("valid normal"),
            small: Normal::new(0.0, 0.1).expect("valid normal"),
            affine: Uniform::new(0.5, 1.5).expect("valid uniform"),
        }
    }

    /// He-style init: `N(0, 2 / fan_in)`.
    fn weights(&mut self, count: usize, fan_in: usize) -> Vec<f64> {
        let std = math::sqrt(2.0 / fan_in as f64);
        (0..count)
            .map(|_| std * self.unit.sample(&mut self.rng))
            .collect()
    }

    fn bn(&mut self, m: usize) -> BatchNormParams {
        let gamma = (0..m).map(|_| self.affine.sample(&mut self.rng)).collect();
        let beta = (0..m).map(|_| self.small.sample(&mut self.rng)).collect();
        let mu = (0..m).map(|_| self.small.sample(&mut self.rng)).collect();
        let sigma = (0..m).map(|_| self.affine.sample(&mut self.rng)).collect();
        BatchNormParams::new(gamma, beta, mu, sigma).expect("synthetic bn is valid")
    }

    fn conv(&mut self, m: usize, n: usize, k: usize, activation: Activation) -> LayerSpec {
        let weights = Tensor4::new(m, n, k, k, self.weights(m * n * k * k, n * k * k))
            .expect("synthetic conv weights");
        let bn = Some(self.bn(m));
        LayerSpec::Conv {
            weights,
            stride: 1,
            padding: 1,
            bn,
            activation,
        }
    }

    fn fc(&mut self, out: usize, inp: usize, activation: Activation) -> LayerSpec {
        let weights =
            Matrix::new(out, inp, self.weights(out * inp, inp)).expect("synthetic fc weights");
        let bias = Vector::new((0..out).map(|_| self.small.sample(&mut self.rng)).collect())
            .expect("synthetic fc bias");
        LayerSpec::Fc {
            weights,
            bias: Some(bias),
            activation,
        }
    }
}

/// Builds a deterministic synthetic model. `scale` multiplies every
/// hidden width; weights are He-initialized, batch-norm affine
/// parameters drawn from `U(0.5, 1.5)` and `N(0, 0.1)`.
///
/// * `vgg-tiny`: four 3x3 conv+BN+ReLU layers (8s, 8s, 16s, 16s
///   filters) over a 3x8x8 input, then flatten and one FC to 10 logits.
/// * `resnet-tiny`: a conv stem plus two basic residual blocks of two
///   conv layers each (8s filters throughout), global average pooling,
///   and an FC head.
/// * `mlp-tiny`: flatten of a 1x8x8 input followed by three FC layers
///   (30s, 10s, 10) with ReLU between them.
pub fn generate_synthetic(arch: &str, seed: u64, scale: usize) -> Result<NetworkModel> {
    if scale < 1 {
        return Err(Error::InvalidHyperparams {
            detail: "scale must be at least 1".into(),
        });
    }
    let mut r = SynthRng::new(seed);
    let mut metadata = BTreeMap::new();
    metadata.insert("arch".into(), String::from(arch));
    metadata.insert("seed".into(), format!("{seed}"));
    metadata.insert("scale".into(), format!("{scale}"));

    let (layers, input_shape) = match arch {
        "vgg-tiny" => {
            let widths = [8 * scale, 8 * scale, 16 * scale, 16 * scale];
            let mut layers = Vec::new();
            let mut c_in = 3;
            for &m in &widths {
                layers.push(r.conv(m, c_in, 3, Activation::Relu));
                c_in = m;
            }
            layers.push(LayerSpec::Flatten);
            layers.push(r.fc(10, c_in * 8 * 8, Activation::None));
            (layers, (3, 8, 8))
        }
        "resnet-tiny" => {
            let width = 8 * scale;
            let mut layers = Vec::new();
            layers.push(r.conv(width, 3, 3, Activation::Relu));
            for _ in 0..2 {
                layers.push(LayerSpec::ResidualBegin);
                layers.push(r.conv(width, width, 3, Activation::Relu));
                layers.push(r.conv(width, width, 3, Activation::None));
                layers.push(LayerSpec::ResidualEnd {
                    activation: Activation::Relu,
                });
            }
            layers.push(LayerSpec::AvgPool {
                kernel: 8,
                stride: 1,
            });
            layers.push(LayerSpec::Flatten);
            layers.push(r.fc(10, width, Activation::None));
            (layers, (3, 8, 8))
        }
        "mlp-tiny" => {
            let (w1, w2) = (30 * scale, 10 * scale);
            let layers = alloc::vec![
                LayerSpec::Flatten,
                r.fc(w1, 64, Activation::Relu),
                r.fc(w2, w1, Activation::Relu),
                r.fc(10, w2, Activation::None),
            ];
            (layers, (1, 8, 8))
        }
        other => return Err(Error::UnknownArch(other.into())),
    };
    NetworkModel::new(layers, input_shape, metadata)
}
