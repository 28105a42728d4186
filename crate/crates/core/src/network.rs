//! Energy-based generative ConvNet for one grid.
//!
//! The density is `p(Y) ∝ exp(f(Y)) p0(Y)` where `f` is a bottom-up ConvNet
//! score and `p0` a reference distribution. For a Gaussian reference the
//! energy is `E(Y) = |Y|^2 / (2 sigma^2) - f(Y)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{BatchMoments, NormStats, Tape, Var, BN_MOMENTUM};
use crate::tensor::{Scalar, Shape, Tensor};

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.01;

/// Channels, height and width of one image or feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        ImageShape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn batch(&self, n: usize) -> Shape {
        Shape::new(n, self.c, self.h, self.w)
    }

    pub fn of(shape: Shape) -> Self {
        ImageShape::new(shape.c, shape.h, shape.w)
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    FullyConnected { out_features: usize },
}

impl Layer {
    /// Convolution with zero padding `kernel / 2`: size preserving at
    /// stride 1, halving at stride 2.
    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Layer::Conv { out_channels, kernel, stride, padding: kernel / 2 }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { out_channels, kernel, stride, padding } => {
                write!(f, "conv{out_channels}k{kernel}s{stride}p{padding}")
            }
            Layer::BatchNorm => write!(f, "bn"),
            Layer::Relu => write!(f, "relu"),
            Layer::FullyConnected { out_features } => write!(f, "fc{out_features}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Spec(format!("unrecognized layer '{s}'"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match s {
            "bn" => Ok(Layer::BatchNorm),
            "relu" => Ok(Layer::Relu),
            _ if s.starts_with("fc") => Ok(Layer::FullyConnected { out_features: num(&s[2..])? }),
            _ if s.starts_with("conv") => {
                let rest = &s[4..];
                let (c, rest) = rest.split_once('k').ok_or_else(bad)?;
                let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
                let (st, p) = rest.split_once('p').ok_or_else(bad)?;
                Ok(Layer::Conv { out_channels: num(c)?, kernel: num(k)?, stride: num(st)?, padding: num(p)? })
            }
            _ => Err(bad()),
        }
    }
}

/// Declarative layer stack for one grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: ImageShape,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input: ImageShape, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec { input, layers };
        spec.shape_chain()?;
        Ok(spec)
    }

    /// Architecture for grid 1, 2 or 3 with channel counts multiplied by
    /// `channel_scale`.
    ///
    /// * grid 1: 5x5/2, 3x3/1, 3x3/1 with 96-128-256 channels
    /// * grid 2: 5x5/2, then three 3x3/1 with 96-128-256-512 channels
    /// * grid 3: 5x5/2, 3x3/2, 3x3/1 with 96-128-256 channels
    ///
    /// Every convolution is followed by batch norm and ReLU, and a
    /// fully-connected layer produces the scalar score.
    pub fn preset(grid: usize, input: ImageShape, channel_scale: f64) -> Result<Self> {
        if !(channel_scale > 0.0 && channel_scale.is_finite()) {
            return Err(Error::Spec(format!("channel scale must be positive, got {channel_scale}")));
        }
        let convs: Vec<(usize, usize, usize)> = match grid {
            1 => vec![(96, 5, 2), (128, 3, 1), (256, 3, 1)],
            2 => vec![(96, 5, 2), (128, 3, 1), (256, 3, 1), (512, 3, 1)],
            3 => vec![(96, 5, 2), (128, 3, 2), (256, 3, 1)],
            _ => return Err(Error::Spec(format!("no preset architecture for grid {grid}"))),
        };
        let mut layers = Vec::new();
        for (channels, kernel, stride) in convs {
            let scaled = ((channels as f64 * channel_scale).round() as usize).max(1);
            layers.extend([Layer::conv(scaled, kernel, stride), Layer::BatchNorm, Layer::Relu]);
        }
        layers.push(Layer::FullyConnected { out_features: 1 });
        NetworkSpec::new(input, layers)
    }

    /// Output shape of every layer, validating the stack.
    pub fn shape_chain(&self) -> Result<Vec<ImageShape>> {
        if self.input.is_empty() {
            return Err(Error::Spec("empty input shape".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        let mut chain = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                Layer::Conv { out_channels, kernel, stride, padding } => {
                    if out_channels == 0 {
                        return Err(Error::Spec(format!("layer {i}: zero output channels")));
                    }
                    let (h, w) = crate::tape::conv_out_size(cur.h, cur.w, kernel, kernel, stride, padding)
                        .ok_or_else(|| {
                            Error::Spec(format!("layer {i} ({layer}): input {cur} too small for the layer stack"))
                        })?;
                    ImageShape::new(out_channels, h, w)
                }
                Layer::BatchNorm | Layer::Relu => cur,
                Layer::FullyConnected { out_features } => {
                    if out_features == 0 {
                        return Err(Error::Spec(format!("layer {i}: zero outputs")));
                    }
                    ImageShape::new(out_features, 1, 1)
                }
            };
            chain.push(cur);
        }
        if cur.len() != 1 {
            return Err(Error::Spec(format!("final layer produces {cur}, expected a single score")));
        }
        Ok(chain)
    }

    /// Shape of the activation entering the final layer.
    pub fn feature_shape(&self) -> ImageShape {
        let chain = self.shape_chain().expect("validated spec");
        if chain.len() >= 2 {
            chain[chain.len() - 2]
        } else {
            self.input
        }
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.input)?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    /// Parses `CxHxW:layer,layer,...`, e.g. `1x2x2:fc1`.
    fn from_str(s: &str) -> Result<Self> {
        let (input, layers) = s.split_once(':').ok_or_else(|| Error::Spec(format!("missing ':' in '{s}'")))?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|_| Error::Spec(format!("bad input shape '{input}'"))))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else {
            return Err(Error::Spec(format!("bad input shape '{input}'")));
        };
        let layers = layers.split(',').map(|l| l.trim().parse()).collect::<Result<Vec<Layer>>>()?;
        NetworkSpec::new(ImageShape::new(c, h, w), layers)
    }
}

/// Reference distribution `p0` of the exponential tilting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    Gaussian { sigma: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for Reference {
    fn default() -> Self {
        Reference::Gaussian { sigma: 1.0 }
    }
}

impl Reference {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Reference::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("reference sigma must be positive, got {sigma}")))
            }
            Reference::Uniform { low, high } if !(low < high) => {
                Err(Error::Config(format!("reference bounds must be ordered, got [{low}, {high}]")))
            }
            _ => Ok(()),
        }
    }

    /// Pixel range the sampler clamps to, if any.
    pub fn clamp_range(&self) -> Option<(f64, f64)> {
        match *self {
            Reference::Gaussian { .. } => None,
            Reference::Uniform { low, high } => Some((low, high)),
        }
    }

    /// `-log p0(Y)` up to a constant, per batch item.
    pub fn base_energy<T: Scalar>(&self, y: &Tensor<T>) -> Vec<T> {
        match *self {
            Reference::Gaussian { sigma } => {
                let k = T::from_f64_lossy(0.5 / (sigma * sigma));
                (0..y.shape().n).map(|i| y.item(i).iter().map(|&v| v * v).sum::<T>() * k).collect()
            }
            Reference::Uniform { .. } => vec![T::zero(); y.shape().n],
        }
    }

    /// Gradient of [`Reference::base_energy`].
    pub fn base_gradient<T: Scalar>(&self, y: &Tensor<T>) -> Tensor<T> {
        match *self {
            Reference::Gaussian { sigma } => y.scale(T::from_f64_lossy(1.0 / (sigma * sigma))),
            Reference::Uniform { .. } => Tensor::zeros(y.shape()),
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Reference::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Reference::Uniform { low, high } => write!(f, "uniform:{low},{high}"),
        }
    }
}

/// `gaussian:SIGMA` or `uniform:LOW,HIGH`; a bare `gaussian` means sigma 1.
impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid reference '{s}' (gaussian:SIGMA or uniform:LOW,HIGH)"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let r = match s.trim().split_once(':') {
            None if s.trim() == "gaussian" => Reference::default(),
            Some(("gaussian", sigma)) => Reference::Gaussian { sigma: num(sigma)? },
            Some(("uniform", range)) => {
                let (low, high) = range.split_once(',').ok_or_else(bad)?;
                Reference::Uniform { low: num(low)?, high: num(high)? }
            }
            _ => return Err(bad()),
        };
        r.validate()?;
        Ok(r)
    }
}

/// Which batch-norm statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Statistics of the current batch (training mode).
    #[default]
    Batch,
    /// Stored running statistics (evaluation mode); examples are decoupled.
    Running,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Batch => "batch",
            NormMode::Running => "running",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "batch" => Ok(NormMode::Batch),
            "running" => Ok(NormMode::Running),
            _ => Err(Error::Config(format!("unknown normalization mode '{s}' (batch, running)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Scalar = f32> {
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    BatchNorm { gamma: Tensor<T>, beta: Tensor<T>, running_mean: Vec<T>, running_var: Vec<T> },
    Relu,
    FullyConnected { weight: Tensor<T>, bias: Tensor<T> },
}

/// Learnable parameters of one grid's network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    grid: usize,
    spec: NetworkSpec,
    layers: Vec<LayerParams<T>>,
}

/// Forward pass recorded on a tape.
pub struct Recorded<T: Scalar> {
    pub input: Var,
    /// Activation entering the final layer.
    pub features: Var,
    /// Per-example scores, `N x 1 x 1 x 1`.
    pub score: Var,
    /// Learnable tensors in [`ParamSet::tensors`] order.
    pub params: Vec<Var>,
    /// Batch moments of each batch-norm layer (batch mode only).
    pub moments: Vec<BatchMoments<T>>,
}

/// Batch mean of `∂f/∂θ` for one batch.
#[derive(Clone, Debug)]
pub struct ScoreGradient<T: Scalar> {
    pub tensors: Vec<Tensor<T>>,
    pub scores: Vec<T>,
    pub moments: Vec<BatchMoments<T>>,
}

/// Monte Carlo learning gradient: mean `∂f/∂θ` over observed minus mean
/// over synthesized examples.
#[derive(Clone, Debug)]
pub struct ParamGradient<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
    pub observed: ScoreGradient<T>,
    pub synthesized: ScoreGradient<T>,
}

impl<T: Scalar> ParamGradient<T> {
    pub fn l1_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.l1_norm().to_f64().unwrap()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

fn truncated_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Weights from a normal distribution with standard deviation
    /// [`INIT_STD`] truncated at two standard deviations; biases and betas
    /// zero, gammas one, running statistics at (0, 1).
    pub fn init(spec: &NetworkSpec, grid: usize, seed: u64) -> Result<Self> {
        let chain = spec.shape_chain()?;
        let mut rng = rng::seeded(seed);
        let mut prev = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut draw = |shape: Shape| {
            let data = (0..shape.len()).map(|_| T::from_f64_lossy(truncated_normal(&mut rng, INIT_STD))).collect();
            Tensor::new(shape, data).expect("sized")
        };
        for (layer, out) in spec.layers.iter().zip(&chain) {
            layers.push(match *layer {
                Layer::Conv { out_channels, kernel, .. } => LayerParams::Conv {
                    weight: draw(Shape::new(out_channels, prev.c, kernel, kernel)),
                    bias: Tensor::vector(vec![T::zero(); out_channels]),
                },
                Layer::BatchNorm => LayerParams::BatchNorm {
                    gamma: Tensor::vector(vec![T::one(); prev.c]),
                    beta: Tensor::vector(vec![T::zero(); prev.c]),
                    running_mean: vec![T::zero(); prev.c],
                    running_var: vec![T::one(); prev.c],
                },
                Layer::Relu => LayerParams::Relu,
                Layer::FullyConnected { out_features } => LayerParams::FullyConnected {
                    weight: draw(Shape::new(prev.len(), out_features, 1, 1)),
                    bias: Tensor::vector(vec![T::zero(); out_features]),
                },
            });
            prev = *out;
        }
        Ok(ParamSet { grid, spec: spec.clone(), layers })
    }

    /// Assembles a parameter set from explicit layer parameters, checking
    /// every shape against `spec`.
    pub fn from_layers(spec: &NetworkSpec, grid: usize, layers: Vec<LayerParams<T>>) -> Result<Self> {
        let reference = ParamSet::<T>::init(spec, grid, 0)?;
        if reference.layers.len() != layers.len() {
            return Err(Error::Spec(format!(
                "expected {} layer parameter entries, got {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        for (i, (a, b)) in reference.layers.iter().zip(&layers).enumerate() {
            let ok = match (a, b) {
                (LayerParams::Conv { weight: w0, bias: b0 }, LayerParams::Conv { weight, bias })
                | (
                    LayerParams::FullyConnected { weight: w0, bias: b0 },
                    LayerParams::FullyConnected { weight, bias },
                ) => w0.shape() == weight.shape() && b0.shape() == bias.shape(),
                (
                    LayerParams::BatchNorm { gamma: g0, .. },
                    LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
                ) => {
                    let c = g0.len();
                    gamma.shape() == g0.shape()
                        && beta.shape() == g0.shape()
                        && running_mean.len() == c
                        && running_var.len() == c
                }
                (LayerParams::Relu, LayerParams::Relu) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Spec(format!("layer {i} parameters do not match the spec")));
            }
        }
        Ok(ParamSet { grid, spec: spec.clone(), layers })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Conv { weight, bias } | LayerParams::FullyConnected { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerParams::Relu => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Conv { weight, bias } | LayerParams::FullyConnected { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerParams::Relu => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                gamma.all_finite()
                    && beta.all_finite()
                    && running_mean.iter().chain(running_var).all(|v| v.is_finite())
            }
            _ => true,
        }) && self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Conv { weight, bias } => LayerParams::Conv { weight: weight.cast(), bias: bias.cast() },
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => LayerParams::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: conv(running_mean),
                    running_var: conv(running_var),
                },
                LayerParams::Relu => LayerParams::Relu,
                LayerParams::FullyConnected { weight, bias } => {
                    LayerParams::FullyConnected { weight: weight.cast(), bias: bias.cast() }
                }
            })
            .collect();
        ParamSet { grid: self.grid, spec: self.spec.clone(), layers }
    }

    /// `θ += rate * direction` for every learnable tensor.
    pub fn ascend(&mut self, direction: &[Tensor<T>], rate: T) -> Result<()> {
        let mut tensors = self.tensors_mut();
        if tensors.len() != direction.len() {
            return Err(Error::dim(format!(
                "update has {} tensors, parameter set has {}",
                direction.len(),
                tensors.len()
            )));
        }
        for (p, g) in tensors.iter_mut().zip(direction) {
            p.axpy(rate, g)?;
        }
        Ok(())
    }

    /// Exponential moving average of batch-norm running statistics.
    pub fn update_running_stats(&mut self, moments: &[BatchMoments<T>]) -> Result<()> {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let mut it = moments.iter();
        for l in &mut self.layers {
            if let LayerParams::BatchNorm { running_mean, running_var, .. } = l {
                let mo = it.next().ok_or_else(|| Error::dim("missing batch moments"))?;
                let unbias = if mo.count > 1 {
                    T::from_usize(mo.count).unwrap() / T::from_usize(mo.count - 1).unwrap()
                } else {
                    T::one()
                };
                for c in 0..running_mean.len() {
                    running_mean[c] = (T::one() - m) * running_mean[c] + m * mo.mean[c];
                    running_var[c] = (T::one() - m) * running_var[c] + m * mo.var[c] * unbias;
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, y: &Tensor<T>) -> Result<()> {
        let s = y.shape();
        if ImageShape::of(s) != self.spec.input {
            return Err(Error::dim(format!("input {s} does not match network input {}", self.spec.input)));
        }
        if s.n == 0 {
            return Err(Error::Empty("empty batch".into()));
        }
        Ok(())
    }

    /// Records the forward pass of `y` on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        y: &Tensor<T>,
        input_grad: bool,
        param_grad: bool,
        mode: NormMode,
    ) -> Result<Recorded<T>> {
        self.check_input(y)?;
        let input = tape.leaf(y.clone(), input_grad);
        let mut params = Vec::new();
        let mut moments = Vec::new();
        let mut cur = input;
        let mut features = input;
        let last = self.layers.len() - 1;
        for (i, (layer, p)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            if i == last {
                features = cur;
            }
            cur = match (layer, p) {
                (Layer::Conv { stride, padding, .. }, LayerParams::Conv { weight, bias }) => {
                    let w = tape.leaf(weight.clone(), param_grad);
                    let b = tape.leaf(bias.clone(), param_grad);
                    params.extend([w, b]);
                    tape.conv2d(cur, w, b, *stride, *padding)?
                }
                (Layer::BatchNorm, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    let g = tape.leaf(gamma.clone(), param_grad);
                    let b = tape.leaf(beta.clone(), param_grad);
                    params.extend([g, b]);
                    let stats = match mode {
                        NormMode::Batch => NormStats::Batch,
                        NormMode::Running => NormStats::Running { mean: running_mean, var: running_var },
                    };
                    let (out, mo) = tape.batchnorm(cur, g, b, stats)?;
                    moments.extend(mo);
                    out
                }
                (Layer::Relu, LayerParams::Relu) => tape.relu(cur)?,
                (Layer::FullyConnected { .. }, LayerParams::FullyConnected { weight, bias }) => {
                    let w = tape.leaf(weight.clone(), param_grad);
                    let b = tape.leaf(bias.clone(), param_grad);
                    params.extend([w, b]);
                    tape.fully_connected(cur, w, b)?
                }
                _ => return Err(Error::Spec(format!("layer {i} parameters do not match the spec"))),
            };
        }
        Ok(Recorded { input, features, score: cur, params, moments })
    }

    /// Per-example scores `f(Y_i)`.
    pub fn score(&self, y: &Tensor<T>, mode: NormMode) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, y, false, false, mode)?;
        Ok(tape.value(rec.score).data().to_vec())
    }

    /// Activations entering the final layer, `N x C' x H' x W'`.
    pub fn features(&self, y: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, y, false, false, mode)?;
        Ok(tape.value(rec.features).clone())
    }

    /// Per-example energies.
    pub fn energy(&self, reference: &Reference, y: &Tensor<T>, mode: NormMode) -> Result<Vec<T>> {
        let scores = self.score(y, mode)?;
        Ok(reference.base_energy(y).into_iter().zip(scores).map(|(e0, f)| e0 - f).collect())
    }

    /// `∂E/∂Y` for every example, together with the scores of the pass.
    ///
    /// In batch mode the examples are coupled through the batch statistics
    /// and the gradient is that of the summed energy.
    pub fn grad_input(&self, reference: &Reference, y: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, y, true, false, mode)?;
        let scores = tape.value(rec.score).data().to_vec();
        let seed = Tensor::full(tape.value(rec.score).shape(), T::one());
        let grads = tape.backward_seeded(rec.score, seed)?;
        let df = grads.get(rec.input).ok_or_else(|| Error::Tape("no input gradient".into()))?;
        let grad = reference.base_gradient(y).sub(df)?;
        Ok((grad, scores))
    }

    /// Batch mean of `∂f/∂θ`.
    pub fn score_gradient(&self, y: &Tensor<T>, mode: NormMode) -> Result<ScoreGradient<T>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, y, false, true, mode)?;
        let out = tape.value(rec.score);
        let scores = out.data().to_vec();
        let inv_n = T::one() / T::from_usize(out.shape().n).unwrap();
        let mut grads = tape.backward_seeded(rec.score, Tensor::full(out.shape(), inv_n))?;
        let tensors = rec
            .params
            .iter()
            .map(|&v| grads.take(v).ok_or_else(|| Error::Tape("missing parameter gradient".into())))
            .collect::<Result<_>>()?;
        Ok(ScoreGradient { tensors, scores, moments: rec.moments })
    }

    /// Ascent direction of the log-likelihood: mean `∂f/∂θ` over `y_obs`
    /// minus mean over `y_syn`. Each batch is normalized with its own
    /// statistics in batch mode.
    pub fn grad_params(&self, y_obs: &Tensor<T>, y_syn: &Tensor<T>, mode: NormMode) -> Result<ParamGradient<T>> {
        if y_obs.shape().n == 0 || y_syn.shape().n == 0 {
            return Err(Error::Empty("grad_params needs nonempty observed and synthesized batches".into()));
        }
        let observed = self.score_gradient(y_obs, mode)?;
        let synthesized = self.score_gradient(y_syn, mode)?;
        let tensors = observed
            .tensors
            .iter()
            .zip(&synthesized.tensors)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        Ok(ParamGradient { tensors, observed, synthesized })
    }
}
