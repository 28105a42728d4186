//! Finite-difference verification of the analytic gradients in double
//! precision, over randomly drawn architectures, parameters and inputs.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::{ImageShape, Layer, LayerParams, NetworkSpec, NormMode, ParamSet, Reference};
use crate::rng::{self, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Random configurations to test.
    pub configs: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Largest accepted absolute error where `|analytic| <= SMALL_GRADIENT`.
    pub abs_tolerance: f64,
    /// Coordinates checked per parameter tensor and for the input.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { configs: 20, step: 1e-3, tolerance: 1e-4, abs_tolerance: 1e-7, coords: 6, seed: 0 }
    }
}

/// Outcome for one random configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub spec: NetworkSpec,
    pub batch: usize,
    pub mode: NormMode,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
    /// Over coordinates with `|analytic| > SMALL_GRADIENT`.
    pub max_rel_error: f64,
    /// Over the remaining coordinates.
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub abs_tolerance: f64,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_abs_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.max_rel_error() < self.tolerance && self.max_abs_error() < self.abs_tolerance
    }
}

/// Analytic gradients at or below this magnitude are compared absolutely.
pub const SMALL_GRADIENT: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale }
}

pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.configs == 0 || !(config.step > 0.0) || config.coords == 0 || !(config.abs_tolerance > 0.0) {
        return Err(Error::Config("gradcheck needs configs, coords and step > 0".into()));
    }
    let mut r = rng::seeded(config.seed);
    let mut cases = Vec::with_capacity(config.configs);
    for _ in 0..config.configs {
        cases.push(check_one(config, &mut r)?);
    }
    Ok(GradcheckReport { tolerance: config.tolerance, abs_tolerance: config.abs_tolerance, cases })
}

fn random_spec(r: &mut Rng) -> NetworkSpec {
    loop {
        let side = r.random_range(3..=8);
        let input = ImageShape::new(r.random_range(1..=3), side, side);
        let mut layers = Vec::new();
        for _ in 0..r.random_range(1..=3) {
            let kernel = [1, 3, 5][r.random_range(0..3)];
            layers.push(Layer::conv(r.random_range(1..=4), kernel, r.random_range(1..=2)));
            if r.random_bool(0.6) {
                layers.push(Layer::BatchNorm);
            }
            if r.random_bool(0.8) {
                layers.push(Layer::Relu);
            }
        }
        layers.push(Layer::FullyConnected { out_features: 1 });
        if let Ok(spec) = NetworkSpec::new(input, layers) {
            return spec;
        }
    }
}

/// Random parameters with unit-norm filters. Batch norm makes the score
/// invariant to the scale of the filters feeding it, so unit norm loses no
/// generality while keeping the finite-difference step well conditioned.
fn random_params(spec: &NetworkSpec, r: &mut Rng) -> Result<ParamSet<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut p = ParamSet::<f64>::init(spec, 1, r.random())?;
    for layer in p.layers_mut() {
        match layer {
            LayerParams::Conv { weight, bias } | LayerParams::FullyConnected { weight, bias } => {
                let outputs = bias.len();
                let fan_in = weight.len() / outputs;
                for filter in weight.data_mut().chunks_mut(fan_in) {
                    filter.iter_mut().for_each(|v| *v = normal.sample(r));
                    let norm = filter.iter().map(|v| v * v).sum::<f64>().sqrt();
                    filter.iter_mut().for_each(|v| *v /= norm);
                }
                bias.data_mut().iter_mut().for_each(|v| *v = 0.1 * normal.sample(r));
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                gamma.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
                beta.data_mut().iter_mut().for_each(|v| *v = 0.5 * normal.sample(r));
                running_mean.iter_mut().for_each(|v| *v = 0.5 * normal.sample(r));
                running_var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
            }
            LayerParams::Relu => {}
        }
    }
    Ok(p)
}

/// Rescales every convolution that feeds a batch-norm layer so its output
/// has unit batch variance on `y`. The score is invariant to that scale up to
/// the normalization epsilon, and a channel with a tiny spread would otherwise
/// turn a step of `1e-3` into a large relative perturbation.
fn standardize(params: &mut ParamSet<f64>, y: &Tensor<f64>) -> Result<()> {
    let fed: Vec<usize> = params
        .spec()
        .layers
        .windows(2)
        .enumerate()
        .filter(|(_, w)| matches!(w, [Layer::Conv { .. }, Layer::BatchNorm]))
        .map(|(i, _)| i)
        .collect();
    let bn_order: Vec<usize> =
        params.spec().layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::BatchNorm)).map(|(i, _)| i).collect();
    for conv in fed {
        let mut tape = Tape::new();
        let moments = params.record(&mut tape, y, false, false, NormMode::Batch)?.moments;
        let k = bn_order.iter().position(|&b| b == conv + 1).expect("conv feeds a batch-norm layer");
        let var = &moments[k].var;
        if let LayerParams::Conv { weight, bias } = &mut params.layers_mut()[conv] {
            let fan_in = weight.len() / bias.len();
            for (c, filter) in weight.data_mut().chunks_mut(fan_in).enumerate() {
                let scale = 1.0 / var[c].sqrt().max(1e-3);
                filter.iter_mut().for_each(|v| *v *= scale);
                bias.data_mut()[c] *= scale;
            }
        }
    }
    Ok(())
}

/// Objective value and ReLU pattern.
type Probe = (f64, Vec<bool>);

fn probe_params(p: &ParamSet<f64>, y: &Tensor<f64>, mode: NormMode) -> Result<Probe> {
    let mut tape = Tape::new();
    let rec = p.record(&mut tape, y, false, false, mode)?;
    let scores = tape.value(rec.score);
    Ok((scores.mean(), tape.relu_pattern()))
}

fn probe_input(p: &ParamSet<f64>, reference: &Reference, y: &Tensor<f64>, mode: NormMode) -> Result<Probe> {
    let mut tape = Tape::new();
    let rec = p.record(&mut tape, y, false, false, mode)?;
    let f = tape.value(rec.score).sum();
    let e0: f64 = reference.base_energy(y).iter().sum();
    Ok((e0 - f, tape.relu_pattern()))
}

fn check_one(config: &GradcheckConfig, r: &mut Rng) -> Result<GradcheckCase> {
    let spec = random_spec(r);
    let mut params = random_params(&spec, r)?;
    let mode = if r.random_bool(0.5) { NormMode::Batch } else { NormMode::Running };
    let batch = r.random_range(2..=4);
    let y = Tensor::from_fn(spec.input.batch(batch), |_, _, _, _| r.random_range(-1.0..1.0));
    standardize(&mut params, &y)?;
    let h = config.step;
    let reference = Reference::default();
    let mut case = GradcheckCase { spec: spec.clone(), batch, mode, checked: 0, skipped: 0, max_rel_error: 0.0, max_abs_error: 0.0 };
    let record = |case: &mut GradcheckCase, analytic: f64, plus: Probe, minus: Probe, base: &[bool]| {
        if plus.1 != base || minus.1 != base {
            case.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        case.checked += 1;
        if analytic.abs() > SMALL_GRADIENT {
            case.max_rel_error = case.max_rel_error.max(relative_error(analytic, numeric));
        } else {
            case.max_abs_error = case.max_abs_error.max((analytic - numeric).abs());
        }
    };

    let analytic = params.score_gradient(&y, mode)?;
    let base = probe_params(&params, &y, mode)?.1;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].len();
        for _ in 0..config.coords.min(len) {
            let k = r.random_range(0..len);
            let shifted = |delta: f64| -> Result<Probe> {
                let mut p = params.clone();
                p.tensors_mut()[ti].data_mut()[k] += delta;
                probe_params(&p, &y, mode)
            };
            let (plus, minus) = (shifted(h)?, shifted(-h)?);
            record(&mut case, analytic.tensors[ti].data()[k], plus, minus, &base);
        }
    }

    let (grad_y, _) = params.grad_input(&reference, &y, mode)?;
    let base = probe_input(&params, &reference, &y, mode)?.1;
    for _ in 0..config.coords {
        let k = r.random_range(0..y.len());
        let shifted = |delta: f64| -> Result<Probe> {
            let mut yy = y.clone();
            yy.data_mut()[k] += delta;
            probe_input(&params, &reference, &yy, mode)
        };
        let (plus, minus) = (shifted(h)?, shifted(-h)?);
        record(&mut case, grad_y.data()[k], plus, minus, &base);
    }
    Ok(case)
}
