//! Finite-step Langevin dynamics
//!
//! ```text
//! Y <- Y - (δ²/2) ∂E/∂Y + δ U,   U ~ N(0, I)
//! ```
//!
//! plus the coarse-to-fine sweep across grids and a masked variant that
//! only moves the pixels under a mask.

use log::warn;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::{NormMode, ParamSet, Reference};
use crate::pyramid::upscale;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    /// Steps per chain run (`l`).
    pub steps: usize,
    /// Step size `δ`.
    pub step_size: f64,
    /// Clamp pixels to this range after every step.
    pub clamp: Option<(f64, f64)>,
    pub seed: u64,
    /// Batch-norm statistics used for the energy gradient.
    pub norm_mode: NormMode,
    /// Test hook: replace the injected noise by zero.
    pub zero_noise: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig { steps: 30, step_size: 0.3, clamp: None, seed: 0, norm_mode: NormMode::Batch, zero_noise: false }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("Langevin steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("Langevin step size must be positive, got {}", self.step_size)));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::Config(format!("clamp range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        LangevinConfig { seed, ..self }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        LangevinConfig { steps, ..self }
    }
}

/// Total Langevin steps per image for a multi-grid sweep.
pub fn multigrid_budget(grids: usize, steps: usize) -> usize {
    grids * steps
}

/// Batch of chains evolving under one grid's model.
#[derive(Clone, Debug)]
pub struct ChainState<T: Scalar = f32> {
    pub y: Tensor<T>,
    pub grid: usize,
    pub step: usize,
}

impl<T: Scalar> ChainState<T> {
    pub fn new(y: Tensor<T>, grid: usize) -> Self {
        ChainState { y, grid, step: 0 }
    }
}

/// Options of a single transition.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions<'a, T: Scalar> {
    pub clamp: Option<(f64, f64)>,
    pub norm_mode: NormMode,
    pub zero_noise: bool,
    /// Only pixels where the mask is nonzero move (`N x 1 x H x W` or
    /// `1 x 1 x H x W`, broadcast over channels).
    pub mask: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> StepOptions<'a, T> {
    fn from_config(config: &LangevinConfig, mask: Option<&'a Tensor<T>>) -> Self {
        StepOptions { clamp: config.clamp, norm_mode: config.norm_mode, zero_noise: config.zero_noise, mask }
    }
}

/// One Langevin transition of every chain in `state`.
pub fn langevin_step<T: Scalar>(
    params: &ParamSet<T>,
    reference: &Reference,
    state: &mut ChainState<T>,
    step_size: f64,
    rng: &mut Rng,
    opts: &StepOptions<'_, T>,
) -> Result<()> {
    let (grad, _) = params.grad_input(reference, &state.y, opts.norm_mode)?;
    if !grad.all_finite() {
        return Err(Error::SamplerDivergence {
            step: state.step,
            max_abs: state.y.max_abs().to_f64().unwrap_or(f64::NAN),
        });
    }
    let shape = state.y.shape();
    let drift = T::from_f64_lossy(step_size * step_size / 2.0);
    let delta = T::from_f64_lossy(step_size);
    let clamp = opts.clamp.map(|(lo, hi)| (T::from_f64_lossy(lo), T::from_f64_lossy(hi)));
    let plane = shape.plane();
    let mask = opts.mask.map(|m| (m.data(), m.shape().n));
    let y = state.y.data_mut();
    for (i, (v, &g)) in y.iter_mut().zip(grad.data()).enumerate() {
        let u: f64 = if opts.zero_noise { 0.0 } else { rng.sample(StandardNormal) };
        if let Some((m, mn)) = mask {
            let n = i / shape.item_len();
            let p = i % plane;
            let mi = if mn == 1 { p } else { n * plane + p };
            if m[mi] == T::zero() {
                continue;
            }
        }
        let mut next = *v - drift * g + delta * T::from_f64_lossy(u);
        if let Some((lo, hi)) = clamp {
            next = next.max(lo).min(hi);
        }
        *v = next;
    }
    state.step += 1;
    if !state.y.all_finite() {
        return Err(Error::SamplerDivergence { step: state.step, max_abs: f64::INFINITY });
    }
    Ok(())
}

/// Runs `config.steps` transitions from `init`.
pub fn run_chain<T: Scalar>(
    params: &ParamSet<T>,
    reference: &Reference,
    init: &Tensor<T>,
    config: &LangevinConfig,
) -> Result<Tensor<T>> {
    run(params, reference, init, config, None)
}

/// Like [`run_chain`] but pixels outside `mask` keep their initial values
/// bit for bit. The random stream is consumed exactly as in [`run_chain`],
/// so a full mask reproduces it.
pub fn run_chain_masked<T: Scalar>(
    params: &ParamSet<T>,
    reference: &Reference,
    init: &Tensor<T>,
    mask: &Tensor<T>,
    config: &LangevinConfig,
) -> Result<Tensor<T>> {
    let (s, m) = (init.shape(), mask.shape());
    if m.c != 1 || m.h != s.h || m.w != s.w || (m.n != 1 && m.n != s.n) {
        return Err(Error::dim(format!("mask {m} does not fit chains {s}")));
    }
    if mask.data().iter().all(|&v| v == T::zero()) {
        warn!("empty mask, chain left at its initial state");
        config.validate()?;
        return Ok(init.clone());
    }
    run(params, reference, init, config, Some(mask))
}

fn run<T: Scalar>(
    params: &ParamSet<T>,
    reference: &Reference,
    init: &Tensor<T>,
    config: &LangevinConfig,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut state = ChainState::new(init.clone(), params.grid());
    let opts = StepOptions::from_config(config, mask);
    for _ in 0..config.steps {
        langevin_step(params, reference, &mut state, config.step_size, &mut rng, &opts)?;
    }
    Ok(state.y)
}

/// Observed values and mask at one grid for conditional sampling.
#[derive(Clone, Debug)]
pub struct GridCondition<T: Scalar = f32> {
    /// Observed image at this grid (values under the mask are ignored).
    pub observed: Tensor<T>,
    /// 1 where pixels are free, `N x 1 x H x W`.
    pub mask: Tensor<T>,
}

/// Coarse-to-fine sweep: for each grid, up-scale the previous grid's
/// result and run that grid's chain. `models[s - 1]` is the model of grid
/// `s`; returns one batch per grid, coarsest first. Grid `s` draws its
/// noise from a stream derived from `config.seed` and `s`.
pub fn sample_multigrid<T: Scalar>(
    models: &[ParamSet<T>],
    reference: &Reference,
    bases: &Tensor<T>,
    d: usize,
    config: &LangevinConfig,
) -> Result<Vec<Tensor<T>>> {
    sweep(models, reference, bases, d, config, None)
}

/// Masked coarse-to-fine sweep: at grid `s` the chain starts from the
/// observed image with the masked pixels replaced by the up-scaled result
/// of grid `s - 1`, and only masked pixels move.
pub fn sample_multigrid_conditional<T: Scalar>(
    models: &[ParamSet<T>],
    reference: &Reference,
    bases: &Tensor<T>,
    d: usize,
    config: &LangevinConfig,
    conditions: &[GridCondition<T>],
) -> Result<Vec<Tensor<T>>> {
    if conditions.len() != models.len() {
        return Err(Error::dim(format!("{} grid conditions for {} models", conditions.len(), models.len())));
    }
    sweep(models, reference, bases, d, config, Some(conditions))
}

fn sweep<T: Scalar>(
    models: &[ParamSet<T>],
    reference: &Reference,
    bases: &Tensor<T>,
    d: usize,
    config: &LangevinConfig,
    conditions: Option<&[GridCondition<T>]>,
) -> Result<Vec<Tensor<T>>> {
    let bs = bases.shape();
    if bs.h != 1 || bs.w != 1 {
        return Err(Error::dim(format!("multi-grid sampling starts from 1x1 images, got {bs}")));
    }
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(models.len());
    let mut prev = bases.clone();
    for (i, model) in models.iter().enumerate() {
        let grid = i + 1;
        let up = upscale(&prev, d)?;
        let cfg = config.with_seed(rng::derive_seed(config.seed, grid as u64));
        let next = match conditions {
            None => run_chain(model, reference, &up, &cfg)?,
            Some(conds) => {
                let GridCondition { observed, mask } = &conds[i];
                let init = blend(observed, &up, mask)?;
                run_chain_masked(model, reference, &init, mask, &cfg)?
            }
        };
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

/// `mask ? free : fixed`, mask broadcast over channels.
pub fn blend<T: Scalar>(fixed: &Tensor<T>, free: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let s = fixed.shape();
    free.expect_shape(s)?;
    let m = mask.shape();
    if m.c != 1 || m.h != s.h || m.w != s.w || (m.n != 1 && m.n != s.n) {
        return Err(Error::dim(format!("mask {m} does not fit images {s}")));
    }
    let plane = s.plane();
    let mut out = fixed.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let n = i / s.item_len();
        let mi = if m.n == 1 { i % plane } else { n * plane + i % plane };
        if mask.data()[mi] != T::zero() {
            *v = free.data()[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkSpec, ParamSet};
    use crate::tensor::Shape;

    /// f ≡ 0 on `c x h x w` images.
    fn flat(c: usize, h: usize, w: usize) -> ParamSet<f64> {
        let spec: NetworkSpec = format!("{c}x{h}x{w}:fc1").parse().unwrap();
        let mut p = ParamSet::init(&spec, 1, 0).unwrap();
        p.tensors_mut()[0].data_mut().fill(0.0);
        p
    }

    fn cfg(steps: usize, delta: f64, zero_noise: bool) -> LangevinConfig {
        LangevinConfig { steps, step_size: delta, zero_noise, seed: 3, ..Default::default() }
    }

    #[test]
    fn zero_noise_step_is_geometric() {
        let p = flat(1, 2, 2);
        let y = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let delta = 0.3;
        let out = run_chain(&p, &Reference::default(), &y, &cfg(1, delta, true)).unwrap();
        for (a, b) in out.data().iter().zip(y.data()) {
            assert!((a - b * (1.0 - delta * delta / 2.0)).abs() < 1e-15);
        }
        let out = run_chain(&p, &Reference::default(), &y, &cfg(7, delta, true)).unwrap();
        for (a, b) in out.data().iter().zip(y.data()) {
            assert!((a - b * (1.0 - delta * delta / 2.0f64).powi(7)).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_diffusion_from_zero() {
        let p = flat(1, 1, 3);
        let y = Tensor::zeros(Shape::new(1, 1, 1, 3));
        let delta = 0.2;
        let out = run_chain(&p, &Reference::default(), &y, &cfg(1, delta, false)).unwrap();
        let mut r = rng::seeded(3);
        for &v in out.data() {
            let u: f64 = r.sample(StandardNormal);
            assert!((v - delta * u).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_same_chain() {
        let spec = NetworkSpec::preset(1, crate::network::ImageShape::new(1, 4, 4), 0.1).unwrap();
        let p = ParamSet::<f32>::init(&spec, 1, 1).unwrap();
        let y = Tensor::from_fn(Shape::new(3, 1, 4, 4), |n, _, h, w| ((n + h * w) as f32).sin());
        let c = cfg(5, 0.3, false);
        let p = p.cast::<f64>();
        let y = y.cast::<f64>();
        assert_eq!(
            run_chain(&p, &Reference::default(), &y, &c).unwrap(),
            run_chain(&p, &Reference::default(), &y, &c).unwrap()
        );
    }

    #[test]
    fn budget_of_three_grids() {
        assert_eq!(multigrid_budget(3, 30), 90);
    }

    #[test]
    fn clamp_keeps_range() {
        let p = flat(1, 4, 4);
        let y = Tensor::zeros(Shape::new(2, 1, 4, 4));
        let mut c = cfg(20, 1.5, false);
        c.clamp = Some((-1.0, 1.0));
        let out = run_chain(&p, &Reference::Uniform { low: -1.0, high: 1.0 }, &y, &c).unwrap();
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn masked_chain_contract() {
        let p = flat(2, 4, 4);
        let y = Tensor::from_fn(Shape::new(2, 2, 4, 4), |n, c, h, w| (n + c + h + w) as f64 * 0.1);
        let c = cfg(6, 0.3, false);
        let reference = Reference::default();

        let full = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
        assert_eq!(run_chain_masked(&p, &reference, &y, &full, &c).unwrap(), run_chain(&p, &reference, &y, &c).unwrap());

        let empty = Tensor::zeros(Shape::new(2, 1, 4, 4));
        assert_eq!(run_chain_masked(&p, &reference, &y, &empty, &c).unwrap(), y);

        let mask = Tensor::from_fn(Shape::new(2, 1, 4, 4), |n, _, h, w| ((n + h * 3 + w) % 3 == 0) as u8 as f64);
        let out = run_chain_masked(&p, &reference, &y, &mask, &c).unwrap();
        for n in 0..2 {
            for ch in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        let (a, b) = (out.at(n, ch, h, w), y.at(n, ch, h, w));
                        if mask.at(n, 0, h, w) == 0.0 {
                            assert_eq!(a.to_bits(), b.to_bits());
                        } else {
                            assert_ne!(a, b);
                        }
                    }
                }
            }
        }
        assert!(run_chain_masked(&p, &reference, &y, &Tensor::zeros(Shape::new(1, 1, 2, 2)), &c).is_err());
    }

    #[test]
    fn multigrid_zero_noise_recurrence() {
        // f ≡ 0 on every grid: replication preserves constants, so each grid
        // multiplies the running value by (1 - δ²/2)^l.
        let models = vec![flat(1, 2, 2), flat(1, 4, 4), flat(1, 8, 8)];
        let bases = Tensor::new(Shape::new(2, 1, 1, 1), vec![0.8, -0.4]).unwrap();
        let c = cfg(4, 0.3, true);
        let out = sample_multigrid(&models, &Reference::default(), &bases, 2, &c).unwrap();
        let sizes: Vec<usize> = out.iter().map(|t| t.shape().h).collect();
        assert_eq!(sizes, vec![2, 4, 8]);
        let k = (1.0 - 0.3f64 * 0.3 / 2.0).powi(4);
        for (s, level) in out.iter().enumerate() {
            for n in 0..2 {
                let expect = bases.data()[n] * k.powi(s as i32 + 1);
                assert!(level.item(n).iter().all(|v| (v - expect).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn multigrid_seeds_give_different_samples() {
        let models = vec![flat(1, 4, 4), flat(1, 16, 16)];
        let bases = Tensor::full(Shape::new(1, 1, 1, 1), 0.1);
        let a = sample_multigrid(&models, &Reference::default(), &bases, 4, &cfg(3, 0.3, false)).unwrap();
        let b = sample_multigrid(&models, &Reference::default(), &bases, 4, &cfg(3, 0.3, false).with_seed(99)).unwrap();
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn divergence_is_reported() {
        let spec: NetworkSpec = "1x1x1:fc1".parse().unwrap();
        let mut p = ParamSet::<f64>::init(&spec, 1, 0).unwrap();
        p.tensors_mut()[0].data_mut().fill(f64::NAN);
        let y = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(
            run_chain(&p, &Reference::default(), &y, &cfg(3, 0.3, false)),
            Err(Error::SamplerDivergence { step: 0, .. })
        ));
    }

    #[test]
    fn invalid_config() {
        let p = flat(1, 1, 1);
        let y = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(run_chain(&p, &Reference::default(), &y, &cfg(0, 0.3, false)).is_err());
        assert!(run_chain(&p, &Reference::default(), &y, &cfg(1, 0.0, false)).is_err());
    }
}
