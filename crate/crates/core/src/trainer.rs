//! Contrastive-divergence training: multi-grid minimal CD and the
//! single-grid, CD1 and persistent-CD baselines.
//!
//! Each iteration draws a mini-batch, synthesizes a matching batch per
//! grid with the configured method, and moves every grid's parameters
//! along `mean ∂f/∂θ (observed) - mean ∂f/∂θ (synthesized)`. All grids
//! are updated from the same pre-update parameters.

use std::collections::VecDeque;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::inpaint::{gen_mask, MaskKind};
use crate::langevin::{
    multigrid_budget, run_chain, run_chain_masked, sample_multigrid, sample_multigrid_conditional, blend,
    GridCondition, LangevinConfig,
};
use crate::network::{ImageShape, NetworkSpec, NormMode, ParamGradient, ParamSet, Reference};
use crate::pyramid::{downscale_mask, side_for, upscale, GridPyramid, HistogramModel, DEFAULT_BINS};
use crate::rng::{self, Rng};
use crate::tensor::{Shape, Tensor};

/// Diagnostics kept per grid before the oldest records are dropped.
pub const HISTORY_LIMIT: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Coarse-to-fine sampling initialized at the 1x1 version of each
    /// observed image.
    Multigrid,
    /// One full-resolution model; chains start from the up-scaled 1x1 image.
    Singlegrid,
    /// Chains start at the observed images.
    Cd1,
    /// Chains continue from the previous epoch's synthesized images.
    Persistent,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Multigrid => "multigrid",
            Method::Singlegrid => "singlegrid",
            Method::Cd1 => "cd1",
            Method::Persistent => "persistent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multigrid" => Ok(Method::Multigrid),
            "singlegrid" => Ok(Method::Singlegrid),
            "cd1" => Ok(Method::Cd1),
            "persistent" => Ok(Method::Persistent),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }

    pub fn is_multigrid(self) -> bool {
        self == Method::Multigrid
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Pixel clamping during Langevin sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clamp {
    /// On for a uniform reference, off for a Gaussian one.
    Auto,
    On,
    Off,
}

impl Clamp {
    pub fn name(self) -> &'static str {
        match self {
            Clamp::Auto => "auto",
            Clamp::On => "on",
            Clamp::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Clamp::Auto),
            "on" => Ok(Clamp::On),
            "off" => Ok(Clamp::Off),
            _ => Err(Error::Config(format!("unknown clamp mode '{s}' (auto, on, off)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub iterations: usize,
    /// Initial learning rate `γ0`.
    pub learning_rate: f64,
    /// The learning rate decays every this many iterations.
    pub decay_every: usize,
    /// Langevin steps per grid in multi-grid mode.
    pub langevin_steps: usize,
    /// Langevin steps of the single-model methods.
    pub single_grid_steps: usize,
    /// Require `grids * langevin_steps == single_grid_steps`.
    pub match_budget: bool,
    pub step_size: f64,
    /// Block size `d` between grids.
    pub scale_factor: usize,
    /// Number of modeled grids `S`; images are `d^S` square.
    pub grids: usize,
    /// Image channels.
    pub channels: usize,
    pub channel_scale: f64,
    pub reference: Reference,
    pub clamp: Clamp,
    /// Pixel range of the data; also the clamp range for [`Clamp::On`].
    pub pixel_range: (f64, f64),
    pub sampling_norm: NormMode,
    pub histogram_bins: usize,
    pub seed: u64,
    /// Conditional learning: a square mask of this size is placed at a
    /// random position on every training image.
    pub mask: Option<(usize, usize)>,
    /// Per-model architectures overriding the presets.
    pub architectures: Vec<NetworkSpec>,
}

impl Default for TrainConfig {
    /// 64x64 images, three grids with d = 4, 30 steps of size 0.3 per
    /// grid, batches of 100 and an initial learning rate of 0.3 decayed
    /// every 10 iterations.
    fn default() -> Self {
        TrainConfig {
            method: Method::Multigrid,
            batch_size: 100,
            iterations: 1000,
            learning_rate: 0.3,
            decay_every: 10,
            langevin_steps: 30,
            single_grid_steps: 90,
            match_budget: false,
            step_size: 0.3,
            scale_factor: 4,
            grids: 3,
            channels: 3,
            channel_scale: 1.0,
            reference: Reference::default(),
            clamp: Clamp::Auto,
            pixel_range: (-1.0, 1.0),
            sampling_norm: NormMode::Batch,
            histogram_bins: DEFAULT_BINS,
            seed: 0,
            mask: None,
            architectures: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration: 16x16 images, two grids with d = 4,
    /// quarter-width networks and batches of 32.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            grids: 2,
            scale_factor: 4,
            channel_scale: 0.25,
            single_grid_steps: 60,
            ..Default::default()
        }
    }

    pub fn image_side(&self) -> usize {
        side_for(self.scale_factor, self.grids).unwrap_or(0)
    }

    pub fn image_shape(&self) -> ImageShape {
        let side = self.image_side();
        ImageShape::new(self.channels, side, side)
    }

    /// Langevin steps each image receives per iteration.
    pub fn budget(&self) -> usize {
        match self.method {
            Method::Multigrid => multigrid_budget(self.grids, self.langevin_steps),
            _ => self.single_grid_steps,
        }
    }

    pub fn clamp_range(&self) -> Option<(f64, f64)> {
        match self.clamp {
            Clamp::Off => None,
            Clamp::On => Some(self.pixel_range),
            Clamp::Auto => self.reference.clamp_range(),
        }
    }

    pub fn langevin(&self, seed: u64) -> LangevinConfig {
        let steps = if self.method.is_multigrid() { self.langevin_steps } else { self.single_grid_steps };
        LangevinConfig {
            steps,
            step_size: self.step_size,
            clamp: self.clamp_range(),
            seed,
            norm_mode: self.sampling_norm,
            zero_noise: false,
        }
    }

    /// `γ_t = γ0 / (1 + ln(1 + ⌊t / k⌋))`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        self.learning_rate / (1.0 + (1.0 + (t / self.decay_every.max(1)) as f64).ln())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be >= 1".into());
        }
        if self.langevin_steps == 0 || self.single_grid_steps == 0 {
            return fail("Langevin steps must be >= 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.scale_factor < 2 {
            return fail(format!("scale_factor must be >= 2, got {}", self.scale_factor));
        }
        if self.grids == 0 || side_for(self.scale_factor, self.grids).is_none_or(|s| s > 4096) {
            return fail(format!("grids must be >= 1 with a reasonable image side, got {}", self.grids));
        }
        if self.channels == 0 {
            return fail("channels must be >= 1".into());
        }
        if !(self.channel_scale > 0.0) {
            return fail(format!("channel_scale must be positive, got {}", self.channel_scale));
        }
        if !(self.pixel_range.0 < self.pixel_range.1) {
            return fail("pixel range must be ordered".into());
        }
        if self.histogram_bins == 0 {
            return fail("histogram_bins must be >= 1".into());
        }
        self.reference.validate()?;
        if self.match_budget && self.grids * self.langevin_steps != self.single_grid_steps {
            return fail(format!(
                "budget parity requires grids * langevin_steps ({} * {}) == single_grid_steps ({})",
                self.grids, self.langevin_steps, self.single_grid_steps
            ));
        }
        if let Some((h, w)) = self.mask {
            let side = self.image_side();
            if h == 0 || w == 0 || h > side || w > side {
                return fail(format!("mask {h}x{w} does not fit {side}x{side} images"));
            }
        }
        let expected = if self.method.is_multigrid() { self.grids } else { 1 };
        if !self.architectures.is_empty() {
            if self.architectures.len() != expected {
                return fail(format!("{} architectures given, {expected} needed", self.architectures.len()));
            }
            for (i, spec) in self.architectures.iter().enumerate() {
                let want = self.model_input(i);
                if spec.input != want {
                    return fail(format!("architecture {} takes {}, grid needs {want}", i + 1, spec.input));
                }
            }
        }
        Ok(())
    }

    /// Input shape of model `i` (0-based).
    fn model_input(&self, i: usize) -> ImageShape {
        let side = if self.method.is_multigrid() {
            side_for(self.scale_factor, i + 1).unwrap_or(0)
        } else {
            self.image_side()
        };
        ImageShape::new(self.channels, side, side)
    }

    /// Grid index of model `i` (0-based).
    pub fn model_grid(&self, i: usize) -> usize {
        if self.method.is_multigrid() {
            i + 1
        } else {
            self.grids
        }
    }

    pub fn num_models(&self) -> usize {
        if self.method.is_multigrid() {
            self.grids
        } else {
            1
        }
    }

    /// Architecture of model `i`: the preset matching its grid unless
    /// overridden. The finest grid of three or more uses preset 3, grid 1
    /// preset 1, everything between preset 2; single-model methods use
    /// preset 3 at full resolution.
    pub fn architecture(&self, i: usize) -> Result<NetworkSpec> {
        if let Some(spec) = self.architectures.get(i) {
            return Ok(spec.clone());
        }
        let preset = if !self.method.is_multigrid() {
            3
        } else {
            let s = i + 1;
            match (s, self.grids) {
                (1, _) => 1,
                (s, g) if s == g && g >= 3 => 3,
                _ => 2,
            }
        };
        NetworkSpec::preset(preset, self.model_input(i), self.channel_scale)
    }
}

/// Diagnostics of one grid at one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticRecord {
    pub iteration: usize,
    pub grid: usize,
    /// L1 norm of the learning gradient.
    pub grad_l1: f64,
    /// Mean score of the observed batch.
    pub score_train: f64,
    /// Mean score of the synthesized batch.
    pub score_synth: f64,
    /// Mean synthesized energy minus mean observed energy.
    pub value_gap: f64,
}

impl DiagnosticRecord {
    pub const CSV_HEADER: &'static str = "iteration,grid,grad_l1,score_train,score_synth,value_gap";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.grid, self.grad_l1, self.score_train, self.score_synth, self.value_gap
        )
    }
}

/// Everything needed to continue or use a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// One model per grid (multi-grid), or the single full-resolution model.
    pub models: Vec<ParamSet<f32>>,
    /// Completed iterations.
    pub iteration: usize,
    pub rng: Rng,
    /// Histogram of the training images' 1x1 versions.
    pub histogram: HistogramModel,
    /// Current epoch permutation and position within it.
    pub order: Vec<usize>,
    pub cursor: usize,
    /// Persistent chains, one per training image (persistent CD only).
    pub persistent: Option<Tensor<f32>>,
    pub history: VecDeque<DiagnosticRecord>,
}

impl TrainState {
    /// Fresh state for `dataset` (`N x C x H x W`).
    pub fn new(config: TrainConfig, dataset: &Tensor<f32>) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        let mut models = Vec::with_capacity(config.num_models());
        for i in 0..config.num_models() {
            let spec = config.architecture(i)?;
            let grid = config.model_grid(i);
            models.push(ParamSet::init(&spec, grid, rng::derive_seed(config.seed, 1000 + grid as u64))?);
        }
        let pyramid = GridPyramid::build(dataset, config.scale_factor, config.grids)?;
        let histogram =
            HistogramModel::fit(pyramid.level(0), config.histogram_bins, config.pixel_range.0, config.pixel_range.1)?;
        let persistent = (config.method == Method::Persistent).then(|| dataset.clone());
        Ok(TrainState {
            rng: rng::seeded(config.seed),
            config,
            models,
            iteration: 0,
            histogram,
            order: Vec::new(),
            cursor: 0,
            persistent,
            history: VecDeque::new(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.iteration > 0
    }

    pub fn reference(&self) -> Reference {
        self.config.reference
    }

    /// Next mini-batch of dataset indices; each epoch visits every index
    /// once in a fresh random order.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Multi-grid sweep from the observed 1x1 images of `observed`.
    /// Returns the observed pyramid levels `1..=S` and one synthesized
    /// batch per grid.
    pub fn synth_multigrid(&self, observed: &Tensor<f32>, seed: u64) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        self.expect_method(Method::Multigrid)?;
        let pyramid = GridPyramid::build(observed, self.config.scale_factor, self.config.grids)?;
        let bases = pyramid.level(0).clone();
        let cfg = self.config.langevin(seed);
        let syn = sample_multigrid(&self.models, &self.config.reference, &bases, self.config.scale_factor, &cfg)?;
        Ok((pyramid.into_levels().split_off(1), syn))
    }

    /// Full-resolution chains started at the observed images.
    pub fn synth_cd1(&self, observed: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        self.expect_method(Method::Cd1)?;
        run_chain(&self.models[0], &self.config.reference, observed, &self.config.langevin(seed))
    }

    /// Full-resolution chains started at the up-scaled 1x1 images.
    pub fn synth_singlegrid(&self, observed: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        self.expect_method(Method::Singlegrid)?;
        let init = self.singlegrid_init(observed)?;
        run_chain(&self.models[0], &self.config.reference, &init, &self.config.langevin(seed))
    }

    fn singlegrid_init(&self, observed: &Tensor<f32>) -> Result<Tensor<f32>> {
        let pyramid = GridPyramid::build(observed, self.config.scale_factor, self.config.grids)?;
        upscale(pyramid.level(0), self.config.image_side())
    }

    /// Continues the persistent chains of `indices` and stores the result.
    pub fn synth_persistent(&mut self, indices: &[usize], seed: u64) -> Result<Tensor<f32>> {
        self.expect_method(Method::Persistent)?;
        let store = self.persistent.as_ref().ok_or_else(|| Error::Config("persistent store missing".into()))?;
        let init = store.gather(indices)?;
        let out = run_chain(&self.models[0], &self.config.reference, &init, &self.config.langevin(seed))?;
        self.persistent.as_mut().unwrap().scatter(indices, &out)?;
        Ok(out)
    }

    fn expect_method(&self, m: Method) -> Result<()> {
        if self.config.method != m {
            return Err(Error::Config(format!(
                "operation needs method {}, state uses {}",
                m.name(),
                self.config.method.name()
            )));
        }
        Ok(())
    }

    /// Ascent step `θ += γ_t L'(θ)` on every model, from gradients that
    /// were all computed at the current parameters.
    pub fn update_params(&mut self, gradients: &[ParamGradient<f32>], t: usize) -> Result<()> {
        if gradients.len() != self.models.len() {
            return Err(Error::dim(format!("{} gradients for {} models", gradients.len(), self.models.len())));
        }
        for (g, m) in gradients.iter().zip(&self.models) {
            if !g.all_finite() {
                let dump: Vec<String> = g
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(i, t)| format!("tensor {i}: {} finite={}", t.shape(), t.all_finite()))
                    .collect();
                return Err(Error::NonFiniteGradient(format!(
                    "grid {} at iteration {t}: {}",
                    m.grid(),
                    dump.join("; ")
                )));
            }
        }
        let rate = self.config.learning_rate_at(t) as f32;
        for (g, m) in gradients.iter().zip(self.models.iter_mut()) {
            m.ascend(&g.tensors, rate)?;
            m.update_running_stats(&g.observed.moments)?;
        }
        Ok(())
    }

    /// One learning iteration on `dataset`.
    pub fn step(&mut self, dataset: &Tensor<f32>) -> Result<Vec<DiagnosticRecord>> {
        check_dataset(&self.config, dataset)?;
        let indices = self.next_batch(dataset.shape().n);
        let observed = dataset.gather(&indices)?;
        let seed: u64 = self.rng.random();
        let mask_seed: u64 = self.rng.random();
        let masks = match self.config.mask {
            Some((h, w)) => Some(training_masks(observed.shape(), h, w, mask_seed)?),
            None => None,
        };
        let (obs_levels, syn_levels) = match (self.config.method, &masks) {
            (Method::Multigrid, None) => self.synth_multigrid(&observed, seed)?,
            (Method::Multigrid, Some(mask)) => self.synth_multigrid_masked(&observed, mask, seed)?,
            (Method::Singlegrid, None) => (vec![observed.clone()], vec![self.synth_singlegrid(&observed, seed)?]),
            (Method::Cd1, None) => (vec![observed.clone()], vec![self.synth_cd1(&observed, seed)?]),
            (Method::Persistent, None) => (vec![observed.clone()], vec![self.synth_persistent(&indices, seed)?]),
            (method, Some(mask)) => {
                let free = match method {
                    Method::Singlegrid => self.singlegrid_init(&observed)?,
                    Method::Persistent => self.persistent.as_ref().unwrap().gather(&indices)?,
                    _ => observed.clone(),
                };
                let init = blend(&observed, &free, mask)?;
                let syn = run_chain_masked(&self.models[0], &self.config.reference, &init, mask, &self.config.langevin(seed))?;
                if method == Method::Persistent {
                    self.persistent.as_mut().unwrap().scatter(&indices, &syn)?;
                }
                (vec![observed.clone()], vec![syn])
            }
        };
        let mut grads = Vec::with_capacity(self.models.len());
        for ((m, obs), syn) in self.models.iter().zip(&obs_levels).zip(&syn_levels) {
            grads.push(m.grad_params(obs, syn, NormMode::Batch)?);
        }
        let t = self.iteration;
        let reference = self.config.reference;
        let mut records = Vec::with_capacity(grads.len());
        for ((g, m), (obs, syn)) in grads.iter().zip(&self.models).zip(obs_levels.iter().zip(&syn_levels)) {
            let record = DiagnosticRecord {
                iteration: t,
                grid: m.grid(),
                grad_l1: g.l1_norm(),
                score_train: mean(&g.observed.scores),
                score_synth: mean(&g.synthesized.scores),
                value_gap: value_gap_from(&reference, obs, &g.observed.scores, syn, &g.synthesized.scores),
            };
            debug!("iteration {t} grid {}: |grad|_1 = {:.4e}", record.grid, record.grad_l1);
            records.push(record);
        }
        self.update_params(&grads, t)?;
        self.iteration += 1;
        for r in &records {
            if self.history.len() >= HISTORY_LIMIT * self.models.len() {
                self.history.pop_front();
            }
            self.history.push_back(*r);
        }
        Ok(records)
    }

    fn synth_multigrid_masked(
        &self,
        observed: &Tensor<f32>,
        mask: &Tensor<f32>,
        seed: u64,
    ) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let d = self.config.scale_factor;
        let pyramid = GridPyramid::build(observed, d, self.config.grids)?;
        let masks = mask_pyramid(mask, d, self.config.grids)?;
        let conditions: Vec<GridCondition<f32>> = (1..=self.config.grids)
            .map(|s| GridCondition { observed: pyramid.level(s).clone(), mask: masks[s].clone() })
            .collect();
        let syn = sample_multigrid_conditional(
            &self.models,
            &self.config.reference,
            pyramid.level(0),
            d,
            &self.config.langevin(seed),
            &conditions,
        )?;
        Ok((pyramid.into_levels().split_off(1), syn))
    }

    /// Runs until `config.iterations` iterations are complete, calling
    /// `on_iteration` after each one.
    pub fn run(
        &mut self,
        dataset: &Tensor<f32>,
        mut on_iteration: impl FnMut(&TrainState, &[DiagnosticRecord]) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.config.iterations {
            let records = self.step(dataset)?;
            on_iteration(self, &records)?;
        }
        Ok(())
    }

    /// Generates `n` images per grid from scratch: 1x1 bases drawn from the
    /// histogram, then the sampling sweep of the configured method.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
        let mut r = rng::seeded(seed);
        let bases = self.histogram.sample(n, &mut r);
        self.sample_from_bases(&bases, r.random())
    }

    /// Sampling sweep from given 1x1 bases.
    pub fn sample_from_bases(&self, bases: &Tensor<f32>, seed: u64) -> Result<Vec<Tensor<f32>>> {
        let mut cfg = self.config.langevin(seed);
        cfg.norm_mode = self.config.sampling_norm;
        if self.config.method.is_multigrid() {
            sample_multigrid(&self.models, &self.config.reference, bases, self.config.scale_factor, &cfg)
        } else {
            let init = upscale(bases, self.config.image_side())?;
            Ok(vec![run_chain(&self.models[0], &self.config.reference, &init, &cfg)?])
        }
    }

    /// Per-grid diagnostic series recorded so far.
    pub fn diagnostics(&self) -> DiagnosticsReport {
        let grids: Vec<usize> = self.models.iter().map(|m| m.grid()).collect();
        let series = grids
            .iter()
            .map(|&g| self.history.iter().filter(|r| r.grid == g).copied().collect())
            .collect();
        DiagnosticsReport { grids, series }
    }
}

/// Diagnostic history split by grid.
#[derive(Clone, Debug)]
pub struct DiagnosticsReport {
    pub grids: Vec<usize>,
    pub series: Vec<Vec<DiagnosticRecord>>,
}

impl DiagnosticsReport {
    pub fn grad_l1(&self, grid_pos: usize) -> Vec<f64> {
        self.series[grid_pos].iter().map(|r| r.grad_l1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&DiagnosticRecord> = self.series.iter().flatten().collect();
        rows.sort_by_key(|r| (r.iteration, r.grid));
        let mut out = String::from(DiagnosticRecord::CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Runs a complete training.
pub fn train(dataset: &Tensor<f32>, config: TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(config, dataset)?;
    state.run(dataset, |_, _| Ok(()))?;
    Ok(state)
}

/// Conditional learning of `p(Y_M | Y_rest)`: training with a random
/// square mask per image; `config.mask` must be set.
pub fn train_conditional(dataset: &Tensor<f32>, config: TrainConfig) -> Result<TrainState> {
    if config.mask.is_none() {
        return Err(Error::Config("conditional training needs a mask size".into()));
    }
    train(dataset, config)
}

fn check_dataset(config: &TrainConfig, dataset: &Tensor<f32>) -> Result<()> {
    let s = dataset.shape();
    if s.n == 0 {
        return Err(Error::Empty("training set is empty".into()));
    }
    let want = config.image_shape();
    if ImageShape::of(s) != want {
        return Err(Error::dim(format!("training images are {}, configuration needs {want}", ImageShape::of(s))));
    }
    Ok(())
}

/// Square masks at independent uniform positions, `N x 1 x H x W`.
pub fn training_masks(shape: Shape, h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut r = rng::seeded(seed);
    let parts = (0..shape.n)
        .map(|_| gen_mask(MaskKind::Square { h, w }, shape.h, shape.w, &mut r).map(|m| m.values))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts)
}

/// Masks for levels `0..=S`, level `S` being `mask` itself.
pub fn mask_pyramid(mask: &Tensor<f32>, d: usize, grids: usize) -> Result<Vec<Tensor<f32>>> {
    let mut levels = vec![mask.clone()];
    for _ in 0..grids {
        let next = downscale_mask(levels.last().unwrap(), d)?;
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}

fn mean(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

fn value_gap_from(reference: &Reference, obs: &Tensor<f32>, obs_scores: &[f32], syn: &Tensor<f32>, syn_scores: &[f32]) -> f64 {
    let e = |y: &Tensor<f32>, f: &[f32]| {
        let base = reference.base_energy(y);
        base.iter().zip(f).map(|(&b, &s)| (b - s) as f64).sum::<f64>() / f.len().max(1) as f64
    };
    e(syn, syn_scores) - e(obs, obs_scores)
}

/// `V = mean E(synthesized) - mean E(observed)` under one model.
pub fn value_gap(
    model: &ParamSet<f32>,
    reference: &Reference,
    observed: &Tensor<f32>,
    synthesized: &Tensor<f32>,
    mode: NormMode,
) -> Result<f64> {
    let mean_e = |y: &Tensor<f32>| -> Result<f64> {
        let e = model.energy(reference, y, mode)?;
        Ok(e.iter().map(|&v| v as f64).sum::<f64>() / e.len() as f64)
    };
    Ok(mean_e(synthesized)? - mean_e(observed)?)
}
