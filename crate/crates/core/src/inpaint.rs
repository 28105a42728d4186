//! Masks, conditional sampling of missing pixels, and reconstruction
//! metrics.
//!
//! A mask is `1 x 1 x H x W` (or `N x 1 x H x W`) with 1 marking a missing
//! pixel. Sampling only moves masked pixels; everything else is returned
//! bit for bit.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::langevin::{blend, run_chain_masked, sample_multigrid_conditional, GridCondition};
use crate::pyramid::downscale_observed;
use crate::rng::{self, Rng};
use crate::tensor::{Shape, Tensor};
use crate::trainer::{mask_pyramid, TrainState};

/// Width of doodle strokes in pixels.
pub const DOODLE_WIDTH: usize = 4;
/// Accepted range of the masked fraction for doodle masks.
pub const DOODLE_COVERAGE: (f64, f64) = (0.2, 0.3);
const DOODLE_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskKind {
    /// An `h x w` block at a uniform random position.
    Square { h: usize, w: usize },
    /// Three to six random-walk strokes covering 20-30% of the image.
    Doodle,
    /// Every pixel missing independently with probability `p`.
    Pepper { p: f64 },
}

impl MaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown mask '{s}' (square:HxW, doodle, pepper[:p])"));
        match s.split_once(':') {
            None if s == "doodle" => Ok(MaskKind::Doodle),
            None if s == "pepper" => Ok(MaskKind::Pepper { p: 0.6 }),
            Some(("square", size)) => {
                let (h, w) = size.split_once('x').ok_or_else(bad)?;
                Ok(MaskKind::Square { h: h.parse().map_err(|_| bad())?, w: w.parse().map_err(|_| bad())? })
            }
            Some(("pepper", p)) => Ok(MaskKind::Pepper { p: p.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    /// `1 x 1 x H x W`, 1 where the pixel is missing.
    pub values: Tensor<f32>,
}

impl Mask {
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Mask { values: Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, i, j| if f(i, j) { 1.0 } else { 0.0 }) }
    }

    pub fn fraction(&self) -> f64 {
        self.values.sum() as f64 / self.values.len() as f64
    }

    pub fn count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Draws one mask for an `h x w` image.
pub fn gen_mask(kind: MaskKind, h: usize, w: usize, rng: &mut Rng) -> Result<Mask> {
    match kind {
        MaskKind::Square { h: mh, w: mw } => {
            if mh == 0 || mw == 0 || mh > h || mw > w {
                return Err(Error::Config(format!("{mh}x{mw} mask does not fit a {h}x{w} image")));
            }
            let top = rng.random_range(0..=h - mh);
            let left = rng.random_range(0..=w - mw);
            Ok(Mask::from_fn(h, w, |i, j| (top..top + mh).contains(&i) && (left..left + mw).contains(&j)))
        }
        MaskKind::Pepper { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("pepper probability must be in [0, 1], got {p}")));
            }
            let data = (0..h * w).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
            Ok(Mask { values: Tensor::new(Shape::new(1, 1, h, w), data)? })
        }
        MaskKind::Doodle => doodle(h, w, rng),
    }
}

fn doodle(h: usize, w: usize, rng: &mut Rng) -> Result<Mask> {
    const DIRS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    if h < DOODLE_WIDTH || w < DOODLE_WIDTH {
        return Err(Error::Config(format!("doodle masks need images of at least {DOODLE_WIDTH}x{DOODLE_WIDTH}")));
    }
    let side = h.max(w);
    for _ in 0..DOODLE_ATTEMPTS {
        let mut grid = vec![false; h * w];
        let strokes = rng.random_range(3..=6);
        for _ in 0..strokes {
            let len = rng.random_range((side / 4).max(1)..=side);
            let (mut y, mut x) = (rng.random_range(0..=h - DOODLE_WIDTH), rng.random_range(0..=w - DOODLE_WIDTH));
            let mut dir = DIRS[rng.random_range(0..8)];
            for _ in 0..len {
                for i in y..y + DOODLE_WIDTH {
                    grid[i * w + x..i * w + x + DOODLE_WIDTH].fill(true);
                }
                if rng.random_bool(0.3) {
                    dir = DIRS[rng.random_range(0..8)];
                }
                y = (y as isize + dir.0).clamp(0, (h - DOODLE_WIDTH) as isize) as usize;
                x = (x as isize + dir.1).clamp(0, (w - DOODLE_WIDTH) as isize) as usize;
            }
        }
        let fraction = grid.iter().filter(|&&m| m).count() as f64 / (h * w) as f64;
        if (DOODLE_COVERAGE.0..=DOODLE_COVERAGE.1).contains(&fraction) {
            return Ok(Mask::from_fn(h, w, |i, j| grid[i * w + j]));
        }
    }
    Err(Error::Config(format!("could not draw a doodle mask with 20-30% coverage on {h}x{w}")))
}

/// One independent mask per image, stacked to `n x 1 x h x w`.
pub fn gen_masks(kind: MaskKind, n: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut r = rng::seeded(seed);
    let parts = (0..n).map(|_| gen_mask(kind, h, w, &mut r).map(|m| m.values)).collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts)
}

fn check_mask(images: &Tensor<f32>, mask: &Tensor<f32>) -> Result<()> {
    let (s, m) = (images.shape(), mask.shape());
    if m.c != 1 || m.h != s.h || m.w != s.w || (m.n != 1 && m.n != s.n) {
        return Err(Error::dim(format!("mask {m} does not fit images {s}")));
    }
    Ok(())
}

fn mask_at(mask: &Tensor<f32>, n: usize, i: usize, j: usize) -> bool {
    let n = if mask.shape().n == 1 { 0 } else { n };
    mask.at(n, 0, i, j) != 0.0
}

/// Per-image, per-channel means of the unmasked pixels as `N x C x 1 x 1`.
/// A fully masked image falls back to zero.
pub fn unmasked_means(images: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_mask(images, mask)?;
    let s = images.shape();
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for i in 0..s.h {
            for j in 0..s.w {
                if !mask_at(mask, n, i, j) {
                    acc += images.at(n, c, i, j) as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            (acc / count as f64) as f32
        }
    }))
}

/// Baseline: every missing pixel set to its image's unmasked channel mean.
pub fn mean_fill(images: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let means = unmasked_means(images, mask)?;
    let s = images.shape();
    let fill = Tensor::from_fn(s, |n, c, _, _| means.at(n, c, 0, 0));
    blend(images, &fill, mask)
}

/// Fills the masked pixels of `images` by conditional sampling under a
/// trained state. Multi-grid states run the masked coarse-to-fine sweep
/// from the unmasked channel means; single-model states run one masked
/// chain started at mean fill.
pub fn inpaint(state: &TrainState, images: &Tensor<f32>, mask: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    if !state.is_trained() {
        return Err(Error::Untrained);
    }
    check_mask(images, mask)?;
    if images.shape() != state.config.image_shape().batch(images.shape().n) {
        return Err(Error::dim(format!(
            "images {} do not match the model's {}",
            images.shape(),
            state.config.image_shape()
        )));
    }
    let config = state.config.langevin(seed);
    let reference = state.reference();
    if state.config.method.is_multigrid() {
        let d = state.config.scale_factor;
        let grids = state.config.grids;
        let masks = mask_pyramid(mask, d, grids)?;
        let mut observed = vec![images.clone()];
        for s in (1..grids).rev() {
            let finer = observed.last().unwrap();
            observed.push(downscale_observed(finer, &masks[s + 1], d)?);
        }
        observed.reverse();
        let conditions: Vec<GridCondition<f32>> = observed
            .into_iter()
            .zip(masks.into_iter().skip(1))
            .map(|(observed, mask)| GridCondition { observed, mask })
            .collect();
        let bases = unmasked_means(images, mask)?;
        let levels = sample_multigrid_conditional(&state.models, &reference, &bases, d, &config, &conditions)?;
        Ok(levels.into_iter().last().unwrap())
    } else {
        let init = mean_fill(images, mask)?;
        run_chain_masked(&state.models[0], &reference, &init, mask, &config)
    }
}

/// Mean absolute error over masked pixel values.
pub fn masked_l1(truth: &Tensor<f32>, recon: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    let (sum, count) = masked_reduce(truth, recon, mask, |d| d.abs())?;
    Ok(sum / count as f64)
}

/// PSNR over masked pixel values for a peak-to-peak range of 2; infinite
/// for an exact reconstruction.
pub fn masked_psnr(truth: &Tensor<f32>, recon: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    let (sum, count) = masked_reduce(truth, recon, mask, |d| d * d)?;
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}

fn masked_reduce(truth: &Tensor<f32>, recon: &Tensor<f32>, mask: &Tensor<f32>, f: impl Fn(f64) -> f64) -> Result<(f64, usize)> {
    recon.expect_shape(truth.shape())?;
    check_mask(truth, mask)?;
    let s = truth.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    if mask_at(mask, n, i, j) {
                        sum += f(recon.at(n, c, i, j) as f64 - truth.at(n, c, i, j) as f64);
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("mask selects no pixels".into()));
    }
    Ok((sum, count))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InpaintReport {
    pub images: usize,
    pub error: f64,
    pub psnr: f64,
    pub mean_fill_error: f64,
    pub mean_fill_psnr: f64,
}

/// Masks each test image with a fresh mask of `kind`, inpaints, and scores
/// the masked pixels against the truth and against mean fill.
pub fn evaluate_inpainting(state: &TrainState, images: &Tensor<f32>, kind: MaskKind, seed: u64) -> Result<InpaintReport> {
    let s = images.shape();
    if s.n == 0 {
        return Err(Error::Empty("no test images".into()));
    }
    let mask = gen_masks(kind, s.n, s.h, s.w, rng::derive_seed(seed, 0))?;
    let recon = inpaint(state, images, &mask, rng::derive_seed(seed, 1))?;
    let filled = mean_fill(images, &mask)?;
    Ok(InpaintReport {
        images: s.n,
        error: masked_l1(images, &recon, &mask)?,
        psnr: masked_psnr(images, &recon, &mask)?,
        mean_fill_error: masked_l1(images, &filled, &mask)?,
        mean_fill_psnr: masked_psnr(images, &filled, &mask)?,
    })
}
