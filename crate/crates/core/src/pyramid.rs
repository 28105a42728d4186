//! Multi-grid image representation.
//!
//! Down-scaling replaces every `d x d` block by its mean; up-scaling
//! replicates each pixel into a constant `d x d` block and is the right
//! inverse of down-scaling. The coarsest grid, one pixel per channel, is
//! modeled by a per-channel one-dimensional histogram.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_BINS: usize = 64;

pub fn downscale<T: Scalar>(y: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let s = y.shape();
    check_factor(d)?;
    if s.h % d != 0 || s.w % d != 0 {
        return Err(Error::dim(format!("{}x{} is not divisible by block size {d}", s.h, s.w)));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / d, s.w / d);
    let inv = T::one() / T::from_usize(d * d).unwrap();
    let src = y.data();
    let mut out = vec![T::zero(); out_shape.len()];
    for nc in 0..s.n * s.c {
        let plane = &src[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut out[nc * out_shape.plane()..(nc + 1) * out_shape.plane()];
        for i in 0..out_shape.h {
            for j in 0..out_shape.w {
                let mut acc = T::zero();
                for bi in 0..d {
                    let row = &plane[(i * d + bi) * s.w + j * d..(i * d + bi) * s.w + j * d + d];
                    acc = acc + row.iter().copied().sum::<T>();
                }
                dst[i * out_shape.w + j] = acc * inv;
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn upscale<T: Scalar>(y: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    check_factor(d)?;
    let s = y.shape();
    let src = y.data();
    let out_shape = Shape::new(s.n, s.c, s.h * d, s.w * d);
    let mut out = Vec::with_capacity(out_shape.len());
    for nc in 0..s.n * s.c {
        let plane = &src[nc * s.plane()..(nc + 1) * s.plane()];
        for i in 0..out_shape.h {
            let row = &plane[(i / d) * s.w..(i / d + 1) * s.w];
            for &v in row {
                out.extend(std::iter::repeat_n(v, d));
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Pools a binary mask: a coarse pixel is set when any covered fine pixel
/// is set.
pub fn downscale_mask<T: Scalar>(mask: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let avg = downscale(mask, d)?;
    Ok(avg.map(|v| if v > T::zero() { T::one() } else { T::zero() }))
}

/// Block averages over unmasked fine pixels only, so values hidden under
/// the mask never reach coarser grids. Blocks with no unmasked pixel are 0.
/// `mask` is `N x 1 x H x W` (or `1 x 1 x H x W`, shared by the batch).
pub fn downscale_observed<T: Scalar>(y: &Tensor<T>, mask: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    check_factor(d)?;
    let s = y.shape();
    let ms = mask.shape();
    if ms.c != 1 || ms.h != s.h || ms.w != s.w || (ms.n != s.n && ms.n != 1) {
        return Err(Error::dim(format!("mask {ms} does not fit images {s}")));
    }
    if s.h % d != 0 || s.w % d != 0 {
        return Err(Error::dim(format!("{}x{} is not divisible by block size {d}", s.h, s.w)));
    }
    let (ho, wo) = (s.h / d, s.w / d);
    let out = Tensor::from_fn(Shape::new(s.n, s.c, ho, wo), |n, c, i, j| {
        let mn = if ms.n == 1 { 0 } else { n };
        let mut acc = T::zero();
        let mut count = 0usize;
        for bi in 0..d {
            for bj in 0..d {
                let (h, w) = (i * d + bi, j * d + bj);
                if mask.at(mn, 0, h, w) == T::zero() {
                    acc = acc + y.at(n, c, h, w);
                    count += 1;
                }
            }
        }
        if count == 0 {
            T::zero()
        } else {
            acc / T::from_usize(count).unwrap()
        }
    });
    Ok(out)
}

fn check_factor(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::dim(format!("scale factor must be an integer >= 2, got {d}")));
    }
    Ok(())
}

/// Side length `d^S` of the finest grid.
pub fn side_for(d: usize, grids: usize) -> Option<usize> {
    d.checked_pow(u32::try_from(grids).ok()?)
}

/// Multi-grid versions `Y(0), ..., Y(S)` of a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPyramid<T: Scalar = f32> {
    levels: Vec<Tensor<T>>,
    d: usize,
}

impl<T: Scalar> GridPyramid<T> {
    /// Repeatedly down-scales a batch of square `d^S x d^S` images.
    pub fn build(y: &Tensor<T>, d: usize, grids: usize) -> Result<Self> {
        check_factor(d)?;
        let s = y.shape();
        let side = side_for(d, grids).ok_or_else(|| Error::dim("grid count overflows the image side"))?;
        if s.h != side || s.w != side {
            return Err(Error::dim(format!("image {}x{} is not {d}^{grids} = {side} square", s.h, s.w)));
        }
        let mut levels = vec![y.clone()];
        for _ in 0..grids {
            let next = downscale(levels.last().unwrap(), d)?;
            levels.push(next);
        }
        levels.reverse();
        Ok(GridPyramid { levels, d })
    }

    pub fn scale_factor(&self) -> usize {
        self.d
    }

    /// Number of modeled grids `S` (level 0 is the 1x1 base).
    pub fn grids(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, s: usize) -> &Tensor<T> {
        &self.levels[s]
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor<T>> {
        self.levels
    }
}

/// Per-channel histogram of 1x1 intensities over a fixed range.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramModel {
    pub low: f64,
    pub high: f64,
    /// `probs[c][b]`: probability of bin `b` for channel `c`.
    pub probs: Vec<Vec<f64>>,
}

impl HistogramModel {
    /// Fits `bins` uniform bins over `[low, high]` per channel, with one
    /// pseudo-count per bin. Values outside the range fall in the edge bins.
    pub fn fit(grid0: &Tensor<f32>, bins: usize, low: f64, high: f64) -> Result<Self> {
        let s = grid0.shape();
        if s.n == 0 || s.c == 0 {
            return Err(Error::Empty("no 1x1 values to fit a histogram".into()));
        }
        if bins == 0 || !(low < high) {
            return Err(Error::Config(format!("histogram needs bins > 0 and low < high, got {bins} [{low}, {high}]")));
        }
        let mut model = HistogramModel { low, high, probs: vec![vec![1.0; bins]; s.c] };
        for n in 0..s.n {
            for c in 0..s.c {
                let v = grid0.item(n)[c * s.plane()] as f64;
                let b = model.bin_of(v);
                model.probs[c][b] += 1.0;
            }
        }
        for p in &mut model.probs {
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= total);
        }
        Ok(model)
    }

    pub fn bins(&self) -> usize {
        self.probs.first().map_or(0, |p| p.len())
    }

    pub fn channels(&self) -> usize {
        self.probs.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.high - self.low) / self.bins() as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let b = ((v - self.low) / self.bin_width()).floor();
        (b.max(0.0) as usize).min(self.bins() - 1)
    }

    /// Inverse-CDF sampling of `n` images of size `1 x 1`, each value
    /// uniform within its bin.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor<f32> {
        let c = self.channels();
        let width = self.bin_width();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            for probs in &self.probs {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut bin = probs.len() - 1;
                for (b, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        bin = b;
                        break;
                    }
                }
                let offset: f64 = rng.random();
                data.push((self.low + (bin as f64 + offset) * width) as f32);
            }
        }
        Tensor::new(Shape::new(n, c, 1, 1), data).expect("sized")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn block_average_of_ramp() {
        let y = Tensor::<f64>::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(downscale(&y, 2).unwrap().data(), &[1.5]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let y = Tensor::<f32>::full(Shape::new(2, 3, 16, 16), 0.25);
        let p = GridPyramid::build(&y, 4, 2).unwrap();
        for l in p.levels() {
            assert!(l.data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn paper_pyramid_sizes() {
        let y = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64));
        let p = GridPyramid::build(&y, 4, 3).unwrap();
        let sizes: Vec<usize> = p.levels().iter().map(|l| l.shape().h).collect();
        assert_eq!(sizes, vec![1, 4, 16, 64]);
        assert_eq!(p.grids(), 3);
    }

    #[test]
    fn upscale_replicates_blocks() {
        let y = Tensor::<f64>::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let u = upscale(&y, 2).unwrap();
        #[rustfmt::skip]
        let expect = [
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
            2.0, 2.0, 3.0, 3.0,
            2.0, 2.0, 3.0, 3.0,
        ];
        assert_eq!(u.data(), &expect);
        let one = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 0.7);
        assert!(upscale(&one, 4).unwrap().data().iter().all(|&v| v == 0.7));
        assert_eq!(downscale(&u, 2).unwrap(), y);
    }

    #[test]
    fn rejects_bad_sizes() {
        let y = Tensor::<f32>::zeros(Shape::new(1, 1, 6, 6));
        assert!(downscale(&y, 4).is_err());
        assert!(downscale(&y, 1).is_err());
        assert!(GridPyramid::build(&y, 2, 2).is_err());
    }

    #[test]
    fn mask_pooling_is_any() {
        let mut m = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        m.data_mut()[5] = 1.0;
        let p = downscale_mask(&m, 2).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn observed_average_ignores_masked_pixels() {
        let y = Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![1.0, 100.0, 3.0, 5.0]).unwrap();
        let m = Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(downscale_observed(&y, &m, 2).unwrap().data(), &[3.0]);
    }

    #[test]
    fn histogram_point_mass() {
        let v = Tensor::<f32>::full(Shape::new(500, 1, 1, 1), 0.3);
        let h = HistogramModel::fit(&v, 64, -1.0, 1.0).unwrap();
        let b = h.bin_of(0.3);
        assert!((h.probs[0][b] - 501.0 / 564.0).abs() < 1e-12);
        assert!((h.probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut r = rng::seeded(1);
        let s = h.sample(200, &mut r);
        let in_bin = s.data().iter().filter(|&&x| h.bin_of(x as f64) == b).count();
        assert!(in_bin > 150);

        let point = HistogramModel { low: -1.0, high: 1.0, probs: vec![{
            let mut p = vec![0.0; 64];
            p[40] = 1.0;
            p
        }] };
        let s = point.sample(100, &mut r);
        assert!(s.data().iter().all(|&x| point.bin_of(x as f64) == 40));
    }

    #[test]
    fn histogram_rejects_empty() {
        let v = Tensor::<f32>::zeros(Shape::new(0, 1, 1, 1));
        assert!(matches!(HistogramModel::fit(&v, 8, -1.0, 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn histogram_sampling_is_deterministic() {
        let v = Tensor::<f32>::from_fn(Shape::new(50, 3, 1, 1), |n, c, _, _| ((n * 3 + c) as f32 * 0.37).sin());
        let h = HistogramModel::fit(&v, 16, -1.0, 1.0).unwrap();
        assert_eq!(h.sample(10, &mut rng::seeded(4)), h.sample(10, &mut rng::seeded(4)));
    }
}
