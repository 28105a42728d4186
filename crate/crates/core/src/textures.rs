//! Procedural texture datasets for experiments and tests.
//!
//! Images are in `[-1, 1]`. Every generator is a pure function of its seed.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    /// Sinusoidal stripes at one of four orientations (the label), with
    /// random period, phase, contrast and brightness.
    Stripes,
    /// The horizontal (label 0) and vertical (label 1) subset of
    /// [`TextureKind::Stripes`].
    HvStripes,
    /// Checkerboards with cells of 2, 3 or 4 pixels (label 0, 1, 2).
    Checkers,
    /// Independent uniform pixels.
    Noise,
}

impl TextureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(TextureKind::Stripes),
            "hv-stripes" => Ok(TextureKind::HvStripes),
            "checkers" => Ok(TextureKind::Checkers),
            "noise" => Ok(TextureKind::Noise),
            _ => Err(Error::Config(format!("unknown texture '{s}' (stripes, hv-stripes, checkers, noise)"))),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            TextureKind::Stripes => 4,
            TextureKind::HvStripes => 2,
            TextureKind::Checkers => 3,
            TextureKind::Noise => 1,
        }
    }
}

/// Images with their class labels.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` items and the rest.
    pub fn split(&self, n: usize) -> Result<(LabeledSet, LabeledSet)> {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((
            LabeledSet { images: self.images.gather(&head)?, labels: self.labels[..n].to_vec() },
            LabeledSet { images: self.images.gather(&tail)?, labels: self.labels[n..].to_vec() },
        ))
    }
}

/// Standard deviation of the pixel noise added by [`generate`].
pub const DEFAULT_NOISE: f64 = 0.05;

/// `n` textures of `channels x side x side`; classes are balanced in turn.
pub fn generate(kind: TextureKind, n: usize, channels: usize, side: usize, seed: u64) -> Result<LabeledSet> {
    generate_noisy(kind, n, channels, side, DEFAULT_NOISE, seed)
}

/// Like [`generate`] with Gaussian pixel noise of standard deviation
/// `noise` (not applied to [`TextureKind::Noise`]).
pub fn generate_noisy(kind: TextureKind, n: usize, channels: usize, side: usize, noise: f64, seed: u64) -> Result<LabeledSet> {
    if channels == 0 || side == 0 {
        return Err(Error::Config("textures need at least one channel and pixel".into()));
    }
    let noise = Normal::new(0.0, noise).map_err(|_| Error::Config(format!("invalid noise level {noise}")))?;
    let mut r = rng::seeded(seed);
    let item = channels * side * side;
    let mut data = Vec::with_capacity(n * item);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % kind.classes();
        let tint: Vec<f64> = (0..channels).map(|_| r.random_range(0.8..1.0)).collect();
        let pattern: Box<dyn Fn(usize, usize) -> f64> = match kind {
            TextureKind::Stripes | TextureKind::HvStripes => {
                let steps = if kind == TextureKind::Stripes { label } else { 2 * label };
                let angle = steps as f64 * PI / 4.0 + r.random_range(-0.1..0.1);
                let period = r.random_range(5.0..9.0);
                let phase = r.random_range(0.0..2.0 * PI);
                let contrast = r.random_range(0.5..0.8);
                let offset = r.random_range(-0.2..0.2);
                let (s, c) = angle.sin_cos();
                Box::new(move |y, x| {
                    let u = c * x as f64 + s * y as f64;
                    offset + contrast * (2.0 * PI * u / period + phase).sin()
                })
            }
            TextureKind::Checkers => {
                let cell = label + 2;
                let (dy, dx) = (r.random_range(0..cell), r.random_range(0..cell));
                let contrast = r.random_range(0.5..0.8);
                Box::new(move |y, x| if ((y + dy) / cell + (x + dx) / cell) % 2 == 0 { contrast } else { -contrast })
            }
            TextureKind::Noise => {
                let values: Vec<f64> = (0..side * side).map(|_| r.random_range(-1.0..1.0)).collect();
                Box::new(move |y, x| values[y * side + x])
            }
        };
        for t in &tint {
            for y in 0..side {
                for x in 0..side {
                    let v = pattern(y, x) * t + if kind == TextureKind::Noise { 0.0 } else { noise.sample(&mut r) };
                    data.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Ok(LabeledSet { images: Tensor::new(Shape::new(n, channels, side, side), data)?, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_in_range_and_reproducible() {
        for kind in [TextureKind::Stripes, TextureKind::HvStripes, TextureKind::Checkers, TextureKind::Noise] {
            let a = generate(kind, 7, 2, 16, 3).unwrap();
            let b = generate(kind, 7, 2, 16, 3).unwrap();
            assert_eq!(a.images, b.images);
            assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(a.labels.iter().all(|&l| l < kind.classes()));
        }
    }

    #[test]
    fn label_zero_stripes_vary_along_x() {
        let set = generate(TextureKind::Stripes, 1, 1, 16, 0).unwrap();
        assert_eq!(set.labels[0], 0);
        // near-horizontal wave vector: variation along x dominates along y
        let img = &set.images;
        let dx: f32 = (0..15).map(|x| (img.at(0, 0, 4, x + 1) - img.at(0, 0, 4, x)).abs()).sum();
        let dy: f32 = (0..15).map(|y| (img.at(0, 0, y + 1, 4) - img.at(0, 0, y, 4)).abs()).sum();
        assert!(dx > 2.0 * dy, "dx {dx} dy {dy}");
    }

    #[test]
    fn split_partitions() {
        let set = generate(TextureKind::Checkers, 10, 1, 8, 1).unwrap();
        let (a, b) = set.split(4).unwrap();
        assert_eq!((a.len(), b.len()), (4, 6));
        assert_eq!(b.labels[0], set.labels[4]);
    }
}
