//! Evaluation of trained states: feature extraction, a small classifier
//! head trained on frozen features, and score statistics on image sets.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::NormMode;
use crate::pyramid::GridPyramid;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::trainer::TrainState;

/// Images pushed through a network at once during evaluation.
const CHUNK: usize = 64;

/// Per-grid feature maps of a set of images.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub grids: Vec<usize>,
    /// `N x C_s x H_s x W_s` per grid, coarsest first.
    pub maps: Vec<Tensor<f32>>,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.maps.first().map_or(0, |m| m.shape().n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, indices: &[usize]) -> Result<FeatureBundle> {
        let maps = self.maps.iter().map(|m| m.gather(indices)).collect::<Result<_>>()?;
        Ok(FeatureBundle { grids: self.grids.clone(), maps })
    }

    /// Total feature dimension.
    pub fn dim(&self) -> usize {
        self.maps.iter().map(|m| m.shape().item_len()).sum()
    }
}

fn model_inputs(state: &TrainState, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let want = state.config.image_shape();
    if images.shape() != want.batch(images.shape().n) {
        return Err(Error::dim(format!("images {} do not match the model's {want}", images.shape())));
    }
    if state.config.method.is_multigrid() {
        let pyramid = GridPyramid::build(images, state.config.scale_factor, state.config.grids)?;
        Ok(pyramid.into_levels().split_off(1))
    } else {
        Ok(vec![images.clone()])
    }
}

fn chunked(images: &Tensor<f32>, mut f: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    let n = images.shape().n;
    let mut parts = Vec::with_capacity(n.div_ceil(CHUNK));
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        parts.push(f(&images.gather(&idx)?)?);
    }
    Tensor::concat(&parts)
}

/// Activations entering each grid's final layer, computed with stored
/// normalization statistics so that every image is treated independently.
pub fn extract_features(state: &TrainState, images: &Tensor<f32>) -> Result<FeatureBundle> {
    if !state.is_trained() {
        return Err(Error::Untrained);
    }
    if images.shape().n == 0 {
        return Err(Error::Empty("no images to extract features from".into()));
    }
    let inputs = model_inputs(state, images)?;
    let maps = state
        .models
        .iter()
        .zip(&inputs)
        .map(|(m, x)| chunked(x, |b| m.features(b, NormMode::Running)))
        .collect::<Result<_>>()?;
    Ok(FeatureBundle { grids: state.models.iter().map(|m| m.grid()).collect(), maps })
}

/// Per-image scores `f_s(Y_s)` for every grid, with stored normalization
/// statistics.
pub fn scores(state: &TrainState, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    let inputs = model_inputs(state, images)?;
    state
        .models
        .iter()
        .zip(&inputs)
        .map(|(m, x)| {
            let t = chunked(x, |b| {
                let s = m.score(b, NormMode::Running)?;
                Tensor::new(Shape::new(s.len(), 1, 1, 1), s)
            })?;
            Ok(t.into_vec())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStats {
    pub set: String,
    pub grid: usize,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

/// Mean and standard deviation of each grid's score on each named set.
pub fn score_diagnostics(state: &TrainState, sets: &[(&str, &Tensor<f32>)]) -> Result<Vec<ScoreStats>> {
    let mut out = Vec::new();
    for (name, images) in sets {
        if images.shape().n == 0 {
            return Err(Error::Empty(format!("set '{name}' is empty")));
        }
        for (m, s) in state.models.iter().zip(scores(state, images)?) {
            let (mean, std) = mean_std(&s);
            out.push(ScoreStats { set: name.to_string(), grid: m.grid(), n: s.len(), mean, std });
        }
    }
    Ok(out)
}

pub fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Channels of the 3x3 convolution applied to each feature map; `None`
    /// gives a purely linear (softmax regression) head.
    pub hidden_channels: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_channels: Some(64),
            iterations: 2000,
            batch_size: 64,
            learning_rate: 0.05,
            decay_every: 100,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn linear() -> Self {
        HeadConfig { hidden_channels: None, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Branch {
    /// Per-channel standardization of the input map.
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    conv: Option<(Tensor<f32>, Tensor<f32>)>,
    fc: (Tensor<f32>, Tensor<f32>),
}

/// Softmax classifier over one or more feature maps: each map is
/// standardized per channel, optionally passed through a 3x3 convolution
/// and ReLU, and mapped linearly to class logits; the logits of all maps
/// are summed, which equals one linear layer on their concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    classes: usize,
    branches: Vec<Branch>,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.classes
    }

    fn standardize(&self, maps: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if maps.len() != self.branches.len() {
            return Err(Error::dim(format!("{} feature maps for a head with {} inputs", maps.len(), self.branches.len())));
        }
        maps.iter()
            .zip(&self.branches)
            .map(|(m, b)| {
                let s = m.shape();
                if s.c != b.mean.len() {
                    return Err(Error::dim(format!("feature map {s} has the wrong channel count")));
                }
                Ok(Tensor::from_fn(s, |n, c, i, j| (m.at(n, c, i, j) - b.mean[c]) * b.inv_std[c]))
            })
            .collect()
    }

    fn record(&self, tape: &mut Tape<f32>, maps: &[Tensor<f32>], grad: bool) -> Result<(Var, Vec<Var>)> {
        let mut params = Vec::new();
        let mut total = None;
        for (x, b) in maps.iter().zip(&self.branches) {
            let mut cur = tape.leaf(x.clone(), false);
            if let Some((w, bias)) = &b.conv {
                let w = tape.leaf(w.clone(), grad);
                let bias = tape.leaf(bias.clone(), grad);
                params.extend([w, bias]);
                cur = tape.conv2d(cur, w, bias, 1, w_pad(&b.conv))?;
                cur = tape.relu(cur)?;
            }
            let w = tape.leaf(b.fc.0.clone(), grad);
            let bias = tape.leaf(b.fc.1.clone(), grad);
            params.extend([w, bias]);
            let logits = tape.fully_connected(cur, w, bias)?;
            total = Some(match total {
                None => logits,
                Some(t) => tape.add(t, logits)?,
            });
        }
        Ok((total.expect("at least one branch"), params))
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            if let Some((w, bias)) = &mut b.conv {
                out.push(w);
                out.push(bias);
            }
            out.push(&mut b.fc.0);
            out.push(&mut b.fc.1);
        }
        out
    }

    /// Class logits, `N x K`.
    pub fn logits(&self, maps: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let maps = self.standardize(maps)?;
        let n = maps.first().map_or(0, |m| m.shape().n);
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let chunk = maps.iter().map(|m| m.gather(&idx)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let (out, _) = self.record(&mut tape, &chunk, false)?;
            parts.push(tape.value(out).clone());
        }
        Tensor::concat(&parts)
    }

    pub fn predict(&self, maps: &[Tensor<f32>]) -> Result<Vec<usize>> {
        let logits = self.logits(maps)?;
        Ok((0..logits.shape().n).map(|i| argmax(logits.item(i))).collect())
    }

    pub fn accuracy(&self, maps: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(maps)?;
        if pred.len() != labels.len() {
            return Err(Error::dim(format!("{} predictions for {} labels", pred.len(), labels.len())));
        }
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }
}

fn w_pad(conv: &Option<(Tensor<f32>, Tensor<f32>)>) -> usize {
    conv.as_ref().map_or(0, |(w, _)| w.shape().h / 2)
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Trains a classifier on frozen feature maps by mini-batch gradient
/// descent on the mean cross-entropy.
pub fn train_classifier(maps: &[Tensor<f32>], labels: &[usize], classes: usize, config: &HeadConfig) -> Result<ClassifierHead> {
    let n = labels.len();
    if maps.is_empty() || n == 0 {
        return Err(Error::Empty("classifier needs features and labels".into()));
    }
    if classes < 2 || labels.iter().any(|&l| l >= classes) {
        return Err(Error::Config(format!("labels must lie in 0..{classes} with at least two classes")));
    }
    if maps.iter().any(|m| m.shape().n != n) {
        return Err(Error::dim("every feature map needs one entry per label"));
    }
    if config.iterations == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("head training needs positive iterations, batch size and learning rate".into()));
    }
    let mut r = rng::seeded(config.seed);
    let mut branches = Vec::with_capacity(maps.len());
    for m in maps {
        let s = m.shape();
        let (mean, inv_std) = channel_standardization(m);
        let conv = config.hidden_channels.map(|h| {
            let fan_in = s.c * 9;
            let w = random_tensor(Shape::new(h, s.c, 3, 3), (2.0 / fan_in as f64).sqrt(), &mut r);
            (w, Tensor::vector(vec![0.0; h]))
        });
        let d = match config.hidden_channels {
            Some(h) => h * s.h * s.w,
            None => s.item_len(),
        };
        let fc = (random_tensor(Shape::new(d, classes, 1, 1), (1.0 / d as f64).sqrt(), &mut r), Tensor::vector(vec![0.0; classes]));
        branches.push(Branch { mean, inv_std, conv, fc });
    }
    let mut head = ClassifierHead { classes, branches };
    let maps = head.standardize(maps)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for t in 0..config.iterations {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size.min(n) {
            if cursor >= order.len() {
                order = (0..n).collect();
                order.shuffle(&mut r);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = maps.iter().map(|m| m.gather(&idx)).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let (out, params) = head.record(&mut tape, &batch, true)?;
        let logits = tape.value(out);
        let b = idx.len();
        let mut seed = vec![0.0f32; b * classes];
        for (i, &l) in idx.iter().map(|&i| &labels[i]).enumerate() {
            let p = softmax(logits.item(i));
            for k in 0..classes {
                seed[i * classes + k] = (p[k] - if k == l { 1.0 } else { 0.0 }) / b as f32;
            }
        }
        let mut grads = tape.backward_seeded(out, Tensor::new(logits.shape(), seed)?)?;
        let rate = (config.learning_rate / (1.0 + (1.0 + (t / config.decay_every.max(1)) as f64).ln())) as f32;
        let wd = config.weight_decay as f32;
        for (p, v) in head.tensors_mut().into_iter().zip(params) {
            let g = grads.take(v).ok_or_else(|| Error::Tape("missing head gradient".into()))?;
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(format!("classifier head at iteration {t}")));
            }
            for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= rate * (gv + wd * *w);
            }
        }
    }
    Ok(head)
}

/// Softmax regression on raw pixels.
pub fn logistic_regression(images: &Tensor<f32>, labels: &[usize], classes: usize, config: &HeadConfig) -> Result<ClassifierHead> {
    let config = HeadConfig { hidden_channels: None, ..config.clone() };
    train_classifier(std::slice::from_ref(images), labels, classes, &config)
}

fn channel_standardization(m: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let s = m.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut sq = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for &v in &m.item(n)[c * s.plane()..(c + 1) * s.plane()] {
                mean[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    let mut inv = Vec::with_capacity(s.c);
    for c in 0..s.c {
        mean[c] /= count;
        let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
        inv.push(if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 });
    }
    (mean.into_iter().map(|v| v as f32).collect(), inv)
}

fn random_tensor(shape: Shape, std: f64, r: &mut rng::Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.len()).map(|_| normal.sample(r) as f32).collect();
    Tensor::new(shape, data).expect("sized")
}

fn softmax(v: &[f32]) -> Vec<f32> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f32 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_regression_separates_linear_classes() {
        // class = sign of the first pixel
        let mut r = rng::seeded(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 200;
        let x = Tensor::from_fn(Shape::new(n, 1, 2, 2), |_, _, _, _| normal.sample(&mut r) as f32);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(x.item(i)[0] > 0.0)).collect();
        let cfg = HeadConfig { iterations: 300, learning_rate: 0.5, ..HeadConfig::linear() };
        let head = logistic_regression(&x, &labels, 2, &cfg).unwrap();
        assert!(head.accuracy(&[x], &labels).unwrap() > 0.95);
    }

    #[test]
    fn conv_head_with_two_maps() {
        let mut r = rng::seeded(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 120;
        let a = Tensor::from_fn(Shape::new(n, 2, 3, 3), |_, _, _, _| normal.sample(&mut r) as f32);
        let b = Tensor::from_fn(Shape::new(n, 3, 1, 1), |_, _, _, _| normal.sample(&mut r) as f32);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(b.item(i)[1] > 0.0)).collect();
        let cfg = HeadConfig { hidden_channels: Some(4), iterations: 400, learning_rate: 0.2, ..Default::default() };
        let head = train_classifier(&[a.clone(), b.clone()], &labels, 2, &cfg).unwrap();
        assert!(head.accuracy(&[a, b], &labels).unwrap() > 0.9);
    }

    #[test]
    fn head_rejects_bad_labels() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 1, 1, 1));
        assert!(logistic_regression(&x, &[0, 2], 2, &HeadConfig::linear()).is_err());
        assert!(logistic_regression(&x, &[0], 2, &HeadConfig::linear()).is_err());
    }

    #[test]
    fn mean_std_of_small_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
