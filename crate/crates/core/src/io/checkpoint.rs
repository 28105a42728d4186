//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MGCD`, `u16` version, the configuration
//! as `key = value` text, then per model its grid, architecture string,
//! learnable tensors and batch-norm running statistics as `f32`; the
//! iteration counter, RNG position, grid-0 histogram, epoch order,
//! optional persistent chains and the diagnostic history. Strings and
//! arrays are length-prefixed with `u64`.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::network::{LayerParams, NetworkSpec, ParamSet};
use crate::pyramid::HistogramModel;
use crate::rng::RngState;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{DiagnosticRecord, TrainState};

pub const MAGIC: &[u8; 4] = b"MGCD";
pub const VERSION: u16 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.bytes(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.usize(v.len());
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            self.usize(d);
        }
        self.f32s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
    /// A length that must not exceed the remaining bytes at `unit` each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("checkpoint truncated: array of {n} items at offset {}", self.pos)));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let dims = [self.usize()?, self.usize()?, self.usize()?, self.usize()?];
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let data = self.f32s()?;
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("bad tensor: {e}")))
    }
}

/// Serializes a training state.
pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.bytes(&VERSION.to_le_bytes());
    let cfg = RunConfig { train: state.config.clone(), ..Default::default() };
    w.str(&cfg.to_text());
    w.usize(state.models.len());
    for m in &state.models {
        w.usize(m.grid());
        w.str(&m.spec().to_string());
        for layer in m.layers() {
            match layer {
                LayerParams::Conv { weight, bias } | LayerParams::FullyConnected { weight, bias } => {
                    w.tensor(weight);
                    w.tensor(bias);
                }
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    w.tensor(gamma);
                    w.tensor(beta);
                    w.f32s(running_mean);
                    w.f32s(running_var);
                }
                LayerParams::Relu => {}
            }
        }
    }
    w.usize(state.iteration);
    let rng = RngState::capture(&state.rng);
    w.bytes(&rng.seed);
    w.u64(rng.stream);
    w.bytes(&rng.word_pos.to_le_bytes());
    let h = &state.histogram;
    w.f64(h.low);
    w.f64(h.high);
    w.usize(h.probs.len());
    for p in &h.probs {
        w.usize(p.len());
        p.iter().for_each(|&v| w.f64(v));
    }
    w.usize(state.order.len());
    state.order.iter().for_each(|&i| w.usize(i));
    w.usize(state.cursor);
    match &state.persistent {
        Some(t) => {
            w.u8(1);
            w.tensor(t);
        }
        None => w.u8(0),
    }
    w.usize(state.history.len());
    for r in &state.history {
        w.usize(r.iteration);
        w.u32(r.grid as u32);
        for v in [r.grad_l1, r.score_train, r.score_synth, r.value_gap] {
            w.f64(v);
        }
    }
    w.0
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let config = RunConfig::parse(&r.str()?)?.train;
    let n_models = r.len(1)?;
    let mut models = Vec::with_capacity(n_models);
    for _ in 0..n_models {
        let grid = r.usize()?;
        let spec: NetworkSpec = r.str()?.parse()?;
        let template = ParamSet::<f32>::init(&spec, grid, 0)?;
        let mut layers = Vec::with_capacity(template.layers().len());
        for layer in template.layers() {
            layers.push(match layer {
                LayerParams::Conv { .. } => LayerParams::Conv { weight: r.tensor()?, bias: r.tensor()? },
                LayerParams::FullyConnected { .. } => LayerParams::FullyConnected { weight: r.tensor()?, bias: r.tensor()? },
                LayerParams::BatchNorm { .. } => LayerParams::BatchNorm {
                    gamma: r.tensor()?,
                    beta: r.tensor()?,
                    running_mean: r.f32s()?,
                    running_var: r.f32s()?,
                },
                LayerParams::Relu => LayerParams::Relu,
            });
        }
        models.push(ParamSet::from_layers(&spec, grid, layers).map_err(|e| Error::Format(format!("model {grid}: {e}")))?);
    }
    let iteration = r.usize()?;
    let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) }.restore();
    let (low, high) = (r.f64()?, r.f64()?);
    let channels = r.len(8)?;
    let mut probs = Vec::with_capacity(channels);
    for _ in 0..channels {
        let bins = r.len(8)?;
        probs.push((0..bins).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    }
    let histogram = HistogramModel { low, high, probs };
    let n_order = r.len(8)?;
    let order = (0..n_order).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let cursor = r.usize()?;
    let persistent = match r.u8()? {
        0 => None,
        1 => Some(r.tensor()?),
        v => return Err(Error::Format(format!("invalid persistent-store flag {v}"))),
    };
    let n_hist = r.len(44)?;
    let mut history = VecDeque::with_capacity(n_hist);
    for _ in 0..n_hist {
        history.push_back(DiagnosticRecord {
            iteration: r.usize()?,
            grid: r.u32()? as usize,
            grad_l1: r.f64()?,
            score_train: r.f64()?,
            score_synth: r.f64()?,
            value_gap: r.f64()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    if models.len() != config.num_models() {
        return Err(Error::Format(format!("{} models for a {} configuration", models.len(), config.method)));
    }
    Ok(TrainState { config, models, iteration, rng, histogram, order, cursor, persistent, history })
}

/// Writes atomically: the bytes go to a temporary sibling that is renamed
/// over `path`, so an interrupted write leaves the old checkpoint intact.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}
