//! Latents, spatial maps, time grids and the seeded generator shared by every
//! other module.
//!
//! All reductions walk memory in the reference order (channel-outer,
//! then row-major over `[H, W]`) so that results are reproducible bit for bit.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Degenerate-range threshold used by [`minmax_normalize`].
pub const MASK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels >= 1 && height >= 1 && width >= 1,
            "latent dimensions must be positive"
        );
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}]", self.channels, self.height, self.width)
    }
}

/// A `[C, H, W]` array of 64-bit reals, stored channel-outer and row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    shape: Shape,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} ({} elements)", shape, shape.len()),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// A one-pixel latent holding `values` as channels.
    pub fn from_channels(values: &[f64]) -> Self {
        Self {
            shape: Shape::new(values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(c, h, w);
        self.data[i] = value;
    }

    fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.shape.height + h) * self.shape.width + w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same(&self, other: &Latent) {
        assert_eq!(
            self.shape, other.shape,
            "latent shape mismatch: {} vs {}",
            self.shape, other.shape
        );
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        self.check_same(other);
        Latent {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Latent) -> Latent {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Latent) -> Latent {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Latent {
        self.map(|x| k * x)
    }

    /// `self + k * other`
    pub fn add_scaled(&self, k: f64, other: &Latent) -> Latent {
        self.zip_map(other, |a, b| a + k * b)
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: f64, b: f64, other: &Latent) -> Latent {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    /// Elementwise product with an `[H, W]` map broadcast over channels.
    pub fn mul_map(&self, m: &SpatialMap) -> Latent {
        self.broadcast_with(m, |x, mv| x * mv)
    }

    /// Applies `f(value, map_value)` with `m` broadcast over channels.
    pub fn broadcast_with(&self, m: &SpatialMap, f: impl Fn(f64, f64) -> f64) -> Latent {
        assert!(
            m.height == self.shape.height && m.width == self.shape.width,
            "map [{}, {}] does not match latent {}",
            m.height,
            m.width,
            self.shape
        );
        let p = self.shape.plane();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, m.data[i % p]))
            .collect();
        Latent {
            shape: self.shape,
            data,
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.check_same(other);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Latent {
        self.map(|x| x.clamp(lo, hi))
    }
}

/// An `[H, W]` map, e.g. a guidance mask or a ground-truth region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("[{height}, {width}]"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean of the map over cells where `region` is (`inside`) or is not set.
    /// Returns `None` when no cell qualifies.
    pub fn masked_mean(&self, region: &SpatialMap, inside: bool) -> Option<f64> {
        assert_eq!((self.height, self.width), (region.height, region.width));
        let (mut sum, mut n) = (0.0, 0usize);
        for (&v, &r) in self.data.iter().zip(&region.data) {
            if (r > 0.5) == inside {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// How the per-pixel channel mean of a velocity difference is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaskMode {
    /// Mean of absolute values (the default).
    #[default]
    Absolute,
    /// Signed mean, kept for comparison; opposite-signed channels cancel.
    Signed,
}

/// `out[h, w] = (1/C) Σ_c |v[c, h, w]|`
pub fn channel_mean_abs(v: &Latent) -> SpatialMap {
    channel_mean(v, MaskMode::Absolute)
}

pub fn channel_mean(v: &Latent, mode: MaskMode) -> SpatialMap {
    let s = v.shape();
    let p = s.plane();
    let mut out = vec![0.0; p];
    for c in 0..s.channels {
        for (acc, &x) in out.iter_mut().zip(v.channel(c)) {
            *acc += match mode {
                MaskMode::Absolute => x.abs(),
                MaskMode::Signed => x,
            };
        }
    }
    let inv = 1.0 / s.channels as f64;
    for acc in &mut out {
        *acc *= inv;
    }
    SpatialMap {
        height: s.height,
        width: s.width,
        data: out,
    }
}

/// Rescales to `[0, 1]`; a range below [`MASK_EPS`] yields the constant map 0.5.
pub fn minmax_normalize(m: &SpatialMap) -> SpatialMap {
    let (lo, hi) = (m.min(), m.max());
    let range = hi - lo;
    let data = if range >= MASK_EPS {
        m.data
            .iter()
            .map(|&x| ((x - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.5; m.data.len()]
    };
    SpatialMap {
        height: m.height,
        width: m.width,
        data,
    }
}

/// Strictly increasing times `t_0 < … < t_N` in `[0, 1]`.
///
/// Uniform grids start exactly at 0; full grids end exactly at 1 and editing
/// grids are truncated at `t_{αN}`. Two-point segment grids used by the local
/// error study may start anywhere in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("a time grid needs at least two times"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("time grid must be strictly increasing"));
        }
        if times[0] < 0.0 || times[times.len() - 1] > 1.0 || times.iter().any(|t| !t.is_finite()) {
            return Err(invalid("time grid must lie in [0, 1]"));
        }
        Ok(Self { times })
    }

    /// A single interval `{t_prev, t_cur}`.
    pub fn segment(t_prev: f64, t_cur: f64) -> Result<Self> {
        Self::from_times(vec![t_prev, t_cur])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals `N`.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn last(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Signed sampling increment `t_{i-1} - t_i` of interval `i` (1-based).
    pub fn signed_dt(&self, i: usize) -> f64 {
        self.times[i - 1] - self.times[i]
    }
}

/// `{k / n_steps : k = 0 … round(alpha · n_steps)}`
pub fn uniform_grid(n_steps: usize, alpha: f64) -> Result<TimeGrid> {
    if n_steps == 0 {
        return Err(invalid("n_steps must be at least 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let k = truncated_steps(n_steps, alpha);
    if k == 0 {
        return Err(invalid(format!(
            "round(alpha * n_steps) = 0 for alpha = {alpha}, n_steps = {n_steps}"
        )));
    }
    let n = n_steps as f64;
    Ok(TimeGrid {
        times: (0..=k).map(|j| j as f64 / n).collect(),
    })
}

/// `round(alpha · n_steps)`, the number of intervals in a truncated grid.
pub fn truncated_steps(n_steps: usize, alpha: f64) -> usize {
    (alpha * n_steps as f64).round() as usize
}

/// Seeded ChaCha8 stream. The same seed gives a bit-identical stream on
/// every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for run `index` of a parallel experiment.
    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(self.seed ^ index)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_latent(&mut self, shape: Shape) -> Latent {
        let data = (0..shape.len()).map(|_| self.normal()).collect();
        Latent { shape, data }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
