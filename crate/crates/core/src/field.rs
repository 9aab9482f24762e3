//! Velocity fields with evaluation accounting, plus the closed-form fields
//! used as exact oracles.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Latent;

/// Conditioning token; `None` is the unconditional (NULL) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Condition(pub Option<u32>);

impl Condition {
    pub const NULL: Condition = Condition(None);

    pub fn token(k: u32) -> Self {
        Condition(Some(k))
    }

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(k) => write!(f, "{k}"),
            None => f.write_str("null"),
        }
    }
}

/// Race-free count of model evaluations.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn tick(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for NfeCounter {
    fn clone(&self) -> Self {
        NfeCounter(AtomicU64::new(self.get()))
    }
}

/// `(latent, time, condition) -> velocity`.
///
/// Implementations must be deterministic and leave no side effect apart from
/// bumping the evaluation counter. The output has the input's shape.
pub trait VelocityField: Send + Sync {
    fn eval(&self, z: &Latent, t: f64, c: Condition) -> Latent;

    /// Number of `eval` calls since construction or the last reset.
    fn nfe(&self) -> u64;

    fn reset_nfe(&self);
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn eval(&self, z: &Latent, t: f64, c: Condition) -> Latent {
        (**self).eval(z, t, c)
    }
    fn nfe(&self) -> u64 {
        (**self).nfe()
    }
    fn reset_nfe(&self) {
        (**self).reset_nfe()
    }
}

/// Marginal velocity `E[Z_1 - Z_0 | Z_t = z]` of the linear interpolant
/// `Z_t = t Z_1 + (1 - t) Z_0` with `Z_0 ~ N(mu0, sigma0^2)` and
/// `Z_1 ~ N(0, 1)`, for one scalar coordinate.
pub fn analytic_velocity_scalar(z: f64, t: f64, mu0: f64, sigma0: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    let u = 1.0 - t;
    (t - u * s2) * (z - u * mu0) / (t * t + u * u * s2) - mu0
}

/// Per-channel [`analytic_velocity_scalar`]; `mu0` holds one mean per channel
/// or a single mean shared by all channels.
pub fn analytic_velocity(z: &Latent, t: f64, mu0: &[f64], sigma0: f64) -> Latent {
    per_channel(z, mu0, |x, mu| analytic_velocity_scalar(x, t, mu, sigma0))
}

/// Exact solution at time `t` of `dz/dt = analytic_velocity` from `z0` at
/// `t = 0`: `(1 - t) mu0 + sqrt(t^2 + (1 - t)^2 sigma0^2) / sigma0 · (z0 - mu0)`.
pub fn analytic_flow_map_scalar(z0: f64, t: f64, mu0: f64, sigma0: f64) -> f64 {
    let u = 1.0 - t;
    let spread = (t * t + u * u * sigma0 * sigma0).sqrt() / sigma0;
    u * mu0 + spread * (z0 - mu0)
}

pub fn analytic_flow_map(z0: &Latent, t: f64, mu0: &[f64], sigma0: f64) -> Latent {
    per_channel(z0, mu0, |x, mu| analytic_flow_map_scalar(x, t, mu, sigma0))
}

/// Inverse of [`analytic_flow_map`]: the `t = 0` point whose trajectory passes
/// through `zt` at time `t`.
pub fn analytic_flow_map_inverse(zt: &Latent, t: f64, mu0: &[f64], sigma0: f64) -> Latent {
    per_channel(zt, mu0, |x, mu| {
        let u = 1.0 - t;
        let spread = (t * t + u * u * sigma0 * sigma0).sqrt() / sigma0;
        mu + (x - u * mu) / spread
    })
}

fn per_channel(z: &Latent, mu0: &[f64], f: impl Fn(f64, f64) -> f64) -> Latent {
    let s = z.shape();
    assert!(
        mu0.len() == 1 || mu0.len() == s.channels,
        "mu0 has {} entries for a {}-channel latent",
        mu0.len(),
        s.channels
    );
    let p = s.plane();
    let mut out = z.clone();
    for (i, x) in out.as_mut_slice().iter_mut().enumerate() {
        let mu = if mu0.len() == 1 { mu0[0] } else { mu0[i / p] };
        *x = f(*x, mu);
    }
    out
}

/// `E[eps | Z_k = z]` for `Z_k = sqrt(ab) Z_0 + sqrt(1 - ab) eps`,
/// `Z_0 ~ N(0, sigma0^2)`.
pub fn ddim_analytic_eps(z: &Latent, alpha_bar: f64, sigma0: f64) -> Latent {
    let k = (1.0 - alpha_bar).sqrt() / (alpha_bar * sigma0 * sigma0 + 1.0 - alpha_bar);
    z.scale(k)
}

/// Cumulative signal level `ᾱ(t) = cos²(π t / (2 (1 + s)))`.
///
/// Decreasing on `[0, 1]` with `ᾱ(0) = 1`; the offset `s` keeps `ᾱ(1) > 0`
/// so every step coefficient stays finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdimSchedule {
    pub offset: f64,
}

impl Default for DdimSchedule {
    fn default() -> Self {
        Self { offset: 0.05 }
    }
}

impl DdimSchedule {
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let c = (FRAC_PI_2 * t / (1.0 + self.offset)).cos();
        c * c
    }
}

/// Gaussian-data marginal velocity field.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianField {
    mu0: Vec<f64>,
    sigma0: f64,
    nfe: NfeCounter,
}

impl AnalyticGaussianField {
    pub fn new(mu0: Vec<f64>, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(invalid(format!("sigma0 must be positive, got {sigma0}")));
        }
        if mu0.is_empty() || mu0.iter().any(|m| !m.is_finite()) {
            return Err(invalid("mu0 must hold at least one finite mean"));
        }
        Ok(Self {
            mu0,
            sigma0,
            nfe: NfeCounter::default(),
        })
    }

    /// Zero-mean data with standard deviation `sigma0`.
    pub fn centered(sigma0: f64) -> Result<Self> {
        Self::new(vec![0.0], sigma0)
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn flow_map(&self, z0: &Latent, t: f64) -> Latent {
        analytic_flow_map(z0, t, &self.mu0, self.sigma0)
    }

    pub fn flow_map_inverse(&self, zt: &Latent, t: f64) -> Latent {
        analytic_flow_map_inverse(zt, t, &self.mu0, self.sigma0)
    }

    /// Spatial derivative `∂v/∂z` at time `t` (the field is linear in `z`).
    pub fn slope(&self, t: f64) -> f64 {
        let s2 = self.sigma0 * self.sigma0;
        let u = 1.0 - t;
        (t - u * s2) / (t * t + u * u * s2)
    }
}

impl VelocityField for AnalyticGaussianField {
    fn eval(&self, z: &Latent, t: f64, _c: Condition) -> Latent {
        self.nfe.tick();
        analytic_velocity(z, t, &self.mu0, self.sigma0)
    }
    fn nfe(&self) -> u64 {
        self.nfe.get()
    }
    fn reset_nfe(&self) {
        self.nfe.reset()
    }
}

/// Per-condition Gaussian data parameters; one exact field per token.
#[derive(Debug, Clone)]
pub struct ConditionalAnalyticField {
    table: Vec<(Vec<f64>, f64)>,
    null: Option<(Vec<f64>, f64)>,
    nfe: NfeCounter,
}

impl ConditionalAnalyticField {
    /// `table[k]` holds `(mu0, sigma0)` for token `k`; `null` is used for the
    /// NULL condition.
    pub fn new(table: Vec<(Vec<f64>, f64)>, null: Option<(Vec<f64>, f64)>) -> Result<Self> {
        for (mu, s) in table.iter().chain(null.iter()) {
            AnalyticGaussianField::new(mu.clone(), *s)?;
        }
        if table.is_empty() {
            return Err(invalid("conditional field needs at least one token"));
        }
        Ok(Self {
            table,
            null,
            nfe: NfeCounter::default(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.len()
    }

    pub fn params(&self, c: Condition) -> (&[f64], f64) {
        let (mu, s) = match c.0 {
            Some(k) => self
                .table
                .get(k as usize)
                .unwrap_or_else(|| panic!("token {k} outside vocabulary of {}", self.table.len())),
            None => self
                .null
                .as_ref()
                .expect("field has no NULL-condition entry"),
        };
        (mu, *s)
    }

    pub fn flow_map(&self, z0: &Latent, t: f64, c: Condition) -> Latent {
        let (mu, s) = self.params(c);
        analytic_flow_map(z0, t, mu, s)
    }

    pub fn flow_map_inverse(&self, zt: &Latent, t: f64, c: Condition) -> Latent {
        let (mu, s) = self.params(c);
        analytic_flow_map_inverse(zt, t, mu, s)
    }
}

impl VelocityField for ConditionalAnalyticField {
    fn eval(&self, z: &Latent, t: f64, c: Condition) -> Latent {
        self.nfe.tick();
        let (mu, s) = self.params(c);
        analytic_velocity(z, t, mu, s)
    }
    fn nfe(&self) -> u64 {
        self.nfe.get()
    }
    fn reset_nfe(&self) {
        self.nfe.reset()
    }
}

type TimeFn = dyn Fn(f64, usize) -> f64 + Send + Sync;

/// A field that depends on time only: `v(z, t, c)[j] = f(t, j)`.
pub struct TimeOnlyField {
    f: Box<TimeFn>,
    nfe: NfeCounter,
}

impl TimeOnlyField {
    /// `f(t, j)` gives element `j` (flat, channel-outer) of the velocity.
    pub fn new(f: impl Fn(f64, usize) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Box::new(f),
            nfe: NfeCounter::default(),
        }
    }

    /// The same scalar `f(t)` in every element.
    pub fn uniform(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(move |t, _| f(t))
    }

    pub fn zero() -> Self {
        Self::new(|_, _| 0.0)
    }
}

impl fmt::Debug for TimeOnlyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeOnlyField")
            .field("nfe", &self.nfe.get())
            .finish()
    }
}

impl VelocityField for TimeOnlyField {
    fn eval(&self, z: &Latent, t: f64, _c: Condition) -> Latent {
        self.nfe.tick();
        let mut out = Latent::zeros(z.shape());
        for (j, x) in out.as_mut_slice().iter_mut().enumerate() {
            *x = (self.f)(t, j);
        }
        out
    }
    fn nfe(&self) -> u64 {
        self.nfe.get()
    }
    fn reset_nfe(&self) {
        self.nfe.reset()
    }
}

/// Analytic ε-predictor for zero-mean Gaussian data under a [`DdimSchedule`].
/// Used as the direction of the DDIM step rule.
#[derive(Debug, Clone)]
pub struct AnalyticEpsField {
    sigma0: f64,
    schedule: DdimSchedule,
    nfe: NfeCounter,
}

impl AnalyticEpsField {
    pub fn new(sigma0: f64, schedule: DdimSchedule) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(invalid(format!("sigma0 must be positive, got {sigma0}")));
        }
        Ok(Self {
            sigma0,
            schedule,
            nfe: NfeCounter::default(),
        })
    }

    pub fn schedule(&self) -> DdimSchedule {
        self.schedule
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }
}

impl VelocityField for AnalyticEpsField {
    fn eval(&self, z: &Latent, t: f64, _c: Condition) -> Latent {
        self.nfe.tick();
        ddim_analytic_eps(z, self.schedule.alpha_bar(t), self.sigma0)
    }
    fn nfe(&self) -> u64 {
        self.nfe.get()
    }
    fn reset_nfe(&self) {
        self.nfe.reset()
    }
}
