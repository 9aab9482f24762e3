//! Predictor-corrector inversion and its local-error study.
//!
//! Each inversion step first walks the known sample back to `t_i` with the
//! direction cached from the previous step (correction), evaluates a fresh
//! direction there at the step's own time (prediction), then undoes the
//! sampling step with that direction (update). One extra evaluation seeds the
//! cache at `t_0`, so `N` steps cost `N + 1` direction calls.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{Condition, DdimSchedule, VelocityField};
use crate::metrics::{mse, psnr, ssim};
use crate::sampler::{check_finite, sample, Inverter, Trajectory, TrajectoryDirection};
use crate::stats::fit_loglog_slope;
use crate::step::{StepKind, StepRule};
use crate::tensor::{Latent, TimeGrid};

/// Inversion state after step `index`: the latent `Ẑ_{t_index}` and the
/// direction `v̂_index` cached for the next correction.
#[derive(Debug, Clone)]
pub struct InvState {
    pub latent: Latent,
    pub cached: Latent,
    pub index: usize,
}

impl InvState {
    /// The initial block: `v̂_0 = direction(Z_0, t_0)`.
    pub fn initial(rule: &StepRule<'_>, z0: &Latent, c: Condition) -> Self {
        let cached = rule.direction(1, z0, rule.grid().t(0), c);
        Self {
            latent: z0.clone(),
            cached,
            index: 0,
        }
    }

    /// Advances one interval and returns the corrected point `Z̄_{t_i}`.
    pub fn step(&mut self, rule: &StepRule<'_>, c: Condition) -> Result<Latent> {
        let i = self.index + 1;
        let corrected = rule.inverse(i, &self.latent, &self.cached);
        check_finite(&corrected, i, "correction")?;
        let predicted = rule.direction(i, &corrected, rule.grid().t(i), c);
        let next = rule.inverse(i, &self.latent, &predicted);
        check_finite(&next, i, "sample update")?;
        self.latent = next;
        self.cached = predicted;
        self.index = i;
        Ok(corrected)
    }
}

/// Predictor-corrector inversion of `z0` over the rule's grid.
pub fn uni_inv(rule: &StepRule<'_>, z0: &Latent, c: Condition) -> Result<Trajectory> {
    let grid = rule.grid();
    let n = grid.n_steps();
    let nfe0 = rule.field().nfe();
    let mut state = InvState::initial(rule, z0, c);
    let mut states = Vec::with_capacity(n + 1);
    let mut directions = Vec::with_capacity(n);
    states.push(z0.clone());
    for _ in 0..n {
        state.step(rule, c)?;
        states.push(state.latent.clone());
        directions.push(state.cached.clone());
    }
    Ok(Trajectory {
        direction: TrajectoryDirection::Inverse,
        times: grid.times().to_vec(),
        states,
        directions,
        nfe: rule.field().nfe() - nfe0,
    })
}

/// One `(Δt, error)` sample of the local error study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalErrorPoint {
    pub dt: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalErrorStudy {
    pub inverter: Inverter,
    pub kind: StepKind,
    pub t_eval: f64,
    pub points: Vec<LocalErrorPoint>,
    /// Least-squares slope of `log error` against `log Δt`; `None` when the
    /// inversion is exact to rounding.
    pub slope: Option<f64>,
    pub exact: bool,
}

/// Errors at or below this (relative to the state norm) count as exact.
const EXACT_FLOOR: f64 = 1e-13;

/// One-step inversion error against an exact state.
///
/// For every `Δt`: start from the exact `Z_{t_eval}`, take one forward step to
/// `t_eval - Δt`, invert that single step with `inverter` and record
/// `‖Ẑ_{t_eval} - Z_{t_eval}‖`. Because a one-interval predictor-corrector
/// inversion seeds its cache at the step start, its correction uses the
/// direction at the previous point; accumulated error from earlier steps is
/// excluded by construction.
pub fn local_error_study(
    kind: StepKind,
    field: &dyn VelocityField,
    exact_state: &Latent,
    t_eval: f64,
    dts: &[f64],
    inverter: Inverter,
    c: Condition,
    schedule: Option<DdimSchedule>,
) -> Result<LocalErrorStudy> {
    if dts.len() < 3 {
        return Err(invalid(
            "the local error study needs at least three step sizes",
        ));
    }
    let mut points = Vec::with_capacity(dts.len());
    for &dt in dts {
        if !(dt > 0.0 && dt <= t_eval) {
            return Err(invalid(format!("step size {dt} outside (0, t_eval]")));
        }
        let rule = StepRule::new(
            kind,
            field,
            TimeGrid::segment(t_eval - dt, t_eval)?,
            schedule,
        )?;
        let d = rule.direction(1, exact_state, t_eval, c);
        let z_prev = rule.forward(1, exact_state, &d);
        let inverted = inverter.invert(&rule, &z_prev, c)?.into_end();
        points.push(LocalErrorPoint {
            dt,
            error: inverted.sub(exact_state).norm(),
        });
    }
    let scale = exact_state.norm().max(1.0);
    let exact = points.iter().all(|p| p.error <= EXACT_FLOOR * scale);
    let slope = if exact {
        None
    } else {
        let xs: Vec<f64> = points.iter().map(|p| p.dt).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.error).collect();
        Some(fit_loglog_slope(&xs, &ys)?)
    };
    Ok(LocalErrorStudy {
        inverter,
        kind,
        t_eval,
        points,
        slope,
        exact,
    })
}

/// `Δt ∈ {2^-hi, …, 2^-lo}`, one point per octave, largest first.
pub fn octave_steps(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| 2f64.powi(-k)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    pub psnr: f64,
    /// Windowed SSIM; `None` for latents smaller than one window.
    pub ssim: Option<f64>,
    pub nfe_invert: u64,
    pub nfe_sample: u64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub noise: Latent,
    pub z0_hat: Latent,
    pub metrics: ReconMetrics,
}

/// Full predictor-corrector inversion, then sampling from the endpoint noise
/// alone.
pub fn reconstruct(rule: &StepRule<'_>, z0: &Latent, c: Condition) -> Result<Reconstruction> {
    reconstruct_with(rule, z0, c, Inverter::UniInv)
}

pub fn reconstruct_with(
    rule: &StepRule<'_>,
    z0: &Latent,
    c: Condition,
    inverter: Inverter,
) -> Result<Reconstruction> {
    let inv = inverter.invert(rule, z0, c)?;
    let nfe_invert = inv.nfe;
    let noise = inv.into_end();
    let fwd = sample(rule, &noise, c)?;
    let nfe_sample = fwd.nfe;
    let z0_hat = fwd.into_end();
    let err = mse(z0, &z0_hat)?;
    let s = z0.shape();
    let ssim = if s.height >= 8 && s.width >= 8 {
        Some(ssim(z0, &z0_hat)?)
    } else {
        None
    };
    Ok(Reconstruction {
        noise,
        metrics: ReconMetrics {
            mse: err,
            psnr: psnr(z0, &z0_hat, 1.0)?,
            ssim,
            nfe_invert,
            nfe_sample,
        },
        z0_hat,
    })
}
