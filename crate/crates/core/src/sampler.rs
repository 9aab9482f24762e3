//! Deterministic sampling and the two vanilla inversion baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Condition;
use crate::inversion::uni_inv;
use crate::metrics::mse;
use crate::step::StepRule;
use crate::tensor::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryDirection {
    /// Noise to data, `t_N → t_0`.
    Forward,
    /// Data to noise, `t_0 → t_N`.
    Inverse,
}

/// States along a grid, stored by ascending grid index regardless of the
/// direction of travel.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub direction: TrajectoryDirection,
    pub times: Vec<f64>,
    pub states: Vec<Latent>,
    /// `directions[i - 1]` is the direction applied over interval `i`.
    pub directions: Vec<Latent>,
    /// Model evaluations spent producing the trajectory.
    pub nfe: u64,
}

impl Trajectory {
    /// State the traversal started from.
    pub fn start(&self) -> &Latent {
        match self.direction {
            TrajectoryDirection::Forward => self.states.last().unwrap(),
            TrajectoryDirection::Inverse => &self.states[0],
        }
    }

    /// State the traversal ended at.
    pub fn end(&self) -> &Latent {
        match self.direction {
            TrajectoryDirection::Forward => &self.states[0],
            TrajectoryDirection::Inverse => self.states.last().unwrap(),
        }
    }

    pub fn into_end(mut self) -> Latent {
        match self.direction {
            TrajectoryDirection::Forward => self.states.swap_remove(0),
            TrajectoryDirection::Inverse => self.states.pop().unwrap(),
        }
    }
}

/// Which direction estimate a vanilla inverter uses over interval `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VanillaMode {
    /// `direction(Ẑ_{t_{i-1}}, t_{i-1})`, DDIM-inversion style.
    AtPrev,
    /// `direction(Ẑ_{t_{i-1}}, t_i)`, evaluated at the step's target time.
    AtTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Inverter {
    Vanilla(VanillaMode),
    UniInv,
}

impl Inverter {
    pub fn invert(&self, rule: &StepRule<'_>, z0: &Latent, c: Condition) -> Result<Trajectory> {
        match *self {
            Inverter::Vanilla(mode) => vanilla_invert(rule, z0, c, mode),
            Inverter::UniInv => uni_inv(rule, z0, c),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Inverter::Vanilla(VanillaMode::AtPrev) => "at_prev",
            Inverter::Vanilla(VanillaMode::AtTarget) => "at_target",
            Inverter::UniInv => "uni_inv",
        }
    }
}

pub(crate) fn check_finite(z: &Latent, step: usize, stage: &'static str) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, stage })
    }
}

/// Runs the rule from `z_end` at the grid's last time down to `t_0`.
pub fn sample(rule: &StepRule<'_>, z_end: &Latent, c: Condition) -> Result<Trajectory> {
    let grid = rule.grid();
    let n = grid.n_steps();
    let nfe0 = rule.field().nfe();
    let mut states = vec![Latent::zeros(z_end.shape()); n + 1];
    let mut directions = vec![Latent::zeros(z_end.shape()); n];
    states[n] = z_end.clone();
    for i in (1..=n).rev() {
        let d = rule.direction(i, &states[i], grid.t(i), c);
        let next = rule.forward(i, &states[i], &d);
        check_finite(&next, i, "sample")?;
        states[i - 1] = next;
        directions[i - 1] = d;
    }
    Ok(Trajectory {
        direction: TrajectoryDirection::Forward,
        times: grid.times().to_vec(),
        states,
        directions,
        nfe: rule.field().nfe() - nfe0,
    })
}

/// Inverts with a fixed direction estimate per step and the algebraic step
/// inverse `Ẑ_{t_i} = (Ẑ_{t_{i-1}} - b_i d) / a_i`.
pub fn vanilla_invert(
    rule: &StepRule<'_>,
    z0: &Latent,
    c: Condition,
    mode: VanillaMode,
) -> Result<Trajectory> {
    let grid = rule.grid();
    let n = grid.n_steps();
    let nfe0 = rule.field().nfe();
    let mut states = Vec::with_capacity(n + 1);
    let mut directions = Vec::with_capacity(n);
    states.push(z0.clone());
    for i in 1..=n {
        let prev = &states[i - 1];
        let t = match mode {
            VanillaMode::AtPrev => grid.t(i - 1),
            VanillaMode::AtTarget => grid.t(i),
        };
        let d = rule.direction(i, prev, t, c);
        let next = rule.inverse(i, prev, &d);
        check_finite(&next, i, "vanilla inversion")?;
        states.push(next);
        directions.push(d);
    }
    Ok(Trajectory {
        direction: TrajectoryDirection::Inverse,
        times: grid.times().to_vec(),
        states,
        directions,
        nfe: rule.field().nfe() - nfe0,
    })
}

/// Replays an inversion through the forward step with its cached directions.
/// Recovers the inversion's start latent up to rounding.
pub fn replay_forward(rule: &StepRule<'_>, inversion: &Trajectory) -> Latent {
    let n = rule.n_steps();
    let mut z = inversion.states[n].clone();
    for i in (1..=n).rev() {
        z = rule.forward(i, &z, &inversion.directions[i - 1]);
    }
    z
}

/// Inverts `z0` to the grid end, samples back from that endpoint alone and
/// returns the MSE against `z0`.
pub fn roundtrip_error(
    rule: &StepRule<'_>,
    z0: &Latent,
    c: Condition,
    inverter: Inverter,
) -> Result<f64> {
    let noise = inverter.invert(rule, z0, c)?.into_end();
    let recon = sample(rule, &noise, c)?.into_end();
    mse(z0, &recon)
}
