//! Delayed-injection editing with a region-adaptive correction and velocity
//! fusion, plus the editing baselines it is compared against.
//!
//! The source latent is inverted with the source condition only up to
//! `t_{round(αN)}` on the uniform `1/N` grid. Sampling back down then
//! evaluates both conditions at every step: their difference drives a
//! correction scaled by a per-pixel mask, and the mask also blends the two
//! velocities for the update.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{Condition, VelocityField};
use crate::inversion::uni_inv;
use crate::sampler::{check_finite, sample};
use crate::step::StepRule;
use crate::tensor::{
    channel_mean, minmax_normalize, uniform_grid, Latent, MaskMode, SpatialMap, TimeGrid,
};

/// How the per-step mask is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskPolicy {
    /// Normalized channel-mean map of `v^T - v^S`.
    Adaptive(MaskMode),
    /// The same value at every pixel and step.
    Fixed(f64),
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::Adaptive(MaskMode::Absolute)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub omega: f64,
    pub alpha: f64,
    pub n_steps: usize,
    pub source: Condition,
    pub target: Condition,
    pub mask: MaskPolicy,
}

impl EditConfig {
    /// `ω = 5`, `α = 0.6`.
    pub fn new(n_steps: usize, source: Condition, target: Condition) -> Self {
        Self {
            omega: 5.0,
            alpha: 0.6,
            n_steps,
            source,
            target,
            mask: MaskPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(invalid(format!(
                "guidance strength must be finite and non-negative, got {}",
                self.omega
            )));
        }
        if let MaskPolicy::Fixed(m) = self.mask {
            if !(0.0..=1.0).contains(&m) {
                return Err(invalid(format!("fixed mask value {m} outside [0, 1]")));
            }
        }
        self.grid().map(|_| ())
    }

    /// Uniform grid truncated at `t_{round(αN)}`.
    pub fn grid(&self) -> Result<TimeGrid> {
        uniform_grid(self.n_steps, self.alpha)
    }

    /// `3·round(αN) + 1`.
    pub fn expected_nfe(&self) -> Result<u64> {
        Ok(3 * self.grid()?.n_steps() as u64 + 1)
    }
}

/// Normalized channel-mean map of the velocity difference.
pub fn guidance_mask(v_minus: &Latent) -> SpatialMap {
    guidance_mask_with(v_minus, MaskMode::Absolute)
}

pub fn guidance_mask_with(v_minus: &Latent, mode: MaskMode) -> SpatialMap {
    minmax_normalize(&channel_mean(v_minus, mode))
}

/// `v^S + (ω(1 + m) + m)⊙(v^T - v^S)`: the single velocity whose Euler step
/// equals one correction-plus-fusion step.
pub fn reformed_velocity(v_s: &Latent, v_t: &Latent, m: &SpatialMap, omega: f64) -> Latent {
    let diff = v_t.sub(v_s);
    let w = diff.broadcast_with(m, |d, mv| (omega * (1.0 + mv) + mv) * d);
    v_s.add(&w)
}

/// Correction `Ž = Z + ωΔ'(1 + m)⊙(v^T - v^S)` followed by the fused update
/// `Ž + Δ'(m⊙v^T + (1 - m)⊙v^S)`; returns both latents.
pub fn composite_step(
    z: &Latent,
    v_s: &Latent,
    v_t: &Latent,
    m: &SpatialMap,
    omega: f64,
    dt: f64,
) -> (Latent, Latent) {
    let stride = v_t
        .sub(v_s)
        .broadcast_with(m, |d, mv| omega * dt * (1.0 + mv) * d);
    let corrected = z.add(&stride);
    let fused = v_t
        .broadcast_with(m, |vt, mv| mv * vt)
        .add(&v_s.broadcast_with(m, |vs, mv| (1.0 - mv) * vs));
    let next = corrected.add_scaled(dt, &fused);
    (corrected, next)
}

/// One sampling step of the editor, from `t_i` to `t_{i-1}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditStep {
    pub index: usize,
    pub t: f64,
    pub mask: SpatialMap,
    pub v_source: Latent,
    pub v_target: Latent,
    /// Latent after the correction, `Ž_{t_i}`.
    pub corrected: Latent,
    /// Latent after the update, `Z̃_{t_{i-1}}`.
    pub next: Latent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditTrace {
    /// Inverted latent at the top of the truncated grid.
    pub inverted: Latent,
    /// Records in execution order (`i = round(αN)` first).
    pub steps: Vec<EditStep>,
    pub output: Latent,
    pub nfe: u64,
}

/// Per-step scalars of a trace, for JSON reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditStepSummary {
    pub index: usize,
    pub t: f64,
    pub mask_mean: f64,
    pub mask_min: f64,
    pub mask_max: f64,
    pub velocity_gap_rms: f64,
}

impl EditTrace {
    pub fn summary(&self) -> Vec<EditStepSummary> {
        self.steps
            .iter()
            .map(|s| {
                let gap = s.v_target.sub(&s.v_source);
                EditStepSummary {
                    index: s.index,
                    t: s.t,
                    mask_mean: s.mask.mean(),
                    mask_min: s.mask.min(),
                    mask_max: s.mask.max(),
                    velocity_gap_rms: (gap.sum_sq() / gap.len() as f64).sqrt(),
                }
            })
            .collect()
    }

    /// Step-averaged mask mean inside and outside `region`; `None` when the
    /// region or its complement is empty.
    pub fn mask_contrast(&self, region: &SpatialMap) -> Option<(f64, f64)> {
        let n = self.steps.len() as f64;
        let (mut inside, mut outside) = (0.0, 0.0);
        for s in &self.steps {
            inside += s.mask.masked_mean(region, true)?;
            outside += s.mask.masked_mean(region, false)?;
        }
        Some((inside / n, outside / n))
    }
}

fn eval_pair(
    field: &dyn VelocityField,
    z: &Latent,
    t: f64,
    cs: Condition,
    ct: Condition,
) -> (Latent, Latent) {
    rayon::join(|| field.eval(z, t, cs), || field.eval(z, t, ct))
}

/// Region-adaptive editing of `z0` from `cfg.source` to `cfg.target`.
pub fn uni_edit(field: &dyn VelocityField, z0: &Latent, cfg: &EditConfig) -> Result<EditTrace> {
    cfg.validate()?;
    let nfe0 = field.nfe();
    let rule = StepRule::euler(field, cfg.grid()?);
    let grid = rule.grid().clone();
    let inverted = uni_inv(&rule, z0, cfg.source)?.into_end();
    let mut z = inverted.clone();
    let mut steps = Vec::with_capacity(grid.n_steps());
    for i in (1..=grid.n_steps()).rev() {
        let t = grid.t(i);
        let dt = grid.signed_dt(i);
        let (v_s, v_t) = eval_pair(field, &z, t, cfg.source, cfg.target);
        let mask = match cfg.mask {
            MaskPolicy::Adaptive(mode) => guidance_mask_with(&v_t.sub(&v_s), mode),
            MaskPolicy::Fixed(m) => SpatialMap::filled(z.shape().height, z.shape().width, m),
        };
        let (corrected, next) = composite_step(&z, &v_s, &v_t, &mask, cfg.omega, dt);
        check_finite(&corrected, i, "edit correction")?;
        check_finite(&next, i, "edit update")?;
        z = next.clone();
        steps.push(EditStep {
            index: i,
            t,
            mask,
            v_source: v_s,
            v_target: v_t,
            corrected,
            next,
        });
    }
    Ok(EditTrace {
        inverted,
        steps,
        output: z,
        nfe: field.nfe() - nfe0,
    })
}

/// Inversion with the source condition to `t_{round(αN)}`, then plain
/// sampling with the target condition.
pub fn baseline_delayed_injection(
    field: &dyn VelocityField,
    z0: &Latent,
    cfg: &EditConfig,
) -> Result<Latent> {
    cfg.validate()?;
    let rule = StepRule::euler(field, cfg.grid()?);
    let noise = uni_inv(&rule, z0, cfg.source)?.into_end();
    Ok(sample(&rule, &noise, cfg.target)?.into_end())
}

/// Full inversion followed by full resampling with the target condition.
pub fn baseline_direct_edit(
    field: &dyn VelocityField,
    z0: &Latent,
    n_steps: usize,
    source: Condition,
    target: Condition,
) -> Result<Latent> {
    let cfg = EditConfig {
        alpha: 1.0,
        omega: 0.0,
        ..EditConfig::new(n_steps, source, target)
    };
    baseline_delayed_injection(field, z0, &cfg)
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub output: Latent,
    /// Latents held at once: the whole stored inversion trajectory.
    pub peak_stored_latents: usize,
    pub nfe: u64,
}

/// Mask-based latent fusion: before every step the edit-branch latent is
/// blended with the stored inversion latent at the same time, then advanced
/// with the target velocity. The mask is built as in [`uni_edit`].
pub fn baseline_latent_fusion(
    field: &dyn VelocityField,
    z0: &Latent,
    cfg: &EditConfig,
) -> Result<FusionOutput> {
    cfg.validate()?;
    let nfe0 = field.nfe();
    let rule = StepRule::euler(field, cfg.grid()?);
    let grid = rule.grid().clone();
    let stored = uni_inv(&rule, z0, cfg.source)?.states;
    let mut z = stored[grid.n_steps()].clone();
    for i in (1..=grid.n_steps()).rev() {
        let t = grid.t(i);
        let (v_s, v_t) = eval_pair(field, &z, t, cfg.source, cfg.target);
        let mask = match cfg.mask {
            MaskPolicy::Adaptive(mode) => guidance_mask_with(&v_t.sub(&v_s), mode),
            MaskPolicy::Fixed(m) => SpatialMap::filled(z.shape().height, z.shape().width, m),
        };
        let fused = z
            .broadcast_with(&mask, |e, m| m * e)
            .add(&stored[i].broadcast_with(&mask, |s, m| (1.0 - m) * s));
        z = fused.add_scaled(grid.signed_dt(i), &v_t);
        check_finite(&z, i, "fusion update")?;
    }
    Ok(FusionOutput {
        output: z,
        peak_stored_latents: stored.len(),
        nfe: field.nfe() - nfe0,
    })
}
