//! One-step update rules.
//!
//! Every solver here takes the affine form
//!
//! ```text
//! Z_{t_{i-1}} = a_i · Z_{t_i} + b_i · direction_i(Z_{t_i}, t_i, c)
//! ```
//!
//! over interval `i` (from `t_i` down to `t_{i-1}`). Euler and Heun have
//! `a_i = 1, b_i = t_{i-1} - t_i`; DDIM uses the ε-prediction as its direction
//! with coefficients from the cumulative signal schedule. Because `a_i != 0`
//! the step can be undone algebraically once the direction is known, so
//! inversion reduces to estimating the direction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Condition, DdimSchedule, VelocityField};
use crate::tensor::{Latent, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Euler,
    Heun,
    Ddim,
}

impl StepKind {
    pub fn name(&self) -> &'static str {
        match self {
            StepKind::Euler => "euler",
            StepKind::Heun => "heun",
            StepKind::Ddim => "ddim",
        }
    }

    /// Model evaluations per direction call.
    pub fn evals_per_direction(&self) -> u64 {
        match self {
            StepKind::Heun => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for StepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(StepKind::Euler),
            "heun" => Ok(StepKind::Heun),
            "ddim" => Ok(StepKind::Ddim),
            other => Err(invalid(format!("unknown step rule '{other}'"))),
        }
    }
}

/// Second Heun slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeunForm {
    /// `v(z + Δ' v(z, t), t + Δ')`
    #[default]
    Standard,
    /// `v(v(z, t), t)`: the velocity is fed back as the sample argument at the
    /// same time. Debug use only.
    Printed,
}

/// Direction plus per-interval coefficients over a time grid.
pub struct StepRule<'a> {
    kind: StepKind,
    heun_form: HeunForm,
    field: &'a dyn VelocityField,
    grid: TimeGrid,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<'a> StepRule<'a> {
    /// Builds the rule; `schedule` is required for DDIM and ignored otherwise.
    pub fn new(
        kind: StepKind,
        field: &'a dyn VelocityField,
        grid: TimeGrid,
        schedule: Option<DdimSchedule>,
    ) -> Result<Self> {
        let n = grid.n_steps();
        let (a, b) = match kind {
            StepKind::Euler | StepKind::Heun => {
                (vec![1.0; n], (1..=n).map(|i| grid.signed_dt(i)).collect())
            }
            StepKind::Ddim => {
                let schedule =
                    schedule.ok_or_else(|| invalid("the DDIM rule requires a schedule"))?;
                let ab: Vec<f64> = grid
                    .times()
                    .iter()
                    .map(|&t| schedule.alpha_bar(t))
                    .collect();
                if ab.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                    return Err(invalid("DDIM schedule must satisfy 0 < ᾱ <= 1 on the grid"));
                }
                if ab.windows(2).any(|w| w[1] > w[0]) {
                    return Err(invalid(
                        "DDIM schedule must be non-increasing along the grid",
                    ));
                }
                (1..=n)
                    .map(|i| {
                        let a = (ab[i - 1] / ab[i]).sqrt();
                        let b = (1.0 - ab[i - 1]).sqrt() - a * (1.0 - ab[i]).sqrt();
                        (a, b)
                    })
                    .unzip()
            }
        };
        if let Some(i) = a.iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(Error::SingularStep { index: i + 1 });
        }
        Ok(Self {
            kind,
            heun_form: HeunForm::Standard,
            field,
            grid,
            a,
            b,
        })
    }

    pub fn euler(field: &'a dyn VelocityField, grid: TimeGrid) -> Self {
        Self::new(StepKind::Euler, field, grid, None).expect("euler steps are always invertible")
    }

    pub fn heun(field: &'a dyn VelocityField, grid: TimeGrid) -> Self {
        Self::new(StepKind::Heun, field, grid, None).expect("heun steps are always invertible")
    }

    pub fn ddim(
        field: &'a dyn VelocityField,
        grid: TimeGrid,
        schedule: DdimSchedule,
    ) -> Result<Self> {
        Self::new(StepKind::Ddim, field, grid, Some(schedule))
    }

    pub fn with_heun_form(mut self, form: HeunForm) -> Self {
        self.heun_form = form;
        self
    }

    /// Same rule and field on another grid.
    pub fn regrid(&self, grid: TimeGrid, schedule: Option<DdimSchedule>) -> Result<StepRule<'a>> {
        Ok(StepRule::new(self.kind, self.field, grid, schedule)?.with_heun_form(self.heun_form))
    }

    pub fn kind(&self) -> StepKind {
        self.kind
    }

    pub fn field(&self) -> &'a dyn VelocityField {
        self.field
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// `(a_i, b_i)` for interval `i` in `1..=N`.
    pub fn coefficients(&self, i: usize) -> (f64, f64) {
        (self.a[i - 1], self.b[i - 1])
    }

    pub fn evals_per_direction(&self) -> u64 {
        self.kind.evals_per_direction()
    }

    /// Direction of interval `i` evaluated at `(z, t)`. For the sampling step
    /// `t = t_i`; inverters may evaluate it elsewhere.
    pub fn direction(&self, i: usize, z: &Latent, t: f64, c: Condition) -> Latent {
        match self.kind {
            StepKind::Euler | StepKind::Ddim => self.field.eval(z, t, c),
            StepKind::Heun => {
                let v1 = self.field.eval(z, t, c);
                let v2 = match self.heun_form {
                    HeunForm::Standard => {
                        let dt = self.grid.signed_dt(i);
                        self.field.eval(&z.add_scaled(dt, &v1), t + dt, c)
                    }
                    HeunForm::Printed => self.field.eval(&v1, t, c),
                };
                v1.lin_comb(0.5, 0.5, &v2)
            }
        }
    }

    /// `a_i z + b_i d`
    pub fn forward(&self, i: usize, z: &Latent, d: &Latent) -> Latent {
        let (a, b) = self.coefficients(i);
        z.lin_comb(a, b, d)
    }

    /// `(z_prev - b_i d) / a_i`, the algebraic inverse of [`Self::forward`]
    /// for a fixed direction `d`.
    pub fn inverse(&self, i: usize, z_prev: &Latent, d: &Latent) -> Latent {
        let (a, b) = self.coefficients(i);
        z_prev.zip_map(d, |x, y| (x - b * y) / a)
    }
}

impl std::fmt::Debug for StepRule<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StepRule")
            .field("kind", &self.kind)
            .field("heun_form", &self.heun_form)
            .field("grid", &self.grid)
            .field("a", &self.a)
            .field("b", &self.b)
            .finish()
    }
}
