pub mod converge;
pub mod edit;
pub mod recon;
pub mod report;
pub mod train;

use std::path::Path;

use flowinv_core::checkpoint;
use flowinv_core::nn::NeuralField;
use flowinv_core::shapes::ShapeClass;
use flowinv_core::{Condition, StepKind};

use crate::error::CliError;

pub const DEFAULT_OUT: &str = "flowinv-out";
pub const DEFAULT_MODEL: &str = "flowinv-out/model.ckpt";

pub fn load_model(path: &Path) -> Result<NeuralField, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    Ok(checkpoint::load(path)?.1)
}

/// `null`, a class name, or a token number below `vocab`.
pub fn parse_condition(s: &str, vocab: usize) -> Result<Condition, CliError> {
    if s.eq_ignore_ascii_case("null") {
        return Ok(Condition::NULL);
    }
    if let Ok(k) = s.parse::<u32>() {
        if (k as usize) < vocab {
            return Ok(Condition::token(k));
        }
        return Err(CliError::Usage(format!(
            "condition token {k} outside the model's {vocab} classes"
        )));
    }
    let class = ShapeClass::parse(s).map_err(|e| CliError::Usage(e.to_string()))?;
    if class.token() as usize >= vocab {
        return Err(CliError::Usage(format!(
            "condition '{s}' unknown to the model"
        )));
    }
    Ok(class.condition())
}

/// A step rule usable with a velocity model.
pub fn velocity_rule(s: &str) -> Result<StepKind, CliError> {
    match s.parse::<StepKind>()? {
        StepKind::Ddim => Err(CliError::Usage(
            "the ddim rule needs a noise predictor; use euler or heun with a velocity model".into(),
        )),
        k => Ok(k),
    }
}
