use flowinv_core::experiments::convergence_studies;
use flowinv_core::sampler::Inverter;
use flowinv_core::StepKind;

use super::DEFAULT_OUT;
use crate::config::{Pow2Float, Resolver};
use crate::error::CliError;
use crate::output::{ensure_dir, num, write_csv};
use crate::svg::{Plot, Series};
use crate::ConvergeArgs;

/// `dt_max, dt_max/2, …` down to `dt_min`.
pub fn octaves(dt_min: f64, dt_max: f64) -> Result<Vec<f64>, CliError> {
    if !(dt_min > 0.0 && dt_min <= dt_max) {
        return Err(CliError::Usage(format!(
            "need 0 < dt-min <= dt-max, got {dt_min} and {dt_max}"
        )));
    }
    let mut out = Vec::new();
    let mut dt = dt_max;
    while dt >= dt_min * (1.0 - 1e-12) {
        out.push(dt);
        dt /= 2.0;
    }
    Ok(out)
}

pub fn converge(a: ConvergeArgs, mut r: Resolver) -> Result<(), CliError> {
    let rule = r.get("rule", a.rule, "euler".to_string())?;
    let sigma0 = r.get("sigma0", a.sigma0, 1.0)?;
    let t = r.get("t", a.t, 0.75)?;
    let dt_min = r.get("dt-min", a.dt_min, Pow2Float(2f64.powi(-8)))?.0;
    let dt_max = r.get("dt-max", a.dt_max, Pow2Float(2f64.powi(-3)))?.0;
    let seed = r.get("seed", a.seed, 0)?;
    let min_slope = r.get("min-slope", a.min_slope, 2.5)?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("converge")?;

    let kind: StepKind = rule.parse()?;
    let dts = octaves(dt_min, dt_max)?;
    let studies = convergence_studies(kind, sigma0, t, &dts, seed)?;
    ensure_dir(&out)?;

    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut series = Vec::new();
    let mut uni_slope = None;
    for s in &studies {
        let name = s.inverter.name();
        for p in &s.points {
            rows.push(vec![name.to_string(), num(p.dt), num(p.error)]);
        }
        let slope = s.slope.map(num).unwrap_or_default();
        slopes.push(vec![name.to_string(), slope, s.exact.to_string()]);
        match s.slope {
            Some(k) => println!("{name:<10} slope {k:.3}"),
            None => println!("{name:<10} exact to rounding"),
        }
        if s.inverter == Inverter::UniInv {
            uni_slope = Some(s.slope);
        }
        series.push(Series {
            name: name.to_string(),
            points: s.points.iter().map(|p| (p.dt, p.error)).collect(),
        });
    }
    write_csv(
        &out.join("converge.csv"),
        &cfg,
        &["method", "dt", "error"],
        &rows,
    )?;
    write_csv(
        &out.join("slopes.csv"),
        &cfg,
        &["method", "slope", "exact"],
        &slopes,
    )?;
    let plot = Plot {
        title: format!("One-step inversion error ({} rule, t = {t})", kind.name()),
        x_label: "step size".into(),
        y_label: "local error".into(),
        log_x: true,
        log_y: true,
        series,
    };
    std::fs::write(
        out.join("converge.svg"),
        plot.render(&cfg.lines().collect::<Vec<_>>()),
    )?;
    match uni_slope.flatten() {
        Some(k) if k < min_slope => Err(CliError::Gate(format!(
            "uni_inv slope {k:.3} is below {min_slope}"
        ))),
        _ => Ok(()),
    }
}
