use flowinv_core::edit::{uni_edit, EditConfig, MaskPolicy};
use flowinv_core::experiments::{
    ablation_rows, ablation_sweep, edit_cases, run_edit, tradeoff_test, AblationRow, EditCase,
    EditMethod, HELDOUT_SEED,
};
use flowinv_core::metrics::region_report;
use flowinv_core::shapes::ShapeClass;
use flowinv_core::tensor::MaskMode;
use serde_json::json;

use super::{load_model, DEFAULT_MODEL, DEFAULT_OUT};
use crate::config::{FloatList, Resolver};
use crate::error::CliError;
use crate::output::{ensure_dir, num, write_csv, write_json, write_latent, write_pgm, write_ppm};
use crate::svg::{Plot, Series};
use crate::{AblateArgs, EditArgs};

fn parse_mask(s: &str) -> Result<MaskPolicy, CliError> {
    match s {
        "absolute" => Ok(MaskPolicy::Adaptive(MaskMode::Absolute)),
        "signed" => Ok(MaskPolicy::Adaptive(MaskMode::Signed)),
        other => other
            .parse::<f64>()
            .ok()
            .filter(|m| (0.0..=1.0).contains(m))
            .map(MaskPolicy::Fixed)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "mask must be absolute, signed or a value in [0, 1], got '{other}'"
                ))
            }),
    }
}

fn parse_class(s: &str) -> Result<ShapeClass, CliError> {
    ShapeClass::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn check_shapes_model(field: &flowinv_core::nn::NeuralField) -> Result<(), CliError> {
    if field.config().shape != flowinv_core::shapes::image_shape() {
        return Err(CliError::Usage(
            "editing needs a model trained on the shapes dataset".into(),
        ));
    }
    Ok(())
}

pub fn edit(a: EditArgs, mut r: Resolver) -> Result<(), CliError> {
    let model = r.path("model", a.model, DEFAULT_MODEL)?;
    let data_seed = r.get("data-seed", a.data_seed, HELDOUT_SEED)?;
    let index = r.get("index", a.index, 0)?;
    let case = edit_cases(index + 1, data_seed)?.pop().unwrap();
    let source = parse_class(&r.get("source", a.source, case.source.name())?)?;
    let target = parse_class(&r.get("target", a.target, case.target.name())?)?;
    let alpha = r.get("alpha", a.alpha, 0.6)?;
    let omega = r.get("omega", a.omega, 5.0)?;
    let steps = r.get("steps", a.steps, 15)?;
    let baseline = r.get("baseline", a.baseline, "none".to_string())?;
    let mask = parse_mask(&r.get("mask", a.mask, "absolute".to_string())?)?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("edit")?;

    let method = EditMethod::parse(&baseline).map_err(|e| CliError::Usage(e.to_string()))?;
    let field = load_model(&model)?;
    check_shapes_model(&field)?;
    let case = EditCase {
        source,
        target,
        ..case
    };
    let ecfg = EditConfig {
        omega,
        alpha,
        n_steps: steps,
        source: source.condition(),
        target: target.condition(),
        mask,
    };
    ecfg.validate()?;
    ensure_dir(&out)?;

    let trace = if method == EditMethod::UniEdit {
        Some(uni_edit(&field, &case.sample.image, &ecfg)?)
    } else {
        None
    };
    let (edited, nfe) = match &trace {
        Some(t) => (t.output.clone(), t.nfe),
        None => {
            let (z, o) = run_edit(&field, &case, method, &ecfg)?;
            (z, o.nfe)
        }
    };
    let rep = region_report(
        &case.sample.image,
        &edited,
        &case.sample.region_mask,
        source.color.channel(),
        target.color.channel(),
    )?;
    write_ppm(&out.join("original.ppm"), &cfg, &case.sample.image)?;
    write_ppm(&out.join("edited.ppm"), &cfg, &edited)?;
    write_latent(&out.join("edited.lat"), &cfg, &edited)?;
    write_csv(
        &out.join("report.csv"),
        &cfg,
        &[
            "method",
            "nfe",
            "bg_mse",
            "bg_psnr",
            "bg_ssim",
            "edit_score",
        ],
        &[vec![
            method.name().into(),
            nfe.to_string(),
            num(rep.bg_mse),
            num(rep.bg_psnr),
            num(rep.bg_ssim),
            num(rep.edit_score),
        ]],
    )?;

    let mut body = json!({
        "method": method.name(),
        "source": source.name(),
        "target": target.name(),
        "nfe": nfe,
        "report": rep,
    });
    if let Some(trace) = &trace {
        let dir = out.join("masks");
        ensure_dir(&dir)?;
        for s in &trace.steps {
            write_pgm(&dir.join(format!("mask_{:02}.pgm", s.index)), &cfg, &s.mask)?;
        }
        let contrast = trace.mask_contrast(&case.sample.region_mask);
        body["expected_nfe"] = json!(ecfg.expected_nfe()?);
        body["steps"] = serde_json::to_value(trace.summary())?;
        body["mask_inside"] = json!(contrast.map(|c| c.0));
        body["mask_outside"] = json!(contrast.map(|c| c.1));
    }
    write_json(&out.join("edit.json"), &cfg, body)?;
    println!(
        "{} {} -> {}: {} evaluations, background PSNR {:.2} dB, edit score {:.3}",
        method.name(),
        source.name(),
        target.name(),
        nfe,
        rep.bg_psnr,
        rep.edit_score
    );
    Ok(())
}

fn curve_plot(
    title: &str,
    y_label: &str,
    rows: &[AblationRow],
    omegas: &[f64],
    y: fn(&AblationRow) -> f64,
) -> Plot {
    Plot {
        title: title.into(),
        x_label: "delay rate alpha".into(),
        y_label: y_label.into(),
        log_x: false,
        log_y: false,
        series: omegas
            .iter()
            .map(|&w| Series {
                name: format!("omega = {w}"),
                points: rows
                    .iter()
                    .filter(|r| r.omega == w)
                    .map(|r| (r.alpha, y(r)))
                    .collect(),
            })
            .collect(),
    }
}

pub fn ablate(a: AblateArgs, mut r: Resolver) -> Result<(), CliError> {
    let model = r.path("model", a.model, DEFAULT_MODEL)?;
    let n_cases = r.get("cases", a.cases, 50)?;
    let data_seed = r.get("data-seed", a.data_seed, HELDOUT_SEED)?;
    let steps = r.get("steps", a.steps, 15)?;
    let alphas = r
        .get("alphas", a.alphas, FloatList(vec![0.2, 0.4, 0.6, 0.8, 1.0]))?
        .0;
    let omegas = r
        .get("omegas", a.omegas, FloatList(vec![1.0, 3.0, 5.0, 8.0]))?
        .0;
    let gate = r.get("gate-omega", a.gate_omega, 5.0)?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("ablate")?;
    let gate_col = omegas
        .iter()
        .position(|&w| w == gate)
        .ok_or_else(|| CliError::Usage(format!("gate-omega {gate} is not among the omegas")))?;
    if alphas.len() < 2 {
        return Err(CliError::Usage(
            "the sweep needs at least two alphas".into(),
        ));
    }

    let field = load_model(&model)?;
    check_shapes_model(&field)?;
    let cases = edit_cases(n_cases, data_seed)?;
    ensure_dir(&out)?;
    let sweep = ablation_sweep(&field, &cases, steps, &alphas, &omegas)?;
    let rows = ablation_rows(&alphas, &omegas, &sweep);
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.alpha),
                num(r.omega),
                num(r.bg_psnr),
                num(r.bg_ssim),
                num(r.edit_score),
                r.nfe.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("ablation.csv"),
        &cfg,
        &AblationRow::CSV_HEADER,
        &csv_rows,
    )?;

    let comments: Vec<String> = cfg.lines().collect();
    let psnr = curve_plot(
        "Background preservation",
        "background PSNR (dB)",
        &rows,
        &omegas,
        |r| r.bg_psnr,
    );
    std::fs::write(out.join("ablation_psnr.svg"), psnr.render(&comments))?;
    let score = curve_plot("Edit effect", "edit score", &rows, &omegas, |r| {
        r.edit_score
    });
    std::fs::write(out.join("ablation_score.svg"), score.render(&comments))?;

    let mut tests = Vec::new();
    let mut gate_pass = false;
    for (k, &w) in omegas.iter().enumerate() {
        let per_alpha: Vec<_> = sweep.iter().map(|v| v[k].clone()).collect();
        let t = tradeoff_test(&alphas, &per_alpha);
        println!(
            "omega {w}: background PSNR falls in {}/{} cases (p = {:.2e}), edit score rises in {}/{} (p = {:.2e})",
            t.psnr_test.agree,
            cases.len(),
            t.psnr_test.p_value,
            t.score_test.agree,
            cases.len(),
            t.score_test.p_value
        );
        if k == gate_col {
            gate_pass = t.passes(0.05);
        }
        tests.push(json!({
            "omega": w,
            "psnr_test": t.psnr_test,
            "score_test": t.score_test,
            "passes": t.passes(0.05),
        }));
    }
    write_json(
        &out.join("tradeoff.json"),
        &cfg,
        json!({ "gate_omega": gate, "tests": tests }),
    )?;
    if gate_pass {
        Ok(())
    } else {
        Err(CliError::Gate(format!(
            "the alpha trade-off at omega {gate} is not significant at the 0.05 level"
        )))
    }
}
