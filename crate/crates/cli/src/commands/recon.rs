use flowinv_core::experiments::{
    analytic_roundtrips, mean_mse_by_method, recon_benchmark, training_pairs, win_rate, ReconRow,
    FIELD_METHODS, HELDOUT_SEED,
};
use flowinv_core::metrics::psnr_from_mse;
use flowinv_core::sampler::{Inverter, VanillaMode};
use flowinv_core::shapes::{gen_shapes_dataset, image_shape};
use flowinv_core::stats::mean;
use flowinv_core::StepKind;

use super::{load_model, DEFAULT_MODEL, DEFAULT_OUT};
use crate::config::Resolver;
use crate::error::CliError;
use crate::output::{ensure_dir, num, write_csv};
use crate::ReconstructArgs;

const SUMMARY_HEADER: [&str; 7] = ["setting", "method", "steps", "nfe", "mse", "psnr", "ssim"];

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn reconstruct(a: ReconstructArgs, mut r: Resolver) -> Result<(), CliError> {
    let model = r.path("model", a.model, DEFAULT_MODEL)?;
    let images = r.get("images", a.images, 50)?;
    let data_seed = r.get("data-seed", a.data_seed, HELDOUT_SEED)?;
    let n = r.get("steps", a.steps, 50)?;
    let sigma0 = r.get("sigma0", a.sigma0, 1.0)?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("reconstruct")?;
    if n < 2 {
        return Err(CliError::Usage("steps must be at least 2".into()));
    }

    let field = load_model(&model)?;
    let held = training_pairs(&gen_shapes_dataset(images, data_seed)?);
    ensure_dir(&out)?;
    let mut per_image = Vec::new();
    let mut summary = Vec::new();
    for (conditional, setting) in [(false, "unconditional"), (true, "conditional")] {
        let rows = recon_benchmark(&field, &held, n, &FIELD_METHODS, conditional)?;
        println!("{setting} (budget {n} evaluations per pass, {images} images)");
        println!(
            "  {:<14} {:>5} {:>6} {:>11} {:>8} {:>7}",
            "method", "steps", "nfe", "mse", "psnr", "ssim"
        );
        for (method, mse, nfe) in mean_mse_by_method(&rows) {
            let of: Vec<&ReconRow> = rows.iter().filter(|r| r.method == method).collect();
            let psnr = mean(&of.iter().map(|r| r.psnr).collect::<Vec<_>>());
            let ssim: Vec<f64> = of.iter().filter_map(|r| r.ssim).collect();
            let ssim = (!ssim.is_empty()).then(|| mean(&ssim));
            let steps = of[0].steps;
            println!(
                "  {method:<14} {steps:>5} {nfe:>6} {mse:>11.3e} {psnr:>8.2} {:>7}",
                ssim.map_or("-".into(), |s| format!("{s:.4}"))
            );
            summary.push(vec![
                setting.to_string(),
                method.clone(),
                steps.to_string(),
                nfe.to_string(),
                num(mse),
                num(psnr),
                opt(ssim),
            ]);
        }
        println!(
            "  uni_inv beats at_prev on {:.0}% and at_target on {:.0}% of images",
            100.0 * win_rate(&rows, "uni_inv", "at_prev"),
            100.0 * win_rate(&rows, "uni_inv", "at_target")
        );
        per_image.extend(rows);
    }

    println!("analytic Gaussian setting, DDIM rule (sigma0 {sigma0}, {images} seeds)");
    let mut ddim_rows = Vec::new();
    for (inv, name) in [
        (Inverter::Vanilla(VanillaMode::AtPrev), "ddim_at_prev"),
        (Inverter::UniInv, "uni_inv_ddim"),
    ] {
        let errs =
            analytic_roundtrips(sigma0, StepKind::Ddim, n, inv, images as u64, image_shape())?;
        let nfe = n as u64 + u64::from(inv == Inverter::UniInv) + n as u64;
        let m = mean(&errs);
        println!("  {name:<14} {n:>5} {nfe:>6} {m:>11.3e}");
        summary.push(vec![
            "analytic_ddim".into(),
            name.into(),
            n.to_string(),
            nfe.to_string(),
            num(m),
            num(psnr_from_mse(m, 1.0)),
            String::new(),
        ]);
        for (seed, e) in errs.iter().enumerate() {
            ddim_rows.push(vec![seed.to_string(), name.into(), n.to_string(), num(*e)]);
        }
    }

    let rows: Vec<Vec<String>> = per_image
        .iter()
        .map(|r| {
            vec![
                r.image.to_string(),
                r.method.clone(),
                r.conditional.to_string(),
                r.steps.to_string(),
                num(r.mse),
                num(r.psnr),
                opt(r.ssim),
                r.nfe_invert.to_string(),
                r.nfe_sample.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("recon.csv"), &cfg, &ReconRow::CSV_HEADER, &rows)?;
    write_csv(
        &out.join("recon_ddim.csv"),
        &cfg,
        &["seed", "method", "steps", "mse"],
        &ddim_rows,
    )?;
    write_csv(
        &out.join("recon_summary.csv"),
        &cfg,
        &SUMMARY_HEADER,
        &summary,
    )?;
    Ok(())
}
