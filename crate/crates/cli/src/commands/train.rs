use flowinv_core::experiments::{
    reference_arch, training_pairs, HELDOUT_SEED, TRAIN_DATA_SEED, TRAIN_SET_SIZE,
};
use flowinv_core::inversion::reconstruct_with;
use flowinv_core::metrics::mse;
use flowinv_core::nn::{tail_mean, train as fit, MlpConfig, TrainConfig};
use flowinv_core::sampler::{sample as run_sampler, Inverter, VanillaMode};
use flowinv_core::shapes::{gen_shapes_dataset, gen_two_gaussians};
use flowinv_core::tensor::uniform_grid;
use flowinv_core::{checkpoint, Condition, SeededRng, Shape, StepRule, VelocityField};
use serde_json::json;

use super::{load_model, parse_condition, velocity_rule, DEFAULT_MODEL, DEFAULT_OUT};
use crate::config::Resolver;
use crate::error::CliError;
use crate::output::{
    ensure_dir, num, read_image_or_latent, write_csv, write_json, write_latent, write_ppm,
};
use crate::{InvertArgs, SampleArgs, TrainArgs};

pub fn train(a: TrainArgs, mut r: Resolver) -> Result<(), CliError> {
    let dataset = r.get("dataset", a.dataset, "shapes".to_string())?;
    let tc = TrainConfig {
        steps: r.get("steps", a.steps, 10_000)?,
        batch_size: r.get("batch-size", a.batch_size, 64)?,
        learning_rate: r.get("lr", a.lr, 1e-3)?,
        seed: r.get("seed", a.seed, 7)?,
        cond_dropout: r.get("dropout", a.dropout, 0.1)?,
        ..TrainConfig::default()
    };
    let data_seed = r.get("data-seed", a.data_seed, TRAIN_DATA_SEED)?;
    let data_size = r.get("data-size", a.data_size, TRAIN_SET_SIZE)?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("train")?;
    tc.validate()?;

    let (data, arch) = match dataset.as_str() {
        "shapes" => (
            training_pairs(&gen_shapes_dataset(data_size, data_seed)?),
            reference_arch(),
        ),
        "gaussians" => (
            gen_two_gaussians(data_size, data_seed)?,
            MlpConfig::standard(Shape::new(2, 1, 1), 2),
        ),
        other => {
            return Err(CliError::Usage(format!(
                "unknown dataset '{other}' (shapes or gaussians)"
            )))
        }
    };
    ensure_dir(&out)?;
    let every = (tc.steps / 10).max(1);
    let trained = fit(&data, arch, &tc, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>6}  loss {loss:.5}");
        }
    })?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&ckpt, &trained.field, Some(&tc), tc.seed)?;
    let rows: Vec<Vec<String>> = trained
        .losses
        .iter()
        .enumerate()
        .map(|(k, &l)| vec![k.to_string(), num(l)])
        .collect();
    write_csv(&out.join("loss.csv"), &cfg, &["step", "loss"], &rows)?;
    if trained.losses.is_empty() {
        println!("0 steps; wrote the initialized field to {}", ckpt.display());
    } else {
        println!(
            "{} steps, mean loss over the last 10%: {:.5}; checkpoint {}",
            tc.steps,
            tail_mean(&trained.losses, 0.1),
            ckpt.display()
        );
    }
    Ok(())
}

pub fn sample(a: SampleArgs, mut r: Resolver) -> Result<(), CliError> {
    let model = r.path("model", a.model, DEFAULT_MODEL)?;
    let cond = r.get("condition", a.condition, "null".to_string())?;
    let steps = r.get("steps", a.steps, 50)?;
    let rule = r.get("rule", a.rule, "euler".to_string())?;
    let count = r.get("count", a.count, 4)?;
    let seed = r.get("seed", a.seed, 0)?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("sample")?;

    let field = load_model(&model)?;
    let shape = field.config().shape;
    let c = parse_condition(&cond, field.config().vocab)?;
    let kind = velocity_rule(&rule)?;
    let rule = StepRule::new(kind, &field, uniform_grid(steps, 1.0)?, None)?;
    ensure_dir(&out)?;
    let rng = SeededRng::new(seed);
    let (mut inside, mut total, mut nfe) = (0usize, 0usize, 0u64);
    for k in 0..count {
        let noise = rng.child(k as u64).normal_latent(shape);
        let tr = run_sampler(&rule, &noise, c)?;
        nfe += tr.nfe;
        let z = tr.into_end();
        inside += z
            .as_slice()
            .iter()
            .filter(|x| (-0.1..=1.1).contains(*x))
            .count();
        total += z.len();
        write_latent(&out.join(format!("sample_{k:02}.lat")), &cfg, &z)?;
        if shape.channels == 3 {
            write_ppm(&out.join(format!("sample_{k:02}.ppm")), &cfg, &z)?;
        }
    }
    let frac = inside as f64 / total.max(1) as f64;
    write_json(
        &out.join("samples.json"),
        &cfg,
        json!({ "count": count, "nfe": nfe, "fraction_in_range": frac }),
    )?;
    println!(
        "{count} samples, {nfe} evaluations, {:.2}% of values in [-0.1, 1.1]",
        100.0 * frac
    );
    Ok(())
}

pub fn invert(a: InvertArgs, mut r: Resolver) -> Result<(), CliError> {
    let model = r.path("model", a.model, DEFAULT_MODEL)?;
    let input = r.get_opt("input", a.input.map(|p| p.display().to_string()))?;
    let (z0, default_cond) = match &input {
        Some(p) => (read_image_or_latent(p.as_ref())?, "null".to_string()),
        None => {
            let data_seed = r.get("data-seed", a.data_seed, HELDOUT_SEED)?;
            let index = r.get("index", a.index, 0)?;
            let s = gen_shapes_dataset(index + 1, data_seed)?.pop().unwrap();
            (s.image, s.class.name())
        }
    };
    let cond = r.get("condition", a.condition, default_cond)?;
    let steps = r.get("steps", a.steps, 50)?;
    let method = r.get("method", a.method, "uni_inv".to_string())?;
    let rule = r.get("rule", a.rule, "euler".to_string())?;
    let out = r.path("out", a.out, DEFAULT_OUT)?;
    let cfg = r.finish("invert")?;

    let field = load_model(&model)?;
    if z0.shape() != field.config().shape {
        return Err(CliError::Usage(format!(
            "input shape {:?} does not match the model's {:?}",
            z0.shape(),
            field.config().shape
        )));
    }
    let c = parse_condition(&cond, field.config().vocab)?;
    let inverter = match method.as_str() {
        "uni_inv" => Inverter::UniInv,
        "at_prev" => Inverter::Vanilla(VanillaMode::AtPrev),
        "at_target" => Inverter::Vanilla(VanillaMode::AtTarget),
        other => {
            return Err(CliError::Usage(format!(
                "unknown inversion method '{other}'"
            )))
        }
    };
    let kind = velocity_rule(&rule)?;
    let rule = StepRule::new(kind, &field, uniform_grid(steps, 1.0)?, None)?;
    ensure_dir(&out)?;
    field.reset_nfe();
    let rec = reconstruct_with(&rule, &z0, c, inverter)?;
    write_latent(&out.join("noise.lat"), &cfg, &rec.noise)?;
    let err = mse(&z0, &rec.z0_hat)?;
    write_json(
        &out.join("invert.json"),
        &cfg,
        json!({
            "nfe_invert": rec.metrics.nfe_invert,
            "nfe_sample": rec.metrics.nfe_sample,
            "noise_rms": (rec.noise.sum_sq() / rec.noise.len() as f64).sqrt(),
            "roundtrip_mse": err,
        }),
    )?;
    let label = if c == Condition::NULL {
        "null".to_string()
    } else {
        cond
    };
    println!(
        "{method} inversion ({label}): {} evaluations, round-trip MSE {err:.3e}",
        rec.metrics.nfe_invert
    );
    Ok(())
}
