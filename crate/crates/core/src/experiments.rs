//! Experiment drivers shared by the CLI, the acceptance suite and the
//! benchmarks: the reference shapes model, the reconstruction benchmark, the
//! shapes editing benchmark and the local-error studies.
//!
//! Per-case work runs in parallel on the pool from [`thread_pool`]; results
//! are always collected in case order, so outputs do not depend on the
//! worker count. Each parallel task evaluates its own clone of the field so
//! NFE counts stay per-task.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::edit::{
    baseline_delayed_injection, baseline_latent_fusion, uni_edit, EditConfig, MaskPolicy,
};
use crate::error::{invalid, Result};
use crate::field::{
    AnalyticEpsField, AnalyticGaussianField, Condition, DdimSchedule, VelocityField,
};
use crate::inversion::{local_error_study, reconstruct_with, LocalErrorStudy};
use crate::metrics::{region_report, RegionReport};
use crate::nn::{train, MlpConfig, NeuralField, TrainConfig};
use crate::sampler::{roundtrip_error, Inverter, VanillaMode};
use crate::shapes::{gen_shapes_dataset, image_shape, ShapeClass, ShapesSample, NUM_CLASSES};
use crate::stats::{correlation_sign_test, spearman, SignTest};
use crate::step::{StepKind, StepRule};
use crate::tensor::{uniform_grid, Latent, SeededRng, Shape};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FLOWINV_THREADS";

/// A pool sized by `FLOWINV_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// Seed of the training set of the reference model.
pub const TRAIN_DATA_SEED: u64 = 7;
/// Seed of the held-out images used by the benchmarks.
pub const HELDOUT_SEED: u64 = 1001;
pub const TRAIN_SET_SIZE: usize = 4000;

pub fn reference_train_config() -> TrainConfig {
    TrainConfig {
        steps: 10_000,
        batch_size: 64,
        learning_rate: 1e-3,
        seed: 7,
        cond_dropout: 0.1,
        ..TrainConfig::default()
    }
}

pub fn reference_arch() -> MlpConfig {
    MlpConfig::standard(image_shape(), NUM_CLASSES)
}

/// `(image, condition)` pairs of a shapes dataset.
pub fn training_pairs(samples: &[ShapesSample]) -> Vec<(Latent, Condition)> {
    samples
        .iter()
        .map(|s| (s.image.clone(), s.condition()))
        .collect()
}

/// Trains a shapes model, or loads it from `cache` when a checkpoint with the
/// same architecture and training config is already there.
pub fn shapes_model(
    cache: Option<&Path>,
    config: &TrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<NeuralField> {
    let arch = reference_arch();
    if let Some(path) = cache {
        if let Ok((header, field)) = checkpoint::load(path) {
            if header.arch == arch && header.train.as_ref() == Some(config) {
                return Ok(field);
            }
        }
    }
    let data = training_pairs(&gen_shapes_dataset(TRAIN_SET_SIZE, TRAIN_DATA_SEED)?);
    let field = train(&data, arch, config, progress)?.field;
    if let Some(path) = cache {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        checkpoint::save(path, &field, Some(config), config.seed)?;
    }
    Ok(field)
}

/// Cache file name for a training config.
pub fn model_cache_name(config: &TrainConfig) -> PathBuf {
    PathBuf::from(format!(
        "shapes_s{}_n{}_b{}_v{}.ckpt",
        config.seed,
        config.steps,
        config.batch_size,
        checkpoint::FORMAT_VERSION
    ))
}

/// Inversion method of the reconstruction benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReconMethod {
    pub kind: StepKind,
    pub inverter: Inverter,
}

impl ReconMethod {
    pub const fn new(kind: StepKind, inverter: Inverter) -> Self {
        Self { kind, inverter }
    }

    pub fn name(&self) -> String {
        match (self.kind, self.inverter) {
            (StepKind::Euler, Inverter::UniInv) => "uni_inv".into(),
            (StepKind::Euler, inv) => inv.name().into(),
            (kind, Inverter::UniInv) => format!("uni_inv_{}", kind.name()),
            (kind, inv) => format!("{}_{}", kind.name(), inv.name()),
        }
    }

    /// Steps given to the method for a budget of `n` evaluations per pass:
    /// two-evaluation directions get `n / 2`.
    pub fn steps_for_budget(&self, n: usize) -> usize {
        (n / self.kind.evals_per_direction() as usize).max(1)
    }

    /// NFE of one inversion over `steps` intervals.
    pub fn inversion_nfe(&self, steps: usize) -> u64 {
        let per = self.kind.evals_per_direction();
        match self.inverter {
            Inverter::UniInv => per * (steps as u64 + 1),
            Inverter::Vanilla(_) => per * steps as u64,
        }
    }
}

/// Methods compared on a learned velocity field.
pub const FIELD_METHODS: [ReconMethod; 5] = [
    ReconMethod::new(StepKind::Euler, Inverter::Vanilla(VanillaMode::AtPrev)),
    ReconMethod::new(StepKind::Euler, Inverter::Vanilla(VanillaMode::AtTarget)),
    ReconMethod::new(StepKind::Heun, Inverter::Vanilla(VanillaMode::AtPrev)),
    ReconMethod::new(StepKind::Euler, Inverter::UniInv),
    ReconMethod::new(StepKind::Heun, Inverter::UniInv),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconRow {
    pub image: usize,
    pub method: String,
    pub conditional: bool,
    pub steps: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub nfe_invert: u64,
    pub nfe_sample: u64,
}

impl ReconRow {
    pub const CSV_HEADER: [&'static str; 9] = [
        "image",
        "method",
        "conditional",
        "steps",
        "mse",
        "psnr",
        "ssim",
        "nfe_invert",
        "nfe_sample",
    ];
}

/// Reconstructs every image with every method at a matched budget of `n`
/// evaluations per pass. Rows are ordered by image, then method.
pub fn recon_benchmark<F: VelocityField + Clone>(
    field: &F,
    images: &[(Latent, Condition)],
    n: usize,
    methods: &[ReconMethod],
    conditional: bool,
) -> Result<Vec<ReconRow>> {
    let per_image: Vec<Result<Vec<ReconRow>>> = images
        .par_iter()
        .enumerate()
        .map(|(k, (z0, c))| {
            let f = field.clone();
            let c = if conditional { *c } else { Condition::NULL };
            methods
                .iter()
                .map(|m| {
                    let steps = m.steps_for_budget(n);
                    let rule = StepRule::new(m.kind, &f, uniform_grid(steps, 1.0)?, None)?;
                    let r = reconstruct_with(&rule, z0, c, m.inverter)?;
                    Ok(ReconRow {
                        image: k,
                        method: m.name(),
                        conditional,
                        steps,
                        mse: r.metrics.mse,
                        psnr: r.metrics.psnr,
                        ssim: r.metrics.ssim,
                        nfe_invert: r.metrics.nfe_invert,
                        nfe_sample: r.metrics.nfe_sample,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_image {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Fraction of images on which `winner` has strictly lower MSE than `loser`.
pub fn win_rate(rows: &[ReconRow], winner: &str, loser: &str) -> f64 {
    let mse_of = |name: &str| -> Vec<(usize, f64)> {
        rows.iter()
            .filter(|r| r.method == name)
            .map(|r| (r.image, r.mse))
            .collect()
    };
    let w = mse_of(winner);
    let l = mse_of(loser);
    assert_eq!(w.len(), l.len(), "methods cover different images");
    if w.is_empty() {
        return 0.0;
    }
    let wins = w.iter().zip(&l).filter(|((i, a), (j, b))| {
        debug_assert_eq!(i, j);
        a < b
    });
    wins.count() as f64 / w.len() as f64
}

/// Mean MSE per method, in first-appearance order.
pub fn mean_mse_by_method(rows: &[ReconRow]) -> Vec<(String, f64, u64)> {
    let mut out: Vec<(String, f64, u64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|e| e.0 == r.method) {
            Some(e) => {
                e.1 += r.mse;
                e.3 += 1;
            }
            None => out.push((r.method.clone(), r.mse, r.nfe_invert + r.nfe_sample, 1)),
        }
    }
    out.into_iter()
        .map(|(m, s, nfe, n)| (m, s / n as f64, nfe))
        .collect()
}

/// Round-trip MSE of `inverter` on the centered analytic Gaussian field for
/// `seeds` random start latents of shape `shape`.
pub fn analytic_roundtrips(
    sigma0: f64,
    kind: StepKind,
    n: usize,
    inverter: Inverter,
    seeds: u64,
    shape: Shape,
) -> Result<Vec<f64>> {
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let z0 = SeededRng::new(s).normal_latent(shape).scale(sigma0);
            match kind {
                StepKind::Ddim => {
                    let f = AnalyticEpsField::new(sigma0, DdimSchedule::default())?;
                    let rule = StepRule::ddim(&f, uniform_grid(n, 1.0)?, DdimSchedule::default())?;
                    roundtrip_error(&rule, &z0, Condition::NULL, inverter)
                }
                _ => {
                    let f = AnalyticGaussianField::centered(sigma0)?;
                    let rule = StepRule::new(kind, &f, uniform_grid(n, 1.0)?, None)?;
                    roundtrip_error(&rule, &z0, Condition::NULL, inverter)
                }
            }
        })
        .collect()
}

/// Local-error study of the three Euler inverters on the analytic Gaussian
/// field, started from `analytic_flow_map(z0, t_eval)`.
pub fn convergence_studies(
    kind: StepKind,
    sigma0: f64,
    t_eval: f64,
    dts: &[f64],
    seed: u64,
) -> Result<Vec<LocalErrorStudy>> {
    let inverters = [
        Inverter::UniInv,
        Inverter::Vanilla(VanillaMode::AtPrev),
        Inverter::Vanilla(VanillaMode::AtTarget),
    ];
    let z0 = SeededRng::new(seed)
        .normal_latent(Shape::new(1, 4, 4))
        .scale(sigma0);
    inverters
        .iter()
        .map(|&inv| match kind {
            StepKind::Ddim => {
                let f = AnalyticEpsField::new(sigma0, DdimSchedule::default())?;
                let exact = ddim_exact_state(&z0, sigma0, t_eval);
                local_error_study(
                    kind,
                    &f,
                    &exact,
                    t_eval,
                    dts,
                    inv,
                    Condition::NULL,
                    Some(DdimSchedule::default()),
                )
            }
            _ => {
                let f = AnalyticGaussianField::centered(sigma0)?;
                let exact = f.flow_map(&z0, t_eval);
                local_error_study(kind, &f, &exact, t_eval, dts, inv, Condition::NULL, None)
            }
        })
        .collect()
}

/// A state on the exact probability-flow trajectory of the analytic DDIM
/// setting. The flow preserves `z / √(ᾱσ0² + 1 - ᾱ)`, so the data point `z0`
/// maps to `z0 · √(ᾱσ0² + 1 - ᾱ) / σ0`.
pub fn ddim_exact_state(z0: &Latent, sigma0: f64, t: f64) -> Latent {
    let ab = DdimSchedule::default().alpha_bar(t);
    z0.scale((ab * sigma0 * sigma0 + 1.0 - ab).sqrt() / sigma0)
}

/// One editing case: recolour the shape of `sample` to `target`.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub sample: ShapesSample,
    pub source: ShapeClass,
    pub target: ShapeClass,
}

/// `n` held-out images, each edited to the next colour in red → green → blue.
pub fn edit_cases(n: usize, seed: u64) -> Result<Vec<EditCase>> {
    Ok(gen_shapes_dataset(n, seed)?
        .into_iter()
        .map(|s| {
            let source = s.class;
            EditCase {
                target: source.with_color(source.color.next()),
                source,
                sample: s,
            }
        })
        .collect())
}

/// Editing method of the shapes benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditMethod {
    UniEdit,
    Delayed,
    Direct,
    Fusion,
}

impl EditMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EditMethod::UniEdit => "uni_edit",
            EditMethod::Delayed => "delayed",
            EditMethod::Direct => "direct",
            EditMethod::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uni_edit" | "uni-edit" | "none" => Ok(EditMethod::UniEdit),
            "delayed" => Ok(EditMethod::Delayed),
            "direct" => Ok(EditMethod::Direct),
            "fusion" => Ok(EditMethod::Fusion),
            _ => Err(invalid(format!("unknown edit method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditOutcome {
    pub case: usize,
    pub report: RegionReport,
    /// Step-averaged mask means inside and outside the shape (Uni-Edit only).
    pub mask_inside: Option<f64>,
    pub mask_outside: Option<f64>,
    pub nfe: u64,
}

/// Runs one method on one case.
pub fn run_edit(
    field: &dyn VelocityField,
    case: &EditCase,
    method: EditMethod,
    cfg: &EditConfig,
) -> Result<(Latent, EditOutcome)> {
    let z0 = &case.sample.image;
    let nfe0 = field.nfe();
    let (out, contrast) = match method {
        EditMethod::UniEdit => {
            let tr = uni_edit(field, z0, cfg)?;
            let contrast = tr.mask_contrast(&case.sample.region_mask);
            (tr.output, contrast)
        }
        EditMethod::Delayed => (baseline_delayed_injection(field, z0, cfg)?, None),
        EditMethod::Direct => (
            crate::edit::baseline_direct_edit(field, z0, cfg.n_steps, cfg.source, cfg.target)?,
            None,
        ),
        EditMethod::Fusion => (baseline_latent_fusion(field, z0, cfg)?.output, None),
    };
    let report = region_report(
        z0,
        &out,
        &case.sample.region_mask,
        case.source.color.channel(),
        case.target.color.channel(),
    )?;
    let outcome = EditOutcome {
        case: 0,
        report,
        mask_inside: contrast.map(|c| c.0),
        mask_outside: contrast.map(|c| c.1),
        nfe: field.nfe() - nfe0,
    };
    Ok((out, outcome))
}

/// Editing parameters shared by every case of a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSettings {
    pub n_steps: usize,
    pub alpha: f64,
    pub omega: f64,
    pub mask: MaskPolicy,
}

impl EditSettings {
    pub fn config(&self, case: &EditCase) -> EditConfig {
        EditConfig {
            omega: self.omega,
            alpha: self.alpha,
            n_steps: self.n_steps,
            source: case.source.condition(),
            target: case.target.condition(),
            mask: self.mask,
        }
    }
}

/// Runs `method` on every case; outcomes come back in case order.
pub fn edit_benchmark<F: VelocityField + Clone>(
    field: &F,
    cases: &[EditCase],
    method: EditMethod,
    settings: EditSettings,
) -> Result<Vec<EditOutcome>> {
    cases
        .par_iter()
        .enumerate()
        .map(|(k, case)| {
            let f = field.clone();
            let (_, mut o) = run_edit(&f, case, method, &settings.config(case))?;
            o.case = k;
            Ok(o)
        })
        .collect()
}

/// One `(α, ω)` cell of the ablation grid, averaged over cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub omega: f64,
    pub bg_psnr: f64,
    pub bg_ssim: f64,
    pub edit_score: f64,
    pub nfe: u64,
}

impl AblationRow {
    pub const CSV_HEADER: [&'static str; 6] =
        ["alpha", "omega", "bg_psnr", "bg_ssim", "edit_score", "nfe"];
}

pub const ABLATION_ALPHAS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const ABLATION_OMEGAS: [f64; 4] = [1.0, 3.0, 5.0, 8.0];

/// Outcomes for every `(α, ω)` pair, indexed `[alpha][omega][case]`.
pub fn ablation_sweep<F: VelocityField + Clone>(
    field: &F,
    cases: &[EditCase],
    n_steps: usize,
    alphas: &[f64],
    omegas: &[f64],
) -> Result<Vec<Vec<Vec<EditOutcome>>>> {
    alphas
        .iter()
        .map(|&alpha| {
            omegas
                .iter()
                .map(|&omega| {
                    let s = EditSettings {
                        n_steps,
                        alpha,
                        omega,
                        mask: MaskPolicy::default(),
                    };
                    edit_benchmark(field, cases, EditMethod::UniEdit, s)
                })
                .collect()
        })
        .collect()
}

pub fn ablation_rows(
    alphas: &[f64],
    omegas: &[f64],
    outcomes: &[Vec<Vec<EditOutcome>>],
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for (a, per_alpha) in alphas.iter().zip(outcomes) {
        for (w, cell) in omegas.iter().zip(per_alpha) {
            let n = cell.len() as f64;
            rows.push(AblationRow {
                alpha: *a,
                omega: *w,
                bg_psnr: cell.iter().map(|o| o.report.bg_psnr).sum::<f64>() / n,
                bg_ssim: cell.iter().map(|o| o.report.bg_ssim).sum::<f64>() / n,
                edit_score: cell.iter().map(|o| o.report.edit_score).sum::<f64>() / n,
                nfe: cell.first().map_or(0, |o| o.nfe),
            });
        }
    }
    rows
}

/// Per-case trend of background PSNR and edit score across `alphas`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffTest {
    pub psnr_rhos: Vec<f64>,
    pub score_rhos: Vec<f64>,
    /// Background PSNR is expected to fall with α.
    pub psnr_test: SignTest,
    /// Edit score is expected to rise with α.
    pub score_test: SignTest,
}

impl TradeoffTest {
    pub fn passes(&self, level: f64) -> bool {
        self.psnr_test.p_value < level && self.score_test.p_value < level
    }
}

/// Spearman correlation of each case's metrics with α, then one-sided sign
/// tests across cases. `per_alpha[a][case]`.
pub fn tradeoff_test(alphas: &[f64], per_alpha: &[Vec<EditOutcome>]) -> TradeoffTest {
    let n_cases = per_alpha.first().map_or(0, |v| v.len());
    let mut psnr_rhos = Vec::with_capacity(n_cases);
    let mut score_rhos = Vec::with_capacity(n_cases);
    for k in 0..n_cases {
        let psnr: Vec<f64> = per_alpha.iter().map(|v| v[k].report.bg_psnr).collect();
        let score: Vec<f64> = per_alpha.iter().map(|v| v[k].report.edit_score).collect();
        psnr_rhos.push(spearman(alphas, &psnr));
        score_rhos.push(spearman(alphas, &score));
    }
    TradeoffTest {
        psnr_test: correlation_sign_test(&psnr_rhos, false),
        score_test: correlation_sign_test(&score_rhos, true),
        psnr_rhos,
        score_rhos,
    }
}
