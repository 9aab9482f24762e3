use flowinv_core::field::{Condition, VelocityField};
use flowinv_core::nn::*;
use flowinv_core::shapes::gen_two_gaussians;
use flowinv_core::{Latent, SeededRng, Shape};

fn tiny(depth: usize) -> MlpConfig {
    MlpConfig {
        shape: Shape::new(2, 1, 1),
        hidden: 16,
        depth,
        time_dim: 4,
        cond_dim: 3,
        vocab: 2,
        skip_var: 0.5,
    }
}

fn batch(seed: u64) -> FmBatch {
    let mut rng = SeededRng::new(seed);
    let items: Vec<(Latent, Condition)> = [
        Condition::token(0),
        Condition::token(1),
        Condition::NULL,
        Condition::token(1),
    ]
    .into_iter()
    .map(|c| (rng.normal_latent(Shape::new(2, 1, 1)), c))
    .collect();
    FmBatch::draw(&items, &mut rng).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    for depth in [1, 3] {
        let mlp = Mlp::<f64>::init(tiny(depth), 21).unwrap();
        let worst = gradient_check(&mlp, &batch(4), 1e-5);
        assert!(worst < 1e-4, "depth {depth}: max relative error {worst}");
    }
}

#[test]
fn unused_condition_rows_get_zero_gradient() {
    let mlp = Mlp::<f64>::init(tiny(2), 3).unwrap();
    let mut rng = SeededRng::new(1);
    let items = vec![(rng.normal_latent(Shape::new(2, 1, 1)), Condition::token(0))];
    let (_, g) = fm_loss(&mlp, &items, &mut rng).unwrap();
    // rows: token 0 at [0, 3), token 1 at [3, 6), NULL at [6, 9)
    assert!(g[0..3].iter().any(|&x| x != 0.0));
    assert!(g[3..9].iter().all(|&x| x == 0.0));
}

struct Oracle {
    z0: Latent,
}

impl VelocityField for Oracle {
    fn eval(&self, z: &Latent, t: f64, _: Condition) -> Latent {
        z.sub(&self.z0).scale(1.0 / t)
    }
    fn nfe(&self) -> u64 {
        0
    }
    fn reset_nfe(&self) {}
}

#[test]
fn loss_zero_for_exact_target_field() {
    let z0 = Latent::from_channels(&[0.4, -1.2, 2.0]);
    let mut rng = SeededRng::new(8);
    for _ in 0..20 {
        let b = FmBatch::draw(&[(z0.clone(), Condition::NULL)], &mut rng).unwrap();
        assert!(fm_loss_of(&Oracle { z0: z0.clone() }, &b) < 1e-20);
    }
}

#[test]
fn loss_zero_for_degenerate_data() {
    struct Zero;
    impl VelocityField for Zero {
        fn eval(&self, z: &Latent, _: f64, _: Condition) -> Latent {
            Latent::zeros(z.shape())
        }
        fn nfe(&self) -> u64 {
            0
        }
        fn reset_nfe(&self) {}
    }
    let z = Latent::zeros(Shape::new(2, 1, 1));
    let b = FmBatch {
        z0: vec![z.clone()],
        z1: vec![z.clone()],
        t: vec![0.3],
        cond: vec![Condition::NULL],
    };
    assert_eq!(fm_loss_of(&Zero, &b), 0.0);
}

fn two_gaussian_run(steps: usize) -> Trained {
    let data = gen_two_gaussians(512, 3).unwrap();
    let arch = MlpConfig {
        shape: Shape::new(2, 1, 1),
        hidden: 64,
        depth: 3,
        time_dim: 16,
        cond_dim: 16,
        vocab: 2,
        skip_var: 0.5,
    };
    let cfg = TrainConfig {
        steps,
        batch_size: 64,
        seed: 5,
        ..TrainConfig::default()
    };
    train(&data, arch, &cfg, |_, _| {}).unwrap()
}

#[test]
fn two_gaussians_loss_halves() {
    let run = two_gaussian_run(2000);
    let initial = run.losses[..20].iter().sum::<f64>() / 20.0;
    let tail = tail_mean(&run.losses, 0.1);
    assert!(tail < 0.5 * initial, "initial {initial}, tail {tail}");
    // frozen regression value from the fixed-seed run
    assert!(
        (tail - TWO_GAUSSIAN_TAIL).abs() < 1e-3 * TWO_GAUSSIAN_TAIL,
        "tail {tail}"
    );
    let v = run
        .field
        .eval(&Latent::from_channels(&[0.0, 0.0]), 0.5, Condition::NULL);
    assert!(v.is_finite());
}

const TWO_GAUSSIAN_TAIL: f64 = 0.5730412939548102;

#[test]
fn training_is_bit_reproducible() {
    let a = two_gaussian_run(50);
    let b = two_gaussian_run(50);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.field.parameters(), b.field.parameters());
}

#[test]
fn zero_steps_returns_initialization() {
    let data = gen_two_gaussians(8, 1).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        seed: 12,
        ..TrainConfig::default()
    };
    let run = train(&data, tiny(2), &cfg, |_, _| {}).unwrap();
    let init = Mlp::<f64>::init(tiny(2), 12).unwrap();
    assert_eq!(run.field.parameters(), init.params());
    assert!(run.losses.is_empty());
}

#[test]
fn divergence_reports_step() {
    let data = gen_two_gaussians(8, 1).unwrap();
    let cfg = TrainConfig {
        steps: 50,
        learning_rate: 1e30,
        ..TrainConfig::default()
    };
    match train(&data, tiny(2), &cfg, |_, _| {}) {
        Err(flowinv_core::Error::Divergence { step, .. }) => assert!(step > 0 && step < 50),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|t| t.losses.len())
        ),
    }
}
