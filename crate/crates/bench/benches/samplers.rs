use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use flowinv_bench::{analytic, reference_net, shapes_image};
use flowinv_core::edit::{uni_edit, EditConfig};
use flowinv_core::inversion::uni_inv;
use flowinv_core::nn::{fm_loss, Mlp};
use flowinv_core::sampler::{sample, Inverter, VanillaMode};
use flowinv_core::shapes::{gen_shapes_dataset, ShapeClass};
use flowinv_core::tensor::uniform_grid;
use flowinv_core::{Condition, SeededRng, StepRule, VelocityField};

fn analytic_inversion(c: &mut Criterion) {
    let z0 = shapes_image();
    let field = analytic(z0.shape(), 0.5);
    let mut g = c.benchmark_group("analytic_inversion");
    for n in [16usize, 64] {
        let rule = StepRule::euler(&field, uniform_grid(n, 1.0).unwrap());
        g.bench_with_input(BenchmarkId::new("uni_inv", n), &n, |b, _| {
            b.iter(|| uni_inv(&rule, black_box(&z0), Condition::NULL).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("at_prev", n), &n, |b, _| {
            b.iter(|| {
                Inverter::Vanilla(VanillaMode::AtPrev)
                    .invert(&rule, black_box(&z0), Condition::NULL)
                    .unwrap()
            })
        });
        let heun = StepRule::heun(&field, uniform_grid(n / 2, 1.0).unwrap());
        g.bench_with_input(BenchmarkId::new("heun_sample", n / 2), &n, |b, _| {
            b.iter(|| sample(&heun, black_box(&z0), Condition::NULL).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let net = reference_net();
    let z = shapes_image();
    let cond = Condition::token(2);
    c.bench_function("mlp_eval", |b| {
        b.iter(|| net.eval(black_box(&z), 0.4, cond))
    });

    let mlp: Mlp<f32> = net.mlp().cast();
    let items: Vec<_> = gen_shapes_dataset(64, 9)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.class.condition()))
        .collect();
    let mut rng = SeededRng::new(1);
    c.bench_function("train_step_grad_b64", |b| {
        b.iter(|| fm_loss(&mlp, black_box(&items), &mut rng).unwrap())
    });
}

fn editing(c: &mut Criterion) {
    let net = reference_net();
    let z0 = shapes_image();
    let src = ShapeClass::parse("red_circle").unwrap().condition();
    let tgt = ShapeClass::parse("green_circle").unwrap().condition();
    let cfg = EditConfig::new(15, src, tgt);
    c.bench_function("uni_edit_n15_alpha06", |b| {
        b.iter(|| uni_edit(&net, black_box(&z0), &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = analytic_inversion, network, editing
}
criterion_main!(benches);
