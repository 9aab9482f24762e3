//! Conditional MLP velocity field with hand-written backpropagation and Adam.
//!
//! Input row: `[flattened latent | time embedding | condition embedding]`,
//! then `depth` SiLU layers of width `hidden`, then a linear read-out of the
//! latent's size. A fixed skip `c(t)·z` is added to the read-out, with `c(t)`
//! the optimal linear coefficient for data of per-element variance
//! `skip_var`; the hidden width is far below the latent size, so the noise
//! part of the target could not pass through the layers otherwise.
//!
//! Parameters live in one flat vector in declaration order: condition table,
//! then `(weight, bias)` per layer, weights stored `[inputs][outputs]`
//! row-major.
//!
//! The network is generic over `f32`/`f64`. Training runs in `f32`; the
//! [`NeuralField`] used by samplers evaluates in `f64`.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Condition, NfeCounter, VelocityField};
use crate::tensor::{Latent, SeededRng, Shape};

/// Scalar type the network can run in.
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + MulAssign + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C ← alpha·A·B + beta·C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn of(x: f64) -> Self {
                x as $t
            }

            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the strides passed by this module address inside
                // the buffers whose minimum lengths are asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub shape: Shape,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Number of condition tokens; the table has one extra NULL row.
    pub vocab: usize,
    /// Data variance assumed by the skip term; `0` disables the skip.
    pub skip_var: f64,
}

impl MlpConfig {
    /// Three hidden layers of width 256 with 16-dimensional embeddings.
    pub fn standard(shape: Shape, vocab: usize) -> Self {
        Self {
            shape,
            hidden: 256,
            depth: 3,
            time_dim: 16,
            cond_dim: 16,
            vocab,
            skip_var: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.hidden == 0 || self.depth == 0 {
            return Err(invalid("network dimensions must be positive"));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid("time embedding width must be even and positive"));
        }
        if !(self.skip_var >= 0.0 && self.skip_var.is_finite()) {
            return Err(invalid("skip variance must be finite and non-negative"));
        }
        Ok(())
    }

    /// `c(t) = (t - (1 - t)s) / (t² + (1 - t)²s)` for `s = skip_var`.
    pub fn skip_coeff(&self, t: f64) -> f64 {
        let s = self.skip_var;
        if s == 0.0 {
            return 0.0;
        }
        (t - (1.0 - t) * s) / (t * t + (1.0 - t) * (1.0 - t) * s)
    }

    pub fn data_dim(&self) -> usize {
        self.shape.len()
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim() + self.time_dim + self.cond_dim
    }

    /// `(inputs, outputs)` of every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_dim(), self.hidden)];
        dims.extend((1..self.depth).map(|_| (self.hidden, self.hidden)));
        dims.push((self.hidden, self.data_dim()));
        dims
    }

    pub fn table_len(&self) -> usize {
        (self.vocab + 1) * self.cond_dim
    }

    pub fn n_params(&self) -> usize {
        self.table_len()
            + self
                .layer_dims()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum::<usize>()
    }

    fn null_row(&self) -> usize {
        self.vocab
    }

    fn token_row(&self, c: Condition) -> usize {
        match c.0 {
            Some(k) => {
                assert!(
                    (k as usize) < self.vocab,
                    "condition token {k} outside vocabulary {}",
                    self.vocab
                );
                k as usize
            }
            None => self.null_row(),
        }
    }
}

/// Sinusoidal features `[sin(ω_k t), cos(ω_k t)]` with `ω_k = π·2^{k/2}`.
pub fn time_embedding<T: Real>(t: f64, dim: usize, out: &mut [T]) {
    for k in 0..dim / 2 {
        let w = PI * 2f64.powf(k as f64 / 2.0);
        out[2 * k] = T::of((w * t).sin());
        out[2 * k + 1] = T::of((w * t).cos());
    }
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Parameter offsets of one linear layer.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    config: MlpConfig,
    params: Vec<T>,
}

/// Activations kept for the backward pass.
struct Tape<T> {
    /// `acts[0]` is the input; `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<T>>,
}

impl<T: Real> Mlp<T> {
    /// Uniform `±1/√inputs` weights, zero biases, unit-normal embeddings.
    /// Every initial value is representable in `f32`.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = Vec::with_capacity(config.n_params());
        for _ in 0..config.table_len() {
            params.push(T::of(rng.normal() as f32 as f64));
        }
        for (inputs, outputs) in config.layer_dims() {
            let bound = 1.0 / (inputs as f64).sqrt();
            for _ in 0..inputs * outputs {
                params.push(T::of(rng.uniform_range(-bound, bound) as f32 as f64));
            }
            params.extend(std::iter::repeat_n(T::zero(), outputs));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: MlpConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", config.n_params()),
                actual: format!("{} parameters", params.len()),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            config: self.config.clone(),
            params: self.params.iter().map(|p| U::of(p.f64())).collect(),
        }
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut off = self.config.table_len();
        self.config
            .layer_dims()
            .into_iter()
            .map(|(inputs, outputs)| {
                let slot = LayerSlot {
                    inputs,
                    outputs,
                    weight: off,
                    bias: off + inputs * outputs,
                };
                off += inputs * outputs + outputs;
                slot
            })
            .collect()
    }

    /// Fills one input row for `(z, t, c)`.
    pub fn write_input(&self, z: &[f64], t: f64, c: Condition, row: &mut [T]) {
        let cfg = &self.config;
        let d = cfg.data_dim();
        for (dst, &x) in row[..d].iter_mut().zip(z) {
            *dst = T::of(x);
        }
        time_embedding(t, cfg.time_dim, &mut row[d..d + cfg.time_dim]);
        let r = cfg.token_row(c) * cfg.cond_dim;
        row[d + cfg.time_dim..].copy_from_slice(&self.params[r..r + cfg.cond_dim]);
    }

    fn forward_tape(&self, input: Vec<T>, batch: usize) -> (Vec<T>, Tape<T>) {
        let slots = self.slots();
        let mut acts = vec![input];
        let mut pre = Vec::with_capacity(slots.len() - 1);
        let mut out = Vec::new();
        for (l, s) in slots.iter().enumerate() {
            let mut y = Vec::with_capacity(batch * s.outputs);
            let bias = &self.params[s.bias..s.bias + s.outputs];
            for _ in 0..batch {
                y.extend_from_slice(bias);
            }
            if batch == 1 {
                // a single row is memory bound; skip gemm's packing
                let w = &self.params[s.weight..s.bias];
                for (&x, row) in acts[l].iter().zip(w.chunks_exact(s.outputs)) {
                    for (yo, &wo) in y.iter_mut().zip(row) {
                        *yo += x * wo;
                    }
                }
            } else {
                T::gemm(
                    batch,
                    s.inputs,
                    s.outputs,
                    T::one(),
                    &acts[l],
                    s.inputs as isize,
                    1,
                    &self.params[s.weight..s.bias],
                    s.outputs as isize,
                    1,
                    T::one(),
                    &mut y,
                    s.outputs as isize,
                    1,
                );
            }
            if l + 1 == slots.len() {
                out = y;
            } else {
                acts.push(y.iter().map(|&x| silu(x)).collect());
                pre.push(y);
            }
        }
        (out, Tape { acts, pre })
    }

    /// Output rows for prepared input rows.
    pub fn forward(&self, input: Vec<T>, batch: usize) -> Vec<T> {
        self.forward_tape(input, batch).0
    }

    /// Accumulates parameter gradients for output gradient `dout` into `grad`.
    fn backward(&self, tape: &Tape<T>, mut dout: Vec<T>, rows: &[usize], grad: &mut [T]) {
        let batch = rows.len();
        let slots = self.slots();
        for (l, s) in slots.iter().enumerate().rev() {
            let x = &tape.acts[l];
            // dW += xᵀ · dy
            T::gemm(
                s.inputs,
                batch,
                s.outputs,
                T::one(),
                x,
                1,
                s.inputs as isize,
                &dout,
                s.outputs as isize,
                1,
                T::one(),
                &mut grad[s.weight..s.bias],
                s.outputs as isize,
                1,
            );
            let db = &mut grad[s.bias..s.bias + s.outputs];
            for row in dout.chunks_exact(s.outputs) {
                for (g, &d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dx = dy · Wᵀ
            let mut dx = vec![T::zero(); batch * s.inputs];
            T::gemm(
                batch,
                s.outputs,
                s.inputs,
                T::one(),
                &dout,
                s.outputs as isize,
                1,
                &self.params[s.weight..s.bias],
                1,
                s.outputs as isize,
                T::zero(),
                &mut dx,
                s.inputs as isize,
                1,
            );
            if l > 0 {
                for (g, &p) in dx.iter_mut().zip(&tape.pre[l - 1]) {
                    *g *= silu_grad(p);
                }
                dout = dx;
            } else {
                let cfg = &self.config;
                let off = cfg.data_dim() + cfg.time_dim;
                for (b, &r) in rows.iter().enumerate() {
                    let src = &dx[b * s.inputs + off..(b + 1) * s.inputs];
                    for (g, &d) in grad[r * cfg.cond_dim..(r + 1) * cfg.cond_dim]
                        .iter_mut()
                        .zip(src)
                    {
                        *g += d;
                    }
                }
            }
        }
    }
}

/// One flow-matching minibatch with its noise and times already drawn.
#[derive(Debug, Clone)]
pub struct FmBatch {
    pub z0: Vec<Latent>,
    pub z1: Vec<Latent>,
    pub t: Vec<f64>,
    pub cond: Vec<Condition>,
}

impl FmBatch {
    /// Draws `Z1 ~ N(0, I)` and `t ~ U[0, 1]` per item.
    pub fn draw(items: &[(Latent, Condition)], rng: &mut SeededRng) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("flow-matching batch must be nonempty"));
        }
        let mut b = FmBatch {
            z0: vec![],
            z1: vec![],
            t: vec![],
            cond: vec![],
        };
        for (z0, c) in items {
            b.z1.push(rng.normal_latent(z0.shape()));
            b.t.push(rng.uniform());
            b.z0.push(z0.clone());
            b.cond.push(*c);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }

    pub fn interpolant(&self, k: usize) -> Latent {
        let t = self.t[k];
        self.z0[k].lin_comb(1.0 - t, t, &self.z1[k])
    }

    pub fn target(&self, k: usize) -> Latent {
        self.z1[k].sub(&self.z0[k])
    }
}

/// Per-element mean squared error between `v(Z_t, t | c)` and `Z1 - Z0`.
pub fn fm_loss_of(field: &dyn VelocityField, batch: &FmBatch) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..batch.len() {
        let v = field.eval(&batch.interpolant(k), batch.t[k], batch.cond[k]);
        sum += v.sub(&batch.target(k)).sum_sq();
        count += v.len();
    }
    sum / count as f64
}

/// Loss and parameter gradient of the flow-matching objective on a drawn batch.
pub fn fm_loss_grad<T: Real>(mlp: &Mlp<T>, batch: &FmBatch) -> (f64, Vec<T>) {
    let cfg = mlp.config();
    let (d, width, n) = (cfg.data_dim(), cfg.input_dim(), batch.len());
    let mut input = vec![T::zero(); n * width];
    for (k, row) in input.chunks_exact_mut(width).enumerate() {
        mlp.write_input(
            batch.interpolant(k).as_slice(),
            batch.t[k],
            batch.cond[k],
            row,
        );
    }
    let rows: Vec<usize> = batch.cond.iter().map(|&c| cfg.token_row(c)).collect();
    let (out, tape) = mlp.forward_tape(input, n);
    let scale = 1.0 / (n * d) as f64;
    let mut loss = 0.0;
    let mut dout = vec![T::zero(); n * d];
    for k in 0..n {
        let target = batch.target(k);
        let skip = cfg.skip_coeff(batch.t[k]);
        let zt = batch.interpolant(k);
        for j in 0..d {
            let r = out[k * d + j].f64() + skip * zt.as_slice()[j] - target.as_slice()[j];
            loss += r * r;
            dout[k * d + j] = T::of(2.0 * r * scale);
        }
    }
    let mut grad = vec![T::zero(); mlp.params().len()];
    mlp.backward(&tape, dout, &rows, &mut grad);
    (loss * scale, grad)
}

/// Draws noise and times, then returns the loss and gradient.
pub fn fm_loss<T: Real>(
    mlp: &Mlp<T>,
    items: &[(Latent, Condition)],
    rng: &mut SeededRng,
) -> Result<(f64, Vec<T>)> {
    Ok(fm_loss_grad(mlp, &FmBatch::draw(items, rng)?))
}

/// Largest relative difference between the analytic gradient and central
/// differences of step `h`, over every parameter.
pub fn gradient_check(mlp: &Mlp<f64>, batch: &FmBatch, h: f64) -> f64 {
    let (_, grad) = fm_loss_grad(mlp, batch);
    let mut probe = mlp.clone();
    let mut worst: f64 = 0.0;
    for (k, &g) in grad.iter().enumerate() {
        let p = probe.params()[k];
        probe.params_mut()[k] = p + h;
        let plus = fm_loss_grad(&probe, batch).0;
        probe.params_mut()[k] = p - h;
        let minus = fm_loss_grad(&probe, batch).0;
        probe.params_mut()[k] = p;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Probability of replacing an item's condition with NULL.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            cond_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.beta1, self.beta2, self.eps];
        if positive.iter().any(|&x| !(x > 0.0)) || self.batch_size == 0 {
            return Err(invalid(
                "learning rate, batch size, Adam moments and epsilon must be positive",
            ));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(invalid("Adam moments must be below 1"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(invalid("condition dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let lr = T::of(cfg.learning_rate / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(cfg.eps);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p = *p - lr * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

/// Result of [`train`]: the fitted field and its per-step loss curve.
#[derive(Debug)]
pub struct Trained {
    pub field: NeuralField,
    pub losses: Vec<f64>,
}

/// Fits an MLP to `data` with Adam on the flow-matching loss. Minibatches are
/// drawn with replacement; each item's condition is dropped to NULL with the
/// configured probability.
pub fn train(
    data: &[(Latent, Condition)],
    arch: MlpConfig,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if let Some((z, _)) = data.iter().find(|(z, _)| z.shape() != arch.shape) {
        return Err(Error::ShapeMismatch {
            expected: arch.shape.to_string(),
            actual: z.shape().to_string(),
        });
    }
    let init_seed = config.seed;
    let mut mlp = Mlp::<f32>::init(arch, init_seed)?;
    let mut rng = SeededRng::new(config.seed).child(0x5eed);
    let mut adam = Adam::new(mlp.params().len());
    let mut losses = Vec::with_capacity(config.steps);
    let mut items = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        items.clear();
        for _ in 0..config.batch_size {
            let (z, c) = &data[rng.below(data.len())];
            let c = if rng.uniform() < config.cond_dropout {
                Condition::NULL
            } else {
                *c
            };
            items.push((z.clone(), c));
        }
        let (loss, grad) = fm_loss(&mlp, &items, &mut rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        adam.update(mlp.params_mut(), &grad, config);
        losses.push(loss);
        progress(step, loss);
    }
    Ok(Trained {
        field: NeuralField::new(mlp.cast()),
        losses,
    })
}

/// Mean of the last `fraction` of a loss curve.
pub fn tail_mean(losses: &[f64], fraction: f64) -> f64 {
    let k = ((losses.len() as f64 * fraction).ceil() as usize).clamp(1, losses.len().max(1));
    crate::stats::mean(&losses[losses.len() - k..])
}

/// A trained MLP behind the [`VelocityField`] interface, evaluated in `f64`.
#[derive(Debug)]
pub struct NeuralField {
    mlp: Mlp<f64>,
    nfe: NfeCounter,
}

impl Clone for NeuralField {
    fn clone(&self) -> Self {
        Self {
            mlp: self.mlp.clone(),
            nfe: NfeCounter::default(),
        }
    }
}

impl NeuralField {
    pub fn new(mlp: Mlp<f64>) -> Self {
        Self {
            mlp,
            nfe: NfeCounter::default(),
        }
    }

    pub fn mlp(&self) -> &Mlp<f64> {
        &self.mlp
    }

    pub fn config(&self) -> &MlpConfig {
        self.mlp.config()
    }

    pub fn parameters(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.mlp.params().len() {
            return Err(invalid("parameter count mismatch"));
        }
        self.mlp.params_mut().copy_from_slice(params);
        Ok(())
    }
}

impl VelocityField for NeuralField {
    fn eval(&self, z: &Latent, t: f64, c: Condition) -> Latent {
        self.nfe.tick();
        let cfg = self.mlp.config();
        assert_eq!(
            z.shape(),
            cfg.shape,
            "latent shape does not match the network"
        );
        let mut row = vec![0.0; cfg.input_dim()];
        self.mlp.write_input(z.as_slice(), t, c, &mut row);
        let out = Latent::from_vec(z.shape(), self.mlp.forward(row, 1))
            .expect("output size matches shape");
        out.add_scaled(cfg.skip_coeff(t), z)
    }

    fn nfe(&self) -> u64 {
        self.nfe.get()
    }

    fn reset_nfe(&self) {
        self.nfe.reset()
    }
}
