//! Noise schedule and denoising score-matching training.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::neural::{self, Architecture, Params, ScoreNet, Tape};
use crate::scm::Dataset;

/// Linear β schedule with cumulative products `ᾱ_t = ∏_{j≤t} (1 − β_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::linear(r.steps, r.beta_min, r.beta_max)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr {
            steps: s.steps,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
        }
    }
}

impl Default for NoiseSchedule {
    /// `T = 100`, `β ∈ [1e-4, 0.02]`.
    fn default() -> Self {
        NoiseSchedule::linear(100, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return invalid(format!("betas must satisfy 0 < {beta_min} <= {beta_max} < 1"));
        }
        let beta: Vec<f64> = (0..=steps)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / steps as f64)
            .collect();
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            steps,
            beta_min,
            beta_max,
            beta,
            alpha_bar,
        })
    }

    /// `T`; valid times are `0..=T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`, row `i` at time `t[i]`.
pub fn noisify(x0: &Array2<f64>, t: &[usize], eps: &Array2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() || t.len() != x0.nrows() {
        return invalid("noisify: shapes of x0, t and eps disagree");
    }
    if let Some(bad) = t.iter().find(|&&ti| ti > sched.steps) {
        return invalid(format!("time {bad} beyond T = {}", sched.steps));
    }
    let mut out = x0.clone();
    for ((mut row, e), &ti) in out.axis_iter_mut(Axis(0)).zip(eps.axis_iter(Axis(0))).zip(t) {
        let ab = sched.alpha_bar[ti];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        row.zip_mut_with(&e, |x, &e| *x = a * *x + b * e);
    }
    Ok(out)
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Constant columns get scale 1 so they map to zero rather than NaN.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.scale[j]);
        }
        out
    }

    pub fn invert(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.scale[j] + self.mean[j]);
        }
        out
    }

    /// Keeps only the listed columns, in order.
    pub fn select(&self, cols: &[usize]) -> Self {
        Standardizer {
            mean: cols.iter().map(|&c| self.mean[c]).collect(),
            scale: cols.iter().map(|&c| self.scale[c]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            early_stop_patience: 30,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return invalid("epochs_max, batch_size and early_stop_patience must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return invalid(format!("val_fraction {} outside (0, 0.5]", self.val_fraction));
        }
        Ok(())
    }
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// Adam on `f64` master weights.
struct Adam {
    lr: f64,
    m: Params<f64>,
    v: Params<f64>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(arch: &Architecture, lr: f64) -> Self {
        let zero = Params::<f64>::zeros(arch);
        Adam {
            lr,
            m: zero.clone(),
            v: zero,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Params<f64>, grads: &Params<f32>) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let step_size = self.lr / c1;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] as f64;
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Mean over rows of `‖out − target‖²` and its gradient w.r.t. `out`.
fn denoising_loss(out: &Array2<f32>, target: &Array2<f32>) -> (f64, Array2<f32>) {
    let k = out.nrows() as f32;
    let diff = out - target;
    let loss = diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / k as f64;
    (loss, diff * (2.0 / k))
}

/// Draws `(x_t, t, ε)` for the given rows of standardized data.
/// Exponential moving average of the weights, with the usual warm-up
/// `min(decay, (1 + s) / (10 + s))` so early steps are not dominated by the init.
struct Ema {
    params: Params<f64>,
    step: u32,
}

impl Ema {
    const DECAY: f64 = 0.99;

    fn new(params: &Params<f64>) -> Self {
        Ema { params: params.clone(), step: 0 }
    }

    fn update(&mut self, params: &Params<f64>) {
        self.step += 1;
        let s = self.step as f64;
        let decay = Self::DECAY.min((1.0 + s) / (10.0 + s));
        for (e, p) in self.params.tensors_mut().into_iter().zip(params.tensors()) {
            for (e, &p) in e.iter_mut().zip(p) {
                *e = decay * *e + (1.0 - decay) * p;
            }
        }
    }
}

fn noisy_batch(
    z: &Array2<f64>,
    rows: &[usize],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<f64>, Array2<f32>) {
    let d = z.ncols();
    let t: Vec<usize> = rows.iter().map(|_| rng.random_range(0..=sched.steps)).collect();
    let eps = Array2::from_shape_simple_fn((rows.len(), d), || rng.sample::<f64, _>(StandardNormal));
    let x0 = z.select(Axis(0), rows);
    let xt = noisify(&x0, &t, &eps, sched).expect("shapes agree by construction");
    let tf = t.iter().map(|&v| v as f64).collect();
    (xt.mapv(|v| v as f32), tf, eps.mapv(|v| v as f32))
}

fn eval_loss(
    net: &ScoreNet,
    params: &Params<f32>,
    batches: &[(Array2<f32>, Vec<f64>, Array2<f32>)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (xt, t, eps) in batches {
        let out = neural::run(params, &net.arch, net.with_time(xt, t), None, None)?;
        total += denoising_loss(&out, eps).0 * xt.nrows() as f64;
        count += xt.nrows();
    }
    Ok(total / count as f64)
}

/// Fits `net` to `data` with the simplified DDPM objective `E‖ε_θ(x_t, t) − ε‖²`.
///
/// Columns are standardized first and the standardizer is stored in the
/// returned net. Validation scores an exponential moving average of the
/// weights, and the average with the best validation loss is returned.
/// The effective batch is `min(batch_size, n_train)`.
pub fn train(
    mut net: ScoreNet,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(ScoreNet, LossHistory)> {
    cfg.validate()?;
    let x = data.x();
    let (n, d) = x.dim();
    if d != net.d() {
        return invalid(format!("data has {d} columns, net expects {}", net.d()));
    }
    if n < 2 {
        return invalid("training needs at least two rows (one for validation)");
    }
    let started = Instant::now();
    net.schedule = sched.clone();
    net.standardizer = Standardizer::fit(x);
    let z = net.standardizer.apply(x);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).ceil() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let batch = cfg.batch_size.min(train_idx.len());

    // Fixed (t, ε) draws so validation losses are comparable across epochs.
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(1);
    let val_batches: Vec<_> = val_idx
        .chunks(1024)
        .map(|rows| noisy_batch(&z, rows, sched, &mut val_rng))
        .collect();

    let mut adam = Adam::new(&net.arch, cfg.learning_rate);
    let mut ema = Ema::new(&net.params);
    let mut params32 = net.params.map(|v| v as f32);
    let mut best = (f64::INFINITY, net.params.clone(), 0usize);
    let mut history = LossHistory::default();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);

    for epoch in 0..cfg.epochs_max {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for rows in train_idx.chunks(batch) {
            let (xt, t, eps) = noisy_batch(&z, rows, sched, &mut rng);
            let mut tape = Tape::new();
            let step = neural::run(
                &params32,
                &net.arch,
                net.with_time(&xt, &t),
                Some(&mut drop_rng),
                Some(&mut tape),
            );
            let out = match step {
                Ok(out) => out,
                Err(_) => return Err(diverged(net, best.1, epoch)),
            };
            let (loss, g) = denoising_loss(&out, &eps);
            if !loss.is_finite() {
                return Err(diverged(net, best.1, epoch));
            }
            let mut grads = Params::<f32>::zeros(&net.arch);
            tape.backward(&params32, g, |pg| grads.accumulate(pg));
            adam.update(&mut net.params, &grads);
            params32 = net.params.map(|v| v as f32);
            ema.update(&net.params);
            total += loss * rows.len() as f64;
            seen += rows.len();
        }
        let val = match eval_loss(&net, &ema.params.map(|v| v as f32), &val_batches) {
            Ok(v) if v.is_finite() => v,
            _ => return Err(diverged(net, best.1, epoch)),
        };
        history.train.push(total / seen as f64);
        history.val.push(val);
        log::debug!("epoch {epoch}: train {:.5} val {val:.5}", total / seen as f64);
        if val < best.0 {
            best = (val, ema.params.clone(), epoch);
        } else if epoch - best.2 >= cfg.early_stop_patience {
            history.stopped_early = true;
            break;
        }
    }
    net.params = best.1;
    history.best_epoch = best.2;
    history.seconds = started.elapsed().as_secs_f64();
    Ok((net, history))
}

fn diverged(mut net: ScoreNet, last_good: Params<f64>, epoch: usize) -> Error {
    net.params = last_good;
    Error::Diverged {
        epoch,
        last_good: Box::new(net),
    }
}

/// Record of a training run, written next to the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub schedule: NoiseSchedule,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn new(net: &ScoreNet, cfg: &TrainConfig, history: &LossHistory) -> Self {
        RunManifest {
            config: cfg.clone(),
            architecture: net.arch.clone(),
            schedule: net.schedule.clone(),
            epochs_run: history.train.len(),
            best_epoch: history.best_epoch,
            stopped_early: history.stopped_early,
            final_train_loss: history.train.last().copied(),
            final_val_loss: history.val.last().copied(),
            best_val_loss: history.val.get(history.best_epoch).copied(),
            seconds: history.seconds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn alpha_bar_matches_product_loop() {
        let s = NoiseSchedule::default();
        let mut prod = 1.0;
        for t in 0..=100 {
            let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 100.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar()[100] - prod).abs() < 1e-12);
        assert!((s.alpha_bar()[0] - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn noisify_without_noise_scales() {
        let s = NoiseSchedule::default();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let out = noisify(&x0, &[10, 70], &Array2::zeros((2, 2)), &s).unwrap();
        for (i, &t) in [10usize, 70].iter().enumerate() {
            for j in 0..2 {
                assert!((out[[i, j]] - s.alpha_bar()[t].sqrt() * x0[[i, j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn noisify_at_t0_is_nearly_identity() {
        let s = NoiseSchedule::default();
        let x0 = array![[1.0, -2.0, 0.3]];
        let eps = array![[0.7, 1.1, -0.4]];
        let out = noisify(&x0, &[0], &eps, &s).unwrap();
        let eps_norm = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x_norm = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = (&out - &x0).iter().map(|v| v * v).sum::<f64>().sqrt();
        // √(1 − ᾱ_0) is exactly 1e-2; the remainder is the (1 − √ᾱ_0) shrinkage of x0.
        assert!(dist <= 1e-2 * eps_norm + (1.0 - 0.9999f64.sqrt()) * x_norm + 1e-15);
    }

    #[test]
    fn noisify_rejects_late_time() {
        let s = NoiseSchedule::default();
        assert!(noisify(&array![[0.0]], &[101], &array![[0.0]], &s).is_err());
    }

    #[test]
    fn schedule_serde_round_trip() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn standardizer_round_trip() {
        let x = array![[1.0, 10.0, 5.0], [2.0, 30.0, 5.0], [4.0, -7.0, 5.0]];
        let st = Standardizer::fit(&x);
        let z = st.apply(&x);
        for col in z.axis_iter(Axis(1)).take(2) {
            assert!(col.sum().abs() < 1e-12);
            assert!((col.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        }
        let back = st.invert(&z);
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            val_fraction: 0.7,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
