//! MLP denoiser `ε_θ(x, t)` and its derivatives.
//!
//! One generic forward pass serves every use: `f32` for training, `f64` for
//! evaluation and reverse-mode Jacobians, [`Dual`] for Hessian-vector
//! products and [`Jet2`] for second directional derivatives.

mod checkpoint;
pub mod scalar;
pub mod tape;

use ndarray::{s, Array1, Array2, Array3, Axis, LinalgScalar};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Standardizer};
use crate::error::{invalid, Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use scalar::{Dual, Jet2, Real};
pub use tape::{ParamGrad, Tape};

use scalar::lane;
use tape::Op;

/// Rows per batched derivative pass; bounds peak memory of tiled inputs.
const MAX_ROWS: usize = 4096;

/// Layer widths and regularization of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub d: usize,
    pub small: usize,
    pub big: usize,
    pub dropout: f64,
    pub leak: f64,
    pub norm_eps: f64,
}

impl Architecture {
    /// Five linear layers with `small = max(128, 3d)` and `big = max(1024, 5d)`.
    pub fn for_dim(d: usize) -> Self {
        Self::with_widths(d, 128.max(3 * d), 1024.max(5 * d))
    }

    pub fn with_widths(d: usize, small: usize, big: usize) -> Self {
        Architecture {
            d,
            small,
            big,
            dropout: 0.2,
            leak: 0.01,
            norm_eps: 1e-5,
        }
    }

    /// `(fan_in, fan_out)` of each linear layer.
    pub fn shapes(&self) -> [(usize, usize); 5] {
        [
            (self.d + 1, self.small),
            (self.small, self.big),
            (self.big, self.big),
            (self.big, self.big),
            (self.big, self.d),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.small == 0 || self.big == 0 {
            return invalid("architecture widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn layers(&self) -> [Layer; 12] {
        use Layer::*;
        [
            Affine(0),
            LeakyRelu,
            Norm(0),
            Dropout,
            Affine(1),
            LeakyRelu,
            Norm(1),
            Affine(2),
            LeakyRelu,
            Affine(3),
            LeakyRelu,
            Affine(4),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Affine(usize),
    LeakyRelu,
    Norm(usize),
    Dropout,
}

/// Whether dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    /// `out × in`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

/// All trainable weights. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    pub linears: Vec<Linear<F>>,
    pub norms: Vec<LayerNormParams<F>>,
}

impl<F: LinalgScalar> Params<F> {
    /// Every entry zero (a gradient accumulator, not a usable network).
    pub fn zeros(arch: &Architecture) -> Self {
        Params {
            linears: arch
                .shapes()
                .iter()
                .map(|&(i, o)| Linear {
                    w: Array2::zeros((o, i)),
                    b: Array1::zeros(o),
                })
                .collect(),
            norms: [arch.small, arch.big]
                .iter()
                .map(|&w| LayerNormParams {
                    gamma: Array1::zeros(w),
                    beta: Array1::zeros(w),
                })
                .collect(),
        }
    }

    pub fn map<G>(&self, f: impl Fn(F) -> G + Copy) -> Params<G> {
        Params {
            linears: self
                .linears
                .iter()
                .map(|l| Linear {
                    w: l.w.mapv(f),
                    b: l.b.mapv(f),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| LayerNormParams {
                    gamma: n.gamma.mapv(f),
                    beta: n.beta.mapv(f),
                })
                .collect(),
        }
    }

    /// Flat views in a fixed order (per linear `w, b`, then per norm `γ, β`).
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(14);
        for l in &self.linears {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        for n in &self.norms {
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(14);
        for l in &mut self.linears {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        for n in &mut self.norms {
            out.push(n.gamma.as_slice_mut().expect("standard layout"));
            out.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds one contribution from a reverse sweep.
    pub fn accumulate(&mut self, pg: ParamGrad<'_, F>)
    where
        F: Real<Lane = F>,
    {
        match pg {
            ParamGrad::Affine { layer, input, grad } => {
                let l = &mut self.linears[layer];
                ndarray::linalg::general_mat_mul(F::one(), &grad.t(), input, F::one(), &mut l.w);
                l.b += &grad.sum_axis(Axis(0));
            }
            ParamGrad::Norm { norm, z, grad } => {
                let n = &mut self.norms[norm];
                n.gamma += &(grad * z).sum_axis(Axis(0));
                n.beta += &grad.sum_axis(Axis(0));
            }
        }
    }
}

impl Params<f64> {
    /// PyTorch-style init: weights and biases `U(±1/√fan_in)`, γ = 1, β = 0.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(arch);
        for n in &mut p.norms {
            n.gamma.fill(1.0);
        }
        for (l, &(fan_in, _)) in p.linears.iter_mut().zip(arch.shapes().iter()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            l.w.mapv_inplace(|_| u.sample(&mut rng));
            l.b.mapv_inplace(|_| u.sample(&mut rng));
        }
        p
    }
}

/// Runs the network on a `k × (d+1)` input (time already appended).
///
/// Dropout is applied iff `dropout_rng` is given. Records onto `tape` when
/// provided.
pub(crate) fn run<S: Real>(
    params: &Params<S::Lane>,
    arch: &Architecture,
    mut h: Array2<S>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    mut tape: Option<&mut Tape<S>>,
) -> Result<Array2<S>> {
    let leak: S::Lane = lane(arch.leak);
    let one: S::Lane = lane(1.0);
    for (idx, layer) in arch.layers().iter().enumerate() {
        h = match *layer {
            Layer::Affine(i) => {
                let lin = &params.linears[i];
                let mut y = S::matmul_t(&h, &lin.w);
                scalar::add_bias(&mut y, &lin.b);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Op::Affine { layer: i, input: h });
                }
                y
            }
            Layer::LeakyRelu => {
                let slope = h.mapv(|v| if v.value() > S::Lane::zero() { one } else { leak });
                let y = ndarray::Zip::from(&h).and(&slope).map_collect(|&v, &s| v.scale(s));
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Op::LeakyRelu { slope });
                }
                y
            }
            Layer::Norm(i) => {
                let n = &params.norms[i];
                let (z, rstd) = normalize(&h, arch.norm_eps);
                let mut y = z.clone();
                for mut row in y.axis_iter_mut(Axis(0)) {
                    for ((v, &g), &b) in row.iter_mut().zip(n.gamma.iter()).zip(n.beta.iter()) {
                        *v = v.scale(g) + S::lift(b);
                    }
                }
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Op::LayerNorm { norm: i, z, rstd });
                }
                y
            }
            Layer::Dropout => match dropout_rng.as_deref_mut() {
                Some(rng) if arch.dropout > 0.0 => {
                    let keep = 1.0 - arch.dropout;
                    let scale: S::Lane = lane(1.0 / keep);
                    let mask = h.map(|_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            S::Lane::zero()
                        }
                    });
                    let y = ndarray::Zip::from(&h).and(&mask).map_collect(|&v, &m| v.scale(m));
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Op::Dropout { mask });
                    }
                    y
                }
                _ => h,
            },
        };
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: idx });
        }
    }
    Ok(h)
}

/// Row-wise `z = (x − μ)·rstd` with `rstd = (σ² + eps)^(-1/2)`.
pub(crate) fn normalize<S: Real>(h: &Array2<S>, eps: f64) -> (Array2<S>, Array1<S>) {
    let inv_n: S::Lane = lane(1.0 / h.ncols() as f64);
    let eps = S::from_f64(eps);
    let mut z = h.clone();
    let mut rstd = Array1::from_elem(h.nrows(), S::zero());
    for (mut row, r) in z.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mut mean = S::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean = mean.scale(inv_n);
        let mut var = S::zero();
        for v in row.iter_mut() {
            *v = *v - mean;
            var += *v * *v;
        }
        *r = (var.scale(inv_n) + eps).rsqrt();
        for v in row.iter_mut() {
            *v = *v * *r;
        }
    }
    (z, rstd)
}


/// Trained (or freshly initialized) denoiser with everything needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub arch: Architecture,
    pub params: Params<f64>,
    pub schedule: NoiseSchedule,
    /// Column transform the net was trained under.
    pub standardizer: Standardizer,
}

/// Per-row results of a forward-over-reverse pass for output `l`.
#[derive(Clone, Debug)]
pub struct RowHvp {
    /// `∂ out_l / ∂ x_j`, `k × d`.
    pub grad: Array2<f64>,
    /// `∂² out_l / ∂x_l ∂x_j`, `k × d`.
    pub curvature: Array2<f64>,
}

/// First and second derivatives of every output along one coordinate axis.
#[derive(Clone, Debug)]
pub struct AxisJet {
    /// `∂ out_i / ∂ x_j`, `k × d` (column `i` is output `i`).
    pub first: Array2<f64>,
    /// `∂² out_i / ∂ x_j²`, `k × d`.
    pub second: Array2<f64>,
}

impl ScoreNet {
    pub fn new(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = Params::init(&arch, seed);
        let standardizer = Standardizer::identity(arch.d);
        Ok(ScoreNet {
            arch,
            params,
            schedule,
            standardizer,
        })
    }

    pub fn d(&self) -> usize {
        self.arch.d
    }

    fn check_input<S>(&self, x: &Array2<S>, t: &[f64]) -> Result<()> {
        if x.ncols() != self.d() {
            return invalid(format!("input has {} columns, net expects {}", x.ncols(), self.d()));
        }
        if t.len() != x.nrows() {
            return invalid(format!("{} times for {} rows", t.len(), x.nrows()));
        }
        let tmax = self.schedule.steps() as f64;
        if let Some(bad) = t.iter().find(|&&v| !(0.0..=tmax).contains(&v)) {
            return invalid(format!("time {bad} outside [0, {tmax}]"));
        }
        Ok(())
    }

    /// Appends the normalized time column `t/T`.
    pub(crate) fn with_time<S: Real>(&self, x: &Array2<S>, t: &[f64]) -> Array2<S> {
        let (k, d) = x.dim();
        let tmax = self.schedule.steps() as f64;
        let mut input = Array2::from_elem((k, d + 1), S::zero());
        input.slice_mut(s![.., ..d]).assign(x);
        for (row, &ti) in t.iter().enumerate() {
            input[[row, d]] = S::from_f64(ti / tmax);
        }
        input
    }

    /// Batched output `ε_θ(x, t)`. Dropout is active only in [`Mode::Train`].
    pub fn forward(&self, x: &Array2<f64>, t: &[f64], mode: Mode, seed: u64) -> Result<Array2<f64>> {
        self.check_input(x, t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropout = (mode == Mode::Train).then_some(&mut rng);
        run(&self.params, &self.arch, self.with_time(x, t), dropout, None)
    }

    /// Evaluation-mode forward over any scalar with `f64` lanes.
    pub fn forward_generic<S: Real<Lane = f64>>(
        &self,
        x: &Array2<S>,
        t: &[f64],
        tape: Option<&mut Tape<S>>,
    ) -> Result<Array2<S>> {
        self.check_input(x, t)?;
        run(&self.params, &self.arch, self.with_time(x, t), None, tape)
    }

    /// Loss and `∂loss/∂w`. `loss_fn` maps the output to `(loss, ∂loss/∂output)`.
    pub fn grad_weights(
        &self,
        x: &Array2<f64>,
        t: &[f64],
        mode: Mode,
        seed: u64,
        loss_fn: impl FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    ) -> Result<(f64, Params<f64>)> {
        self.check_input(x, t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropout = (mode == Mode::Train).then_some(&mut rng);
        let mut tape = Tape::new();
        let out = run(&self.params, &self.arch, self.with_time(x, t), dropout, Some(&mut tape))?;
        let (loss, g) = loss_fn(&out);
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: self.arch.layers().len() });
        }
        let mut grads = Params::<f64>::zeros(&self.arch);
        tape.backward(&self.params, g, |pg| grads.accumulate(pg));
        Ok((loss, grads))
    }

    /// `J[s][r][j] = ∂ out_{rows[r]} / ∂ x_j` at sample `s`, by reverse sweeps.
    ///
    /// Only the `d` data inputs are differentiated; the time column is not.
    pub fn input_jacobian(&self, x: &Array2<f64>, t: &[f64], rows: &[usize]) -> Result<Array3<f64>> {
        self.check_input(x, t)?;
        self.check_rows(rows)?;
        let (k, d) = x.dim();
        let mut jac = Array3::zeros((k, rows.len(), d));
        if rows.is_empty() {
            return Ok(jac);
        }
        let per_chunk = (MAX_ROWS / rows.len()).max(1);
        for start in (0..k).step_by(per_chunk) {
            let end = (start + per_chunk).min(k);
            let m = end - start;
            let mut tiled = Array2::zeros((m * rows.len(), d));
            let mut tt = Vec::with_capacity(m * rows.len());
            let mut cot = Array2::zeros((m * rows.len(), d));
            for s in 0..m {
                for (r, &row) in rows.iter().enumerate() {
                    let idx = s * rows.len() + r;
                    tiled.row_mut(idx).assign(&x.row(start + s));
                    tt.push(t[start + s]);
                    cot[[idx, row]] = 1.0;
                }
            }
            let mut tape = Tape::new();
            run(&self.params, &self.arch, self.with_time(&tiled, &tt), None, Some(&mut tape))?;
            let g = tape.backward(&self.params, cot, |_| {});
            for s in 0..m {
                for r in 0..rows.len() {
                    jac.slice_mut(s![start + s, r, ..])
                        .assign(&g.slice(s![s * rows.len() + r, ..d]));
                }
            }
        }
        Ok(jac)
    }

    /// For each output `l` in `rows`, its input gradient and the row
    /// `∂²out_l/∂x_l∂x_·` of its Hessian, via forward-over-reverse.
    pub fn row_hvps(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Vec<RowHvp>> {
        let tv = vec![t; x.nrows()];
        self.check_input(x, &tv)?;
        self.check_rows(rows)?;
        let (k, d) = x.dim();
        let mut out: Vec<RowHvp> = rows
            .iter()
            .map(|_| RowHvp {
                grad: Array2::zeros((k, d)),
                curvature: Array2::zeros((k, d)),
            })
            .collect();
        if rows.is_empty() {
            return Ok(out);
        }
        let per_chunk = (MAX_ROWS / rows.len()).max(1);
        for start in (0..k).step_by(per_chunk) {
            let end = (start + per_chunk).min(k);
            let m = end - start;
            let n = m * rows.len();
            let mut tiled = Array2::from_elem((n, d), Dual::default());
            let mut cot = Array2::from_elem((n, d), Dual::default());
            for s in 0..m {
                for (r, &row) in rows.iter().enumerate() {
                    let idx = s * rows.len() + r;
                    for j in 0..d {
                        tiled[[idx, j]] = Dual::new(x[[start + s, j]], if j == row { 1.0 } else { 0.0 });
                    }
                    cot[[idx, row]] = Dual::new(1.0, 0.0);
                }
            }
            let mut tape = Tape::new();
            run(&self.params, &self.arch, self.with_time(&tiled, &vec![t; n]), None, Some(&mut tape))?;
            let g = tape.backward(&self.params, cot, |_| {});
            for s in 0..m {
                for (r, hvp) in out.iter_mut().enumerate() {
                    for j in 0..d {
                        let v = g[[s * rows.len() + r, j]];
                        hvp.grad[[start + s, j]] = v.v;
                        hvp.curvature[[start + s, j]] = v.t;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward second-order jets along each coordinate axis in `dirs`.
    pub fn axis_jets(&self, x: &Array2<f64>, t: f64, dirs: &[usize]) -> Result<Vec<AxisJet>> {
        let tv = vec![t; x.nrows()];
        self.check_input(x, &tv)?;
        self.check_rows(dirs)?;
        let (k, d) = x.dim();
        let mut out: Vec<AxisJet> = dirs
            .iter()
            .map(|_| AxisJet {
                first: Array2::zeros((k, d)),
                second: Array2::zeros((k, d)),
            })
            .collect();
        if dirs.is_empty() {
            return Ok(out);
        }
        let per_chunk = (MAX_ROWS / dirs.len()).max(1);
        for start in (0..k).step_by(per_chunk) {
            let end = (start + per_chunk).min(k);
            let m = end - start;
            let n = m * dirs.len();
            let mut tiled = Array2::from_elem((n, d), Jet2::default());
            for s in 0..m {
                for (r, &dir) in dirs.iter().enumerate() {
                    for j in 0..d {
                        let seed = if j == dir { 1.0 } else { 0.0 };
                        tiled[[s * dirs.len() + r, j]] = Jet2::new(x[[start + s, j]], seed, 0.0);
                    }
                }
            }
            let y = run(&self.params, &self.arch, self.with_time(&tiled, &vec![t; n]), None, None)?;
            for s in 0..m {
                for (r, jet) in out.iter_mut().enumerate() {
                    for i in 0..d {
                        let v = y[[s * dirs.len() + r, i]];
                        jet.first[[start + s, i]] = v.d1;
                        jet.second[[start + s, i]] = v.d2;
                    }
                }
            }
        }
        Ok(out)
    }

    fn check_rows(&self, rows: &[usize]) -> Result<()> {
        match rows.iter().find(|&&r| r >= self.d()) {
            Some(r) => invalid(format!("output index {r} out of range for d = {}", self.d())),
            None => Ok(()),
        }
    }
}
