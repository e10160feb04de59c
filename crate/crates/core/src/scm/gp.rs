//! Random functions drawn from an RBF-kernel Gaussian process prior.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{invalid, Error, Result};
use crate::neural::Real;

/// Largest input count drawn exactly; above this random Fourier features are used.
pub const EXACT_MAX: usize = 3000;
pub const RFF_FEATURES: usize = 256;
const JITTER_START: f64 = 1e-6;
const JITTER_MAX: f64 = 1e-3;

/// A sampled GP function that can be evaluated anywhere.
#[derive(Clone, Debug)]
pub enum GpFunction {
    /// Posterior-mean interpolant `f(u) = k(u, X) α` through an exact draw at `X`.
    Exact {
        points: Array2<f64>,
        alpha: Array1<f64>,
        bandwidth: f64,
    },
    /// `f(u) = √(2/D) Σ_r w_r cos(ω_r·u + b_r)`.
    Rff {
        omega: Array2<f64>,
        phase: Array1<f64>,
        weight: Array1<f64>,
    },
}

impl GpFunction {
    /// Draws a function whose values at the rows of `u` are jointly Gaussian
    /// with covariance `exp(−‖u−v‖²/(2·bandwidth²))`.
    pub fn draw(u: &Array2<f64>, bandwidth: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (m, p) = u.dim();
        if m == 0 || p == 0 {
            return invalid("gp_draw needs at least one row and one column");
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return invalid(format!("bandwidth {bandwidth} must be positive"));
        }
        if m > EXACT_MAX {
            return Ok(Self::draw_rff(p, bandwidth, rng));
        }
        let k = kernel_matrix(u, bandwidth);
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut jitter = JITTER_START;
        loop {
            let mut kj = k.clone();
            for i in 0..m {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = kj.cholesky() {
                // f = L z  ⇒  (K + jI)⁻¹ f = L⁻ᵀ z
                let alpha = chol.l().tr_solve_lower_triangular(&z).ok_or(Error::NotPositiveDefinite { jitter })?;
                return Ok(GpFunction::Exact {
                    points: u.as_standard_layout().into_owned(),
                    alpha: Array1::from_iter(alpha.iter().copied()),
                    bandwidth,
                });
            }
            if jitter >= JITTER_MAX {
                return Err(Error::NotPositiveDefinite { jitter });
            }
            log::debug!("kernel Cholesky failed at jitter {jitter:e}, doubling");
            jitter = (jitter * 2.0).min(JITTER_MAX);
        }
    }

    fn draw_rff(p: usize, bandwidth: f64, rng: &mut ChaCha8Rng) -> Self {
        let omega = Array2::from_shape_simple_fn((RFF_FEATURES, p), || rng.sample::<f64, _>(StandardNormal) / bandwidth);
        let u = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let phase = Array1::from_shape_simple_fn(RFF_FEATURES, || u.sample(rng));
        let weight = Array1::from_shape_simple_fn(RFF_FEATURES, || rng.sample::<f64, _>(StandardNormal));
        GpFunction::Rff { omega, phase, weight }
    }

    pub fn n_inputs(&self) -> usize {
        match self {
            GpFunction::Exact { points, .. } => points.ncols(),
            GpFunction::Rff { omega, .. } => omega.ncols(),
        }
    }

    /// Evaluates at one point, generic so derivatives can be propagated.
    pub fn eval<S: Real<Lane = f64>>(&self, u: &[S]) -> S {
        match self {
            GpFunction::Exact {
                points,
                alpha,
                bandwidth,
            } => {
                let c = -0.5 / (bandwidth * bandwidth);
                let mut acc = S::zero();
                let flat = points.as_slice().expect("points are stored in standard layout");
                for (row, &a) in flat.chunks_exact(points.ncols()).zip(alpha.iter()) {
                    let mut sq = S::zero();
                    for (&ui, &xi) in u.iter().zip(row) {
                        let diff = ui - S::lift(xi);
                        sq += diff * diff;
                    }
                    acc += sq.scale(c).exp().scale(a);
                }
                acc
            }
            GpFunction::Rff { omega, phase, weight } => {
                let norm = (2.0 / weight.len() as f64).sqrt();
                let mut acc = S::zero();
                for ((w, &b), &a) in omega.rows().into_iter().zip(phase.iter()).zip(weight.iter()) {
                    let mut arg = S::lift(b);
                    for (&ui, &wi) in u.iter().zip(w.iter()) {
                        arg += ui.scale(wi);
                    }
                    acc += arg.cos().scale(a);
                }
                acc.scale(norm)
            }
        }
    }

    /// Plain evaluation at every row of `u`.
    pub fn eval_rows(&self, u: &Array2<f64>) -> Array1<f64> {
        match self {
            GpFunction::Exact {
                points,
                alpha,
                bandwidth,
            } => {
                let c = -0.5 / (bandwidth * bandwidth);
                Array1::from_iter(u.rows().into_iter().map(|r| {
                    points
                        .rows()
                        .into_iter()
                        .zip(alpha.iter())
                        .map(|(x, &a)| a * (c * sq_dist(r, x)).exp())
                        .sum()
                }))
            }
            GpFunction::Rff { omega, phase, weight } => {
                let norm = (2.0 / weight.len() as f64).sqrt();
                let mut arg = u.dot(&omega.t());
                arg += phase;
                arg.mapv_inplace(f64::cos);
                arg.dot(weight) * norm
            }
        }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_matrix(u: &Array2<f64>, bandwidth: f64) -> DMatrix<f64> {
    let m = u.nrows();
    let c = -0.5 / (bandwidth * bandwidth);
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = (c * sq_dist(u.row(i), u.row(j))).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Function values of one GP draw at the rows of `parent_values`.
pub fn gp_draw(parent_values: &Array2<f64>, bandwidth: f64, seed: u64) -> Result<Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = GpFunction::draw(parent_values, bandwidth, &mut rng)?;
    Ok(f.eval_rows(parent_values))
}
