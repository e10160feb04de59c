//! Closed-form scores for testing: Gaussian-noise ANMs and linear-Gaussian models.
//!
//! Every oracle is written once, generically over [`Real`], and derivatives
//! come from evaluating it on dual numbers and jets ([`ForwardModeScore`]).

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};

use crate::error::{invalid, Result};
use crate::neural::{AxisJet, Dual, Jet2, Real, RowHvp};
use crate::scm::{Anm, NodeFunction, NoiseFamily};
use crate::scorefield::ScoreModel;

/// Step for central differences of GP mechanisms.
pub const FD_STEP: f64 = 1e-4;

/// A score function of one sample, generic over the scalar.
pub trait GenericScore: Sync {
    fn dim(&self) -> usize;
    fn score_row<S: Real<Lane = f64>>(&self, x: &[S]) -> Vec<S>;
}

/// Adapts a [`GenericScore`] to [`ScoreModel`] with forward-mode derivatives.
/// The diffusion time is ignored.
pub struct ForwardModeScore<G>(pub G);

impl<G: GenericScore> ForwardModeScore<G> {
    fn along<S: Real<Lane = f64>>(&self, row: &[f64], seed: impl Fn(usize, f64) -> S) -> Vec<S> {
        let x: Vec<S> = row.iter().enumerate().map(|(j, &v)| seed(j, v)).collect();
        self.0.score_row(&x)
    }
}

fn check(x: &Array2<f64>, d: usize, idx: &[usize]) -> Result<()> {
    if x.ncols() != d {
        return invalid(format!("batch has {} columns, score has {d}", x.ncols()));
    }
    if let Some(i) = idx.iter().find(|&&i| i >= d) {
        return invalid(format!("index {i} out of range for d = {d}"));
    }
    Ok(())
}

impl<G: GenericScore> ScoreModel for ForwardModeScore<G> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: &Array2<f64>, _t: f64) -> Result<Array2<f64>> {
        check(x, self.dim(), &[])?;
        let mut out = Array2::zeros(x.raw_dim());
        for (s, row) in x.rows().into_iter().enumerate() {
            let v = self.0.score_row(row.as_slice().expect("standard layout"));
            out.row_mut(s).assign(&ndarray::Array1::from(v));
        }
        Ok(out)
    }

    fn jacobian_rows(&self, x: &Array2<f64>, _t: f64, rows: &[usize]) -> Result<Array3<f64>> {
        let d = self.dim();
        check(x, d, rows)?;
        let mut jac = Array3::zeros((x.nrows(), rows.len(), d));
        for (s, row) in x.rows().into_iter().enumerate() {
            let row = row.as_slice().expect("standard layout");
            for j in 0..d {
                let out = self.along(row, |i, v| Dual::new(v, (i == j) as u8 as f64));
                for (r, &l) in rows.iter().enumerate() {
                    jac[[s, r, j]] = out[l].t;
                }
            }
        }
        Ok(jac)
    }

    fn axis_jets(&self, x: &Array2<f64>, _t: f64, dirs: &[usize]) -> Result<Vec<AxisJet>> {
        let d = self.dim();
        check(x, d, dirs)?;
        let k = x.nrows();
        let mut out: Vec<AxisJet> = dirs
            .iter()
            .map(|_| AxisJet {
                first: Array2::zeros((k, d)),
                second: Array2::zeros((k, d)),
            })
            .collect();
        for (s, row) in x.rows().into_iter().enumerate() {
            let row = row.as_slice().expect("standard layout");
            for (jet, &j) in out.iter_mut().zip(dirs) {
                let v = self.along(row, |i, v| Jet2::new(v, (i == j) as u8 as f64, 0.0));
                for i in 0..d {
                    jet.first[[s, i]] = v[i].d1;
                    jet.second[[s, i]] = v[i].d2;
                }
            }
        }
        Ok(out)
    }

    fn row_hvps(&self, x: &Array2<f64>, _t: f64, rows: &[usize]) -> Result<Vec<RowHvp>> {
        let d = self.dim();
        check(x, d, rows)?;
        let k = x.nrows();
        let mut out: Vec<RowHvp> = rows
            .iter()
            .map(|_| RowHvp {
                grad: Array2::zeros((k, d)),
                curvature: Array2::zeros((k, d)),
            })
            .collect();
        for (s, row) in x.rows().into_iter().enumerate() {
            let row = row.as_slice().expect("standard layout");
            let axis: Vec<Vec<Jet2>> = (0..d)
                .map(|j| self.along(row, |i, v| Jet2::new(v, (i == j) as u8 as f64, 0.0)))
                .collect();
            for (hvp, &l) in out.iter_mut().zip(rows) {
                for j in 0..d {
                    hvp.grad[[s, j]] = axis[j][l].d1;
                    hvp.curvature[[s, j]] = if j == l {
                        axis[l][l].d2
                    } else {
                        // Polarization: D²_{e_l+e_j} = K_ll + 2 K_lj + K_jj.
                        let both = self.along(row, |i, v| Jet2::new(v, (i == l || i == j) as u8 as f64, 0.0));
                        0.5 * (both[l].d2 - axis[l][l].d2 - axis[j][l].d2)
                    };
                }
            }
        }
        Ok(out)
    }
}

/// Score of a Gaussian-noise ANM:
/// `s_j = −(x_j − f_j)/σ_j² + Σ_{i ∈ Ch(j)} ∂f_i/∂x_j · (x_i − f_i)/σ_i²`.
pub struct GaussianAnmScore {
    anm: Anm,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    h: f64,
}

impl GaussianAnmScore {
    pub fn new(anm: Anm) -> Result<Self> {
        if anm.noise_family != NoiseFamily::Gaussian {
            return invalid("the analytic ANM score needs Gaussian noise");
        }
        let d = anm.graph.d();
        let parents = (0..d).map(|j| anm.graph.parents(j)).collect();
        let children = (0..d).map(|j| anm.graph.children(j)).collect();
        Ok(GaussianAnmScore {
            anm,
            parents,
            children,
            h: FD_STEP,
        })
    }

    pub fn anm(&self) -> &Anm {
        &self.anm
    }

    fn f<S: Real<Lane = f64>>(&self, i: usize, x: &[S], shift: Option<(usize, f64)>) -> S {
        let Some(func) = &self.anm.functions[i] else {
            return S::zero();
        };
        let u: Vec<S> = self.parents[i]
            .iter()
            .map(|&p| match shift {
                Some((q, h)) if q == p => x[p] + S::lift(h),
                _ => x[p],
            })
            .collect();
        func.eval(&u)
    }

    /// `∂f_i/∂x_j`: exact for linear mechanisms, central differences otherwise.
    fn df<S: Real<Lane = f64>>(&self, i: usize, j: usize, x: &[S]) -> S {
        match &self.anm.functions[i] {
            Some(NodeFunction::Linear(w)) => {
                let pos = self.parents[i].iter().position(|&p| p == j).expect("j is a parent of i");
                S::lift(w[pos])
            }
            _ => (self.f(i, x, Some((j, self.h))) - self.f(i, x, Some((j, -self.h)))).scale(0.5 / self.h),
        }
    }

    /// `log p(x)` of one sample, used to cross-check the score.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        (0..x.len())
            .map(|j| {
                let s = self.anm.scales[j];
                let r = (x[j] - self.f::<f64>(j, x, None)) / s;
                -0.5 * r * r - s.ln() - 0.5 * ln_2pi
            })
            .sum()
    }
}

impl GenericScore for GaussianAnmScore {
    fn dim(&self) -> usize {
        self.anm.graph.d()
    }

    fn score_row<S: Real<Lane = f64>>(&self, x: &[S]) -> Vec<S> {
        let d = x.len();
        let r: Vec<S> = (0..d)
            .map(|j| (x[j] - self.f(j, x, None)).scale(1.0 / (self.anm.scales[j] * self.anm.scales[j])))
            .collect();
        (0..d)
            .map(|j| {
                self.children[j]
                    .iter()
                    .fold(-r[j], |acc, &i| acc + self.df(i, j, x) * r[i])
            })
            .collect()
    }
}

/// Score `−Θx` of a zero-mean Gaussian with precision `Θ`.
pub struct LinearGaussianScore {
    precision: Array2<f64>,
}

impl LinearGaussianScore {
    pub fn new(precision: Array2<f64>) -> Result<Self> {
        check_spd(&precision)?;
        Ok(LinearGaussianScore { precision })
    }
}

impl GenericScore for LinearGaussianScore {
    fn dim(&self) -> usize {
        self.precision.nrows()
    }

    fn score_row<S: Real<Lane = f64>>(&self, x: &[S]) -> Vec<S> {
        self.precision
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(x).fold(S::zero(), |acc, (&p, &v)| acc - v.scale(p)))
            .collect()
    }
}

fn check_spd(p: &Array2<f64>) -> Result<()> {
    let (n, m) = p.dim();
    if n != m || n == 0 {
        return invalid("precision must be a non-empty square matrix");
    }
    if (0..n).any(|i| (0..i).any(|j| (p[[i, j]] - p[[j, i]]).abs() > 1e-12 * (1.0 + p[[i, j]].abs()))) {
        return invalid("precision must be symmetric");
    }
    if DMatrix::from_fn(n, n, |i, j| p[[i, j]]).cholesky().is_none() {
        return invalid("precision must be positive definite");
    }
    Ok(())
}

/// `−x·Θ` for each row of `x`.
pub fn linear_gaussian_score(precision: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
    check_spd(precision)?;
    if x.ncols() != precision.nrows() {
        return invalid("x and precision sizes disagree");
    }
    Ok(-x.dot(precision))
}

/// Precision of the marginal after dropping variable `drop` (Schur complement).
pub fn marginal_precision(precision: &Array2<f64>, drop: usize) -> Result<Array2<f64>> {
    check_spd(precision)?;
    let d = precision.nrows();
    if drop >= d {
        return invalid(format!("index {drop} out of range for d = {d}"));
    }
    let keep: Vec<usize> = (0..d).filter(|&i| i != drop).collect();
    let pll = precision[[drop, drop]];
    Ok(Array2::from_shape_fn((d - 1, d - 1), |(a, b)| {
        let (i, j) = (keep[a], keep[b]);
        precision[[i, j]] - precision[[i, drop]] * precision[[drop, j]] / pll
    }))
}

/// Precision `(I − W) D⁻¹ (I − W)ᵀ` of `x_j = Σ_i W_ij x_i + ε_j`, `ε_j ~ N(0, var_j)`.
pub fn scm_precision(weights: &Array2<f64>, noise_var: &[f64]) -> Result<Array2<f64>> {
    let d = weights.nrows();
    if weights.ncols() != d || noise_var.len() != d {
        return invalid("weights must be d×d with d noise variances");
    }
    if noise_var.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return invalid("noise variances must be positive");
    }
    let a = Array2::<f64>::eye(d) - weights;
    let mut scaled = a.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        col /= noise_var[j];
    }
    Ok(scaled.dot(&a.t()))
}
