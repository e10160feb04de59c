//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use diffan_core::neural::{Architecture, Mode};
use diffan_core::oracle::{marginal_precision, scm_precision, ForwardModeScore, LinearGaussianScore};
use diffan_core::{Dag, NoiseSchedule, Ordering, ScoreField, ScoreNet};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(k: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((k, d), |_| StandardNormal.sample(rng))
}

/// Every labeled DAG on `d` nodes (d ≤ 4 is practical).
pub fn all_dags(d: usize) -> Vec<Dag> {
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for code in 0..3usize.pow(pairs.len() as u32) {
        let mut c = code;
        let mut edges = Vec::new();
        for &(i, j) in &pairs {
            match c % 3 {
                1 => edges.push((i, j)),
                2 => edges.push((j, i)),
                _ => {}
            }
            c /= 3;
        }
        if let Ok(g) = Dag::from_edges(d, &edges) {
            out.push(g);
        }
    }
    out
}

/// A DAG with a random hidden order and edge probability `p`.
pub fn random_dag(d: usize, p: f64, rng: &mut impl Rng) -> Dag {
    let mut perm: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            if rng.random_bool(p) {
                edges.push((perm[a], perm[b]));
            }
        }
    }
    Dag::from_edges(d, &edges).unwrap()
}

pub fn random_order(d: usize, rng: &mut impl Rng) -> Ordering {
    let mut perm: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    Ordering::new(perm).unwrap()
}

/// Skeleton-and-orientation comparison pair by pair.
pub fn brute_shd(est: &Dag, truth: &Dag) -> usize {
    let d = truth.d();
    let mut missing = 0;
    let mut extra = 0;
    let mut reversed = 0;
    for i in 0..d {
        for j in i + 1..d {
            let e = est.has_edge(i, j) || est.has_edge(j, i);
            let t = truth.has_edge(i, j) || truth.has_edge(j, i);
            match (e, t) {
                (true, false) => extra += 1,
                (false, true) => missing += 1,
                (true, true) if est.has_edge(i, j) != truth.has_edge(i, j) => reversed += 1,
                _ => {}
            }
        }
    }
    missing + extra + reversed
}

/// Position-pair double loop.
pub fn brute_d_top(order: &Ordering, truth: &Dag) -> usize {
    let pi = order.as_slice();
    let mut n = 0;
    for a in 0..pi.len() {
        for b in a + 1..pi.len() {
            if truth.has_edge(pi[b], pi[a]) {
                n += 1;
            }
        }
    }
    n
}

/// A linear-Gaussian model on a DAG with generic random parameters.
struct LinearSem {
    d: usize,
    w: DMatrix<f64>,
    noise: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl LinearSem {
    fn new(g: &Dag, rng: &mut impl Rng) -> Self {
        let d = g.d();
        let mut w = DMatrix::zeros(d, d);
        for (i, j) in g.edges() {
            let mag = rng.random_range(0.5..1.5);
            w[(i, j)] = if rng.random_bool(0.5) { mag } else { -mag };
        }
        let noise = DVector::from_fn(d, |_, _| rng.random_range(0.5..1.5));
        let sigma = Self::covariance(&w, &noise);
        LinearSem { d, w, noise, sigma }
    }

    /// `x = Wᵀx + e`, so `Σ = (I − Wᵀ)⁻¹ D (I − W)⁻¹`.
    fn covariance(w: &DMatrix<f64>, noise: &DVector<f64>) -> DMatrix<f64> {
        let d = w.nrows();
        let a = (DMatrix::identity(d, d) - w.transpose()).try_inverse().unwrap();
        &a * DMatrix::from_diagonal(noise) * a.transpose()
    }

    /// Mean slope and variance of `x_j` under `do(x_i)`.
    fn interventional(&self, i: usize, j: usize) -> (f64, f64) {
        let mut w = self.w.clone();
        for p in 0..self.d {
            w[(p, i)] = 0.0;
        }
        let mut noise = self.noise.clone();
        noise[i] = 0.0;
        let total = (DMatrix::identity(self.d, self.d) - &w).try_inverse().unwrap();
        (total[(i, j)], Self::covariance(&w, &noise)[(j, j)])
    }

    /// Slope and variance of `∫ p(x_j | x_i, z) p(z) dz`.
    fn adjusted(&self, i: usize, j: usize, z: &[usize]) -> (f64, f64) {
        if z.contains(&j) {
            return (0.0, self.sigma[(j, j)]);
        }
        let a: Vec<usize> = std::iter::once(i).chain(z.iter().copied()).collect();
        let saa = DMatrix::from_fn(a.len(), a.len(), |r, c| self.sigma[(a[r], a[c])]);
        let saj = DVector::from_fn(a.len(), |r, _| self.sigma[(a[r], j)]);
        let beta = saa.clone().cholesky().unwrap().solve(&saj);
        let resid = self.sigma[(j, j)] - saj.dot(&beta);
        let bz = beta.rows(1, z.len()).into_owned();
        let szz = saa.view((1, 1), (z.len(), z.len())).into_owned();
        (beta[0], resid + (bz.transpose() * szz * &bz)[(0, 0)])
    }
}

fn differ(a: (f64, f64), b: (f64, f64)) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
    !(close(a.0, b.0) && close(a.1, b.1))
}

/// SID by definition: count `(i, j)` where adjusting for `est`'s parents of
/// `i` gives a wrong `p(x_j | do(x_i))` in a generic linear-Gaussian model on
/// `truth`. Two independent parameter draws guard against coincidences.
pub fn brute_sid(est: &Dag, truth: &Dag, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sems = [LinearSem::new(truth, &mut rng), LinearSem::new(truth, &mut rng)];
    let d = truth.d();
    let mut n = 0;
    for i in 0..d {
        let z = est.parents(i);
        for j in (0..d).filter(|&j| j != i) {
            if sems.iter().any(|m| differ(m.interventional(i, j), m.adjusted(i, j, &z))) {
                n += 1;
            }
        }
    }
    n
}

/// Cache-friendly variant for sweeping many estimates against one truth:
/// `table[i][z_mask]` = mistakes for `i` when adjusting for `z_mask`.
pub struct SidTable {
    d: usize,
    table: Vec<Vec<usize>>,
}

impl SidTable {
    pub fn new(truth: &Dag, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sems = [LinearSem::new(truth, &mut rng), LinearSem::new(truth, &mut rng)];
        let d = truth.d();
        let table = (0..d)
            .map(|i| {
                (0..1usize << d)
                    .map(|mask| {
                        if mask >> i & 1 == 1 {
                            return 0;
                        }
                        let z: Vec<usize> = (0..d).filter(|&v| mask >> v & 1 == 1).collect();
                        (0..d)
                            .filter(|&j| j != i)
                            .filter(|&j| sems.iter().any(|m| differ(m.interventional(i, j), m.adjusted(i, j, &z))))
                            .count()
                    })
                    .collect()
            })
            .collect();
        SidTable { d, table }
    }

    pub fn sid(&self, est: &Dag) -> usize {
        (0..self.d)
            .map(|i| {
                let mask = est.parents(i).iter().fold(0usize, |m, &p| m | 1 << p);
                self.table[i][mask]
            })
            .sum()
    }
}

/// Random linear-Gaussian SCM precision on a random DAG, plus one of its leaves.
pub fn linear_gaussian(d: usize, seed: u64) -> (Array2<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_dag(d, 0.6, &mut rng);
    let mut w = Array2::zeros((d, d));
    for (i, j) in g.edges() {
        w[[i, j]] = rng.random_range(-2.0..2.0);
    }
    let noise: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
    let leaves = g.leaves();
    (scm_precision(&w, &noise).unwrap(), leaves[rng.random_range(0..leaves.len())])
}

/// Relative error; gradients below 1e-5 are compared absolutely, since the
/// differences there are dominated by roundoff in the loss.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}


/// Max abs gap between the residue-updated exact score and the Schur
/// marginal score after removing one leaf, on 32 random points.
pub fn residue_vs_marginal(d: usize, seed: u64) -> f64 {
    let (p, leaf) = linear_gaussian(d, seed);
    let model = ForwardModeScore(LinearGaussianScore::new(p.clone()).unwrap());
    let x = normal(32, d, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
    let mut field = ScoreField::new(&model, true);
    field.remove(leaf).unwrap();
    let got = field.score_eval(&x, 0.0).unwrap().values;
    let keep: Vec<usize> = (0..d).filter(|&j| j != leaf).collect();
    let want = -x.select(Axis(1), &keep).dot(&marginal_precision(&p, leaf).unwrap());
    (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Fourth-order central difference at 0. The step stays small so that
/// LeakyReLU kinks are rarely straddled.
fn stencil<T>(f: impl Fn(f64) -> T) -> T
where
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let h = 1e-5;
    (f(-2.0 * h) - f(2.0 * h)) * (1.0 / (12.0 * h)) - (f(-h) - f(h)) * (8.0 / (12.0 * h))
}

/// Worst relative error of weight gradients and input Jacobians against
/// finite differences over `nets` random networks.
pub fn gradient_check(nets: u64) -> (f64, f64) {
    let sq = |out: &Array2<f64>| {
        let diff = out.mapv(|v| v - 0.2);
        (diff.iter().map(|v| v * v).sum::<f64>(), diff * 2.0)
    };
    let mut worst_w = 0.0f64;
    let mut worst_x = 0.0f64;
    for seed in 0..nets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..5);
        let net = ScoreNet::new(Architecture::with_widths(d, 8, 16), NoiseSchedule::default(), seed).unwrap();
        let x = normal(4, d, &mut rng);
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(0..=100) as f64).collect();
        let (_, grads) = net.grad_weights(&x, &t, Mode::Eval, 0, sq).unwrap();
        let sizes: Vec<usize> = net.params.tensors().iter().map(|v| v.len()).collect();
        for _ in 0..10 {
            let ti = rng.random_range(0..sizes.len());
            let ei = rng.random_range(0..sizes[ti]);
            let fd = stencil(|h| {
                let mut moved = net.clone();
                moved.params.tensors_mut()[ti][ei] += h;
                sq(&moved.forward(&x, &t, Mode::Eval, 0).unwrap()).0
            });
            worst_w = worst_w.max(rel_err(grads.tensors()[ti][ei], fd));
        }
        let rows: Vec<usize> = (0..d).collect();
        let jac = net.input_jacobian(&x, &t, &rows).unwrap();
        for j in 0..d {
            let fd = stencil(|h| {
                let mut moved = x.clone();
                moved.column_mut(j).mapv_inplace(|v| v + h);
                net.forward(&moved, &t, Mode::Eval, 0).unwrap()
            });
            for s in 0..4 {
                for r in 0..d {
                    worst_x = worst_x.max(rel_err(jac[[s, r, j]], fd[[s, r]]));
                }
            }
        }
    }
    (worst_w, worst_x)
}
