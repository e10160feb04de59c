//! Score evaluation, Hessian diagonals and the deciduous residue update.
//!
//! After a leaf `l` is removed, the score of the remaining variables is
//! `s_j − Δ_l,j` with `Δ_l,j = J_lj · s_l / J_ll`, where `J` is the Jacobian
//! of the score. Each removed leaf contributes one such term, re-evaluated on
//! whatever batch is current. The Hessian diagonal of the updated score is
//! obtained by differentiating that expression with dual numbers.

use std::io::Write;

use ndarray::{Array1, Array2, Array3};

use crate::error::{invalid, Error, Result};
use crate::neural::{AxisJet, Dual, Mode, RowHvp, ScoreNet};

/// Threshold below which `|J_ll|` makes a sample unusable for leaf `l`.
pub const EPS_DIV: f64 = 1e-8;

/// Anything that produces a score (up to a positive or negative constant
/// factor) together with the derivatives the ordering needs.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    /// `k × d` outputs at time `t`.
    fn eval(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>>;

    /// `J[s][r][j] = ∂ out_{rows[r]} / ∂ x_j`.
    fn jacobian_rows(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Array3<f64>>;

    /// First and second derivatives of all outputs along each axis in `dirs`.
    fn axis_jets(&self, x: &Array2<f64>, t: f64, dirs: &[usize]) -> Result<Vec<AxisJet>>;

    /// Gradient and `∂²out_l/∂x_l∂x_·` for each output `l` in `rows`.
    fn row_hvps(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Vec<RowHvp>>;
}

impl ScoreModel for ScoreNet {
    fn dim(&self) -> usize {
        self.d()
    }

    fn eval(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.forward(x, &vec![t; x.nrows()], Mode::Eval, 0)
    }

    fn jacobian_rows(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Array3<f64>> {
        self.input_jacobian(x, &vec![t; x.nrows()], rows)
    }

    fn axis_jets(&self, x: &Array2<f64>, t: f64, dirs: &[usize]) -> Result<Vec<AxisJet>> {
        ScoreNet::axis_jets(self, x, t, dirs)
    }

    fn row_hvps(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Vec<RowHvp>> {
        ScoreNet::row_hvps(self, x, t, rows)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        (**self).eval(x, t)
    }

    fn jacobian_rows(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Array3<f64>> {
        (**self).jacobian_rows(x, t, rows)
    }

    fn axis_jets(&self, x: &Array2<f64>, t: f64, dirs: &[usize]) -> Result<Vec<AxisJet>> {
        (**self).axis_jets(x, t, dirs)
    }

    fn row_hvps(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Vec<RowHvp>> {
        (**self).row_hvps(x, t, rows)
    }
}

/// `c ·` another model; used to check that decisions are scale free.
pub struct Scaled<M>(pub M, pub f64);

impl<M: ScoreModel> ScoreModel for Scaled<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        Ok(self.0.eval(x, t)? * self.1)
    }

    fn jacobian_rows(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Array3<f64>> {
        Ok(self.0.jacobian_rows(x, t, rows)? * self.1)
    }

    fn axis_jets(&self, x: &Array2<f64>, t: f64, dirs: &[usize]) -> Result<Vec<AxisJet>> {
        let mut jets = self.0.axis_jets(x, t, dirs)?;
        for j in &mut jets {
            j.first *= self.1;
            j.second *= self.1;
        }
        Ok(jets)
    }

    fn row_hvps(&self, x: &Array2<f64>, t: f64, rows: &[usize]) -> Result<Vec<RowHvp>> {
        let mut hvps = self.0.row_hvps(x, t, rows)?;
        for h in &mut hvps {
            h.grad *= self.1;
            h.curvature *= self.1;
        }
        Ok(hvps)
    }
}

/// Values restricted to the active nodes plus the samples to ignore.
#[derive(Clone, Debug)]
pub struct Masked {
    /// `k × |active|`, columns in the order of [`ScoreField::active`].
    pub values: Array2<f64>,
    /// Samples whose leaf curvature was too small (`|J_ll| < EPS_DIV`).
    pub excluded: Vec<bool>,
}

impl Masked {
    pub fn n_excluded(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }
}

/// Score of the variables not yet ordered.
pub struct ScoreField<'a> {
    model: &'a dyn ScoreModel,
    active: Vec<usize>,
    removed: Vec<usize>,
    residue: bool,
}

impl<'a> ScoreField<'a> {
    /// Field over all `d` nodes. With `residue` off, removals only shrink the active set.
    pub fn new(model: &'a dyn ScoreModel, residue: bool) -> Self {
        ScoreField {
            model,
            active: (0..model.dim()).collect(),
            removed: Vec::new(),
            residue,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn removed(&self) -> &[usize] {
        &self.removed
    }

    pub fn uses_residue(&self) -> bool {
        self.residue
    }

    /// Marks `leaf` as ordered; with the residue on, its `Δ` joins the update.
    pub fn remove(&mut self, leaf: usize) -> Result<()> {
        let Some(pos) = self.active.iter().position(|&a| a == leaf) else {
            return invalid(format!("node {leaf} is not active"));
        };
        self.active.remove(pos);
        self.removed.push(leaf);
        Ok(())
    }

    fn check_batch(&self, b: &Array2<f64>) -> Result<()> {
        if b.ncols() != self.model.dim() {
            return invalid(format!("batch has {} columns, field has {}", b.ncols(), self.model.dim()));
        }
        if b.nrows() == 0 {
            return invalid("empty batch");
        }
        Ok(())
    }

    fn residue_leaves(&self) -> &[usize] {
        if self.residue {
            &self.removed
        } else {
            &[]
        }
    }

    /// Raw output on active columns minus the accumulated residue `Δ_π`.
    pub fn score_eval(&self, b: &Array2<f64>, t: f64) -> Result<Masked> {
        self.check_batch(b)?;
        let raw = self.model.eval(b, t)?;
        let k = b.nrows();
        let mut values = Array2::zeros((k, self.active.len()));
        for (c, &j) in self.active.iter().enumerate() {
            values.column_mut(c).assign(&raw.column(j));
        }
        let mut excluded = vec![false; k];
        let leaves = self.residue_leaves();
        if !leaves.is_empty() {
            let hvps = self.model.row_hvps(b, t, leaves)?;
            for (&l, hvp) in leaves.iter().zip(&hvps) {
                let delta = residue_from(&hvp.grad, &raw.column(l).to_owned(), l, &self.active, &mut excluded);
                values -= &delta;
            }
        }
        self.check_excluded(&excluded)?;
        Ok(Masked { values, excluded })
    }

    /// `Δ_l` on the active columns for a candidate leaf `l` (its own entry is 0).
    pub fn deciduous_residue(&self, b: &Array2<f64>, t: f64, l: usize) -> Result<Masked> {
        self.check_batch(b)?;
        if !self.active.contains(&l) {
            return invalid(format!("node {l} is not active"));
        }
        let raw = self.model.eval(b, t)?;
        let jac = self.model.jacobian_rows(b, t, &[l])?;
        let grad = jac.index_axis(ndarray::Axis(1), 0).to_owned();
        let mut excluded = vec![false; b.nrows()];
        let mut values = residue_from(&grad, &raw.column(l).to_owned(), l, &self.active, &mut excluded);
        if let Some(c) = self.active.iter().position(|&a| a == l) {
            values.column_mut(c).fill(0.0);
        }
        self.check_leaf_excluded(l, &excluded)?;
        Ok(Masked { values, excluded })
    }

    /// Per-sample `∂(updated score)_j / ∂x_j` for every active `j`.
    ///
    /// Without residue terms this is the Jacobian diagonal from reverse sweeps.
    /// With them, each term `J_lj · s_l / J_ll` is differentiated in `x_j`
    /// using dual numbers built from forward jets and Hessian-vector rows.
    pub fn hessian_diag(&self, b: &Array2<f64>, t: f64) -> Result<Masked> {
        self.check_batch(b)?;
        let k = b.nrows();
        let mut values = Array2::zeros((k, self.active.len()));
        let mut excluded = vec![false; k];
        let leaves = self.residue_leaves();
        if leaves.is_empty() {
            let jac = self.model.jacobian_rows(b, t, &self.active)?;
            for (c, &j) in self.active.iter().enumerate() {
                for s in 0..k {
                    values[[s, c]] = jac[[s, c, j]];
                }
            }
            return Ok(Masked { values, excluded });
        }
        let raw = self.model.eval(b, t)?;
        let jets = self.model.axis_jets(b, t, &self.active)?;
        let hvps = self.model.row_hvps(b, t, leaves)?;
        for (&l, hvp) in leaves.iter().zip(&hvps) {
            for s in 0..k {
                if hvp.grad[[s, l]].abs() < EPS_DIV {
                    excluded[s] = true;
                }
            }
        }
        for (c, (&j, jet)) in self.active.iter().zip(&jets).enumerate() {
            for s in 0..k {
                let mut h = jet.first[[s, j]];
                if !excluded[s] {
                    for (&l, hvp) in leaves.iter().zip(&hvps) {
                        let j_lj = Dual::new(jet.first[[s, l]], jet.second[[s, l]]);
                        let s_l = Dual::new(raw[[s, l]], jet.first[[s, l]]);
                        let j_ll = Dual::new(hvp.grad[[s, l]], hvp.curvature[[s, j]]);
                        h -= (j_lj * s_l / j_ll).t;
                    }
                }
                values[[s, c]] = h;
            }
        }
        self.check_excluded(&excluded)?;
        Ok(Masked { values, excluded })
    }

    fn check_excluded(&self, excluded: &[bool]) -> Result<()> {
        let n = excluded.iter().filter(|&&e| e).count();
        if 2 * n > excluded.len() {
            let leaf = *self.removed.last().unwrap_or(&0);
            return Err(Error::DegenerateCurvature {
                leaf,
                excluded: n,
                total: excluded.len(),
            });
        }
        Ok(())
    }

    fn check_leaf_excluded(&self, leaf: usize, excluded: &[bool]) -> Result<()> {
        let n = excluded.iter().filter(|&&e| e).count();
        if 2 * n > excluded.len() {
            return Err(Error::DegenerateCurvature {
                leaf,
                excluded: n,
                total: excluded.len(),
            });
        }
        Ok(())
    }
}

/// `Δ_l,j = J_lj · s_l / J_ll` on the active columns; flags small `|J_ll|`.
fn residue_from(
    grad_l: &Array2<f64>,
    s_l: &Array1<f64>,
    l: usize,
    active: &[usize],
    excluded: &mut [bool],
) -> Array2<f64> {
    let k = grad_l.nrows();
    let mut out = Array2::zeros((k, active.len()));
    for s in 0..k {
        let j_ll = grad_l[[s, l]];
        if j_ll.abs() < EPS_DIV {
            excluded[s] = true;
            continue;
        }
        let factor = s_l[s] / j_ll;
        for (c, &j) in active.iter().enumerate() {
            out[[s, c]] = grad_l[[s, j]] * factor;
        }
    }
    out
}

/// Variance over non-excluded samples of each column (population variance).
pub fn column_variances(m: &Masked) -> Vec<f64> {
    let rows: Vec<usize> = (0..m.values.nrows()).filter(|&s| !m.excluded[s]).collect();
    let n = rows.len() as f64;
    (0..m.values.ncols())
        .map(|c| {
            let mean = rows.iter().map(|&s| m.values[[s, c]]).sum::<f64>() / n;
            rows.iter().map(|&s| (m.values[[s, c]] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Appends `iteration,node,variance` rows (the Hessian-variance dump).
pub fn write_variance_rows<W: Write>(
    w: &mut csv::Writer<W>,
    iteration: usize,
    active: &[usize],
    variances: &[f64],
) -> Result<()> {
    for (&node, &v) in active.iter().zip(variances) {
        w.write_record([iteration.to_string(), node.to_string(), format!("{v:e}")])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::Dag;
    use crate::neural::Architecture;
    use crate::oracle::{marginal_precision, scm_precision, ForwardModeScore, GaussianAnmScore, LinearGaussianScore};
    use crate::scm::{sample_anm, AnmSpec};
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(k: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, d), |_| StandardNormal.sample(&mut rng))
    }

    fn gaussian(precision: Array2<f64>) -> ForwardModeScore<LinearGaussianScore> {
        ForwardModeScore(LinearGaussianScore::new(precision).unwrap())
    }

    // 0 → 1 → 2 with weights 1.5 and −0.7, noise variances 1, 0.5, 2.
    fn chain3() -> (Array2<f64>, Array2<f64>) {
        let w = array![[0.0, 1.5, 0.0], [0.0, 0.0, -0.7], [0.0, 0.0, 0.0]];
        let p = scm_precision(&w, &[1.0, 0.5, 2.0]).unwrap();
        (w, p)
    }

    #[test]
    fn no_removals_gives_raw_output() {
        let net = ScoreNet::new(Architecture::with_widths(3, 8, 16), Default::default(), 1).unwrap();
        let x = normal(5, 3, 0);
        let field = ScoreField::new(&net, true);
        let m = field.score_eval(&x, 10.0).unwrap();
        assert_eq!(m.values, net.eval(&x, 10.0).unwrap());
        assert_eq!(m.n_excluded(), 0);
    }

    #[test]
    fn uncoupled_leaf_leaves_no_residue() {
        let model = gaussian(Array2::from_diag(&array![1.0, 2.0, 0.5]));
        let x = normal(10, 3, 1);
        let mut field = ScoreField::new(&model, true);
        let r = field.deciduous_residue(&x, 0.0, 2).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        field.remove(2).unwrap();
        let m = field.score_eval(&x, 0.0).unwrap();
        let raw = model.eval(&x, 0.0).unwrap();
        assert_eq!(m.values, raw.slice(s![.., ..2]));
    }

    #[test]
    fn residue_update_gives_marginal_score() {
        let (_, p) = chain3();
        let model = gaussian(p.clone());
        let x = normal(50, 3, 2);
        let mut field = ScoreField::new(&model, true);
        field.remove(2).unwrap();
        let got = field.score_eval(&x, 0.0).unwrap().values;
        let want = -x.slice(s![.., ..2]).dot(&marginal_precision(&p, 2).unwrap());
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn residue_matches_linear_mechanism() {
        let (w, p) = chain3();
        let model = gaussian(p);
        let x = normal(20, 3, 3);
        let field = ScoreField::new(&model, true);
        let r = field.deciduous_residue(&x, 0.0, 2).unwrap();
        for s in 0..20 {
            // δ_1 = w_12 · (x_2 − w_12 x_1) / σ_2².
            let want = w[[1, 2]] * (x[[s, 2]] - w[[1, 2]] * x[[s, 1]]) / 2.0;
            assert!((r.values[[s, 1]] - want).abs() < 1e-8);
            assert!(r.values[[s, 0]].abs() < 1e-12 && r.values[[s, 2]] == 0.0);
        }
    }

    #[test]
    fn residue_is_homogeneous_in_scale() {
        let net = ScoreNet::new(Architecture::with_widths(3, 8, 16), Default::default(), 4).unwrap();
        let x = normal(16, 3, 4);
        let base = ScoreField::new(&net, true).deciduous_residue(&x, 20.0, 1).unwrap();
        let scaled = Scaled(&net, 2.5);
        let r = ScoreField::new(&scaled, true).deciduous_residue(&x, 20.0, 1).unwrap();
        assert!((&r.values - &(&base.values * 2.5)).iter().all(|v| v.abs() < 1e-12 * (1.0 + v.abs()) + 1e-12));
    }

    #[test]
    fn standard_normal_diagonal_is_minus_one() {
        let model = gaussian(Array2::eye(1));
        let h = ScoreField::new(&model, true).hessian_diag(&normal(30, 1, 5), 0.0).unwrap();
        assert!(h.values.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn two_variable_leaf_has_constant_diagonal() {
        let g = Dag::from_edges(2, &[(0, 1)]).unwrap();
        let (data, anm) = sample_anm(&AnmSpec::new(g, 1), 300, 1).unwrap();
        let model = ForwardModeScore(GaussianAnmScore::new(anm).unwrap());
        let v = column_variances(&ScoreField::new(&model, true).hessian_diag(data.x(), 0.0).unwrap());
        assert_eq!(v[1], 0.0);
        assert!(v[0] > 0.0);
    }

    #[test]
    fn gp_residue_is_local_to_parents() {
        let g = Dag::from_edges(4, &[(0, 1), (1, 3), (2, 3), (0, 2)]).unwrap();
        let (data, anm) = sample_anm(&AnmSpec::new(g.clone(), 8), 100, 2).unwrap();
        let model = ForwardModeScore(GaussianAnmScore::new(anm).unwrap());
        let field = ScoreField::new(&model, true);
        let r = field.deciduous_residue(data.x(), 0.0, 3).unwrap();
        assert!(r.values.column(0).iter().all(|&v| v == 0.0));
        assert!(r.values.column(1).iter().any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn updated_diagonal_matches_finite_differences() {
        let net = ScoreNet::new(Architecture::with_widths(4, 16, 32), Default::default(), 6).unwrap();
        let x = normal(8, 4, 6);
        let t = 30.0;
        let mut field = ScoreField::new(&net, true);
        field.remove(3).unwrap();
        field.remove(0).unwrap();
        let h = field.hessian_diag(&x, t).unwrap();
        let eps = 1e-5;
        for (c, &j) in field.active().iter().enumerate() {
            let mut xp = x.clone();
            xp.column_mut(j).mapv_inplace(|v| v + eps);
            let mut xm = x.clone();
            xm.column_mut(j).mapv_inplace(|v| v - eps);
            let fp = field.score_eval(&xp, t).unwrap().values;
            let fm = field.score_eval(&xm, t).unwrap().values;
            for s in 0..8 {
                let fd = (fp[[s, c]] - fm[[s, c]]) / (2.0 * eps);
                let err = (h.values[[s, c]] - fd).abs() / (fd.abs() + 1e-6);
                assert!(err < 1e-3, "sample {s}, node {j}: {} vs {fd}", h.values[[s, c]]);
            }
        }
    }

    #[test]
    fn vanishing_curvature_is_reported() {
        // Output 0 does not depend on x_0, so every sample is excluded.
        let p = array![[1e-12, 0.0], [0.0, 1.0]];
        let model = gaussian(p);
        let field = ScoreField::new(&model, true);
        match field.deciduous_residue(&normal(10, 2, 7), 0.0, 0) {
            Err(Error::DegenerateCurvature { leaf: 0, excluded: 10, total: 10 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn variance_dump_format() {
        let mut w = csv::Writer::from_writer(Vec::new());
        write_variance_rows(&mut w, 2, &[4, 7], &[0.5, 1.25]).unwrap();
        let out = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(out, "2,4,5e-1\n2,7,1.25e0\n");
    }

    #[test]
    fn masked_variance_skips_excluded_rows() {
        let m = Masked {
            values: array![[1.0], [3.0], [100.0]],
            excluded: vec![false, false, true],
        };
        assert_eq!(column_variances(&m), vec![1.0]);
    }
}
