//! Edge selection along a fixed ordering with additive regressions and
//! per-predecessor group F-tests.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::diffusion::Standardizer;
use crate::error::{invalid, Result};
use crate::graphs::{Dag, Ordering};
use crate::scm::Dataset;

/// Ridge added when the normal equations are singular.
pub const RIDGE: f64 = 1e-6;

/// Per-predecessor expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Basis {
    /// `u, u², …, u^degree`.
    Polynomial { degree: usize },
    /// Cubic truncated-power spline with `df − 3` knots at quantiles.
    Spline { df: usize },
}

impl Default for Basis {
    fn default() -> Self {
        Basis::Polynomial { degree: 3 }
    }
}

impl Basis {
    pub fn width(&self) -> usize {
        match *self {
            Basis::Polynomial { degree } => degree,
            Basis::Spline { df } => df,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Basis::Polynomial { degree: 0 } => invalid("polynomial degree must be at least 1"),
            Basis::Spline { df } if df < 3 => invalid("spline df must be at least 3"),
            _ => Ok(()),
        }
    }

    /// `n × width` expansion of a standardized column.
    fn expand(&self, u: &[f64]) -> DMatrix<f64> {
        let n = u.len();
        match *self {
            Basis::Polynomial { degree } => DMatrix::from_fn(n, degree, |s, p| u[s].powi(p as i32 + 1)),
            Basis::Spline { df } => {
                let mut sorted = u.to_vec();
                sorted.sort_by(f64::total_cmp);
                let n_knots = df - 3;
                let knots: Vec<f64> = (1..=n_knots)
                    .map(|q| sorted[(q * (n - 1)) / (n_knots + 1)])
                    .collect();
                DMatrix::from_fn(n, df, |s, p| match p {
                    0..=2 => u[s].powi(p as i32 + 1),
                    _ => (u[s] - knots[p - 3]).max(0.0).powi(3),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub basis: Basis,
    pub alpha: f64,
    /// Keep at most this many parents per node (the most significant ones).
    pub max_parents: Option<usize>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            basis: Basis::default(),
            alpha: 0.001,
            max_parents: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha {} outside (0, 1)", self.alpha));
        }
        self.basis.validate()
    }
}

/// Least-squares residual sum of squares of `y` on `x`.
fn rss(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let beta = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => {
            log::warn!("singular design ({} columns); using ridge {RIDGE:e}", x.ncols());
            let ridge = xtx + DMatrix::identity(x.ncols(), x.ncols()) * RIDGE;
            match ridge.clone().cholesky() {
                Some(c) => c.solve(&xty),
                None => ridge.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(x.ncols())),
            }
        }
    };
    (y - x * beta).norm_squared()
}

/// Group F-test p-value of every predecessor of every node, keyed by node.
/// Entry `i` lists `(predecessor, p-value)` in ordering position order.
pub fn prune_pvalues(data: &Dataset, order: &Ordering, basis: Basis) -> Result<Vec<Vec<(usize, f64)>>> {
    basis.validate()?;
    let (n, d) = data.x().dim();
    if order.len() != d {
        return invalid(format!("ordering covers {} nodes, data has {d} columns", order.len()));
    }
    let z = Standardizer::fit(data.x()).apply(data.x());
    let w = basis.width();
    let expanded: Vec<DMatrix<f64>> = (0..d)
        .map(|j| basis.expand(z.column(j).as_slice_memory_order().map_or(&z.column(j).to_vec(), |s| s)))
        .collect();
    let pi = order.as_slice();
    let mut out = vec![Vec::new(); d];
    let results: Vec<Result<(usize, Vec<(usize, f64)>)>> = (1..d)
        .into_par_iter()
        .map(|pos| {
            let i = pi[pos];
            let preds = &pi[..pos];
            let cols = 1 + w * preds.len();
            if n <= cols {
                return invalid(format!("{n} samples cannot fit {cols} regression columns for node {i}"));
            }
            let y = DVector::from_iterator(n, z.column(i).iter().copied());
            let design = |skip: Option<usize>| {
                let kept: Vec<usize> = preds.iter().copied().filter(|&p| Some(p) != skip).collect();
                let mut x = DMatrix::from_element(n, 1 + w * kept.len(), 1.0);
                for (g, &p) in kept.iter().enumerate() {
                    x.columns_mut(1 + g * w, w).copy_from(&expanded[p]);
                }
                x
            };
            let rss_full = rss(&design(None), &y);
            let dof = (n - cols) as f64;
            let f_dist = FisherSnedecor::new(w as f64, dof).expect("positive degrees of freedom");
            let pvals = preds
                .iter()
                .map(|&p| {
                    let rss_red = rss(&design(Some(p)), &y);
                    let f = ((rss_red - rss_full).max(0.0) / w as f64) / (rss_full / dof);
                    let pv = if rss_full <= 0.0 { 0.0 } else { f_dist.sf(f) };
                    (p, pv)
                })
                .collect();
            Ok((i, pvals))
        })
        .collect();
    for r in results {
        let (i, p) = r?;
        out[i] = p;
    }
    Ok(out)
}

/// Keeps predecessors with p-value below `alpha`, capped at `max_parents`.
pub fn select_edges(pvalues: &[Vec<(usize, f64)>], alpha: f64, max_parents: Option<usize>) -> Result<Dag> {
    let d = pvalues.len();
    let mut edges = Vec::new();
    for (i, cands) in pvalues.iter().enumerate() {
        let mut keep: Vec<(usize, f64)> = cands.iter().copied().filter(|&(_, p)| p < alpha).collect();
        keep.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        keep.truncate(max_parents.unwrap_or(d));
        edges.extend(keep.into_iter().map(|(j, _)| (j, i)));
    }
    Dag::from_edges(d, &edges)
}

/// Parent selection among the preceding nodes of `order`.
pub fn prune(data: &Dataset, order: &Ordering, cfg: &PruneConfig) -> Result<Dag> {
    cfg.validate()?;
    let pvalues = prune_pvalues(data, order, cfg.basis)?;
    select_edges(&pvalues, cfg.alpha, cfg.max_parents)?.with_labels(data.labels().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{sample_dataset, AnmSpec};
    use ndarray::Array2;

    #[test]
    fn strong_chain_is_recovered() {
        let g = Dag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let spec = AnmSpec {
            noise_scale_range: [0.3, 0.3],
            ..AnmSpec::new(g.clone(), 2)
        };
        let data = sample_dataset(&spec, 1000, 0).unwrap();
        let est = prune(&data, &Ordering::identity(3), &PruneConfig::default()).unwrap();
        assert_eq!(est.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
    }

    #[test]
    fn edges_follow_the_order() {
        let g = Dag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let data = sample_dataset(&AnmSpec::new(g, 4), 500, 1).unwrap();
        let order = Ordering::new(vec![2, 0, 1]).unwrap();
        let est = prune(&data, &order, &PruneConfig::default()).unwrap();
        let pos = order.positions();
        assert!(est.edges().all(|(a, b)| pos[a] < pos[b]));
    }

    #[test]
    fn spline_basis_detects_a_bump() {
        let n = 400;
        let x = Array2::from_shape_fn((n, 2), |(s, c)| {
            let u = -3.0 + 6.0 * s as f64 / n as f64;
            let noise = 0.1 * (((s * 7919) % 97) as f64 / 97.0 - 0.5);
            if c == 0 { u } else { (-u * u).exp() + noise }
        });
        let data = Dataset::new(x, vec!["a".into(), "b".into()]).unwrap();
        let cfg = PruneConfig {
            basis: Basis::Spline { df: 6 },
            ..Default::default()
        };
        assert!(prune(&data, &Ordering::identity(2), &cfg).unwrap().has_edge(0, 1));
    }

    #[test]
    fn max_parents_keeps_the_most_significant() {
        let p = vec![vec![], vec![(0, 1e-9)], vec![(0, 1e-5), (1, 1e-12)]];
        let g = select_edges(&p, 0.001, Some(1)).unwrap();
        assert!(g.has_edge(1, 2) && !g.has_edge(0, 2) && g.has_edge(0, 1));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(PruneConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(PruneConfig { basis: Basis::Spline { df: 2 }, ..Default::default() }.validate().is_err());
        let c: PruneConfig = serde_json::from_str(r#"{"basis":{"kind":"spline","df":5}}"#).unwrap();
        assert_eq!(c.basis, Basis::Spline { df: 5 });
    }
}
