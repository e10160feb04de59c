//! Structural Hamming distance, structural intervention distance and
//! topological order divergence.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graphs::{Dag, Ordering};

fn same_size(a: &Dag, b: &Dag) -> Result<()> {
    if a.d() != b.d() {
        return invalid(format!("graphs have {} and {} nodes", a.d(), b.d()));
    }
    Ok(())
}

/// Missing, extra and reversed edges; a reversal counts once.
pub fn shd(est: &Dag, truth: &Dag) -> Result<usize> {
    same_size(est, truth)?;
    let d = est.d();
    let state = |g: &Dag, i: usize, j: usize| (g.has_edge(i, j), g.has_edge(j, i));
    Ok((0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .filter(|&(i, j)| state(est, i, j) != state(truth, i, j))
        .count())
}

/// `D_top`: true edges `i → j` with `i` placed after `j`.
pub fn order_divergence(order: &Ordering, truth: &Dag) -> Result<usize> {
    if order.len() != truth.d() {
        return invalid(format!("ordering covers {} nodes, graph has {}", order.len(), truth.d()));
    }
    let pos = order.positions();
    Ok(truth.edges().filter(|&(i, j)| pos[i] > pos[j]).count())
}

/// Number of ordered pairs `(i, j)` whose interventional distribution
/// `p(x_j | do(x_i))` is wrong when `est`'s parents of `i` are used as the
/// adjustment set in `truth`.
///
/// With `Z = Pa_est(i)`: if `j ∈ Z` the estimate claims no effect, which is
/// wrong iff `j` descends from `i`. Otherwise `Z` must be a valid adjustment
/// set: it may not contain a descendant of any non-`i` node on a causal path
/// `i → … → j`, and it must d-separate `i` and `j` once the first edges of
/// those causal paths are removed.
pub fn sid(est: &Dag, truth: &Dag) -> Result<usize> {
    same_size(est, truth)?;
    let d = truth.d();
    // Reflexive descendant sets, computed once.
    let desc: Vec<Vec<bool>> = (0..d)
        .map(|i| {
            let mut de = truth.descendants(i);
            de[i] = true;
            de
        })
        .collect();
    let mistakes: usize = (0..d)
        .into_par_iter()
        .map(|i| {
            let mut z = vec![false; d];
            for p in est.parents(i) {
                z[p] = true;
            }
            let anc_z = ancestors_of(truth, &z);
            (0..d)
                .filter(|&j| j != i)
                .filter(|&j| {
                    if z[j] {
                        return desc[i][j];
                    }
                    // Nodes on causal paths from i to j, other than i.
                    let on_path: Vec<usize> = (0..d).filter(|&w| w != i && desc[i][w] && desc[w][j]).collect();
                    let forbidden = on_path.iter().any(|&w| (0..d).any(|v| z[v] && desc[w][v]));
                    if forbidden {
                        return true;
                    }
                    let cut = |a: usize, b: usize| a == i && on_path.contains(&b);
                    d_connected(truth, i, j, &z, &anc_z, cut)
                })
                .count()
        })
        .sum();
    Ok(mistakes)
}

/// Ancestors of the marked set, including the set itself.
fn ancestors_of(g: &Dag, set: &[bool]) -> Vec<bool> {
    let mut anc = set.to_vec();
    let mut stack: Vec<usize> = (0..g.d()).filter(|&v| set[v]).collect();
    while let Some(v) = stack.pop() {
        for p in g.parents(v) {
            if !anc[p] {
                anc[p] = true;
                stack.push(p);
            }
        }
    }
    anc
}

/// Reachability ("Bayes ball") test for an active trail from `x` to `y`
/// given `z`, ignoring edges `a → b` for which `cut(a, b)` holds.
fn d_connected(
    g: &Dag,
    x: usize,
    y: usize,
    z: &[bool],
    anc_z: &[bool],
    cut: impl Fn(usize, usize) -> bool,
) -> bool {
    let d = g.d();
    let edge = |a: usize, b: usize| g.has_edge(a, b) && !cut(a, b);
    // Direction flag: true = arrived from a child (moving up), false = from a parent.
    let mut seen = vec![[false; 2]; d];
    let mut queue = VecDeque::from([(x, true)]);
    while let Some((v, up)) = queue.pop_front() {
        if seen[v][up as usize] {
            continue;
        }
        seen[v][up as usize] = true;
        if v == y {
            return true;
        }
        if up {
            if z[v] {
                continue;
            }
            for p in (0..d).filter(|&p| edge(p, v)) {
                queue.push_back((p, true));
            }
            for c in (0..d).filter(|&c| edge(v, c)) {
                queue.push_back((c, false));
            }
        } else {
            if !z[v] {
                for c in (0..d).filter(|&c| edge(v, c)) {
                    queue.push_back((c, false));
                }
            }
            if anc_z[v] {
                for p in (0..d).filter(|&p| edge(p, v)) {
                    queue.push_back((p, true));
                }
            }
        }
    }
    false
}

/// Metrics written as JSON by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub shd: usize,
    pub sid: usize,
    pub d_top: usize,
    pub runtime_seconds: f64,
}

impl MetricsReport {
    pub fn compute(est: &Dag, order: &Ordering, truth: &Dag, runtime_seconds: f64) -> Result<Self> {
        Ok(MetricsReport {
            shd: shd(est, truth)?,
            sid: sid(est, truth)?,
            d_top: order_divergence(order, truth)?,
            runtime_seconds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::sample_er;

    fn chain(d: usize) -> Dag {
        let e: Vec<_> = (1..d).map(|i| (i - 1, i)).collect();
        Dag::from_edges(d, &e).unwrap()
    }

    #[test]
    fn shd_examples() {
        let g = chain(3);
        assert_eq!(shd(&g, &g).unwrap(), 0);
        let rev = Dag::from_edges(3, &[(1, 0), (1, 2)]).unwrap();
        assert_eq!(shd(&rev, &g).unwrap(), 1);
        let truth = sample_er(20, 1.0, 4).unwrap();
        assert_eq!(shd(&Dag::empty(20), &truth).unwrap(), truth.n_edges());
        assert!(shd(&Dag::empty(2), &g).is_err());
    }

    #[test]
    fn sid_examples() {
        let g = chain(3);
        assert_eq!(sid(&g, &g).unwrap(), 0);
        let t = Dag::from_edges(2, &[(0, 1)]).unwrap();
        let r = Dag::from_edges(2, &[(1, 0)]).unwrap();
        assert_eq!(sid(&r, &t).unwrap(), 2);
        // Empty estimate on a confounded pair: adjusting for nothing is wrong both ways.
        let fork = Dag::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let est = Dag::from_edges(3, &[(0, 1)]).unwrap();
        assert_eq!(sid(&est, &fork).unwrap(), 2);
    }

    #[test]
    fn order_divergence_examples() {
        let g = chain(3);
        assert_eq!(order_divergence(&Ordering::identity(3), &g).unwrap(), 0);
        assert_eq!(order_divergence(&Ordering::new(vec![2, 1, 0]).unwrap(), &g).unwrap(), 2);
        assert_eq!(order_divergence(&g.topological_sort().unwrap(), &g).unwrap(), 0);
    }
}
