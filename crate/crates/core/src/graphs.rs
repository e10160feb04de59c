//! DAGs, orderings and random graph generators.
//!
//! A [`Dag`] is stored as a dense row-major adjacency matrix where
//! `adj[i][j] == true` means the edge `i -> j`. Every constructor checks
//! acyclicity, so a `Dag` value is always a valid DAG.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagRepr", into = "DagRepr")]
pub struct Dag {
    d: usize,
    adj: Vec<bool>,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DagRepr {
    labels: Vec<String>,
    adjacency: Vec<Vec<u8>>,
}

impl TryFrom<DagRepr> for Dag {
    type Error = Error;

    fn try_from(r: DagRepr) -> Result<Self> {
        let rows: Vec<Vec<bool>> = r
            .adjacency
            .iter()
            .map(|row| row.iter().map(|&v| v != 0).collect())
            .collect();
        Dag::from_rows(&rows, Some(r.labels))
    }
}

impl From<Dag> for DagRepr {
    fn from(g: Dag) -> Self {
        let adjacency = (0..g.d)
            .map(|i| (0..g.d).map(|j| g.has_edge(i, j) as u8).collect())
            .collect();
        DagRepr {
            labels: g.labels,
            adjacency,
        }
    }
}

/// Default column labels `X0, X1, ...`.
pub fn default_labels(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("X{i}")).collect()
}

impl Dag {
    /// The graph on `d` nodes with no edges.
    pub fn empty(d: usize) -> Self {
        Dag {
            d,
            adj: vec![false; d * d],
            labels: default_labels(d),
        }
    }

    /// Builds a DAG from an edge list, rejecting self-loops and cycles.
    pub fn from_edges(d: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Dag::empty(d);
        for &(i, j) in edges {
            if i >= d || j >= d {
                return invalid(format!("edge {i}->{j} out of range for d={d}"));
            }
            g.adj[i * d + j] = true;
        }
        g.validate()?;
        Ok(g)
    }

    pub fn from_rows(rows: &[Vec<bool>], labels: Option<Vec<String>>) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return invalid("adjacency matrix must be square");
        }
        let labels = labels.unwrap_or_else(|| default_labels(d));
        if labels.len() != d {
            return invalid(format!("{} labels for {d} nodes", labels.len()));
        }
        let g = Dag {
            d,
            adj: rows.iter().flatten().copied().collect(),
            labels,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if (0..self.d).any(|i| self.has_edge(i, i)) {
            return invalid("self-loops are not allowed");
        }
        self.topological_sort().map(|_| ())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.d {
            return invalid(format!("{} labels for {} nodes", labels.len(), self.d));
        }
        self.labels = labels;
        Ok(self)
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.d + j]
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.d).flat_map(move |i| {
            (0..self.d)
                .filter(move |&j| self.has_edge(i, j))
                .map(move |j| (i, j))
        })
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..self.d).filter(|&i| self.has_edge(i, j)).collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.d).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn in_degree(&self, j: usize) -> usize {
        (0..self.d).filter(|&i| self.has_edge(i, j)).count()
    }

    /// Nodes without children.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.d)
            .filter(|&i| (0..self.d).all(|j| !self.has_edge(i, j)))
            .collect()
    }

    /// Descendants of `i`, excluding `i` itself.
    pub fn descendants(&self, i: usize) -> Vec<bool> {
        let mut seen = vec![false; self.d];
        let mut stack = self.children(i);
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                stack.extend(self.children(v));
            }
        }
        seen
    }

    /// Kahn's algorithm, always releasing the smallest available index
    /// first so the result is deterministic.
    pub fn topological_sort(&self) -> Result<Ordering> {
        let d = self.d;
        let mut indeg: Vec<usize> = (0..d).map(|j| self.in_degree(j)).collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..d).filter(|&j| indeg[j] == 0).map(Reverse).collect();
        let mut pi = Vec::with_capacity(d);
        while let Some(Reverse(v)) = ready.pop() {
            pi.push(v);
            for c in 0..d {
                if self.has_edge(v, c) {
                    indeg[c] -= 1;
                    if indeg[c] == 0 {
                        ready.push(Reverse(c));
                    }
                }
            }
        }
        if pi.len() != d {
            return Err(Error::Cycle);
        }
        Ok(Ordering { pi })
    }

    /// True if every edge of the graph goes from an earlier to a later
    /// position of `order`.
    pub fn is_valid_order(&self, order: &Ordering) -> bool {
        if order.len() != self.d {
            return false;
        }
        let pos = order.positions();
        self.edges().all(|(i, j)| pos[i] < pos[j])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.labels)?;
        for i in 0..self.d {
            wr.write_record((0..self.d).map(|j| if self.has_edge(i, j) { "1" } else { "0" }))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let labels: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parsed = rec
                .iter()
                .enumerate()
                .map(|(column, v)| match v.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::NonNumeric {
                        row,
                        column,
                        label: labels.get(column).cloned().unwrap_or_default(),
                        value: other.to_string(),
                    }),
                })
                .collect::<Result<Vec<bool>>>()?;
            rows.push(parsed);
        }
        Dag::from_rows(&rows, Some(labels))
    }
}

/// A permutation of node indices listed root-to-leaf.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ordering {
    pi: Vec<usize>,
}

impl Ordering {
    pub fn new(pi: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; pi.len()];
        for &v in &pi {
            if v >= pi.len() || seen[v] {
                return invalid(format!("{pi:?} is not a permutation"));
            }
            seen[v] = true;
        }
        Ok(Ordering { pi })
    }

    pub fn identity(d: usize) -> Self {
        Ordering {
            pi: (0..d).collect(),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// `positions()[v]` is the index of node `v` in the ordering.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.pi.len()];
        for (p, &v) in self.pi.iter().enumerate() {
            pos[v] = p;
        }
        pos
    }

    pub fn reversed(&self) -> Self {
        Ordering {
            pi: self.pi.iter().rev().copied().collect(),
        }
    }

    pub fn labels<'a>(&self, labels: &'a [String]) -> Vec<&'a str> {
        self.pi.iter().map(|&i| labels[i].as_str()).collect()
    }
}

fn check_density(d: usize, avg_edges_per_node: f64) -> Result<()> {
    if d == 0 {
        return invalid("graph needs at least one node");
    }
    if !(avg_edges_per_node.is_finite() && avg_edges_per_node > 0.0) {
        return invalid("average edges per node must be positive");
    }
    let max_edges = (d * (d - 1)) as f64 / 2.0;
    if d > 1 && avg_edges_per_node * d as f64 > max_edges {
        return invalid(format!(
            "{avg_edges_per_node} edges per node is infeasible for d={d} (at most {max_edges} edges)"
        ));
    }
    Ok(())
}

/// Erdős–Rényi DAG: undirected G(d, p) with `p = 2·avg/(d−1)`, oriented by a
/// uniformly random permutation.
pub fn sample_er(d: usize, avg_edges_per_node: f64, seed: u64) -> Result<Dag> {
    check_density(d, avg_edges_per_node)?;
    let mut g = Dag::empty(d);
    if d == 1 {
        return Ok(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 2.0 * avg_edges_per_node / (d - 1) as f64;
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    // perm[a] < perm[b] orients a -> b
    for a in 0..d {
        for b in (a + 1)..d {
            if rng.random::<f64>() < p {
                let (src, dst) = if perm[a] < perm[b] { (a, b) } else { (b, a) };
                g.adj[src * d + dst] = true;
            }
        }
    }
    Ok(g)
}

/// Scale-free DAG by preferential attachment (`m = round(avg)` links per new
/// node, attachment probability ∝ degree + 1).
///
/// Each arriving node becomes a parent of the nodes it links to, so early
/// hubs accumulate parents. Labels run in reverse arrival order, which makes
/// the label order `0, 1, ..., d-1` a topological order.
pub fn sample_sf(d: usize, avg_edges_per_node: f64, seed: u64) -> Result<Dag> {
    if d == 0 || !(avg_edges_per_node.is_finite() && avg_edges_per_node > 0.0) {
        return invalid("need d >= 1 and a positive edge density");
    }
    let m = (avg_edges_per_node.round() as usize).max(1);
    // attachment caps each node at min(m, arrivals so far) links
    if d > 1 && m > d - 1 {
        return invalid(format!("{m} links per node is infeasible for d={d}"));
    }
    let mut g = Dag::empty(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degree = vec![0usize; d];
    let label = |arrival: usize| d - 1 - arrival;
    for v in 1..d {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m.min(v) {
            let total: usize = (0..v)
                .filter(|u| !targets.contains(u))
                .map(|u| degree[u] + 1)
                .sum();
            let mut r = rng.random_range(0..total);
            for u in (0..v).filter(|u| !targets.contains(u)) {
                let w = degree[u] + 1;
                if r < w {
                    targets.push(u);
                    break;
                }
                r -= w;
            }
        }
        for &u in &targets {
            degree[u] += 1;
            degree[v] += 1;
            g.adj[label(v) * d + label(u)] = true;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn er_single_node_has_no_edges() {
        assert_eq!(sample_er(1, 1.0, 7).unwrap().n_edges(), 0);
    }

    #[test]
    fn er_is_deterministic() {
        assert_eq!(sample_er(20, 1.0, 3).unwrap(), sample_er(20, 1.0, 3).unwrap());
    }

    #[test]
    fn er_mean_edge_count() {
        let total: usize = (0..200).map(|s| sample_er(20, 1.0, s).unwrap().n_edges()).sum();
        let mean = total as f64 / 200.0;
        assert!((17.0..=23.0).contains(&mean), "mean edges {mean}");
    }

    #[test]
    fn er_rejects_infeasible_density() {
        assert!(sample_er(3, 2.0, 0).is_err());
        assert!(sample_sf(3, 3.0, 0).is_err());
        assert!(sample_er(0, 1.0, 0).is_err());
    }

    #[test]
    fn sf_two_nodes_single_edge() {
        for s in 0..5 {
            let g = sample_sf(2, 1.0, s).unwrap();
            assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        }
    }

    #[test]
    fn sf_in_degree_tail_exceeds_er() {
        let max_in = |g: &Dag| (0..g.d()).map(|j| g.in_degree(j)).max().unwrap();
        let (mut sf, mut er) = (0usize, 0usize);
        for s in 0..500 {
            sf += max_in(&sample_sf(50, 1.0, s).unwrap());
            er += max_in(&sample_er(50, 1.0, s).unwrap());
        }
        assert!(sf > er, "sf {sf} vs er {er}");
    }

    #[test]
    fn topological_sort_examples() {
        let chain = Dag::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(chain.topological_sort().unwrap().as_slice(), &[0, 1, 2]);

        let empty = Dag::empty(3);
        assert!(empty.is_valid_order(&empty.topological_sort().unwrap()));

        let diamond = Dag::from_edges(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let o = diamond.topological_sort().unwrap();
        assert_eq!(o.as_slice()[0], 0);
        assert_eq!(o.as_slice()[3], 3);
    }

    #[test]
    fn cycles_and_self_loops_rejected() {
        assert!(matches!(
            Dag::from_edges(3, &[(0, 1), (1, 2), (2, 0)]),
            Err(Error::Cycle)
        ));
        assert!(Dag::from_edges(2, &[(1, 1)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = sample_er(6, 1.0, 11).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("X0,X1,X2,X3,X4,X5\n"));
        assert_eq!(Dag::read_csv(buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn ordering_rejects_non_permutations() {
        assert!(Ordering::new(vec![0, 0, 1]).is_err());
        assert!(Ordering::new(vec![0, 3]).is_err());
        assert!(Ordering::new(vec![2, 0, 1]).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn generated_graphs_sort(d in 1usize..30, seed in 0u64..1000, sf in proptest::bool::ANY) {
            let g = if sf { sample_sf(d, 1.0, seed) } else { sample_er(d, 1.0, seed) };
            if d >= 3 {
                let g = g.unwrap();
                let o = g.topological_sort().unwrap();
                proptest::prop_assert!(g.is_valid_order(&o));
            }
        }
    }
}
