//! Synthetic additive-noise models `x_i = f_i(Pa(x_i)) + ε_i`.

mod gp;

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graphs::Dag;
use crate::neural::Real;

pub use gp::{gp_draw, GpFunction, EXACT_MAX, RFF_FEATURES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// `s·(Exp(1) − 1)`, centered.
    Exponential,
    /// Laplace with scale parameter `b = s`.
    Laplace,
}

impl NoiseFamily {
    fn sample(self, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            NoiseFamily::Gaussian => scale * rng.sample::<f64, _>(StandardNormal),
            NoiseFamily::Exponential => scale * (rng.sample::<f64, _>(Exp1) - 1.0),
            NoiseFamily::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

/// How each non-root node's function is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    GpRbf { bandwidth: f64 },
    /// Weights uniform in `weight_range` with a random sign.
    Linear { weight_range: [f64; 2] },
}

impl Default for Mechanism {
    fn default() -> Self {
        Mechanism::GpRbf { bandwidth: 1.0 }
    }
}

/// Everything needed to generate a dataset, with explicit seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnmSpec {
    pub graph: Dag,
    pub mech_seed: u64,
    pub noise_family: NoiseFamily,
    pub noise_scale_range: [f64; 2],
    pub mechanism: Mechanism,
}

impl AnmSpec {
    /// Gaussian noise with unit scale and bandwidth-one GP mechanisms.
    pub fn new(graph: Dag, mech_seed: u64) -> Self {
        AnmSpec {
            graph,
            mech_seed,
            noise_family: NoiseFamily::Gaussian,
            noise_scale_range: [1.0, 1.0],
            mechanism: Mechanism::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.noise_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return invalid(format!("noise scale range [{lo}, {hi}] must satisfy 0 < lo <= hi"));
        }
        match self.mechanism {
            Mechanism::GpRbf { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                invalid(format!("bandwidth {bandwidth} must be positive"))
            }
            Mechanism::Linear { weight_range: [a, b] } if !(a >= 0.0 && a <= b && b.is_finite()) => {
                invalid(format!("weight range [{a}, {b}] must satisfy 0 <= lo <= hi"))
            }
            _ => Ok(()),
        }
    }
}

/// A realized node function. Inputs are the node's parents in increasing index order.
#[derive(Clone, Debug)]
pub enum NodeFunction {
    Gp(GpFunction),
    Linear(Vec<f64>),
}

impl NodeFunction {
    pub fn eval<S: Real<Lane = f64>>(&self, u: &[S]) -> S {
        match self {
            NodeFunction::Gp(f) => f.eval(u),
            NodeFunction::Linear(w) => w.iter().zip(u).fold(S::zero(), |acc, (&wi, &ui)| acc + ui.scale(wi)),
        }
    }
}

/// An ANM with every random choice fixed; the oracle's view of the truth.
#[derive(Clone, Debug)]
pub struct Anm {
    pub graph: Dag,
    pub noise_family: NoiseFamily,
    pub scales: Vec<f64>,
    /// `None` for roots.
    pub functions: Vec<Option<NodeFunction>>,
}

impl Anm {
    /// `f_i` evaluated at a full sample row (0 for roots).
    pub fn mechanism<S: Real<Lane = f64>>(&self, i: usize, x: &[S]) -> S {
        match &self.functions[i] {
            None => S::zero(),
            Some(f) => {
                let u: Vec<S> = self.graph.parents(i).iter().map(|&p| x[p]).collect();
                f.eval(&u)
            }
        }
    }

    /// The marginal ANM over `keep` (ascending), valid when every dropped
    /// node is a sink of the kept subgraph. Dropping sinks leaves the other
    /// factors of the density untouched.
    pub fn restrict(&self, keep: &[usize]) -> Result<Anm> {
        let d = self.graph.d();
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.last().is_some_and(|&k| k >= d) {
            return invalid("kept nodes must be ascending and in range");
        }
        let mut pos = vec![None; d];
        for (new, &old) in keep.iter().enumerate() {
            pos[old] = Some(new);
        }
        let mut edges = Vec::new();
        for (a, b) in self.graph.edges() {
            match (pos[a], pos[b]) {
                (Some(na), Some(nb)) => edges.push((na, nb)),
                (None, Some(_)) => return invalid(format!("dropped node {a} has kept child {b}")),
                _ => {}
            }
        }
        let labels = keep.iter().map(|&k| self.graph.labels()[k].clone()).collect();
        Ok(Anm {
            graph: Dag::from_edges(keep.len(), &edges)?.with_labels(labels)?,
            noise_family: self.noise_family,
            scales: keep.iter().map(|&k| self.scales[k]).collect(),
            functions: keep.iter().map(|&k| self.functions[k].clone()).collect(),
        })
    }
}

/// `n × d` observations with column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    labels: Vec<String>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if x.nrows() == 0 {
            return invalid("dataset needs at least one row");
        }
        if labels.len() != x.ncols() {
            return invalid(format!("{} labels for {} columns", labels.len(), x.ncols()));
        }
        if let Some(((row, column), &v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonNumeric {
                row,
                column,
                label: labels[column].clone(),
                value: v.to_string(),
            });
        }
        Ok(Dataset { x, labels })
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Sub-dataset of the given columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(1), cols),
            labels: cols.iter().map(|&c| self.labels[c].clone()).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.labels)?;
        for row in self.x.rows() {
            wr.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a CSV with a header row. Any non-numeric cell is rejected with
    /// its (0-based) data row and column.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let labels: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        let d = labels.len();
        let mut values = Vec::new();
        let mut n = 0;
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != d {
                return invalid(format!("row {row} has {} fields, header has {d}", rec.len()));
            }
            for (column, field) in rec.iter().enumerate() {
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ => {
                        return Err(Error::NonNumeric {
                            row,
                            column,
                            label: labels[column].clone(),
                            value: field.to_owned(),
                        })
                    }
                }
            }
            n += 1;
        }
        let x = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Invalid(e.to_string()))?;
        Dataset::new(x, labels)
    }
}

/// Samples `n` rows and returns the realized model alongside the data.
///
/// Mechanisms and noise scales depend only on `mech_seed` (and, for exact GP
/// draws, on the parent values); noise depends only on `seed`.
pub fn sample_anm(spec: &AnmSpec, n: usize, seed: u64) -> Result<(Dataset, Anm)> {
    spec.validate()?;
    if n == 0 {
        return invalid("n must be at least 1");
    }
    let g = &spec.graph;
    let d = g.d();
    let order = g.topological_sort()?;
    let [lo, hi] = spec.noise_scale_range;
    let mut scale_rng = ChaCha8Rng::seed_from_u64(spec.mech_seed);
    let scales: Vec<f64> = if lo == hi {
        vec![lo; d]
    } else {
        let u = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Invalid(e.to_string()))?;
        (0..d).map(|_| u.sample(&mut scale_rng)).collect()
    };

    let mut x = Array2::zeros((n, d));
    let mut functions = vec![None; d];
    for &i in order.as_slice() {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(i as u64);
        let noise = Array1::from_shape_simple_fn(n, || spec.noise_family.sample(scales[i], &mut noise_rng));
        let parents = g.parents(i);
        let signal = if parents.is_empty() {
            Array1::zeros(n)
        } else {
            let mut mech_rng = ChaCha8Rng::seed_from_u64(spec.mech_seed);
            mech_rng.set_stream(i as u64 + 1);
            let u = x.select(Axis(1), &parents);
            let f = match spec.mechanism {
                Mechanism::GpRbf { bandwidth } => NodeFunction::Gp(GpFunction::draw(&u, bandwidth, &mut mech_rng)?),
                Mechanism::Linear { weight_range: [a, b] } => NodeFunction::Linear(
                    parents
                        .iter()
                        .map(|_| {
                            let w = a + (b - a) * mech_rng.random::<f64>();
                            if mech_rng.random::<bool>() {
                                w
                            } else {
                                -w
                            }
                        })
                        .collect(),
                ),
            };
            let values = match &f {
                NodeFunction::Gp(gp) => gp.eval_rows(&u),
                NodeFunction::Linear(w) => u.dot(&Array1::from(w.clone())),
            };
            functions[i] = Some(f);
            values
        };
        x.column_mut(i).assign(&(signal + noise));
    }
    let data = Dataset::new(x, g.labels().to_vec())?;
    let anm = Anm {
        graph: g.clone(),
        noise_family: spec.noise_family,
        scales,
        functions,
    };
    Ok((data, anm))
}

pub fn sample_dataset(spec: &AnmSpec, n: usize, seed: u64) -> Result<Dataset> {
    sample_anm(spec, n, seed).map(|(data, _)| data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{sample_er, Dag};

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn roots_are_standard_normal() {
        let spec = AnmSpec::new(Dag::empty(3), 1);
        let data = sample_dataset(&spec, 10_000, 2).unwrap();
        for col in data.x().axis_iter(Axis(1)) {
            let mean = col.mean().unwrap();
            let var = col.var(0.0);
            assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.15, "mean {mean} var {var}");
        }
    }

    #[test]
    fn chain_children_correlate_with_parents() {
        let g = Dag::from_edges(2, &[(0, 1)]).unwrap();
        let hits = (0..50)
            .filter(|&m| {
                let data = sample_dataset(&AnmSpec::new(g.clone(), m), 1000, 7).unwrap();
                let x = data.x();
                corr(&x.column(0).to_vec(), &x.column(1).to_vec()).abs() > 0.05
            })
            .count();
        assert!(hits >= 45, "{hits}/50");
    }

    #[test]
    fn deterministic_given_seeds() {
        let g = sample_er(6, 1.0, 3).unwrap();
        let spec = AnmSpec {
            noise_family: NoiseFamily::Laplace,
            noise_scale_range: [0.4, 0.8],
            ..AnmSpec::new(g, 11)
        };
        let a = sample_dataset(&spec, 300, 5).unwrap();
        let b = sample_dataset(&spec, 300, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&spec, 300, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recovered_noise_is_uncorrelated_with_parents() {
        let g = Dag::from_edges(3, &[(0, 2), (1, 2)]).unwrap();
        let (data, anm) = sample_anm(&AnmSpec::new(g, 4), 10_000, 8).unwrap();
        let x = data.x();
        let eps: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r[2] - anm.mechanism(2, r.as_slice().unwrap()))
            .collect();
        for p in [0, 1] {
            assert!(corr(&eps, &x.column(p).to_vec()).abs() < 0.05);
        }
    }

    #[test]
    fn exponential_and_laplace_are_centered() {
        for fam in [NoiseFamily::Exponential, NoiseFamily::Laplace] {
            let spec = AnmSpec {
                noise_family: fam,
                ..AnmSpec::new(Dag::empty(1), 0)
            };
            let data = sample_dataset(&spec, 20_000, 1).unwrap();
            let col = data.x().column(0);
            assert!(col.mean().unwrap().abs() < 0.05);
            let var = col.var(0.0);
            let expected = if fam == NoiseFamily::Laplace { 2.0 } else { 1.0 };
            assert!((var - expected).abs() < 0.1 * expected, "{fam:?} var {var}");
        }
    }

    #[test]
    fn scales_drawn_from_range() {
        let spec = AnmSpec {
            noise_scale_range: [0.4, 0.8],
            ..AnmSpec::new(Dag::empty(5), 3)
        };
        let (_, anm) = sample_anm(&spec, 10, 0).unwrap();
        assert!(anm.scales.iter().all(|&s| (0.4..=0.8).contains(&s)));
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = AnmSpec {
            noise_scale_range: [0.8, 0.4],
            ..AnmSpec::new(Dag::empty(2), 0)
        };
        assert!(sample_dataset(&spec, 10, 0).is_err());
        assert!(sample_dataset(&AnmSpec::new(Dag::empty(2), 0), 0, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_rejection() {
        let spec = AnmSpec::new(Dag::from_edges(2, &[(0, 1)]).unwrap(), 0);
        let data = sample_dataset(&spec, 20, 0).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), data);

        let bad = "a,b\n1.0,2.0\n3.0,oops\n";
        match Dataset::read_csv(bad.as_bytes()) {
            Err(Error::NonNumeric { row, column, label, .. }) => {
                assert_eq!((row, column, label.as_str()), (1, 1, "b"));
            }
            other => panic!("expected NonNumeric, got {other:?}"),
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = AnmSpec::new(sample_er(4, 1.0, 0).unwrap(), 5);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<AnmSpec>(&json).unwrap(), spec);
    }
}
