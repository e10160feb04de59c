//! Leaf-by-leaf topological ordering: the residue, masking and greedy variants.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{train, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::graphs::Ordering;
use crate::neural::{Architecture, ScoreNet};
use crate::scm::Dataset;
use crate::scorefield::{column_variances, ScoreField, ScoreModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Removed leaves are accounted for by the deciduous residue.
    #[default]
    Residue,
    /// Removed leaf columns are zeroed and nothing else.
    Masking,
    /// The network is retrained on the remaining columns after every removal.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderConfig {
    pub variant: Variant,
    /// Ordering batch size.
    pub k: usize,
    /// Number of diffusion times voting on each leaf.
    pub n_votes: usize,
    pub seed: u64,
    /// Draw a fresh batch for every vote. When off, one batch per iteration
    /// is shared by all votes, so they only average over t and not over
    /// batch noise.
    pub resample_per_vote: bool,
    /// Zero removed columns of the batch (always on for masking).
    pub mask_removed: bool,
    /// Retraining settings for the greedy variant.
    pub greedy_train: TrainConfig,
}

impl Default for OrderConfig {
    fn default() -> Self {
        OrderConfig {
            variant: Variant::Residue,
            k: 64,
            n_votes: 10,
            seed: 0,
            resample_per_vote: true,
            mask_removed: true,
            greedy_train: TrainConfig::default(),
        }
    }
}

impl OrderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return invalid(format!("ordering batch size k = {} must be at least 2", self.k));
        }
        if self.n_votes == 0 {
            return invalid("n_votes must be at least 1");
        }
        if self.variant == Variant::Greedy {
            self.greedy_train.validate()?;
        }
        Ok(())
    }

    /// Diffusion steps `⌊v·T/n_votes⌋` for `v = 0..n_votes`.
    pub fn vote_times(&self, steps: usize) -> Vec<f64> {
        (0..self.n_votes).map(|v| (v * steps / self.n_votes) as f64).collect()
    }
}

/// Mutable state of one ordering run.
#[derive(Clone, Debug)]
pub struct OrderingState {
    /// Leaves found so far, first-found first.
    pub pi: Vec<usize>,
    /// `k × d`; column `j` is zero iff `j` is in `pi`.
    pub mask: Array2<f64>,
    /// Current batch (already masked).
    pub batch: Array2<f64>,
    pub k: usize,
}

impl OrderingState {
    pub fn new(k: usize, d: usize) -> Self {
        OrderingState {
            pi: Vec::new(),
            mask: Array2::ones((k, d)),
            batch: Array2::zeros((k, d)),
            k,
        }
    }

    /// Draws `k` rows of `z` without replacement and applies the mask.
    pub fn resample(&mut self, z: &Array2<f64>, rng: &mut ChaCha8Rng, apply_mask: bool) {
        let idx = sample(rng, z.nrows(), self.k).into_vec();
        self.batch = z.select(Axis(0), &idx);
        if apply_mask {
            self.batch *= &self.mask;
        }
    }

    pub fn push_leaf(&mut self, leaf: usize) {
        self.pi.push(leaf);
        self.mask.column_mut(leaf).fill(0.0);
    }
}

/// Outcome of one leaf search at a single diffusion time.
#[derive(Clone, Debug, PartialEq)]
pub struct Vote {
    pub t: f64,
    pub leaf: usize,
    /// Hessian-diagonal variance per active node, in `field.active()` order.
    pub variances: Vec<f64>,
}

/// The active node whose Hessian diagonal varies least over the batch.
/// Ties go to the smallest node index.
pub fn find_leaf(field: &ScoreField<'_>, b: &Array2<f64>, t: f64) -> Result<Vote> {
    let active = field.active();
    if active.is_empty() {
        return invalid("no active nodes left");
    }
    let variances = if active.len() == 1 {
        vec![0.0]
    } else {
        column_variances(&field.hessian_diag(b, t)?)
    };
    let mut best = 0;
    for c in 1..active.len() {
        let (v, w) = (variances[c], variances[best]);
        if v < w || (v == w && active[c] < active[best]) || w.is_nan() {
            best = c;
        }
    }
    Ok(Vote {
        t,
        leaf: active[best],
        variances,
    })
}

/// Modal leaf; ties go to the lowest summed variance, then the lowest index.
fn majority(active: &[usize], votes: &[Vote]) -> usize {
    let mut count = vec![0usize; active.len()];
    let mut total = vec![0.0; active.len()];
    for v in votes {
        count[active.iter().position(|&a| a == v.leaf).expect("vote for active node")] += 1;
        for (s, x) in total.iter_mut().zip(&v.variances) {
            *s += x;
        }
    }
    let mut best = 0;
    for c in 1..active.len() {
        let better = count[c] > count[best]
            || (count[c] == count[best]
                && (total[c] < total[best] || (total[c] == total[best] && active[c] < active[best])));
        if better {
            best = c;
        }
    }
    active[best]
}

/// One row of the long-form diagnostics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub iteration: usize,
    pub leaf: usize,
    pub vote: usize,
    pub t: f64,
    pub node: usize,
    pub variance: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct OrderResult {
    /// Root first.
    pub ordering: Ordering,
    /// Leaves in the order they were found.
    pub leaf_first: Vec<usize>,
    pub diagnostics: Vec<DiagnosticRow>,
    /// Wall time of the ordering, excluding the initial training.
    pub seconds: f64,
}

impl OrderResult {
    pub fn write_diagnostics<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for row in &self.diagnostics {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    }

    /// The ordering as a JSON list of labels.
    pub fn write_json<W: Write>(&self, w: W, labels: &[String]) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.ordering.labels(labels))?;
        Ok(())
    }
}

/// Leaf-first list to a root-first [`Ordering`].
pub fn reverse_to_root_order(pi_leaf_first: &[usize]) -> Result<Ordering> {
    Ordering::new(pi_leaf_first.iter().rev().copied().collect())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn record(diag: &mut Vec<DiagnosticRow>, it: usize, leaf: usize, active: &[usize], votes: &[Vote], secs: f64) {
    for (v, vote) in votes.iter().enumerate() {
        for (&node, &variance) in active.iter().zip(&vote.variances) {
            diag.push(DiagnosticRow {
                iteration: it,
                leaf,
                vote: v,
                t: vote.t,
                node,
                variance,
                seconds: secs,
            });
        }
    }
}

/// Orders the columns of standardized data `z` using a fixed score model.
///
/// `steps` is the number of diffusion steps `T` the vote grid spans. The
/// greedy variant needs retraining and goes through [`order`] instead.
pub fn order_with_model(model: &dyn ScoreModel, z: &Array2<f64>, steps: usize, cfg: &OrderConfig) -> Result<OrderResult> {
    cfg.validate()?;
    let d = model.dim();
    if z.ncols() != d {
        return invalid(format!("data has {} columns, score has {d}", z.ncols()));
    }
    if cfg.variant == Variant::Greedy {
        return invalid("the greedy variant needs training data; use `order`");
    }
    let started = Instant::now();
    let k = cfg.k.min(z.nrows());
    let residue = cfg.variant == Variant::Residue;
    let apply_mask = cfg.mask_removed || cfg.variant == Variant::Masking;
    let times = cfg.vote_times(steps);
    let mut field = ScoreField::new(model, residue);
    let mut state = OrderingState::new(k, d);
    let mut diagnostics = Vec::new();
    for it in 0..d {
        let tic = Instant::now();
        let active = field.active().to_vec();
        let votes: Vec<Vote> = if active.len() == 1 {
            vec![Vote {
                t: times[0],
                leaf: active[0],
                variances: vec![0.0],
            }]
        } else if cfg.resample_per_vote {
            let batches: Vec<Array2<f64>> = (0..times.len())
                .map(|v| {
                    let mut rng = rng_for(cfg.seed, (it * times.len() + v) as u64);
                    state.resample(z, &mut rng, apply_mask);
                    state.batch.clone()
                })
                .collect();
            times
                .par_iter()
                .zip(&batches)
                .map(|(&t, b)| find_leaf(&field, b, t))
                .collect::<Result<_>>()?
        } else {
            state.resample(z, &mut rng_for(cfg.seed, it as u64), apply_mask);
            times
                .par_iter()
                .map(|&t| find_leaf(&field, &state.batch, t))
                .collect::<Result<_>>()?
        };
        let leaf = majority(&active, &votes);
        log::debug!("iteration {it}: leaf {leaf}");
        record(&mut diagnostics, it, leaf, &active, &votes, tic.elapsed().as_secs_f64());
        field.remove(leaf)?;
        state.push_leaf(leaf);
    }
    Ok(OrderResult {
        ordering: reverse_to_root_order(&state.pi)?,
        leaf_first: state.pi,
        diagnostics,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Orders `data` with a trained net. The net's standardizer is applied first.
pub fn order(net: &ScoreNet, data: &Dataset, cfg: &OrderConfig) -> Result<OrderResult> {
    if data.d() != net.d() {
        return invalid(format!("data has {} columns, net expects {}", data.d(), net.d()));
    }
    let z = net.standardizer.apply(data.x());
    match cfg.variant {
        Variant::Greedy => order_greedy(net, data, &z, cfg),
        _ => order_with_model(net, &z, net.schedule.steps(), cfg),
    }
}

/// A score model over the remaining columns and the data it should see.
pub struct Refit<'a> {
    pub model: Box<dyn ScoreModel + 'a>,
    /// Rows of the remaining columns, transformed the way `model` expects.
    pub z: Array2<f64>,
    /// Diffusion steps spanned by the vote grid.
    pub steps: usize,
}

/// Ordering that asks `refit(iteration, active)` for a fresh score of the
/// remaining columns before every leaf search. No residue or masking is
/// applied. Any failure aborts with the leaves found so far attached.
pub fn order_with_refit<'a>(
    d: usize,
    cfg: &OrderConfig,
    mut refit: impl FnMut(usize, &[usize]) -> Result<Refit<'a>>,
) -> Result<OrderResult> {
    cfg.validate()?;
    let started = Instant::now();
    let mut active: Vec<usize> = (0..d).collect();
    let mut pi = Vec::new();
    let mut diagnostics = Vec::new();
    for it in 0..d {
        let tic = Instant::now();
        let abort = |pi: &Vec<usize>, e: Error| Error::GreedyAborted {
            partial: pi.clone(),
            source: Box::new(e),
        };
        let (leaf, votes) = if active.len() == 1 {
            (active[0], Vec::new())
        } else {
            let fit = refit(it, &active).map_err(|e| abort(&pi, e))?;
            if fit.model.dim() != active.len() || fit.z.ncols() != active.len() {
                return Err(abort(&pi, Error::Invalid("refit returned the wrong dimension".into())));
            }
            let field = ScoreField::new(fit.model.as_ref(), false);
            let mut state = OrderingState::new(cfg.k.min(fit.z.nrows()), active.len());
            state.resample(&fit.z, &mut rng_for(cfg.seed, it as u64), false);
            let votes: Vec<Vote> = cfg
                .vote_times(fit.steps)
                .par_iter()
                .map(|&t| find_leaf(&field, &state.batch, t))
                .collect::<Result<_>>()
                .map_err(|e| abort(&pi, e))?;
            let local: Vec<usize> = (0..active.len()).collect();
            (active[majority(&local, &votes)], votes)
        };
        record(&mut diagnostics, it, leaf, &active, &votes, tic.elapsed().as_secs_f64());
        active.retain(|&a| a != leaf);
        pi.push(leaf);
    }
    Ok(OrderResult {
        ordering: reverse_to_root_order(&pi)?,
        leaf_first: pi,
        diagnostics,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Retrains on the remaining columns before every leaf search. The given
/// net serves the first iteration.
fn order_greedy(net: &ScoreNet, data: &Dataset, z: &Array2<f64>, cfg: &OrderConfig) -> Result<OrderResult> {
    let steps = net.schedule.steps();
    order_with_refit(net.d(), cfg, |it, active| {
        if it == 0 {
            return Ok(Refit {
                model: Box::new(net),
                z: z.clone(),
                steps,
            });
        }
        let arch = Architecture {
            d: active.len(),
            ..net.arch.clone()
        };
        let fresh = ScoreNet::new(arch, net.schedule.clone(), cfg.seed.wrapping_add(it as u64))?;
        let train_cfg = TrainConfig {
            seed: cfg.greedy_train.seed.wrapping_add(it as u64),
            ..cfg.greedy_train.clone()
        };
        let sub = data.select_columns(active);
        let (fitted, _) = train(fresh, &sub, &net.schedule, &train_cfg)?;
        Ok(Refit {
            z: fitted.standardizer.apply(sub.x()),
            model: Box::new(fitted),
            steps,
        })
    })
}
