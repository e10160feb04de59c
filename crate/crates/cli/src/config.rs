use std::path::Path;

use anyhow::{ensure, Context, Result};
use diffan_core::neural::Architecture;
use diffan_core::Variant;
use diffan_core::{
    sample_er, sample_sf, AnmSpec, Dag, Mechanism, NoiseFamily, NoiseSchedule, OrderConfig, PruneConfig, TrainConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Widths of the score network; `None` means the size-dependent default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub small: Option<usize>,
    pub big: Option<usize>,
    pub dropout: Option<f64>,
}

impl ArchitectureConfig {
    pub fn resolve(&self, d: usize) -> Architecture {
        let base = Architecture::for_dim(d);
        Architecture {
            small: self.small.unwrap_or(base.small),
            big: self.big.unwrap_or(base.big),
            dropout: self.dropout.unwrap_or(base.dropout),
            ..base
        }
    }
}

/// Everything `discover` needs besides the data, one section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverConfig {
    pub schedule: NoiseSchedule,
    pub architecture: ArchitectureConfig,
    /// Seed of the weight initialization.
    pub net_seed: u64,
    pub train: TrainConfig,
    pub order: OrderConfig,
    pub prune: PruneConfig,
}

impl DiscoverConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.order.validate()?;
        self.prune.validate()?;
        Ok(())
    }

    /// Points every seed at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.net_seed = seed;
        self.train.seed = seed;
        self.order.seed = seed;
        self.order.greedy_train.seed = seed;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Er,
    Sf,
}

impl GraphKind {
    pub fn sample(self, d: usize, edges_per_node: f64, seed: u64) -> Result<Dag> {
        Ok(match self {
            GraphKind::Er => sample_er(d, edges_per_node, seed)?,
            GraphKind::Sf => sample_sf(d, edges_per_node, seed)?,
        })
    }
}

/// Random SCM family used by `bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub d: Vec<usize>,
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    /// Each seed drives the graph, mechanisms, data, network and ordering.
    pub seeds: Vec<u64>,
    pub graph: GraphKind,
    pub edges_per_node: f64,
    pub noise_family: NoiseFamily,
    pub noise_scale_range: [f64; 2],
    pub mechanism: Mechanism,
    pub schedule: NoiseSchedule,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub order: OrderConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: vec![Variant::Masking],
            d: vec![10],
            n: vec![1000],
            k: vec![64],
            seeds: (0..5).collect(),
            graph: GraphKind::Er,
            edges_per_node: 1.0,
            noise_family: NoiseFamily::Gaussian,
            noise_scale_range: [1.0, 1.0],
            mechanism: Mechanism::default(),
            schedule: NoiseSchedule::default(),
            architecture: ArchitectureConfig::default(),
            train: TrainConfig::default(),
            order: OrderConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("variants", self.variants.is_empty()),
            ("d", self.d.is_empty()),
            ("n", self.n.is_empty()),
            ("k", self.k.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            ensure!(!empty, "bench config: `{name}` must not be empty");
        }
        self.train.validate()?;
        self.order.validate()?;
        Ok(())
    }

    pub fn spec(&self, d: usize, seed: u64) -> Result<AnmSpec> {
        let spec = AnmSpec {
            graph: self.graph.sample(d, self.edges_per_node, seed)?,
            mech_seed: seed,
            noise_family: self.noise_family,
            noise_scale_range: self.noise_scale_range,
            mechanism: self.mechanism.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}
