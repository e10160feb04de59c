//! `diffan`: generate data, discover graphs, and run the benchmark sweeps.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffan_core::{AnmSpec, Mechanism, NoiseFamily, Variant};

use commands::{Invocation, Manifest};
use config::{read_json, BenchConfig, DiscoverConfig, GraphKind};

#[derive(Parser)]
#[command(name = "diffan", version, about = "Causal discovery by topological ordering with diffusion-trained scores")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from an additive noise model.
    Generate(GenerateArgs),
    /// Train, order and prune on a CSV dataset.
    Discover(DiscoverArgs),
    /// Hessian diagonals of a trained score on a two-variable chain.
    Demo2var(Demo2varArgs),
    /// Sweep variants, sizes and seeds; writes a long-form CSV.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rerun the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON `AnmSpec` (graph, mechanism and noise with explicit seeds).
    /// Without it, a random graph is drawn from the flags below.
    #[arg(long, conflicts_with_all = ["graph", "d"])]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "er")]
    graph: GraphKind,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    edges_per_node: f64,
    #[arg(long, default_value_t = 0)]
    graph_seed: u64,
    #[arg(long, default_value_t = 0)]
    mech_seed: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    /// Noise scales are drawn uniformly from `[lo, hi]`.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [1.0, 1.0])]
    noise_scale: Vec<f64>,
    /// Use linear mechanisms with weights in `[lo, hi]` instead of GP draws.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    linear: Option<Vec<f64>>,
    #[arg(long)]
    n: usize,
    /// Seed of the sampled noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NoiseArg {
    Gaussian,
    Exponential,
    Laplace,
}

#[derive(Args)]
struct DiscoverArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON config with optional `schedule`, `architecture`, `train`,
    /// `order` and `prune` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// True adjacency CSV; enables `metrics.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Ordering batch size.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse `checkpoint.bin` in the output directory when present.
    #[arg(long)]
    skip_train_if_checkpoint: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Residue,
    Masking,
    Greedy,
}

#[derive(Args)]
struct Demo2varArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Diffusion step at which the Hessian is evaluated; defaults to the
    /// middle of the schedule. At t = 0 the noise target is nearly invisible
    /// in the input, so the network's curvature there is least reliable.
    #[arg(long)]
    t: Option<f64>,
    /// Cap on training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn discover_config(path: Option<&PathBuf>) -> Result<DiscoverConfig> {
    path.map_or_else(|| Ok(DiscoverConfig::default()), |p| read_json(p))
}

fn generate_spec(a: &GenerateArgs) -> Result<AnmSpec> {
    if let Some(path) = &a.spec {
        let spec: AnmSpec = read_json(path)?;
        spec.validate()?;
        return Ok(spec);
    }
    let Some(d) = a.d else {
        bail!("generate needs either --spec or --d");
    };
    let spec = AnmSpec {
        graph: a.graph.sample(d, a.edges_per_node, a.graph_seed)?,
        mech_seed: a.mech_seed,
        noise_family: match a.noise {
            NoiseArg::Gaussian => NoiseFamily::Gaussian,
            NoiseArg::Exponential => NoiseFamily::Exponential,
            NoiseArg::Laplace => NoiseFamily::Laplace,
        },
        noise_scale_range: [a.noise_scale[0], a.noise_scale[1]],
        mechanism: match &a.linear {
            Some(w) => Mechanism::Linear { weight_range: [w[0], w[1]] },
            None => Mechanism::default(),
        },
    };
    spec.validate()?;
    Ok(spec)
}

fn invocation(cmd: Command) -> Result<(Invocation, PathBuf)> {
    Ok(match cmd {
        Command::Generate(a) => {
            let spec = generate_spec(&a)?;
            (Invocation::Generate { spec, n: a.n, seed: a.seed }, a.out_dir)
        }
        Command::Discover(a) => {
            let mut config = discover_config(a.config.as_ref())?;
            if let Some(seed) = a.seed {
                config.reseed(seed);
            }
            if let Some(v) = a.variant {
                config.order.variant = match v {
                    VariantArg::Residue => Variant::Residue,
                    VariantArg::Masking => Variant::Masking,
                    VariantArg::Greedy => Variant::Greedy,
                };
            }
            if let Some(k) = a.k {
                config.order.k = k;
            }
            let inv = Invocation::Discover {
                data: a.data,
                truth: a.truth,
                config,
                skip_train_if_checkpoint: a.skip_train_if_checkpoint,
            };
            (inv, a.out_dir)
        }
        Command::Demo2var(a) => {
            let mut config = discover_config(a.config.as_ref())?;
            config.reseed(a.seed);
            if let Some(e) = a.epochs {
                config.train.epochs_max = e;
            }
            let t = a.t.unwrap_or((config.schedule.steps() / 2) as f64);
            (Invocation::Demo2var { seed: a.seed, n: a.n, t, config }, a.out_dir)
        }
        Command::Bench { config, out_dir } => {
            let config = config.map_or_else(|| Ok(BenchConfig::default()), |p| read_json(&p))?;
            (Invocation::Bench { config }, out_dir)
        }
        Command::Replay { manifest, out_dir } => {
            let m: Manifest = read_json(&manifest).context("not a diffan manifest")?;
            (m.invocation, out_dir)
        }
    })
}

/// Numeric failures anywhere in the chain map to exit code 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<diffan_core::Error>().is_some_and(|e| e.is_numeric()));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = invocation(cli.command).and_then(|(inv, out)| commands::run(&inv, &out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
