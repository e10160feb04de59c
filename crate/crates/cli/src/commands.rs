use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use diffan_core::diffusion::RunManifest;
use diffan_core::neural::{load_checkpoint, save_checkpoint};
use diffan_core::{
    order, order_divergence, prune, sample_dataset, train, AnmSpec, Dag, Dataset, MetricsReport, NoiseSchedule,
    OrderConfig, ScoreField, ScoreNet, TrainConfig, Variant,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ArchitectureConfig, BenchConfig, DiscoverConfig};

/// A fully resolved command: replaying it reproduces the run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Generate {
        spec: AnmSpec,
        n: usize,
        seed: u64,
    },
    Discover {
        data: PathBuf,
        truth: Option<PathBuf>,
        config: DiscoverConfig,
        skip_train_if_checkpoint: bool,
    },
    Demo2var {
        seed: u64,
        n: usize,
        t: f64,
        config: DiscoverConfig,
    },
    Bench {
        config: BenchConfig,
    },
}

/// Written as `manifest.json` by every command.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub invocation: Invocation,
    pub outputs: Vec<String>,
    pub seconds: f64,
}

pub fn run(inv: &Invocation, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let started = Instant::now();
    let outputs = match inv {
        Invocation::Generate { spec, n, seed } => generate(spec, *n, *seed, out_dir)?,
        Invocation::Discover {
            data,
            truth,
            config,
            skip_train_if_checkpoint,
        } => discover(data, truth.as_deref(), config, *skip_train_if_checkpoint, out_dir)?,
        Invocation::Demo2var { seed, n, t, config } => demo2var(*seed, *n, *t, config, out_dir)?,
        Invocation::Bench { config } => bench(config, out_dir)?,
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        invocation: inv.clone(),
        outputs,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_csv(f).with_context(|| format!("reading {}", path.display()))
}

fn generate(spec: &AnmSpec, n: usize, seed: u64, out: &Path) -> Result<Vec<String>> {
    let data = sample_dataset(spec, n, seed)?;
    data.write_csv(create(&out.join("data.csv"))?)?;
    spec.graph.write_csv(create(&out.join("truth.csv"))?)?;
    write_json(&out.join("spec.json"), spec)?;
    info!("generated {n} rows over {} nodes", spec.graph.d());
    Ok(vec!["data.csv".into(), "truth.csv".into(), "spec.json".into()])
}

fn fresh_net(arch: &ArchitectureConfig, schedule: &NoiseSchedule, seed: u64, d: usize) -> Result<ScoreNet> {
    Ok(ScoreNet::new(arch.resolve(d), schedule.clone(), seed)?)
}

/// Trains a net, writing the checkpoint and its training manifest.
fn fit(data: &Dataset, cfg: &DiscoverConfig, out: &Path) -> Result<ScoreNet> {
    let net = fresh_net(&cfg.architecture, &cfg.schedule, cfg.net_seed, data.d())?;
    let (net, history) = train(net, data, &cfg.schedule, &cfg.train)?;
    info!(
        "trained {} epochs in {:.1}s, best validation loss {:.4}",
        history.train.len(),
        history.seconds,
        history.val[history.best_epoch]
    );
    save_checkpoint(&net, out.join("checkpoint.bin"))?;
    write_json(&out.join("train_manifest.json"), &RunManifest::new(&net, &cfg.train, &history))?;
    Ok(net)
}

fn discover(
    data_path: &Path,
    truth_path: Option<&Path>,
    cfg: &DiscoverConfig,
    skip_train: bool,
    out: &Path,
) -> Result<Vec<String>> {
    cfg.validate()?;
    let started = Instant::now();
    let data = read_dataset(data_path)?;
    let truth = truth_path
        .map(|p| -> Result<Dag> {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(Dag::read_csv(f)?)
        })
        .transpose()?;
    if let Some(g) = &truth {
        ensure!(g.d() == data.d(), "truth has {} nodes, data has {} columns", g.d(), data.d());
    }

    let mut outputs = vec![];
    let ckpt = out.join("checkpoint.bin");
    let net = if skip_train && ckpt.exists() {
        let net = load_checkpoint(&ckpt)?;
        ensure!(net.d() == data.d(), "checkpoint expects {} columns, data has {}", net.d(), data.d());
        info!("reusing {}", ckpt.display());
        net
    } else {
        outputs.extend(["checkpoint.bin".into(), "train_manifest.json".into()]);
        fit(&data, cfg, out)?
    };

    let res = order(&net, &data, &cfg.order)?;
    res.write_json(create(&out.join("ordering.json"))?, data.labels())?;
    res.write_diagnostics(create(&out.join("diagnostics.csv"))?)?;
    let est = prune(&data, &res.ordering, &cfg.prune)?;
    est.write_csv(create(&out.join("graph.csv"))?)?;
    outputs.extend(["ordering.json".into(), "diagnostics.csv".into(), "graph.csv".into()]);

    if let Some(g) = truth {
        let report = MetricsReport::compute(&est, &res.ordering, &g, started.elapsed().as_secs_f64())?;
        info!("SHD {} SID {} D_top {}", report.shd, report.sid, report.d_top);
        write_json(&out.join("metrics.json"), &report)?;
        outputs.push("metrics.json".into());
    }
    Ok(outputs)
}

/// Two-variable chain `X0 → X1`; writes the per-sample Hessian diagonal of
/// the trained score at diffusion step `t`.
fn demo2var(seed: u64, n: usize, t: f64, cfg: &DiscoverConfig, out: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    let spec = AnmSpec::new(Dag::from_edges(2, &[(0, 1)])?, seed);
    let data = sample_dataset(&spec, n, seed)?;
    data.write_csv(create(&out.join("data.csv"))?)?;
    let net = fit(&data, cfg, out)?;
    let z = net.standardizer.apply(data.x());
    let h = ScoreField::new(&net, false).hessian_diag(&z, t)?;
    let mut w = csv::Writer::from_writer(create(&out.join("hessian_diag.csv"))?);
    w.write_record(data.labels())?;
    for row in h.values.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(vec![
        "data.csv".into(),
        "checkpoint.bin".into(),
        "train_manifest.json".into(),
        "hessian_diag.csv".into(),
    ])
}

#[derive(Serialize)]
struct BenchRow {
    variant: Variant,
    d: usize,
    n: usize,
    k: usize,
    seed: u64,
    d_top: usize,
    seconds: f64,
}

/// One network per `(d, n, seed)`, then every variant and `k` on it.
/// `seconds` is ordering time (including retraining for the greedy variant).
fn bench(cfg: &BenchConfig, out: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut w = csv::Writer::from_writer(create(&out.join("bench.csv"))?);
    for &d in &cfg.d {
        for &n in &cfg.n {
            for &seed in &cfg.seeds {
                let spec = cfg.spec(d, seed)?;
                let data = sample_dataset(&spec, n, seed)?;
                let net = fresh_net(&cfg.architecture, &cfg.schedule, seed, d)?;
                let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
                let (net, _) = train(net, &data, &cfg.schedule, &train_cfg)?;
                for &variant in &cfg.variants {
                    for &k in &cfg.k {
                        let oc = OrderConfig {
                            variant,
                            k,
                            seed,
                            ..cfg.order.clone()
                        };
                        let res = order(&net, &data, &oc)?;
                        let row = BenchRow {
                            variant,
                            d,
                            n,
                            k,
                            seed,
                            d_top: order_divergence(&res.ordering, &spec.graph)?,
                            seconds: res.seconds,
                        };
                        info!("{variant:?} d={d} n={n} k={k} seed={seed}: D_top {}", row.d_top);
                        w.serialize(row)?;
                        w.flush()?;
                    }
                }
            }
        }
    }
    Ok(vec!["bench.csv".into()])
}
