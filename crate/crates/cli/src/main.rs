use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskfed_core::data::knn_metrics;
use maskfed_core::federation::heldout_set;
use maskfed_core::mmd::rbf_mmd;
use maskfed_core::partition::partition;
use maskfed_core::rng::{stream, Purpose};
use maskfed_core::{
    run_federation, Batch, Dataset, DistanceMetric, FederationConfig, HybridPath, MadaSpace,
    ModelArtifact, PartitionStrategy, RoundMetrics, RunSummary,
};

#[derive(Parser)]
#[command(
    name = "maskfed",
    version,
    about = "Federated supermask training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation and write metrics plus the final artifact.
    Run(RunArgs),
    /// Score an artifact against a CSV of real points.
    Eval(EvalArgs),
    /// Print architecture, sparsity and size accounting of an artifact.
    Inspect {
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Show how a config splits the training data across clients.
    Partition {
        #[command(flatten)]
        overrides: Overrides,
        /// Print per-client label histograms.
        #[arg(long)]
        report: bool,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// `iid`, `shards:<per-client>` or `dirichlet:<concentration>`.
    #[arg(long, value_parser = parse_partition)]
    partition: Option<PartitionStrategy>,
    /// Setting any privacy value turns privacy on.
    #[arg(long)]
    dp_epsilon: Option<f64>,
    #[arg(long)]
    dp_delta: Option<f64>,
    #[arg(long)]
    clip_c: Option<f64>,
    #[arg(long)]
    no_dp: bool,
    #[arg(long, value_enum)]
    mada: Option<MadaArg>,
    #[arg(long, value_enum)]
    mada_space: Option<SpaceArg>,
    /// Percentage of layers uploaded as probabilities.
    #[arg(long)]
    hybrid_alpha: Option<f64>,
    #[arg(long, value_enum)]
    hybrid_path: Option<PathArg>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
    /// Threads running client rounds; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// CSV with `x0, x1, ...` columns; other columns are ignored.
    #[arg(long)]
    against: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    bandwidth: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Seed for the latent draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MadaArg {
    Hamming,
    Cosine,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Score,
    Prob,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Forward,
    Backward,
}

fn parse_partition(text: &str) -> Result<PartitionStrategy, String> {
    let (kind, value) = text.split_once(':').unwrap_or((text, ""));
    match kind {
        "iid" if value.is_empty() => Ok(PartitionStrategy::Iid),
        "shards" => value
            .parse()
            .map(|shards_per_client| PartitionStrategy::Shards { shards_per_client })
            .map_err(|_| format!("bad shard count in {text:?}")),
        "dirichlet" => value
            .parse()
            .map(|concentration| PartitionStrategy::Dirichlet { concentration })
            .map_err(|_| format!("bad concentration in {text:?}")),
        _ => Err(format!(
            "unknown partition {text:?}; use iid, shards:N or dirichlet:A"
        )),
    }
}

impl Overrides {
    fn load(&self) -> Result<FederationConfig> {
        let text = fs::read_to_string(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        let mut cfg: FederationConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        if let Some(clients) = self.clients {
            cfg.num_clients = clients;
        }
        if let Some(p) = self.partition {
            cfg.partition = p;
        }
        let privacy = &mut cfg.privacy;
        for (flag, slot) in [
            (self.dp_epsilon, &mut privacy.epsilon),
            (self.dp_delta, &mut privacy.delta),
            (self.clip_c, &mut privacy.clip_c),
        ] {
            if let Some(v) = flag {
                *slot = v;
                privacy.enabled = true;
            }
        }
        if self.no_dp {
            cfg.privacy.enabled = false;
        }
        if let Some(m) = self.mada {
            cfg.mada.metric = match m {
                MadaArg::Hamming => DistanceMetric::Hamming,
                MadaArg::Cosine => DistanceMetric::Cosine,
                MadaArg::Off => DistanceMetric::Off,
            };
        }
        if let Some(s) = self.mada_space {
            cfg.mada.space = match s {
                SpaceArg::Score => MadaSpace::Score,
                SpaceArg::Prob => MadaSpace::Prob,
            };
        }
        if let Some(a) = self.hybrid_alpha {
            cfg.hybrid.alpha_percent = a;
        }
        if let Some(p) = self.hybrid_path {
            cfg.hybrid.path = match p {
                PathArg::Forward => HybridPath::Forward,
                PathArg::Backward => HybridPath::Backward,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Inspect { artifact } => inspect(&artifact),
        Command::Partition { overrides, report } => partition_report(&overrides, report),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.overrides.load()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    let mut log = BufWriter::new(File::create(args.out.join("metrics.jsonl"))?);
    let quiet = args.quiet;
    let result = run_federation(&cfg, args.workers, |m: &RoundMetrics| {
        serde_json::to_writer(&mut log, m)?;
        log.write_all(b"\n")?;
        log.flush()?;
        if !quiet {
            if let Some(mmd) = m.eval_mmd {
                eprintln!(
                    "round {:>4}  lambda {:.4}  eval_mmd {:.5}",
                    m.round, m.lambda, mmd
                );
            }
        }
        Ok(())
    });
    drop(log);
    let output = result.context("federation aborted; metrics.jsonl holds the completed rounds")?;

    let bytes = output.artifact.encode();
    fs::write(args.out.join("model.prsm"), &bytes)?;
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&output.summary)? + "\n",
    )?;
    write_summary_csv(&args.out.join("summary.csv"), &output.summary)?;
    heldout_set(&cfg)?.write_csv(BufWriter::new(File::create(args.out.join("heldout.csv"))?))?;

    let s = &output.summary;
    println!(
        "rounds {}  weights {}  rbf_mmd {:.5} -> {:.5}  coverage {:.3}  uplink {} bits  artifact {} bytes",
        s.rounds,
        s.num_weights,
        s.initial_eval_mmd,
        s.final_eval.rbf_mmd,
        s.final_eval.knn.coverage,
        s.total_uplink_bits,
        bytes.len()
    );
    if let Some(eps) = s.dp_epsilon_spent {
        println!(
            "privacy: epsilon spent {eps:.4} at delta {}",
            cfg.privacy.delta
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    rounds: u32,
    num_weights: usize,
    initial_eval_mmd: f64,
    final_rbf_mmd: f64,
    precision: f64,
    recall: f64,
    density: f64,
    coverage: f64,
    total_uplink_bits: u64,
    total_downlink_bits: u64,
    dp_epsilon_spent: Option<f64>,
    noise_sigma: Option<f64>,
}

fn write_summary_csv(path: &Path, s: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(SummaryRow {
        rounds: s.rounds,
        num_weights: s.num_weights,
        initial_eval_mmd: s.initial_eval_mmd,
        final_rbf_mmd: s.final_eval.rbf_mmd,
        precision: s.final_eval.knn.precision,
        recall: s.final_eval.knn.recall,
        density: s.final_eval.knn.density,
        coverage: s.final_eval.knn.coverage,
        total_uplink_bits: s.total_uplink_bits,
        total_downlink_bits: s.total_downlink_bits,
        dp_epsilon_spent: s.dp_epsilon_spent,
        noise_sigma: s.noise_sigma,
    })?;
    w.flush()?;
    Ok(())
}

fn read_artifact(path: &Path) -> Result<ModelArtifact> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ModelArtifact::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn read_points(path: &Path) -> Result<Batch> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let columns: Vec<usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            h.trim()
                .strip_prefix('x')
                .is_some_and(|n| n.parse::<usize>().is_ok())
        })
        .map(|(i, _)| i)
        .collect();
    if columns.is_empty() {
        bail!("{} has no x0, x1, ... columns", path.display());
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = columns
            .iter()
            .map(|&c| {
                record
                    .get(c)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}: row {} column {c}", path.display(), line + 1))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Batch::from_rows(&rows)?)
}

#[derive(Serialize)]
struct EvalOutput {
    samples: usize,
    real_points: usize,
    rbf_mmd: f64,
    precision: f64,
    recall: f64,
    density: f64,
    coverage: f64,
}

fn eval(args: EvalArgs) -> Result<()> {
    let artifact = read_artifact(&args.artifact)?;
    let real = read_points(&args.against)?;
    if real.dim() != artifact.arch().output_dim() {
        bail!(
            "artifact generates {}-d points but {} has {} columns",
            artifact.arch().output_dim(),
            args.against.display(),
            real.dim()
        );
    }
    let mut rng = stream(args.seed, Purpose::Eval, 0, 0);
    let latent = Batch::gaussian(args.samples, artifact.arch().latent_dim(), &mut rng);
    let fake = artifact.generate(&latent)?;
    let knn = knn_metrics(&real, &fake, args.k)?;
    let out = EvalOutput {
        samples: args.samples,
        real_points: real.rows(),
        rbf_mmd: rbf_mmd(&real, &fake, args.bandwidth)?,
        precision: knn.precision,
        recall: knn.recall,
        density: knn.density,
        coverage: knn.coverage,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let artifact = read_artifact(path)?;
    let arch = artifact.arch();
    println!("latent_dim {}", arch.latent_dim());
    println!("seed {}", artifact.seed());
    let mask = artifact.mask();
    for ((i, layer), (range, scale)) in arch
        .layers()
        .iter()
        .enumerate()
        .zip(arch.layer_ranges().into_iter().zip(artifact.scales()))
    {
        let kept = mask.slice(range.clone()).count_ones();
        println!(
            "layer {i}: {} -> {} {:?}  scale {scale:.6}  kept {kept}/{} ({:.1}%)",
            layer.fan_in,
            layer.fan_out,
            layer.activation,
            range.len(),
            100.0 * kept as f64 / range.len().max(1) as f64
        );
    }
    let report = artifact.storage_report();
    println!(
        "sparsity {:.4}",
        1.0 - report.kept_weights as f64 / report.num_weights.max(1) as f64
    );
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct ClientShare {
    client: usize,
    size: usize,
    labels: Vec<usize>,
}

fn partition_report(overrides: &Overrides, report: bool) -> Result<()> {
    let cfg = overrides.load()?;
    let mut rng = stream(cfg.master_seed, Purpose::TrainData, 0, 0);
    let train: Dataset = cfg.data.generate(&mut rng)?;
    let mut rng = stream(cfg.master_seed, Purpose::Partition, 0, 0);
    let parts = partition(&train.labels, cfg.partition, cfg.num_clients, &mut rng)?;
    if report {
        let shares: Vec<ClientShare> = parts
            .iter()
            .enumerate()
            .map(|(client, idx)| ClientShare {
                client,
                size: idx.len(),
                labels: train.subset(idx).label_histogram(),
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&shares)?);
    } else {
        for (client, idx) in parts.iter().enumerate() {
            println!("client {client}: {} points", idx.len());
        }
    }
    Ok(())
}
