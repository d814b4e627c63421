use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use subfl::config::{read_config, RunManifest};
use subfl::fl::{run_experiment, MANIFEST_FILE};
use subfl::graph::{generate_er, generate_sbm_blocks, read_graph, write_graph};
use subfl::nn::{gradcheck, Regularization};
use subfl::partition::{
    make_imbalanced, make_overlapping, partition_balanced, partition_chunks, partition_louvain,
    partition_metrics, partition_random,
};
use subfl::report::report;

#[derive(Parser)]
#[command(
    name = "subfl",
    version,
    about = "Federated subgraph learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic graph file.
    Gen {
        /// Block sizes of a stochastic block model, e.g. 100,100,100.
        #[arg(long, value_delimiter = ',', conflicts_with = "er_nodes")]
        blocks: Vec<usize>,
        /// Node count of an Erdős–Rényi graph instead of a block model.
        #[arg(long)]
        er_nodes: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 32)]
        feat_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Split a graph file into client node sets and write structure metrics.
    Partition {
        graph: PathBuf,
        /// balanced, louvain, random, overlapping, imbalanced or chunks.
        #[arg(long, default_value = "balanced")]
        method: String,
        /// Clients (balanced/louvain/random), base parts (overlapping),
        /// fine parts (imbalanced) or chunk size (chunks).
        #[arg(long, short, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        samples_per_part: usize,
        #[arg(long, default_value_t = 0.5)]
        node_frac: f64,
        #[arg(long, value_delimiter = ',')]
        group_sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output partition file; metrics go next to it.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run an experiment (or every point of its sweep).
    Run {
        /// TOML config; required unless --replay is given.
        config: Option<PathBuf>,
        /// Re-run from a run directory's manifest.
        #[arg(long, conflicts_with = "config")]
        replay: Option<PathBuf>,
        /// Run directory; overrides the config's output.dir.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Client worker threads; 0 picks one per core. Does not change results.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Write analyses of a finished run into <run-dir>/report.
    Report { run_dir: PathBuf },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        max_nodes: usize,
        #[arg(long, default_value_t = 8)]
        max_hidden: usize,
    },
}

fn gen(
    blocks: &[usize],
    er_nodes: Option<usize>,
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let g = match er_nodes {
        Some(n) => generate_er(n, p_in, feat_dim, seed)?,
        None if blocks.is_empty() => bail!("give --blocks or --er-nodes"),
        None => generate_sbm_blocks(blocks, p_in, p_out, feat_dim, seed)?,
    };
    write_graph(&g, out)?;
    println!(
        "wrote {} nodes, {} edges to {}",
        g.num_nodes(),
        g.num_edges(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn partition(
    graph: &Path,
    method: &str,
    k: usize,
    samples_per_part: usize,
    node_frac: f64,
    group_sizes: &[usize],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let g = read_graph(graph)?;
    let p = match method {
        "balanced" => partition_balanced(&g, k, seed)?,
        "louvain" => partition_louvain(&g, k, seed)?,
        "random" => partition_random(&g, k, seed)?,
        "overlapping" => make_overlapping(&g, k, samples_per_part, node_frac, seed)?,
        "imbalanced" => make_imbalanced(&g, k, group_sizes, seed)?,
        "chunks" => partition_chunks(g.num_nodes(), k)?,
        other => bail!("unknown partition method {other:?}"),
    };
    p.write(out)?;
    let (metrics, missing) = partition_metrics(&g, &p)?;
    let metrics_path = out.with_extension("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    let rows: Vec<String> = missing
        .rows()
        .into_iter()
        .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
        .collect();
    let missing_path = out.with_extension("missing.csv");
    std::fs::write(&missing_path, rows.join("\n") + "\n")
        .with_context(|| format!("writing {}", missing_path.display()))?;
    println!(
        "wrote {} clients to {} (heterogeneity {})",
        p.num_clients(),
        out.display(),
        metrics
            .heterogeneity
            .map_or("n/a".to_string(), |h| format!("{h:.4}"))
    );
    Ok(())
}

fn run(
    config: Option<PathBuf>,
    replay: Option<PathBuf>,
    out: Option<PathBuf>,
    workers: usize,
) -> Result<()> {
    let points = match (config, replay) {
        (_, Some(dir)) => {
            let manifest = RunManifest::read(&dir.join(MANIFEST_FILE))?;
            vec![subfl::config::SweepPoint {
                name: String::new(),
                config: manifest.config,
            }]
        }
        (Some(path), None) => read_config(&path)?,
        (None, None) => bail!("give a config file or --replay <run-dir>"),
    };
    for point in points {
        let base = out
            .clone()
            .or_else(|| point.config.output.dir.clone())
            .context("no run directory: pass --out or set output.dir")?;
        let dir = if point.name.is_empty() {
            base
        } else {
            base.join(&point.name)
        };
        let outcome = run_experiment(&point.config, &dir, workers)?;
        let last = outcome.records.iter().map(|r| r.round).max().unwrap_or(0);
        let final_rows: Vec<_> = outcome.records.iter().filter(|r| r.round == last).collect();
        let mean =
            final_rows.iter().map(|r| r.test_acc).sum::<f64>() / final_rows.len().max(1) as f64;
        if final_rows.is_empty() {
            println!("{}: no rounds run", dir.display());
        } else {
            println!("{}: round {last} mean test score {mean:.4}", dir.display());
        }
    }
    Ok(())
}

/// Largest relative error accepted between analytic and numeric gradients.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn check_gradients(instances: usize, seed: u64, max_nodes: usize, max_hidden: usize) -> Result<()> {
    let r = gradcheck::run_suite(
        instances,
        seed,
        max_nodes,
        max_hidden,
        Regularization {
            l1: 0.001,
            prox: 0.001,
        },
    )?;
    println!(
        "checked {} components over {} instances; max relative error {:.3e}",
        r.components, r.instances, r.max_rel_error
    );
    println!("worst: {}", r.worst);
    // Written so that a NaN error also fails.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(r.max_rel_error < GRADCHECK_TOLERANCE) {
        bail!(
            "max relative error {:.3e} is not below {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            blocks,
            er_nodes,
            p_in,
            p_out,
            feat_dim,
            seed,
            out,
        } => gen(&blocks, er_nodes, p_in, p_out, feat_dim, seed, &out),
        Command::Partition {
            graph,
            method,
            k,
            samples_per_part,
            node_frac,
            group_sizes,
            seed,
            out,
        } => partition(
            &graph,
            &method,
            k,
            samples_per_part,
            node_frac,
            &group_sizes,
            seed,
            &out,
        ),
        Command::Run {
            config,
            replay,
            out,
            workers,
        } => run(config, replay, out, workers),
        Command::Report { run_dir } => report(&run_dir)
            .map(|s| {
                println!("wrote report to {}", s.dir.display());
            })
            .map_err(Into::into),
        Command::Gradcheck {
            instances,
            seed,
            max_nodes,
            max_hidden,
        } => check_gradients(instances, seed, max_nodes, max_hidden),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
