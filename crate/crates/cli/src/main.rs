use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fastsir::graph::{self, Network};
use fastsir::harness::{self, AlgorithmChoice, Grid, Suite, SweepConfig, VerifyOptions};
use fastsir::{EpidemicParams, PrecisionPolicy};

#[derive(Parser)]
#[command(
    name = "fastsir",
    version,
    about = "SIR epidemic simulation with Naive SIR and FastSIR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the infection-count CDF table for degrees 0..=k_max.
    Precalc(PrecalcArgs),
    /// Run repetitions at a single (p, q) point.
    Run(SimArgs),
    /// Run repetitions over a (p, q) grid.
    Sweep(SimArgs),
    /// Run a verification suite: dist, equivalence, tree or sampling.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PrecalcArgs {
    #[arg(long)]
    p: f64,
    #[arg(long)]
    q: f64,
    /// Largest degree; taken from --network when omitted.
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    network: Option<PathBuf>,
    /// Fixed working precision instead of the degree-scaled default.
    #[arg(long)]
    precision_bits: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Edge list: one `u v` pair per line, `#` or `%` comments.
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    /// `start:stop:step`
    #[arg(long)]
    p_grid: Option<String>,
    /// `start:stop:step`
    #[arg(long)]
    q_grid: Option<String>,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    /// naive, fast, hybrid or both
    #[arg(long, default_value = "both")]
    algorithm: String,
    /// `max-degree` or comma-separated node ids as written in the edge list.
    #[arg(long, default_value = "max-degree")]
    seed_node: String,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Cache directory (one table per cell) or a single table file.
    #[arg(long)]
    dist_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Hybrid pilot repetitions per algorithm.
    #[arg(long)]
    pilot_reps: Option<usize>,
    /// Sweep CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-cell final-size histograms here.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    suite: String,
    /// Repetitions per check in the equivalence and tree suites.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    rng_seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Largest degree checked by the dist suite.
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    corrupt_cdf_for_testing: bool,
}

fn load_network(path: &Path) -> Result<(Network, Vec<u64>)> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let (net, ids) = graph::load_edge_list_with_ids(BufReader::new(file))
        .with_context(|| format!("cannot load {}", path.display()))?;
    net.validate()?;
    Ok((net, ids))
}

fn resolve_seeds(arg: &str, net: &Network, ids: &[u64]) -> Result<Vec<usize>> {
    if arg == "max-degree" {
        return Ok(vec![net
            .max_degree_node()
            .context("network has no nodes")?]);
    }
    arg.split(',')
        .map(|t| {
            let id: u64 = t
                .trim()
                .parse()
                .with_context(|| format!("bad seed node {t:?}"))?;
            ids.iter()
                .position(|&x| x == id)
                .with_context(|| format!("seed node {id} does not appear in the network"))
        })
        .collect()
}

fn grid(single: Option<f64>, grid: &Option<String>, name: &str) -> Result<Grid> {
    match (single, grid) {
        (Some(v), None) => Ok(Grid::single(v)),
        (None, Some(g)) => Ok(g.parse()?),
        (Some(_), Some(_)) => bail!("give either --{name} or --{name}-grid, not both"),
        (None, None) => bail!("missing --{name} or --{name}-grid"),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn simulate(args: SimArgs, single_cell: bool) -> Result<()> {
    let p_grid = grid(args.p, &args.p_grid, "p")?;
    let q_grid = grid(args.q, &args.q_grid, "q")?;
    if single_cell && (p_grid.values().len() != 1 || q_grid.values().len() != 1) {
        bail!("run takes a single (p, q) point; use sweep for grids");
    }
    let (net, ids) = load_network(&args.network)?;
    let seeds = resolve_seeds(&args.seed_node, &net, &ids)?;
    let mut config = SweepConfig::new(p_grid, q_grid, seeds.clone());
    config.repetitions = args.reps;
    config.algorithm = args.algorithm.parse::<AlgorithmChoice>()?;
    config.master_seed = args.rng_seed;
    config.dist_cache = args.dist_cache;
    config.workers = args.workers;
    config.pilot_reps = args.pilot_reps;
    let cells = harness::sweep(&net, &config)?;

    let seed_ids: Vec<String> = seeds.iter().map(|&s| ids[s].to_string()).collect();
    let metadata = [
        ("tool", format!("fastsir {}", env!("CARGO_PKG_VERSION"))),
        ("network", args.network.display().to_string()),
        ("nodes", net.node_count().to_string()),
        ("links", net.link_count().to_string()),
        (
            "seed_nodes",
            format!("{} ({})", seed_ids.join(" "), args.seed_node),
        ),
        ("master_seed", args.rng_seed.to_string()),
        ("reps", args.reps.to_string()),
    ];
    harness::write_sweep_csv(output(&args.out)?, &metadata, &cells)?;
    if let Some(path) = &args.histogram {
        harness::write_histogram_csv(output(&Some(path.clone()))?, &cells)?;
    }
    Ok(())
}

fn precalc(args: PrecalcArgs) -> Result<()> {
    let params = EpidemicParams::new(args.p, args.q)?;
    let k_max = match (args.k_max, &args.network) {
        (Some(k), _) => k,
        (None, Some(path)) => graph::degree_stats(&load_network(path)?.0).k_max,
        (None, None) => bail!("give --k-max or --network"),
    };
    let report = harness::precalc_command(params, k_max, args.precision_bits, &args.out)?;
    let bits = args
        .precision_bits
        .unwrap_or_else(|| PrecisionPolicy::default().mantissa_bits(k_max));
    println!(
        "degrees 0..={} at {} bits built in {:.6} s, written to {}",
        report.k_max,
        bits,
        report.build_seconds,
        args.out.display()
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let suite: Suite = args.suite.parse()?;
    let mut opts = VerifyOptions {
        master_seed: args.rng_seed,
        corrupt_cdf: args.corrupt_cdf_for_testing,
        ..VerifyOptions::default()
    };
    if let Some(w) = args.workers {
        opts.workers = w;
    }
    if let Some(r) = args.reps {
        opts.equivalence_reps = r;
        opts.tree_reps = r;
        opts.sampling_draws = r;
    }
    if let Some(k) = args.k_max {
        opts.dist_n_max = k;
    }
    let report = harness::verify_command(suite, &opts)?;
    report.write(output(&args.out)?)?;
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Precalc(a) => precalc(a).map(|_| true),
        Command::Run(a) => simulate(a, true).map(|_| true),
        Command::Sweep(a) => simulate(a, false).map(|_| true),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
