use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmu::harness::commands;
use dmu::harness::{Event, PipelineConfig};
use dmu::tensor::DType;

#[derive(Parser)]
#[command(name = "dmu", version, about = "Multistage contrastive expert extraction and MoE upcycling")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: config output_dir, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    dtype: Option<DType>,
}

#[derive(Args)]
struct DataArg {
    /// Directory holding train.csv and eval.csv (default: --out).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData,
    /// Train the dense base dual encoder.
    TrainBase(DataArg),
    /// Run the staged FFN extraction from a base checkpoint.
    Mcl {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Assemble an MoE from a base checkpoint and FFN snapshots.
    Assemble {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 2.., required = true)]
        snapshots: Vec<PathBuf>,
    },
    /// Assemble the sparse-upcycling baseline from copies of the base FFNs.
    AssembleUpcycled {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        experts: Option<usize>,
    },
    /// Fine-tune only the routers of an MoE checkpoint.
    TrainRouter {
        #[arg(long)]
        moe: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Retrieval and attribute probes of a dense or MoE checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Per-expert forced-routing probes and recalls.
    Specialize {
        #[arg(long)]
        moe: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Per-block expert utilization on the eval split.
    RoutingStats {
        #[arg(long)]
        moe: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Everything end to end, for every configured seed.
    Pipeline,
}

fn run(cli: Cli) -> dmu::Result<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.seeds.clear();
    }
    if let Some(d) = g.dtype {
        cfg.dtype = d;
    }
    let out = g
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(dmu::Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| dmu::Error::Config(e.to_string()))?;
    }

    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let mut sink = |e: Event| {
        let _ = writeln!(lock, "{}", e.to_json_line());
    };
    let data = |d: DataArg| d.data.unwrap_or_else(|| out.clone());
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &out, &mut sink),
        Command::TrainBase(d) => commands::train_base(&cfg, &data(d), &out, &mut sink).map(drop),
        Command::Mcl { model, data: d } => commands::mcl(&cfg, &model, &data(d), &out, &mut sink).map(drop),
        Command::Assemble { model, snapshots } => {
            commands::assemble(&cfg, &model, &snapshots, &out, &mut sink).map(drop)
        }
        Command::AssembleUpcycled { model, experts } => {
            let e = experts.unwrap_or(cfg.num_experts());
            commands::assemble_upcycled_cmd(&cfg, &model, e, &out, &mut sink).map(drop)
        }
        Command::TrainRouter { moe, data: d } => {
            commands::train_router_cmd(&cfg, &moe, &data(d), &out, &mut sink).map(drop)
        }
        Command::Eval { model, data: d } => commands::eval(&cfg, &model, &data(d), &mut sink).map(drop),
        Command::Specialize { moe, data: d } => commands::specialize(&cfg, &moe, &data(d), &out, &mut sink),
        Command::RoutingStats { moe, data: d } => {
            commands::routing_stats_cmd(&cfg, &moe, &data(d), &out, &mut sink).map(drop)
        }
        Command::Pipeline => commands::run_pipeline_cmd(&cfg, &mut sink),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
