use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use immiscible::assign::{empirical_conditional_weights, standard_noise, AssignOptions};
use immiscible::data::{load_cifar10_binary, GaussianSource, ImageSource, Normalization};
use immiscible::denoiser::Checkpoint;
use immiscible::diffusion::{make_schedule, sample, SamplerConfig};
use immiscible::harness::bench::{eight_point_data, two_point_data};
use immiscible::harness::config::KEYS;
use immiscible::harness::train::{metrics_csv, train_partial};
use immiscible::harness::{
    assign_bench, assign_bench_csv, compare_modes, cond_weights_csv, fmt_f64, write_run,
    TrainConfig,
};
use immiscible::lap::{solve_lap, CostMatrix};
use immiscible::{AssignMode, Metric};

#[derive(Parser)]
#[command(name = "immiscible-lab", version, about = "Immiscible diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv, run.meta and a checkpoint.
    Train(TrainArgs),
    /// Train every mode over several seeds and summarize.
    Compare(CompareArgs),
    /// Distance reduction and assignment time per batch size.
    AssignBench(BenchArgs),
    /// Monte-Carlo assignment frequency vs noise distance.
    CondWeights(CondArgs),
    /// Solve a square assignment problem read as CSV.
    LapSolve(LapArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// List the configuration keys.
    Keys,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl From<OnOff> for bool {
    fn from(v: OnOff) -> bool {
        matches!(v, OnOff::On)
    }
}

#[derive(Args)]
struct Overrides {
    /// Configuration file of key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AssignMode>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long, value_enum)]
    quantize: Option<OnOff>,
    /// Override total_steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(m) = self.metric {
            cfg.metric = m;
        }
        if let Some(q) = self.quantize {
            cfg.quantize = q.into();
        }
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to out_dir from the config, then runs/train.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',', default_value = "vanilla,immiscible_l2,immiscible_flipped")]
    modes: Vec<AssignMode>,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    num_seeds: u64,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "runs/compare")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    batch_sizes: Vec<usize>,
    /// Dimension of the standard-normal surrogate data.
    #[arg(long, default_value_t = 3072)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value = "l2")]
    metric: Metric,
    #[arg(long, value_enum, default_value = "off")]
    quantize: OnOff,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CIFAR-10 binary batch; benchmarks real images under both normalizations.
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Directory for the CSV tables; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Setup {
    /// Two sources at (±5, 0).
    TwoPoint,
    /// Eight sources on a ring.
    EightPoint,
}

#[derive(Args)]
struct CondArgs {
    #[arg(long, value_enum, default_value = "two-point")]
    setup: Setup,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    rounds: usize,
    #[arg(long, default_value_t = 10)]
    buckets: usize,
    /// Ring radius for the eight-point setup.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LapArgs {
    /// CSV cost matrix, one row per line; stdin when absent.
    input: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    sampler_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/train"));
    cfg.validate()?;
    let run = train_partial(&cfg)?;
    write_run(&out, &run)?;
    if let Some((step, _)) = run.failure {
        bail!("training diverged at step {step}; see {}", out.join("diagnostic.txt").display());
    }
    eprint!("{}", metrics_csv(&run.records));
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.num_seeds).collect();
    let report = compare_modes(&cfg, &args.modes, &seeds, args.jobs)?;
    report.write(&args.out)?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn assign_bench_cmd(args: BenchArgs) -> Result<()> {
    let options = AssignOptions {
        metric: args.metric,
        quantize: args.quantize.into(),
        shards: 1,
    };
    let mut tables = Vec::new();
    match &args.cifar {
        None => {
            let rows = assign_bench(
                &GaussianSource { d: args.dim },
                &args.batch_sizes,
                args.trials,
                options,
                args.seed,
            )?;
            tables.push(("assign_bench.csv".to_string(), assign_bench_csv(&rows)));
        }
        Some(path) => {
            let images = load_cifar10_binary(path)?;
            for norm in [Normalization::Signed, Normalization::Unit] {
                let source = ImageSource { images: &images, normalization: norm };
                let rows = assign_bench(&source, &args.batch_sizes, args.trials, options, args.seed)?;
                tables.push((format!("assign_bench_{}.csv", norm.name()), assign_bench_csv(&rows)));
            }
        }
    }
    for (name, text) in tables {
        match &args.out {
            Some(dir) => emit(Some(&dir.join(name)), &text)?,
            None => {
                if args.cifar.is_some() {
                    println!("# {name}");
                }
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn cond_weights(args: CondArgs) -> Result<()> {
    let (data, target) = match args.setup {
        Setup::TwoPoint => {
            if args.batch_size % 2 != 0 {
                bail!("two-point batch size must be even");
            }
            (two_point_data(args.batch_size / 2)?, vec![5.0, 0.0])
        }
        Setup::EightPoint => {
            if args.batch_size % 8 != 0 {
                bail!("eight-point batch size must be a multiple of 8");
            }
            (eight_point_data(args.scale, args.batch_size / 8)?, vec![args.scale, 0.0])
        }
    };
    let curve = empirical_conditional_weights(
        &target,
        &data,
        &standard_noise,
        args.rounds,
        args.buckets,
        args.seed,
    )?;
    let mut text = cond_weights_csv(&curve);
    text.push_str(&format!("# spearman = {}\n", fmt_f64(curve.spearman())));
    emit(args.out.as_deref(), &text)
}

fn lap_solve(args: LapArgs) -> Result<()> {
    let mut raw = String::new();
    match &args.input {
        Some(p) => raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            io::stdin().read_to_string(&mut raw)?;
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(raw.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().with_context(|| format!("row {}: bad number {f:?}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let costs = CostMatrix::from_rows(&rows)?;
    let a = solve_lap(&costs);
    let perm: Vec<String> = a.perm.iter().map(ToString::to_string).collect();
    println!("perm,{}", perm.join(","));
    println!("total_cost,{}", fmt_f64(a.total_cost));
    Ok(())
}

fn sample_cmd(args: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let steps = ck.model.total_steps();
    let sched = make_schedule(steps, ck.beta_range.0, ck.beta_range.1)?;
    let cfg = SamplerConfig::linear(args.sampler_steps, steps)?;
    let x = sample(&ck.model, &sched, &cfg, args.n, args.seed)?;
    let mut text = String::new();
    for i in 0..x.n() {
        let row: Vec<String> = x.row_slice(i).iter().map(|v| fmt_f64(*v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    emit(args.out.as_deref(), &text)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a),
        Command::AssignBench(a) => assign_bench_cmd(a),
        Command::CondWeights(a) => cond_weights(a),
        Command::LapSolve(a) => lap_solve(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<18} {doc}");
            }
            Ok(())
        }
    }
}
