use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jadce::analysis::{compare_bounds, empirical_rip, BoundParams, NormalizedOperator, RipFamily};
use jadce::channel_model::SystemConfig;
use jadce::harness::{
    benchmark_runtime, emit_results, preset, run_sweep, write_records_csv, Algorithm, ExperimentSpec, Format,
    ResultTable, PRESETS,
};
use jadce::linalg::median;
use jadce::measurement::MeasurementOperator;

#[derive(Parser)]
#[command(
    name = "jadce",
    version,
    about = "Activity detection and channel estimation experiments"
)]
struct Cli {
    /// Worker threads for trials (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment, see `jadce preset`.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of RG-MRAS, RC-MRAS, FISTA, OMP.
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<Algorithm>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs one sweep point.
    Simulate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Index into the sweep values.
        #[arg(long, default_value_t = 0)]
        point: usize,
    },
    /// Runs the full sweep and writes records, aggregates and plot data.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Empirical restricted isometry constant against the pilot length.
    RipCheck {
        /// Scenario (SystemConfig JSON); defaults to a small desk scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        b_p: Vec<usize>,
        /// Sparse-block level u.
        #[arg(long, default_value_t = 16)]
        u: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Operator redraws per pilot length.
        #[arg(long, default_value_t = 5)]
        redraws: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bound table over spread and active devices.
    Bounds {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
        k: Vec<f64>,
        #[arg(long, default_value_t = 1.05)]
        t: f64,
        #[arg(long, default_value_t = 2.0)]
        l: f64,
        #[arg(long, default_value_t = 1000.0)]
        n: f64,
        #[arg(long, default_value_t = 64.0)]
        d: f64,
        #[arg(long, default_value_t = 64.0)]
        m1: f64,
        #[arg(long, default_value_t = 64.0)]
        r: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median per-iteration runtime over the sweep.
    Bench {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Prints a built-in experiment spec, or lists them.
    Preset { name: Option<String> },
}

fn load_spec(a: &SpecArgs) -> jadce::Result<ExperimentSpec> {
    let mut spec = match (&a.config, &a.preset) {
        (Some(path), _) => ExperimentSpec::load(path)?,
        (None, Some(name)) => {
            preset(name).ok_or_else(|| jadce::Error::InvalidConfig(format!("unknown preset {name:?}")))?
        }
        (None, None) => preset("fig2").expect("built-in preset"),
    };
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(al) = &a.algo {
        spec.algorithms = al.clone();
    }
    if let Some(o) = &a.out {
        spec.out = Some(o.clone());
    }
    spec.validate()?;
    Ok(spec)
}

fn print_aggregate(table: &ResultTable) -> jadce::Result<()> {
    write_records_csv(&table.aggregate(), std::io::stdout())
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, v: &T) -> jadce::Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::fs::File::create(dir.join(name))?;
    serde_json::to_writer_pretty(f, v)?;
    Ok(())
}

fn run(cli: Cli) -> jadce::Result<()> {
    if let Some(t) = cli.threads {
        // Only the first call can configure the global pool.
        let _ = rayon_init(t);
    }
    match cli.cmd {
        Cmd::Simulate { spec, point } => {
            let mut s = load_spec(&spec)?;
            let v = *s
                .sweep
                .values
                .get(point)
                .ok_or_else(|| jadce::Error::InvalidConfig(format!("no sweep point {point}")))?;
            s.sweep.values = vec![v];
            let table = run_sweep(&s, None)?;
            if let Some(dir) = &s.out {
                emit_results(&table, dir, Format::All)?;
            }
            print_aggregate(&table)?;
        }
        Cmd::Sweep { spec } => {
            let s = load_spec(&spec)?;
            let table = run_sweep(&s, None)?;
            let dir = s.out.clone().unwrap_or_else(|| PathBuf::from("results").join(&s.name));
            for f in emit_results(&table, &dir, Format::All)? {
                info!("wrote {}", f.display());
            }
            write_json(&dir, "spec.json", &s)?;
            print_aggregate(&table)?;
        }
        Cmd::RipCheck {
            config,
            b_p,
            u,
            rank,
            trials,
            redraws,
            seed,
            out,
        } => {
            let base = match config {
                Some(p) => serde_json::from_reader(std::fs::File::open(p)?)?,
                None => SystemConfig::new(8, 2, 16, 16, 16, 128, 16, 0.125, 2, 2),
            };
            let fam = RipFamily::from_level(u, base.p, base.l_max, rank);
            let mut rows = Vec::new();
            println!("B_p,M_pB_p,median_delta,min_delta,max_delta");
            for &bp in &b_p {
                let mut cfg = base.clone();
                cfg.b_p = bp;
                cfg.validate()?;
                let mut est = Vec::new();
                for r in 0..redraws {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r << 32) ^ bp as u64);
                    let op = MeasurementOperator::random(&cfg, &mut rng)?;
                    est.push(empirical_rip(&NormalizedOperator(&op), &fam, trials, &mut rng)?);
                }
                let med = median(&est);
                let lo = est.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = est.iter().copied().fold(0.0, f64::max);
                println!("{bp},{},{med},{lo},{hi}", cfg.m_p * bp);
                rows.push(
                    serde_json::json!({"B_p": bp, "measurements": cfg.m_p * bp, "median_delta": med, "deltas": est}),
                );
            }
            if let Some(dir) = out {
                write_json(&dir, "rip.json", &rows)?;
            }
        }
        Cmd::Bounds {
            p,
            k,
            t,
            l,
            n,
            d,
            m1,
            r,
            out,
        } => {
            let mut rows = Vec::new();
            println!("p,K,theorem1,traditional,theorem1_smaller,conditions_hold");
            for &pp in &p {
                for &kk in &k {
                    let bp = BoundParams::uniform(pp, l, kk, t, n, d, m1, r);
                    bp.validate()?;
                    let c = compare_bounds(&bp);
                    println!(
                        "{pp},{kk},{:.3},{:.3},{},{}",
                        c.theorem1, c.traditional, c.theorem1_smaller, c.conditions_hold
                    );
                    rows.push(serde_json::json!({"params": bp, "comparison": c}));
                }
            }
            if let Some(dir) = out {
                write_json(&dir, "bounds.json", &rows)?;
            }
        }
        Cmd::Bench { spec, iters } => {
            let s = load_spec(&spec)?;
            let rows = benchmark_runtime(&s, iters)?;
            write_records_csv(&rows, std::io::stdout())?;
            if let Some(dir) = &s.out {
                write_json(dir, "timing.json", &rows)?;
            }
        }
        Cmd::Preset { name } => match name {
            Some(n) => {
                let s = preset(&n).ok_or_else(|| jadce::Error::InvalidConfig(format!("unknown preset {n:?}")))?;
                println!("{}", serde_json::to_string_pretty(&s)?);
            }
            None => PRESETS.iter().for_each(|p| println!("{p}")),
        },
    }
    Ok(())
}

fn rayon_init(threads: usize) -> Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
