use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use trajforge::flow::{write_scores_csv, FarnebackParams, FlowMetricConfig, FlowScorer};
use trajforge::harness::{run_dir, run_experiment, ExperimentConfig, Mechanism};
use trajforge::io::{read_mask, read_tensor};
use trajforge::oracle::{Convention, DenoiserOracle};
use trajforge::rng::{KeyedRng, Purpose};
use trajforge::sampler::{ddim_fm_equivalence_check, EQUIVALENCE_ROUNDOFF};
use trajforge::traj_eval::{align_sim3, ate, read_pose_file, rpe_r, rpe_t};

#[derive(Parser)]
#[command(name = "trajforge", version, about = "Trajectory-guided sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Run a single seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Parent directory for the run (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mechanisms to sweep on and off, e.g. `irr,flf,dsg`.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Align an estimated pose file to a reference and report ATE / RPE.
    EvalTraj {
        est: PathBuf,
        reference: PathBuf,
        /// Write the metrics CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-channel flow score of a prediction against a trajectory latent.
    ScoreFlow {
        prediction: PathBuf,
        trajectory: PathBuf,
        mask: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare DDIM and flow-Euler sampling on a shared linear schedule.
    CheckEquivalence {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest step count; the check also runs 1/2, 1/4 and 1/8 of it.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => trajforge::io::write_atomic(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, ablate: Option<String>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(a) = ablate {
        cfg.ablate = Mechanism::parse_list(&a)?;
    }
    cfg.validate()?;
    let manifest = run_experiment(&cfg)?;
    println!("run directory: {}", run_dir(&cfg)?.display());
    println!("content hash: {}", manifest.content_hash()?);
    println!("{:<14} {:>6} {:>12} {:>12} {:>12}", "cell", "seed", "dev_guide", "dev_truth", "dev_unobs");
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for c in &manifest.cells {
        println!(
            "{:<14} {:>6} {:>12} {:>12} {:>12}",
            c.cell,
            c.seed,
            f(c.deviation_guidance),
            f(c.deviation_truth),
            f(c.deviation_truth_unobserved)
        );
    }
    for e in &manifest.errors {
        eprintln!("stage {} failed: {}", e.stage, e.message);
    }
    Ok(manifest.succeeded())
}

fn eval_traj(est: &Path, reference: &Path, out: Option<&Path>) -> Result<bool> {
    let est = read_pose_file(est)?;
    let reference = read_pose_file(reference)?;
    let (aligned, tf) = align_sim3(&est, &reference)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ate", "rpe_t", "rpe_r_deg", "scale"])?;
    w.write_record([
        ate(&aligned, &reference)?.0.to_string(),
        rpe_t(&aligned, &reference)?.0.to_string(),
        rpe_r(&aligned, &reference)?.0.to_string(),
        tf.scale.to_string(),
    ])?;
    emit(out, &w.into_inner()?)?;
    Ok(true)
}

fn score_flow(prediction: &Path, trajectory: &Path, mask: &Path, out: Option<&Path>) -> Result<bool> {
    let x = read_tensor(prediction)?;
    let z = read_tensor(trajectory)?;
    let m = read_mask(mask)?;
    let scores = FlowScorer::new(&z, &m, &FlowMetricConfig::default(), &FarnebackParams::default())?.score(&x)?;
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, &[(0, scores)])?;
    emit(out, &buf)?;
    Ok(true)
}

fn check_equivalence(seed: u64, steps: usize, tolerance: f64, out: Option<&Path>) -> Result<bool> {
    if steps < 8 {
        bail!("--steps must be at least 8");
    }
    let oracle = DenoiserOracle::gaussian(0.3, 0.5, Convention::Velocity)?;
    let x = KeyedRng::new(seed).normal([3, 4, 8, 8], Purpose::InitialNoise, 0, 0);
    let counts: Vec<usize> = (0..4).rev().map(|k| steps >> k).collect();
    let devs = counts.iter().map(|&n| ddim_fm_equivalence_check(&oracle, n, &x)).collect::<trajforge::Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["steps", "max_deviation"])?;
    for (n, d) in counts.iter().zip(&devs) {
        w.write_record([n.to_string(), d.to_string()])?;
    }
    emit(out, &w.into_inner()?)?;
    let monotone = devs.windows(2).all(|p| p[1] <= p[0] + EQUIVALENCE_ROUNDOFF);
    let within = devs[devs.len() - 1] <= tolerance;
    if !monotone {
        eprintln!("deviation grew when the step count doubled");
    }
    if !within {
        eprintln!("deviation {} at {steps} steps exceeds {tolerance}", devs[devs.len() - 1]);
    }
    Ok(monotone && within)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, ablate } => run(&config, seed, out, ablate),
        Command::EvalTraj { est, reference, out } => eval_traj(&est, &reference, out.as_deref()),
        Command::ScoreFlow {
            prediction,
            trajectory,
            mask,
            out,
        } => score_flow(&prediction, &trajectory, &mask, out.as_deref()),
        Command::CheckEquivalence {
            seed,
            steps,
            tolerance,
            out,
        } => check_equivalence(seed, steps, tolerance, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
