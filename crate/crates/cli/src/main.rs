//! `closedpoly` command-line front end.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use closedpoly::analysis::{attack_curve, evaluate, quadratic_spectrum, DEFAULT_EVAL_SAMPLES};
use closedpoly::approx::{linear_approx, quadratic_approx, refine_quadratic, ApproxConfig, Approximant, RefineConfig};
use closedpoly::bundle::{
    approximant_from_bundle, approximant_to_bundle, load_distribution, network_from_bundle, Tensor, TensorBundle,
};
use closedpoly::harness::{run_sweep, SweepConfig};
use closedpoly::{Error, Result};

#[derive(Parser)]
#[command(name = "closedpoly", version, about = "Closed-form polynomial approximants of small neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Degree {
    #[value(name = "1")]
    Linear,
    #[value(name = "2")]
    Quadratic,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a least-squares approximant under a Gaussian or mixture input.
    Approx {
        #[arg(long)]
        net: PathBuf,
        /// `.json` or tensor bundle.
        #[arg(long)]
        dist: PathBuf,
        #[arg(long, value_enum)]
        degree: Degree,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ApproxConfig::default().max_feature_dim)]
        max_feature_dim: usize,
        #[arg(long, default_value_t = ApproxConfig::default().mixture_quadratic_max_d)]
        mixture_quadratic_max_d: usize,
    },
    /// Monte-Carlo FVU, KL and accuracy of an approximant; prints JSON.
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Eigendecomposition of one interaction matrix.
    Spectrum {
        #[arg(long)]
        approx: PathBuf,
        #[arg(long = "class")]
        class_index: usize,
        #[arg(long)]
        top: usize,
        /// Where to write the top eigenvectors (`eigenvalues [k]`, `eigenvectors [d, k]`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy under SVD projections for k = 0..=K; prints CSV.
    Attack {
        /// Linear approximant whose singular vectors are ablated.
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        /// Optional quadratic approximant to score alongside.
        #[arg(long)]
        quad: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, checkpoint, fit and evaluate end to end.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Refine a quadratic approximant by minibatch least squares.
    Refine {
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        #[arg(long, default_value_t = RefineConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = RefineConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = RefineConfig::default().step_size)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_approx(path: &PathBuf) -> Result<Approximant> {
    approximant_from_bundle(&TensorBundle::read(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Approx { net, dist, degree, out, max_feature_dim, mixture_quadratic_max_d } => {
            let net = network_from_bundle(&TensorBundle::read(net)?)?;
            let dist = load_distribution(dist)?;
            let fitted = match degree {
                Degree::Linear => Approximant::Linear(linear_approx(&net, &dist)?),
                Degree::Quadratic => {
                    let cfg = ApproxConfig { max_feature_dim, mixture_quadratic_max_d };
                    Approximant::Quadratic(quadratic_approx(&net, &dist, &cfg)?)
                }
            };
            approximant_to_bundle(&fitted).write(out)?;
        }
        Command::Eval { net, approx, dist, n, seed } => {
            let net = network_from_bundle(&TensorBundle::read(net)?)?;
            let report = evaluate(&net, &read_approx(&approx)?, &load_distribution(dist)?, n, seed)?;
            writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
        }
        Command::Spectrum { approx, class_index, top, out } => {
            let Approximant::Quadratic(q) = read_approx(&approx)? else {
                return Err(Error::InvalidInput("spectrum needs a quadratic approximant".into()));
            };
            let s = quadratic_spectrum(&q, class_index)?;
            let k = top.min(s.eigenvalues.len());
            let values = &s.eigenvalues[..k];
            writeln!(stdout, "{}", serde_json::to_string(&values)?)?;
            if let Some(path) = out {
                let vecs = s.eigenvectors.columns(0, k).into_owned();
                TensorBundle::new(vec![
                    Tensor::new("eigenvalues", vec![k], values.to_vec())?,
                    Tensor::matrix("eigenvectors", &vecs),
                ])
                .write(path)?;
            }
        }
        Command::Attack { approx, k, net, dist, quad, n, seed } => {
            let Approximant::Linear(lin) = read_approx(&approx)? else {
                return Err(Error::InvalidInput("attack needs a linear approximant (--approx)".into()));
            };
            // validates k against the rank
            closedpoly::analysis::svd_attack_projection(&lin, k)?;
            let quad = match quad.map(|p| read_approx(&p)).transpose()? {
                Some(Approximant::Quadratic(q)) => Some(q),
                Some(_) => return Err(Error::InvalidInput("--quad must be a quadratic approximant".into())),
                None => None,
            };
            let net = network_from_bundle(&TensorBundle::read(net)?)?;
            let rows = attack_curve(&net, &lin, quad.as_ref(), &load_distribution(dist)?, n, seed)?;
            let mut w = csv::Writer::from_writer(&mut stdout);
            for r in rows.iter().take(k + 1) {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Command::Sweep { config, out_dir } => {
            let cfg = SweepConfig::from_path(config)?;
            let out = run_sweep(&cfg, &out_dir)?;
            writeln!(
                stdout,
                "wrote {} metric rows and {} checkpoints to {}",
                out.records.len(),
                out.checkpoints.len(),
                out_dir.display()
            )?;
        }
        Command::Refine { approx, net, dist, steps, batch, seed, lr, out } => {
            let Approximant::Quadratic(init) = read_approx(&approx)? else {
                return Err(Error::InvalidInput("refine needs a quadratic approximant".into()));
            };
            let net = network_from_bundle(&TensorBundle::read(net)?)?;
            let mixture = load_distribution(dist)?.into_mixture();
            let cfg = RefineConfig { steps, batch, seed, step_size: lr, ..Default::default() };
            let refined = refine_quadratic(&init, &net, &mixture, &cfg)?;
            approximant_to_bundle(&Approximant::Quadratic(refined)).write(out)?;
        }
    }
    Ok(())
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
