use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use relupdate::analytic::{
    approx_update_alignment, mc_update_alignment, predict_update_alignment, rho_closed_form,
    rho_equilibrium, rho_rollout, warmup_ratio_s, EquilibriumParams, NoiseModelParams,
};
use relupdate::experiment::{run_sweep, ExperimentConfig};
use relupdate::rng::{derive_seed, Gaussian, Stream};
use relupdate::schedule::{decay_away_factor, exp_increasing_factor};
use relupdate::trainer::{
    gradcheck, init_network, rescale_invariance_check, write_loss_jsonl, write_metric_csv,
    Normalization, RescaleVariant, SyntheticTask, Trainer,
};
use relupdate::{Error, Result};

/// Gradient check threshold on the max relative error.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "relupdate", version, about = "Relative-update and alignment laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveKind {
    ExpIncreasing,
    DecayAway,
    /// Constant-rate ratio s_t between (η/m, mλ) and (η, λ).
    Ratio,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Norm,
    Gain,
    Homogeneous,
}

impl From<VariantArg> for RescaleVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Norm => RescaleVariant::Norm,
            VariantArg::Gain => RescaleVariant::Gain,
            VariantArg::Homogeneous => RescaleVariant::Homogeneous,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form and approximate update alignment of the noise model.
    PredictAlignment {
        #[arg(long = "C")]
        c: usize,
        #[arg(long = "B")]
        b: usize,
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo update alignment of the noise model.
    McAlignment {
        #[arg(long = "C")]
        c: usize,
        #[arg(long = "B")]
        b: usize,
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long, default_value_t = 5000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weight-RMS trajectory of the norm recurrence at constant learning rate.
    EquilibriumCurve {
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        rho0: f64,
        #[arg(long)]
        steps: usize,
        /// Elementwise update RMS scale.
        #[arg(long, default_value_t = 1.0)]
        b: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warmup factor or width-scaling ratio over time.
    WarmupCurve {
        #[arg(long, value_enum)]
        kind: CurveKind,
        #[arg(long)]
        m: f64,
        /// Exp-increasing warmup length.
        #[arg(long, default_value_t = 0)]
        tw: u64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Initial weight RMS for `ratio`; defaults to the equilibrium value.
        #[arg(long)]
        rho0: Option<f64>,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network and emit its per-layer metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss stream (JSON lines).
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Two-phase learning-rate transfer sweep; emits the transfer table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-run metric and loss logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Output deviation under function-preserving weight rescalings.
    InvarianceCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kappa: f64,
        /// Defaults to every variant applicable to the configured network.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backprop gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Failure that maps to a specific exit code.
enum Failure {
    Error(Error),
    Diverged(String),
    Check(String),
    /// Stdout closed by the reader, e.g. `| head`.
    ClosedPipe,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            Failure::ClosedPipe
        } else {
            Failure::Error(e.into())
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::PredictAlignment { c, b, phi, out } => {
            let p = NoiseModelParams::new(c, b, phi);
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "C,B,phi,predicted,approx")?;
            writeln!(
                w,
                "{c},{b},{phi},{},{}",
                predict_update_alignment(&p),
                approx_update_alignment(&p)
            )?;
            w.flush()?;
        }
        Command::McAlignment {
            c,
            b,
            phi,
            trials,
            seed,
            out,
        } => {
            let p = NoiseModelParams::new(c, b, phi);
            let est = mc_update_alignment(&p, trials, seed)?;
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "C,B,phi,trials,seed,mean,stderr,moment_ratio,predicted")?;
            writeln!(
                w,
                "{c},{b},{phi},{trials},{seed},{},{},{},{}",
                est.mean,
                est.stderr,
                est.moment_ratio,
                predict_update_alignment(&p)
            )?;
            w.flush()?;
        }
        Command::EquilibriumCurve {
            eta,
            lambda,
            rho0,
            steps,
            b,
            out,
        } => {
            let rho = rho_rollout(&vec![eta; steps], lambda, rho0, b)?;
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "t,rho,closed_form,rel_update")?;
            for (t, r) in rho.iter().enumerate() {
                let cf = rho_closed_form(t as u64, eta, lambda, rho0, b)?;
                writeln!(w, "{t},{r},{cf},{}", b * eta / r)?;
            }
            w.flush()?;
        }
        Command::WarmupCurve {
            kind,
            m,
            tw,
            eta,
            lambda,
            rho0,
            steps,
            out,
        } => {
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "t,factor")?;
            let history = vec![eta * lambda; steps as usize];
            let params = match kind {
                CurveKind::Ratio => {
                    let rho0 = match rho0 {
                        Some(r) => r,
                        None => rho_equilibrium(eta, lambda)?,
                    };
                    Some(EquilibriumParams::new(eta, lambda, rho0, m))
                }
                _ => None,
            };
            if matches!(kind, CurveKind::ExpIncreasing) && tw == 0 {
                return Err(Error::Config("exp-increasing warmup needs --tw > 0".into()).into());
            }
            for t in 0..=steps {
                let f = match kind {
                    CurveKind::ExpIncreasing => exp_increasing_factor(t, tw, m),
                    CurveKind::DecayAway => decay_away_factor(t as usize, &history, m)?,
                    CurveKind::Ratio => warmup_ratio_s(t, params.as_ref().expect("set above"))?,
                };
                writeln!(w, "{t},{f}")?;
            }
            w.flush()?;
        }
        Command::Train {
            config,
            out,
            loss_out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = Trainer::new(&cfg.network, &cfg.task, &cfg.train_config()?)?.run()?;
            let mut w = open_out(out.as_deref())?;
            write_metric_csv(&result.rows, &mut w)?;
            w.flush()?;
            if let Some(path) = loss_out {
                write_loss_jsonl(&result.losses, BufWriter::new(File::create(path)?))?;
            }
            if let Some(reason) = result.diverged {
                return Err(Failure::Diverged(reason));
            }
            if let Some(loss) = result.final_loss() {
                eprintln!("final loss {loss}");
            }
        }
        Command::Sweep {
            config,
            out,
            log_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = match run_sweep(&cfg, log_dir.as_deref()) {
                Err(Error::AllDiverged(what)) => return Err(Failure::Diverged(what)),
                other => other?,
            };
            let mut w = open_out(out.as_deref())?;
            w.write_all(result.transfer_table().as_bytes())?;
            w.flush()?;
            eprintln!("frozen-group learning rate {}", result.frozen_groups_lr);
            if !result.phase2.is_empty() && result.phase2.iter().all(|r| r.diverged) {
                return Err(Failure::Diverged("every phase-2 run".into()));
            }
        }
        Command::InvarianceCheck {
            config,
            kappa,
            variant,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let train = cfg.train_config()?;
            let net = init_network(&cfg.network, derive_seed(train.seed, 0, Stream::Init))?;
            let task = SyntheticTask::new(&cfg.task, cfg.network.input_dim, cfg.network.num_classes)?;
            let mut g = Gaussian::from_seed(derive_seed(train.seed, 0, Stream::Probe));
            let (x, _) = task.sample(&mut g, train.probe_batch_size)?;
            let variants: Vec<RescaleVariant> = match variant {
                Some(v) => vec![v.into()],
                None => match cfg.network.normalization {
                    Normalization::RmsGain => vec![RescaleVariant::Norm],
                    Normalization::None => vec![RescaleVariant::Gain, RescaleVariant::Homogeneous],
                },
            };
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "variant,kappa,max_deviation")?;
            for v in variants {
                let dev = rescale_invariance_check(&net, &x, kappa, v).map_err(|e| match e {
                    Error::InvalidParameter(msg) => Error::Config(msg),
                    other => other,
                })?;
                let name = match v {
                    RescaleVariant::Norm => "norm",
                    RescaleVariant::Gain => "gain",
                    RescaleVariant::Homogeneous => "homogeneous",
                };
                writeln!(w, "{name},{kappa},{dev}")?;
            }
            w.flush()?;
        }
        Command::Gradcheck {
            config,
            batch,
            h,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = cfg.train.seed;
            let net = init_network(&cfg.network, derive_seed(seed, 0, Stream::Init))?;
            let task = SyntheticTask::new(&cfg.task, cfg.network.input_dim, cfg.network.num_classes)?;
            let mut g = Gaussian::from_seed(derive_seed(seed, 0, Stream::Data));
            let (x, labels) = task.sample(&mut g, batch)?;
            let rows = gradcheck(&net, &x, &labels, h)?;
            let mut w = open_out(out.as_deref())?;
            writeln!(w, "param,max_abs_err,max_rel_err,skipped")?;
            for r in &rows {
                writeln!(w, "{},{},{},{}", r.param, r.max_abs_err, r.max_rel_err, r.skipped)?;
            }
            w.flush()?;
            let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            if worst >= GRADCHECK_TOL {
                return Err(Failure::Check(format!(
                    "max relative error {worst} exceeds {GRADCHECK_TOL}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::ClosedPipe) => ExitCode::SUCCESS,
        Err(Failure::Diverged(reason)) => {
            eprintln!("error: run diverged: {reason}");
            ExitCode::from(3)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidParameter(_) => ExitCode::from(2),
                Error::Diverged { .. } | Error::AllDiverged(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
