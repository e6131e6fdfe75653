//! `pgp fit`: run one inference backend on a dataset directory, writing a
//! per-content posterior CSV plus a machine-readable summary.

use std::io::Write as _;
use std::path::PathBuf;

use clap::Args;
use pgp_core::datagen::load_dataset;
use pgp_core::hmc::{posterior_mean_rates, sample, write_draws_csv};
use pgp_core::vb::{fit as vb_fit, vb_mean_rates, write_trace_csv, FitStatus};

use crate::commands::{gamma_priors_from, hmc_config_from, vb_config_from};
use crate::kv::write_kv;
use crate::{CliError, ConfigArgs};

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory (dump format).
    #[arg(long)]
    pub data: PathBuf,
    /// hmc or vb.
    #[arg(long)]
    pub backend: String,
    /// Output directory for the artifact files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also dump per-draw HMC states (draws.csv).
    #[arg(long, default_value_t = false)]
    pub dump_draws: bool,
    /// Also dump the VB block trace (trace.csv).
    #[arg(long, default_value_t = false)]
    pub dump_trace: bool,
}

pub fn run(args: &FitArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let seed = match args.seed {
        Some(s) => s,
        None => cfg.u64_or("seed", 0)?,
    };
    let ds = load_dataset(&args.data)?;
    let seen_features = ds.seen_features()?;
    let seen_ids: Vec<usize> = (0..ds.n_total()).filter(|&i| ds.seen_mask[i]).collect();
    std::fs::create_dir_all(&args.out)?;

    let mut summary: Vec<(String, String)> = vec![
        ("backend".into(), args.backend.clone()),
        ("data".into(), args.data.display().to_string()),
        ("seed".into(), seed.to_string()),
        ("m_seen".into(), seen_ids.len().to_string()),
        ("n_slots".into(), ds.requests.n_slots().to_string()),
        ("q_features".into(), seen_features.n_features().to_string()),
    ];

    match args.backend.as_str() {
        "vb" => {
            let vp = vb_fit(&ds.requests, &seen_features, &vb_config_from(&cfg)?, None)?;
            let rates = vb_mean_rates(&vp);
            let path = args.out.join("posterior.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "content_id,mu,sigma,mean_rate").map_err(pgp_core::Error::Io)?;
            for (row, &id) in seen_ids.iter().enumerate() {
                writeln!(f, "{id},{},{},{}", vp.mu[row], vp.sigma[row], rates[row])
                    .map_err(pgp_core::Error::Io)?;
            }
            summary.push((
                "status".into(),
                match vp.status {
                    FitStatus::Converged => "converged".into(),
                    FitStatus::MaxIterations => "max_iterations".into(),
                    FitStatus::ConvergedWithWarning => "converged_with_warning".into(),
                },
            ));
            summary.push((
                "l_final".into(),
                vp.elbo_trace.last().copied().unwrap_or(f64::NAN).to_string(),
            ));
            summary.push(("theta_eta".into(), vp.theta.eta().to_string()));
            for (q, a) in vp.theta.alphas().iter().enumerate() {
                summary.push((format!("theta_alpha_{q}"), a.to_string()));
            }
            if args.dump_trace {
                write_trace_csv(&vp, &args.out.join("trace.csv"))?;
            }
        }
        "hmc" => {
            let hmc_cfg = hmc_config_from(&cfg, seed)?;
            let priors = gamma_priors_from(&cfg, seen_features.n_features())?;
            let samples = sample(&ds.requests, &seen_features, &priors, &hmc_cfg, None)
                .map_err(|e| match e {
                    pgp_core::Error::Sampler(msg) => {
                        pgp_core::Error::Sampler(format!("acceptance collapsed: {msg}"))
                    }
                    other => other,
                })?;
            let rates = posterior_mean_rates(&samples);
            let path = args.out.join("posterior.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "content_id,lambda_mean,lambda_variance,mean_rate")
                .map_err(pgp_core::Error::Io)?;
            let s = samples.n_draws() as f64;
            for (row, &id) in seen_ids.iter().enumerate() {
                let col = samples.lambda_draws.column(row);
                let mean = col.sum() / s;
                let var = col.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / s;
                writeln!(f, "{id},{mean},{var},{}", rates[row]).map_err(pgp_core::Error::Io)?;
            }
            summary.push(("accept_rate".into(), samples.accept_rate.to_string()));
            summary.push(("draws".into(), hmc_cfg.num_samples.to_string()));
            summary.push(("burn_in".into(), hmc_cfg.burn_in.to_string()));
            summary.push(("step_size".into(), hmc_cfg.step_size.to_string()));
            summary.push(("leapfrog".into(), hmc_cfg.leapfrog_steps.to_string()));
            let theta = samples.theta_means();
            summary.push(("theta_eta".into(), theta[0].to_string()));
            for q in 1..theta.len() {
                summary.push((format!("theta_alpha_{}", q - 1), theta[q].to_string()));
            }
            if args.dump_draws {
                write_draws_csv(&samples, &args.out.join("draws.csv"))?;
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "backend must be vb or hmc, got {other:?}"
            )))
        }
    }

    write_kv(&args.out.join("summary.kv"), &summary)?;
    println!("fit artifact written to {}", args.out.display());
    Ok(())
}
