//! `pgp gen`: synthetic dataset generation into the dump format.

use std::path::PathBuf;

use clap::Args;
use pgp_core::datagen::{
    gen_cell_level, gen_user_level, save_dataset, CellGenConfig, UserGenConfig,
};

use crate::{CliError, ConfigArgs};

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// cell (prediction experiments) or user (CHR experiments).
    #[arg(long, default_value = "cell")]
    pub mode: String,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seen contents M.
    #[arg(long)]
    pub m: Option<usize>,
    /// Training time slots N.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dirichlet concentration (user mode).
    #[arg(long)]
    pub omega: Option<f64>,
    /// Kernel vertical scale (user mode).
    #[arg(long)]
    pub alpha0: Option<f64>,
}

pub fn run(args: &GenArgs) -> Result<(), CliError> {
    let mut cfg = args.config.load()?;
    if let Some(m) = args.m {
        cfg.set("m", m.to_string());
    }
    if let Some(n) = args.n {
        cfg.set("n", n.to_string());
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(omega) = args.omega {
        cfg.set("omega", omega.to_string());
    }
    if let Some(alpha0) = args.alpha0 {
        cfg.set("alpha0", alpha0.to_string());
    }

    let m = cfg.usize_or("m", 100)?;
    let n = cfg.usize_or("n", 20)?;
    let seed = cfg.u64_or("seed", 0)?;
    let ds = match args.mode.as_str() {
        "cell" => {
            let mut gen = CellGenConfig::defaults(m, n, seed);
            gen.unseen_fraction = cfg.f64_or("unseen_fraction", gen.unseen_fraction)?;
            gen_cell_level(&gen)?
        }
        "user" => {
            let mut gen = UserGenConfig::defaults(m, n, seed);
            gen.unseen_fraction = cfg.f64_or("unseen_fraction", gen.unseen_fraction)?;
            gen.users = cfg.usize_or("users", gen.users)?;
            gen.p_user_features = cfg.usize_or("p_features", gen.p_user_features)?;
            gen.dirichlet_omega = cfg.f64_or("omega", gen.dirichlet_omega)?;
            gen.alpha0 = cfg.f64_or("alpha0", gen.alpha0)?;
            gen.eta = cfg.f64_or("eta", gen.eta)?;
            gen.beta = cfg.f64_or("beta", gen.beta)?;
            gen.size_range = (
                cfg.f64_or("size_lo", gen.size_range.0)?,
                cfg.f64_or("size_hi", gen.size_range.1)?,
            );
            gen_user_level(&gen)?
        }
        other => {
            return Err(CliError::Config(format!(
                "mode must be cell or user, got {other:?}"
            )))
        }
    };
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} contents ({} seen) x {} slots to {}",
        ds.n_total(),
        ds.n_seen(),
        ds.requests.n_slots(),
        args.out.display()
    );
    Ok(())
}
