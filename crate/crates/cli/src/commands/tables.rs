//! `pgp tables`: aggregate θ estimates from fit artifacts into a
//! parameter-recovery table with one column per (backend, M, N) group.
//!
//! Column order is fixed: `param,true_value`, then groups sorted by
//! backend name, then M, then N.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use clap::Args;
use walk_summaries::collect_summaries;

use crate::kv::read_kv;
use crate::{CliError, ConfigArgs};

#[derive(Args, Debug)]
pub struct TablesArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Fit artifact directories (each holding a summary.kv), comma separated;
    /// directories are searched one level deep as well.
    #[arg(long, value_delimiter = ',')]
    pub fits: Vec<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

mod walk_summaries {
    use super::*;

    pub fn collect_summaries(dirs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
        let mut found = Vec::new();
        for dir in dirs {
            let direct = dir.join("summary.kv");
            if direct.exists() {
                found.push(direct);
                continue;
            }
            let entries = std::fs::read_dir(dir).map_err(|e| {
                CliError::Config(format!("cannot read fits directory {}: {e}", dir.display()))
            })?;
            let mut subs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path().join("summary.kv"))
                .filter(|p| p.exists())
                .collect();
            subs.sort();
            found.extend(subs);
        }
        if found.is_empty() {
            return Err(CliError::Config("no summary.kv artifacts found".into()));
        }
        Ok(found)
    }
}

pub fn run(args: &TablesArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    // the generating values for the synthetic experiments; overridable when
    // tabulating a different ground truth
    let truth: Vec<f64> =
        cfg.list_f64_or("truth_theta", &[1e-4, 0.1, 0.25, 0.0, 0.1, 0.5])?;

    let summaries = collect_summaries(&args.fits)?;
    // (backend, m, n) -> per-parameter running sums and count
    let mut groups: BTreeMap<(String, u64, u64), (Vec<f64>, usize)> = BTreeMap::new();
    let mut n_params = 0usize;
    for path in &summaries {
        let kv = read_kv(path)?;
        let get = |key: &str| -> Result<String, CliError> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("{}: missing {key}", path.display())))
        };
        let backend = get("backend")?;
        let m: u64 = get("m_seen")?
            .parse()
            .map_err(|_| CliError::Config(format!("{}: bad m_seen", path.display())))?;
        let n: u64 = get("n_slots")?
            .parse()
            .map_err(|_| CliError::Config(format!("{}: bad n_slots", path.display())))?;
        let mut theta = vec![get("theta_eta")?
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("{}: bad theta_eta", path.display())))?];
        let mut q = 0;
        while let Some(v) = kv.get(&format!("theta_alpha_{q}")) {
            theta.push(v.parse::<f64>().map_err(|_| {
                CliError::Config(format!("{}: bad theta_alpha_{q}", path.display()))
            })?);
            q += 1;
        }
        n_params = n_params.max(theta.len());
        let entry = groups
            .entry((backend, m, n))
            .or_insert_with(|| (vec![0.0; theta.len()], 0));
        if entry.0.len() != theta.len() {
            return Err(CliError::Config(format!(
                "{}: inconsistent parameter count",
                path.display()
            )));
        }
        for (acc, v) in entry.0.iter_mut().zip(&theta) {
            *acc += v;
        }
        entry.1 += 1;
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    write!(f, "param,true_value").map_err(pgp_core::Error::Io)?;
    for (backend, m, n) in groups.keys() {
        write!(f, ",{backend}_M{m}_N{n}").map_err(pgp_core::Error::Io)?;
    }
    writeln!(f).map_err(pgp_core::Error::Io)?;
    let param_name = |i: usize| {
        if i == 0 {
            "eta".to_string()
        } else {
            format!("alpha_{}", i - 1)
        }
    };
    for i in 0..n_params {
        let true_v = truth
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        write!(f, "{},{true_v}", param_name(i)).map_err(pgp_core::Error::Io)?;
        for (sums, count) in groups.values() {
            match sums.get(i) {
                Some(s) => write!(f, ",{}", s / *count as f64).map_err(pgp_core::Error::Io)?,
                None => write!(f, ",").map_err(pgp_core::Error::Io)?,
            }
        }
        writeln!(f).map_err(pgp_core::Error::Io)?;
    }
    println!(
        "table over {} artifacts in {} groups written to {}",
        summaries.len(),
        groups.len(),
        args.out.display()
    );
    Ok(())
}
