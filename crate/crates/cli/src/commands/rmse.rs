//! `pgp rmse`: prediction-accuracy grid. For every (M, N, replication) a
//! fresh synthetic cell-level dataset is generated; each backend predicts
//! Type-1 rates for seen contents and Type-2 means for unseen ones, scored
//! by RMSE against the generating popularities.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use pgp_core::datagen::{derive_seed, gen_cell_level, CellGenConfig};
use rayon::prelude::*;

use crate::commands::{mean_and_stderr, rmse, run_backend, BackendKind, STREAM_FIT, STREAM_GEN};
use crate::{CliError, ConfigArgs, ExperimentConfig};

#[derive(Args, Debug)]
pub struct RmseArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for results and plot files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
struct Row {
    backend: &'static str,
    m: usize,
    n: usize,
    rep: usize,
    t1: f64,
    t2: Option<f64>,
}

pub fn run(args: &RmseArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let master = cfg.master_seed()?;
    let m_list = cfg.list_usize_or("m_list", &[100])?;
    let n_list = cfg.list_usize_or("n_list", &[20, 80])?;
    let reps = cfg.usize_or("replications", 10)?;
    let backends: Vec<BackendKind> = cfg
        .list_str_or("backends", &["mle", "vb", "hmc"])
        .iter()
        .map(|s| BackendKind::parse(s))
        .collect::<Result<_, _>>()?;

    // task list: one dataset per (m, n, rep), every backend scored on it
    let mut tasks = Vec::new();
    for &m in &m_list {
        for &n in &n_list {
            for rep in 0..reps {
                tasks.push((m, n, rep));
            }
        }
    }

    let results: Vec<Result<Vec<Row>, CliError>> = tasks
        .par_iter()
        .map(|&(m, n, rep)| {
            let task_id = ((m as u64) << 24 ^ (n as u64) << 12 ^ rep as u64) & 0xFFFF_FFFF;
            let gen_cfg = CellGenConfig::defaults(m, n, derive_seed(master, STREAM_GEN + task_id));
            let ds = gen_cell_level(&gen_cfg)?;
            let truth = ds.truth.as_ref().expect("generated datasets carry truth");
            let seen_truth: Vec<f64> = (0..ds.n_total())
                .filter(|&i| ds.seen_mask[i])
                .map(|i| truth.popularities[i])
                .collect();
            let unseen_truth: Vec<f64> = (0..ds.n_total())
                .filter(|&i| !ds.seen_mask[i])
                .map(|i| truth.popularities[i])
                .collect();

            let mut rows = Vec::new();
            for &backend in &backends {
                let fit = run_backend(backend, &ds, &cfg, derive_seed(master, STREAM_FIT + task_id))?;
                let t1 = rmse(&fit.seen_rates, &seen_truth);
                let t2 = fit
                    .unseen_means
                    .as_ref()
                    .filter(|_| !unseen_truth.is_empty())
                    .map(|u| rmse(u, &unseen_truth));
                rows.push(Row {
                    backend: backend.name(),
                    m,
                    n,
                    rep,
                    t1,
                    t2,
                });
            }
            Ok(rows)
        })
        .collect();

    // flush whatever succeeded before surfacing the first failure
    let mut rows: Vec<Row> = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(mut batch) => rows.append(&mut batch),
            Err(e) => first_err = first_err.or(Some(e)),
        }
    }
    rows.sort_by(|a, b| {
        (a.backend, a.m, a.n, a.rep).cmp(&(b.backend, b.m, b.n, b.rep))
    });

    std::fs::create_dir_all(&args.out)?;
    write_rows(&args.out.join("rmse.csv"), &rows)?;
    write_summary_and_plots(&args.out, &rows, &backends, &m_list, &n_list, &cfg)?;

    match first_err {
        Some(e) => Err(e),
        None => {
            println!("{} rows written to {}", rows.len(), args.out.display());
            Ok(())
        }
    }
}

fn write_rows(path: &Path, rows: &[Row]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "backend,M,N,replication,rmse_type1,rmse_type2").map_err(pgp_core::Error::Io)?;
    for r in rows {
        let t2 = r.t2.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{t2}", r.backend, r.m, r.n, r.rep, r.t1)
            .map_err(pgp_core::Error::Io)?;
    }
    Ok(())
}

fn write_summary_and_plots(
    out: &Path,
    rows: &[Row],
    backends: &[BackendKind],
    m_list: &[usize],
    n_list: &[usize],
    cfg: &ExperimentConfig,
) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("rmse_summary.csv"))?);
    writeln!(
        f,
        "backend,M,N,mean_rmse_type1,stderr_rmse_type1,mean_rmse_type2,stderr_rmse_type2"
    )
    .map_err(pgp_core::Error::Io)?;
    let select = |backend: &str, m: usize, n: usize| -> (Vec<f64>, Vec<f64>) {
        let t1 = rows
            .iter()
            .filter(|r| r.backend == backend && r.m == m && r.n == n)
            .map(|r| r.t1)
            .collect();
        let t2 = rows
            .iter()
            .filter(|r| r.backend == backend && r.m == m && r.n == n)
            .filter_map(|r| r.t2)
            .collect();
        (t1, t2)
    };
    for backend in backends {
        for &m in m_list {
            for &n in n_list {
                let (t1, t2) = select(backend.name(), m, n);
                if t1.is_empty() {
                    continue;
                }
                let (m1, s1) = mean_and_stderr(&t1);
                if t2.is_empty() {
                    writeln!(f, "{},{m},{n},{m1},{s1},,", backend.name())
                        .map_err(pgp_core::Error::Io)?;
                } else {
                    let (m2, s2) = mean_and_stderr(&t2);
                    writeln!(f, "{},{m},{n},{m1},{s1},{m2},{s2}", backend.name())
                        .map_err(pgp_core::Error::Io)?;
                }
            }
        }
    }
    drop(f);

    // per-M plot data: N column then (mean, se) per backend
    for &m in m_list {
        for (fig, pick) in [("fig4", 0usize), ("fig5", 1usize)] {
            let dat_name = format!("{fig}_M{m}.dat");
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join(&dat_name))?);
            write!(f, "# N").map_err(pgp_core::Error::Io)?;
            for b in backends {
                write!(f, " {0}_mean {0}_se", b.name()).map_err(pgp_core::Error::Io)?;
            }
            writeln!(f).map_err(pgp_core::Error::Io)?;
            for &n in n_list {
                write!(f, "{n}").map_err(pgp_core::Error::Io)?;
                for b in backends {
                    let (t1, t2) = select(b.name(), m, n);
                    let series = if pick == 0 { t1 } else { t2 };
                    if series.is_empty() {
                        write!(f, " nan nan").map_err(pgp_core::Error::Io)?;
                    } else {
                        let (mean, se) = mean_and_stderr(&series);
                        write!(f, " {mean} {se}").map_err(pgp_core::Error::Io)?;
                    }
                }
                writeln!(f).map_err(pgp_core::Error::Io)?;
            }
            drop(f);

            let title = if pick == 0 {
                "Type-1 prediction RMSE vs N"
            } else {
                "Type-2 prediction RMSE vs N"
            };
            let mut g = std::io::BufWriter::new(
                std::fs::File::create(out.join(format!("{fig}_M{m}.gp")))?,
            );
            writeln!(
                g,
                "set terminal pngcairo size 800,600\nset output '{fig}_M{m}.png'\n\
                 set title '{title} (M={m}, R={})'\nset xlabel 'N observations'\n\
                 set ylabel 'RMSE'\nset key top right",
                cfg.usize_or("replications", 10)?
            )
            .map_err(pgp_core::Error::Io)?;
            write!(g, "plot").map_err(pgp_core::Error::Io)?;
            for (i, b) in backends.iter().enumerate() {
                let col = 2 + 2 * i;
                let sep = if i == 0 { " " } else { ", " };
                write!(
                    g,
                    "{sep}'{dat_name}' using 1:{col}:{} with yerrorlines title '{}'",
                    col + 1,
                    b.name()
                )
                .map_err(pgp_core::Error::Io)?;
            }
            writeln!(g).map_err(pgp_core::Error::Io)?;
        }
    }
    Ok(())
}
