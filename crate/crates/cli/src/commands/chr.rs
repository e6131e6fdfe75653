//! `pgp chr`: cache-hit-ratio sweeps. Synthetic mode fits every policy on a
//! user-level workload and scores placements on freshly drawn future slots;
//! MovieLens mode does the same per bimonthly window against the held-out
//! evaluation half.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use pgp_core::cache::{evaluate_chr_totals, mle_rand_place, place, write_plan_csv, CachePlan};
use pgp_core::datagen::{derive_seed, gen_future_requests, gen_user_level, SyntheticDataset, UserGenConfig};
use pgp_core::ingest::{parse_ratings, window, WindowOptions};
use rayon::prelude::*;

use crate::commands::{run_backend, BackendKind, STREAM_FIT, STREAM_FUTURE, STREAM_GEN, STREAM_MLERAND};
use crate::{CliError, ConfigArgs, ExperimentConfig};

#[derive(Args, Debug)]
pub struct ChrArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for results and plot files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
struct Row {
    policy: String,
    capacity: f64,
    rep: usize,
    chr: f64,
}

/// Per-policy popularity estimates over the full catalog, used for placement.
fn policy_popularities(
    policy: &str,
    ds: &SyntheticDataset,
    cfg: &ExperimentConfig,
    fit_seed: u64,
) -> Result<Option<Vec<f64>>, CliError> {
    let kind = match policy {
        "mle-rand" => return Ok(None), // places directly, no popularity vector
        other => BackendKind::parse(other)?,
    };
    let fit = run_backend(kind, ds, cfg, fit_seed)?;
    let mut pops = vec![0.0; ds.n_total()];
    let mut seen_iter = fit.seen_rates.iter();
    let mut unseen_iter = fit.unseen_means.as_ref().map(|u| u.iter());
    for (pop, &seen) in pops.iter_mut().zip(&ds.seen_mask) {
        if seen {
            *pop = *seen_iter.next().expect("seen rate per seen content");
        } else if let Some(it) = unseen_iter.as_mut() {
            // backends without Type-2 support leave unseen popularity at 0
            *pop = *it.next().expect("unseen mean per unseen content");
        }
    }
    Ok(Some(pops))
}

fn plan_for(
    policy: &str,
    pops: Option<&[f64]>,
    ds: &SyntheticDataset,
    capacity: f64,
    mle_rand_seed: u64,
) -> Result<CachePlan, CliError> {
    match pops {
        Some(p) => Ok(place(p, &ds.catalog, capacity)?),
        None => {
            debug_assert_eq!(policy, "mle-rand");
            Ok(mle_rand_place(&ds.requests, &ds.catalog, capacity, mle_rand_seed)?)
        }
    }
}

pub fn run(args: &ChrArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let mode = cfg.str_or("mode", "user").to_string();
    let capacity_grid = cfg.list_f64_or("capacity_grid", &[0.1, 0.2, 0.3, 0.4, 0.5])?;
    let policies = cfg.list_str_or("policies", &["pgp-vb", "mle", "mle-rand"]);
    std::fs::create_dir_all(&args.out)?;

    let rows = match mode.as_str() {
        "user" => synthetic_rows(&cfg, &capacity_grid, &policies, &args.out)?,
        "movielens" => movielens_rows(&cfg, &capacity_grid, &policies)?,
        other => {
            return Err(CliError::Config(format!(
                "mode must be user or movielens, got {other:?}"
            )))
        }
    };

    let mut rows = rows;
    rows.sort_by(|a, b| {
        (&a.policy, a.rep)
            .cmp(&(&b.policy, b.rep))
            .then(a.capacity.partial_cmp(&b.capacity).unwrap())
    });
    write_rows(&args.out.join("chr.csv"), &rows)?;
    write_summary_and_plot(&args.out, &rows, &policies, &capacity_grid, &mode)?;
    println!("{} rows written to {}", rows.len(), args.out.display());
    Ok(())
}

fn synthetic_rows(
    cfg: &ExperimentConfig,
    capacity_grid: &[f64],
    policies: &[String],
    out: &Path,
) -> Result<Vec<Row>, CliError> {
    let master = cfg.master_seed()?;
    let reps = cfg.usize_or("replications", 10)?;
    let m = cfg.usize_or("m", 200)?;
    let n = cfg.usize_or("n", 40)?;
    let eval_slots = cfg.usize_or("eval_slots", 30)?;
    let dump_plans = cfg.bool_or("dump_plans", false)?;

    let per_rep: Vec<Result<Vec<Row>, CliError>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_id = rep as u64;
            let mut gen = UserGenConfig::defaults(m, n, derive_seed(master, STREAM_GEN + rep_id));
            gen.dirichlet_omega = cfg.f64_or("omega", gen.dirichlet_omega)?;
            gen.alpha0 = cfg.f64_or("alpha0", gen.alpha0)?;
            gen.users = cfg.usize_or("users", gen.users)?;
            gen.p_user_features = cfg.usize_or("p_features", gen.p_user_features)?;
            let ds = gen_user_level(&gen)?;
            let truth = ds.truth.as_ref().expect("generated datasets carry truth");
            let future = gen_future_requests(
                truth.popularities.as_slice(),
                eval_slots,
                derive_seed(master, STREAM_FUTURE + rep_id),
            )?;
            let future_totals = future.row_sums();
            let total_size = ds.catalog.total_size();

            let mut rows = Vec::new();
            for policy in policies {
                let pops =
                    policy_popularities(policy, &ds, cfg, derive_seed(master, STREAM_FIT + rep_id))?;
                for &frac in capacity_grid {
                    let plan = plan_for(
                        policy,
                        pops.as_deref(),
                        &ds,
                        frac * total_size,
                        derive_seed(master, STREAM_MLERAND + rep_id),
                    )?;
                    let chr = evaluate_chr_totals(&plan, future_totals.as_slice())?;
                    if dump_plans && rep == 0 {
                        let dir = out.join("plans");
                        std::fs::create_dir_all(&dir)?;
                        let fallback = pgp_core::posterior::mle_popularity(&ds.requests);
                        let mut padded = vec![0.0; ds.n_total()];
                        let mut it = fallback.iter();
                        for (pad, &seen) in padded.iter_mut().zip(&ds.seen_mask) {
                            if seen {
                                *pad = *it.next().unwrap();
                            }
                        }
                        write_plan_csv(
                            &plan,
                            &ds.catalog,
                            pops.as_deref().unwrap_or(&padded),
                            &dir.join(format!("plan_{policy}_cap{frac}.csv")),
                        )?;
                    }
                    rows.push(Row {
                        policy: policy.clone(),
                        capacity: frac,
                        rep,
                        chr,
                    });
                }
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_rep {
        rows.append(&mut r?);
    }
    Ok(rows)
}

fn movielens_rows(
    cfg: &ExperimentConfig,
    capacity_grid: &[f64],
    policies: &[String],
) -> Result<Vec<Row>, CliError> {
    let master = cfg.master_seed()?;
    let ratings = cfg
        .get("ratings")
        .ok_or_else(|| CliError::Config("movielens mode needs ratings = <path>".into()))?;
    let movies = cfg
        .get("movies")
        .ok_or_else(|| CliError::Config("movielens mode needs movies = <path>".into()))?;
    let defaults = WindowOptions::default();
    let opts = WindowOptions {
        year_span: (
            cfg.i32_or("year_start", defaults.year_span.0)?,
            cfg.i32_or("year_end", defaults.year_span.1)?,
        ),
        max_seen: cfg.usize_or("max_seen", defaults.max_seen)?,
        max_unseen: cfg.usize_or("max_unseen", defaults.max_unseen)?,
    };
    let (log, table) = parse_ratings(Path::new(ratings), Path::new(movies))?;
    let (windows, _) = window(&log, &table, &opts)?;

    let per_window: Vec<Result<Vec<Row>, CliError>> = windows
        .par_iter()
        .map(|w| {
            let ds = w.to_dataset()?;
            let totals: Vec<f64> = w.eval_counts.iter().map(|&c| c as f64).collect();
            let total_size = ds.catalog.total_size();
            let rep_id = w.window_index as u64;
            let mut rows = Vec::new();
            for policy in policies {
                let pops =
                    policy_popularities(policy, &ds, cfg, derive_seed(master, STREAM_FIT + rep_id))?;
                for &frac in capacity_grid {
                    let plan = plan_for(
                        policy,
                        pops.as_deref(),
                        &ds,
                        frac * total_size,
                        derive_seed(master, STREAM_MLERAND + rep_id),
                    )?;
                    rows.push(Row {
                        policy: policy.clone(),
                        capacity: frac,
                        rep: w.window_index,
                        chr: evaluate_chr_totals(&plan, &totals)?,
                    });
                }
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_window {
        rows.append(&mut r?);
    }
    Ok(rows)
}

fn write_rows(path: &Path, rows: &[Row]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "policy,capacity_fraction,replication,chr").map_err(pgp_core::Error::Io)?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.policy, r.capacity, r.rep, r.chr)
            .map_err(pgp_core::Error::Io)?;
    }
    Ok(())
}

fn write_summary_and_plot(
    out: &Path,
    rows: &[Row],
    policies: &[String],
    capacity_grid: &[f64],
    mode: &str,
) -> Result<(), CliError> {
    let fig = if mode == "movielens" { "fig8" } else { "fig6" };
    let dat_name = format!("{fig}.dat");
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join(&dat_name))?);
    write!(f, "# capacity").map_err(pgp_core::Error::Io)?;
    for p in policies {
        write!(f, " {p}_mean {p}_se").map_err(pgp_core::Error::Io)?;
    }
    writeln!(f).map_err(pgp_core::Error::Io)?;
    for &cap in capacity_grid {
        write!(f, "{cap}").map_err(pgp_core::Error::Io)?;
        for p in policies {
            let series: Vec<f64> = rows
                .iter()
                .filter(|r| &r.policy == p && (r.capacity - cap).abs() < 1e-12)
                .map(|r| r.chr)
                .collect();
            let (mean, se) = crate::commands::mean_and_stderr(&series);
            write!(f, " {mean} {se}").map_err(pgp_core::Error::Io)?;
        }
        writeln!(f).map_err(pgp_core::Error::Io)?;
    }
    drop(f);

    let mut g = std::io::BufWriter::new(std::fs::File::create(out.join(format!("{fig}.gp")))?);
    writeln!(
        g,
        "set terminal pngcairo size 800,600\nset output '{fig}.png'\n\
         set title 'Cache hit ratio vs capacity ({mode})'\nset xlabel 'capacity fraction'\n\
         set ylabel 'CHR'\nset key bottom right"
    )
    .map_err(pgp_core::Error::Io)?;
    write!(g, "plot").map_err(pgp_core::Error::Io)?;
    for (i, p) in policies.iter().enumerate() {
        let col = 2 + 2 * i;
        let sep = if i == 0 { " " } else { ", " };
        write!(
            g,
            "{sep}'{dat_name}' using 1:{col}:{} with yerrorlines title '{p}'",
            col + 1
        )
        .map_err(pgp_core::Error::Io)?;
    }
    writeln!(g).map_err(pgp_core::Error::Io)?;
    Ok(())
}
