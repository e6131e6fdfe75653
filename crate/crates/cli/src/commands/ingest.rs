//! `pgp ingest`: MovieLens ratings → one dataset directory per bimonthly
//! window (dump format plus `eval_counts.csv` for held-out scoring).

use std::io::Write as _;
use std::path::PathBuf;

use clap::Args;
use pgp_core::datagen::save_dataset;
use pgp_core::ingest::{parse_ratings, window, WindowOptions};

use crate::kv::write_kv;
use crate::{CliError, ConfigArgs};

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// MovieLens ratings.csv path.
    #[arg(long)]
    pub ratings: PathBuf,
    /// MovieLens movies.csv path.
    #[arg(long)]
    pub movies: PathBuf,
    /// Output directory (one subdirectory per window).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_seen: Option<usize>,
    #[arg(long)]
    pub max_unseen: Option<usize>,
    #[arg(long)]
    pub year_start: Option<i32>,
    #[arg(long)]
    pub year_end: Option<i32>,
}

pub fn run(args: &IngestArgs) -> Result<(), CliError> {
    let cfg = args.config.load()?;
    let defaults = WindowOptions::default();
    let opts = WindowOptions {
        year_span: (
            args.year_start
                .map_or_else(|| cfg.i32_or("year_start", defaults.year_span.0), Ok)?,
            args.year_end
                .map_or_else(|| cfg.i32_or("year_end", defaults.year_span.1), Ok)?,
        ),
        max_seen: args
            .max_seen
            .map_or_else(|| cfg.usize_or("max_seen", defaults.max_seen), Ok)?,
        max_unseen: args
            .max_unseen
            .map_or_else(|| cfg.usize_or("max_unseen", defaults.max_unseen), Ok)?,
    };

    let (log, table) = parse_ratings(&args.ratings, &args.movies)?;
    let (windows, report) = window(&log, &table, &opts)?;
    for w in &report.skipped_windows {
        eprintln!("warning: window {w} has no training requests, skipped");
    }

    std::fs::create_dir_all(&args.out)?;
    for w in &windows {
        let dir = args.out.join(format!("window_{:02}", w.window_index));
        save_dataset(&w.to_dataset()?, &dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("eval_counts.csv"))?);
        writeln!(f, "content_id,movie_id,count").map_err(pgp_core::Error::Io)?;
        for (i, (&count, &movie)) in w.eval_counts.iter().zip(&w.movie_ids).enumerate() {
            writeln!(f, "{i},{movie},{count}").map_err(pgp_core::Error::Io)?;
        }
    }
    write_kv(
        &args.out.join("ingest_summary.kv"),
        &[
            ("total_records".into(), report.total_records.to_string()),
            ("skipped_rows".into(), log.skipped.to_string()),
            ("out_of_window".into(), report.out_of_window.to_string()),
            ("windows".into(), windows.len().to_string()),
            (
                "skipped_windows".into(),
                format!("{:?}", report.skipped_windows),
            ),
        ],
    )?;
    println!(
        "{} windows written to {} ({} records, {} out-of-window, {} rows skipped)",
        windows.len(),
        args.out.display(),
        report.total_records,
        report.out_of_window,
        log.skipped
    );
    Ok(())
}
