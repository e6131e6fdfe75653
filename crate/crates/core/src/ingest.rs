//! MovieLens-style ratings ingestion: parse `ratings.csv`/`movies.csv`,
//! bucket events into bimonthly train/evaluation windows with one-day slots,
//! and emit per-window datasets with 18 binary genre features.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::cache::ContentCatalog;
use crate::datagen::SyntheticDataset;
use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::posterior::RequestMatrix;

/// The 18 genre indicators, in feature-column order. "(no genres listed)"
/// maps to the zero vector; tokens outside this list are ignored.
pub const GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub const N_GENRES: usize = GENRES.len();

/// Days of request observations per window, and days of held-out evaluation.
pub const TRAIN_DAYS: i64 = 30;
pub const EVAL_DAYS: i64 = 30;

const SECONDS_PER_DAY: i64 = 86_400;

/// Abort threshold: parsing fails when more than this fraction of data rows
/// is malformed.
const MALFORMED_ABORT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingRecord {
    pub user_id: u32,
    pub movie_id: u32,
    pub rating: f32,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
}

/// Parsed rating events; every record's movie id resolves in the movie table.
#[derive(Debug, Clone)]
pub struct RatingsLog {
    pub records: Vec<RatingRecord>,
    pub source_path: PathBuf,
    /// Malformed or unresolvable rows that were counted and skipped.
    pub skipped: usize,
}

/// Movie id → 18-dimensional genre indicator vector.
#[derive(Debug, Clone)]
pub struct MovieTable {
    features: HashMap<u32, Vec<f64>>,
}

impl MovieTable {
    pub fn features_of(&self, movie_id: u32) -> Option<&[f64]> {
        self.features.get(&movie_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Pipe-separated genre string → indicator vector.
pub fn genre_vector(genres: &str) -> Vec<f64> {
    let mut v = vec![0.0; N_GENRES];
    if genres == "(no genres listed)" {
        return v;
    }
    for token in genres.split('|') {
        if let Some(idx) = GENRES.iter().position(|g| *g == token) {
            v[idx] = 1.0;
        }
    }
    v
}

fn check_header(got: &csv::StringRecord, want: &[&str], what: &str) -> Result<()> {
    if got.len() < want.len() || got.iter().zip(want).any(|(g, w)| g != *w) {
        return Err(Error::Parse(format!(
            "{what}: expected header {want:?}, got {:?}",
            got.iter().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Parse MovieLens `ratings.csv` (userId,movieId,rating,timestamp) and
/// `movies.csv` (movieId,title,genres). Malformed rows are counted and
/// skipped; parsing aborts if they exceed 1% of the data rows.
pub fn parse_ratings(
    ratings_path: &Path,
    movies_path: &Path,
) -> Result<(RatingsLog, MovieTable)> {
    let mut movies_rdr = csv::Reader::from_path(movies_path)?;
    check_header(movies_rdr.headers()?, &["movieId", "title", "genres"], "movies.csv")?;
    let mut features = HashMap::new();
    for rec in movies_rdr.records() {
        let rec = rec?;
        let id: u32 = rec[0]
            .parse()
            .map_err(|_| Error::Parse(format!("movies.csv: bad movieId {:?}", &rec[0])))?;
        features.insert(id, genre_vector(&rec[2]));
    }
    let table = MovieTable { features };

    let mut rdr = csv::Reader::from_path(ratings_path)?;
    check_header(
        rdr.headers()?,
        &["userId", "movieId", "rating", "timestamp"],
        "ratings.csv",
    )?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut total_rows = 0usize;
    for rec in rdr.records() {
        total_rows += 1;
        let Ok(rec) = rec else {
            skipped += 1;
            continue;
        };
        let parsed = (|| -> Option<RatingRecord> {
            let user_id = rec.get(0)?.parse().ok()?;
            let movie_id = rec.get(1)?.parse().ok()?;
            let rating = rec.get(2)?.parse().ok()?;
            let timestamp: i64 = rec.get(3)?.parse().ok()?;
            (timestamp >= 0).then_some(RatingRecord {
                user_id,
                movie_id,
                rating,
                timestamp,
            })
        })();
        match parsed {
            Some(r) if table.features_of(r.movie_id).is_some() => records.push(r),
            _ => skipped += 1,
        }
    }
    if total_rows > 0 && skipped as f64 > MALFORMED_ABORT_FRACTION * total_rows as f64 {
        return Err(Error::Parse(format!(
            "{skipped} of {total_rows} rating rows malformed (over the 1% threshold)"
        )));
    }
    Ok((
        RatingsLog {
            records,
            source_path: ratings_path.to_path_buf(),
            skipped,
        },
        table,
    ))
}

/// One bimonthly window: 30 daily training slots over the catalog's seen
/// movies, plus held-out evaluation totals for the full catalog.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub window_index: usize,
    /// Seen movies × 30 daily slots.
    pub train: RequestMatrix,
    /// Per-catalog-content totals over the evaluation days.
    pub eval_counts: Vec<u64>,
    /// Catalog contents × 18 genre features.
    pub features: FeatureMatrix,
    pub seen_mask: Vec<bool>,
    /// Catalog movie ids, ascending.
    pub movie_ids: Vec<u32>,
    /// All rating events in the training days, catalog or not.
    pub train_total_events: u64,
    /// All rating events in the evaluation days, catalog or not.
    pub eval_total_events: u64,
}

impl WindowedDataset {
    pub fn n_contents(&self) -> usize {
        self.movie_ids.len()
    }

    /// Unit-size catalog (capacity fractions become content-count fractions).
    pub fn catalog(&self) -> Result<ContentCatalog> {
        ContentCatalog::unit_sizes(self.seen_mask.clone())
    }

    /// View as a dataset in the common dump format (no ground truth).
    pub fn to_dataset(&self) -> Result<SyntheticDataset> {
        Ok(SyntheticDataset {
            features: self.features.clone(),
            seen_mask: self.seen_mask.clone(),
            requests: self.train.clone(),
            truth: None,
            catalog: self.catalog()?,
        })
    }
}

/// Windowing controls.
#[derive(Debug, Clone)]
pub struct WindowOptions {
    /// Inclusive calendar-year span, e.g. (2010, 2011) for 12 windows.
    pub year_span: (i32, i32),
    /// Keep at most this many seen movies per window, by training count.
    pub max_seen: usize,
    /// Keep at most this many evaluation-only movies as unseen candidates.
    pub max_unseen: usize,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            year_span: (2010, 2011),
            max_seen: 500,
            max_unseen: 125,
        }
    }
}

/// Bookkeeping for the conservation identity:
/// parsed records = Σ windows (train + eval events) + out_of_window.
#[derive(Debug, Clone, Default)]
pub struct WindowReport {
    pub total_records: u64,
    pub out_of_window: u64,
    /// Window indices dropped for having zero training requests.
    pub skipped_windows: Vec<usize>,
}

fn interval_start_ts(year: i32, window_in_year: usize) -> i64 {
    let month = (2 * window_in_year + 1) as u32;
    NaiveDate::from_ymd_opt(year, month, 1)
        .expect("valid calendar date")
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc()
        .timestamp()
}

/// Split the log into bimonthly windows (UTC day boundaries, half-open):
/// days 0..30 of each interval train, days 30..60 evaluate, anything past
/// day 60 of an interval or outside the year span is out-of-window.
///
/// Seen contents are the top `max_seen` movies by training-window request
/// count; movies first appearing in the evaluation half become unseen
/// candidates. Content order is ascending movie id.
pub fn window(
    log: &RatingsLog,
    movies: &MovieTable,
    opts: &WindowOptions,
) -> Result<(Vec<WindowedDataset>, WindowReport)> {
    let (start_year, end_year) = opts.year_span;
    if end_year < start_year {
        return Err(Error::invalid("year span end before start"));
    }
    let n_windows = ((end_year - start_year + 1) as usize) * 6;
    let starts: Vec<i64> = (0..n_windows)
        .map(|w| interval_start_ts(start_year + (w / 6) as i32, w % 6))
        .collect();

    // per window: per-movie (train counts per day, eval total)
    struct Acc {
        train: HashMap<u32, [u64; TRAIN_DAYS as usize]>,
        eval: HashMap<u32, u64>,
        train_events: u64,
        eval_events: u64,
    }
    let mut accs: Vec<Acc> = (0..n_windows)
        .map(|_| Acc {
            train: HashMap::new(),
            eval: HashMap::new(),
            train_events: 0,
            eval_events: 0,
        })
        .collect();
    let mut report = WindowReport {
        total_records: log.records.len() as u64,
        ..WindowReport::default()
    };

    for rec in &log.records {
        let ts = rec.timestamp;
        // locate the window whose interval contains ts
        let idx = match starts.binary_search(&ts) {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        };
        let Some(w) = idx else {
            report.out_of_window += 1;
            continue;
        };
        // the last interval ends where the year after the span would begin
        let interval_end = if w + 1 < n_windows {
            starts[w + 1]
        } else {
            interval_start_ts(end_year + 1, 0)
        };
        if ts >= interval_end {
            report.out_of_window += 1;
            continue;
        }
        let day = (ts - starts[w]) / SECONDS_PER_DAY;
        if day < TRAIN_DAYS {
            accs[w].train_events += 1;
            accs[w].train.entry(rec.movie_id).or_insert([0; TRAIN_DAYS as usize])
                [day as usize] += 1;
        } else if day < TRAIN_DAYS + EVAL_DAYS {
            accs[w].eval_events += 1;
            *accs[w].eval.entry(rec.movie_id).or_insert(0) += 1;
        } else {
            report.out_of_window += 1;
        }
    }

    let mut windows = Vec::new();
    for (w, acc) in accs.into_iter().enumerate() {
        if acc.train_events == 0 {
            report.skipped_windows.push(w);
            continue;
        }

        // seen: top max_seen by train count, ties broken by ascending id
        let mut by_count: Vec<(u32, u64)> = acc
            .train
            .iter()
            .map(|(&id, days)| (id, days.iter().sum()))
            .collect();
        by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut seen_ids: Vec<u32> = by_count
            .iter()
            .take(opts.max_seen)
            .map(|(id, _)| *id)
            .collect();
        seen_ids.sort_unstable();

        // unseen candidates: first appear in the evaluation half
        let mut unseen_ids: Vec<u32> = acc
            .eval
            .keys()
            .filter(|id| !acc.train.contains_key(id))
            .copied()
            .collect();
        unseen_ids.sort_unstable();
        unseen_ids.truncate(opts.max_unseen);

        let mut movie_ids = seen_ids.clone();
        movie_ids.extend(&unseen_ids);
        movie_ids.sort_unstable();
        let seen_mask: Vec<bool> = movie_ids
            .iter()
            .map(|id| acc.train.contains_key(id) && seen_ids.binary_search(id).is_ok())
            .collect();

        let seen_in_order: Vec<u32> = movie_ids
            .iter()
            .zip(&seen_mask)
            .filter(|(_, &s)| s)
            .map(|(&id, _)| id)
            .collect();
        let mut train = DMatrix::zeros(seen_in_order.len(), TRAIN_DAYS as usize);
        for (row, id) in seen_in_order.iter().enumerate() {
            let days = &acc.train[id];
            for (n, &c) in days.iter().enumerate() {
                train[(row, n)] = c;
            }
        }
        let eval_counts: Vec<u64> = movie_ids
            .iter()
            .map(|id| acc.eval.get(id).copied().unwrap_or(0))
            .collect();
        let feature_rows: Vec<Vec<f64>> = movie_ids
            .iter()
            .map(|id| {
                movies
                    .features_of(*id)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Parse(format!("movie {id} missing from table")))
            })
            .collect::<Result<_>>()?;

        windows.push(WindowedDataset {
            window_index: w,
            train: RequestMatrix::new(train)?,
            eval_counts,
            features: FeatureMatrix::from_rows(&feature_rows)?,
            seen_mask,
            movie_ids,
            train_total_events: acc.train_events,
            eval_total_events: acc.eval_events,
        });
    }
    Ok((windows, report))
}
