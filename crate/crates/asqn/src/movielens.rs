//! MovieLens ratings ingestion.
//!
//! Two layouts are read: the `user::item::rating::timestamp` lines of the
//! ML-1M/ML-10M `.dat` files and the header-bearing
//! `userId,movieId,rating,timestamp` CSV of the newer releases. Items
//! (movies) become matrix rows and users become columns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use asqn_core::model::{Dataset, MatrixFactorizationModel, Rating};
use asqn_core::rng::stream;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingsFormat {
    /// `user::item::rating::timestamp`
    DatDoubleColon,
    /// `userId,movieId,rating,timestamp` with a header row
    Csv,
}

impl RatingsFormat {
    /// `.csv` files are CSV, anything else the `::` layout.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => RatingsFormat::Csv,
            _ => RatingsFormat::DatDoubleColon,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no ratings in input")]
    Empty,
    #[error(transparent)]
    Model(#[from] asqn_core::Error),
}

/// One rating as it appears in the file; the timestamp is not kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingsRecord {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
}

fn malformed(line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Malformed { line, message: message.into() }
}

fn parse_fields(line: usize, user: &str, item: &str, rating: &str) -> Result<RatingsRecord, IngestError> {
    let user = user.trim().parse().map_err(|_| malformed(line, format!("bad user id {user:?}")))?;
    let item = item.trim().parse().map_err(|_| malformed(line, format!("bad item id {item:?}")))?;
    let rating: f64 = rating.trim().parse().map_err(|_| malformed(line, format!("bad rating {rating:?}")))?;
    if !rating.is_finite() {
        return Err(malformed(line, "rating is not finite"));
    }
    Ok(RatingsRecord { user, item, rating })
}

/// Parses one `user::item::rating::timestamp` line (`line` is 1-based,
/// for messages).
pub fn parse_dat_line(text: &str, line: usize) -> Result<RatingsRecord, IngestError> {
    let fields: Vec<&str> = text.split("::").collect();
    if fields.len() != 4 {
        return Err(malformed(line, format!("expected 4 '::'-separated fields, found {}", fields.len())));
    }
    parse_fields(line, fields[0], fields[1], fields[2])
}

pub fn parse_ratings(text: &str, format: RatingsFormat) -> Result<Vec<RatingsRecord>, IngestError> {
    let mut out = Vec::new();
    match format {
        RatingsFormat::DatDoubleColon => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                out.push(parse_dat_line(line.trim_end_matches('\r'), i + 1)?);
            }
        }
        RatingsFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
            for row in reader.records() {
                let row = row.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    malformed(line, e.to_string())
                })?;
                let line = row.position().map_or(0, |p| p.line() as usize);
                if row.len() < 3 {
                    return Err(malformed(line, format!("expected at least 3 fields, found {}", row.len())));
                }
                out.push(parse_fields(line, &row[0], &row[1], &row[2])?);
            }
        }
    }
    if out.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(out)
}

/// Ratings remapped to contiguous indices.
#[derive(Debug, Clone)]
pub struct RatingsMatrix {
    pub model: MatrixFactorizationModel,
    pub data: Dataset<Rating>,
    /// Original item id of each row, ascending.
    pub items: Vec<u64>,
    /// Original user id of each column, ascending.
    pub users: Vec<u64>,
}

impl RatingsMatrix {
    /// `(R, S, nnz)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.items.len(), self.users.len(), self.data.len())
    }
}

/// Keeps `cap` ratings chosen uniformly without replacement (file order is
/// preserved), or all of them when `cap` is `None` or not smaller.
pub fn subsample(records: Vec<RatingsRecord>, cap: Option<usize>, seed: u64) -> Vec<RatingsRecord> {
    match cap {
        Some(cap) if cap < records.len() => {
            let mut keep = rand::seq::index::sample(&mut stream(seed), records.len(), cap).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| records[i]).collect()
        }
        _ => records,
    }
}

/// Builds the rank-`rank` factorization problem from parsed ratings.
pub fn build_matrix(records: &[RatingsRecord], rank: usize) -> Result<RatingsMatrix, IngestError> {
    if records.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut items: BTreeMap<u64, usize> = records.iter().map(|r| (r.item, 0)).collect();
    let mut users: BTreeMap<u64, usize> = records.iter().map(|r| (r.user, 0)).collect();
    for (i, v) in items.values_mut().enumerate() {
        *v = i;
    }
    for (i, v) in users.values_mut().enumerate() {
        *v = i;
    }
    let model = MatrixFactorizationModel::new(items.len(), users.len(), rank)?;
    let ratings = records
        .iter()
        .map(|r| Rating { row: items[&r.item], col: users[&r.user], value: r.rating })
        .collect();
    let data = Dataset::for_model(&model, ratings)?;
    Ok(RatingsMatrix { model, data, items: items.into_keys().collect(), users: users.into_keys().collect() })
}

/// Reads, optionally subsamples and remaps a ratings file.
pub fn load_movielens(
    path: &Path,
    format: RatingsFormat,
    rank: usize,
    cap: Option<usize>,
    seed: u64,
) -> Result<RatingsMatrix, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    let records = subsample(parse_ratings(&text, format)?, cap, seed);
    build_matrix(&records, rank)
}
