use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("date {date} is outside the season window {first}..={last}")]
    OutsideSeason {
        date: NaiveDate,
        first: NaiveDate,
        last: NaiveDate,
    },
    #[error("season day {day} is outside 1..={season_len}")]
    SeasonDay { day: i64, season_len: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{}:{line}: {message}", path.display())]
    Ingest {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid day: min {min}, mean {mean}, max {max} must be finite and ordered")]
    InvalidDay { min: f64, mean: f64, max: f64 },
    #[error("non-finite forward value {value} in {kind} node #{index}")]
    NonFinite {
        kind: &'static str,
        index: usize,
        value: f64,
    },
    #[error("non-finite gradient at optimizer iteration {iteration}")]
    NonFiniteGradient { iteration: u64 },
    #[error("training diverged for group '{group}' at epoch {epoch}; parameters: {snapshot}")]
    Diverged {
        group: String,
        epoch: usize,
        snapshot: String,
    },
    #[error("cannot split dataset: {0}")]
    Split(String),
    #[error("no parameters fitted for group '{0}'")]
    MissingGroup(String),
    #[error("synthetic generation gave up on location '{location}' for season {year} after {attempts} attempts")]
    RetryBudget {
        location: String,
        year: i32,
        attempts: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
