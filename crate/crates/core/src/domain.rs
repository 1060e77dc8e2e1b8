//! Core data types, season calendar arithmetic and the CSV-backed dataset.
//!
//! A season starts on October 1 and lasts [`SEASON_LENGTH`] consecutive
//! calendar days, so it ends on July 1 when the following year is not a leap
//! year and on June 30 otherwise. Days inside a season are addressed by a
//! 1-based season index `t`.
//!
//! Two CSV schemas are understood:
//!
//! * `temps.csv`: `location_id,date,h00,...,h23` with ISO-8601 dates and hourly
//!   temperatures in °C. Rows outside every season window are ignored.
//! * `blooms.csv`: `location_id,latitude,longitude,variety,bloom_date`.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, Days, NaiveDate};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of days in a season.
pub const SEASON_LENGTH: usize = 274;
/// Hourly values per day.
pub const HOURS_PER_DAY: usize = 24;
/// Plausible temperature range accepted on ingestion, °C.
pub const TEMP_RANGE: (f64, f64) = (-60.0, 60.0);

/// First calendar day of the season that starts in `season_start_year`.
pub fn season_start(season_start_year: i32) -> Result<NaiveDate> {
    NaiveDate::from_ymd_opt(season_start_year, 10, 1)
        .ok_or_else(|| Error::invalid(format!("unsupported season year {season_start_year}")))
}

/// Inclusive calendar window of a season.
pub fn season_window(season_start_year: i32) -> Result<(NaiveDate, NaiveDate)> {
    let first = season_start(season_start_year)?;
    let last = first + Days::new(SEASON_LENGTH as u64 - 1);
    Ok((first, last))
}

/// The season a calendar date would belong to: October to December belong to
/// the season starting that year, everything else to the previous one.
pub fn season_year_of(date: NaiveDate) -> i32 {
    if date.month() >= 10 {
        date.year()
    } else {
        date.year() - 1
    }
}

/// Converts a calendar date to its 1-based season index.
pub fn doy_to_season_index(date: NaiveDate, season_start_year: i32) -> Result<usize> {
    let (first, last) = season_window(season_start_year)?;
    if date < first || date > last {
        return Err(Error::OutsideSeason { date, first, last });
    }
    Ok((date - first).num_days() as usize + 1)
}

/// Inverse of [`doy_to_season_index`].
pub fn season_index_to_date(day: usize, season_start_year: i32) -> Result<NaiveDate> {
    if !(1..=SEASON_LENGTH).contains(&day) {
        return Err(Error::SeasonDay {
            day: day as i64,
            season_len: SEASON_LENGTH,
        });
    }
    Ok(season_start(season_start_year)? + Days::new(day as u64 - 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Minimum, maximum and arithmetic mean of one day of hourly temperatures.
pub fn daily_stats(day_temps: &[f64]) -> Result<DailyStats> {
    if day_temps.len() != HOURS_PER_DAY {
        return Err(Error::invalid(format!(
            "expected {HOURS_PER_DAY} hourly values, got {}",
            day_temps.len()
        )));
    }
    if let Some(v) = day_temps.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite hourly temperature {v}")));
    }
    let min = day_temps.iter().copied().fold(f64::INFINITY, f64::min);
    let max = day_temps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = day_temps.iter().sum::<f64>() / HOURS_PER_DAY as f64;
    // the mean of 24 values can round just outside [min, max] for constant days
    Ok(DailyStats {
        min,
        max,
        mean: mean.clamp(min, max),
    })
}

/// One season of hourly temperatures, `SEASON_LENGTH` rows by 24 columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonSeries {
    temps: Array2<f64>,
    season_start_year: i32,
}

impl SeasonSeries {
    pub fn new(temps: Array2<f64>, season_start_year: i32) -> Result<Self> {
        if temps.dim() != (SEASON_LENGTH, HOURS_PER_DAY) {
            return Err(Error::invalid(format!(
                "season matrix must be {SEASON_LENGTH}x{HOURS_PER_DAY}, got {:?}",
                temps.dim()
            )));
        }
        check_temps(temps.view())?;
        Ok(SeasonSeries {
            temps,
            season_start_year,
        })
    }

    pub fn temps(&self) -> ArrayView2<'_, f64> {
        self.temps.view()
    }

    /// Hourly temperatures of season day `t` (1-based).
    pub fn day(&self, t: usize) -> ArrayView1<'_, f64> {
        self.temps.row(t - 1)
    }

    pub fn season_start_year(&self) -> i32 {
        self.season_start_year
    }

    pub fn len(&self) -> usize {
        self.temps.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.nrows() == 0
    }
}

/// Checks that every value is finite and inside [`TEMP_RANGE`].
pub fn check_temps(temps: ArrayView2<'_, f64>) -> Result<()> {
    for ((t, h), v) in temps.indexed_iter() {
        if !v.is_finite() || *v < TEMP_RANGE.0 || *v > TEMP_RANGE.1 {
            return Err(Error::invalid(format!(
                "temperature {v} at day {} hour {h} outside [{}, {}]",
                t + 1,
                TEMP_RANGE.0,
                TEMP_RANGE.1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BloomRecord {
    pub location_id: String,
    pub variety: String,
    pub season_start_year: i32,
    /// 1-based season index of the observed bloom.
    pub bloom_day: usize,
}

impl BloomRecord {
    pub fn validate(&self) -> Result<()> {
        if self.location_id.is_empty() || self.variety.is_empty() {
            return Err(Error::invalid("location_id and variety must be non-empty"));
        }
        if !(1..=SEASON_LENGTH).contains(&self.bloom_day) {
            return Err(Error::SeasonDay {
                day: self.bloom_day as i64,
                season_len: SEASON_LENGTH,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub location_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub variety: String,
}

impl Location {
    pub fn validate(&self) -> Result<()> {
        if self.location_id.is_empty() || self.variety.is_empty() {
            return Err(Error::invalid("location_id and variety must be non-empty"));
        }
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(Error::invalid(format!(
                "coordinates ({}, {}) out of range for location '{}'",
                self.latitude, self.longitude, self.location_id
            )));
        }
        Ok(())
    }
}

/// How parameter sets are shared across samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    PerLocation,
    PerVariety,
}

impl Grouping {
    pub fn key<'a>(&self, record: &'a BloomRecord) -> &'a str {
        match self {
            Grouping::PerLocation => &record.location_id,
            Grouping::PerVariety => &record.variety,
        }
    }

    pub fn key_of_location<'a>(&self, location: &'a Location) -> &'a str {
        match self {
            Grouping::PerLocation => &location.location_id,
            Grouping::PerVariety => &location.variety,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Grouping::PerLocation => "per-location",
            Grouping::PerVariety => "per-variety",
        }
    }
}

impl std::fmt::Display for Grouping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-location" | "location" => Ok(Grouping::PerLocation),
            "per-variety" | "variety" => Ok(Grouping::PerVariety),
            _ => Err(Error::invalid(format!(
                "unknown grouping '{s}' (expected per-location or per-variety)"
            ))),
        }
    }
}

/// One paired observation: a season of temperatures and its bloom record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub series: Arc<SeasonSeries>,
    pub record: BloomRecord,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    locations: BTreeMap<String, Location>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, locations: BTreeMap<String, Location>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for loc in locations.values() {
            loc.validate()?;
        }
        for (i, s) in samples.iter().enumerate() {
            s.record
                .validate()
                .map_err(|e| Error::invalid(format!("sample {i}: {e}")))?;
            let loc = locations.get(&s.record.location_id).ok_or_else(|| {
                Error::invalid(format!(
                    "sample {i}: location '{}' missing from location table",
                    s.record.location_id
                ))
            })?;
            if loc.variety != s.record.variety {
                return Err(Error::invalid(format!(
                    "sample {i}: variety '{}' disagrees with location table '{}'",
                    s.record.variety, loc.variety
                )));
            }
            if s.series.season_start_year() != s.record.season_start_year {
                return Err(Error::invalid(format!(
                    "sample {i}: series season {} does not match record season {}",
                    s.series.season_start_year(),
                    s.record.season_start_year
                )));
            }
            if !seen.insert((s.record.location_id.as_str(), s.record.season_start_year)) {
                return Err(Error::invalid(format!(
                    "sample {i}: duplicate (location, season) pair ({}, {})",
                    s.record.location_id, s.record.season_start_year
                )));
            }
        }
        Ok(Dataset { samples, locations })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn locations(&self) -> &BTreeMap<String, Location> {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct season start years, ascending.
    pub fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self
            .samples
            .iter()
            .map(|s| s.record.season_start_year)
            .collect();
        set.into_iter().collect()
    }

    /// Sample indices per group key, keys ascending.
    pub fn groups(&self, grouping: Grouping) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            out.entry(grouping.key(&s.record).to_string())
                .or_default()
                .push(i);
        }
        out
    }

    /// Keeps the samples matching `keep`; the location table is restricted to
    /// locations that still have samples.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Dataset {
        let samples: Vec<Sample> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        let used: BTreeSet<&str> = samples
            .iter()
            .map(|s| s.record.location_id.as_str())
            .collect();
        let locations = self
            .locations
            .iter()
            .filter(|(k, _)| used.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Dataset { samples, locations }
    }

    /// Loads and pairs `temps.csv` with `blooms.csv`.
    pub fn load(temps_path: &Path, blooms_path: &Path) -> Result<Self> {
        let seasons = load_temps(temps_path)?;
        let blooms = load_blooms(blooms_path)?;
        let mut samples = Vec::with_capacity(blooms.records.len());
        for (line, record) in blooms.records {
            let key = (record.location_id.clone(), record.season_start_year);
            let series = match seasons.get(&key) {
                Some(Ok(series)) => series.clone(),
                Some(Err(reason)) => {
                    return Err(Error::Ingest {
                        path: blooms_path.to_path_buf(),
                        line,
                        message: format!(
                            "temperatures for ({}, season {}) are unusable: {reason}",
                            key.0, key.1
                        ),
                    })
                }
                None => {
                    return Err(Error::Ingest {
                        path: blooms_path.to_path_buf(),
                        line,
                        message: format!(
                            "no temperatures for location '{}' season {}",
                            key.0, key.1
                        ),
                    })
                }
            };
            samples.push(Sample { series, record });
        }
        Dataset::new(samples, blooms.locations)
    }

    /// Writes the dataset back out in the two CSV schemas.
    pub fn save(&self, temps_path: &Path, blooms_path: &Path) -> Result<()> {
        let mut ordered: Vec<&Sample> = self.samples.iter().collect();
        ordered.sort_by(|a, b| {
            (&a.record.location_id, a.record.season_start_year)
                .cmp(&(&b.record.location_id, b.record.season_start_year))
        });
        write_temps(
            temps_path,
            ordered
                .iter()
                .map(|s| (s.record.location_id.as_str(), s.series.as_ref())),
        )?;
        let mut w = csv::Writer::from_path(blooms_path)?;
        w.write_record(["location_id", "latitude", "longitude", "variety", "bloom_date"])?;
        for s in ordered {
            let loc = &self.locations[&s.record.location_id];
            let date = season_index_to_date(s.record.bloom_day, s.record.season_start_year)?;
            w.write_record([
                loc.location_id.clone(),
                loc.latitude.to_string(),
                loc.longitude.to_string(),
                loc.variety.clone(),
                date.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per (location, season) either a complete series or the reason it was
/// rejected (missing hours or days).
pub type SeasonTable = BTreeMap<(String, i32), std::result::Result<Arc<SeasonSeries>, String>>;

fn hour_headers() -> Vec<String> {
    (0..HOURS_PER_DAY).map(|h| format!("h{h:02}")).collect()
}

fn ingest_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `temps.csv` into complete seasons. Values that are present but
/// invalid abort ingestion; missing values only invalidate their season.
pub fn load_temps(path: &Path) -> Result<SeasonTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let loc_col = col("location_id").ok_or_else(|| ingest_err(path, 1, "missing column location_id"))?;
    let date_col = col("date").ok_or_else(|| ingest_err(path, 1, "missing column date"))?;
    let hour_cols = hour_headers()
        .iter()
        .map(|h| col(h).ok_or_else(|| ingest_err(path, 1, format!("missing column {h}"))))
        .collect::<Result<Vec<_>>>()?;

    type Partial = Vec<Option<[f64; HOURS_PER_DAY]>>;
    let mut partial: BTreeMap<(String, i32), (Partial, Option<String>)> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let location = row.get(loc_col).unwrap_or("").to_string();
        if location.is_empty() {
            return Err(ingest_err(path, line, "empty location_id"));
        }
        let date_str = row.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d")
            .map_err(|e| ingest_err(path, line, format!("bad date '{date_str}': {e}")))?;
        let year = season_year_of(date);
        let Ok(day) = doy_to_season_index(date, year) else {
            continue;
        };
        let mut hours = [0.0; HOURS_PER_DAY];
        let mut missing = false;
        for (h, &c) in hour_cols.iter().enumerate() {
            let field = row.get(c).unwrap_or("");
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                missing = true;
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| ingest_err(path, line, format!("bad temperature '{field}' in h{h:02}")))?;
            if !v.is_finite() || v < TEMP_RANGE.0 || v > TEMP_RANGE.1 {
                return Err(ingest_err(
                    path,
                    line,
                    format!("temperature {v} in h{h:02} outside [{}, {}]", TEMP_RANGE.0, TEMP_RANGE.1),
                ));
            }
            hours[h] = v;
        }
        let (days, reason) = partial
            .entry((location, year))
            .or_insert_with(|| (vec![None; SEASON_LENGTH], None));
        if days[day - 1].is_some() {
            return Err(ingest_err(path, line, format!("duplicate row for {date}")));
        }
        if missing {
            reason.get_or_insert_with(|| format!("missing hourly values on {date}"));
        } else {
            days[day - 1] = Some(hours);
        }
    }

    let mut table = SeasonTable::new();
    for ((location, year), (days, reason)) in partial {
        let entry = match reason {
            Some(r) => Err(r),
            None => match days.iter().position(Option::is_none) {
                Some(i) => Err(format!(
                    "missing day {}",
                    season_index_to_date(i + 1, year).map(|d| d.to_string()).unwrap_or_default()
                )),
                None => {
                    let flat: Vec<f64> = days.into_iter().flat_map(|d| d.unwrap()).collect();
                    let temps = Array2::from_shape_vec((SEASON_LENGTH, HOURS_PER_DAY), flat)
                        .expect("season shape");
                    SeasonSeries::new(temps, year)
                        .map(Arc::new)
                        .map_err(|e| e.to_string())
                }
            },
        };
        table.insert((location, year), entry);
    }
    Ok(table)
}

/// Writes seasons in the `temps.csv` schema.
pub fn write_temps<'a>(
    path: &Path,
    seasons: impl IntoIterator<Item = (&'a str, &'a SeasonSeries)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["location_id".to_string(), "date".to_string()];
    header.extend(hour_headers());
    w.write_record(&header)?;
    for (location, series) in seasons {
        for t in 1..=series.len() {
            let date = season_index_to_date(t, series.season_start_year())?;
            let mut rec = Vec::with_capacity(HOURS_PER_DAY + 2);
            rec.push(location.to_string());
            rec.push(date.to_string());
            rec.extend(series.day(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct BloomFile {
    /// Parsed records with their source line numbers.
    pub records: Vec<(u64, BloomRecord)>,
    pub locations: BTreeMap<String, Location>,
}

#[derive(Debug, Deserialize)]
struct BloomRow {
    location_id: String,
    latitude: f64,
    longitude: f64,
    variety: String,
    bloom_date: String,
}

/// Reads `blooms.csv`, converting calendar bloom dates to season indices.
pub fn load_blooms(path: &Path) -> Result<BloomFile> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut records = Vec::new();
    let mut locations: BTreeMap<String, Location> = BTreeMap::new();
    let mut raw = csv::StringRecord::new();
    let headers = reader.headers()?.clone();
    while reader.read_record(&mut raw)? {
        let line = raw.position().map_or(0, |p| p.line());
        let row: BloomRow = raw
            .deserialize(Some(&headers))
            .map_err(|e| ingest_err(path, line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.bloom_date, "%Y-%m-%d")
            .map_err(|e| ingest_err(path, line, format!("bad bloom_date '{}': {e}", row.bloom_date)))?;
        if date.month() >= 10 {
            return Err(ingest_err(
                path,
                line,
                format!("bloom on {date} precedes January 1; cannot align to a season"),
            ));
        }
        let year = season_year_of(date);
        let bloom_day =
            doy_to_season_index(date, year).map_err(|e| ingest_err(path, line, e.to_string()))?;
        let location = Location {
            location_id: row.location_id.clone(),
            latitude: row.latitude,
            longitude: row.longitude,
            variety: row.variety.clone(),
        };
        location
            .validate()
            .map_err(|e| ingest_err(path, line, e.to_string()))?;
        match locations.entry(row.location_id.clone()) {
            Entry::Vacant(v) => {
                v.insert(location);
            }
            Entry::Occupied(o) => {
                if *o.get() != location {
                    return Err(ingest_err(
                        path,
                        line,
                        format!("location '{}' redefined with different metadata", row.location_id),
                    ));
                }
            }
        }
        let record = BloomRecord {
            location_id: row.location_id,
            variety: row.variety,
            season_start_year: year,
            bloom_day,
        };
        record
            .validate()
            .map_err(|e| ingest_err(path, line, e.to_string()))?;
        records.push((line, record));
    }
    Ok(BloomFile { records, locations })
}
