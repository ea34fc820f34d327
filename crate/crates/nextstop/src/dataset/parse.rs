//! Raw check-in file parsing.
//!
//! Two input shapes are supported:
//!
//! - `foursquare_tsv`: eight tab-separated columns per row: user id, venue
//!   id, category id, category name, latitude, longitude, timezone offset in
//!   minutes, and a UTC time in `EEE MMM dd HH:mm:ss Z yyyy` form. The
//!   offset is applied so downstream timestamps are local.
//! - `canonical_jsonl`: one JSON object per line with keys
//!   `{user, venue, category, lat, lon, ts}` where `ts` is already local
//!   epoch seconds. An optional `category_name` is carried through.

use std::fmt::Write as _;
use std::path::Path;

use chrono::DateTime;
use serde::Deserialize;

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFormat {
    FoursquareTsv,
    CanonicalJsonl,
}

impl std::str::FromStr for RawFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "foursquare_tsv" => Ok(Self::FoursquareTsv),
            "canonical_jsonl" => Ok(Self::CanonicalJsonl),
            other => Err(format!(
                "unknown format {other:?}; expected foursquare_tsv or canonical_jsonl"
            )),
        }
    }
}

/// A check-in before index densification. `timestamp` is local epoch
/// seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub venue: String,
    pub category: String,
    pub category_name: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

/// Outcome of a parse: the good rows plus how many were skipped.
#[derive(Debug)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    pub skipped: usize,
}

/// Parse a raw check-in file. Malformed rows are counted and skipped; more
/// than 10% malformed rows is fatal and the error carries row samples.
pub fn parse_checkins(path: &Path, format: RawFormat) -> Result<ParseOutcome, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    parse_checkin_text(&text, format)
}

pub fn parse_checkin_text(text: &str, format: RawFormat) -> Result<ParseOutcome, DatasetError> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut samples = Vec::new();
    let mut total = 0usize;

    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = match format {
            RawFormat::FoursquareTsv => parse_tsv_row(line),
            RawFormat::CanonicalJsonl => parse_jsonl_row(line),
        };
        match parsed {
            Some(record) => records.push(record),
            None => {
                skipped += 1;
                if samples.len() < 5 {
                    let mut sample = String::new();
                    let _ = write!(sample, "{:.120}", line);
                    samples.push(sample);
                }
            }
        }
    }

    if total > 0 && skipped * 10 > total {
        return Err(DatasetError::TooManyMalformed {
            skipped,
            total,
            samples,
        });
    }
    Ok(ParseOutcome { records, skipped })
}

fn parse_tsv_row(line: &str) -> Option<RawRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return None;
    }
    let lat: f64 = fields[4].trim().parse().ok()?;
    let lon: f64 = fields[5].trim().parse().ok()?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    let offset_minutes: i64 = fields[6].trim().parse().ok()?;
    let utc = DateTime::parse_from_str(fields[7].trim(), "%a %b %d %H:%M:%S %z %Y").ok()?;
    Some(RawRecord {
        user: fields[0].trim().to_string(),
        venue: fields[1].trim().to_string(),
        category: fields[2].trim().to_string(),
        category_name: fields[3].trim().to_string(),
        lat,
        lon,
        timestamp: utc.timestamp() + offset_minutes * 60,
    })
}

#[derive(Deserialize)]
struct JsonlRow {
    user: String,
    venue: String,
    category: String,
    #[serde(default)]
    category_name: String,
    lat: f64,
    lon: f64,
    ts: i64,
}

fn parse_jsonl_row(line: &str) -> Option<RawRecord> {
    let row: JsonlRow = serde_json::from_str(line).ok()?;
    if !(-90.0..=90.0).contains(&row.lat) || !(-180.0..=180.0).contains(&row.lon) {
        return None;
    }
    Some(RawRecord {
        user: row.user,
        venue: row.venue,
        category: row.category,
        category_name: row.category_name,
        lat: row.lat,
        lon: row.lon,
        timestamp: row.ts,
    })
}
