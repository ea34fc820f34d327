//! Check-in ingestion and preparation.
//!
//! The pipeline is parse -> clean -> densify/discretize -> segment -> split
//! -> tag. Everything downstream works with dense integer ids; the index
//! maps back to raw keys travel with the [`Dataset`].

mod bundle;
mod parse;

pub use bundle::{read_bundle, write_bundle};
pub use parse::{parse_checkin_text, parse_checkins, ParseOutcome, RawFormat, RawRecord};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("{skipped} of {total} rows malformed (over 10%); samples: {samples:?}")]
    TooManyMalformed {
        skipped: usize,
        total: usize,
        samples: Vec<String>,
    },
    #[error("dataset exhausted by filtering (min_count = {min_count})")]
    Exhausted { min_count: usize },
    #[error("hour_slots must divide 24, got {0}")]
    BadHourSlots(usize),
    #[error("bundle format: {0}")]
    BadBundle(String),
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
}

/// One check-in with dense ids and discretized time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityRecord {
    pub user: usize,
    pub activity: usize,
    pub location: usize,
    pub hour_slot: usize,
    pub weekday: usize,
    /// Seconds since epoch, local time (timezone offset already applied).
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

/// A session of consecutive check-ins; the last record is the prediction
/// target, everything before it the history.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user: usize,
    pub records: Vec<MobilityRecord>,
}

impl Trajectory {
    pub fn history(&self) -> &[MobilityRecord] {
        &self.records[..self.records.len() - 1]
    }

    pub fn target(&self) -> &MobilityRecord {
        self.records.last().expect("trajectories are never empty")
    }
}

/// Whether a test target was visited before by the same user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Recurring,
    Explorative,
}

/// The prepared corpus: split trajectories plus the lookup tables shared by
/// the graph builders and the model.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    /// Parallel to `test`.
    pub test_tags: Vec<Setting>,
    /// Dense location id -> dense activity id.
    pub affiliation: Vec<usize>,
    /// Dense location id -> (lat, lon).
    pub gps: Vec<(f64, f64)>,
    pub n_users: usize,
    pub n_activities: usize,
    pub n_locations: usize,
    pub hour_slots: usize,
    /// Raw keys behind the dense indices, in index order.
    pub user_keys: Vec<String>,
    pub venue_keys: Vec<String>,
    pub category_keys: Vec<String>,
    /// Human-readable category names where the input provided them.
    pub category_names: Vec<String>,
}

impl Dataset {
    /// Every record of one user across train and test, sorted by timestamp.
    pub fn user_stream(&self, user: usize) -> Vec<&MobilityRecord> {
        let mut stream: Vec<&MobilityRecord> = self
            .train
            .iter()
            .chain(&self.test)
            .filter(|t| t.user == user)
            .flat_map(|t| t.records.iter())
            .collect();
        stream.sort_by_key(|r| r.timestamp);
        stream
    }

    /// Content hash over counts, tables, and all trajectories.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!(
            "{}|{}|{}|{}",
            self.n_users, self.n_activities, self.n_locations, self.hour_slots
        ));
        for a in &self.affiliation {
            hasher.update(a.to_le_bytes());
        }
        for (lat, lon) in &self.gps {
            hasher.update(lat.to_le_bytes());
            hasher.update(lon.to_le_bytes());
        }
        for (split, trajs) in [(0u8, &self.train), (1u8, &self.test)] {
            for t in trajs.iter() {
                hasher.update([split]);
                hasher.update(t.user.to_le_bytes());
                for r in &t.records {
                    hasher.update(r.location.to_le_bytes());
                    hasher.update(r.activity.to_le_bytes());
                    hasher.update(r.timestamp.to_le_bytes());
                }
            }
        }
        hex_prefix(&hasher.finalize())
    }
}

/// 16-hex-char digest prefix used in artifact headers.
pub fn short_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_prefix(&hasher.finalize())
}

fn hex_prefix(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of the preparation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareParams {
    pub hour_slots: usize,
    pub gap_hours: f64,
    pub min_trajectory_len: usize,
    pub min_count: usize,
}

impl Default for PrepareParams {
    fn default() -> Self {
        Self {
            hour_slots: 24,
            gap_hours: 72.0,
            min_trajectory_len: 3,
            min_count: 10,
        }
    }
}

/// Map a local timestamp to `(hour_slot, weekday)`. Monday is weekday 0.
pub fn discretize_time(timestamp: i64, hour_slots: usize) -> (usize, usize) {
    debug_assert!(hour_slots > 0 && 24 % hour_slots == 0);
    let dt = DateTime::from_timestamp(timestamp, 0).expect("timestamp within chrono range");
    let hours_per_slot = 24 / hour_slots;
    let slot = dt.hour() as usize / hours_per_slot;
    let weekday = dt.weekday().num_days_from_monday() as usize;
    (slot, weekday)
}

/// Iteratively remove users and locations with fewer than `min_count`
/// records until a fixed point, then return the survivors.
///
/// Removal within one iteration is simultaneous: counts are taken once, then
/// every record belonging to an under-threshold user or location goes.
pub fn clean(records: Vec<RawRecord>, min_count: usize) -> Result<Vec<RawRecord>, DatasetError> {
    assert!(min_count >= 1, "min_count must be at least 1");
    let mut records = records;
    loop {
        let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut venue_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &records {
            *user_counts.entry(r.user.as_str()).or_default() += 1;
            *venue_counts.entry(r.venue.as_str()).or_default() += 1;
        }
        let bad_users: HashSet<String> = user_counts
            .iter()
            .filter(|(_, &c)| c < min_count)
            .map(|(u, _)| u.to_string())
            .collect();
        let bad_venues: HashSet<String> = venue_counts
            .iter()
            .filter(|(_, &c)| c < min_count)
            .map(|(v, _)| v.to_string())
            .collect();
        if bad_users.is_empty() && bad_venues.is_empty() {
            break;
        }
        records.retain(|r| !bad_users.contains(&r.user) && !bad_venues.contains(&r.venue));
        if records.is_empty() {
            return Err(DatasetError::Exhausted { min_count });
        }
    }
    if records.is_empty() {
        return Err(DatasetError::Exhausted { min_count });
    }
    Ok(records)
}

/// Dense index assignment plus per-record discretization.
///
/// Keys are indexed in sorted order so two permutations of the same corpus
/// produce identical ids. A venue keeps the category and coordinates of its
/// first occurrence in timestamp order.
pub struct Densified {
    pub records: Vec<MobilityRecord>,
    pub affiliation: Vec<usize>,
    pub gps: Vec<(f64, f64)>,
    pub user_keys: Vec<String>,
    pub venue_keys: Vec<String>,
    pub category_keys: Vec<String>,
    pub category_names: Vec<String>,
}

pub fn densify(mut raw: Vec<RawRecord>, hour_slots: usize) -> Result<Densified, DatasetError> {
    if 24 % hour_slots != 0 {
        return Err(DatasetError::BadHourSlots(hour_slots));
    }
    raw.sort_by(|a, b| {
        (a.user.as_str(), a.timestamp, a.venue.as_str())
            .cmp(&(b.user.as_str(), b.timestamp, b.venue.as_str()))
    });

    let user_keys: Vec<String> = raw
        .iter()
        .map(|r| r.user.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let venue_keys: Vec<String> = raw
        .iter()
        .map(|r| r.venue.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let category_keys: Vec<String> = raw
        .iter()
        .map(|r| r.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let user_idx: BTreeMap<&str, usize> = user_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let venue_idx: BTreeMap<&str, usize> = venue_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let category_idx: BTreeMap<&str, usize> = category_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();

    let mut affiliation = vec![usize::MAX; venue_keys.len()];
    let mut gps = vec![(f64::NAN, f64::NAN); venue_keys.len()];
    let mut category_names = vec![String::new(); category_keys.len()];

    let mut by_time: Vec<&RawRecord> = raw.iter().collect();
    by_time.sort_by(|a, b| {
        (a.timestamp, a.user.as_str(), a.venue.as_str())
            .cmp(&(b.timestamp, b.user.as_str(), b.venue.as_str()))
    });
    for r in by_time {
        let v = venue_idx[r.venue.as_str()];
        if affiliation[v] == usize::MAX {
            affiliation[v] = category_idx[r.category.as_str()];
            gps[v] = (r.lat, r.lon);
        }
        let c = category_idx[r.category.as_str()];
        if category_names[c].is_empty() && !r.category_name.is_empty() {
            category_names[c] = r.category_name.clone();
        }
    }

    let records = raw
        .iter()
        .map(|r| {
            let venue = venue_idx[r.venue.as_str()];
            let (hour_slot, weekday) = discretize_time(r.timestamp, hour_slots);
            MobilityRecord {
                user: user_idx[r.user.as_str()],
                activity: affiliation[venue],
                location: venue,
                hour_slot,
                weekday,
                timestamp: r.timestamp,
                lat: gps[venue].0,
                lon: gps[venue].1,
            }
        })
        .collect();

    Ok(Densified {
        records,
        affiliation,
        gps,
        user_keys,
        venue_keys,
        category_keys,
        category_names,
    })
}

/// Split one user's timestamp-sorted records into trajectories.
///
/// A record opens a new trajectory whenever its gap to the previous one
/// exceeds `gap_hours`. Records sharing a timestamp with the previous kept
/// record are dropped as duplicates, so timestamps end up strictly
/// increasing. Trajectories shorter than `min_len` are discarded; the
/// returned count is how many records they contained.
pub fn segment_trajectories(
    user: usize,
    records: &[MobilityRecord],
    gap_hours: f64,
    min_len: usize,
) -> (Vec<Trajectory>, usize) {
    debug_assert!(records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let gap_secs = (gap_hours * 3600.0) as i64;
    let mut out = Vec::new();
    let mut dropped = 0usize;
    let mut current: Vec<MobilityRecord> = Vec::new();

    let mut flush = |current: &mut Vec<MobilityRecord>, dropped: &mut usize| {
        if current.len() >= min_len {
            out.push(Trajectory {
                user,
                records: std::mem::take(current),
            });
        } else {
            *dropped += current.len();
            current.clear();
        }
    };

    for r in records {
        match current.last() {
            Some(prev) if r.timestamp == prev.timestamp => {
                dropped += 1; // duplicate timestamp, keep the first
                continue;
            }
            Some(prev) if r.timestamp - prev.timestamp > gap_secs => {
                flush(&mut current, &mut dropped);
            }
            _ => {}
        }
        current.push(r.clone());
    }
    flush(&mut current, &mut dropped);
    (out, dropped)
}

/// Number of a user's trajectories that go to the training split.
pub fn train_count(n_trajectories: usize) -> usize {
    if n_trajectories < 2 {
        n_trajectories
    } else {
        (0.8 * n_trajectories as f64).ceil() as usize
    }
}

/// Chronological 8:2 split per user. Users with a single trajectory
/// contribute to training only.
pub fn split_train_test(per_user: Vec<Vec<Trajectory>>) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut trajectories in per_user {
        trajectories.sort_by_key(|t| t.records[0].timestamp);
        let k = train_count(trajectories.len());
        let rest = trajectories.split_off(k);
        train.extend(trajectories);
        test.extend(rest);
    }
    (train, test)
}

/// Tag one test trajectory given everything the user did strictly before the
/// target timestamp (training trajectories plus earlier test records).
pub fn tag_setting(trajectory: &Trajectory, prior: &[&MobilityRecord]) -> Setting {
    let target = trajectory.target();
    debug_assert!(prior.iter().all(|r| r.timestamp < target.timestamp));
    if prior.iter().any(|r| r.location == target.location) {
        Setting::Recurring
    } else {
        Setting::Explorative
    }
}

fn tag_all(train: &[Trajectory], test: &[Trajectory]) -> Vec<Setting> {
    let mut per_user: BTreeMap<usize, Vec<&MobilityRecord>> = BTreeMap::new();
    for t in train.iter().chain(test) {
        per_user
            .entry(t.user)
            .or_default()
            .extend(t.records.iter());
    }
    for stream in per_user.values_mut() {
        stream.sort_by_key(|r| r.timestamp);
    }
    test.iter()
        .map(|t| {
            let target_ts = t.target().timestamp;
            let prior: Vec<&MobilityRecord> = per_user[&t.user]
                .iter()
                .copied()
                .filter(|r| r.timestamp < target_ts)
                .collect();
            tag_setting(t, &prior)
        })
        .collect()
}

/// Run the full preparation pipeline over raw records.
pub fn prepare(raw: Vec<RawRecord>, params: &PrepareParams) -> Result<Dataset, DatasetError> {
    let cleaned = clean(raw, params.min_count)?;
    let densified = densify(cleaned, params.hour_slots)?;

    let mut per_user_records: BTreeMap<usize, Vec<MobilityRecord>> = BTreeMap::new();
    for r in densified.records {
        per_user_records.entry(r.user).or_default().push(r);
    }
    let per_user: Vec<Vec<Trajectory>> = per_user_records
        .into_iter()
        .map(|(user, records)| {
            segment_trajectories(user, &records, params.gap_hours, params.min_trajectory_len).0
        })
        .collect();

    let (train, test) = split_train_test(per_user);
    let test_tags = tag_all(&train, &test);

    Ok(Dataset {
        n_users: densified.user_keys.len(),
        n_activities: densified.category_keys.len(),
        n_locations: densified.venue_keys.len(),
        hour_slots: params.hour_slots,
        train,
        test,
        test_tags,
        affiliation: densified.affiliation,
        gps: densified.gps,
        user_keys: densified.user_keys,
        venue_keys: densified.venue_keys,
        category_keys: densified.category_keys,
        category_names: densified.category_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(user: &str, venue: &str, category: &str, ts: i64) -> RawRecord {
        RawRecord {
            user: user.into(),
            venue: venue.into(),
            category: category.into(),
            category_name: String::new(),
            lat: 0.0,
            lon: 0.0,
            timestamp: ts,
        }
    }

    fn rec(ts: i64, location: usize) -> MobilityRecord {
        MobilityRecord {
            user: 0,
            activity: 0,
            location,
            hour_slot: 0,
            weekday: 0,
            timestamp: ts,
            lat: 0.0,
            lon: 0.0,
        }
    }

    const HOUR: i64 = 3600;

    #[test]
    fn discretize_monday_midnight() {
        // 2024-01-01 was a Monday.
        let ts = chrono::DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
            .unwrap()
            .timestamp();
        assert_eq!(discretize_time(ts, 24), (0, 0));
    }

    #[test]
    fn discretize_sunday_late() {
        let ts = chrono::DateTime::parse_from_rfc3339("2024-01-07T23:59:59Z")
            .unwrap()
            .timestamp();
        assert_eq!(discretize_time(ts, 24), (23, 6));
    }

    #[test]
    fn discretize_coarse_slots() {
        let ts = chrono::DateTime::parse_from_rfc3339("2024-01-03T13:30:00Z")
            .unwrap()
            .timestamp();
        let (slot, weekday) = discretize_time(ts, 12);
        assert_eq!(slot, 6); // floor(13 / 2)
        assert_eq!(weekday, 2);
    }

    #[test]
    fn clean_is_noop_at_fixed_point() {
        let records: Vec<RawRecord> = (0..12).map(|i| raw("u", "v", "c", i)).collect();
        let cleaned = clean(records.clone(), 10).unwrap();
        assert_eq!(cleaned.len(), records.len());
    }

    #[test]
    fn clean_exhaustion_is_fatal() {
        let records: Vec<RawRecord> = (0..5).map(|i| raw("u", "v", "c", i)).collect();
        assert!(matches!(
            clean(records, 10),
            Err(DatasetError::Exhausted { min_count: 10 })
        ));
    }

    #[test]
    fn clean_fixed_point_keeps_user_after_venue_removal() {
        // User A: 11 records at X, 1 at Y. Y dies (1 < 10), A drops to 11
        // which still clears the threshold, X keeps its 11.
        let mut records: Vec<RawRecord> = (0..11).map(|i| raw("a", "x", "c", i)).collect();
        records.push(raw("a", "y", "c", 100));
        let cleaned = clean(records, 10).unwrap();
        assert_eq!(cleaned.len(), 11);
        assert!(cleaned.iter().all(|r| r.venue == "x"));
        // Recount: every surviving user and venue clears min_count.
        let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut venue_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &cleaned {
            *user_counts.entry(r.user.as_str()).or_default() += 1;
            *venue_counts.entry(r.venue.as_str()).or_default() += 1;
        }
        assert!(user_counts.values().all(|&c| c >= 10));
        assert!(venue_counts.values().all(|&c| c >= 10));
    }

    #[test]
    fn segmentation_splits_on_gap_and_drops_short() {
        // Gaps: 1h, 100h, 1h, 1h over 5 records -> pieces of length 2 and 3;
        // the length-2 piece is dropped at min_len 3.
        let records = vec![
            rec(0, 0),
            rec(HOUR, 1),
            rec(101 * HOUR, 2),
            rec(102 * HOUR, 3),
            rec(103 * HOUR, 4),
        ];
        let (trajectories, dropped) = segment_trajectories(0, &records, 72.0, 3);
        assert_eq!(trajectories.len(), 1);
        assert_eq!(trajectories[0].records.len(), 3);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn segmentation_keeps_single_piece_without_gaps() {
        let records: Vec<_> = (0..5).map(|i| rec(i * HOUR, i as usize)).collect();
        let (trajectories, dropped) = segment_trajectories(0, &records, 72.0, 3);
        assert_eq!(trajectories.len(), 1);
        assert_eq!(trajectories[0].records.len(), 5);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn segmentation_single_record_yields_nothing() {
        let (trajectories, dropped) = segment_trajectories(0, &[rec(0, 0)], 72.0, 3);
        assert!(trajectories.is_empty());
        assert_eq!(dropped, 1);
    }

    #[test]
    fn segmentation_conserves_records() {
        let records: Vec<_> = [0, 1, 2, 80, 81, 200, 300, 301, 302, 303]
            .iter()
            .map(|&h| rec(h * HOUR, 0))
            .collect();
        let (trajectories, dropped) = segment_trajectories(0, &records, 72.0, 3);
        let kept: usize = trajectories.iter().map(|t| t.records.len()).sum();
        assert_eq!(kept + dropped, records.len());
    }

    #[test]
    fn duplicate_timestamps_keep_first() {
        let mut records = vec![rec(0, 0), rec(HOUR, 1), rec(HOUR, 2), rec(2 * HOUR, 3)];
        records.sort_by_key(|r| r.timestamp);
        let (trajectories, dropped) = segment_trajectories(0, &records, 72.0, 3);
        assert_eq!(dropped, 1);
        let kept: Vec<usize> = trajectories[0].records.iter().map(|r| r.location).collect();
        assert_eq!(kept, vec![0, 1, 3]);
    }

    #[test]
    fn split_ratios() {
        let make = |n: usize| -> Vec<Trajectory> {
            (0..n)
                .map(|i| Trajectory {
                    user: 0,
                    records: vec![rec(i as i64 * HOUR, i)],
                })
                .collect()
        };
        let (train, test) = split_train_test(vec![make(10)]);
        assert_eq!((train.len(), test.len()), (8, 2));
        let (train, test) = split_train_test(vec![make(1)]);
        assert_eq!((train.len(), test.len()), (1, 0));
        let (train, test) = split_train_test(vec![make(5)]);
        assert_eq!((train.len(), test.len()), (4, 1));
        // Chronological: every train start precedes every test start.
        let (train, test) = split_train_test(vec![make(10)]);
        let max_train = train.iter().map(|t| t.records[0].timestamp).max().unwrap();
        let min_test = test.iter().map(|t| t.records[0].timestamp).min().unwrap();
        assert!(max_train < min_test);
    }

    #[test]
    fn tagging_recurring_and_explorative() {
        let trajectory = Trajectory {
            user: 0,
            records: vec![rec(10 * HOUR, 1), rec(11 * HOUR, 2), rec(12 * HOUR, 1)],
        };
        let earlier = [rec(0, 1), rec(HOUR, 5)];
        let prior: Vec<&MobilityRecord> = earlier.iter().collect();
        assert_eq!(tag_setting(&trajectory, &prior), Setting::Recurring);

        let trajectory = Trajectory {
            user: 0,
            records: vec![rec(10 * HOUR, 1), rec(11 * HOUR, 2), rec(12 * HOUR, 9)],
        };
        assert_eq!(tag_setting(&trajectory, &prior), Setting::Explorative);
    }

    #[test]
    fn prepare_produces_dense_indices() {
        let mut raw_records = Vec::new();
        for (u, v) in [("anna", "gym"), ("bob", "cafe")] {
            for i in 0..12 {
                raw_records.push(raw(u, v, "cat", i * HOUR * 10));
            }
        }
        let params = PrepareParams {
            min_count: 10,
            ..Default::default()
        };
        let ds = prepare(raw_records, &params).unwrap();
        assert_eq!(ds.n_users, 2);
        assert_eq!(ds.n_locations, 2);
        assert_eq!(ds.n_activities, 1);
        let max_user = ds
            .train
            .iter()
            .chain(&ds.test)
            .map(|t| t.user)
            .max()
            .unwrap();
        assert_eq!(max_user + 1, ds.n_users);
        assert_eq!(ds.test_tags.len(), ds.test.len());
    }
}
