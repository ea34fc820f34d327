//! Dataset bundle persistence.
//!
//! A bundle is a single file: the first line is a JSON header with counts,
//! preparation parameters, index maps, the affiliation and GPS tables, and a
//! content hash; every following line is one trajectory as JSON. Record
//! coordinates are rehydrated from the GPS table on read.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, MobilityRecord, PrepareParams, Setting, Trajectory};

const BUNDLE_KIND: &str = "dataset-bundle";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    hash: String,
    users: usize,
    activities: usize,
    locations: usize,
    hour_slots: usize,
    prepare: PrepareParams,
    train_count: usize,
    test_count: usize,
    user_keys: Vec<String>,
    venue_keys: Vec<String>,
    category_keys: Vec<String>,
    category_names: Vec<String>,
    affiliation: Vec<usize>,
    gps: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    u: usize,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tag: Option<Setting>,
    /// Per record: [activity, location, hour_slot, weekday, timestamp].
    recs: Vec<(usize, usize, usize, usize, i64)>,
}

fn to_line(t: &Trajectory, split: &str, tag: Option<Setting>) -> TrajectoryLine {
    TrajectoryLine {
        u: t.user,
        split: split.to_string(),
        tag,
        recs: t
            .records
            .iter()
            .map(|r| (r.activity, r.location, r.hour_slot, r.weekday, r.timestamp))
            .collect(),
    }
}

pub fn write_bundle(
    dataset: &Dataset,
    params: &PrepareParams,
    path: &Path,
) -> Result<String, DatasetError> {
    let hash = dataset.content_hash();
    let header = Header {
        kind: BUNDLE_KIND.to_string(),
        version: 1,
        hash: hash.clone(),
        users: dataset.n_users,
        activities: dataset.n_activities,
        locations: dataset.n_locations,
        hour_slots: dataset.hour_slots,
        prepare: *params,
        train_count: dataset.train.len(),
        test_count: dataset.test.len(),
        user_keys: dataset.user_keys.clone(),
        venue_keys: dataset.venue_keys.clone(),
        category_keys: dataset.category_keys.clone(),
        category_names: dataset.category_names.clone(),
        affiliation: dataset.affiliation.clone(),
        gps: dataset.gps.clone(),
    };

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header).map_err(io_err)?;
    w.write_all(b"\n")?;
    for t in &dataset.train {
        serde_json::to_writer(&mut w, &to_line(t, "train", None)).map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    for (t, tag) in dataset.test.iter().zip(&dataset.test_tags) {
        serde_json::to_writer(&mut w, &to_line(t, "test", Some(*tag))).map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(hash)
}

fn io_err(e: serde_json::Error) -> DatasetError {
    DatasetError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

pub fn read_bundle(path: &Path) -> Result<(Dataset, String, PrepareParams), DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| DatasetError::BadBundle(format!("header: {e}")))?;
    if header.kind != BUNDLE_KIND {
        return Err(DatasetError::BadBundle(format!(
            "expected {BUNDLE_KIND}, found {:?}",
            header.kind
        )));
    }

    let mut train = Vec::with_capacity(header.train_count);
    let mut test = Vec::with_capacity(header.test_count);
    let mut test_tags = Vec::with_capacity(header.test_count);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tl: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| DatasetError::BadBundle(format!("line {}: {e}", lineno + 2)))?;
        let records: Vec<MobilityRecord> = tl
            .recs
            .iter()
            .map(|&(activity, location, hour_slot, weekday, timestamp)| {
                let (lat, lon) = header.gps.get(location).copied().unwrap_or((f64::NAN, f64::NAN));
                MobilityRecord {
                    user: tl.u,
                    activity,
                    location,
                    hour_slot,
                    weekday,
                    timestamp,
                    lat,
                    lon,
                }
            })
            .collect();
        let t = Trajectory {
            user: tl.u,
            records,
        };
        match tl.split.as_str() {
            "train" => train.push(t),
            "test" => {
                test_tags.push(tl.tag.ok_or_else(|| {
                    DatasetError::BadBundle(format!("test trajectory at line {} lacks a tag", lineno + 2))
                })?);
                test.push(t);
            }
            other => {
                return Err(DatasetError::BadBundle(format!(
                    "unknown split {other:?} at line {}",
                    lineno + 2
                )))
            }
        }
    }

    let dataset = Dataset {
        train,
        test,
        test_tags,
        affiliation: header.affiliation,
        gps: header.gps,
        n_users: header.users,
        n_activities: header.activities,
        n_locations: header.locations,
        hour_slots: header.hour_slots,
        user_keys: header.user_keys,
        venue_keys: header.venue_keys,
        category_keys: header.category_keys,
        category_names: header.category_names,
    };
    let recomputed = dataset.content_hash();
    if recomputed != header.hash {
        return Err(DatasetError::BadBundle(format!(
            "content hash mismatch: header {} vs recomputed {}",
            header.hash, recomputed
        )));
    }
    Ok((dataset, header.hash, header.prepare))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{prepare, RawRecord};

    fn toy_dataset() -> (Dataset, PrepareParams) {
        let mut raw = Vec::new();
        for day in 0..6 {
            for (i, venue) in ["gym", "cafe", "park", "gym"].iter().enumerate() {
                raw.push(RawRecord {
                    user: "u1".into(),
                    venue: venue.to_string(),
                    category: format!("cat-{venue}"),
                    category_name: String::new(),
                    lat: 40.0 + i as f64 * 0.001,
                    lon: -74.0,
                    timestamp: day * 4 * 86_400 + (i as i64) * 3600 + 1_000_000_000,
                });
            }
        }
        let params = PrepareParams {
            min_count: 1,
            ..Default::default()
        };
        (prepare(raw, &params).unwrap(), params)
    }

    #[test]
    fn bundle_roundtrip_preserves_dataset() {
        let (dataset, params) = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bundle");
        let hash = write_bundle(&dataset, &params, &path).unwrap();
        let (back, hash_back, params_back) = read_bundle(&path).unwrap();
        assert_eq!(hash, hash_back);
        assert_eq!(params, params_back);
        assert_eq!(back.train, dataset.train);
        assert_eq!(back.test, dataset.test);
        assert_eq!(back.test_tags, dataset.test_tags);
        assert_eq!(back.affiliation, dataset.affiliation);
    }

    #[test]
    fn corrupted_bundle_is_rejected() {
        let (dataset, params) = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bundle");
        write_bundle(&dataset, &params, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Flip a trajectory line's user id so the hash no longer matches.
        let tampered = text.replacen("\"u\":0", "\"u\":7", 1);
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(read_bundle(&path), Err(DatasetError::BadBundle(_))));
    }
}
