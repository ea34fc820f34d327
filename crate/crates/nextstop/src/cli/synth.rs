//! Synthetic check-in generator for desk-scale runs.
//!
//! Users follow seeded weekly schedules: each (weekday, step) slot maps to
//! one of the user's preferred activities, and each activity maps to the
//! user's favorite venue for it, so trajectories are learnable by
//! construction. Sessions sit four days apart, comfortably past the default
//! segmentation gap, and every session visits the user's whole activity
//! cycle, so favorites recur from the second session on.
//!
//! A configured share of test-session targets is rewritten to locations the
//! user has never visited (drawn from the same activity's venue pool,
//! preferring venues that are other users' favorites). The allocation is
//! exact, not sampled, so the realized recurring share matches the requested
//! ratio up to rounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::train_count;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Invalid(String),
    #[error(
        "infeasible spec: user {user} needs {needed} unvisited venues for activity {activity} but only {available} exist"
    )]
    Infeasible {
        user: usize,
        activity: usize,
        needed: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub activities: usize,
    pub locations: usize,
    /// Desired share of recurring test targets, in [0, 1].
    pub recurring_ratio: f64,
    pub seed: u64,
    pub sessions_per_user: usize,
    /// Records per session, target included.
    pub session_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 20,
            activities: 6,
            locations: 36,
            recurring_ratio: 0.85,
            seed: 7,
            sessions_per_user: 14,
            session_len: 5,
        }
    }
}

/// Ground truth emitted alongside the raw records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub spec: SynthSpec,
    pub records: usize,
    pub test_targets: usize,
    pub explorative_targets: usize,
    /// Exact share the tagger should measure after an 8:2 split.
    pub expected_recurring_share: f64,
}

/// Generate a canonical-JSONL corpus and its ground-truth metadata.
pub fn synth_generate(spec: &SynthSpec) -> Result<(String, SynthMeta), SynthError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let pool: Vec<Vec<usize>> = (0..spec.activities)
        .map(|c| {
            (0..spec.locations)
                .filter(|l| l % spec.activities == c)
                .collect()
        })
        .collect();

    // Per-user schedule: a cycle of preferred activities and a favorite
    // venue for each.
    let cycle_len = spec.activities.min(4).max(1);
    let mut cycles: Vec<Vec<usize>> = Vec::with_capacity(spec.users);
    let mut favorites: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let mut acts: Vec<usize> = (0..spec.activities).collect();
        acts.shuffle(&mut rng);
        acts.truncate(cycle_len);
        let favs = acts
            .iter()
            .map(|&c| (c, pool[c][rng.gen_range(0..pool[c].len())]))
            .collect();
        cycles.push(acts);
        favorites.push(favs);
    }
    let mut favorite_counts = vec![0usize; spec.locations];
    for favs in &favorites {
        for &l in favs.values() {
            favorite_counts[l] += 1;
        }
    }

    // Sessions: day offsets keep a 96-hour spacing so the default 72-hour
    // gap segmentation recovers them one to one.
    let base = chrono::NaiveDate::from_ymd_opt(2012, 4, 2)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
        .and_utc()
        .timestamp(); // a Monday
    let session_day = |user: usize, session: usize| (session * 4 + user % 2) as i64;

    // Scheduled activity for (weekday, step): rotate the user's cycle.
    let scheduled =
        |user: usize, weekday: usize, step: usize| cycles[user][(weekday + step) % cycle_len];

    // Exact explorative allocation over all test-session slots.
    let n_train = train_count(spec.sessions_per_user);
    let mut test_slots: Vec<(usize, usize)> = (0..spec.users)
        .flat_map(|u| (n_train..spec.sessions_per_user).map(move |s| (u, s)))
        .collect();
    let test_targets = test_slots.len();
    let explorative_targets =
        ((1.0 - spec.recurring_ratio) * test_targets as f64).round() as usize;
    test_slots.shuffle(&mut rng);
    let explorative_slots: BTreeSet<(usize, usize)> =
        test_slots.into_iter().take(explorative_targets).collect();

    // Pre-assign explorative venues per user, never reusing one.
    let mut explorative_choice: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for user in 0..spec.users {
        let visited: BTreeSet<usize> = favorites[user].values().copied().collect();
        let mut used: BTreeSet<usize> = BTreeSet::new();
        let slots: Vec<usize> = (n_train..spec.sessions_per_user)
            .filter(|&s| explorative_slots.contains(&(user, s)))
            .collect();
        for s in slots {
            let day = session_day(user, s);
            let weekday = (day % 7) as usize; // base date is a Monday
            let activity = scheduled(user, weekday, spec.session_len - 1);
            let mut candidates: Vec<usize> = pool[activity]
                .iter()
                .copied()
                .filter(|l| !visited.contains(l) && !used.contains(l))
                .collect();
            if candidates.is_empty() {
                return Err(SynthError::Infeasible {
                    user,
                    activity,
                    needed: 1,
                    available: 0,
                });
            }
            // Prefer venues other users frequent, so aggressive count-based
            // cleaning does not strip the explorative targets away.
            candidates.sort_by_key(|&l| (std::cmp::Reverse(favorite_counts[l]), l));
            let choice = candidates[0];
            used.insert(choice);
            explorative_choice.insert((user, s), choice);
        }
    }

    // Emit records.
    let mut out = String::new();
    let mut records = 0usize;
    for user in 0..spec.users {
        for session in 0..spec.sessions_per_user {
            let day = session_day(user, session);
            let weekday = (day % 7) as usize;
            let start_hour = 8 + (weekday % 3) as i64;
            for step in 0..spec.session_len {
                let activity = scheduled(user, weekday, step);
                let is_target = step == spec.session_len - 1;
                let location = match explorative_choice.get(&(user, session)) {
                    Some(&l) if is_target => l,
                    _ => favorites[user][&activity],
                };
                let real_activity = location % spec.activities;
                debug_assert_eq!(real_activity, activity);
                let ts = base + day * 86_400 + (start_hour + 2 * step as i64) * 3600;
                let (lat, lon) = venue_coordinates(location, spec.activities);
                writeln!(
                    out,
                    r#"{{"user":"u{user:04}","venue":"v{location:05}","category":"c{activity:03}","category_name":"activity-{activity}","lat":{lat},"lon":{lon},"ts":{ts}}}"#,
                )
                .expect("writing to a string cannot fail");
                records += 1;
            }
        }
    }

    let meta = SynthMeta {
        spec: spec.clone(),
        records,
        test_targets,
        explorative_targets,
        expected_recurring_share: if test_targets == 0 {
            1.0
        } else {
            1.0 - explorative_targets as f64 / test_targets as f64
        },
    };
    Ok((out, meta))
}

/// Deterministic venue layout: venues of one activity cluster within a few
/// hundred meters, activities sit on a coarse grid a few kilometers apart.
fn venue_coordinates(location: usize, activities: usize) -> (f64, f64) {
    let activity = location % activities;
    let slot = location / activities;
    let lat = (activity % 4) as f64 * 0.05 + (slot % 5) as f64 * 0.002;
    let lon = (activity / 4) as f64 * 0.05 + (slot / 5) as f64 * 0.002;
    (lat, lon)
}

fn validate(spec: &SynthSpec) -> Result<(), SynthError> {
    if spec.users == 0 || spec.activities == 0 || spec.locations == 0 {
        return Err(SynthError::Invalid("counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.recurring_ratio) {
        return Err(SynthError::Invalid(format!(
            "recurring_ratio must lie in [0, 1], got {}",
            spec.recurring_ratio
        )));
    }
    if spec.session_len < 4 {
        return Err(SynthError::Invalid(
            "session_len must be at least 4 so trajectories survive the default minimum length"
                .into(),
        ));
    }
    if spec.locations < spec.activities {
        return Err(SynthError::Invalid(
            "need at least one venue per activity".into(),
        ));
    }
    if spec.sessions_per_user < 1 {
        return Err(SynthError::Invalid("need at least one session".into()));
    }
    Ok(())
}
