//! The three-layer hierarchical graph.
//!
//! Layers: locations, localized activities (one relay node per category that
//! pre-aggregates location features), and activities. Edges are four
//! adjacency matrices: spatial location adjacency, thresholded activity
//! co-occurrence, the affiliation block linking locations to localized
//! activities, and the identity block linking localized activities to
//! activities (extended with the activity adjacency so activity nodes also
//! attend to their own layer).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{short_hash, Trajectory};
use crate::tensor::Matrix;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("location {0} has no category")]
    MissingCategory(usize),
    #[error("graph bundle format: {0}")]
    BadBundle(String),
    #[error("graph bundle io: {0}")]
    Io(#[from] std::io::Error),
}

/// All adjacency structure needed by the attention layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalGraph {
    /// `|L| x |L|` spatial adjacency, unit diagonal.
    pub a_loc: Matrix,
    /// `|C| x |C|` raw co-occurrence counts (symmetrized).
    pub m_act: Matrix,
    /// `|C| x |C|` thresholded binary activity adjacency, unit diagonal.
    pub a_act: Matrix,
    /// `|L| x |C|` affiliation block: row l has a single 1 at its category.
    pub a_loc_act_l: Matrix,
    /// `(|L|+|C|) x (|L|+|C|)` block matrix [[0, B], [B^T, 0]].
    pub a_loc_act: Matrix,
    /// `2|C| x 2|C|` block matrix [[A_act, I], [I, 0]].
    pub a_cc_new: Matrix,
    pub d_h_km: f64,
}

impl HierarchicalGraph {
    pub fn n_locations(&self) -> usize {
        self.a_loc.rows()
    }

    pub fn n_activities(&self) -> usize {
        self.a_act.rows()
    }
}

/// Great-circle distance in kilometers between two (lat, lon) points given
/// in degrees.
pub fn haversine_km(p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let (lat1, lon1) = (p1.0.to_radians(), p1.1.to_radians());
    let (lat2, lon2) = (p2.0.to_radians(), p2.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let c = 2.0 * a.sqrt().atan2((1.0 - a).sqrt());
    EARTH_RADIUS_KM * c
}

/// Location adjacency: 1 where the distance is strictly below `d_h_km`.
/// The diagonal is always 1 (distance zero).
pub fn build_location_adjacency(gps: &[(f64, f64)], d_h_km: f64) -> Matrix {
    assert!(d_h_km > 0.0, "distance threshold must be positive");
    let n = gps.len();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 1.0;
        for j in (i + 1)..n {
            if haversine_km(gps[i], gps[j]) < d_h_km {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

/// Co-occurrence counts of activities within the same hour slot.
///
/// For each training trajectory the history portion is traversed; every
/// ordered pair `i < j` whose hour slots match increments the count of
/// `(activity_i, activity_j)`. The matrix is then symmetrized, with the
/// diagonal counted once.
pub fn build_activity_cooccurrence(train: &[Trajectory], n_activities: usize) -> Matrix {
    let mut m = Matrix::zeros(n_activities, n_activities);
    for t in train {
        let history = t.history();
        for i in 0..history.len() {
            for j in (i + 1)..history.len() {
                if history[i].hour_slot == history[j].hour_slot {
                    m[(history[i].activity, history[j].activity)] += 1.0;
                }
            }
        }
    }
    // Symmetrize off-diagonal entries; the diagonal stays as counted.
    let mut sym = Matrix::zeros(n_activities, n_activities);
    for i in 0..n_activities {
        for j in 0..n_activities {
            sym[(i, j)] = if i == j {
                m[(i, i)]
            } else {
                m[(i, j)] + m[(j, i)]
            };
        }
    }
    sym
}

/// Threshold co-occurrence counts at the mean over all entries (zeros and
/// diagonal included, strict inequality), then force self-loops.
pub fn threshold_activity_adjacency(m_act: &Matrix) -> Matrix {
    let n = m_act.rows();
    let mean = m_act.sum() / (n * n) as f64;
    if m_act.sum() == 0.0 {
        log::warn!("all-zero activity co-occurrence; falling back to identity adjacency");
        return Matrix::identity(n);
    }
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if m_act[(i, j)] > mean {
                a[(i, j)] = 1.0;
            }
        }
        a[(i, i)] = 1.0;
    }
    a
}

/// Affiliation block and the assembled `(|L|+|C|)^2` block matrix with zero
/// diagonal blocks.
pub fn build_affiliation(
    affiliation: &BTreeMap<usize, usize>,
    n_locations: usize,
    n_activities: usize,
) -> Result<(Matrix, Matrix), GraphError> {
    let mut block = Matrix::zeros(n_locations, n_activities);
    for l in 0..n_locations {
        let &c = affiliation
            .get(&l)
            .ok_or(GraphError::MissingCategory(l))?;
        assert!(c < n_activities, "category {c} out of range");
        block[(l, c)] = 1.0;
    }
    let n = n_locations + n_activities;
    let mut full = Matrix::zeros(n, n);
    for l in 0..n_locations {
        for c in 0..n_activities {
            if block[(l, c)] == 1.0 {
                full[(l, n_locations + c)] = 1.0;
                full[(n_locations + c, l)] = 1.0;
            }
        }
    }
    Ok((block, full))
}

/// The `2|C| x 2|C|` block matrix [[A_act, I], [I, 0]] that lets activity
/// nodes attend to both their own layer and their relay node.
pub fn build_cc_adjacency(a_act: &Matrix) -> Matrix {
    let c = a_act.rows();
    let mut full = Matrix::zeros(2 * c, 2 * c);
    for i in 0..c {
        for j in 0..c {
            full[(i, j)] = a_act[(i, j)];
        }
        full[(i, c + i)] = 1.0;
        full[(c + i, i)] = 1.0;
    }
    full
}

/// Build the whole graph from a prepared dataset's tables and trajectories.
pub fn build_graph(
    gps: &[(f64, f64)],
    affiliation: &[usize],
    train: &[Trajectory],
    n_activities: usize,
    d_h_km: f64,
) -> Result<HierarchicalGraph, GraphError> {
    let a_loc = build_location_adjacency(gps, d_h_km);
    let m_act = build_activity_cooccurrence(train, n_activities);
    let a_act = threshold_activity_adjacency(&m_act);
    let map: BTreeMap<usize, usize> = affiliation.iter().copied().enumerate().collect();
    let (a_loc_act_l, a_loc_act) = build_affiliation(&map, gps.len(), n_activities)?;
    let a_cc_new = build_cc_adjacency(&a_act);
    Ok(HierarchicalGraph {
        a_loc,
        m_act,
        a_act,
        a_loc_act_l,
        a_loc_act,
        a_cc_new,
        d_h_km,
    })
}

// ---------------------------------------------------------------------------
// Persistence: JSON header plus sparse COO edge lists per matrix.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraphBundle {
    kind: String,
    version: u32,
    hash: String,
    dataset_hash: String,
    locations: usize,
    activities: usize,
    d_h_km: f64,
    hour_slots: usize,
    a_loc: Vec<(usize, usize)>,
    m_act: Vec<(usize, usize, f64)>,
    a_act: Vec<(usize, usize)>,
    a_loc_act: Vec<(usize, usize)>,
    a_cc_new: Vec<(usize, usize)>,
}

fn to_coo_binary(m: &Matrix) -> Vec<(usize, usize)> {
    let mut coo = Vec::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m[(i, j)];
            if v != 0.0 {
                debug_assert_eq!(v, 1.0, "binary matrix carries non-unit entry {v}");
                coo.push((i, j));
            }
        }
    }
    coo
}

fn from_coo_binary(coo: &[(usize, usize)], rows: usize, cols: usize) -> Result<Matrix, GraphError> {
    let mut m = Matrix::zeros(rows, cols);
    for &(i, j) in coo {
        if i >= rows || j >= cols {
            return Err(GraphError::BadBundle(format!(
                "edge ({i}, {j}) outside {rows}x{cols}"
            )));
        }
        m[(i, j)] = 1.0;
    }
    Ok(m)
}

pub fn write_graph_bundle(
    graph: &HierarchicalGraph,
    dataset_hash: &str,
    hour_slots: usize,
    path: &Path,
) -> Result<String, GraphError> {
    let mut m_act_coo = Vec::new();
    for i in 0..graph.m_act.rows() {
        for j in 0..graph.m_act.cols() {
            if graph.m_act[(i, j)] != 0.0 {
                m_act_coo.push((i, j, graph.m_act[(i, j)]));
            }
        }
    }
    let mut bundle = GraphBundle {
        kind: "graph-bundle".to_string(),
        version: 1,
        hash: String::new(),
        dataset_hash: dataset_hash.to_string(),
        locations: graph.n_locations(),
        activities: graph.n_activities(),
        d_h_km: graph.d_h_km,
        hour_slots,
        a_loc: to_coo_binary(&graph.a_loc),
        m_act: m_act_coo,
        a_act: to_coo_binary(&graph.a_act),
        a_loc_act: to_coo_binary(&graph.a_loc_act),
        a_cc_new: to_coo_binary(&graph.a_cc_new),
    };
    let core = serde_json::to_string(&bundle).map_err(json_err)?;
    bundle.hash = short_hash(core.as_bytes());
    let text = serde_json::to_string(&bundle).map_err(json_err)?;
    std::fs::write(path, text)?;
    Ok(bundle.hash)
}

fn json_err(e: serde_json::Error) -> GraphError {
    GraphError::BadBundle(e.to_string())
}

/// Read a graph bundle back, rebuilding the dense matrices and verifying
/// the block structure.
pub fn read_graph_bundle(
    path: &Path,
) -> Result<(HierarchicalGraph, String, String, usize), GraphError> {
    let text = std::fs::read_to_string(path)?;
    let bundle: GraphBundle = serde_json::from_str(&text).map_err(json_err)?;
    if bundle.kind != "graph-bundle" {
        return Err(GraphError::BadBundle(format!(
            "expected graph-bundle, found {:?}",
            bundle.kind
        )));
    }
    let (nl, nc) = (bundle.locations, bundle.activities);
    let a_loc = from_coo_binary(&bundle.a_loc, nl, nl)?;
    let a_act = from_coo_binary(&bundle.a_act, nc, nc)?;
    let a_loc_act = from_coo_binary(&bundle.a_loc_act, nl + nc, nl + nc)?;
    let a_cc_new = from_coo_binary(&bundle.a_cc_new, 2 * nc, 2 * nc)?;
    let mut m_act = Matrix::zeros(nc, nc);
    for &(i, j, v) in &bundle.m_act {
        if i >= nc || j >= nc {
            return Err(GraphError::BadBundle(format!(
                "count entry ({i}, {j}) outside {nc}x{nc}"
            )));
        }
        m_act[(i, j)] = v;
    }

    // Verify the block invariants before trusting the matrices.
    let mut a_loc_act_l = Matrix::zeros(nl, nc);
    for l in 0..nl {
        let mut ones = 0;
        for c in 0..nc {
            let v = a_loc_act[(l, nl + c)];
            a_loc_act_l[(l, c)] = v;
            if v == 1.0 {
                ones += 1;
            }
            if a_loc_act[(nl + c, l)] != v {
                return Err(GraphError::BadBundle("affiliation block not symmetric".into()));
            }
        }
        if ones != 1 {
            return Err(GraphError::BadBundle(format!(
                "location {l} linked to {ones} categories"
            )));
        }
        for j in 0..nl {
            if a_loc_act[(l, j)] != 0.0 {
                return Err(GraphError::BadBundle("nonzero location diagonal block".into()));
            }
        }
    }
    for i in 0..nc {
        for j in 0..nc {
            let expected_id = if i == j { 1.0 } else { 0.0 };
            if a_cc_new[(i, nc + j)] != expected_id || a_cc_new[(nc + i, j)] != expected_id {
                return Err(GraphError::BadBundle("identity block violated".into()));
            }
            if a_cc_new[(nc + i, nc + j)] != 0.0 {
                return Err(GraphError::BadBundle("nonzero relay diagonal block".into()));
            }
            if a_cc_new[(i, j)] != a_act[(i, j)] {
                return Err(GraphError::BadBundle("activity block mismatch".into()));
            }
        }
    }

    let graph = HierarchicalGraph {
        a_loc,
        m_act,
        a_act,
        a_loc_act_l,
        a_loc_act,
        a_cc_new,
        d_h_km: bundle.d_h_km,
    };
    Ok((graph, bundle.hash, bundle.dataset_hash, bundle.hour_slots))
}

/// Dump one matrix as dense CSV for inspection.
pub fn write_dense_csv(m: &Matrix, path: &Path) -> Result<(), GraphError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.rows() {
        let line = m
            .row(i)
            .iter()
            .map(|v| {
                if *v == v.trunc() && v.abs() < 1e15 {
                    format!("{}", *v as i64)
                } else {
                    format!("{v}")
                }
            })
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MobilityRecord;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rec(activity: usize, hour_slot: usize) -> MobilityRecord {
        MobilityRecord {
            user: 0,
            activity,
            location: activity,
            hour_slot,
            weekday: 0,
            timestamp: 0,
            lat: 0.0,
            lon: 0.0,
        }
    }

    fn history_trajectory(items: &[(usize, usize)]) -> Trajectory {
        // Append a dummy target so `history()` returns exactly `items`.
        let mut records: Vec<MobilityRecord> = items.iter().map(|&(c, h)| rec(c, h)).collect();
        records.push(rec(0, 99));
        Trajectory { user: 0, records }
    }

    #[test]
    fn haversine_zero_and_one_degree() {
        assert_eq!(haversine_km((12.3, 45.6), (12.3, 45.6)), 0.0);
        let d = haversine_km((0.0, 0.0), (0.0, 1.0));
        assert_relative_eq!(d, 111.195, epsilon = 0.01);
    }

    #[test]
    fn location_adjacency_threshold_is_strict() {
        // Two points 0.843 km apart along the equator: 1 degree is
        // 111.195 km, so 0.843 km is 0.0075812... degrees.
        let delta = 0.843 / (EARTH_RADIUS_KM * std::f64::consts::PI / 180.0);
        let gps = [(0.0, 0.0), (0.0, delta)];
        assert_relative_eq!(haversine_km(gps[0], gps[1]), 0.843, epsilon = 1e-6);
        let near = build_location_adjacency(&gps, 1.0);
        assert_eq!(near[(0, 1)], 1.0);
        let far = build_location_adjacency(&gps, 0.5);
        assert_eq!(far[(0, 1)], 0.0);
    }

    #[test]
    fn location_adjacency_symmetric_unit_diagonal() {
        let gps = [(0.0, 0.0), (0.0, 0.005), (1.0, 1.0)];
        let a = build_location_adjacency(&gps, 1.0);
        for i in 0..3 {
            assert_eq!(a[(i, i)], 1.0);
            for j in 0..3 {
                assert_eq!(a[(i, j)], a[(j, i)]);
            }
        }
        // Co-located pair connected regardless of threshold.
        let a = build_location_adjacency(&[(5.0, 5.0), (5.0, 5.0)], 1e-9);
        assert_eq!(a[(0, 1)], 1.0);
    }

    #[test]
    fn cooccurrence_counts_matching_slots_only() {
        let t = history_trajectory(&[(1, 9), (2, 9), (0, 14)]);
        let m = build_activity_cooccurrence(&[t], 3);
        assert_eq!(m[(1, 2)], 1.0);
        assert_eq!(m[(2, 1)], 1.0);
        assert_eq!(m.sum(), 2.0);
    }

    #[test]
    fn cooccurrence_single_record_history_is_zero() {
        let t = history_trajectory(&[(1, 9)]);
        let m = build_activity_cooccurrence(&[t], 3);
        assert_eq!(m.sum(), 0.0);
    }

    #[test]
    fn cooccurrence_self_pair_counts_once() {
        let t = history_trajectory(&[(1, 9), (1, 9)]);
        let m = build_activity_cooccurrence(&[t], 3);
        assert_eq!(m[(1, 1)], 1.0);
        assert_eq!(m.sum(), 1.0);
    }

    #[test]
    fn threshold_hand_example() {
        // One off-diagonal count of 10 in a 3x3 matrix: after symmetrization
        // the pair carries 10 each way; mean = 20/9, so exactly that pair
        // exceeds it. Self-loops are forced.
        let mut m = Matrix::zeros(3, 3);
        m[(0, 1)] = 10.0;
        m[(1, 0)] = 10.0;
        let a = threshold_activity_adjacency(&m);
        let expected = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(a, expected);
    }

    #[test]
    fn threshold_uniform_matrix_gives_identity() {
        let m = Matrix::from_vec(3, 3, vec![4.0; 9]);
        assert_eq!(threshold_activity_adjacency(&m), Matrix::identity(3));
    }

    #[test]
    fn threshold_is_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut m = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let v = rng.gen_range(0..6) as f64;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        assert_eq!(
            threshold_activity_adjacency(&m),
            threshold_activity_adjacency(&m.scale(2.0))
        );
    }

    #[test]
    fn threshold_all_zero_falls_back_to_identity() {
        let a = threshold_activity_adjacency(&Matrix::zeros(3, 3));
        assert_eq!(a, Matrix::identity(3));
    }

    #[test]
    fn affiliation_block_structure() {
        let map: BTreeMap<usize, usize> = [(0, 0), (1, 0)].into_iter().collect();
        let (block, full) = build_affiliation(&map, 2, 2).unwrap();
        assert_eq!(block[(0, 0)], 1.0);
        assert_eq!(block[(1, 0)], 1.0);
        assert_eq!(block.col_sums()[1], 0.0);
        // Row sums of the first |L| rows of the full matrix are 1.
        for l in 0..2 {
            let s: f64 = full.row(l).iter().sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(full, full.transpose());
        // Diagonal blocks exactly zero.
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(full[(i, j)], 0.0);
                assert_eq!(full[(2 + i, 2 + j)], 0.0);
            }
        }
    }

    #[test]
    fn affiliation_missing_location_is_fatal() {
        let map: BTreeMap<usize, usize> = [(0, 0)].into_iter().collect();
        assert!(matches!(
            build_affiliation(&map, 2, 1),
            Err(GraphError::MissingCategory(1))
        ));
    }

    #[test]
    fn cc_adjacency_blocks() {
        let a = Matrix::from_vec(1, 1, vec![1.0]);
        let full = build_cc_adjacency(&a);
        assert_eq!(full, Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]));

        let a = threshold_activity_adjacency(&Matrix::zeros(3, 3));
        let full = build_cc_adjacency(&a);
        for i in 0..3 {
            assert_eq!(full[(i, 3 + i)], 1.0);
            for j in 0..3 {
                assert_eq!(full[(3 + i, 3 + j)], 0.0);
            }
        }
    }

    #[test]
    fn edge_count_monotone_in_distance_threshold() {
        let mut rng = StdRng::seed_from_u64(4);
        let gps: Vec<(f64, f64)> = (0..12)
            .map(|_| (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)))
            .collect();
        let mut last = 0.0;
        for d in [0.1, 0.5, 1.0, 5.0, 20.0] {
            let edges = build_location_adjacency(&gps, d).sum();
            assert!(edges >= last, "edge count decreased at d_h = {d}");
            last = edges;
        }
    }

    #[test]
    fn graph_bundle_roundtrip() {
        let gps = [(0.0, 0.0), (0.0, 0.004), (0.3, 0.3)];
        let affiliation = [0usize, 1, 0];
        let trajectories = vec![history_trajectory(&[(0, 9), (1, 9), (0, 9)])];
        let graph = build_graph(&gps, &affiliation, &trajectories, 2, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let hash = write_graph_bundle(&graph, "abcd", 24, &path).unwrap();
        let (back, hash_back, ds_hash, hour_slots) = read_graph_bundle(&path).unwrap();
        assert_eq!(back, graph);
        assert_eq!(hash, hash_back);
        assert_eq!(ds_hash, "abcd");
        assert_eq!(hour_slots, 24);
    }

    proptest! {
        #[test]
        fn haversine_is_symmetric(lat1 in -89.0f64..89.0, lon1 in -179.0f64..179.0,
                                  lat2 in -89.0f64..89.0, lon2 in -179.0f64..179.0) {
            let d1 = haversine_km((lat1, lon1), (lat2, lon2));
            let d2 = haversine_km((lat2, lon2), (lat1, lon1));
            prop_assert!((d1 - d2).abs() < 1e-9);
            prop_assert!(d1 >= 0.0);
        }

        #[test]
        fn cooccurrence_is_order_independent(seed in 0u64..200) {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut trajectories = Vec::new();
            for user in 0..4 {
                let items: Vec<(usize, usize)> = (0..rng.gen_range(2..6))
                    .map(|_| (rng.gen_range(0..3), rng.gen_range(0..4)))
                    .collect();
                let mut t = history_trajectory(&items);
                t.user = user;
                trajectories.push(t);
            }
            let m1 = build_activity_cooccurrence(&trajectories, 3);
            let mut shuffled = trajectories.clone();
            shuffled.reverse();
            let m2 = build_activity_cooccurrence(&shuffled, 3);
            prop_assert_eq!(m1, m2);
        }
    }
}
