//! Multi-head graph attention and the hierarchical pass over the
//! location / localized-activity / activity layers.

use crate::hiergraph::HierarchicalGraph;
use crate::tensor::{Matrix, Tensor};

use super::{BoundGat, BoundParams, ELU_ALPHA, LEAKY_SLOPE};

/// Output of one attention layer.
pub struct GatOutput {
    /// `n x d_final` node representations.
    pub output: Tensor,
    /// Per-head attention matrices, captured on request.
    pub attention: Vec<Matrix>,
}

/// One multi-head graph attention layer.
///
/// Per head `k`: project `z = h W^k`, score every directed pair through the
/// reduced attention vectors (`e_ij = z_i a_src + z_j a_dst`), pass the
/// scores through a leaky ReLU, normalize each row over the adjacency mask,
/// and aggregate `elu(alpha z)`. Head outputs are concatenated and sent
/// through the final projection plus bias.
///
/// Rows of `adjacency` must have at least one admitted entry unless
/// `allow_isolated` is set, in which case an isolated node attends to
/// nothing and its pre-projection features are zero.
pub fn gat_layer(
    h: &Tensor,
    adjacency: &Matrix,
    params: &BoundGat,
    allow_isolated: bool,
    capture_attention: bool,
) -> GatOutput {
    let n = h.rows();
    assert_eq!(
        adjacency.shape(),
        (n, n),
        "adjacency {:?} does not match {n} nodes",
        adjacency.shape()
    );
    let tape = h.tape();

    let mut attention = Vec::new();
    let mut heads_out: Option<Tensor> = None;
    for head in &params.heads {
        let z = h.matmul(&head.weight);
        let src = z.matmul(&head.attn_src); // n x 1
        let dst = z.matmul(&head.attn_dst); // n x 1
        let scores = tape
            .zeros(n, n)
            .broadcast_add(&src)
            .broadcast_add(&dst.transpose())
            .leaky_relu(LEAKY_SLOPE);
        let alpha = if allow_isolated {
            scores.masked_softmax_rows_allow_empty(adjacency)
        } else {
            scores.masked_softmax_rows(adjacency)
        };
        if capture_attention {
            attention.push(alpha.value());
        }
        let aggregated = alpha.matmul(&z).elu(ELU_ALPHA);
        heads_out = Some(match heads_out {
            None => aggregated,
            Some(prev) => prev.concat_cols(&aggregated),
        });
    }
    let concat = heads_out.expect("a graph attention layer has at least one head");
    let output = concat.matmul(&params.proj).broadcast_add(&params.bias);
    GatOutput { output, attention }
}

/// Hierarchical graph representations for one forward pass.
pub struct GraphReps {
    /// `|L| x d_g`, present unless the graph module is ablated.
    pub h_loc: Option<Tensor>,
    /// `|C| x d_g`, present when the activity layers are in play.
    pub h_act: Option<Tensor>,
}

/// Attention matrices of one layer, labeled for inspection.
pub struct LayerAttention {
    pub layer: &'static str,
    /// One `n x n` matrix per head.
    pub heads: Vec<Matrix>,
}

/// Run the full hierarchical attention pass.
///
/// Location layer: attention over the spatial adjacency. Localized-activity
/// layer: attention over the affiliation block matrix, keeping the relay
/// rows. Activity layer: attention over the extended activity/relay block,
/// keeping the activity rows. A category without any venue yields an
/// isolated relay node; its row aggregates nothing and the activity node
/// still reaches it through the identity block.
pub fn hgat_forward(
    bound: &BoundParams,
    graph: &HierarchicalGraph,
    capture_attention: bool,
) -> (GraphReps, Vec<LayerAttention>) {
    let mut layers = Vec::new();

    let h_loc = bound.gat_loc.as_ref().map(|gat| {
        let out = gat_layer(&bound.loc_emb, &graph.a_loc, gat, false, capture_attention);
        if capture_attention {
            layers.push(LayerAttention {
                layer: "location",
                heads: out.attention,
            });
        }
        out.output
    });

    let h_act = match (&bound.gat_affil, &bound.gat_act, &bound.act_emb) {
        (Some(affil), Some(act), Some(act_emb)) => {
            let n_loc = graph.n_locations();
            let n_act = graph.n_activities();

            let joined = bound.loc_emb.concat_rows(act_emb);
            let affil_out = gat_layer(&joined, &graph.a_loc_act, affil, true, capture_attention);
            let h_relay = affil_out.output.slice_rows(n_loc, n_loc + n_act);
            if capture_attention {
                layers.push(LayerAttention {
                    layer: "affiliation",
                    heads: affil_out.attention,
                });
            }

            let joined = act_emb.concat_rows(&h_relay);
            let act_out = gat_layer(&joined, &graph.a_cc_new, act, false, capture_attention);
            if capture_attention {
                layers.push(LayerAttention {
                    layer: "activity",
                    heads: act_out.attention,
                });
            }
            Some(act_out.output.slice_rows(0, n_act))
        }
        _ => None,
    };

    (GraphReps { h_loc, h_act }, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::{ModelParams, Sizes};
    use crate::tensor::Tape;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_config() -> RunConfig {
        RunConfig {
            embed_dim: 4,
            user_dim: 3,
            time_dim: 3,
            graph_dim: 4,
            hidden_dim: 6,
            attention_heads: 2,
            hour_slots: 4,
            ..RunConfig::default()
        }
    }

    fn test_params(seed: u64) -> ModelParams {
        ModelParams::new(
            &test_config(),
            Sizes {
                users: 2,
                activities: 3,
                locations: 4,
                hour_slots: 4,
            },
            seed,
        )
    }

    #[test]
    fn single_node_attention_collapses_to_one() {
        let params = test_params(3);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let h = tape.constant(Matrix::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]));
        let out = gat_layer(
            &h,
            &Matrix::identity(1),
            bound.gat_loc.as_ref().unwrap(),
            false,
            true,
        );
        assert_eq!(out.attention[0], Matrix::from_vec(1, 1, vec![1.0]));
        assert_eq!(out.output.shape(), (1, 4));
    }

    #[test]
    fn identity_adjacency_gives_identity_attention() {
        let params = test_params(4);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut rng = StdRng::seed_from_u64(5);
        let h = tape.constant(Matrix::uniform(4, 4, -1.0, 1.0, &mut rng));
        let out = gat_layer(
            &h,
            &Matrix::identity(4),
            bound.gat_loc.as_ref().unwrap(),
            false,
            true,
        );
        for alpha in &out.attention {
            assert_eq!(alpha, &Matrix::identity(4));
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_mask() {
        let params = test_params(6);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut rng = StdRng::seed_from_u64(7);
        let n = 5;
        let h = tape.constant(Matrix::uniform(n, 4, -1.0, 1.0, &mut rng));
        let mut adj = Matrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.5) {
                    adj[(i, j)] = 1.0;
                }
            }
        }
        let out = gat_layer(&h, &adj, bound.gat_loc.as_ref().unwrap(), false, true);
        for alpha in &out.attention {
            for i in 0..n {
                let s: f64 = alpha.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
                for j in 0..n {
                    if adj[(i, j)] == 0.0 {
                        assert_eq!(alpha[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn hand_computed_three_node_path() {
        // One head, d_in = d_out = 2, weights set by hand; the expected
        // attention and output rows are recomputed below with straight-line
        // arithmetic, independent of the tape.
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let w = Matrix::from_rows(&[vec![0.5, -0.3], vec![0.2, 0.4]]);
        let a_src = [0.7, -0.5];
        let a_dst = [0.1, 0.9];
        // Path graph 0-1-2 with self loops.
        let adj = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ]);

        let z: Vec<[f64; 2]> = (0..3)
            .map(|i| {
                [
                    h[(i, 0)] * w[(0, 0)] + h[(i, 1)] * w[(1, 0)],
                    h[(i, 0)] * w[(0, 1)] + h[(i, 1)] * w[(1, 1)],
                ]
            })
            .collect();
        let src: Vec<f64> = z.iter().map(|z| z[0] * a_src[0] + z[1] * a_src[1]).collect();
        let dst: Vec<f64> = z.iter().map(|z| z[0] * a_dst[0] + z[1] * a_dst[1]).collect();
        let leaky = |x: f64| if x >= 0.0 { x } else { 0.2 * x };
        let mut expected_alpha = Matrix::zeros(3, 3);
        for i in 0..3 {
            let admitted: Vec<usize> = (0..3).filter(|&j| adj[(i, j)] > 0.0).collect();
            let scores: Vec<f64> = admitted.iter().map(|&j| leaky(src[i] + dst[j])).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (&j, e) in admitted.iter().zip(&exps) {
                expected_alpha[(i, j)] = e / denom;
            }
        }

        // Drive the same numbers through the tape path.
        let tape = Tape::new();
        let th = tape.constant(h.clone());
        let bound_head = crate::model::BoundHead {
            weight: tape.leaf(w.clone(), true),
            attn_src: tape.leaf(Matrix::col_from(&a_src), true),
            attn_dst: tape.leaf(Matrix::col_from(&a_dst), true),
        };
        let gat = BoundGat {
            heads: vec![bound_head],
            proj: tape.leaf(Matrix::identity(2), true),
            bias: tape.leaf(Matrix::zeros(1, 2), true),
        };
        let out = gat_layer(&th, &adj, &gat, false, true);
        let alpha = &out.attention[0];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(alpha[(i, j)], expected_alpha[(i, j)], epsilon = 1e-12);
            }
        }

        // Output row check: elu(alpha z) with identity projection.
        let elu = |x: f64| if x >= 0.0 { x } else { x.exp() - 1.0 };
        let value = out.output.value();
        for i in 0..3 {
            for d in 0..2 {
                let agg: f64 = (0..3).map(|j| expected_alpha[(i, j)] * z[j][d]).sum();
                assert_relative_eq!(value[(i, d)], elu(agg), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let params = test_params(8);
        let mut rng = StdRng::seed_from_u64(9);
        let n = 5;
        let h = Matrix::uniform(n, 4, -1.0, 1.0, &mut rng);
        let mut adj = Matrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.4) {
                    adj[(i, j)] = 1.0;
                    adj[(j, i)] = 1.0;
                }
            }
        }
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };

        let run = |h: &Matrix, adj: &Matrix| -> Matrix {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            gat_layer(
                &tape.constant(h.clone()),
                adj,
                bound.gat_loc.as_ref().unwrap(),
                false,
                false,
            )
            .output
            .value()
        };

        let base = run(&h, &adj);
        let mut h_p = Matrix::zeros(n, 4);
        let mut adj_p = Matrix::zeros(n, n);
        for i in 0..n {
            h_p.row_mut(i).copy_from_slice(h.row(perm[i]));
            for j in 0..n {
                adj_p[(i, j)] = adj[(perm[i], perm[j])];
            }
        }
        let permuted = run(&h_p, &adj_p);
        for i in 0..n {
            for d in 0..4 {
                assert_relative_eq!(permuted[(i, d)], base[(perm[i], d)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn non_neighbor_gradient_is_exactly_zero() {
        let params = test_params(10);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut rng = StdRng::seed_from_u64(11);
        let n = 4;
        let h0 = Matrix::uniform(n, 4, -1.0, 1.0, &mut rng);
        let h = tape.leaf(h0, true);
        // Node 0 neighbors: itself and node 1 only.
        let adj = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ]);
        let out = gat_layer(&h, &adj, bound.gat_loc.as_ref().unwrap(), false, false);
        let loss = out.output.slice_rows(0, 1).sum();
        tape.backward(&loss);
        let grad = h.grad().unwrap();
        for j in [2usize, 3] {
            assert!(
                grad.row(j).iter().all(|&g| g == 0.0),
                "non-neighbor {j} received gradient {:?}",
                grad.row(j)
            );
        }
        assert!(grad.row(0).iter().any(|&g| g != 0.0));
    }

    #[test]
    #[should_panic(expected = "admits no entries")]
    fn isolated_node_is_fatal_by_default() {
        let params = test_params(12);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let h = tape.constant(Matrix::zeros(2, 4));
        let mut adj = Matrix::zeros(2, 2);
        adj[(0, 0)] = 1.0;
        gat_layer(&h, &adj, bound.gat_loc.as_ref().unwrap(), false, false);
    }

    fn toy_graph(n_loc: usize, n_act: usize, empty_category: Option<usize>) -> HierarchicalGraph {
        let gps: Vec<(f64, f64)> = (0..n_loc).map(|i| (0.0, i as f64 * 0.003)).collect();
        let affiliation: Vec<usize> = (0..n_loc)
            .map(|l| {
                let mut c = l % n_act;
                if Some(c) == empty_category {
                    c = (c + 1) % n_act;
                }
                c
            })
            .collect();
        crate::hiergraph::build_graph(&gps, &affiliation, &[], n_act, 1.0).unwrap()
    }

    #[test]
    fn hgat_output_shapes() {
        let params = test_params(13);
        let graph = toy_graph(4, 3, None);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (reps, _) = hgat_forward(&bound, &graph, false);
        assert_eq!(reps.h_loc.unwrap().shape(), (4, 4));
        assert_eq!(reps.h_act.unwrap().shape(), (3, 4));
    }

    #[test]
    fn category_without_venues_still_gets_a_representation() {
        let params = test_params(14);
        let graph = toy_graph(4, 3, Some(2));
        // Category 2 has no venue: its affiliation column is all zero.
        assert_eq!(graph.a_loc_act_l.col_sums()[2], 0.0);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (reps, _) = hgat_forward(&bound, &graph, false);
        let h_act = reps.h_act.unwrap().value();
        assert!(h_act.is_finite());
        assert_eq!(h_act.rows(), 3);
    }

    #[test]
    fn hgat_matches_straight_line_reimplementation() {
        // Recompute the whole hierarchical pass with plain matrix algebra
        // and no tape machinery, then compare.
        let params = test_params(15);
        let graph = toy_graph(4, 3, None);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (reps, _) = hgat_forward(&bound, &graph, false);
        let got_loc = reps.h_loc.unwrap().value();
        let got_act = reps.h_act.unwrap().value();

        let leaky = |x: f64| if x >= 0.0 { x } else { 0.2 * x };
        let elu = |x: f64| if x >= 0.0 { x } else { x.exp() - 1.0 };
        let plain_gat = |h: &Matrix, adj: &Matrix, gat: &crate::model::GatParams| -> Matrix {
            let n = h.rows();
            let mut heads = Vec::new();
            for head in &gat.heads {
                let z = h.matmul(&head.weight);
                let src = z.matmul(&head.attn_src);
                let dst = z.matmul(&head.attn_dst);
                let mut alpha = Matrix::zeros(n, n);
                for i in 0..n {
                    let admitted: Vec<usize> = (0..n).filter(|&j| adj[(i, j)] > 0.0).collect();
                    if admitted.is_empty() {
                        continue;
                    }
                    let scores: Vec<f64> = admitted
                        .iter()
                        .map(|&j| leaky(src[(i, 0)] + dst[(j, 0)]))
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for (&j, e) in admitted.iter().zip(&exps) {
                        alpha[(i, j)] = e / denom;
                    }
                }
                heads.push(alpha.matmul(&z).map(elu));
            }
            let mut concat = Matrix::zeros(n, heads.len() * heads[0].cols());
            for i in 0..n {
                let mut offset = 0;
                for head in &heads {
                    concat.row_mut(i)[offset..offset + head.cols()].copy_from_slice(head.row(i));
                    offset += head.cols();
                }
            }
            let mut out = concat.matmul(&gat.proj);
            for i in 0..n {
                for (o, b) in out.row_mut(i).iter_mut().zip(gat.bias.row(0)) {
                    *o += b;
                }
            }
            out
        };

        let expected_loc = plain_gat(&params.loc_emb, &graph.a_loc, params.gat_loc.as_ref().unwrap());
        let act_emb = params.act_emb.as_ref().unwrap();
        let mut joined = Matrix::zeros(7, 4);
        for i in 0..4 {
            joined.row_mut(i).copy_from_slice(params.loc_emb.row(i));
        }
        for i in 0..3 {
            joined.row_mut(4 + i).copy_from_slice(act_emb.row(i));
        }
        let affil_full = plain_gat(&joined, &graph.a_loc_act, params.gat_affil.as_ref().unwrap());
        let mut joined2 = Matrix::zeros(6, 4);
        for i in 0..3 {
            joined2.row_mut(i).copy_from_slice(act_emb.row(i));
            joined2.row_mut(3 + i).copy_from_slice(affil_full.row(4 + i));
        }
        let act_full = plain_gat(&joined2, &graph.a_cc_new, params.gat_act.as_ref().unwrap());

        assert_relative_eq!(
            crate::gradcheck::max_rel_err(&got_loc, &expected_loc, 1e-12),
            0.0,
            epsilon = 1e-10
        );
        for i in 0..3 {
            for d in 0..4 {
                assert_relative_eq!(got_act[(i, d)], act_full[(i, d)], epsilon = 1e-10);
            }
        }
    }
}
