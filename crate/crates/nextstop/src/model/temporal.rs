//! Sequence encoders and decoders.
//!
//! Two LSTMs consume the embedded history: the activity encoder sees
//! user / time / activity features, the location encoder additionally sees
//! the location features. Graph representations are appended per step when
//! present. The activity decoder is a single affine map; the location
//! decoder residually mixes a direct affine map with an activity-conditioned
//! fusion branch.

use crate::dataset::MobilityRecord;
use crate::tensor::{Tape, Tensor};

use super::{BoundLstm, BoundParams, GraphReps};

/// One LSTM update. `x` is the step input as a column vector; `h` and `c`
/// are carried state, zero-initialized at the first step. The packed
/// preactivation splits into input, forget, cell, and output gates.
pub fn lstm_step(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    lstm: &BoundLstm,
    hidden: usize,
) -> (Tensor, Tensor) {
    let pre = lstm
        .w_x
        .matmul(x)
        .add(&lstm.b_x)
        .add(&lstm.w_h.matmul(h).add(&lstm.b_h));
    let input_gate = pre.slice_rows(0, hidden);
    let forget_gate = pre.slice_rows(hidden, 2 * hidden);
    let cell_gate = pre.slice_rows(2 * hidden, 3 * hidden);
    let output_gate = pre.slice_rows(3 * hidden, 4 * hidden);

    let c_next = forget_gate
        .sigmoid()
        .hadamard(c)
        .add(&input_gate.sigmoid().hadamard(&cell_gate.tanh()));
    let h_next = output_gate.sigmoid().hadamard(&c_next.tanh());
    (h_next, c_next)
}

/// Next-step logits as column vectors.
pub struct Logits {
    /// `|C| x 1`; absent for the activity-free variant.
    pub activity: Option<Tensor>,
    /// `|L| x 1`.
    pub location: Tensor,
}

/// Encode a history and decode the next activity and location.
///
/// Graph representations in `reps` must match the plan: the pass uses the
/// activity representation (once per step, indexed by that step's activity)
/// and the location representation whenever the plan enables them.
pub fn forward(bound: &BoundParams, history: &[MobilityRecord], reps: &GraphReps) -> Logits {
    assert!(!history.is_empty(), "cannot encode an empty history");
    let tape = bound.user_emb.tape();
    let plan = &bound.plan;
    let hidden = bound.hidden_dim;

    let user = history[0].user;
    let e_user = bound.user_emb.gather_rows(&[user]).transpose();

    let mut act_state = plan
        .use_activity
        .then(|| (tape.zeros(hidden, 1), tape.zeros(hidden, 1)));
    let mut loc_state = (tape.zeros(hidden, 1), tape.zeros(hidden, 1));

    for record in history {
        let e_time = bound
            .hour_emb
            .gather_rows(&[record.hour_slot])
            .add(&bound.week_emb.gather_rows(&[record.weekday]))
            .transpose();
        let h_act_node = reps
            .h_act
            .as_ref()
            .map(|h| h.gather_rows(&[record.activity]).transpose());

        if let (Some((h, c)), Some(lstm), Some(act_emb)) =
            (&act_state, &bound.lstm_act, &bound.act_emb)
        {
            let e_act = act_emb.gather_rows(&[record.activity]).transpose();
            let mut x = concat_stack(&[&e_user, &e_time, &e_act]);
            if let Some(h_node) = &h_act_node {
                x = x.concat_rows(h_node);
            }
            act_state = Some(lstm_step(&x, h, c, lstm, hidden));
        }

        let e_loc = bound.loc_emb.gather_rows(&[record.location]).transpose();
        let mut x = concat_stack(&[&e_user, &e_time, &e_loc]);
        if let Some(h_node) = &h_act_node {
            x = x.concat_rows(h_node);
        }
        if let Some(h_loc) = &reps.h_loc {
            x = x.concat_rows(&h_loc.gather_rows(&[record.location]).transpose());
        }
        let (h, c) = &loc_state;
        loc_state = lstm_step(&x, h, c, &bound.lstm_loc, hidden);
    }

    let h_loc_final = loc_state.0;
    let activity_logits = match (&act_state, &bound.dec_act) {
        (Some((h_act_final, _)), Some(dec)) => Some(dec.apply(h_act_final)),
        _ => None,
    };

    let location = location_logits(&tape, bound, &h_loc_final, act_state.as_ref().map(|s| &s.0), activity_logits.as_ref());
    Logits {
        activity: activity_logits,
        location,
    }
}

fn location_logits(
    _tape: &Tape,
    bound: &BoundParams,
    h_loc: &Tensor,
    h_act: Option<&Tensor>,
    activity_logits: Option<&Tensor>,
) -> Tensor {
    let plan = &bound.plan;
    let residual = bound.dec_loc_res.as_ref().map(|dec| dec.apply(h_loc));
    let fused = if plan.use_fusion_path {
        let h_act = h_act.expect("fusion path requires the activity encoder");
        let act_logits = activity_logits.expect("fusion path requires activity logits");
        let hidden = bound
            .dec_fuse_hidden
            .as_ref()
            .expect("fusion path requires its hidden projection");
        let joined = h_loc.concat_rows(h_act);
        let fused_hidden = hidden.apply(&joined).tanh();
        let dec = bound
            .dec_loc
            .as_ref()
            .expect("fusion path requires the fused decoder");
        Some(dec.apply(&fused_hidden.concat_rows(act_logits)))
    } else {
        None
    };

    match (residual, fused) {
        (Some(r), Some(f)) => r
            .scale(plan.lambda_r)
            .add(&f.scale(1.0 - plan.lambda_r)),
        (Some(r), None) => r,
        (None, Some(f)) => f,
        (None, None) => unreachable!("config validation keeps at least one decoder path"),
    }
}

fn concat_stack(parts: &[&Tensor]) -> Tensor {
    let mut iter = parts.iter();
    let first = (*iter.next().expect("concat of at least one part")).clone();
    iter.fold(first, |acc, part| acc.concat_rows(part))
}
