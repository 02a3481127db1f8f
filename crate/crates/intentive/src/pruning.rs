//! Progressive structure pruning. Layer pruning keeps a contiguous
//! intermediate span; element pruning selects evenly-spaced indices per
//! axis (whole attention heads, then per-head widths); the projections
//! are re-zeroed and the tap/inject points move inward after each event.

use serde::{Deserialize, Serialize};

use crate::encoder::LayerWeights;
use crate::error::{Error, Result};
use crate::introspect::{make_reduction, IntentModel, ZeroProjection};
use crate::numcore::Tensor;

/// Dimensions the student introspector should have after one event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneTarget {
    pub layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
}

/// Ordered pruning events, one per phase boundary that prunes.
pub type PruneSchedule = Vec<PruneTarget>;

pub fn validate_schedule(schedule: &PruneSchedule) -> Result<()> {
    for pair in schedule.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.layers > a.layers
            || b.hidden_dim > a.hidden_dim
            || b.num_heads > a.num_heads
            || b.intermediate_dim > a.intermediate_dim
        {
            return Err(Error::Config(format!(
                "pruning schedule must be non-increasing, got {a:?} then {b:?}"
            )));
        }
    }
    Ok(())
}

/// index_i = floor(i*t/s) for i in 0..s; strictly increasing.
pub fn select_evenly_spaced(t: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > t {
        return Err(Error::InvalidInput(format!(
            "cannot select {s} evenly spaced indices out of {t}"
        )));
    }
    Ok((0..s).map(|i| i * t / s).collect())
}

/// Drop ceil((T-S)/2) initial and floor((T-S)/2) final layers; the
/// retained indices are the contiguous middle span.
pub fn prune_layers(teacher_layers: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > teacher_layers {
        return Err(Error::InvalidInput(format!(
            "cannot retain {s} of {teacher_layers} layers"
        )));
    }
    let gap = teacher_layers - s;
    let drop_initial = gap.div_ceil(2);
    Ok((drop_initial..drop_initial + s).collect())
}

/// Column pattern for the head-structured axis of Wq/Wk/Wv (and the row
/// axis of Wo): whole heads chosen by select_evenly_spaced(h, h'), each
/// shrunk internally with the evenly-spaced pattern over the teacher
/// head width.
pub fn head_axis_pattern(d: usize, h: usize, d_p: usize, h_p: usize) -> Result<Vec<usize>> {
    if h == 0 || d % h != 0 || h_p == 0 || d_p % h_p != 0 {
        return Err(Error::Config(format!(
            "head dims must divide: d={d} h={h} d'={d_p} h'={h_p}"
        )));
    }
    let dh = d / h;
    let dh_p = d_p / h_p;
    if dh_p > dh {
        return Err(Error::Config(format!(
            "per-head width cannot grow: {dh} -> {dh_p} (d'/h' must be <= d/h)"
        )));
    }
    let heads = select_evenly_spaced(h, h_p)?;
    let within = select_evenly_spaced(dh, dh_p)?;
    let mut pattern = Vec::with_capacity(d_p);
    for &g in &heads {
        for &j in &within {
            pattern.push(g * dh + j);
        }
    }
    Ok(pattern)
}

fn gather2(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &col in cols {
            data.push(t.data[r * c + col]);
        }
    }
    Tensor::new(vec![rows.len(), cols.len()], data).expect("gather shape")
}

fn gather_row(t: &Tensor, cols: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(cols.len());
    for &c in cols {
        data.push(t.data[c]);
    }
    Tensor::new(vec![1, cols.len()], data).expect("gather shape")
}

/// Evenly-spaced element pruning of a transformer stack. One hidden,
/// one intermediate, and one head index set are computed once and
/// reused across every tensor sharing that axis.
pub fn prune_elements(
    teacher: &[LayerWeights],
    teacher_heads: usize,
    target: &PruneTarget,
) -> Result<Vec<LayerWeights>> {
    let first = teacher.first().ok_or_else(|| {
        Error::InvalidInput("prune_elements: empty teacher stack".into())
    })?;
    let d = first.wq.rows();
    let f = first.w1.cols();
    if target.hidden_dim > d || target.intermediate_dim > f || target.num_heads > teacher_heads
    {
        return Err(Error::InvalidInput(format!(
            "target dims exceed teacher: d {d}->{}, f {f}->{}, h {teacher_heads}->{}",
            target.hidden_dim, target.intermediate_dim, target.num_heads
        )));
    }
    if target.intermediate_dim < target.hidden_dim {
        return Err(Error::Config(format!(
            "intermediate dim {} must stay >= hidden dim {}",
            target.intermediate_dim, target.hidden_dim
        )));
    }
    let hidden_idx = select_evenly_spaced(d, target.hidden_dim)?;
    let inter_idx = select_evenly_spaced(f, target.intermediate_dim)?;
    let head_pattern =
        head_axis_pattern(d, teacher_heads, target.hidden_dim, target.num_heads)?;

    Ok(teacher
        .iter()
        .map(|l| LayerWeights {
            wq: gather2(&l.wq, &hidden_idx, &head_pattern),
            bq: gather_row(&l.bq, &head_pattern),
            wk: gather2(&l.wk, &hidden_idx, &head_pattern),
            bk: gather_row(&l.bk, &head_pattern),
            wv: gather2(&l.wv, &hidden_idx, &head_pattern),
            bv: gather_row(&l.bv, &head_pattern),
            wo: gather2(&l.wo, &head_pattern, &hidden_idx),
            bo: gather_row(&l.bo, &hidden_idx),
            ln1_gain: gather_row(&l.ln1_gain, &hidden_idx),
            ln1_bias: gather_row(&l.ln1_bias, &hidden_idx),
            w1: gather2(&l.w1, &hidden_idx, &inter_idx),
            b1: gather_row(&l.b1, &inter_idx),
            w2: gather2(&l.w2, &inter_idx, &hidden_idx),
            b2: gather_row(&l.b2, &hidden_idx),
            ln2_gain: gather_row(&l.ln2_gain, &hidden_idx),
            ln2_bias: gather_row(&l.ln2_bias, &hidden_idx),
        })
        .collect())
}

/// One pruning event on the whole model: teacher-to-student layer and
/// element pruning of the introspector, zero projections rebuilt at the
/// new width, width bridge refreshed, and the tap/inject points moved
/// inward to the retained span (clamped to [1, L-1] of the base).
pub fn apply_phase_pruning(model: &IntentModel, target: &PruneTarget) -> Result<IntentModel> {
    let cur_layers = model.introspector.len();
    let spec = &model.spec;
    if target.layers > cur_layers
        || target.hidden_dim > spec.hidden_dim
        || target.intermediate_dim > spec.intermediate_dim
        || target.num_heads > spec.num_heads
    {
        return Err(Error::InvalidInput(format!(
            "prune target {target:?} exceeds current introspector ({} layers, d'={}, f'={}, h'={})",
            cur_layers, spec.hidden_dim, spec.intermediate_dim, spec.num_heads
        )));
    }
    let keep_rel = prune_layers(cur_layers, target.layers)?;
    let kept_layers: Vec<LayerWeights> = keep_rel
        .iter()
        .map(|&i| model.introspector[i].clone())
        .collect();
    let student = prune_elements(&kept_layers, spec.num_heads, target)?;

    let retained: Vec<usize> = keep_rel.iter().map(|&i| spec.retained_layers[i]).collect();
    let base_l = model.base_query.config.num_layers;
    let clamp = |v: usize| v.clamp(1, base_l - 1);
    let l_early = clamp(retained[0]);
    let l_late = clamp(retained[retained.len() - 1] + 1);
    if l_early >= l_late {
        return Err(Error::Config(format!(
            "pruned tap/inject degenerate: l_early {l_early} >= l_late {l_late}"
        )));
    }

    let d = model.base_query.config.hidden_dim;
    let mut pruned = model.clone();
    pruned.introspector = student;
    pruned.zp1 = ZeroProjection::new(d, target.hidden_dim);
    pruned.zp2 = ZeroProjection::new(target.hidden_dim, d);
    pruned.reduction = if target.hidden_dim == d {
        None
    } else {
        Some(make_reduction(d, target.hidden_dim)?)
    };
    pruned.spec = crate::introspect::IntrospectorSpec {
        retained_layers: retained,
        hidden_dim: target.hidden_dim,
        num_heads: target.num_heads,
        intermediate_dim: target.intermediate_dim,
        l_early,
        l_late,
    };
    pruned.validate()?;
    Ok(pruned)
}
