//! Target construction and the multi-task training loss.
//!
//! Classification targets are Gaussian soft labels: the touch-class target
//! at frame `l` is `max over events t* of exp(-(l-t*)^2 / (2 sigma^2))` for
//! `|l - t*| <= w` and 0 outside every window; the background target is the
//! complement, so each row is a valid distribution. Overlapping event
//! windows combine by max, keeping targets within [0, 1].
//!
//! The total objective is `L_c + L_d + lambda_g * L_g`: classification
//! (focal or weighted cross-entropy) over all frames, masked MSE on the
//! per-frame displacement to the nearest event, and masked cross-entropy
//! on per-hand grasp categories.

use crate::autograd::{Graph, Var};
use crate::config::{LossKind, SpotConfig};
use crate::types::{GraspPair, GRASP_CATEGORIES};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("non-finite {part} loss")]
    NonFinitePart { part: &'static str },
}

/// Guard for `ln(0)` in the loss terms.
pub const LOG_EPS: f64 = 1e-8;

/// Per-clip supervision targets.
#[derive(Debug, Clone)]
pub struct SupervisionTargets {
    /// `[L, 2]` class target distribution per frame (column 1 = touch).
    pub y_c: Array2<f64>,
    /// `[L]` displacement to the nearest in-window event.
    pub y_d: Array1<f64>,
    /// `[L]` true where the frame lies within `w` of some event.
    pub d_mask: Vec<bool>,
    /// Per-frame (left, right) grasp categories.
    pub y_g: Vec<GraspPair>,
    /// `[L][2]` true where a grasp label exists.
    pub g_mask: Vec<[bool; 2]>,
}

/// Gaussian soft classification targets; see the module docs for the rule.
pub fn build_soft_labels(events: &[usize], l: usize, w: usize, sigma: f64) -> Array2<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut out = Array2::zeros((l, 2));
    for frame in 0..l {
        let mut touch = 0.0f64;
        for &t in events {
            debug_assert!(t < l, "event outside clip");
            let d = frame.abs_diff(t);
            if d <= w {
                let g = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
                touch = touch.max(g);
            }
        }
        out[[frame, 0]] = 1.0 - touch;
        out[[frame, 1]] = touch;
    }
    out
}

/// Hard window labels (the soft-label ablation): touch target 1 within `w`
/// of an event, 0 elsewhere.
pub fn build_hard_labels(events: &[usize], l: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((l, 2));
    for frame in 0..l {
        let inside = events.iter().any(|&t| frame.abs_diff(t) <= w);
        let touch = if inside { 1.0 } else { 0.0 };
        out[[frame, 0]] = 1.0 - touch;
        out[[frame, 1]] = touch;
    }
    out
}

/// Displacement targets: for frames within `w` of an event, the signed
/// offset `t* - l` to the nearest event, ties toward the earlier event.
pub fn build_displacement_targets(events: &[usize], l: usize, w: usize) -> (Array1<f64>, Vec<bool>) {
    let mut y_d = Array1::zeros(l);
    let mut mask = vec![false; l];
    for frame in 0..l {
        let mut best: Option<(usize, usize)> = None; // (distance, event)
        for &t in events {
            let d = frame.abs_diff(t);
            if d > w {
                continue;
            }
            // strict < keeps the earlier event on ties (events ascend)
            if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                best = Some((d, t));
            }
        }
        if let Some((_, t)) = best {
            y_d[frame] = t as f64 - frame as f64;
            mask[frame] = true;
        }
    }
    (y_d, mask)
}

/// All targets for one clip under `cfg`.
pub fn build_targets(
    events: &[usize],
    grasp_labels: &[GraspPair],
    cfg: &SpotConfig,
) -> SupervisionTargets {
    let l = grasp_labels.len();
    let w = cfg.displacement_window;
    let y_c = if cfg.hard_labels {
        build_hard_labels(events, l, w)
    } else {
        build_soft_labels(events, l, w, cfg.soft_label_sigma)
    };
    let (y_d, d_mask) = build_displacement_targets(events, l, w);
    let g_mask = grasp_labels
        .iter()
        .map(|pair| [pair[0].is_some(), pair[1].is_some()])
        .collect();
    SupervisionTargets { y_c, y_d, d_mask, y_g: grasp_labels.to_vec(), g_mask }
}

/// Classification loss over per-frame probability rows.
///
/// Focal form: `sum_c alpha_c * t_c * (1 - p_c)^gamma * (-ln p_c)` with
/// `alpha` on the touch class and `1 - alpha` on the background, soft
/// targets acting as fractional hard labels. Weighted cross-entropy scales
/// the touch-class term by `ce_weight`. Both are averaged over frames.
pub fn classification_loss(
    g: &mut Graph,
    y_c: Var,
    targets: &Array2<f64>,
    kind: LossKind,
    cfg: &SpotConfig,
) -> Var {
    let l = targets.nrows() as f64;
    let class_weights = match kind {
        LossKind::Focal => [1.0 - cfg.focal_alpha, cfg.focal_alpha],
        LossKind::WeightedCe => [1.0, cfg.ce_weight],
    };
    let mut weighted_targets = targets.clone();
    for mut row in weighted_targets.rows_mut() {
        row[0] *= class_weights[0];
        row[1] *= class_weights[1];
    }
    let wt = g.input(weighted_targets.into_dyn());

    let lnp = g.ln_clamped(y_c, LOG_EPS);
    let neg_lnp = g.scale(lnp, -1.0);
    let term = match kind {
        LossKind::Focal => {
            let neg_p = g.scale(y_c, -1.0);
            let one_minus_p = g.add_scalar(neg_p, 1.0);
            let modulation = g.pow_const(one_minus_p, cfg.focal_gamma);
            let m = g.mul(wt, modulation);
            g.mul(m, neg_lnp)
        }
        LossKind::WeightedCe => g.mul(wt, neg_lnp),
    };
    let s = g.sum_all(term);
    g.scale(s, 1.0 / l)
}

/// Mean squared error over masked frames; 0 when the mask is empty.
pub fn displacement_loss(g: &mut Graph, y_d: Var, target: &Array1<f64>, mask: &[bool]) -> Var {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return g.input(ndarray::arr0(0.0).into_dyn());
    }
    let l = target.len();
    let t = g.input(target.clone().into_shape((l, 1)).unwrap().into_dyn());
    let m = g.input(
        Array2::from_shape_fn((l, 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 }).into_dyn(),
    );
    let diff = g.sub(y_d, t);
    let sq = g.mul(diff, diff);
    let masked = g.mul(sq, m);
    let s = g.sum_all(masked);
    g.scale(s, 1.0 / count as f64)
}

/// Cross-entropy over unmasked (frame, hand) grasp logits; 0 when all
/// entries are masked.
pub fn grasp_loss(g: &mut Graph, y_g: Var, targets: &[GraspPair], mask: &[[bool; 2]]) -> Var {
    let l = targets.len();
    let count = mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum::<usize>();
    if count == 0 {
        return g.input(ndarray::arr0(0.0).into_dyn());
    }
    // [L, 18] row-major is (left 9, right 9): reshape to [2L, 9] rows
    let logits = g.reshape(y_g, &[2 * l, GRASP_CATEGORIES]);
    let probs = g.softmax_rows(logits);
    let lnp = g.ln_clamped(probs, LOG_EPS);
    let mut onehot = Array2::zeros((2 * l, GRASP_CATEGORIES));
    for (t, (pair, m)) in targets.iter().zip(mask).enumerate() {
        for hand in 0..2 {
            if m[hand] {
                let cat = pair[hand].expect("mask implies label") as usize;
                onehot[[2 * t + hand, cat]] = 1.0;
            }
        }
    }
    let oh = g.input(onehot.into_dyn());
    let picked = g.mul(oh, lnp);
    let s = g.sum_all(picked);
    g.scale(s, -1.0 / count as f64)
}

/// The three weighted parts of the objective.
pub struct LossParts {
    pub classification: Var,
    pub displacement: Var,
    pub grasp: Var,
}

/// `L_c + L_d + lambda_g * L_g`. Rejects non-finite parts by name.
pub fn total_loss(g: &mut Graph, parts: &LossParts, lambda_g: f64) -> Result<Var, SupervisionError> {
    for (var, name) in [
        (parts.classification, "classification"),
        (parts.displacement, "displacement"),
        (parts.grasp, "grasp"),
    ] {
        if !g.scalar(var).is_finite() {
            return Err(SupervisionError::NonFinitePart { part: name });
        }
    }
    let cd = g.add(parts.classification, parts.displacement);
    let weighted_grasp = g.scale(parts.grasp, lambda_g);
    Ok(g.add(cd, weighted_grasp))
}
