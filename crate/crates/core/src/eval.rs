//! Frame-tolerance matching, average precision, and mAP over tolerances.
//!
//! A prediction is correct at tolerance `delta` iff it lies within `delta`
//! frames of an unmatched ground-truth event. Matching is greedy in
//! descending confidence (ties toward the earlier frame); each prediction
//! takes the nearest unmatched ground truth (distance ties toward the
//! earlier one); each ground truth matches at most once. Fractional frames
//! round half toward the earlier frame before matching.
//!
//! AP uses all-point interpolation over the pooled precision/recall curve.

use crate::data::VideoAnnotation;
use crate::postprocess::DetectionRecord;
use crate::types::EventDetection;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision is undefined without ground truth")]
    NoGroundTruth,
    #[error("tolerances must be non-empty")]
    NoTolerances,
}

/// Outcome of matching one prediction list against one ground-truth list.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Prediction indices in evaluation order (descending confidence,
    /// ties toward the earlier frame).
    pub order: Vec<usize>,
    /// `tp[i]` says whether prediction `order[i]` matched.
    pub tp: Vec<bool>,
    /// Which ground truths were matched.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn num_tp(&self) -> usize {
        self.tp.iter().filter(|&&b| b).count()
    }
}

/// Round half toward the earlier frame: 10.5 -> 10, 10.51 -> 11.
pub fn round_frame(frame: f64) -> i64 {
    (frame - 0.5).ceil() as i64
}

/// Evaluation order: descending confidence, ties toward the earlier frame.
fn evaluation_order(preds: &[EventDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(preds[a].frame.partial_cmp(&preds[b].frame).unwrap())
    });
    order
}

/// Greedy nearest matching at tolerance `delta`.
pub fn match_predictions(preds: &[EventDetection], gts: &[usize], delta: usize) -> MatchResult {
    let order = evaluation_order(preds);
    let mut gt_matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &pi in &order {
        let frame = round_frame(preds[pi].frame);
        let mut best: Option<(u64, usize)> = None; // (distance, gt index)
        for (gi, &gt) in gts.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let d = frame.abs_diff(gt as i64);
            if d > delta as u64 {
                continue;
            }
            // strict < keeps the earlier ground truth on ties, because
            // `gts` ascends
            if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                best = Some((d, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                gt_matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    MatchResult { order, tp, gt_matched }
}

/// All-point interpolated AP from TP flags in evaluation order.
fn ap_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return f64::NAN;
    }
    if tp_flags.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &flag in tp_flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope: running max from the right
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    // integrate over recall increments
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP at one tolerance for a single video.
pub fn average_precision(
    preds: &[EventDetection],
    gts: &[usize],
    delta: usize,
) -> Result<f64, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let m = match_predictions(preds, gts, delta);
    Ok(ap_from_flags(&m.tp, gts.len()))
}

/// Mean AP over `tolerances`, plus the per-tolerance APs.
pub fn map_over_tolerances(
    preds: &[EventDetection],
    gts: &[usize],
    tolerances: &[usize],
) -> Result<(f64, Vec<(usize, f64)>), EvalError> {
    if tolerances.is_empty() {
        return Err(EvalError::NoTolerances);
    }
    let mut per = Vec::with_capacity(tolerances.len());
    for &delta in tolerances {
        per.push((delta, average_precision(preds, gts, delta)?));
    }
    let mean = per.iter().map(|(_, ap)| ap).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// One video's predictions and ground truths, pooled-evaluation input.
#[derive(Debug, Clone, Default)]
pub struct VideoEval {
    pub preds: Vec<EventDetection>,
    pub gts: Vec<usize>,
}

/// AP at one tolerance with predictions pooled across videos on one global
/// precision/recall curve (matching stays within each video).
pub fn pooled_average_precision(videos: &[VideoEval], delta: usize) -> Result<f64, EvalError> {
    let num_gt: usize = videos.iter().map(|v| v.gts.len()).sum();
    if num_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    // per-video matching in that video's own confidence order
    let mut pooled: Vec<(f64, f64, usize, bool)> = Vec::new(); // (conf, frame, video, tp)
    for (vi, video) in videos.iter().enumerate() {
        let m = match_predictions(&video.preds, &video.gts, delta);
        for (slot, &pi) in m.order.iter().enumerate() {
            pooled.push((video.preds[pi].confidence, video.preds[pi].frame, vi, m.tp[slot]));
        }
    }
    // global evaluation order
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.2.cmp(&b.2))
            .then(a.1.partial_cmp(&b.1).unwrap())
    });
    let flags: Vec<bool> = pooled.iter().map(|e| e.3).collect();
    Ok(ap_from_flags(&flags, num_gt))
}

/// Pooled mAP over tolerances.
pub fn pooled_map(
    videos: &[VideoEval],
    tolerances: &[usize],
) -> Result<(f64, Vec<(usize, f64)>), EvalError> {
    if tolerances.is_empty() {
        return Err(EvalError::NoTolerances);
    }
    let mut per = Vec::with_capacity(tolerances.len());
    for &delta in tolerances {
        per.push((delta, pooled_average_precision(videos, delta)?));
    }
    let mean = per.iter().map(|(_, ap)| ap).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Group detection records and annotations into pooled-evaluation inputs.
pub fn collect_eval_videos(
    detections: &[DetectionRecord],
    annotations: &[VideoAnnotation],
) -> Vec<VideoEval> {
    let mut by_video: BTreeMap<&str, VideoEval> = annotations
        .iter()
        .map(|ann| {
            (
                ann.video_id.as_str(),
                VideoEval { preds: Vec::new(), gts: ann.event_frames() },
            )
        })
        .collect();
    for det in detections {
        if let Some(v) = by_video.get_mut(det.video_id.as_str()) {
            v.preds.push(EventDetection {
                frame: det.frame,
                confidence: det.confidence.clamp(0.0, 1.0),
            });
        }
    }
    by_video.into_values().collect()
}

/// One evaluation row: per-tolerance APs plus their mean.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub label: String,
    pub map: f64,
    pub per_delta: Vec<(usize, f64)>,
}

/// Render rows in the usual table shape (values in percent).
pub fn format_eval_table(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    let deltas: Vec<usize> = rows
        .first()
        .map(|r| r.per_delta.iter().map(|(d, _)| *d).collect())
        .unwrap_or_default();
    out.push_str(&format!("{:<16}{:>8}", "", "mAP"));
    for d in &deltas {
        out.push_str(&format!("{:>8}", format!("d={d}")));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<16}{:>8.2}", row.label, row.map * 100.0));
        for (_, ap) in &row.per_delta {
            out.push_str(&format!("{:>8.2}", ap * 100.0));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn det(frame: f64, confidence: f64) -> EventDetection {
        EventDetection { frame, confidence }
    }

    #[test]
    fn one_frame_off_needs_tolerance_one() {
        let preds = [det(11.0, 0.9)];
        let gts = [10usize];
        let m0 = match_predictions(&preds, &gts, 0);
        assert_eq!(m0.num_tp(), 0);
        let m1 = match_predictions(&preds, &gts, 1);
        assert_eq!(m1.num_tp(), 1);
        let m2 = match_predictions(&preds, &gts, 2);
        assert_eq!(m2.num_tp(), 1);
    }

    #[test]
    fn each_gt_matches_at_most_once() {
        let preds = [det(10.0, 0.9), det(10.0, 0.8)];
        let gts = [10usize];
        for delta in [0usize, 1, 2] {
            let m = match_predictions(&preds, &gts, delta);
            assert_eq!(m.num_tp(), 1);
            assert_eq!(m.tp.iter().filter(|&&b| !b).count(), 1);
        }
    }

    #[test]
    fn fractional_frames_round_half_down() {
        assert_eq!(round_frame(10.5), 10);
        assert_eq!(round_frame(10.49), 10);
        assert_eq!(round_frame(10.51), 11);
        assert_eq!(round_frame(0.2), 0);
        let preds = [det(10.5, 0.9)];
        let m = match_predictions(&preds, &[10], 0);
        assert_eq!(m.num_tp(), 1);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let preds = [det(3.0, 0.9), det(17.0, 0.8)];
        let ap = average_precision(&preds, &[3, 17], 1).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let ap = average_precision(&[], &[5], 1).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn zero_ground_truths_are_an_error() {
        assert!(matches!(
            average_precision(&[det(1.0, 0.5)], &[], 1),
            Err(EvalError::NoGroundTruth)
        ));
    }

    #[test]
    fn hand_computed_envelope_case() {
        // TP 0.9, FP 0.8, TP 0.7 over 2 gts: AP = 0.5*1 + 0.5*(2/3) = 5/6
        let preds = [det(3.0, 0.9), det(20.0, 0.8), det(10.0, 0.7)];
        let gts = [3usize, 10];
        let ap = average_precision(&preds, &gts, 0).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn map_is_arithmetic_mean() {
        let preds = [det(3.0, 0.9), det(11.0, 0.8)];
        let gts = [3usize, 10];
        let (map, per) = map_over_tolerances(&preds, &gts, &[0, 1, 2]).unwrap();
        let expect = per.iter().map(|(_, a)| a).sum::<f64>() / 3.0;
        assert!((map - expect).abs() < 1e-12);
        assert_eq!(per.len(), 3);
        // identical AP at all tolerances collapses to that AP
        let (map1, per1) = map_over_tolerances(&preds, &gts, &[1, 2]).unwrap();
        assert_eq!(per1[0].1, per1[1].1);
        assert_eq!(map1, per1[0].1);
    }

    // ---- brute-force oracle: an independent implementation of the same
    // stated rules, kept deliberately naive ----

    fn oracle_match(preds: &[EventDetection], gts: &[usize], delta: usize) -> usize {
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        // selection sort by (confidence desc, frame asc)
        for i in 0..idx.len() {
            for j in (i + 1)..idx.len() {
                let (a, b) = (&preds[idx[i]], &preds[idx[j]]);
                let better = b.confidence > a.confidence
                    || (b.confidence == a.confidence && b.frame < a.frame);
                if better {
                    idx.swap(i, j);
                }
            }
        }
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &pi in &idx {
            let f = round_frame(preds[pi].frame);
            let mut chosen: Option<usize> = None;
            for (gi, &gt) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let d = (f - gt as i64).abs();
                if d > delta as i64 {
                    continue;
                }
                let replace = match chosen {
                    None => true,
                    Some(cur) => {
                        let dc = (f - gts[cur] as i64).abs();
                        d < dc
                    }
                };
                if replace {
                    chosen = Some(gi);
                }
            }
            if let Some(gi) = chosen {
                used[gi] = true;
                tp += 1;
            }
        }
        tp
    }

    #[test]
    fn matching_agrees_with_oracle_on_random_instances() {
        let mut rng = DetRng::new(17);
        for _ in 0..300 {
            let n_gt = rng.gen_range_usize(1, 9);
            let mut gts: Vec<usize> = (0..n_gt).map(|_| rng.gen_range_usize(0, 40)).collect();
            gts.sort_unstable();
            gts.dedup();
            let n_pred = rng.gen_range_usize(0, 13);
            let preds: Vec<EventDetection> = (0..n_pred)
                .map(|_| det(rng.gen_range_usize(0, 40) as f64, rng.gen_f64()))
                .collect();
            for delta in [0usize, 1, 2] {
                let ours = match_predictions(&preds, &gts, delta).num_tp();
                let oracle = oracle_match(&preds, &gts, delta);
                assert_eq!(ours, oracle, "delta={delta} gts={gts:?}");
            }
        }
    }

    #[test]
    fn ap_is_order_invariant_and_scale_invariant() {
        let mut rng = DetRng::new(19);
        for _ in 0..50 {
            let gts: Vec<usize> = {
                let mut g: Vec<usize> = (0..rng.gen_range_usize(1, 5))
                    .map(|_| rng.gen_range_usize(0, 30))
                    .collect();
                g.sort_unstable();
                g.dedup();
                g
            };
            let mut preds: Vec<EventDetection> = (0..rng.gen_range_usize(1, 10))
                .map(|_| det(rng.gen_range_usize(0, 30) as f64, rng.gen_f64()))
                .collect();
            let base = average_precision(&preds, &gts, 1).unwrap();
            // reverse order
            preds.reverse();
            assert_eq!(average_precision(&preds, &gts, 1).unwrap(), base);
            // scale confidences by a positive constant
            let scaled: Vec<EventDetection> = preds
                .iter()
                .map(|d| det(d.frame, d.confidence * 0.37))
                .collect();
            let s = average_precision(&scaled, &gts, 1).unwrap();
            assert!((s - base).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_monotone_in_tolerance_without_contention() {
        // contention-free: single gt, single prediction
        for offset in 0..4 {
            let preds = [det(10.0 + offset as f64, 0.9)];
            let mut last = 0.0;
            for delta in 0..4 {
                let ap = average_precision(&preds, &[10], delta).unwrap();
                assert!(ap >= last - 1e-12, "delta {delta}");
                last = ap;
            }
        }
    }

    #[test]
    fn ap_stays_in_unit_interval() {
        let mut rng = DetRng::new(23);
        for _ in 0..100 {
            let gts: Vec<usize> = {
                let mut g: Vec<usize> = (0..rng.gen_range_usize(1, 6))
                    .map(|_| rng.gen_range_usize(0, 25))
                    .collect();
                g.sort_unstable();
                g.dedup();
                g
            };
            let preds: Vec<EventDetection> = (0..rng.gen_range_usize(0, 12))
                .map(|_| det(rng.gen_range_usize(0, 25) as f64, rng.gen_f64()))
                .collect();
            let (map, per) = map_over_tolerances(&preds, &gts, &[0, 1, 2]).unwrap();
            assert!((0.0..=1.0).contains(&map));
            for (_, ap) in per {
                assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    #[test]
    fn pooled_ap_spans_videos() {
        let videos = vec![
            VideoEval { preds: vec![det(4.0, 0.9)], gts: vec![4] },
            VideoEval { preds: vec![det(9.0, 0.8), det(2.0, 0.7)], gts: vec![9] },
        ];
        let ap = pooled_average_precision(&videos, 0).unwrap();
        // pooled order: TP(0.9), TP(0.8), FP(0.7) over 2 gts -> AP = 1.0
        assert_eq!(ap, 1.0);
        // prediction in one video cannot match the other video's gt
        let cross = vec![
            VideoEval { preds: vec![det(4.0, 0.9)], gts: vec![] },
            VideoEval { preds: vec![], gts: vec![4] },
        ];
        let ap = pooled_average_precision(&cross, 2).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn table_formatting_has_percent_shape() {
        let rows = vec![EvalRow {
            label: "raw".into(),
            map: 0.3289,
            per_delta: vec![(0, 0.1425), (1, 0.3594), (2, 0.4847)],
        }];
        let table = format_eval_table(&rows);
        assert!(table.contains("mAP"));
        assert!(table.contains("32.89"));
        assert!(table.contains("14.25"));
        assert!(table.contains("48.47"));
    }
}
