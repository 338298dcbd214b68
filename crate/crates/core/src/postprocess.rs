//! Converting per-frame scores and offsets into sparse detections:
//! Gaussian-attenuated temporal offset refinement, hard NMS, and soft NMS.

use crate::types::EventDetection;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const DETECTIONS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
}

/// Temporal offset refinement with Gaussian attenuation.
///
/// Each frame's score is moved to `t + offset[t] * exp(-offset[t]^2 /
/// (2 sigma^2))` — large predicted offsets are attenuated toward zero so
/// they cannot destabilize the score distribution — and deposited onto the
/// two neighbouring integer frames by linear interpolation. Deposits
/// landing on the same output frame combine by maximum; positions are
/// clamped to `[0, L-1]`.
pub fn refine_scores(scores: &[f64], offsets: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    assert_eq!(scores.len(), offsets.len(), "scores and offsets must align");
    let l = scores.len();
    let mut out = vec![0.0; l];
    if l == 0 {
        return out;
    }
    for t in 0..l {
        let off = offsets[t];
        let attenuated = off * (-off * off / (2.0 * sigma * sigma)).exp();
        let pos = (t as f64 + attenuated).clamp(0.0, (l - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - pos.floor();
        if frac == 0.0 {
            out[lo] = out[lo].max(scores[t]);
        } else {
            let hi = lo + 1;
            out[lo] = out[lo].max(scores[t] * (1.0 - frac));
            out[hi] = out[hi].max(scores[t] * frac);
        }
    }
    out
}

/// Keep frame `t` iff its score is the maximum of the centred window of
/// full width `window` (ties break toward the earlier frame), and lies
/// above `floor`.
pub fn hard_nms(scores: &[f64], window: usize, floor: f64) -> Vec<EventDetection> {
    assert!(window >= 1, "window must be >= 1");
    let radius = window / 2;
    let l = scores.len();
    let mut out = Vec::new();
    for t in 0..l {
        if scores[t] < floor {
            continue;
        }
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(l.saturating_sub(1));
        let mut keep = true;
        for j in lo..=hi {
            if j == t {
                continue;
            }
            // earlier frame wins ties
            if scores[j] > scores[t] || (scores[j] == scores[t] && j < t) {
                keep = false;
                break;
            }
        }
        if keep {
            out.push(EventDetection { frame: t as f64, confidence: scores[t].clamp(0.0, 1.0) });
        }
    }
    out
}

/// Soft NMS: iteratively select the highest-confidence detection and decay
/// every unselected detection within `window / 2` frames of it by
/// `exp(-d^2 / sigma)`; detections further away are untouched. Coincident
/// frames are merged first, keeping the maximum confidence (a Gaussian
/// decay at distance zero would be a no-op). Confidences never increase.
pub fn soft_nms(detections: &[EventDetection], sigma: f64, window: usize, floor: f64) -> Vec<EventDetection> {
    assert!(sigma > 0.0, "sigma must be positive");
    // merge coincident frames, keep max confidence
    let mut merged: Vec<EventDetection> = Vec::new();
    let mut sorted: Vec<EventDetection> = detections.to_vec();
    sorted.sort_by(|a, b| a.frame.partial_cmp(&b.frame).unwrap());
    for det in sorted {
        match merged.last_mut() {
            Some(last) if last.frame == det.frame => {
                last.confidence = last.confidence.max(det.confidence);
            }
            _ => merged.push(det),
        }
    }

    let radius = (window / 2) as f64;
    let mut remaining = merged;
    let mut selected = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        // highest confidence, ties toward the earlier frame
        let best = remaining
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.confidence
                    .partial_cmp(&b.confidence)
                    .unwrap()
                    .then(b.frame.partial_cmp(&a.frame).unwrap())
            })
            .map(|(i, _)| i)
            .expect("non-empty");
        let pick = remaining.swap_remove(best);
        for det in remaining.iter_mut() {
            let d = (det.frame - pick.frame).abs();
            if d <= radius {
                det.confidence *= (-d * d / sigma).exp();
            }
        }
        selected.push(pick);
    }
    selected.retain(|d| d.confidence >= floor);
    selected.sort_by(|a, b| a.frame.partial_cmp(&b.frame).unwrap());
    selected
}

/// One serialized detection record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionsFile {
    format_version: u32,
    detections: Vec<DetectionRecord>,
}

/// Write detections in the documented JSON format.
pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<(), PostprocessError> {
    let file = DetectionsFile {
        format_version: DETECTIONS_FORMAT_VERSION,
        detections: records.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("detections serialize");
    std::fs::write(path, text).map_err(|source| PostprocessError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>, PostprocessError> {
    let text = std::fs::read_to_string(path).map_err(|source| PostprocessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: DetectionsFile =
        serde_json::from_str(&text).map_err(|source| PostprocessError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    if file.format_version != DETECTIONS_FORMAT_VERSION {
        return Err(PostprocessError::FormatVersion {
            found: file.format_version,
            expected: DETECTIONS_FORMAT_VERSION,
        });
    }
    Ok(file.detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn zero_offsets_are_identity() {
        let scores = vec![0.1, 0.9, 0.0, 0.4, 0.7];
        let out = refine_scores(&scores, &[0.0; 5], 2.0);
        assert_eq!(out, scores);
    }

    #[test]
    fn half_offset_splits_bilinearly() {
        // score 1.0 at t=5 with offset +0.5 and huge sigma: 0.5 to 5 and 6
        let mut scores = vec![0.0; 10];
        scores[5] = 1.0;
        let mut offsets = vec![0.0; 10];
        offsets[5] = 0.5;
        let out = refine_scores(&scores, &offsets, 1e6);
        assert!((out[5] - 0.5).abs() < 1e-9);
        assert!((out[6] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn large_offsets_are_attenuated_to_nothing() {
        // |offset| = 10 with sigma 1: effective shift 10*e^-50 ~ 0
        let scores = vec![0.2, 0.8, 0.5];
        let out = refine_scores(&scores, &[10.0, -10.0, 10.0], 1.0);
        for (a, b) in out.iter().zip(&scores) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn deposits_clamp_to_bounds() {
        let scores = vec![1.0, 0.0, 0.0, 1.0];
        let out = refine_scores(&scores, &[-2.0, 0.0, 0.0, 2.0], 100.0);
        assert_eq!(out.len(), 4);
        assert!(out[0] > 0.9); // clamped at the left edge
        assert!(out[3] > 0.9); // clamped at the right edge
    }

    #[test]
    fn refinement_never_exceeds_max_input() {
        let mut rng = DetRng::new(3);
        for _ in 0..100 {
            let l = rng.gen_range_usize(1, 30);
            let scores: Vec<f64> = (0..l).map(|_| rng.gen_f64()).collect();
            let offsets: Vec<f64> = (0..l).map(|_| rng.gen_range_f64(-5.0, 5.0)).collect();
            let out = refine_scores(&scores, &offsets, rng.gen_range_f64(0.5, 4.0));
            let max_in = scores.iter().copied().fold(0.0f64, f64::max);
            let max_out = out.iter().copied().fold(0.0f64, f64::max);
            assert!(max_out <= max_in + 1e-12);
        }
    }

    #[test]
    fn single_peak_yields_single_detection() {
        let scores = vec![0.1, 0.2, 0.9, 0.2, 0.1];
        let dets = hard_nms(&scores, 5, 0.01);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].frame, 2.0);
        assert!((dets[0].confidence - 0.9).abs() < 1e-12);
    }

    #[test]
    fn monotone_scores_keep_only_last_frame() {
        let scores: Vec<f64> = (0..8).map(|t| 0.1 * t as f64).collect();
        let dets = hard_nms(&scores, 5, 0.01);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].frame, 7.0);
    }

    #[test]
    fn peaks_nine_apart_both_survive_window_five() {
        let mut scores = vec![0.05; 20];
        scores[4] = 0.9;
        scores[13] = 0.8;
        let dets = hard_nms(&scores, 5, 0.01);
        let frames: Vec<f64> = dets.iter().map(|d| d.frame).collect();
        assert!(frames.contains(&4.0));
        assert!(frames.contains(&13.0));
    }

    #[test]
    fn nms_ties_go_to_earlier_frame() {
        let scores = vec![0.5, 0.5, 0.1];
        let dets = hard_nms(&scores, 3, 0.01);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].frame, 0.0);
    }

    #[test]
    fn nms_detections_are_separated() {
        let mut rng = DetRng::new(5);
        for _ in 0..100 {
            let l = rng.gen_range_usize(2, 40);
            let window = rng.gen_range_usize(1, 9);
            let scores: Vec<f64> = (0..l).map(|_| rng.gen_f64()).collect();
            let dets = hard_nms(&scores, window, 0.0);
            let min_sep = (window + 1) / 2; // ceil(window / 2)
            for pair in dets.windows(2) {
                let gap = (pair[1].frame - pair[0].frame) as usize;
                assert!(gap >= min_sep, "window {window}: gap {gap}");
            }
        }
    }

    #[test]
    fn soft_nms_single_detection_is_identity() {
        let det = EventDetection { frame: 3.0, confidence: 0.7 };
        let out = soft_nms(&[det], 1.0, 5, 0.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].frame, 3.0);
        assert_eq!(out[0].confidence, 0.7);
    }

    #[test]
    fn coincident_detections_merge_to_max() {
        let dets = [
            EventDetection { frame: 3.0, confidence: 0.9 },
            EventDetection { frame: 3.0, confidence: 0.8 },
        ];
        let out = soft_nms(&dets, 1.0, 5, 0.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn far_apart_detections_are_untouched() {
        let dets = [
            EventDetection { frame: 2.0, confidence: 0.9 },
            EventDetection { frame: 30.0, confidence: 0.6 },
        ];
        let out = soft_nms(&dets, 1.0, 5, 0.0);
        assert_eq!(out.len(), 2);
        assert!((out[0].confidence - 0.9).abs() < 1e-6);
        assert!((out[1].confidence - 0.6).abs() < 1e-6);
    }

    #[test]
    fn nearby_detections_decay() {
        let dets = [
            EventDetection { frame: 10.0, confidence: 0.9 },
            EventDetection { frame: 11.0, confidence: 0.8 },
        ];
        let out = soft_nms(&dets, 1.0, 5, 0.0);
        assert_eq!(out.len(), 2);
        let weaker = out.iter().find(|d| d.frame == 11.0).unwrap();
        assert!((weaker.confidence - 0.8 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn soft_nms_never_increases_confidence() {
        let mut rng = DetRng::new(7);
        for _ in 0..1000 {
            let n = rng.gen_range_usize(0, 12);
            let dets: Vec<EventDetection> = (0..n)
                .map(|_| EventDetection {
                    frame: rng.gen_range_usize(0, 30) as f64,
                    confidence: rng.gen_f64(),
                })
                .collect();
            let window = rng.gen_range_usize(1, 9);
            let out = soft_nms(&dets, rng.gen_range_f64(0.2, 3.0), window, 0.0);
            assert!(out.len() <= dets.len());
            for o in &out {
                // every output confidence is bounded by some input at that frame
                let max_at_frame = dets
                    .iter()
                    .filter(|d| d.frame == o.frame)
                    .map(|d| d.confidence)
                    .fold(0.0f64, f64::max);
                assert!(o.confidence <= max_at_frame + 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = DetRng::new(9);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_f64()).collect();
        let offsets: Vec<f64> = (0..40).map(|_| rng.gen_range_f64(-2.0, 2.0)).collect();
        let run = || {
            let refined = refine_scores(&scores, &offsets, 2.0);
            let dets = hard_nms(&refined, 5, 0.01);
            soft_nms(&dets, 1.0, 5, 0.01)
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frame.to_bits(), y.frame.to_bits());
            assert_eq!(x.confidence.to_bits(), y.confidence.to_bits());
        }
    }

    #[test]
    fn detections_file_round_trips() {
        let dir = std::env::temp_dir().join("touchspot-postprocess-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dets.json");
        let records = vec![
            DetectionRecord { video_id: "a".into(), frame: 3.5, confidence: 0.9 },
            DetectionRecord { video_id: "b".into(), frame: 12.0, confidence: 0.4 },
        ];
        save_detections(&path, &records).unwrap();
        let loaded = load_detections(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].video_id, "a");
        assert_eq!(loaded[1].frame, 12.0);
    }
}
