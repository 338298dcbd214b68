//! Sliding-window inference over whole videos.
//!
//! Windows of length L advance by L/2; where windows overlap, each frame
//! keeps the maximum touch score across windows, and the offset from
//! whichever window supplied that maximum. Offset refinement and soft NMS
//! are independent toggles applied after fusion.

use crate::autograd::Graph;
use crate::config::SpotConfig;
use crate::data::{clip_window, VideoData};
use crate::model::{ModelError, SpotModel};
use crate::postprocess::{refine_scores, soft_nms, DetectionRecord};
use crate::types::EventDetection;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCORES_FORMAT_VERSION: u32 = 1;

/// Raw per-frame outputs for one video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    /// Touch-class probability per frame.
    pub scores: Vec<f64>,
    /// Predicted displacement per frame.
    pub offsets: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoresFile {
    pub format_version: u32,
    pub videos: Vec<VideoScores>,
}

/// Post-processing switches for [`detect_events`].
#[derive(Debug, Clone, Copy)]
pub struct PredictFlags {
    pub use_tor: bool,
    pub use_snms: bool,
}

impl PredictFlags {
    pub fn raw() -> Self {
        Self { use_tor: false, use_snms: false }
    }

    pub fn full() -> Self {
        Self { use_tor: true, use_snms: true }
    }
}

/// Window start positions: stride L/2 from 0, final window flush with the
/// video end.
pub fn window_starts(frame_count: usize, l: usize) -> Vec<usize> {
    assert!(frame_count >= l, "video shorter than one window");
    let stride = (l / 2).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + l >= frame_count {
            starts.push(frame_count - l);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// Per-frame scores and offsets for one video, fused across windows by max.
pub fn predict_scores(
    model: &SpotModel,
    video: &VideoData,
    cfg: &SpotConfig,
) -> Result<VideoScores, ModelError> {
    let n = video.annotation.frame_count;
    let l = cfg.clip_length;
    let mut scores = vec![f64::NEG_INFINITY; n];
    let mut offsets = vec![0.0; n];
    for start in window_starts(n, l) {
        let clip = clip_window(video, start, l);
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward(&mut g, &p, &clip)?;
        let y_c = g.value(out.y_c);
        let y_d = g.value(out.y_d);
        for t in 0..l {
            let score = y_c[[t, 1]];
            if score > scores[start + t] {
                scores[start + t] = score;
                offsets[start + t] = y_d[[t, 0]];
            }
        }
    }
    for s in scores.iter_mut() {
        if !s.is_finite() {
            *s = 0.0;
        }
    }
    Ok(VideoScores { video_id: video.annotation.video_id.clone(), scores, offsets })
}

/// Scores to sparse detections under the configured post-processing.
pub fn detect_events(scores: &VideoScores, cfg: &SpotConfig, flags: PredictFlags) -> Vec<EventDetection> {
    let fused = if flags.use_tor {
        refine_scores(&scores.scores, &scores.offsets, cfg.tor_sigma)
    } else {
        scores.scores.clone()
    };
    let dense: Vec<EventDetection> = fused
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= cfg.confidence_floor)
        .map(|(t, &s)| EventDetection { frame: t as f64, confidence: s.clamp(0.0, 1.0) })
        .collect();
    if flags.use_snms {
        soft_nms(&dense, cfg.snms_sigma, cfg.nms_window, cfg.confidence_floor)
    } else {
        dense
    }
}

/// Run the model over every video, returning detections (and the raw
/// scores for optional dumping).
pub fn predict_dataset(
    model: &SpotModel,
    videos: &[VideoData],
    cfg: &SpotConfig,
    flags: PredictFlags,
) -> Result<(Vec<DetectionRecord>, Vec<VideoScores>), ModelError> {
    let mut records = Vec::new();
    let mut all_scores = Vec::with_capacity(videos.len());
    for video in videos {
        let scores = predict_scores(model, video, cfg)?;
        for det in detect_events(&scores, cfg, flags) {
            records.push(DetectionRecord {
                video_id: scores.video_id.clone(),
                frame: det.frame,
                confidence: det.confidence,
            });
        }
        all_scores.push(scores);
    }
    Ok((records, all_scores))
}

pub fn save_scores(path: &Path, videos: &[VideoScores]) -> Result<(), std::io::Error> {
    let file = ScoresFile { format_version: SCORES_FORMAT_VERSION, videos: videos.to_vec() };
    std::fs::write(path, serde_json::to_string(&file).expect("scores serialize"))
}

pub fn load_scores(path: &Path) -> Result<ScoresFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file: ScoresFile =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if file.format_version != SCORES_FORMAT_VERSION {
        return Err(format!("unsupported scores format_version {}", file.format_version));
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_cover_video_exactly() {
        assert_eq!(window_starts(16, 16), vec![0]);
        assert_eq!(window_starts(40, 16), vec![0, 8, 16, 24]);
        assert_eq!(window_starts(20, 16), vec![0, 4]);
        // every frame covered
        for (n, l) in [(16, 16), (40, 16), (23, 8), (100, 40)] {
            let starts = window_starts(n, l);
            let mut covered = vec![false; n];
            for s in starts {
                for t in s..s + l {
                    covered[t] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "n={n} l={l}");
        }
    }

    #[test]
    fn overlap_takes_max_score() {
        // emulate the fusion rule directly on synthetic window outputs
        let mut scores = vec![f64::NEG_INFINITY; 6];
        let mut offsets = vec![0.0; 6];
        let windows = [(0usize, vec![0.2, 0.5, 0.3, 0.1]), (2usize, vec![0.6, 0.4, 0.2, 0.9])];
        for (start, ws) in &windows {
            for (t, &s) in ws.iter().enumerate() {
                if s > scores[start + t] {
                    scores[start + t] = s;
                    offsets[start + t] = *start as f64; // marker
                }
            }
        }
        assert_eq!(scores, vec![0.2, 0.5, 0.6, 0.4, 0.2, 0.9]);
        // the second window wins both overlapped frames (0.6 > 0.3, 0.4 > 0.1)
        assert_eq!(offsets[2], 2.0);
        assert_eq!(offsets[3], 2.0);
    }

    #[test]
    fn toggles_change_only_postprocessing() {
        let scores = VideoScores {
            video_id: "v".into(),
            scores: vec![0.05, 0.9, 0.8, 0.05, 0.0, 0.7],
            offsets: vec![0.0, 0.4, -0.4, 0.0, 0.0, 0.0],
        };
        let cfg = SpotConfig::desk();
        let raw = detect_events(&scores, &cfg, PredictFlags::raw());
        // dense: every frame above the floor
        assert_eq!(raw.len(), 5);
        let with_snms =
            detect_events(&scores, &cfg, PredictFlags { use_tor: false, use_snms: true });
        assert!(with_snms.len() <= raw.len());
        // scores themselves identical regardless of flags
        let raw2 = detect_events(&scores, &cfg, PredictFlags::raw());
        assert_eq!(raw.len(), raw2.len());
        for (a, b) in raw.iter().zip(&raw2) {
            assert_eq!(a.confidence.to_bits(), b.confidence.to_bits());
        }
    }
}
