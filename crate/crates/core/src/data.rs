//! Annotation ingestion, clip sampling, hand-patch extraction and dataset
//! statistics.
//!
//! # Annotation file
//!
//! One JSON document per dataset:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "videos": [
//!     {
//!       "video_id": "seq_000",
//!       "frame_count": 64,
//!       "fps": 30.0,
//!       "events": [12, 40],
//!       "hand_boxes": [
//!         { "left": [4.0, 5.0, 11.0, 12.0], "right": null },
//!         ...
//!       ],
//!       "grasp_labels": [ { "left": 3, "right": null }, ... ]
//!     }
//!   ]
//! }
//! ```
//!
//! `events` are video-relative frame indices, strictly increasing. An absent
//! hand is the JSON `null` marker. `grasp_labels` may be omitted entirely
//! when a dataset carries none.
//!
//! # Frame storage
//!
//! Frames load either from a packed tensor file `<video_id>.frames`
//! (see [`write_frames`] for the layout) or from a directory
//! `<video_id>/NNNNN.png`.

use crate::config::SpotConfig;
use crate::rng::DetRng;
use crate::types::{
    validate_event_list, ClipSample, Frame, GraspPair, HandBox, HandPair, Side, TouchEvent,
    GRASP_CATEGORIES,
};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const ANNOTATION_FORMAT_VERSION: u32 = 1;
const FRAMES_MAGIC: &[u8; 4] = b"TSFR";
const FRAMES_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
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
    #[error("video {video_id}: {reason}")]
    InvalidAnnotation { video_id: String, reason: String },
    #[error("no video long enough for clip length {0}")]
    NoEligibleVideo(usize),
    #[error("frames file {path}: {reason}")]
    BadFramesFile { path: String, reason: String },
    #[error("unknown video id {0}")]
    UnknownVideo(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoxRecord {
    left: Option<[f64; 4]>,
    right: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraspRecord {
    left: Option<u8>,
    right: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VideoRecord {
    video_id: String,
    frame_count: usize,
    fps: f64,
    events: Vec<usize>,
    hand_boxes: Vec<BoxRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grasp_labels: Option<Vec<GraspRecord>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    format_version: u32,
    videos: Vec<VideoRecord>,
}

/// Ground-truth annotation for one whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub frame_count: usize,
    pub fps: f64,
    /// Video-relative event frames, strictly increasing.
    pub events: Vec<TouchEvent>,
    /// One pair per frame.
    pub hand_boxes: Vec<HandPair>,
    /// One pair per frame; `None` category when unlabelled.
    pub grasp_labels: Vec<GraspPair>,
}

impl VideoAnnotation {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| DataError::InvalidAnnotation {
            video_id: self.video_id.clone(),
            reason,
        };
        if self.frame_count == 0 {
            return Err(fail("frame_count must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(fail(format!("fps {} must be positive", self.fps)));
        }
        validate_event_list(&self.events, self.frame_count).map_err(fail)?;
        if self.hand_boxes.len() != self.frame_count {
            return Err(fail(format!(
                "hand_boxes length {} != frame_count {}",
                self.hand_boxes.len(),
                self.frame_count
            )));
        }
        if self.grasp_labels.len() != self.frame_count {
            return Err(fail(format!(
                "grasp_labels length {} != frame_count {}",
                self.grasp_labels.len(),
                self.frame_count
            )));
        }
        for (t, (pair, grasp)) in self.hand_boxes.iter().zip(&self.grasp_labels).enumerate() {
            for side in [Side::Left, Side::Right] {
                let g = grasp[side.index()];
                if let Some(g) = g {
                    if !pair.get(side).present {
                        return Err(fail(format!(
                            "frame {t}: grasp label for absent {side:?} hand"
                        )));
                    }
                    if g as usize >= GRASP_CATEGORIES {
                        return Err(fail(format!(
                            "frame {t}: grasp category {g} outside [0, {GRASP_CATEGORIES})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn event_frames(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.frame).collect()
    }
}

/// Per-dataset counting summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_videos: usize,
    pub total_frames: usize,
    pub total_events: usize,
    /// Videos bucketed by event count: keys 0,1,2,3 plus [`DatasetStats::OVERFLOW`]
    /// for >= 4.
    pub videos_by_event_count: BTreeMap<usize, usize>,
}

impl DatasetStats {
    /// Bucket key holding every video with >= 4 events.
    pub const OVERFLOW: usize = 4;
}

/// Read and validate annotations. A zero-length or whitespace-only file is
/// an empty dataset.
pub fn load_annotations(path: &Path) -> Result<Vec<VideoAnnotation>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|source| DataError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    if file.format_version != ANNOTATION_FORMAT_VERSION {
        return Err(DataError::FormatVersion {
            found: file.format_version,
            expected: ANNOTATION_FORMAT_VERSION,
        });
    }
    file.videos.into_iter().map(record_to_annotation).collect()
}

/// Write annotations in the documented schema.
pub fn save_annotations(path: &Path, annotations: &[VideoAnnotation]) -> Result<(), DataError> {
    let file = AnnotationFile {
        format_version: ANNOTATION_FORMAT_VERSION,
        videos: annotations.iter().map(annotation_to_record).collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("annotations serialize");
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn record_to_annotation(rec: VideoRecord) -> Result<VideoAnnotation, DataError> {
    let to_box = |arr: Option<[f64; 4]>, side: Side, vid: &str| -> Result<HandBox, DataError> {
        match arr {
            None => Ok(HandBox::absent(side)),
            Some([x1, y1, x2, y2]) => HandBox::new(x1, y1, x2, y2, side).map_err(|e| {
                DataError::InvalidAnnotation { video_id: vid.to_string(), reason: e.to_string() }
            }),
        }
    };
    let hand_boxes: Vec<HandPair> = rec
        .hand_boxes
        .iter()
        .map(|b| {
            Ok(HandPair {
                left: to_box(b.left, Side::Left, &rec.video_id)?,
                right: to_box(b.right, Side::Right, &rec.video_id)?,
            })
        })
        .collect::<Result<_, DataError>>()?;
    let grasp_labels: Vec<GraspPair> = match &rec.grasp_labels {
        Some(gs) => gs.iter().map(|g| [g.left, g.right]).collect(),
        None => vec![[None, None]; rec.frame_count],
    };
    let ann = VideoAnnotation {
        video_id: rec.video_id,
        frame_count: rec.frame_count,
        fps: rec.fps,
        events: rec.events.into_iter().map(TouchEvent::new).collect(),
        hand_boxes,
        grasp_labels,
    };
    ann.validate()?;
    Ok(ann)
}

fn annotation_to_record(ann: &VideoAnnotation) -> VideoRecord {
    let to_arr = |b: &HandBox| b.present.then_some([b.x1, b.y1, b.x2, b.y2]);
    VideoRecord {
        video_id: ann.video_id.clone(),
        frame_count: ann.frame_count,
        fps: ann.fps,
        events: ann.event_frames(),
        hand_boxes: ann
            .hand_boxes
            .iter()
            .map(|p| BoxRecord { left: to_arr(&p.left), right: to_arr(&p.right) })
            .collect(),
        grasp_labels: Some(
            ann.grasp_labels
                .iter()
                .map(|g| GraspRecord { left: g[0], right: g[1] })
                .collect(),
        ),
    }
}

/// Exact counting of frames, events and the per-video event histogram.
pub fn compute_stats(annotations: &[VideoAnnotation]) -> DatasetStats {
    let mut videos_by_event_count = BTreeMap::new();
    let mut total_frames = 0;
    let mut total_events = 0;
    for ann in annotations {
        total_frames += ann.frame_count;
        total_events += ann.events.len();
        let bucket = ann.events.len().min(DatasetStats::OVERFLOW);
        *videos_by_event_count.entry(bucket).or_insert(0) += 1;
    }
    DatasetStats {
        total_videos: annotations.len(),
        total_frames,
        total_events,
        videos_by_event_count,
    }
}

/// Renders the stats as an aligned text table.
pub fn format_stats(stats: &DatasetStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24}{:>10}\n", "# Videos", stats.total_videos));
    out.push_str(&format!("{:<24}{:>10}\n", "# Frames", stats.total_frames));
    out.push_str(&format!("{:<24}{:>10}\n", "# Touch events", stats.total_events));
    for bucket in 0..=DatasetStats::OVERFLOW {
        let label = if bucket == DatasetStats::OVERFLOW {
            "# Videos (>=4 touches)".to_string()
        } else {
            format!("# Videos ({bucket} touch{})", if bucket == 1 { "" } else { "es" })
        };
        let count = stats.videos_by_event_count.get(&bucket).copied().unwrap_or(0);
        out.push_str(&format!("{label:<24}{count:>10}\n"));
    }
    out
}

/// In-memory video store: annotation plus frames.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub annotation: VideoAnnotation,
    pub frames: Vec<Frame>,
}

/// Samples fixed-length clips from annotated videos.
///
/// Windows are uniform over valid start positions, except that a configured
/// fraction (`event_bias`) is drawn from windows containing at least one
/// event whenever such windows exist.
pub struct ClipSampler<'a> {
    videos: &'a [VideoData],
    cfg: &'a SpotConfig,
    eligible: Vec<usize>,
}

impl<'a> ClipSampler<'a> {
    pub fn new(videos: &'a [VideoData], cfg: &'a SpotConfig) -> Result<Self, DataError> {
        let eligible: Vec<usize> = videos
            .iter()
            .enumerate()
            .filter(|(_, v)| v.annotation.frame_count >= cfg.clip_length)
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(DataError::NoEligibleVideo(cfg.clip_length));
        }
        Ok(Self { videos, cfg, eligible })
    }

    /// Draw one clip; `rng` must be caller-owned for determinism.
    pub fn sample(&self, rng: &mut DetRng) -> ClipSample {
        let l = self.cfg.clip_length;
        let vid = &self.videos[self.eligible[rng.gen_range_usize(0, self.eligible.len())]];
        let n = vid.annotation.frame_count;
        let max_start = n - l; // inclusive

        // Start positions whose window [s, s+l) contains at least one event.
        let want_event = rng.gen_bool(self.cfg.event_bias);
        let start = if want_event && !vid.annotation.events.is_empty() {
            let ev = vid.annotation.events
                [rng.gen_range_usize(0, vid.annotation.events.len())]
            .frame;
            let lo = ev.saturating_sub(l - 1).min(max_start);
            let hi = ev.min(max_start);
            rng.gen_range_usize(lo, hi + 1)
        } else {
            rng.gen_range_usize(0, max_start + 1)
        };
        self.window(vid, start)
    }

    /// The clip starting at `start` (video-relative).
    pub fn window(&self, vid: &VideoData, start: usize) -> ClipSample {
        clip_window(vid, start, self.cfg.clip_length)
    }
}

/// The L-frame clip of `vid` starting at video frame `start`: frames and
/// boxes re-indexed clip-relative, events outside the window dropped.
pub fn clip_window(vid: &VideoData, start: usize, l: usize) -> ClipSample {
    let frames: Vec<Frame> = vid.frames[start..start + l].to_vec();
    let hand_boxes = vid.annotation.hand_boxes[start..start + l].to_vec();
    let grasp_labels = vid.annotation.grasp_labels[start..start + l].to_vec();
    let events: Vec<TouchEvent> = vid
        .annotation
        .events
        .iter()
        .filter(|e| e.frame >= start && e.frame < start + l)
        .map(|e| TouchEvent::new(e.frame - start))
        .collect();
    ClipSample::new(frames, hand_boxes, events, grasp_labels, l)
        .expect("window construction preserves invariants")
}

/// Crop the hand region, expanded about its center by `scale`, clamped to
/// the image, zero-padded to a square, and bilinearly resized to
/// `out_size x out_size`. An absent box yields an all-zero patch.
pub fn extract_hand_patch(frame: &Frame, hand: &HandBox, scale: f64, out_size: usize) -> Frame {
    assert!(scale >= 1.0, "patch scale must be >= 1");
    let mut patch = Array3::zeros((out_size, out_size, 3));
    if !hand.present {
        return patch;
    }
    let (h, w) = (frame.shape()[0] as f64, frame.shape()[1] as f64);
    let (cx, cy) = hand.center();
    let half_w = hand.width() / 2.0 * scale;
    let half_h = hand.height() / 2.0 * scale;
    // expanded, then clamped to image bounds
    let x1 = (cx - half_w).clamp(0.0, w);
    let x2 = (cx + half_w).clamp(0.0, w);
    let y1 = (cy - half_h).clamp(0.0, h);
    let y2 = (cy + half_h).clamp(0.0, h);
    let crop_w = x2 - x1;
    let crop_h = y2 - y1;
    if crop_w <= 0.0 || crop_h <= 0.0 {
        return patch;
    }
    // zero-pad the crop to a square before resampling
    let side = crop_w.max(crop_h);
    let pad_x = (side - crop_w) / 2.0;
    let pad_y = (side - crop_h) / 2.0;

    let src_h = frame.shape()[0] as isize;
    let src_w = frame.shape()[1] as isize;
    for oy in 0..out_size {
        for ox in 0..out_size {
            // position inside the padded square, then inside the crop
            let sx = (ox as f64 + 0.5) / out_size as f64 * side - pad_x;
            let sy = (oy as f64 + 0.5) / out_size as f64 * side - pad_y;
            if sx < 0.0 || sx >= crop_w || sy < 0.0 || sy >= crop_h {
                continue; // padding stays zero
            }
            // bilinear sample at (x1+sx, y1+sy) in image space
            let fx = x1 + sx - 0.5;
            let fy = y1 + sy - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let dx = fx - x0;
            let dy = fy - y0;
            for c in 0..3 {
                let mut acc = 0.0;
                for (iy, wy) in [(y0 as isize, 1.0 - dy), (y0 as isize + 1, dy)] {
                    for (ix, wx) in [(x0 as isize, 1.0 - dx), (x0 as isize + 1, dx)] {
                        if ix < 0 || iy < 0 || ix >= src_w || iy >= src_h {
                            continue;
                        }
                        acc += wy * wx * frame[[iy as usize, ix as usize, c]];
                    }
                }
                patch[[oy, ox, c]] = acc;
            }
        }
    }
    patch
}

/// Expanded box before clamping, for callers that need the raw geometry.
pub fn expand_box(hand: &HandBox, scale: f64) -> (f64, f64, f64, f64) {
    let (cx, cy) = hand.center();
    let half_w = hand.width() / 2.0 * scale;
    let half_h = hand.height() / 2.0 * scale;
    (cx - half_w, cy - half_h, cx + half_w, cy + half_h)
}

/// Write frames as the packed tensor format: magic `TSFR`, u32 version,
/// u32 frame count, u32 height, u32 width, u32 channels, then f32 LE data
/// in `[frame][row][col][channel]` order.
pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let (h, wd) = if frames.is_empty() {
        (0, 0)
    } else {
        (frames[0].shape()[0], frames[0].shape()[1])
    };
    w.write_all(FRAMES_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(FRAMES_VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(frames.len() as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(h as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(wd as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(3).map_err(io_err)?;
    for frame in frames {
        assert_eq!(frame.shape(), &[h, wd, 3], "inconsistent frame shapes");
        for v in frame.iter() {
            w.write_f32::<LittleEndian>(*v as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a packed tensor file written by [`write_frames`].
pub fn read_frames(path: &Path) -> Result<Vec<Frame>, DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let bad = |reason: &str| DataError::BadFramesFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != FRAMES_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != FRAMES_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let h = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let c = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if c != 3 {
        return Err(bad(&format!("expected 3 channels, found {c}")));
    }
    let mut frames = Vec::with_capacity(n);
    let mut buf = vec![0f32; h * w * c];
    for _ in 0..n {
        for v in buf.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(io_err)?;
        }
        let arr = Array3::from_shape_vec((h, w, c), buf.iter().map(|&v| v as f64).collect())
            .expect("shape matches buffer");
        frames.push(arr);
    }
    Ok(frames)
}

/// Load a dataset directory: `annotations.json` plus per-video frames from
/// either `<id>.frames` or `<id>/NNNNN.png`.
pub fn load_dataset(dir: &Path) -> Result<Vec<VideoData>, DataError> {
    let ann_path = dir.join("annotations.json");
    let annotations = load_annotations(&ann_path)?;
    annotations
        .into_iter()
        .map(|annotation| {
            let packed = dir.join(format!("{}.frames", annotation.video_id));
            let frames = if packed.exists() {
                read_frames(&packed)?
            } else {
                read_png_dir(&dir.join(&annotation.video_id))?
            };
            if frames.len() != annotation.frame_count {
                return Err(DataError::InvalidAnnotation {
                    video_id: annotation.video_id.clone(),
                    reason: format!(
                        "frame_count {} but {} stored frames",
                        annotation.frame_count,
                        frames.len()
                    ),
                });
            }
            Ok(VideoData { annotation, frames })
        })
        .collect()
}

fn read_png_dir(dir: &Path) -> Result<Vec<Frame>, DataError> {
    let io_err = |source| DataError::Io { path: dir.display().to_string(), source };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|e| DataError::BadFramesFile {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let mut arr = Array3::zeros((h as usize, w as usize, 3));
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    arr[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
                }
            }
            Ok(arr)
        })
        .collect()
}

/// Save frames as numbered PNGs under `dir`.
pub fn write_png_dir(dir: &Path, frames: &[Frame]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: dir.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    for (t, frame) in frames.iter().enumerate() {
        let (h, w) = (frame.shape()[0], frame.shape()[1]);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = (frame[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round()
                    as u8;
            }
        }
        let path = dir.join(format!("{t:05}.png"));
        img.save(&path).map_err(|e| DataError::BadFramesFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}
