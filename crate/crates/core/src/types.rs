//! Domain types shared by every stage of the pipeline.
//!
//! All types here are immutable after construction and cheap to clone or
//! share across threads. Constructors validate their invariants and reject
//! bad values instead of propagating them downstream.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The single event class this pipeline detects.
pub const TOUCH_CLASS: &str = "touch";

/// Number of grasp categories predicted by the grasp head.
pub const GRASP_CATEGORIES: usize = 9;

/// One video frame: `(height, width, 3)` with values in `[0, 1]`.
pub type Frame = Array3<f64>;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("invalid hand box: {0}")]
    InvalidHandBox(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
}

/// Which hand a box belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

/// Axis-aligned hand bounding box in image pixel coordinates.
///
/// An absent hand is modelled as `present == false` with zeroed
/// coordinates; downstream stages substitute an all-zero patch for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub side: Side,
    pub present: bool,
}

impl HandBox {
    /// A present box. Fails unless `x1 < x2`, `y1 < y2` and all
    /// coordinates are finite and non-negative.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, side: Side) -> Result<Self, TypeError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(TypeError::InvalidHandBox("non-finite coordinate".into()));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(TypeError::InvalidHandBox(format!(
                "degenerate box ({x1},{y1},{x2},{y2}): requires x1 < x2 and y1 < y2"
            )));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(TypeError::InvalidHandBox(format!(
                "negative origin ({x1},{y1})"
            )));
        }
        Ok(Self { x1, y1, x2, y2, side, present: true })
    }

    /// The absent-hand marker for `side`.
    pub fn absent(side: Side) -> Self {
        Self { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0, side, present: false }
    }

    /// Clamp coordinates into `[0, width] x [0, height]`. Boxes that end up
    /// degenerate (fully outside the frame) become absent.
    pub fn clamped(mut self, width: f64, height: f64) -> Self {
        if !self.present {
            return self;
        }
        self.x1 = self.x1.clamp(0.0, width);
        self.x2 = self.x2.clamp(0.0, width);
        self.y1 = self.y1.clamp(0.0, height);
        self.y2 = self.y2.clamp(0.0, height);
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            Self::absent(self.side)
        } else {
            self
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Left/right hand boxes for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandPair {
    pub left: HandBox,
    pub right: HandBox,
}

impl HandPair {
    pub fn absent() -> Self {
        Self { left: HandBox::absent(Side::Left), right: HandBox::absent(Side::Right) }
    }

    pub fn get(&self, side: Side) -> &HandBox {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

/// A ground-truth touch event at an integer frame index.
///
/// The index is clip-relative or video-relative depending on context; the
/// data module converts between the two explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TouchEvent {
    pub frame: usize,
}

impl TouchEvent {
    pub fn new(frame: usize) -> Self {
        Self { frame }
    }

    /// The event class; this pipeline is single-class.
    pub fn class(&self) -> &'static str {
        TOUCH_CLASS
    }
}

/// Checks that `events` are strictly increasing and all `< len`.
pub fn validate_event_list(events: &[TouchEvent], len: usize) -> Result<(), String> {
    for (i, ev) in events.iter().enumerate() {
        if ev.frame >= len {
            return Err(format!("event frame {} out of range (length {})", ev.frame, len));
        }
        if i > 0 && events[i - 1].frame >= ev.frame {
            return Err(format!(
                "event frames not strictly increasing at index {i} ({} then {})",
                events[i - 1].frame, ev.frame
            ));
        }
    }
    Ok(())
}

/// One detected event: a (possibly fractional) frame position with a
/// confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventDetection {
    pub frame: f64,
    pub confidence: f64,
}

impl EventDetection {
    pub fn new(frame: f64, confidence: f64) -> Result<Self, TypeError> {
        if !frame.is_finite() || frame < 0.0 {
            return Err(TypeError::InvalidDetection(format!("frame {frame} must be finite and >= 0")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(TypeError::InvalidDetection(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self { frame, confidence })
    }

    pub fn class(&self) -> &'static str {
        TOUCH_CLASS
    }
}

/// Per-frame optional grasp category for (left, right) hands.
pub type GraspPair = [Option<u8>; 2];

/// A fixed-length training window: frames, per-frame hand boxes, clip-relative
/// events and per-frame grasp labels.
#[derive(Debug, Clone)]
pub struct ClipSample {
    frames: Vec<Frame>,
    hand_boxes: Vec<HandPair>,
    events: Vec<TouchEvent>,
    grasp_labels: Vec<GraspPair>,
}

impl ClipSample {
    /// Validating constructor; `expected_len` is the configured clip length L.
    pub fn new(
        frames: Vec<Frame>,
        hand_boxes: Vec<HandPair>,
        events: Vec<TouchEvent>,
        grasp_labels: Vec<GraspPair>,
        expected_len: usize,
    ) -> Result<Self, TypeError> {
        let len = frames.len();
        if len != expected_len {
            return Err(TypeError::InvalidClip(format!(
                "clip has {len} frames, expected {expected_len}"
            )));
        }
        if hand_boxes.len() != len || grasp_labels.len() != len {
            return Err(TypeError::InvalidClip(format!(
                "per-frame arrays must match frame count {len} (boxes {}, grasp {})",
                hand_boxes.len(),
                grasp_labels.len()
            )));
        }
        validate_event_list(&events, len).map_err(TypeError::InvalidClip)?;
        for (t, (pair, grasp)) in hand_boxes.iter().zip(&grasp_labels).enumerate() {
            for side in [Side::Left, Side::Right] {
                let b = pair.get(side);
                let g = grasp[side.index()];
                if g.is_some() && !b.present {
                    return Err(TypeError::InvalidClip(format!(
                        "frame {t}: grasp label present for absent {side:?} hand"
                    )));
                }
                if let Some(g) = g {
                    if g as usize >= GRASP_CATEGORIES {
                        return Err(TypeError::InvalidClip(format!(
                            "frame {t}: grasp category {g} outside [0, {GRASP_CATEGORIES})"
                        )));
                    }
                }
            }
        }
        Ok(Self { frames, hand_boxes, events, grasp_labels })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn hand_boxes(&self) -> &[HandPair] {
        &self.hand_boxes
    }

    pub fn events(&self) -> &[TouchEvent] {
        &self.events
    }

    pub fn event_frames(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.frame).collect()
    }

    pub fn grasp_labels(&self) -> &[GraspPair] {
        &self.grasp_labels
    }
}
