//! Procedural toy sequences with exactly known touch frames.
//!
//! Each sequence renders a textured object disc and one or two hand discs
//! that approach, overlap and retract. Ground truth is geometric: the touch
//! frame is the first frame at which the hand and object discs intersect in
//! world coordinates (surface gap <= 0), computed from the motion profile
//! itself, never from rendered pixels. Camera jitter translates the whole
//! frame after contact is decided, so it can never move an annotation.

use crate::data::VideoData;
use crate::rng::DetRng;
use crate::types::{Frame, GraspPair, HandBox, HandPair, Side, TouchEvent, GRASP_CATEGORIES};
use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth params: {0}")]
    InvalidParams(String),
}

/// Generator settings. `hand_speed` and `num_events` are inclusive ranges
/// sampled per video.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub frame_size: usize,
    pub num_frames: usize,
    /// Pixels per frame, sampled uniformly from `(lo, hi)`; must be > 0.
    pub hand_speed: (f64, f64),
    /// Per-frame camera translation std-dev in pixels.
    pub camera_jitter: f64,
    /// Probability that a frame gets a 3x3 box blur.
    pub blur_prob: f64,
    /// Events per video, sampled uniformly from `(lo, hi)`; both in [1, 2].
    pub num_events: (usize, usize),
    /// Minimum spacing between two touch frames.
    pub min_event_gap: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            frame_size: 32,
            num_frames: 48,
            hand_speed: (1.0, 3.0),
            camera_jitter: 0.5,
            blur_prob: 0.1,
            num_events: (1, 2),
            min_event_gap: 5,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::InvalidParams(m));
        if self.frame_size < 16 {
            return fail(format!("frame_size {} must be >= 16", self.frame_size));
        }
        if !(self.hand_speed.0 > 0.0) || self.hand_speed.1 < self.hand_speed.0 {
            return fail(format!("hand_speed range {:?} must be positive and ordered", self.hand_speed));
        }
        if self.num_events.0 < 1 || self.num_events.1 > 2 || self.num_events.1 < self.num_events.0 {
            return fail(format!("num_events range {:?} must lie within [1, 2]", self.num_events));
        }
        if self.camera_jitter < 0.0 {
            return fail(format!("camera_jitter {} must be >= 0", self.camera_jitter));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return fail(format!("blur_prob {} must lie in [0, 1]", self.blur_prob));
        }
        let needed = 12 + if self.num_events.1 == 2 { self.min_event_gap + 8 } else { 0 };
        if self.num_frames < needed {
            return fail(format!(
                "num_frames {} too short for up to {} events (need >= {needed})",
                self.num_frames, self.num_events.1
            ));
        }
        Ok(())
    }
}

/// One hand's approach / dwell / retract cycle, expressed as the surface gap
/// to the object per frame. Gap <= 0 means the discs intersect.
#[derive(Debug, Clone)]
struct HandTrack {
    side: Side,
    radius: f64,
    /// Unit approach direction from object towards the hand's rest position.
    dir: (f64, f64),
    /// Surface gap to the object for every frame, in world coordinates.
    gap: Vec<f64>,
    /// First frame with gap <= 0.
    touch_frame: usize,
    grasp_before: u8,
    grasp_after: u8,
}

impl HandTrack {
    fn center(&self, obj_center: (f64, f64), obj_radius: f64, t: usize) -> (f64, f64) {
        let dist = self.gap[t] + obj_radius + self.radius;
        (obj_center.0 + self.dir.0 * dist, obj_center.1 + self.dir.1 * dist)
    }
}

struct Scene {
    obj_center: (f64, f64),
    obj_radius: f64,
    hands: Vec<HandTrack>,
    jitter: Vec<(f64, f64)>,
    blur: Vec<bool>,
}

/// Build the gap profile of one cycle: rest at `d0` through frame `onset`,
/// then close at `speed` per frame, dwell at `-pen_max`, retract at `speed`,
/// rest again. With this timing, `gap[onset + k] = d0 - k*speed` during the
/// approach, so the first intersecting frame is `onset + ceil(d0/speed)`.
fn gap_profile(
    num_frames: usize,
    onset: usize,
    d0: f64,
    speed: f64,
    pen_max: f64,
    dwell: usize,
) -> Vec<f64> {
    let mut gap = Vec::with_capacity(num_frames);
    let mut state = d0;
    let mut phase = 0; // 0 rest, 1 approach, 2 dwell, 3 retract, 4 rest
    let mut dwell_left = dwell;
    for t in 0..num_frames {
        gap.push(state);
        if t >= onset && phase == 0 {
            phase = 1;
        }
        match phase {
            1 => {
                state -= speed;
                if state <= -pen_max {
                    state = -pen_max;
                    phase = 2;
                }
            }
            2 => {
                if dwell_left == 0 {
                    phase = 3;
                } else {
                    dwell_left -= 1;
                }
            }
            3 => {
                state += speed;
                if state >= d0 {
                    state = d0;
                    phase = 4;
                }
            }
            _ => {}
        }
    }
    gap
}

fn build_scene(params: &SynthParams, rng: &mut DetRng) -> Scene {
    let fs = params.frame_size as f64;
    let obj_radius = fs * 0.16;
    let hand_radius = fs * 0.12;
    let obj_center = (
        fs / 2.0 + rng.gen_range_f64(-fs * 0.08, fs * 0.08),
        fs / 2.0 + rng.gen_range_f64(-fs * 0.08, fs * 0.08),
    );

    let n_events = if params.num_events.0 == params.num_events.1 {
        params.num_events.0
    } else {
        rng.gen_range_usize(params.num_events.0, params.num_events.1 + 1)
    };

    // Pick touch frames first, then fit an approach of k frames before each.
    let lead_min = 4usize;
    let first_lo = lead_min + 1;
    let first_hi = if n_events == 2 {
        params.num_frames - params.min_event_gap - 7
    } else {
        params.num_frames - 6
    };
    let t1 = rng.gen_range_usize(first_lo, first_hi);
    let mut touch_frames = vec![t1];
    if n_events == 2 {
        let lo = t1 + params.min_event_gap;
        let hi = params.num_frames - 6;
        touch_frames.push(rng.gen_range_usize(lo, hi));
    }

    // Event 0 -> one hand (random side); event 1 -> the other hand.
    let first_side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
    let sides = match n_events {
        1 => vec![first_side],
        _ => match first_side {
            Side::Left => vec![Side::Left, Side::Right],
            Side::Right => vec![Side::Right, Side::Left],
        },
    };

    let mut hands = Vec::new();
    for (k, (&touch, side)) in touch_frames.iter().zip(sides).enumerate() {
        let speed = rng.gen_range_f64(params.hand_speed.0, params.hand_speed.1);
        // Approach spans k_app frames; the fractional part makes the gap
        // strictly negative at the touch frame for a robust rendered overlap.
        let k_app = rng.gen_range_usize(3, 8).min(touch.saturating_sub(1)).max(1);
        let frac = rng.gen_range_f64(0.25, 0.75);
        let d0 = speed * (k_app as f64 - frac);
        let onset = touch - (d0 / speed).ceil() as usize;
        let pen_max = hand_radius.min(obj_radius) * 0.6;
        let dwell = rng.gen_range_usize(2, 5);
        let gap = gap_profile(params.num_frames, onset, d0, speed, pen_max, dwell);
        let touch_frame = gap
            .iter()
            .position(|&g| g <= 0.0)
            .expect("profile reaches contact by construction");
        debug_assert_eq!(touch_frame, touch, "constructed touch frame drifted");

        // opposite approach headings keep the two hands apart
        let base = rng.gen_range_f64(0.0, std::f64::consts::TAU);
        let theta = base + k as f64 * std::f64::consts::PI;
        let grasp_before = rng.gen_range_usize(0, 3) as u8;
        let grasp_after = rng.gen_range_usize(3, GRASP_CATEGORIES) as u8;
        hands.push(HandTrack {
            side,
            radius: hand_radius,
            dir: (theta.cos(), theta.sin()),
            gap,
            touch_frame,
            grasp_before,
            grasp_after,
        });
    }
    hands.sort_by_key(|h| h.touch_frame);

    let jitter: Vec<(f64, f64)> = (0..params.num_frames)
        .map(|_| {
            (
                rng.gen_normal() * params.camera_jitter,
                rng.gen_normal() * params.camera_jitter,
            )
        })
        .collect();
    let blur: Vec<bool> = (0..params.num_frames).map(|_| rng.gen_bool(params.blur_prob)).collect();

    Scene { obj_center, obj_radius, hands, jitter, blur }
}

fn render_frame(scene: &Scene, params: &SynthParams, t: usize) -> Frame {
    let fs = params.frame_size;
    let (jx, jy) = scene.jitter[t];
    let mut img: Frame = Array3::zeros((fs, fs, 3));

    // background gradient that shifts with the camera
    for y in 0..fs {
        for x in 0..fs {
            let v = 0.08 + 0.10 * ((x as f64 - jx) + (y as f64 - jy)) / (2.0 * fs as f64);
            for c in 0..3 {
                img[[y, x, c]] = v;
            }
        }
    }

    // object disc with a checker texture
    let (ocx, ocy) = (scene.obj_center.0 + jx, scene.obj_center.1 + jy);
    for y in 0..fs {
        for x in 0..fs {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = (px - ocx).powi(2) + (py - ocy).powi(2);
            if d2 <= scene.obj_radius.powi(2) {
                let checker = ((px - jx) / 2.0).floor() as i64 + ((py - jy) / 2.0).floor() as i64;
                let (r, g, b) =
                    if checker % 2 == 0 { (0.15, 0.55, 0.20) } else { (0.25, 0.80, 0.30) };
                img[[y, x, 0]] = r;
                img[[y, x, 1]] = g;
                img[[y, x, 2]] = b;
            }
        }
    }

    // hands are drawn over the object
    for hand in &scene.hands {
        let (wx, wy) = hand.center(scene.obj_center, scene.obj_radius, t);
        let (hcx, hcy) = (wx + jx, wy + jy);
        let color = match hand.side {
            Side::Left => (0.90, 0.25, 0.20),
            Side::Right => (0.90, 0.60, 0.15),
        };
        for y in 0..fs {
            for x in 0..fs {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = (px - hcx).powi(2) + (py - hcy).powi(2);
                if d2 <= hand.radius.powi(2) {
                    img[[y, x, 0]] = color.0;
                    img[[y, x, 1]] = color.1;
                    img[[y, x, 2]] = color.2;
                }
            }
        }
    }

    if scene.blur[t] {
        img = box_blur3(&img);
    }
    img
}

fn box_blur3(img: &Frame) -> Frame {
    let (h, w, _) = img.dim();
    let mut out: Frame = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        acc += img[[yy as usize, xx as usize, c]];
                        n += 1.0;
                    }
                }
                out[[y, x, c]] = acc / n;
            }
        }
    }
    out
}

/// Generate one sequence. Deterministic in `params.seed`.
pub fn generate_sequence(params: &SynthParams) -> Result<(crate::data::VideoAnnotation, Vec<Frame>), SynthError> {
    params.validate()?;
    let mut rng = DetRng::new(params.seed);
    let scene = build_scene(params, &mut rng);
    let fs = params.frame_size as f64;

    let mut events: Vec<TouchEvent> =
        scene.hands.iter().map(|h| TouchEvent::new(h.touch_frame)).collect();
    events.sort();
    debug_assert!(events.windows(2).all(|w| w[0].frame < w[1].frame));

    let mut hand_boxes = Vec::with_capacity(params.num_frames);
    let mut grasp_labels: Vec<GraspPair> = Vec::with_capacity(params.num_frames);
    for t in 0..params.num_frames {
        let (jx, jy) = scene.jitter[t];
        let mut pair = HandPair::absent();
        let mut grasp: GraspPair = [None, None];
        for hand in &scene.hands {
            let (wx, wy) = hand.center(scene.obj_center, scene.obj_radius, t);
            let (cx, cy) = (wx + jx, wy + jy);
            let raw = HandBox {
                x1: cx - hand.radius,
                y1: cy - hand.radius,
                x2: cx + hand.radius,
                y2: cy + hand.radius,
                side: hand.side,
                present: true,
            };
            let clamped = raw.clamped(fs, fs);
            let label = if clamped.present {
                Some(if t >= hand.touch_frame { hand.grasp_after } else { hand.grasp_before })
            } else {
                None
            };
            match hand.side {
                Side::Left => pair.left = clamped,
                Side::Right => pair.right = clamped,
            }
            grasp[hand.side.index()] = label;
        }
        hand_boxes.push(pair);
        grasp_labels.push(grasp);
    }

    let annotation = crate::data::VideoAnnotation {
        video_id: format!("synth_{:08x}", params.seed),
        frame_count: params.num_frames,
        fps: 30.0,
        events,
        hand_boxes,
        grasp_labels,
    };
    annotation.validate().expect("generated annotation satisfies invariants");

    let frames: Vec<Frame> = (0..params.num_frames).map(|t| render_frame(&scene, params, t)).collect();
    Ok((annotation, frames))
}

/// Generate `n_videos` independent sequences with per-video derived seeds.
pub fn generate_dataset(n_videos: usize, params: &SynthParams) -> Result<Vec<VideoData>, SynthError> {
    if n_videos == 0 {
        return Err(SynthError::InvalidParams("n_videos must be >= 1".into()));
    }
    params.validate()?;
    use rand::RngCore;
    let root = DetRng::new(params.seed);
    (0..n_videos)
        .map(|i| {
            let mut child = root.derive(i as u64);
            let video_params = SynthParams { seed: child.next_u64(), ..params.clone() };
            let (mut annotation, frames) = generate_sequence(&video_params)?;
            annotation.video_id = format!("synth_{i:04}");
            Ok(VideoData { annotation, frames })
        })
        .collect()
}

/// World-coordinate surface gaps per hand, exposed for oracle tests:
/// `(side, gap per frame, hand radius)` plus the object radius.
pub fn geometry_trace(params: &SynthParams) -> Result<(Vec<(Side, Vec<f64>, f64)>, f64), SynthError> {
    params.validate()?;
    let mut rng = DetRng::new(params.seed);
    let scene = build_scene(params, &mut rng);
    Ok((
        scene.hands.iter().map(|h| (h.side, h.gap.clone(), h.radius)).collect(),
        scene.obj_radius,
    ))
}
