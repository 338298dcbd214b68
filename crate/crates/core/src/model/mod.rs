//! The spotting model: per-frame backbones, hand-context cross-attention,
//! temporal encoder-decoder, and the three prediction heads.

pub mod attn;
pub mod backbone;
pub mod checkpoint;
pub mod heads;
pub mod layers;
pub mod pos;
pub mod temporal;

use crate::autograd::{Graph, Var};
use crate::config::SpotConfig;
use crate::data::extract_hand_patch;
use crate::rng::DetRng;
use crate::types::{ClipSample, Frame, Side};
use attn::HandContextAttn;
use backbone::{frame_to_chw, stack_temporal_patches, Backbone};
use heads::{HeadVars, Heads};
use layers::{BoundParams, ParamStore};
use ndarray::{Array3, ArrayD};
use temporal::TemporalNet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite values at stage {stage}")]
    NonFinite { stage: &'static str },
    #[error("shape mismatch at {stage}: expected {expected:?}, found {found:?}")]
    Shape {
        stage: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("clip length {len} too short for {scales} temporal scales")]
    TemporalTooShort { len: usize, scales: usize },
}

/// Per-frame feature maps produced by the backbones.
pub struct FrameFeatures {
    /// One `[C, H', W']` global map per frame.
    pub global: Vec<Var>,
    /// One `[C, Hp', Wp']` map per frame per hand (left, right); all-zero
    /// when the hand is absent in that frame.
    pub hands: Vec<[Var; 2]>,
}

/// The full architecture plus its parameter store.
#[derive(Debug)]
pub struct SpotModel {
    pub store: ParamStore,
    global_backbone: Backbone,
    hand_backbone: Backbone,
    pub attn: HandContextAttn,
    pub temporal: TemporalNet,
    pub heads: Heads,
    feature_dim: usize,
    patch_size: usize,
    patch_scale: f64,
}

impl SpotModel {
    /// Fresh model with weights drawn from `cfg.seed`.
    pub fn new(cfg: &SpotConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(cfg.seed).derive(0xA001);
        let global_backbone =
            Backbone::new(&mut store, &mut rng, "backbone.global", 3, &cfg.backbone_channels);
        let hand_backbone =
            Backbone::new(&mut store, &mut rng, "backbone.hand", 9, &cfg.backbone_channels);
        let attn = HandContextAttn::new(
            &mut store,
            &mut rng,
            "attn",
            cfg.feature_dim,
            cfg.attn_heads,
            cfg.ffn_expansion,
        );
        let temporal =
            TemporalNet::new(&mut store, &mut rng, "temporal", cfg.feature_dim, cfg.temporal_scales);
        let heads = Heads::new(&mut store, &mut rng, "heads", cfg.feature_dim);
        Self {
            store,
            global_backbone,
            hand_backbone,
            attn,
            temporal,
            heads,
            feature_dim: cfg.feature_dim,
            patch_size: cfg.patch_size,
            patch_scale: cfg.patch_scale,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.store.bind(g)
    }

    /// Run both backbones over a clip: global maps plus per-hand maps
    /// (all-zero for absent hands).
    pub fn backbone_features(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        clip: &ClipSample,
    ) -> Result<FrameFeatures, ModelError> {
        let len = clip.len();
        let mut global = Vec::with_capacity(len);
        for frame in clip.frames() {
            let x = g.input(frame_to_chw(frame));
            let fmap = self.global_backbone.forward(g, p, x);
            if g.value(fmap).shape()[0] != self.feature_dim {
                return Err(ModelError::Shape {
                    stage: "backbone.global",
                    expected: vec![self.feature_dim],
                    found: vec![g.value(fmap).shape()[0]],
                });
            }
            global.push(fmap);
        }

        // hand patches, cached per frame, then channel-stacked with their
        // temporal neighbours (clamped at clip edges)
        let zero_patch: Frame = Array3::zeros((self.patch_size, self.patch_size, 3));
        let mut patches: Vec<[Frame; 2]> = Vec::with_capacity(len);
        for (t, pair) in clip.hand_boxes().iter().enumerate() {
            let mut per_side = [zero_patch.clone(), zero_patch.clone()];
            for side in [Side::Left, Side::Right] {
                let b = pair.get(side);
                if b.present {
                    per_side[side.index()] = extract_hand_patch(
                        &clip.frames()[t],
                        b,
                        self.patch_scale,
                        self.patch_size,
                    );
                }
            }
            patches.push(per_side);
        }

        let grid = self.patch_size / self.hand_backbone.downscale();
        let mut hands = Vec::with_capacity(len);
        for t in 0..len {
            let mut pair_vars = Vec::with_capacity(2);
            for side in [Side::Left, Side::Right] {
                let si = side.index();
                if clip.hand_boxes()[t].get(side).present {
                    let prev = &patches[t.saturating_sub(1)][si];
                    let next = &patches[(t + 1).min(len - 1)][si];
                    let stacked = stack_temporal_patches(prev, &patches[t][si], next);
                    let x = g.input(stacked);
                    pair_vars.push(self.hand_backbone.forward(g, p, x));
                } else {
                    let zero = g.input(ArrayD::zeros(vec![self.feature_dim, grid, grid]));
                    pair_vars.push(zero);
                }
            }
            hands.push([pair_vars[0], pair_vars[1]]);
        }
        Ok(FrameFeatures { global, hands })
    }

    /// Full forward pass over one clip.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        clip: &ClipSample,
    ) -> Result<HeadVars, ModelError> {
        let feats = self.backbone_features(g, p, clip)?;
        let len = clip.len();

        let mut pooled = Vec::with_capacity(len);
        let mut hand_pooled = Vec::with_capacity(len);
        for t in 0..len {
            let [lh, rh] = feats.hands[t];
            let enhanced = self.attn.forward(
                g,
                p,
                feats.global[t],
                &[(lh, Side::Left), (rh, Side::Right)],
            )?;
            pooled.push(g.mean_spatial(enhanced));
            let lp = g.mean_spatial(lh);
            let rp = g.mean_spatial(rh);
            let both = [lp, rp];
            let stacked = g.stack_rows(&both); // [2, C]
            hand_pooled.push(g.reshape(stacked, &[2 * self.feature_dim]));
        }
        let temporal_in = g.stack_rows(&pooled); // [L, C]
        let temporal_out = self.temporal.forward(g, p, temporal_in)?;
        let hand_mat = g.stack_rows(&hand_pooled); // [L, 2C]
        self.heads.forward(g, p, temporal_out, hand_mat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{HandBox, HandPair, TouchEvent};

    fn tiny_cfg() -> SpotConfig {
        SpotConfig {
            clip_length: 4,
            displacement_window: 1,
            soft_label_sigma: 0.5,
            patch_size: 8,
            feature_dim: 8,
            backbone_channels: vec![8],
            attn_heads: 2,
            temporal_scales: 1,
            tor_sigma: 1.0,
            nms_window: 3,
            ..SpotConfig::desk()
        }
    }

    fn tiny_clip(cfg: &SpotConfig, seed: u64) -> ClipSample {
        let mut rng = DetRng::new(seed);
        let l = cfg.clip_length;
        let frames: Vec<Frame> = (0..l)
            .map(|_| Array3::from_shape_fn((16, 16, 3), |_| rng.gen_f64()))
            .collect();
        let mut boxes = vec![HandPair::absent(); l];
        for (t, b) in boxes.iter_mut().enumerate() {
            if t % 2 == 0 {
                b.left = HandBox::new(2.0, 2.0, 8.0, 8.0, Side::Left).unwrap();
            }
            b.right = HandBox::new(9.0, 6.0, 14.0, 12.0, Side::Right).unwrap();
        }
        let grasp = boxes
            .iter()
            .map(|p| {
                [
                    p.left.present.then_some(1u8),
                    p.right.present.then_some(4u8),
                ]
            })
            .collect();
        ClipSample::new(frames, boxes, vec![TouchEvent::new(2)], grasp, l).unwrap()
    }

    #[test]
    fn absent_hand_features_are_zero_maps() {
        let cfg = tiny_cfg();
        let model = SpotModel::new(&cfg);
        let clip = tiny_clip(&cfg, 3);
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let feats = model.backbone_features(&mut g, &p, &clip).unwrap();
        // frame 1 has no left hand
        assert!(!clip.hand_boxes()[1].left.present);
        let lh = g.value(feats.hands[1][0]);
        assert!(lh.iter().all(|&v| v == 0.0));
        // frame 0 has a left hand; its map is generally non-zero
        let lh0 = g.value(feats.hands[0][0]);
        assert!(lh0.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_produces_head_shapes() {
        let cfg = tiny_cfg();
        let model = SpotModel::new(&cfg);
        let clip = tiny_clip(&cfg, 4);
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward(&mut g, &p, &clip).unwrap();
        assert_eq!(g.value(out.y_c).shape(), &[4, 2]);
        assert_eq!(g.value(out.y_d).shape(), &[4, 1]);
        assert_eq!(g.value(out.y_g).shape(), &[4, 18]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = SpotModel::new(&cfg);
        let clip = tiny_clip(&cfg, 5);
        let run = || {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let out = model.forward(&mut g, &p, &clip).unwrap();
            g.value(out.y_c).to_owned()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn every_parameter_reaches_the_loss() {
        // Gradient flow into every tensor. The zero-initialized residual
        // layers block gradients into the attention projections at step 0
        // by construction, so take two descent steps first: once out_proj
        // and ffn2 move off zero, no branch may stay dead.
        let cfg = tiny_cfg();
        let mut model = SpotModel::new(&cfg);
        let clip = tiny_clip(&cfg, 6);
        let mut wrng = DetRng::new(99);
        let class_weights = ndarray::Array2::from_shape_fn((cfg.clip_length, 2), |_| {
            wrng.gen_normal()
        })
        .into_dyn();
        let run = |model: &SpotModel| {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let out = model.forward(&mut g, &p, &clip).unwrap();
            // a plain mean of softmax rows is constant, so weight it
            let cw = g.input(class_weights.clone());
            let weighted = g.mul(out.y_c, cw);
            let m1 = g.mean_all(weighted);
            let m2 = g.mean_all(out.y_d);
            let m3 = g.mean_all(out.y_g);
            let s = g.add(m1, m2);
            let loss = g.add(s, m3);
            let grads = g.backward(loss);
            let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
            ids.iter().map(|&id| grads.get(&g, p.var(id))).collect::<Vec<_>>()
        };
        for _ in 0..2 {
            let grads = run(&model);
            let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
            for (i, id) in ids.into_iter().enumerate() {
                let step = grads[i].mapv(|v| v * 0.05);
                *model.store.get_mut(id) -= &step;
            }
        }
        let grads = run(&model);
        for (i, (_, name, _)) in model.store.iter().enumerate() {
            assert!(
                grads[i].iter().any(|&v| v != 0.0),
                "parameter {name} received an all-zero gradient after warm-up"
            );
        }
    }
}
