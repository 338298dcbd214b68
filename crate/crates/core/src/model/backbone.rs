//! Per-frame convolutional feature extractors.
//!
//! A stack of stride-2 conv + ReLU blocks standing in for a full image
//! backbone: same contract (spatial grid of C-dim features, downscale
//! `2^blocks`), a fraction of the cost. The hand variant consumes the patch
//! channel-stacked with its two temporal neighbours, so short-term motion
//! is visible to the hand encoder.

use super::layers::{BoundParams, Conv2dLayer, ParamStore};
use crate::autograd::{Graph, Var};
use crate::rng::DetRng;
use crate::types::Frame;
use ndarray::{Array3, ArrayD};

/// Stride-2 conv stack: `[cin, H, W] -> [channels.last(), H/2^n, W/2^n]`.
#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Conv2dLayer>,
    cin: usize,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        channels: &[usize],
    ) -> Self {
        assert!(!channels.is_empty());
        let mut blocks = Vec::with_capacity(channels.len());
        let mut prev = cin;
        for (i, &cout) in channels.iter().enumerate() {
            blocks.push(Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.block{i}"),
                prev,
                cout,
                3,
                2,
                1,
            ));
            prev = cout;
        }
        Self { blocks, cin }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn downscale(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let mut cur = x;
        for block in &self.blocks {
            cur = block.forward(g, p, cur);
            cur = g.relu(cur);
        }
        cur
    }
}

/// `(H, W, C)` image to the `[C, H, W]` layout convolutions expect.
pub fn frame_to_chw(frame: &Frame) -> ArrayD<f64> {
    let (h, w, c) = frame.dim();
    let mut out = Array3::zeros((c, h, w));
    for ((y, x, ch), &v) in frame.indexed_iter() {
        out[[ch, y, x]] = v;
    }
    out.into_dyn()
}

/// Stack `prev`, `cur`, `next` patches along channels into `[9, P, P]`.
pub fn stack_temporal_patches(prev: &Frame, cur: &Frame, next: &Frame) -> ArrayD<f64> {
    let (h, w, _) = cur.dim();
    let mut out = Array3::zeros((9, h, w));
    for (slot, patch) in [prev, cur, next].into_iter().enumerate() {
        for ((y, x, c), &v) in patch.indexed_iter() {
            out[[slot * 3 + c, y, x]] = v;
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn forward_shape(hw: usize, cin: usize, channels: &[usize]) -> Vec<usize> {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(0);
        let bb = Backbone::new(&mut store, &mut rng, "bb", cin, channels);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.input(ArrayD::zeros(vec![cin, hw, hw]));
        let y = bb.forward(&mut g, &bound, x);
        g.value(y).shape().to_vec()
    }

    #[test]
    fn shape_contract_32px_downscale_8() {
        // 32x32 input, three stride-2 blocks ending at C=64 -> 4x4x64 grid
        assert_eq!(forward_shape(32, 3, &[16, 32, 64]), vec![64, 4, 4]);
    }

    #[test]
    fn zero_input_stays_finite() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(3);
        let bb = Backbone::new(&mut store, &mut rng, "bb", 3, &[8, 16]);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.input(ArrayD::zeros(vec![3, 16, 16]));
        let y = bb.forward(&mut g, &bound, x);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layout_conversion_is_exact() {
        let frame = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let chw = frame_to_chw(&frame);
        assert_eq!(chw.shape(), &[3, 4, 5]);
        assert_eq!(chw[[2, 3, 4]], 342.0);
        let stacked = stack_temporal_patches(&frame, &frame, &frame);
        assert_eq!(stacked.shape(), &[9, 4, 5]);
        assert_eq!(stacked[[0, 1, 2]], stacked[[3, 1, 2]]);
        assert_eq!(stacked[[0, 1, 2]], stacked[[6, 1, 2]]);
    }
}
