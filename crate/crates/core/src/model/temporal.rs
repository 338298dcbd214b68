//! Multi-scale temporal reasoning over per-frame feature vectors.
//!
//! A strided temporal-convolution encoder with a mirrored upsampling
//! decoder and additive skip connections at every scale. The receptive
//! field grows with each stride-2 level while the skips restore full
//! temporal resolution, so per-frame predictions stay sharp.
//!
//! [`TemporalNet::set_identity`] configures the weights so the whole module
//! is the identity on positive inputs: encoder, bottleneck and output convs
//! become center-tap identities and the decoder convs zero, which silences
//! the (information-lossy) downsampled path and routes everything through
//! the skips.

use super::layers::{BoundParams, Conv1dLayer, ParamStore};
use super::ModelError;
use crate::autograd::{Graph, Var};
use crate::rng::DetRng;

#[derive(Debug, Clone)]
pub struct TemporalNet {
    enc: Vec<Conv1dLayer>,
    down: Vec<Conv1dLayer>,
    mid: Conv1dLayer,
    dec: Vec<Conv1dLayer>,
    out: Conv1dLayer,
    scales: usize,
}

impl TemporalNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        dim: usize,
        scales: usize,
    ) -> Self {
        let mut enc = Vec::with_capacity(scales);
        let mut down = Vec::with_capacity(scales);
        let mut dec = Vec::with_capacity(scales);
        for s in 0..scales {
            enc.push(Conv1dLayer::new(store, rng, &format!("{name}.enc{s}"), dim, dim, 3, 1, 1));
            down.push(Conv1dLayer::new(store, rng, &format!("{name}.down{s}"), dim, dim, 3, 2, 1));
            dec.push(Conv1dLayer::new(store, rng, &format!("{name}.dec{s}"), dim, dim, 3, 1, 1));
        }
        let mid = Conv1dLayer::new(store, rng, &format!("{name}.mid"), dim, dim, 3, 1, 1);
        let out = Conv1dLayer::new(store, rng, &format!("{name}.out"), dim, dim, 3, 1, 1);
        Self { enc, down, mid, dec, out, scales }
    }

    /// `[L, C] -> [L, C]`; requires `L >= 2^scales`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var, ModelError> {
        let len = g.value(x).shape()[0];
        if len < (1 << self.scales) {
            return Err(ModelError::TemporalTooShort { len, scales: self.scales });
        }

        let mut skips = Vec::with_capacity(self.scales);
        let mut cur = x;
        for s in 0..self.scales {
            let y = self.enc[s].forward(g, p, cur);
            let y = g.relu(y);
            skips.push(y);
            let d = self.down[s].forward(g, p, y);
            cur = g.relu(d);
        }
        let m = self.mid.forward(g, p, cur);
        cur = g.relu(m);
        for s in (0..self.scales).rev() {
            let up = g.upsample2(cur);
            let skip_len = g.value(skips[s]).shape()[0];
            let up = if g.value(up).shape()[0] > skip_len {
                g.slice_rows(up, 0, skip_len)
            } else {
                up
            };
            let d = self.dec[s].forward(g, p, up);
            cur = g.add(d, skips[s]);
        }
        Ok(self.out.forward(g, p, cur))
    }

    /// Make the whole module the identity map for positive inputs.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for conv in self.enc.iter().chain(&self.down).chain([&self.mid, &self.out]) {
            conv.set_identity(store);
        }
        for conv in &self.dec {
            conv.set_zero(store);
        }
    }
}
