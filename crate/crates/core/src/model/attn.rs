//! Hand-context cross-attention.
//!
//! Global frame tokens query the left/right hand-patch tokens: queries are
//! built from the global map plus positional embeddings, keys from the hand
//! tokens plus positional and hand-identity embeddings, values from the raw
//! hand tokens. Attention output is projected back to C and added
//! residually, followed by a residual feed-forward layer:
//!
//! ```text
//! Q = f_Q(F + E_pos)            K = f_K([F_lh, F_rh] + E_pos + E_id)
//! V = f_V([F_lh, F_rh])         A = softmax(Q K^T / sqrt(d_h)) V
//! F'         = out_proj(A) + F
//! F_enhanced = FFN(F') + F'
//! ```
//!
//! `out_proj` and the second FFN layer start at zero, so a freshly
//! initialized block is exactly the identity on `F`.

use super::layers::{BoundParams, LinearLayer, ParamId, ParamStore};
use super::pos::pos_embedding_tokens;
use super::ModelError;
use crate::autograd::{Graph, Var};
use crate::rng::DetRng;
use crate::types::Side;
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct HandContextAttn {
    f_q: LinearLayer,
    f_k: LinearLayer,
    f_v: LinearLayer,
    out_proj: LinearLayer,
    ffn1: LinearLayer,
    ffn2: LinearLayer,
    /// Two learned identity embeddings: row 0 left, row 1 right.
    e_id: ParamId,
    heads: usize,
    dim: usize,
}

/// Attention weights per head, exposed for inspection and tests.
pub struct AttnDetail {
    pub output: Var,
    pub weights: Vec<Array2<f64>>,
}

impl HandContextAttn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        let f_q = LinearLayer::new(store, rng, &format!("{name}.f_q"), dim, dim);
        let f_k = LinearLayer::new(store, rng, &format!("{name}.f_k"), dim, dim);
        let f_v = LinearLayer::new(store, rng, &format!("{name}.f_v"), dim, dim);
        let out_proj = LinearLayer::new_zeroed(store, &format!("{name}.out_proj"), dim, dim);
        let ffn1 = LinearLayer::new(store, rng, &format!("{name}.ffn1"), dim, dim * ffn_expansion);
        let ffn2 = LinearLayer::new_zeroed(store, &format!("{name}.ffn2"), dim * ffn_expansion, dim);
        let mut e_id_init = super::layers::zeros(&[2, dim]);
        for v in e_id_init.iter_mut() {
            *v = rng.gen_normal() * 0.02;
        }
        let e_id = store.def(&format!("{name}.e_id"), e_id_init);
        Self { f_q, f_k, f_v, out_proj, ffn1, ffn2, e_id, heads, dim }
    }

    /// Enhance a global feature map `[C, H, W]` with hand maps
    /// `[C, Hp, Wp]`. Hands are `(map, side)` pairs; an absent hand is
    /// represented upstream by an all-zero map.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        global: Var,
        hands: &[(Var, Side)],
    ) -> Result<Var, ModelError> {
        Ok(self.forward_detailed(g, p, global, hands)?.output)
    }

    pub fn forward_detailed(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        global: Var,
        hands: &[(Var, Side)],
    ) -> Result<AttnDetail, ModelError> {
        assert!(!hands.is_empty(), "at least one hand map required");
        let gshape = g.value(global).shape().to_vec();
        let (c, h, w) = (gshape[0], gshape[1], gshape[2]);
        if c != self.dim {
            return Err(ModelError::Shape {
                stage: "attn.global",
                expected: vec![self.dim],
                found: vec![c],
            });
        }

        // global tokens + positional embedding
        let f_tokens = map_to_tokens(g, global, c, h, w);
        let e_pos = g.input(pos_embedding_tokens(h, w, c).into_dyn());
        let q_in = g.add(f_tokens, e_pos);
        let q = self.f_q.forward(g, p, q_in);
        check_finite(g, q, "attn.queries")?;

        // hand tokens: keys get pos + identity embeddings, values are raw
        let e_id = p.var(self.e_id);
        let mut key_parts = Vec::with_capacity(hands.len());
        let mut value_parts = Vec::with_capacity(hands.len());
        for &(map, side) in hands {
            let hshape = g.value(map).shape().to_vec();
            if hshape[0] != self.dim {
                return Err(ModelError::Shape {
                    stage: "attn.hand",
                    expected: vec![self.dim],
                    found: vec![hshape[0]],
                });
            }
            let (hp, wp) = (hshape[1], hshape[2]);
            let tokens = map_to_tokens(g, map, c, hp, wp);
            let pos = g.input(pos_embedding_tokens(hp, wp, c).into_dyn());
            let with_pos = g.add(tokens, pos);
            let id_row = g.row(e_id, side.index());
            key_parts.push(g.add_bias(with_pos, id_row));
            value_parts.push(tokens);
        }
        let k_in = g.concat_rows(&key_parts);
        let v_in = g.concat_rows(&value_parts);
        let k = self.f_k.forward(g, p, k_in);
        let v = self.f_v.forward(g, p, v_in);
        check_finite(g, k, "attn.keys")?;
        check_finite(g, v, "attn.values")?;

        // multi-head cross-attention
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let kt = g.transpose2(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled);
            #[cfg(debug_assertions)]
            {
                let a = g.value(attn);
                for row in a.rows() {
                    debug_assert!(
                        (row.sum() - 1.0).abs() < 1e-5,
                        "attention row sum {} off unity",
                        row.sum()
                    );
                }
            }
            weights.push(
                g.value(attn)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap(),
            );
            head_outputs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&head_outputs);
        check_finite(g, merged, "attn.cross")?;

        // residual update and feed-forward
        let projected = self.out_proj.forward(g, p, merged);
        let f1 = g.add(projected, f_tokens);
        let hidden = self.ffn1.forward(g, p, f1);
        let hidden = g.relu(hidden);
        let ffn_out = self.ffn2.forward(g, p, hidden);
        let enhanced = g.add(ffn_out, f1);
        check_finite(g, enhanced, "attn.ffn")?;

        let output = tokens_to_map(g, enhanced, c, h, w);
        Ok(AttnDetail { output, weights })
    }
}

/// `[C, H, W] -> [H*W, C]` token rows.
fn map_to_tokens(g: &mut Graph, map: Var, c: usize, h: usize, w: usize) -> Var {
    let flat = g.reshape(map, &[c, h * w]);
    g.transpose2(flat)
}

/// `[H*W, C] -> [C, H, W]`.
fn tokens_to_map(g: &mut Graph, tokens: Var, c: usize, h: usize, w: usize) -> Var {
    let t = g.transpose2(tokens);
    g.reshape(t, &[c, h, w])
}

fn check_finite(g: &Graph, var: Var, stage: &'static str) -> Result<(), ModelError> {
    if g.value(var).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { stage })
    }
}
