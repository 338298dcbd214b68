//! Prediction heads: touch classification, displacement regression, and
//! grasp classification.

use super::layers::{BoundParams, LinearLayer, ParamStore};
use super::ModelError;
use crate::autograd::{Graph, Var};
use crate::rng::DetRng;
use crate::types::GRASP_CATEGORIES;

/// Graph-side head outputs for one clip.
///
/// `y_c`: `[L, 2]` softmax probabilities (column 1 is the touch class).
/// `y_d`: `[L, 1]` frame offsets to the nearest event.
/// `y_g`: `[L, 18]` grasp logits, row-major `(left 9, right 9)` per frame.
pub struct HeadVars {
    pub y_c: Var,
    pub y_d: Var,
    pub y_g: Var,
}

#[derive(Debug, Clone)]
pub struct Heads {
    class: LinearLayer,
    disp: LinearLayer,
    grasp: Vec<LinearLayer>,
}

impl Heads {
    pub fn new(store: &mut ParamStore, rng: &mut DetRng, name: &str, dim: usize) -> Self {
        let class = LinearLayer::new(store, rng, &format!("{name}.class"), dim, 2);
        let disp = LinearLayer::new(store, rng, &format!("{name}.disp"), dim, 1);
        // four-layer MLP over concatenated (left, right) pooled hand features
        let widths = [2 * dim, dim, dim, dim, 2 * GRASP_CATEGORIES];
        let grasp = (0..4)
            .map(|i| {
                LinearLayer::new(
                    store,
                    rng,
                    &format!("{name}.grasp{i}"),
                    widths[i],
                    widths[i + 1],
                )
            })
            .collect();
        Self { class, disp, grasp }
    }

    /// `temporal`: `[L, C]` contextualized features; `hand_pooled`:
    /// `[L, 2C]` concatenated pooled (left, right) hand features.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        temporal: Var,
        hand_pooled: Var,
    ) -> Result<HeadVars, ModelError> {
        let logits = self.class.forward(g, p, temporal);
        let y_c = g.softmax_rows(logits);
        let y_d = self.disp.forward(g, p, temporal);

        let mut cur = hand_pooled;
        for (i, layer) in self.grasp.iter().enumerate() {
            cur = layer.forward(g, p, cur);
            if i + 1 < self.grasp.len() {
                cur = g.relu(cur);
            }
        }
        let y_g = cur;

        for (var, stage) in [(y_c, "heads.class"), (y_d, "heads.disp"), (y_g, "heads.grasp")] {
            if !g.value(var).iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite { stage });
            }
        }
        Ok(HeadVars { y_c, y_d, y_g })
    }

    /// The grasp MLP applied to an all-zero input, computed directly from
    /// the stored biases. Useful as an oracle for the zero-input path.
    pub fn grasp_bias_path(&self, store: &ParamStore) -> ndarray::Array1<f64> {
        let mut cur = self.grasp[0].bias_value(store);
        for layer in self.grasp.iter().skip(1) {
            cur.mapv_inplace(|v| v.max(0.0)); // relu between layers
            let w = store
                .get(layer.w)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            cur = cur.dot(&w) + layer.bias_value(store);
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, ArrayD};

    fn heads(dim: usize, seed: u64) -> (ParamStore, Heads) {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(seed);
        let heads = Heads::new(&mut store, &mut rng, "heads", dim);
        (store, heads)
    }

    #[test]
    fn class_rows_are_distributions() {
        let (store, heads) = heads(8, 1);
        let mut rng = DetRng::new(2);
        let temporal = Array2::from_shape_fn((10, 8), |_| rng.gen_normal());
        let hand = Array2::from_shape_fn((10, 16), |_| rng.gen_normal());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (tv, hv) = (g.input(temporal.into_dyn()), g.input(hand.into_dyn()));
        let out = heads.forward(&mut g, &p, tv, hv).unwrap();
        let y_c = g.value(out.y_c).to_owned();
        assert_eq!(y_c.shape(), &[10, 2]);
        let y2 = y_c.into_dimensionality::<ndarray::Ix2>().unwrap();
        for row in y2.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn grasp_output_is_two_by_nine_per_frame() {
        let (store, heads) = heads(8, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tv = g.input(ArrayD::zeros(vec![5, 8]));
        let hv = g.input(ArrayD::zeros(vec![5, 16]));
        let out = heads.forward(&mut g, &p, tv, hv).unwrap();
        assert_eq!(g.value(out.y_g).shape(), &[5, 2 * GRASP_CATEGORIES]);
        assert_eq!(g.value(out.y_d).shape(), &[5, 1]);
    }

    #[test]
    fn zero_hand_features_reduce_to_bias_path() {
        let (store, heads) = heads(8, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tv = g.input(ArrayD::zeros(vec![3, 8]));
        let hv = g.input(ArrayD::zeros(vec![3, 16]));
        let out = heads.forward(&mut g, &p, tv, hv).unwrap();
        let expected = heads.grasp_bias_path(&store);
        let y_g = g.value(out.y_g);
        for t in 0..3 {
            for (i, &e) in expected.iter().enumerate() {
                assert!((y_g[[t, i]] - e).abs() < 1e-12);
            }
        }
    }
}
