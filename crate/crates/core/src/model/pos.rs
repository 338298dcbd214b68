//! Fixed 2-D sinusoidal positional embeddings.

use ndarray::{Array2, Array3};

/// `h x w x c` embedding grid; the first half of the channels encodes the
/// row index, the second half the column index, each as interleaved
/// sin/cos pairs over geometric frequencies. `c` must be divisible by 4.
/// Deterministic in `(h, w, c)`; no data dependence.
pub fn sinusoidal_pos_embedding(h: usize, w: usize, c: usize) -> Array3<f64> {
    assert!(c >= 4 && c % 4 == 0, "channel count {c} must be a positive multiple of 4");
    let quarter = c / 4;
    let mut emb = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..quarter {
                let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let (si, ci) = ((i as f64 * freq).sin(), (i as f64 * freq).cos());
                let (sj, cj) = ((j as f64 * freq).sin(), (j as f64 * freq).cos());
                emb[[i, j, 2 * k]] = si;
                emb[[i, j, 2 * k + 1]] = ci;
                emb[[i, j, c / 2 + 2 * k]] = sj;
                emb[[i, j, c / 2 + 2 * k + 1]] = cj;
            }
        }
    }
    emb
}

/// The same embedding flattened to `(h*w, c)` token rows (row-major order,
/// matching how feature maps are flattened into tokens).
pub fn pos_embedding_tokens(h: usize, w: usize, c: usize) -> Array2<f64> {
    sinusoidal_pos_embedding(h, w, c)
        .into_shape((h * w, c))
        .expect("contiguous reshape")
}
