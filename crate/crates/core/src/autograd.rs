//! Reverse-mode automatic differentiation on f64 ndarrays.
//!
//! A [`Graph`] is a per-forward-pass tape: ops append nodes holding the
//! computed value plus a closure that maps the output gradient to parent
//! gradients. [`Graph::backward`] walks the tape once in reverse. Everything
//! is `f64`, which keeps finite-difference checks meaningful down to ~1e-10
//! relative error.
//!
//! Gradients are only propagated into nodes created via [`Graph::param`];
//! [`Graph::input`] marks constants (frames, targets, masks) whose gradient
//! nobody needs, so expensive paths like conv backward-to-input are skipped
//! automatically when all inputs upstream are constants.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Arguments handed to a node's backward closure.
struct BwdArgs<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    grad: &'a ArrayD<f64>,
    /// Parent values, in the order they were passed to the op.
    parents: Vec<&'a ArrayD<f64>>,
    /// This node's own output value.
    out: &'a ArrayD<f64>,
    /// Which parents actually need a gradient.
    needs: &'a [bool],
}

type BwdFn = Box<dyn Fn(&BwdArgs) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BwdFn>,
    needs_grad: bool,
}

/// A tape of nodes for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the loss never touched it.
    pub fn get(&self, g: &Graph, var: Var) -> ArrayD<f64> {
        self.by_node[var.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(g.nodes[var.0].value.raw_dim()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: no gradient is ever propagated into it.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, true)
    }

    pub fn value(&self, var: Var) -> ArrayViewD<'_, f64> {
        self.nodes[var.0].value.view()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = &self.nodes[var.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: Option<BwdFn>,
        leaf_needs_grad: bool,
    ) -> Var {
        let needs_grad =
            leaf_needs_grad || parents.iter().any(|&p| self.nodes[p].needs_grad);
        // Invariant: node values are standard layout. `into_shape` (used by
        // reshape and the conv kernels) reinterprets the raw buffer, which
        // is only correct for row-major data; transposes would otherwise
        // smuggle Fortran-layout buffers in.
        let value = standardize(value);
        self.nodes.push(Node { value, parents, backward, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(
        &mut self,
        a: Var,
        value: ArrayD<f64>,
        backward: impl Fn(&BwdArgs) -> ArrayD<f64> + 'static,
    ) -> Var {
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |args| vec![Some(backward(args))])),
            false,
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() expects a scalar loss"
        );
        let mut by_node: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        by_node[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for id in (0..=loss.0).rev() {
            if by_node[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else { continue };
            let grad = by_node[id].take().unwrap();
            let parents: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
            let args = BwdArgs { grad: &grad, parents, out: &node.value, needs: &needs };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (slot, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), self.nodes[*slot].value.shape());
                let pg = standardize(pg);
                match &mut by_node[*slot] {
                    Some(acc) => *acc += &pg,
                    empty => *empty = Some(pg),
                }
            }
            by_node[id] = Some(grad);
        }
        Gradients { by_node }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|args| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| args.grad.clone()),
                ]
            })),
            false,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|args| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| args.grad.mapv(|g| -g)),
                ]
            })),
            false,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|args| {
                vec![
                    args.needs[0].then(|| args.grad * args.parents[1]),
                    args.needs[1].then(|| args.grad * args.parents[0]),
                ]
            })),
            false,
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * k);
        self.unary(a, value, move |args| args.grad.mapv(|g| g * k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + k);
        self.unary(a, value, |args| args.grad.clone())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.unary(a, value, |args| {
            let mut g = args.grad.clone();
            g.zip_mut_with(args.parents[0], |g, &x| {
                if x <= 0.0 {
                    *g = 0.0
                }
            });
            g
        })
    }

    /// `ln(max(x, eps))`; gradient is `1/x` above the clamp and 0 below it.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(eps).ln());
        self.unary(a, value, move |args| {
            let mut g = args.grad.clone();
            g.zip_mut_with(args.parents[0], |g, &x| {
                if x > eps {
                    *g /= x
                } else {
                    *g = 0.0
                }
            });
            g
        })
    }

    /// `x^p` for constant `p >= 0`, defined for non-negative inputs.
    /// `p == 0` is the constant 1 with zero gradient.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        assert!(p >= 0.0, "pow_const expects p >= 0, got {p}");
        if p == 0.0 {
            let value = ArrayD::ones(self.nodes[a.0].value.raw_dim());
            return self.unary(a, value, |args| ArrayD::zeros(args.grad.raw_dim()));
        }
        if p == 1.0 {
            let value = self.nodes[a.0].value.clone();
            return self.unary(a, value, |args| args.grad.clone());
        }
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0).powf(p));
        self.unary(a, value, move |args| {
            let mut g = args.grad.clone();
            g.zip_mut_with(args.parents[0], |g, &x| {
                *g *= p * x.max(0.0).powf(p - 1.0);
            });
            g
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        self.unary(a, value, |args| {
            let g = args.grad.iter().copied().next().unwrap();
            ArrayD::from_elem(args.parents[0].raw_dim(), g)
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of a 2-D node: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = as2(&self.nodes[a.0].value);
        let r = m.nrows() as f64;
        let value = m.mean_axis(Axis(0)).unwrap().into_dyn();
        self.unary(a, value, move |args| {
            let g = as1(args.grad);
            let p = as2(args.parents[0]);
            let mut out = Array2::zeros(p.raw_dim());
            for mut row in out.rows_mut() {
                row.assign(&g.mapv(|x| x / r));
            }
            out.into_dyn()
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape(shape.to_vec())
            .expect("reshape size mismatch");
        self.unary(a, value, |args| {
            args.grad
                .clone()
                .into_shape(args.parents[0].shape().to_vec())
                .unwrap()
        })
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let value = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        self.unary(a, value, |args| as2(args.grad).t().to_owned().into_dyn())
    }

    /// Rows `[start, start+len)` of a 2-D node.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes[a.0].value)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned()
            .into_dyn();
        self.unary(a, value, move |args| {
            let p = as2(args.parents[0]);
            let mut out = Array2::zeros(p.raw_dim());
            out.slice_mut(ndarray::s![start..start + len, ..])
                .assign(&as2(args.grad));
            out.into_dyn()
        })
    }

    /// Columns `[start, start+len)` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes[a.0].value)
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.unary(a, value, move |args| {
            let p = as2(args.parents[0]);
            let mut out = Array2::zeros(p.raw_dim());
            out.slice_mut(ndarray::s![.., start..start + len])
                .assign(&as2(args.grad));
            out.into_dyn()
        })
    }

    /// Concatenate 2-D nodes along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.concat2(parts, Axis(1))
    }

    /// Concatenate 2-D nodes along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.concat2(parts, Axis(0))
    }

    fn concat2(&mut self, parts: &[Var], axis: Axis) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| as2(&self.nodes[v.0].value)).collect();
        let value = ndarray::concatenate(axis, &views).unwrap().into_dyn();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis.0]).collect();
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |args| {
                let g = as2(args.grad);
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for (i, &sz) in sizes.iter().enumerate() {
                    let piece = if axis == Axis(0) {
                        g.slice(ndarray::s![off..off + sz, ..]).to_owned()
                    } else {
                        g.slice(ndarray::s![.., off..off + sz]).to_owned()
                    };
                    off += sz;
                    out.push(args.needs[i].then(|| piece.into_dyn()));
                }
                out
            })),
            false,
        )
    }

    /// Stack 1-D nodes `[c]` into a 2-D node `[n, c]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|v| {
                self.nodes[v.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("stack_rows wants 1-D parts")
            })
            .collect();
        let value = ndarray::stack(Axis(0), &views).unwrap().into_dyn();
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |args| {
                let g = as2(args.grad);
                (0..g.nrows())
                    .map(|i| args.needs[i].then(|| g.row(i).to_owned().into_dyn()))
                    .collect()
            })),
            false,
        )
    }

    /// Row `i` of a 2-D node as a 1-D node.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let value = as2(&self.nodes[a.0].value).row(i).to_owned().into_dyn();
        self.unary(a, value, move |args| {
            let p = as2(args.parents[0]);
            let mut out = Array2::zeros(p.raw_dim());
            out.row_mut(i).assign(&as1(args.grad));
            out.into_dyn()
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(&self.nodes[a.0].value).to_owned();
        let vb = as2(&self.nodes[b.0].value).to_owned();
        let value = va.dot(&vb).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|args| {
                let g = as2(args.grad);
                let a = as2(args.parents[0]);
                let b = as2(args.parents[1]);
                vec![
                    args.needs[0].then(|| g.dot(&b.t()).into_dyn()),
                    args.needs[1].then(|| a.t().dot(&g).into_dyn()),
                ]
            })),
            false,
        )
    }

    /// `x ([r, c]) + bias ([c])` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let bv = as1(&self.nodes[bias.0].value).to_owned();
        let value = (xv + &bv).into_dyn();
        self.push(
            value,
            vec![x.0, bias.0],
            Some(Box::new(|args| {
                let g = as2(args.grad);
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| g.sum_axis(Axis(0)).into_dyn()),
                ]
            })),
            false,
        )
    }

    /// Fully-connected layer: `x [r, in] * w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(&self.nodes[a.0].value);
        let mut value = x.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.unary(a, value.into_dyn(), |args| {
            let y = as2(args.out);
            let g = as2(args.grad);
            let mut out = Array2::zeros(y.raw_dim());
            for ((mut orow, yrow), grow) in out.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
            {
                let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                for ((o, &y), &g) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = y * (g - dot);
                }
            }
            out.into_dyn()
        })
    }

    // ---- convolutions ----

    /// 2-D convolution: `x [Cin, H, W]`, `w [Cout, Cin, k, k]`, `b [Cout]`,
    /// zero padding `pad`, stride `stride`. Output `[Cout, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let wv = &self.nodes[w.0].value;
        let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(wv.shape()[3], k, "square kernels only");
        assert_eq!(xv.shape()[0], cin, "conv2d channel mismatch");
        let (h, wd) = (xv.shape()[1], xv.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let cols = im2col(&xv.to_owned(), k, stride, pad, ho, wo);
        let wmat = wv.clone().into_shape((cout, cin * k * k)).unwrap();
        let mut y = wmat.dot(&cols); // [Cout, ho*wo]
        let bv = as1(&self.nodes[b.0].value);
        for (mut row, &bi) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bi);
        }
        let value = y.into_shape((cout, ho, wo)).unwrap().into_dyn();

        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |args| {
                let g = args
                    .grad
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned()
                    .into_shape((cout, ho * wo))
                    .unwrap();
                let wv = args.parents[1];
                let wmat = wv.clone().into_shape((cout, cin * k * k)).unwrap();
                let gx = args.needs[0].then(|| {
                    let gcols = wmat.t().dot(&g); // [cin*k*k, ho*wo]
                    col2im(&gcols, cin, h, wd, k, stride, pad, ho, wo).into_dyn()
                });
                let gw = args.needs[1].then(|| {
                    g.dot(&cols.t())
                        .into_shape((cout, cin, k, k))
                        .unwrap()
                        .into_dyn()
                });
                let gb = args.needs[2].then(|| g.sum_axis(Axis(1)).into_dyn());
                vec![gx, gw, gb]
            })),
            false,
        )
    }

    /// 1-D temporal convolution: `x [L, C]`, `w [Cout, Cin, k]`, `b [Cout]`,
    /// zero padding `pad`, stride `stride`. Output `[L', Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let wv = &self.nodes[w.0].value;
        let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(xv.ncols(), cin, "conv1d channel mismatch");
        let l = xv.nrows();
        let lo = (l + 2 * pad - k) / stride + 1;

        let cols = unfold1d(&xv, k, stride, pad, lo); // [cin*k, lo]
        let wmat = wv.clone().into_shape((cout, cin * k)).unwrap();
        let mut y = wmat.dot(&cols); // [cout, lo]
        let bv = as1(&self.nodes[b.0].value);
        for (mut row, &bi) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bi);
        }
        let value = y.t().to_owned().into_dyn(); // [lo, cout]

        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |args| {
                let g = as2(args.grad).t().to_owned(); // [cout, lo]
                let wv = args.parents[1];
                let wmat = wv.clone().into_shape((cout, cin * k)).unwrap();
                let gx = args.needs[0].then(|| {
                    let gcols = wmat.t().dot(&g); // [cin*k, lo]
                    fold1d(&gcols, cin, l, k, stride, pad, lo).into_dyn()
                });
                let gw = args.needs[1].then(|| {
                    g.dot(&cols.t()).into_shape((cout, cin, k)).unwrap().into_dyn()
                });
                let gb = args.needs[2].then(|| g.sum_axis(Axis(1)).into_dyn());
                vec![gx, gw, gb]
            })),
            false,
        )
    }

    /// Nearest-neighbour 2x temporal upsampling of `[L, C]` to `[2L, C]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = as2(&self.nodes[a.0].value);
        let (l, c) = (x.nrows(), x.ncols());
        let mut value = Array2::zeros((2 * l, c));
        for t in 0..l {
            value.row_mut(2 * t).assign(&x.row(t));
            value.row_mut(2 * t + 1).assign(&x.row(t));
        }
        self.unary(a, value.into_dyn(), |args| {
            let g = as2(args.grad);
            let l = g.nrows() / 2;
            let mut out = Array2::zeros((l, g.ncols()));
            for t in 0..l {
                let sum = &g.row(2 * t) + &g.row(2 * t + 1);
                out.row_mut(t).assign(&sum);
            }
            out.into_dyn()
        })
    }

    /// Mean over the spatial grid of `[C, H, W]`, producing `[C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let x = as3(&self.nodes[a.0].value);
        let n = (x.shape()[1] * x.shape()[2]) as f64;
        let value = x
            .to_owned()
            .into_shape((x.shape()[0], x.shape()[1] * x.shape()[2]))
            .unwrap()
            .mean_axis(Axis(1))
            .unwrap()
            .into_dyn();
        self.unary(a, value, move |args| {
            let g = as1(args.grad);
            let p = args.parents[0];
            let mut out = ArrayD::zeros(p.raw_dim());
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for (c, mut plane) in o3.outer_iter_mut().enumerate() {
                plane.fill(g[c] / n);
            }
            out
        })
    }
}

/// Row-major copy when the buffer is in any other memory order.
fn standardize(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-D")
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-D")
}

/// `[Cin, H, W] -> [Cin*k*k, ho*wo]` patch matrix.
fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::zeros((cin * k * k, ho * wo));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut gx = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[c, ii as usize, jj as usize]] += gcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    gx
}

/// `[L, C] -> [C*k, lo]` sliding-window matrix along time.
fn unfold1d(x: &Array2<f64>, k: usize, stride: usize, pad: usize, lo: usize) -> Array2<f64> {
    let (l, c) = x.dim();
    let mut cols = Array2::zeros((c * k, lo));
    for ch in 0..c {
        for ki in 0..k {
            let row = ch * k + ki;
            for ot in 0..lo {
                let tt = (ot * stride + ki) as isize - pad as isize;
                if tt < 0 || tt >= l as isize {
                    continue;
                }
                cols[[row, ot]] = x[[tt as usize, ch]];
            }
        }
    }
    cols
}

/// Adjoint of [`unfold1d`].
fn fold1d(
    gcols: &Array2<f64>,
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
) -> Array2<f64> {
    let mut gx = Array2::zeros((l, c));
    for ch in 0..c {
        for ki in 0..k {
            let row = ch * k + ki;
            for ot in 0..lo {
                let tt = (ot * stride + ki) as isize - pad as isize;
                if tt < 0 || tt >= l as isize {
                    continue;
                }
                gx[[tt as usize, ch]] += gcols[[row, ot]];
            }
        }
    }
    gx
}

/// Column-major helpers for building constant arrays.
pub fn arr1d(v: &[f64]) -> ArrayD<f64> {
    Array1::from_vec(v.to_vec()).into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use ndarray::{Array1, Array4};

    /// Central finite differences on a scalar function of one leaf.
    fn fd_check(
        build: impl Fn(&mut Graph, Var) -> Var,
        x0: ArrayD<f64>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(&g, x);

        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let loss = build(&mut g, x);
                g.scalar(loss)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        assert!(max_rel < tol, "max relative error {max_rel}");
    }

    fn rand_arr(rng: &mut DetRng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_normal()).collect();
        ArrayD::from_shape_vec(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = DetRng::new(11);
        let x0 = rand_arr(&mut rng, &[3, 4]);
        fd_check(
            |g, x| {
                let a = g.scale(x, 1.7);
                let b = g.add_scalar(a, 0.3);
                let c = g.mul(b, x);
                let d = g.relu(c);
                g.mean_all(d)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_linear_softmax() {
        let mut rng = DetRng::new(12);
        let x0 = rand_arr(&mut rng, &[5, 3]);
        let w0 = rand_arr(&mut rng, &[3, 4]);
        let b0 = rand_arr(&mut rng, &[4]);
        let t0 = rand_arr(&mut rng, &[5, 4]).mapv(f64::abs);
        fd_check(
            move |g, x| {
                let w = g.input(w0.clone());
                let b = g.input(b0.clone());
                let t = g.input(t0.clone());
                let y = g.linear(x, w, b);
                let p = g.softmax_rows(y);
                let lp = g.ln_clamped(p, 1e-12);
                let term = g.mul(t, lp);
                let s = g.sum_all(term);
                g.scale(s, -1.0)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d_wrt_weights_and_input() {
        let mut rng = DetRng::new(13);
        let x0 = rand_arr(&mut rng, &[2, 5, 5]);
        let w0 = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_arr(&mut rng, &[3]);
        // wrt weights
        let (xc, bc) = (x0.clone(), b0.clone());
        fd_check(
            move |g, w| {
                let x = g.input(xc.clone());
                let b = g.input(bc.clone());
                let y = g.conv2d(x, w, b, 2, 1);
                let r = g.relu(y);
                g.mean_all(r)
            },
            w0.clone(),
            1e-6,
        );
        // wrt input
        fd_check(
            move |g, x| {
                let w = g.param(w0.clone());
                let b = g.input(b0.clone());
                let y = g.conv2d(x, w, b, 2, 1);
                g.mean_all(y)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn grad_conv1d_and_upsample() {
        let mut rng = DetRng::new(14);
        let x0 = rand_arr(&mut rng, &[8, 3]);
        let w0 = rand_arr(&mut rng, &[3, 3, 3]);
        let b0 = rand_arr(&mut rng, &[3]);
        fd_check(
            move |g, x| {
                let w = g.input(w0.clone());
                let b = g.input(b0.clone());
                let y = g.conv1d(x, w, b, 2, 1); // stride 2 -> [4, 3]
                let u = g.upsample2(y); // [8, 3]
                let z = g.add(u, x);
                g.mean_all(z)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = DetRng::new(15);
        let x0 = rand_arr(&mut rng, &[4, 6]);
        fd_check(
            |g, x| {
                let t = g.transpose2(x);
                let sr = g.slice_rows(t, 2, 3);
                let s = g.slice_cols(sr, 1, 2);
                let parts = [s, s];
                let cc = g.concat_cols(&parts);
                let rr = g.concat_rows(&parts);
                let m1 = g.mean_all(cc);
                let m2 = g.mean_all(rr);
                let r0 = g.row(x, 2);
                let sr = g.stack_rows(&[r0, r0]);
                let m3 = g.mean_all(sr);
                let a = g.add(m1, m2);
                g.add(a, m3)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn grad_mean_spatial_and_pow() {
        let mut rng = DetRng::new(16);
        let x0 = rand_arr(&mut rng, &[3, 4, 4]).mapv(|v| v.abs() + 0.1);
        fd_check(
            |g, x| {
                let p = g.mean_spatial(x);
                let p2 = g.reshape(p, &[1, 3]);
                let q = g.pow_const(p2, 2.5);
                g.sum_all(q)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn pow_zero_is_constant_one() {
        let mut g = Graph::new();
        let x = g.param(arr1d(&[0.0, 0.5, 2.0]));
        let y = g.pow_const(x, 0.0);
        assert_eq!(g.value(y).as_slice().unwrap(), &[1.0, 1.0, 1.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, x).as_slice().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(arr1d(&[1.0, 2.0]));
        let w = g.param(arr1d(&[3.0, 4.0]));
        let y = g.mul(x, w);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, w).as_slice().unwrap(), &[1.0, 2.0]);
        // x is a constant; its slot stays empty and reads back as zeros
        assert_eq!(grads.get(&g, x).as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(arr1d(&[3.0]));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, x).as_slice().unwrap(), &[7.0]);
    }

    #[test]
    fn reshape_after_transpose_is_row_major() {
        // transposed values must reshape by logical (row-major) order, not
        // by whatever layout the intermediate buffer happens to have
        let mut rng = DetRng::new(21);
        let x = rand_arr(&mut rng, &[5, 3, 4]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let flat = g.reshape(xv, &[5, 12]);
        let tokens = g.transpose2(flat); // [12, 5]
        let back_t = g.transpose2(tokens);
        let back = g.reshape(back_t, &[5, 3, 4]);
        for (a, b) in g.value(back).iter().zip(x.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(g.value(tokens)[[2, 1]], x[[1, 0, 2]]);
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x3x3 input, 1 output channel, k=3, pad=1, stride=1: center output
        // equals the full dot product of kernel and image.
        let x = Array3::from_shape_vec(
            (1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Array4::from_shape_vec((1, 1, 3, 3), vec![0.5; 9]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.into_dyn());
        let wv = g.input(w.into_dyn());
        let bv = g.input(Array1::from_vec(vec![0.25]).into_dyn());
        let y = g.conv2d(xv, wv, bv, 1, 1);
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!((out[[0, 1, 1]] - (45.0 * 0.5 + 0.25)).abs() < 1e-12);
        // corner: only the 2x2 overlap contributes
        assert!((out[[0, 0, 0]] - ((1. + 2. + 4. + 5.) * 0.5 + 0.25)).abs() < 1e-12);
    }
}
