//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A small define-by-run tape: every operation appends a node recording its
//! inputs and enough context to compute vector-Jacobian products. Values are
//! `f32` dynamic-dimensional arrays. The tape is rebuilt every forward pass,
//! which keeps control flow (random sampling, data-dependent branching)
//! trivially correct.

use ndarray::{ArrayD, IxDyn};

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug)]
enum Op {
    /// Leaf value (parameter or constant input).
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast-add a bias of shape `[c]` over axis 1 of a `[n, c, ...]` value.
    BiasAdd(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Ln(Var),
    /// Matrix product of `[m, k] x [k, n]`.
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var, Vec<usize>),
    /// im2col patch extraction for stride-`s` `k x k` convolution with
    /// symmetric zero padding `p`. Input `[n, c, h, w]`, output
    /// `[n * oh * ow, c * k * k]`.
    Im2Col {
        input: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbour 2x spatial upsample of `[n, c, h, w]`.
    Upsample2x(Var),
    /// 2x2 max-pool with stride 2 of `[n, c, h, w]`; `argmax` holds the flat
    /// input index chosen for every output element.
    MaxPool2x {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Concatenate along axis 1 (channels).
    ConcatC(Var, Var),
    /// Slice of axis-1 channels `[start, start + len)`.
    SliceC {
        input: Var,
        start: usize,
        len: usize,
    },
    /// Mean over all axes except axis 1: `[n, c, h, w] -> [c]` scaled per
    /// sample, used for global average pooling with `n == 1` folded in.
    GlobalAvgPool(Var),
    /// Straight-through estimator: forward is a constant (detached) value,
    /// backward routes the gradient through `soft` untouched.
    StraightThrough {
        soft: Var,
    },
    /// Row-wise softmax of `[n, k]`.
    SoftmaxRows(Var),
    /// Weighted sum of rows: `weights [n] x rows [n, d] -> [d]`.
    WeightedRowSum {
        weights: Var,
        rows: Var,
    },
    /// Elementwise reciprocal.
    Recip(Var),
    /// Elementwise `max(x, c)`; gradient is blocked where the clamp engages.
    ClampMin(Var, f32),
    /// Multiply a tensor elementwise by a scalar-valued variable.
    MulScalarVar {
        x: Var,
        s: Var,
    },
    /// Matrix transpose of a rank-2 tensor.
    Transpose2D(Var),
    /// Stack k same-shape rank-1 tensors into a `[k, d]` matrix.
    StackRows(Vec<Var>),
}

struct Node {
    op: Op,
    value: ArrayD<f32>,
}

/// Gradient tape. All tensors live here; [`Var`] indexes into it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of values recorded on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: ArrayD<f32>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var(id)
    }

    /// Record a leaf (input or parameter).
    pub fn leaf(&mut self, value: ArrayD<f32>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Read the forward value of `v`.
    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    /// Forward value as a scalar; panics if `v` is not a single element.
    pub fn scalar(&self, v: Var) -> f32 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on tensor of {} elements", val.len());
        val.iter().copied().next().unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), v)
    }

    /// Add a `[c]` bias over axis 1 of a `[n, c, ...]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let c = bv.len();
        assert!(xv.ndim() >= 2, "bias_add needs rank >= 2");
        assert_eq!(xv.shape()[1], c, "bias length must match channel axis");
        let mut out = xv.clone();
        let n = xv.shape()[0];
        let inner: usize = xv.shape()[2..].iter().product();
        {
            let flat = out
                .as_slice_mut()
                .expect("bias_add expects standard layout");
            let b = bv.as_slice().expect("bias expects standard layout");
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * inner;
                    let bij = b[ci];
                    for t in &mut flat[base..base + inner] {
                        *t += bij;
                    }
                }
            }
        }
        self.push(Op::BiasAdd(x, bias), out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(Op::Sigmoid(a), v)
    }

    /// Natural log. The caller is responsible for keeping inputs positive
    /// (e.g. via a clamp or an epsilon shift before taking the log).
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(Op::Ln(a), v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as_2d(&self.nodes[a.0].value);
        let bv = as_2d(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::Sum(a), ArrayD::from_elem(IxDyn(&[]), s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let val = &self.nodes[a.0].value;
        let m = val.sum() / val.len() as f32;
        self.push(Op::Mean(a), ArrayD::from_elem(IxDyn(&[]), m))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(Op::Reshape(a, old), v)
    }

    /// Extract convolution patches: `[n, c, h, w] -> [n * oh * ow, c * k * k]`.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let v = im2col_forward(&self.nodes[x.0].value, k, stride, pad);
        self.push(
            Op::Im2Col {
                input: x,
                k,
                stride,
                pad,
            },
            v,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        {
            let src = xv.as_slice().expect("upsample2x expects standard layout");
            let dst = out.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let sbase = nc * h * w;
                let dbase = nc * 4 * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let s = src[sbase + i * w + j];
                        let d0 = dbase + (2 * i) * 2 * w + 2 * j;
                        let d1 = dbase + (2 * i + 1) * 2 * w + 2 * j;
                        dst[d0] = s;
                        dst[d0 + 1] = s;
                        dst[d1] = s;
                        dst[d1 + 1] = s;
                    }
                }
            }
        }
        self.push(Op::Upsample2x(x), out)
    }

    /// 2x2 max-pool, stride 2. Requires even spatial dims.
    pub fn maxpool2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let src = xv.as_slice().expect("maxpool2x expects standard layout");
            let dst = out.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let sbase = nc * h * w;
                let dbase = nc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = sbase + (2 * i) * w + 2 * j;
                        let mut best = src[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = sbase + (2 * i + di) * w + (2 * j + dj);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                        dst[dbase + i * ow + j] = best;
                        argmax[dbase + i * ow + j] = best_idx;
                    }
                }
            }
        }
        self.push(Op::MaxPool2x { input: x, argmax }, out)
    }

    /// Concatenate two `[n, c, h, w]` tensors along channels.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, ca, h, w) = dims4(av);
        let (nb, cb, hb, wb) = dims4(bv);
        assert_eq!((n, h, w), (nb, hb, wb), "concat_c: spatial/batch mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[n, ca + cb, h, w]));
        {
            let sa = av.as_slice().unwrap();
            let sb = bv.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            let plane = h * w;
            for ni in 0..n {
                let dst_base = ni * (ca + cb) * plane;
                dst[dst_base..dst_base + ca * plane]
                    .copy_from_slice(&sa[ni * ca * plane..(ni + 1) * ca * plane]);
                dst[dst_base + ca * plane..dst_base + (ca + cb) * plane]
                    .copy_from_slice(&sb[ni * cb * plane..(ni + 1) * cb * plane]);
            }
        }
        self.push(Op::ConcatC(a, b), out)
    }

    /// Take channels `[start, start + len)` of a `[n, c, h, w]` tensor.
    pub fn slice_c(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        assert!(start + len <= c, "slice_c out of range");
        let mut out = ArrayD::zeros(IxDyn(&[n, len, h, w]));
        {
            let src = xv.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            let plane = h * w;
            for ni in 0..n {
                let sbase = (ni * c + start) * plane;
                let dbase = ni * len * plane;
                dst[dbase..dbase + len * plane]
                    .copy_from_slice(&src[sbase..sbase + len * plane]);
            }
        }
        self.push(Op::SliceC { input: x, start, len }, out)
    }

    /// Global average pool `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        {
            let src = xv.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            let plane = h * w;
            for nc in 0..n * c {
                let s: f32 = src[nc * plane..(nc + 1) * plane].iter().sum();
                dst[nc] = s / plane as f32;
            }
        }
        self.push(Op::GlobalAvgPool(x), out)
    }

    /// Straight-through combination: the forward value of `hard`, the
    /// backward behaviour of `soft`. The values must have identical shapes.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Var {
        assert_eq!(
            self.nodes[hard.0].value.shape(),
            self.nodes[soft.0].value.shape(),
            "straight_through operands must share a shape"
        );
        let v = self.nodes[hard.0].value.clone();
        self.push(Op::StraightThrough { soft }, v)
    }

    /// Row-wise softmax of a `[n, k]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = as_2d(&self.nodes[x.0].value);
        let (n, k) = (xv.nrows(), xv.ncols());
        let mut out = ndarray::Array2::<f32>::zeros((n, k));
        for i in 0..n {
            let row = xv.row(i);
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for j in 0..k {
                let e = (row[j] - m).exp();
                out[[i, j]] = e;
                denom += e;
            }
            for j in 0..k {
                out[[i, j]] /= denom;
            }
        }
        self.push(Op::SoftmaxRows(x), out.into_dyn())
    }

    /// `weights [n] x rows [n, d] -> [d]`: sum_i w_i * rows[i, :].
    pub fn weighted_row_sum(&mut self, weights: Var, rows: Var) -> Var {
        let wv = &self.nodes[weights.0].value;
        let rv = as_2d(&self.nodes[rows.0].value);
        assert_eq!(wv.len(), rv.nrows(), "weighted_row_sum: length mismatch");
        let w = wv.as_slice().unwrap();
        let mut out = ndarray::Array1::<f32>::zeros(rv.ncols());
        for i in 0..rv.nrows() {
            out.scaled_add(w[i], &rv.row(i));
        }
        self.push(Op::WeightedRowSum { weights, rows }, out.into_dyn())
    }

    /// Elementwise `1/x`. The caller keeps inputs away from zero.
    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// Elementwise `max(x, c)`. Gradient flows only where `x > c`, so this
    /// doubles as a safe floor before `ln`.
    pub fn clamp_min(&mut self, a: Var, c: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(Op::ClampMin(a, c), v)
    }

    /// Multiply `x` elementwise by the scalar variable `s` (a single-element
    /// tensor), keeping the gradient path through both operands.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.nodes[x.0].value.mapv(|e| e * sv);
        self.push(Op::MulScalarVar { x, s }, v)
    }

    /// Transpose of a `[m, n]` tensor.
    pub fn transpose2d(&mut self, a: Var) -> Var {
        let v = as_2d(&self.nodes[a.0].value)
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(Op::Transpose2D(a), v)
    }

    /// Stack rank-1 tensors of equal length into a `[k, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let d = self.nodes[rows[0].0].value.len();
        let mut out = ndarray::Array2::<f32>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let rv = &self.nodes[r.0].value;
            assert_eq!(rv.len(), d, "stack_rows: row {i} length mismatch");
            out.row_mut(i)
                .assign(&rv.view().into_shape_with_order(d).unwrap());
        }
        self.push(Op::StackRows(rows.to_vec()), out.into_dyn())
    }

    /// Reverse-mode sweep from scalar `root`. Returns a gradient per node id;
    /// entries not reachable from `root` are `None`.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<f32>>> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.nodes.len()];
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&root_shape), 1.0));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(&self, id: usize, g: &ArrayD<f32>, grads: &mut [Option<ArrayD<f32>>]) {
        let add_grad = |grads: &mut [Option<ArrayD<f32>>], v: Var, delta: ArrayD<f32>| {
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, g * &self.nodes[b.0].value);
                add_grad(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::BiasAdd(x, bias) => {
                add_grad(grads, *x, g.clone());
                let c = self.nodes[bias.0].value.len();
                let n = g.shape()[0];
                let inner: usize = g.shape()[2..].iter().product();
                let gs = g.as_slice().expect("grad expects standard layout");
                let mut gb = ndarray::Array1::<f32>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        gb[ci] += gs[base..base + inner].iter().sum::<f32>();
                    }
                }
                add_grad(grads, *bias, gb.into_dyn());
            }
            Op::Neg(a) => add_grad(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, s) => add_grad(grads, *a, g.mapv(|x| x * s)),
            Op::AddScalar(a) => add_grad(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_grad(grads, *a, g * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > 0.0 { 1.0 } else { s });
                add_grad(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let d = y.mapv(|s| s * (1.0 - s));
                add_grad(grads, *a, g * &d);
            }
            Op::Ln(a) => {
                let d = self.nodes[a.0].value.mapv(|x| 1.0 / x);
                add_grad(grads, *a, g * &d);
            }
            Op::MatMul(a, b) => {
                let g2 = as_2d(g);
                let av = as_2d(&self.nodes[a.0].value);
                let bv = as_2d(&self.nodes[b.0].value);
                add_grad(grads, *a, g2.dot(&bv.t()).into_dyn());
                add_grad(grads, *b, av.t().dot(&g2).into_dyn());
            }
            Op::Sum(a) => {
                let gs = g.iter().copied().next().unwrap();
                let shape = self.nodes[a.0].value.shape().to_vec();
                add_grad(grads, *a, ArrayD::from_elem(IxDyn(&shape), gs));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f32;
                let gs = g.iter().copied().next().unwrap() / n;
                let shape = self.nodes[a.0].value.shape().to_vec();
                add_grad(grads, *a, ArrayD::from_elem(IxDyn(&shape), gs));
            }
            Op::Reshape(a, old_shape) => {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(old_shape))
                    .expect("reshape backward");
                add_grad(grads, *a, back);
            }
            Op::Im2Col {
                input,
                k,
                stride,
                pad,
            } => {
                let gx = im2col_backward(
                    g,
                    self.nodes[input.0].value.shape(),
                    *k,
                    *stride,
                    *pad,
                );
                add_grad(grads, *input, gx);
            }
            Op::Upsample2x(x) => {
                let (n, c, h2, w2) = dims4(g);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                {
                    let src = g.as_slice().unwrap();
                    let dst = gx.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let dbase = nc * h * w;
                        let sbase = nc * h2 * w2;
                        for i in 0..h {
                            for j in 0..w {
                                let s0 = sbase + (2 * i) * w2 + 2 * j;
                                let s1 = sbase + (2 * i + 1) * w2 + 2 * j;
                                dst[dbase + i * w + j] =
                                    src[s0] + src[s0 + 1] + src[s1] + src[s1 + 1];
                            }
                        }
                    }
                }
                add_grad(grads, *x, gx);
            }
            Op::MaxPool2x { input, argmax } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                {
                    let src = g.as_slice().unwrap();
                    let dst = gx.as_slice_mut().unwrap();
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        dst[src_idx] += src[o];
                    }
                }
                add_grad(grads, *input, gx);
            }
            Op::ConcatC(a, b) => {
                let (n, c, h, w) = dims4(g);
                let ca = self.nodes[a.0].value.shape()[1];
                let cb = c - ca;
                let plane = h * w;
                let mut ga = ArrayD::zeros(IxDyn(&[n, ca, h, w]));
                let mut gb = ArrayD::zeros(IxDyn(&[n, cb, h, w]));
                {
                    let src = g.as_slice().unwrap();
                    let da = ga.as_slice_mut().unwrap();
                    let db = gb.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let sbase = ni * c * plane;
                        da[ni * ca * plane..(ni + 1) * ca * plane]
                            .copy_from_slice(&src[sbase..sbase + ca * plane]);
                        db[ni * cb * plane..(ni + 1) * cb * plane]
                            .copy_from_slice(&src[sbase + ca * plane..sbase + c * plane]);
                    }
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::SliceC { input, start, len } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                {
                    let src = g.as_slice().unwrap();
                    let dst = gx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let dbase = (ni * c + start) * plane;
                        let sbase = ni * len * plane;
                        dst[dbase..dbase + len * plane]
                            .copy_from_slice(&src[sbase..sbase + len * plane]);
                    }
                }
                add_grad(grads, *input, gx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                {
                    let src = g.as_slice().unwrap();
                    let dst = gx.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let gv = src[nc] / plane as f32;
                        for t in &mut dst[nc * plane..(nc + 1) * plane] {
                            *t = gv;
                        }
                    }
                }
                add_grad(grads, *x, gx);
            }
            Op::StraightThrough { soft, .. } => {
                add_grad(grads, *soft, g.clone());
            }
            Op::SoftmaxRows(x) => {
                let y = as_2d(&self.nodes[id].value);
                let g2 = as_2d(g);
                let (n, k) = (y.nrows(), y.ncols());
                let mut gx = ndarray::Array2::<f32>::zeros((n, k));
                for i in 0..n {
                    let dot: f32 = (0..k).map(|j| g2[[i, j]] * y[[i, j]]).sum();
                    for j in 0..k {
                        gx[[i, j]] = y[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                add_grad(grads, *x, gx.into_dyn());
            }
            Op::WeightedRowSum { weights, rows } => {
                let rv = as_2d(&self.nodes[rows.0].value);
                let wv = &self.nodes[weights.0].value;
                let gs = g.as_slice().unwrap();
                let n = rv.nrows();
                let mut gw = ndarray::Array1::<f32>::zeros(n);
                let mut gr = ndarray::Array2::<f32>::zeros((n, rv.ncols()));
                let w = wv.as_slice().unwrap();
                for i in 0..n {
                    let mut acc = 0.0f32;
                    for j in 0..rv.ncols() {
                        acc += gs[j] * rv[[i, j]];
                        gr[[i, j]] = w[i] * gs[j];
                    }
                    gw[i] = acc;
                }
                add_grad(grads, *weights, gw.into_dyn());
                add_grad(grads, *rows, gr.into_dyn());
            }
            Op::Recip(a) => {
                let y = &self.nodes[id].value; // 1/x
                let d = y.mapv(|r| -r * r);
                add_grad(grads, *a, g * &d);
            }
            Op::ClampMin(a, c) => {
                let cv = *c;
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > cv { 1.0 } else { 0.0 });
                add_grad(grads, *a, g * &mask);
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.nodes[s.0].value.iter().copied().next().unwrap();
                add_grad(grads, *x, g.mapv(|e| e * sv));
                let gs: f32 = g
                    .iter()
                    .zip(self.nodes[x.0].value.iter())
                    .map(|(ge, xe)| ge * xe)
                    .sum();
                let shape = self.nodes[s.0].value.shape().to_vec();
                add_grad(grads, *s, ArrayD::from_elem(IxDyn(&shape), gs));
            }
            Op::Transpose2D(a) => {
                let gt = as_2d(g).t().as_standard_layout().to_owned().into_dyn();
                add_grad(grads, *a, gt);
            }
            Op::StackRows(rows) => {
                let g2 = as_2d(g);
                for (i, r) in rows.iter().enumerate() {
                    let shape = self.nodes[r.0].value.shape().to_vec();
                    let gr = g2
                        .row(i)
                        .to_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap();
                    add_grad(grads, *r, gr);
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as_2d(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a rank-2 tensor")
}

fn dims4(a: &ArrayD<f32>) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected a rank-4 tensor, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

/// Output spatial size of a stride-`s`, pad-`p`, `k x k` convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col_forward(x: &ArrayD<f32>, k: usize, stride: usize, pad: usize) -> ArrayD<f32> {
    let (n, c, h, w) = dims4(x);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut out = ArrayD::zeros(IxDyn(&[n * oh * ow, c * k * k]));
    let src = x.as_slice().expect("im2col expects standard layout");
    let dst = out.as_slice_mut().unwrap();
    let row_len = c * k * k;
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (ni * oh + oi) * ow + oj;
                let rbase = row * row_len;
                for ci in 0..c {
                    let sbase = (ni * c + ci) * h * w;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let dbase = rbase + (ci * k + ki) * k;
                        if ii < 0 || ii >= h as isize {
                            continue; // zero padding row
                        }
                        let ii = ii as usize;
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dst[dbase + kj] = src[sbase + ii * w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn im2col_backward(
    g: &ArrayD<f32>,
    input_shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f32> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut gx = ArrayD::zeros(IxDyn(input_shape));
    let src = g.as_slice().expect("grad expects standard layout");
    let dst = gx.as_slice_mut().unwrap();
    let row_len = c * k * k;
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (ni * oh + oi) * ow + oj;
                let rbase = row * row_len;
                for ci in 0..c {
                    let dbase_plane = (ni * c + ci) * h * w;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let ii = ii as usize;
                        let sbase = rbase + (ci * k + ki) * k;
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dst[dbase_plane + ii * w + jj as usize] += src[sbase + kj];
                        }
                    }
                }
            }
        }
    }
    gx
}
