//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! Every forward computation is recorded on a [`Tape`] as a linear list of
//! nodes. [`Tape::backward`] replays the list in reverse and accumulates
//! vector-Jacobian products. Nodes created with `needs_grad = false` (data,
//! frozen snapshots) never receive gradients and prune the backward pass.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    ClampMin(Var, f64),
    SafeSqrt(Var),
    Sum(Var),
    RowSum(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    SliceCols(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SqDist(Var, Var),
    MaskedLogSoftmax(Var, Array2<bool>),
    RowNormalize(Var),
    Conv3x3 { x: Var, w: Var, b: Var, cols: Array2<f64> },
    AvgPool2(Var),
    TemporalMean(Var, usize),
    FrameEncoder { x: Var, w: Var, b: Var, t: usize, active: Vec<bool> },
    GemParts { x: Var, alpha: Var, parts: usize, floor: f64 },
    PartsToEmbedding(Var, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or was created without gradient tracking.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 array")
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Columns of the 3x3, padding-1 patch matrix: `[cin*9, n*h*w]`.
fn pad_plane(plane: ndarray::ArrayView2<'_, f64>, padded: &mut [f64]) {
    let (h, w) = plane.dim();
    for (y, row) in plane.outer_iter().enumerate() {
        let dst = &mut padded[(y + 1) * (w + 2) + 1..][..w];
        for (d, v) in dst.iter_mut().zip(row.iter()) {
            *d = *v;
        }
    }
    debug_assert_eq!(padded.len(), (h + 2) * (w + 2));
}

/// Pre-activations of one 3x3 kernel over the top-left `rows x cols` window
/// of a zero-padded plane of original width `w`.
fn conv_plane(padded: &[f64], w: usize, k: &[f64], bias: f64, rows: usize, cols: usize, z: &mut [f64]) {
    let pw = w + 2;
    for y in 0..rows {
        let r0 = &padded[y * pw..];
        let r1 = &padded[(y + 1) * pw..];
        let r2 = &padded[(y + 2) * pw..];
        let zr = &mut z[y * cols..(y + 1) * cols];
        for (x, zv) in zr.iter_mut().enumerate() {
            *zv = bias
                + k[0] * r0[x] + k[1] * r0[x + 1] + k[2] * r0[x + 2]
                + k[3] * r1[x] + k[4] * r1[x + 1] + k[5] * r1[x + 2]
                + k[6] * r2[x] + k[7] * r2[x + 1] + k[8] * r2[x + 2];
        }
    }
}

fn im2col3(x: ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * 9, n * h * w));
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 3 + ky) * 3 + kx;
                let mut out = cols.row_mut(row);
                let out = out.as_slice_mut().expect("contiguous row");
                for b in 0..n {
                    let plane = x.slice(s![b, c, .., ..]);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let base = (b * h + y) * w;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = plane.row(sy as usize);
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                out[base + xx] = src[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(dcols: &Array2<f64>, n: usize, cin: usize, h: usize, w: usize) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros((n, cin, h, w));
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 3 + ky) * 3 + kx;
                let src = dcols.row(row);
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = (b * h + y) * w;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dx[[b, c, sy as usize, sx as usize]] += src[base + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[cout, n*h*w]` -> `[n, cout, h, w]`
fn channel_major_to_nchw(y: &Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let cout = y.nrows();
    let mut out = Array4::<f64>::zeros((n, cout, h, w));
    let hw = h * w;
    for o in 0..cout {
        let row = y.row(o);
        let row = row.as_slice().expect("contiguous row");
        for b in 0..n {
            let mut dst = out.slice_mut(s![b, o, .., ..]);
            let dst = dst.as_slice_mut().expect("contiguous plane");
            dst.copy_from_slice(&row[b * hw..(b + 1) * hw]);
        }
    }
    out
}

fn nchw_to_channel_major(g: ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, cout, h, w) = g.dim();
    let hw = h * w;
    let mut out = Array2::<f64>::zeros((cout, n * hw));
    for o in 0..cout {
        let mut row = out.row_mut(o);
        let row = row.as_slice_mut().expect("contiguous row");
        for b in 0..n {
            for (k, v) in g.slice(s![b, o, .., ..]).iter().enumerate() {
                row[b * hw + k] = *v;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-0 (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(scalar(x), false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// `ln(1 + e^x)`
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor));
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, floor), ng)
    }

    /// Elementwise square root of a non-negative input. The derivative at
    /// exactly zero is taken as zero (the subgradient of a norm at its kink).
    pub fn safe_sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0).sqrt());
        let ng = self.ng(a);
        self.push(v, Op::SafeSqrt(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a matrix: `[n, k] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).sum_axis(Axis(1)).into_dyn();
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)).t()).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    /// Adds a length-`k` vector to every row of an `[n, k]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).view().into_dimensionality::<Ix1>().expect("vector");
        let v = (&as2(self.value(a)) + &r).into_dyn();
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// The first `k` columns of a matrix.
    pub fn slice_cols(&mut self, a: Var, k: usize) -> Var {
        let v = as2(self.value(a)).slice(s![.., ..k]).to_owned().into_dyn();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a), ng)
    }

    /// Picks elements by flat (row-major) index into a 1-D vector.
    pub fn gather(&mut self, a: Var, flat: Vec<usize>) -> Var {
        let src = self.value(a);
        let data = src.as_slice().expect("standard layout");
        let v = Array1::from_iter(flat.iter().map(|&i| data[i])).into_dyn();
        let ng = self.ng(a);
        self.push(v, Op::Gather(a, flat), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Pairwise squared Euclidean distances: `[n, c] x [k, c] -> [n, k]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let mut out = Array2::<f64>::zeros((av.nrows(), bv.nrows()));
        for (i, ar) in av.outer_iter().enumerate() {
            for (j, br) in bv.outer_iter().enumerate() {
                out[[i, j]] = ar.iter().zip(br.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::SqDist(a, b), ng)
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Masked-out entries (and rows without any true entry) hold 0.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Array2<bool>) -> Var {
        let av = as2(self.value(a));
        assert_eq!(av.dim(), mask.dim(), "mask shape");
        let mut out = Array2::<f64>::zeros(av.dim());
        for (i, row) in av.outer_iter().enumerate() {
            let m = mask.row(i);
            let mx = row
                .iter()
                .zip(m.iter())
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                continue;
            }
            let lse = mx
                + row
                    .iter()
                    .zip(m.iter())
                    .filter(|(_, &k)| k)
                    .map(|(x, _)| (x - mx).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..row.len() {
                if m[j] {
                    out[[i, j]] = row[j] - lse;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out.into_dyn(), Op::MaskedLogSoftmax(a, mask), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let dim = as2(self.value(a)).dim();
        self.masked_log_softmax(a, Array2::from_elem(dim, true))
    }

    /// Scales every row to unit Euclidean norm (zero rows stay zero).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = as2(self.value(a)).to_owned();
        for mut row in v.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        let ng = self.ng(a);
        self.push(v.into_dyn(), Op::RowNormalize(a), ng)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x: [n, cin, h, w]`, `w: [cout, cin, 3, 3]`, `b: [cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, cin, h, wd) = xv.dim();
        let wv = as4(self.value(w));
        let cout = wv.dim().0;
        assert_eq!(wv.dim().1, cin, "conv input channels");
        let cols = im2col3(xv);
        let wm = wv
            .to_owned()
            .into_shape_with_order((cout, cin * 9))
            .expect("weight reshape");
        let mut y = wm.dot(&cols);
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias");
        for (o, mut row) in y.outer_iter_mut().enumerate() {
            row += bv[o];
        }
        let out = channel_major_to_nchw(&y, n, h, wd).into_dyn();
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv3x3 { x, w, b, cols }, ng)
    }

    /// 2x2 average pooling with stride 2 over the trailing two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        for b in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        out[[b, ch, y, xx]] = 0.25
                            * (xv[[b, ch, 2 * y, 2 * xx]]
                                + xv[[b, ch, 2 * y, 2 * xx + 1]]
                                + xv[[b, ch, 2 * y + 1, 2 * xx]]
                                + xv[[b, ch, 2 * y + 1, 2 * xx + 1]]);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::AvgPool2(x), ng)
    }

    /// Single-channel 3x3 convolution, ReLU, 2x2 average pooling, and a mean
    /// over groups of `t` frames, fused: `[s*t, 1, h, w] -> [s, c, h/2, w/2]`.
    /// Equal to the composed ops; the input must be a constant.
    pub fn frame_encoder(&mut self, x: Var, w: Var, b: Var, t: usize) -> Var {
        assert!(!self.ng(x), "fused encoder input must be constant");
        let xv = as4(self.value(x));
        let (st, cin, h, wd) = xv.dim();
        assert_eq!(cin, 1, "single input channel");
        assert!(t > 0 && st % t == 0, "temporal grouping");
        let wv = self.value(w).iter().copied().collect::<Vec<f64>>();
        let bv = self.value(b).iter().copied().collect::<Vec<f64>>();
        let cout = bv.len();
        assert_eq!(wv.len(), cout * 9, "weight shape");
        let (ho, wo) = (h / 2, wd / 2);
        let scale = 0.25 / t as f64;
        let mut out = Array4::<f64>::zeros((st / t, cout, ho, wo));
        let mut active = vec![false; st * cout * 4 * ho * wo];
        let mut padded = vec![0.0; (h + 2) * (wd + 2)];
        let mut z = vec![0.0; 4 * ho * wo];
        {
            let os = out.as_slice_mut().expect("contiguous");
            for n in 0..st {
                pad_plane(xv.slice(s![n, 0, .., ..]), &mut padded);
                for o in 0..cout {
                    conv_plane(&padded, wd, &wv[o * 9..o * 9 + 9], bv[o], 2 * ho, 2 * wo, &mut z);
                    let dst = &mut os[((n / t) * cout + o) * ho * wo..][..ho * wo];
                    let act = &mut active[(n * cout + o) * 4 * ho * wo..][..4 * ho * wo];
                    for y in 0..2 * ho {
                        for xx in 0..2 * wo {
                            let i = y * 2 * wo + xx;
                            if z[i] > 0.0 {
                                act[i] = true;
                                dst[(y / 2) * wo + xx / 2] += z[i] * scale;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(w) || self.ng(b);
        self.push(out.into_dyn(), Op::FrameEncoder { x, w, b, t, active }, ng)
    }

    /// Mean over groups of `t` consecutive leading entries:
    /// `[s*t, c, h, w] -> [s, c, h, w]`.
    pub fn temporal_mean(&mut self, x: Var, t: usize) -> Var {
        let xv = as4(self.value(x));
        let (st, c, h, w) = xv.dim();
        assert!(t > 0 && st % t == 0, "temporal grouping");
        let sn = st / t;
        let mut out = Array4::<f64>::zeros((sn, c, h, w));
        for si in 0..sn {
            let mut dst = out.slice_mut(s![si, .., .., ..]);
            for k in 0..t {
                dst += &xv.slice(s![si * t + k, .., .., ..]);
            }
            dst /= t as f64;
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::TemporalMean(x, t), ng)
    }

    /// Generalized-mean pooling of horizontal part strips.
    ///
    /// `x: [s, c, t, h, w]` with `h % parts == 0`; `alpha` is a rank-0 node.
    /// Output is `[(parts*s), c]` in part-major order (row `i*s + b` is part
    /// `i` of sample `b`). Inputs are clamped at `floor` before pooling.
    pub fn gem_parts(&mut self, x: Var, alpha: Var, parts: usize, floor: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix5>().expect("rank-5 feature map");
        let (sn, c, t, h, w) = xv.dim();
        assert!(parts > 0 && h % parts == 0, "height divisible by part count");
        let a = self.scalar(alpha);
        let ph = h / parts;
        let count = (t * ph * w) as f64;
        let mut out = Array2::<f64>::zeros((parts * sn, c));
        for i in 0..parts {
            let strip = xv.slice(s![.., .., .., i * ph..(i + 1) * ph, ..]);
            for b in 0..sn {
                for ch in 0..c {
                    let m: f64 = strip
                        .slice(s![b, ch, .., .., ..])
                        .iter()
                        .map(|v| v.max(floor).powf(a))
                        .sum::<f64>()
                        / count;
                    out[[i * sn + b, ch]] = m.powf(1.0 / a);
                }
            }
        }
        let ng = self.ng(x) || self.ng(alpha);
        self.push(out.into_dyn(), Op::GemParts { x, alpha, parts, floor }, ng)
    }

    /// `[(parts*s), c] -> [s, parts*c]`, concatenating a sample's parts in
    /// part order.
    pub fn parts_to_embedding(&mut self, f: Var, parts: usize) -> Var {
        let fv = as2(self.value(f));
        let (rows, c) = fv.dim();
        assert!(parts > 0 && rows % parts == 0, "rows divisible by part count");
        let sn = rows / parts;
        let mut out = Array2::<f64>::zeros((sn, parts * c));
        for i in 0..parts {
            for b in 0..sn {
                out.slice_mut(s![b, i * c..(i + 1) * c]).assign(&fv.row(i * sn + b));
            }
        }
        let ng = self.ng(f);
        self.push(out.into_dyn(), Op::PartsToEmbedding(f, parts), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &ArrayD<f64>, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= sigmoid(x));
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * out),
            Op::ClampMin(a, floor) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= *floor {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::SafeSqrt(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(out).for_each(|d, &y| {
                    *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 };
                });
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                self.acc(grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gv));
            }
            Op::RowSum(a) => {
                let (n, k) = as2(self.value(*a)).dim();
                let gv = g.view().into_dimensionality::<Ix1>().expect("vector");
                let d = Array2::from_shape_fn((n, k), |(i, _)| gv[i]);
                self.acc(grads, *a, d.into_dyn());
            }
            Op::MatMul(a, b) => {
                let gm = as2(g);
                if self.ng(*a) {
                    self.acc(grads, *a, gm.dot(&as2(self.value(*b)).t()).into_dyn());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, as2(self.value(*a)).t().dot(&gm).into_dyn());
                }
            }
            Op::MatMulT(a, b) => {
                let gm = as2(g);
                if self.ng(*a) {
                    self.acc(grads, *a, gm.dot(&as2(self.value(*b))).into_dyn());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gm.t().dot(&as2(self.value(*a))).into_dyn());
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, as2(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::SliceCols(a) => {
                let (n, full) = as2(self.value(*a)).dim();
                let gm = as2(g);
                let mut d = Array2::<f64>::zeros((n, full));
                d.slice_mut(s![.., ..gm.ncols()]).assign(&gm);
                self.acc(grads, *a, d.into_dyn());
            }
            Op::Gather(a, flat) => {
                let mut d = ArrayD::<f64>::zeros(self.value(*a).raw_dim());
                let ds = d.as_slice_mut().expect("standard layout");
                for (k, &i) in flat.iter().enumerate() {
                    ds[i] += g[[k]];
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .expect("reshape back");
                self.acc(grads, *a, d);
            }
            Op::SqDist(a, b) => {
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                let gm = as2(g);
                // d/da_i = 2 Σ_j g_ij (a_i - b_j); d/db_j = -2 Σ_i g_ij (a_i - b_j)
                let rs = gm.sum_axis(Axis(1));
                let cs = gm.sum_axis(Axis(0));
                if self.ng(*a) {
                    let mut da = gm.dot(&bv) * -2.0;
                    for (i, mut row) in da.outer_iter_mut().enumerate() {
                        row.scaled_add(2.0 * rs[i], &av.row(i));
                    }
                    self.acc(grads, *a, da.into_dyn());
                }
                if self.ng(*b) {
                    let mut db = gm.t().dot(&av) * -2.0;
                    for (j, mut row) in db.outer_iter_mut().enumerate() {
                        row.scaled_add(2.0 * cs[j], &bv.row(j));
                    }
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let ov = as2(out);
                let gm = as2(g);
                let mut d = Array2::<f64>::zeros(ov.dim());
                for i in 0..ov.nrows() {
                    let m = mask.row(i);
                    let gsum: f64 = (0..ov.ncols()).filter(|&j| m[j]).map(|j| gm[[i, j]]).sum();
                    for j in 0..ov.ncols() {
                        if m[j] {
                            d[[i, j]] = gm[[i, j]] - ov[[i, j]].exp() * gsum;
                        }
                    }
                }
                self.acc(grads, *a, d.into_dyn());
            }
            Op::RowNormalize(a) => {
                let av = as2(self.value(*a));
                let ov = as2(out);
                let gm = as2(g);
                let mut d = Array2::<f64>::zeros(av.dim());
                for i in 0..av.nrows() {
                    let n = av.row(i).dot(&av.row(i)).sqrt();
                    if n > 0.0 {
                        let proj = gm.row(i).dot(&ov.row(i));
                        let mut r = d.row_mut(i);
                        r.assign(&gm.row(i));
                        r.scaled_add(-proj, &ov.row(i));
                        r /= n;
                    }
                }
                self.acc(grads, *a, d.into_dyn());
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let gv = as4(g);
                let (n, cout, h, wd) = gv.dim();
                let gm = nchw_to_channel_major(gv);
                if self.ng(*b) {
                    self.acc(grads, *b, gm.sum_axis(Axis(1)).into_dyn());
                }
                let wshape = self.value(*w).raw_dim();
                if self.ng(*w) {
                    let dw = gm.dot(&cols.t());
                    self.acc(grads, *w, dw.into_shape_with_order(wshape.clone()).expect("weight grad").into_dyn());
                }
                if self.ng(*x) {
                    let cin = wshape[1];
                    let wm = as4(self.value(*w))
                        .to_owned()
                        .into_shape_with_order((cout, cin * 9))
                        .expect("weight reshape");
                    let dcols = wm.t().dot(&gm);
                    self.acc(grads, *x, col2im3(&dcols, n, cin, h, wd).into_dyn());
                }
            }
            Op::FrameEncoder { x, w, b, t, active } => {
                let xv = as4(self.value(*x));
                let (st, _, h, wd) = xv.dim();
                let gv = as4(g);
                let (_, cout, ho, wo) = gv.dim();
                let gs = gv.as_slice().expect("contiguous");
                let scale = 0.25 / *t as f64;
                let mut dw = vec![0.0; cout * 9];
                let mut db = vec![0.0; cout];
                let mut padded = vec![0.0; (h + 2) * (wd + 2)];
                let pw = wd + 2;
                for n in 0..st {
                    pad_plane(xv.slice(s![n, 0, .., ..]), &mut padded);
                    for o in 0..cout {
                        let act = &active[(n * cout + o) * 4 * ho * wo..][..4 * ho * wo];
                        let gsrc = &gs[((n / t) * cout + o) * ho * wo..][..ho * wo];
                        let k = &mut dw[o * 9..o * 9 + 9];
                        for y in 0..2 * ho {
                            for xx in 0..2 * wo {
                                if !act[y * 2 * wo + xx] {
                                    continue;
                                }
                                let gz = gsrc[(y / 2) * wo + xx / 2] * scale;
                                db[o] += gz;
                                for ky in 0..3 {
                                    let r = &padded[(y + ky) * pw + xx..][..3];
                                    k[ky * 3] += gz * r[0];
                                    k[ky * 3 + 1] += gz * r[1];
                                    k[ky * 3 + 2] += gz * r[2];
                                }
                            }
                        }
                    }
                }
                let wshape = self.value(*w).raw_dim();
                self.acc(grads, *w, ArrayD::from_shape_vec(wshape, dw).expect("weight grad"));
                self.acc(grads, *b, ArrayD::from_shape_vec(IxDyn(&[cout]), db).expect("bias grad"));
            }
            Op::AvgPool2(x) => {
                let gv = as4(g);
                let xs = self.value(*x).raw_dim();
                let mut d = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                let (n, c, ho, wo) = gv.dim();
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let q = 0.25 * gv[[b, ch, y, xx]];
                                d[[b, ch, 2 * y, 2 * xx]] += q;
                                d[[b, ch, 2 * y, 2 * xx + 1]] += q;
                                d[[b, ch, 2 * y + 1, 2 * xx]] += q;
                                d[[b, ch, 2 * y + 1, 2 * xx + 1]] += q;
                            }
                        }
                    }
                }
                self.acc(grads, *x, d.into_dyn());
            }
            Op::TemporalMean(x, t) => {
                let gv = as4(g);
                let (sn, c, h, w) = gv.dim();
                let mut d = Array4::<f64>::zeros((sn * t, c, h, w));
                for si in 0..sn {
                    let src = gv.slice(s![si, .., .., ..]);
                    for k in 0..*t {
                        d.slice_mut(s![si * t + k, .., .., ..]).assign(&(&src / *t as f64));
                    }
                }
                self.acc(grads, *x, d.into_dyn());
            }
            Op::GemParts { x, alpha, parts, floor } => {
                let xv = self.value(*x).view().into_dimensionality::<ndarray::Ix5>().expect("rank-5");
                let (sn, c, t, h, w) = xv.dim();
                let a = self.scalar(*alpha);
                let ov = as2(out);
                let gm = as2(g);
                let ph = h / parts;
                let count = (t * ph * w) as f64;
                let want_x = self.ng(*x);
                let mut dx = if want_x { Some(ndarray::Array5::<f64>::zeros(xv.raw_dim())) } else { None };
                let mut dalpha = 0.0;
                for i in 0..*parts {
                    for b in 0..sn {
                        for ch in 0..c {
                            let gy = gm[[i * sn + b, ch]];
                            if gy == 0.0 {
                                continue;
                            }
                            let y = ov[[i * sn + b, ch]];
                            let strip = xv.slice(s![b, ch, .., i * ph..(i + 1) * ph, ..]);
                            let m = y.powf(a);
                            // dy/dalpha = y (-ln M / a^2 + (1/a) (Σ x^a ln x / n) / M)
                            let dm: f64 = strip
                                .iter()
                                .map(|v| {
                                    let xc = v.max(*floor);
                                    xc.powf(a) * xc.ln()
                                })
                                .sum::<f64>()
                                / count;
                            dalpha += gy * y * (-m.ln() / (a * a) + dm / (a * m));
                            if let Some(dx) = dx.as_mut() {
                                // dy/dx = M^(1/a - 1) x^(a-1) / n
                                let coef = gy * y / m / count;
                                let mut dstrip = dx.slice_mut(s![b, ch, .., i * ph..(i + 1) * ph, ..]);
                                ndarray::Zip::from(&mut dstrip).and(&strip).for_each(|d, &v| {
                                    if v > *floor {
                                        *d += coef * v.powf(a - 1.0);
                                    }
                                });
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx.into_dyn());
                }
                self.acc(grads, *alpha, scalar(dalpha));
            }
            Op::PartsToEmbedding(f, parts) => {
                let gm = as2(g);
                let (sn, pc) = gm.dim();
                let c = pc / parts;
                let mut d = Array2::<f64>::zeros((parts * sn, c));
                for i in 0..*parts {
                    for b in 0..sn {
                        d.row_mut(i * sn + b).assign(&gm.slice(s![b, i * c..(i + 1) * c]));
                    }
                }
                self.acc(grads, *f, d.into_dyn());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every input's gradient against central differences of `f`.
    fn check<F>(inputs: Vec<ArrayD<f64>>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, a)| {
                            let mut a = a.clone();
                            if j == k {
                                a.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.leaf(a, true)
                        })
                        .collect();
                    let l = f(&mut t, &vs);
                    t.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "input {k} elem {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[4, 2], &mut rng);
        let c = rand_array(&[5, 4], &mut rng);
        check(vec![a, b, c], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let sp = t.softplus(ab);
            let ct = t.matmul_t(v[0], v[2]);
            let e = t.exp(ct);
            let s1 = t.sum(sp);
            let s2 = t.mean(e);
            let out = t.mul(s1, s2);
            t.scale(out, 0.7)
        });
    }

    #[test]
    fn distance_softmax_and_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_array(&[4, 3], &mut rng);
        let b = rand_array(&[5, 3], &mut rng);
        let w = rand_array(&[4, 5], &mut rng);
        check(vec![a, b, w], |t, v| {
            let d = t.sq_dist(v[0], v[1]);
            let mut mask = Array2::from_elem((4, 5), true);
            mask[[0, 1]] = false;
            mask[[2, 3]] = false;
            let neg = t.scale(d, -0.5);
            let ls = t.masked_log_softmax(neg, mask);
            let weighted = t.mul(ls, v[2]);
            let n = t.row_normalize(v[0]);
            let g = t.matmul_t(n, n);
            let s1 = t.sum(weighted);
            let s2 = t.sum(g);
            let sq = t.row_sum(d);
            let r = t.safe_sqrt(sq);
            let s3 = t.sum(r);
            let x = t.add(s1, s2);
            t.add(x, s3)
        });
    }

    #[test]
    fn gather_slice_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(&[3, 5], &mut rng);
        let r = rand_array(&[3], &mut rng);
        check(vec![a, r], |t, v| {
            let sl = t.slice_cols(v[0], 3);
            let ar = t.add_row(sl, v[1]);
            let rs = t.reshape(ar, &[9]);
            let gt = t.gather(rs, vec![0, 4, 4, 8]);
            let cl = t.clamp_min(gt, -0.2);
            let sp = t.softplus(cl);
            t.sum(sp)
        });
    }

    #[test]
    fn conv_pool_gem_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_array(&[4, 2, 4, 3], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        let alpha = ArrayD::from_elem(IxDyn(&[]), 2.5);
        check(vec![x, w, b, alpha], |t, v| {
            let y = t.conv3x3(v[0], v[1], v[2]);
            let y = t.softplus(y);
            let p = t.avg_pool2(y);
            let tm = t.temporal_mean(p, 2);
            let fm = t.reshape(tm, &[2, 3, 1, 2, 1]);
            let f = t.gem_parts(fm, v[3], 2, 1e-6);
            let e = t.parts_to_embedding(f, 2);
            let sq = t.mul(e, e);
            t.sum(sq)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array(&[2, 2, 5, 4], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3x3(xv, wv, bv);
        let yv = t.value(y);
        for n in 0..2 {
            for o in 0..3 {
                for i in 0..5 {
                    for j in 0..4 {
                        let mut acc = b[[o]];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                    if yy >= 0 && yy < 5 && xx >= 0 && xx < 4 {
                                        acc += w[[o, c, ky, kx]] * x[[n, c, yy as usize, xx as usize]];
                                    }
                                }
                            }
                        }
                        assert!((yv[[n, o, i, j]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_encoder_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // odd width exercises the dropped trailing column of the pooling
        let x = rand_array(&[6, 1, 6, 5], &mut rng).mapv(|v| (v > 0.0) as u8 as f64);
        let w = rand_array(&[4, 1, 3, 3], &mut rng);
        let b = rand_array(&[4], &mut rng).mapv(|v| 0.3 * v);
        let g = rand_array(&[2, 4, 3, 2], &mut rng);
        let run = |fused: bool| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.leaf(w.clone(), true);
            let bv = t.leaf(b.clone(), true);
            let y = if fused {
                t.frame_encoder(xv, wv, bv, 3)
            } else {
                let c = t.conv3x3(xv, wv, bv);
                let r = t.relu(c);
                let p = t.avg_pool2(r);
                t.temporal_mean(p, 3)
            };
            let gc = t.constant(g.clone());
            let prod = t.mul(y, gc);
            let loss = t.sum(prod);
            let grads = t.backward(loss);
            (t.value(y).clone(), grads.get(wv).unwrap().clone(), grads.get(bv).unwrap().clone())
        };
        let (yf, wf, bf) = run(true);
        let (yc, wc, bc) = run(false);
        for (a, b) in [(yf, yc), (wf, wc), (bf, bc)] {
            assert_eq!(a.shape(), b.shape());
            assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }
}
