//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records eagerly evaluated operations; [`Tape::backward`] replays
//! them in reverse to accumulate gradients for every leaf marked trainable.
//! The op set is exactly what the models in this crate need: broadcasting
//! arithmetic, matmul, convolutions (direct and transposed), pooling, softmax,
//! reductions, indexing, and a column sort used by the sliced distance loss.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in f32
//! for training and in f64 for finite-difference gradient verification.

use crate::scalar::Scalar;
use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn};
use rayon::prelude::*;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sqrt(Var),
    /// `[.., m, k] x [k, n]` with the rhs shared across leading dims.
    MatMul(Var, Var),
    /// `[l.., m, k] x [l.., k, n]` with identical leading dims.
    BatchMatMul(Var, Var),
    SoftmaxLast(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Mean over `axes`, keeping reduced dims as size 1.
    MeanAxes(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    /// Select rows along axis 1 of a `[B, T, D]` array, per-sample indices.
    SelectRows(Var, Vec<Vec<usize>>),
    /// Per-column ascending sort of a 2-D array; permutation captured forward.
    SortCols(Var, Vec<Vec<usize>>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduce a gradient of `shape(grad)` back to `shape` by summing broadcast axes.
fn unbroadcast<S: Scalar>(grad: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if gd != sd {
            debug_assert_eq!(sd, 1);
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

fn bin_op<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>, f: impl Fn(S, S) -> S) -> ArrayD<S> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let three = S::lit(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// One sample's im2col: image `[C, H, W]` to columns `[C*k*k, OH*OW]`.
fn im2col_sample<S: Scalar>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let l = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * l;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        for oj in 0..ow {
                            out[base + oi * ow + oj] = S::zero();
                        }
                        continue;
                    }
                    let src = (ci * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        out[base + oi * ow + oj] = if jj < 0 || jj >= w as isize {
                            S::zero()
                        } else {
                            img[src + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_sample`]: scatter-add columns back into an image.
fn col2im_sample<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [S],
) {
    let l = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * l;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            img[dst + jj as usize] += cols[base + oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn gemm<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> ArrayD<S> {
    let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
    a2.dot(&b2).into_dyn()
}

fn gemm2<S: Scalar>(a: &ndarray::ArrayView2<S>, b: &ndarray::ArrayView2<S>) -> ndarray::Array2<S> {
    a.dot(b)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar node is empty")
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: ArrayD<S>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = bin_op(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = bin_op(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = bin_op(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = bin_op(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > S::zero() { x } else { S::zero() });
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Relu(a), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_forward);
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Gelu(a), g)
    }

    pub fn tanh_act(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Sqrt(a), g)
    }

    /// `[.., m, k] x [k, n]`; the leading dims of the lhs are flattened into
    /// one GEMM call.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.ndim(), 2, "matmul rhs must be 2-D");
        let k = bv.shape()[0];
        let n = bv.shape()[1];
        let a_shape = av.shape().to_vec();
        assert_eq!(*a_shape.last().unwrap(), k, "matmul inner dims");
        let rows: usize = a_shape[..a_shape.len() - 1].iter().product();
        let a2 = av
            .to_shape((rows, k))
            .expect("matmul lhs reshape")
            .to_owned()
            .into_dyn();
        let out2 = gemm(&a2, bv);
        let mut out_shape = a_shape[..a_shape.len() - 1].to_vec();
        out_shape.push(n);
        let v = out2.to_shape(IxDyn(&out_shape)).unwrap().to_owned();
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `[l.., m, k] x [l.., k, n]` with identical leading dims; per-slice GEMMs
    /// run in parallel over fixed-size chunks so results are deterministic.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (asp, bsp) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(asp.len() >= 2 && asp.len() == bsp.len());
        assert_eq!(&asp[..asp.len() - 2], &bsp[..bsp.len() - 2]);
        let (m, k) = (asp[asp.len() - 2], asp[asp.len() - 1]);
        let (k2, n) = (bsp[bsp.len() - 2], bsp[bsp.len() - 1]);
        assert_eq!(k, k2, "batch matmul inner dims");
        let l: usize = asp[..asp.len() - 2].iter().product();
        let a3 = av.to_shape((l, m, k)).unwrap().to_owned();
        let b3 = bv.to_shape((l, k, n)).unwrap().to_owned();
        let mut out = ndarray::Array3::<S>::zeros((l, m, n));
        let slices: Vec<_> = out.outer_iter_mut().collect();
        slices
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut o)| {
                let r = gemm2(&a3.index_axis(Axis(0), i), &b3.index_axis(Axis(0), i));
                o.assign(&r);
            });
        let mut out_shape = asp[..asp.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let v = out.into_dyn().to_shape(IxDyn(&out_shape)).unwrap().to_owned();
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::BatchMatMul(a, b), g)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut v = av.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let sum = row.iter().cloned().sum::<S>();
            row.mapv_inplace(|x| x / sum);
        }
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::SoftmaxLast(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: S = self.nodes[a.0].value.iter().cloned().sum();
        let g = self.nodes[a.0].needs_grad;
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].value.len();
        let s: S = self.nodes[a.0].value.iter().cloned().sum();
        let v = s / S::lit(len as f64);
        let g = self.nodes[a.0].needs_grad;
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::MeanAll(a), g)
    }

    /// Mean over the given axes, keeping them as size-1 dims.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            v = v.mean_axis(Axis(ax)).unwrap().insert_axis(Axis(ax));
        }
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::MeanAxes(a, sorted), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Reshape(a), g)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let g = self.nodes[a.0].needs_grad;
        self.push(v, Op::Permute(a, axes.to_vec()), g)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        let g = self.any_grad(parts);
        self.push(v, Op::Concat(parts.to_vec(), axis), g)
    }

    /// Gather rows along axis 1 of `[B, T, D]` with per-sample index lists
    /// (all the same length). Backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, indices: &[Vec<usize>]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 3, "select_rows expects [B, T, D]");
        let (b, _t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(indices.len(), b);
        let m = indices.first().map_or(0, |i| i.len());
        let mut out = ArrayD::zeros(IxDyn(&[b, m, d]));
        for (bi, idx) in indices.iter().enumerate() {
            assert_eq!(idx.len(), m, "ragged selection");
            for (mi, &ti) in idx.iter().enumerate() {
                for di in 0..d {
                    out[[bi, mi, di]] = av[[bi, ti, di]];
                }
            }
        }
        let g = self.nodes[a.0].needs_grad;
        self.push(out, Op::SelectRows(a, indices.to_vec()), g)
    }

    /// Ascending sort of each column of a 2-D array.
    pub fn sort_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 2, "sort_cols expects [n, p]");
        let (n, p) = (av.shape()[0], av.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[n, p]));
        let mut perms = Vec::with_capacity(p);
        for j in 0..p {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| {
                av[[x, j]].partial_cmp(&av[[y, j]]).expect("NaN in sort_cols")
            });
            for (i, &src) in order.iter().enumerate() {
                out[[i, j]] = av[[src, j]];
            }
            perms.push(order);
        }
        let g = self.nodes[a.0].needs_grad;
        self.push(out, Op::SortCols(a, perms), g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.ndim(), 4, "conv2d input [B, C, H, W]");
        assert_eq!(wv.ndim(), 4, "conv2d weight [OC, C, k, k]");
        let (batch, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oc, wc, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(k, wv.shape()[3], "conv2d square kernels only");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: oc,
            k,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let cols = self.im2col_batch(xv, &geom);
        let wmat = wv.to_shape((oc, c * k * k)).unwrap().to_owned().into_dyn();
        let out2 = gemm(&wmat, &cols.into_dyn()); // [OC, B*L]
        let l = oh * ow;
        let mut out = ArrayD::zeros(IxDyn(&[batch, oc, oh, ow]));
        {
            let o2 = out2.to_shape((oc, batch, l)).unwrap();
            let bias = b.map(|bv| self.nodes[bv.0].value.clone());
            let out_flat = out.as_slice_mut().unwrap();
            for bi in 0..batch {
                for oci in 0..oc {
                    let add = bias.as_ref().map_or(S::zero(), |bb| bb[[oci]]);
                    let dst = (bi * oc + oci) * l;
                    for li in 0..l {
                        out_flat[dst + li] = o2[[oci, bi, li]] + add;
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        if let Some(bv) = b {
            deps.push(bv);
        }
        let g = self.any_grad(&deps);
        self.push(out, Op::Conv2d { x, w, b, geom }, g)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.ndim(), 4, "conv_transpose2d input [B, C, H, W]");
        assert_eq!(wv.ndim(), 4, "conv_transpose2d weight [C, OC, k, k]");
        let (batch, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (wc, oc, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(c, wc, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        // Geometry of the adjoint convolution: its "image" is our output.
        let geom = ConvGeom {
            batch,
            in_ch: oc,
            in_h: oh,
            in_w: ow,
            out_ch: c,
            k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let l = h * wd;
        let x2 = xv.to_shape((batch, c, l)).unwrap();
        // [C, B*L]
        let mut x_all = ndarray::Array2::<S>::zeros((c, batch * l));
        for bi in 0..batch {
            for ci in 0..c {
                for li in 0..l {
                    x_all[[ci, bi * l + li]] = x2[[bi, ci, li]];
                }
            }
        }
        let wmat = wv.to_shape((c, oc * k * k)).unwrap().to_owned();
        let cols_all = gemm2(&wmat.t(), &x_all.view()); // [OC*k*k, B*L]
        let mut out = ArrayD::zeros(IxDyn(&[batch, oc, oh, ow]));
        {
            let out_flat = out.as_slice_mut().unwrap();
            let chunk = oc * oh * ow;
            let col_rows = oc * k * k;
            let mut sample_cols = vec![S::zero(); col_rows * l];
            for bi in 0..batch {
                for r in 0..col_rows {
                    for li in 0..l {
                        sample_cols[r * l + li] = cols_all[[r, bi * l + li]];
                    }
                }
                col2im_sample(
                    &sample_cols,
                    oc,
                    oh,
                    ow,
                    k,
                    stride,
                    pad,
                    h,
                    wd,
                    &mut out_flat[bi * chunk..(bi + 1) * chunk],
                );
            }
        }
        if let Some(bv) = b {
            let bias = &self.nodes[bv.0].value;
            for bi in 0..batch {
                for oci in 0..oc {
                    let add = bias[[oci]];
                    for hi in 0..oh {
                        for wi in 0..ow {
                            out[[bi, oci, hi, wi]] += add;
                        }
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        if let Some(bv) = b {
            deps.push(bv);
        }
        let g = self.any_grad(&deps);
        self.push(out, Op::ConvTranspose2d { x, w, b, geom }, g)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 4);
        let (batch, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[batch, c, oh, ow]));
        let mut argmax = vec![0usize; batch * c * oh * ow];
        let xs = xv.as_slice().unwrap();
        for bi in 0..batch {
            for ci in 0..c {
                let img = (bi * c + ci) * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..k {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let idx = img + ii as usize * w + jj as usize;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[[bi, ci, oi, oj]] = best;
                        argmax[((bi * c + ci) * oh + oi) * ow + oj] = best_idx;
                    }
                }
            }
        }
        let g = self.nodes[x.0].needs_grad;
        self.push(
            out,
            Op::MaxPool2d {
                x,
                argmax,
                in_shape: vec![batch, c, h, w],
            },
            g,
        )
    }

    fn im2col_batch(&self, xv: &ArrayD<S>, geom: &ConvGeom) -> ndarray::Array2<S> {
        let ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h,
            out_w,
            ..
        } = *geom;
        let l = out_h * out_w;
        let rows = in_ch * k * k;
        let xs = xv.as_slice().expect("contiguous conv input");
        let img_len = in_ch * in_h * in_w;
        // Per-sample buffers run in parallel; the copy into the shared matrix
        // is serial and ordered, so the result is deterministic.
        let mut cols = ndarray::Array2::<S>::zeros((rows, batch * l));
        {
            let cols_slice = cols.as_slice_mut().unwrap();
            let per_sample: Vec<Vec<S>> = (0..batch)
                .into_par_iter()
                .map(|bi| {
                    let mut buf = vec![S::zero(); rows * l];
                    im2col_sample(
                        &xs[bi * img_len..(bi + 1) * img_len],
                        in_ch,
                        in_h,
                        in_w,
                        k,
                        stride,
                        pad,
                        out_h,
                        out_w,
                        &mut buf,
                    );
                    buf
                })
                .collect();
            for (bi, buf) in per_sample.iter().enumerate() {
                for r in 0..rows {
                    let dst = r * batch * l + bi * l;
                    cols_slice[dst..dst + l].copy_from_slice(&buf[r * l..(r + 1) * l]);
                }
            }
        }
        cols
    }

    /// Accumulate gradients for `loss` (must be a scalar node). Returns one
    /// optional gradient per tape node; leaves you marked trainable are filled.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<S>>> {
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward seeds a scalar loss"
        );
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            S::one(),
        ));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.step_back(i, &g, &mut grads);
            // Leaves keep their gradient; interior nodes can drop it now,
            // except we already took it. Re-store for leaves.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<ArrayD<S>>], v: Var, g: ArrayD<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn step_back(&self, i: usize, g: &ArrayD<S>, grads: &mut Vec<Option<ArrayD<S>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = unbroadcast(g, self.nodes[a.0].value.shape());
                let gb = unbroadcast(g, self.nodes[b.0].value.shape());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = unbroadcast(g, self.nodes[a.0].value.shape());
                let gb = unbroadcast(&g.mapv(|x| -x), self.nodes[b.0].value.shape());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let ga = unbroadcast(&bin_op(g, bv, |x, y| x * y), av.shape());
                let gb = unbroadcast(&bin_op(g, av, |x, y| x * y), bv.shape());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let ga = unbroadcast(&bin_op(g, bv, |x, y| x / y), av.shape());
                let num = bin_op(g, av, |x, y| x * y);
                let gb_full = bin_op(&num, bv, |x, y| -x / (y * y));
                let gb = unbroadcast(&gb_full, bv.shape());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Neg(a) => self.accum(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.mapv(|x| x * c))
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                let ga = bin_op(g, av, |gx, x| if x > S::zero() { gx } else { S::zero() });
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                let ga = bin_op(g, av, |gx, x| gx * gelu_grad(x));
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[i].value;
                let ga = bin_op(g, yv, |gx, y| gx * (S::one() - y * y));
                self.accum(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let yv = &self.nodes[i].value;
                let half = S::lit(0.5);
                let ga = bin_op(g, yv, |gx, y| gx * half / y);
                self.accum(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let rows: usize = av.shape()[..av.ndim() - 1].iter().product();
                let g2 = g.to_shape((rows, n)).unwrap().to_owned();
                let a2 = av.to_shape((rows, k)).unwrap().to_owned();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                if self.nodes[a.0].needs_grad {
                    let da = gemm2(&g2.view(), &b2.t());
                    let da = da
                        .into_dyn()
                        .to_shape(self.nodes[a.0].value.raw_dim())
                        .unwrap()
                        .to_owned();
                    self.accum(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = gemm2(&a2.t(), &g2.view()).into_dyn();
                    self.accum(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let asp = av.shape().to_vec();
                let bsp = bv.shape().to_vec();
                let (m, k) = (asp[asp.len() - 2], asp[asp.len() - 1]);
                let n = bsp[bsp.len() - 1];
                let l: usize = asp[..asp.len() - 2].iter().product();
                let a3 = av.to_shape((l, m, k)).unwrap().to_owned();
                let b3 = bv.to_shape((l, k, n)).unwrap().to_owned();
                let g3 = g.to_shape((l, m, n)).unwrap().to_owned();
                if self.nodes[a.0].needs_grad {
                    let mut da = ndarray::Array3::<S>::zeros((l, m, k));
                    let slices: Vec<_> = da.outer_iter_mut().collect();
                    slices.into_par_iter().enumerate().for_each(|(li, mut o)| {
                        let r = gemm2(
                            &g3.index_axis(Axis(0), li),
                            &b3.index_axis(Axis(0), li).reversed_axes(),
                        );
                        o.assign(&r);
                    });
                    let da = da.into_dyn().to_shape(av.raw_dim()).unwrap().to_owned();
                    self.accum(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = ndarray::Array3::<S>::zeros((l, k, n));
                    let slices: Vec<_> = db.outer_iter_mut().collect();
                    slices.into_par_iter().enumerate().for_each(|(li, mut o)| {
                        let r = gemm2(
                            &a3.index_axis(Axis(0), li).reversed_axes(),
                            &g3.index_axis(Axis(0), li),
                        );
                        o.assign(&r);
                    });
                    let db = db.into_dyn().to_shape(bv.raw_dim()).unwrap().to_owned();
                    self.accum(grads, *b, db);
                }
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let mut dx = bin_op(g, y, |gx, yx| gx * yx);
                // subtract y * sum_last(g*y)
                let last = Axis(y.ndim() - 1);
                let s = dx.sum_axis(last).insert_axis(last);
                let sy = bin_op(&s, y, |sx, yx| sx * yx);
                dx = bin_op(&dx, &sy, |a, b| a - b);
                self.accum(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let gv = *g.iter().next().unwrap();
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                self.accum(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let len = self.nodes[a.0].value.len();
                let gv = *g.iter().next().unwrap() / S::lit(len as f64);
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                self.accum(grads, *a, ga);
            }
            Op::MeanAxes(a, axes) => {
                let in_shape = self.nodes[a.0].value.shape();
                let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
                let scale = S::one() / S::lit(count as f64);
                let gb = g
                    .broadcast(IxDyn(in_shape))
                    .unwrap()
                    .mapv(|x| x * scale);
                self.accum(grads, *a, gb);
            }
            Op::Reshape(a) => {
                let ga = g
                    .to_shape(self.nodes[a.0].value.raw_dim())
                    .unwrap()
                    .to_owned();
                self.accum(grads, *a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (dst, &src) in axes.iter().enumerate() {
                    inv[src] = dst;
                }
                let ga = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.accum(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0usize;
                for p in parts {
                    let d = self.nodes[p.0].value.shape()[*axis];
                    let gp = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + d))
                        .to_owned();
                    offset += d;
                    self.accum(grads, *p, gp);
                }
            }
            Op::SelectRows(a, indices) => {
                let mut ga = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                let d = ga.shape()[2];
                for (bi, idx) in indices.iter().enumerate() {
                    for (mi, &ti) in idx.iter().enumerate() {
                        for di in 0..d {
                            ga[[bi, ti, di]] += g[[bi, mi, di]];
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::SortCols(a, perms) => {
                let mut ga = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                for (j, perm) in perms.iter().enumerate() {
                    for (i_sorted, &src) in perm.iter().enumerate() {
                        ga[[src, j]] += g[[i_sorted, j]];
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (oc, ckk) = (geom.out_ch, geom.in_ch * geom.k * geom.k);
                let l = geom.out_h * geom.out_w;
                let batch = geom.batch;
                // dout as [OC, B*L]
                let mut g_all = ndarray::Array2::<S>::zeros((oc, batch * l));
                {
                    let g4 = g.to_shape((batch, oc, l)).unwrap();
                    for bi in 0..batch {
                        for oci in 0..oc {
                            for li in 0..l {
                                g_all[[oci, bi * l + li]] = g4[[bi, oci, li]];
                            }
                        }
                    }
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].needs_grad {
                        let db = g_all.sum_axis(Axis(1)).into_dyn();
                        self.accum(grads, *bv, db);
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let cols = self.im2col_batch(xv, geom); // [CKK, B*L]
                    let dw = gemm2(&g_all.view(), &cols.t());
                    let dw = dw.into_dyn().to_shape(wv.raw_dim()).unwrap().to_owned();
                    self.accum(grads, *w, dw);
                }
                if self.nodes[x.0].needs_grad {
                    let wmat = wv.to_shape((oc, ckk)).unwrap().to_owned();
                    let dcols = gemm2(&wmat.t(), &g_all.view()); // [CKK, B*L]
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    let img_len = geom.in_ch * geom.in_h * geom.in_w;
                    let dx_flat = dx.as_slice_mut().unwrap();
                    let mut sample = vec![S::zero(); ckk * l];
                    for bi in 0..batch {
                        for r in 0..ckk {
                            for li in 0..l {
                                sample[r * l + li] = dcols[[r, bi * l + li]];
                            }
                        }
                        col2im_sample(
                            &sample,
                            geom.in_ch,
                            geom.in_h,
                            geom.in_w,
                            geom.k,
                            geom.stride,
                            geom.pad,
                            geom.out_h,
                            geom.out_w,
                            &mut dx_flat[bi * img_len..(bi + 1) * img_len],
                        );
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // geom is the adjoint conv's geometry: image = our output.
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let c = geom.out_ch; // input channels of the transpose
                let oc = geom.in_ch; // output channels of the transpose
                let k = geom.k;
                let l = geom.out_h * geom.out_w; // input spatial size
                let batch = geom.batch;
                if let Some(bv) = b {
                    if self.nodes[bv.0].needs_grad {
                        let g4 = g.to_shape((batch, oc, geom.in_h * geom.in_w)).unwrap();
                        let mut db = ndarray::Array1::<S>::zeros(oc);
                        for bi in 0..batch {
                            for oci in 0..oc {
                                for li in 0..geom.in_h * geom.in_w {
                                    db[oci] += g4[[bi, oci, li]];
                                }
                            }
                        }
                        self.accum(grads, *bv, db.into_dyn());
                    }
                }
                // im2col over the upstream gradient (the transpose's output).
                let cols = self.im2col_batch(g, geom); // [OC*k*k, B*L]
                if self.nodes[x.0].needs_grad {
                    let wmat = wv.to_shape((c, oc * k * k)).unwrap().to_owned();
                    let dx_all = gemm2(&wmat.view(), &cols.view()); // [C, B*L]
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    for bi in 0..batch {
                        for ci in 0..c {
                            for li in 0..l {
                                dx[[bi, ci, li / geom.out_w, li % geom.out_w]] =
                                    dx_all[[ci, bi * l + li]];
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let x2 = xv.to_shape((batch, c, l)).unwrap();
                    let mut x_all = ndarray::Array2::<S>::zeros((c, batch * l));
                    for bi in 0..batch {
                        for ci in 0..c {
                            for li in 0..l {
                                x_all[[ci, bi * l + li]] = x2[[bi, ci, li]];
                            }
                        }
                    }
                    let dw = gemm2(&x_all.view(), &cols.t()); // [C, OC*k*k]
                    let dw = dw.into_dyn().to_shape(wv.raw_dim()).unwrap().to_owned();
                    self.accum(grads, *w, dw);
                }
            }
            Op::MaxPool2d {
                x,
                argmax,
                in_shape,
            } => {
                let mut dx = ArrayD::zeros(IxDyn(in_shape));
                {
                    let dx_flat = dx.as_slice_mut().unwrap();
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        dx_flat[src] += *gi;
                    }
                }
                self.accum(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::substream(seed, "ad-test");
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Finite-difference check of a scalar-valued graph wrt one leaf.
    fn check_grad(
        shape: &[usize],
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
        seed: u64,
    ) {
        let x0 = randn(shape, seed);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads[x.index()].clone().expect("leaf gradient");

        let mut rng = crate::rng::substream(seed, "ad-test-idx");
        let h = 1e-6;
        for _ in 0..6 {
            let flat = rng.gen_range(0..x0.len());
            let idx = flat_to_index(&x0, flat);
            let mut plus = x0.clone();
            plus[&idx[..]] += h;
            let mut minus = x0.clone();
            minus[&idx[..]] -= h;
            let fp = eval(&plus, &build);
            let fm = eval(&minus, &build);
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[&idx[..]];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "grad mismatch at {:?}: analytic {an}, fd {fd}",
                idx
            );
        }
    }

    fn flat_to_index(a: &ArrayD<f64>, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; a.ndim()];
        for ax in (0..a.ndim()).rev() {
            idx[ax] = flat % a.shape()[ax];
            flat /= a.shape()[ax];
        }
        idx
    }

    fn eval(x0: &ArrayD<f64>, build: &impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = build(&mut tape, x);
        tape.scalar_value(loss)
    }

    #[test]
    fn gradcheck_elementwise_chain() {
        check_grad(&[3, 4], |t, x| {
            let y = t.gelu(x);
            let z = t.tanh_act(y);
            let w = t.mul(z, z);
            t.mean_all(w)
        }, 11);
    }

    #[test]
    fn gradcheck_matmul_bias_softmax() {
        let w0 = randn(&[4, 5], 21);
        let b0 = randn(&[5], 22);
        check_grad(&[3, 4], move |t, x| {
            let w = t.leaf(w0.clone(), true);
            let b = t.leaf(b0.clone(), true);
            let y = t.matmul(x, w);
            let y = t.add(y, b);
            let s = t.softmax_last(y);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 23);
    }

    #[test]
    fn gradcheck_batch_matmul_permute() {
        let b0 = randn(&[2, 4, 3], 31);
        check_grad(&[2, 3, 4], move |t, x| {
            let b = t.leaf(b0.clone(), true);
            let y = t.batch_matmul(x, b); // [2,3,3]
            let p = t.permute(y, &[0, 2, 1]);
            let m = t.mul(p, p);
            t.mean_all(m)
        }, 32);
    }

    #[test]
    fn gradcheck_conv2d() {
        let w0 = randn(&[3, 2, 3, 3], 41);
        let b0 = randn(&[3], 42);
        check_grad(&[2, 2, 5, 5], move |t, x| {
            let w = t.leaf(w0.clone(), true);
            let b = t.leaf(b0.clone(), true);
            let y = t.conv2d(x, w, Some(b), 2, 1);
            let y = t.gelu(y);
            let m = t.mul(y, y);
            t.mean_all(m)
        }, 43);
    }

    #[test]
    fn gradcheck_conv2d_weight() {
        let x0 = randn(&[2, 2, 5, 5], 44);
        check_grad(&[3, 2, 3, 3], move |t, w| {
            let x = t.leaf(x0.clone(), true);
            let y = t.conv2d(x, w, None, 1, 1);
            let m = t.mul(y, y);
            t.mean_all(m)
        }, 45);
    }

    #[test]
    fn gradcheck_conv_transpose2d() {
        let w0 = randn(&[3, 2, 3, 3], 51);
        let b0 = randn(&[2], 52);
        check_grad(&[2, 3, 4, 4], move |t, x| {
            let w = t.leaf(w0.clone(), true);
            let b = t.leaf(b0.clone(), true);
            let y = t.conv_transpose2d(x, w, Some(b), 2, 1, 1);
            let m = t.mul(y, y);
            t.mean_all(m)
        }, 53);
    }

    #[test]
    fn gradcheck_conv_transpose2d_weight() {
        let x0 = randn(&[2, 3, 4, 4], 54);
        check_grad(&[3, 2, 3, 3], move |t, w| {
            let x = t.leaf(x0.clone(), true);
            let y = t.conv_transpose2d(x, w, None, 2, 1, 1);
            let m = t.mul(y, y);
            t.mean_all(m)
        }, 55);
    }

    #[test]
    fn conv_transpose_matches_adjoint_shape() {
        // (in-1)*s - 2p + k + op for in=5, s=2, p=1, k=3, op=1 -> 10
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[1, 2, 5, 5], 61));
        let w = tape.constant(randn(&[2, 4, 3, 3], 62));
        let y = tape.conv_transpose2d(x, w, None, 2, 1, 1);
        assert_eq!(tape.value(y).shape(), &[1, 4, 10, 10]);
    }

    #[test]
    fn gradcheck_maxpool() {
        check_grad(&[2, 2, 6, 6], |t, x| {
            let y = t.max_pool2d(x, 3, 2, 1);
            let m = t.mul(y, y);
            t.mean_all(m)
        }, 71);
    }

    #[test]
    fn gradcheck_select_sort_concat() {
        let idx = vec![vec![0, 2], vec![1, 3]];
        check_grad(&[2, 4, 3], move |t, x| {
            let s = t.select_rows(x, &idx);
            let r = t.reshape(s, &[4, 3]);
            let sorted = t.sort_cols(r);
            let c = t.concat(&[sorted, sorted], 1);
            let m = t.mul(c, c);
            t.mean_all(m)
        }, 81);
    }

    #[test]
    fn gradcheck_mean_axes_div_sqrt() {
        check_grad(&[2, 3, 4], |t, x| {
            let mu = t.mean_axes(x, &[2]);
            let xc = t.sub(x, mu);
            let var = {
                let sq = t.mul(xc, xc);
                t.mean_axes(sq, &[2])
            };
            let eps = t.scalar(1e-5);
            let ve = t.add(var, eps);
            let sd = t.sqrt(ve);
            let y = t.div(xc, sd);
            let m = t.mul(y, y);
            t.mean_all(m)
        }, 91);
    }

    #[test]
    fn sort_cols_sorts_and_routes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            ndarray::arr2(&[[3.0, 1.0], [1.0, 2.0], [2.0, 0.0]]).into_dyn(),
            true,
        );
        let s = tape.sort_cols(x);
        assert_eq!(
            tape.value(s).clone().into_raw_vec_and_offset().0,
            vec![1.0, 0.0, 2.0, 1.0, 3.0, 2.0]
        );
    }

    #[test]
    fn relu_zero_negative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(ndarray::arr1(&[-1.0, 0.0, 2.0]).into_dyn());
        let y = tape.relu(x);
        assert_eq!(
            tape.value(y).clone().into_raw_vec_and_offset().0,
            vec![0.0, 0.0, 2.0]
        );
    }
}
