//! Reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records an eagerly-evaluated computation graph. Values follow
//! three shape conventions:
//!
//! - activations: 3-D `[batch, rows, cols]`
//! - weight matrices: 2-D `[in, out]`, biases 1-D `[out]`
//! - losses: 0-D scalars
//!
//! Leaves are either parameters (tracked) or constants (never tracked), so a
//! forward pass evaluated through constant leaves is bit-identical to one
//! evaluated through parameter leaves: both run the exact same kernels in the
//! same order. Detaching a value is re-inserting it as a constant.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2, Ix3, IxDyn, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = mul * x + add, elementwise with scalar coefficients; only the
    /// multiplier is needed for the backward pass.
    Affine { x: NodeId, mul: f64 },
    /// [B,R,Ci] x [Ci,Co] -> [B,R,Co], one flattened GEMM.
    Linear { x: NodeId, w: NodeId },
    /// [B,R,C] + [C]
    AddBias { x: NodeId, b: NodeId },
    /// [B,R,C] + [R,C], broadcast over the batch axis.
    AddRows { x: NodeId, p: NodeId },
    /// Per-batch matmul with optional transposes of the 2-D operands.
    Bmm { a: NodeId, b: NodeId, ta: bool, tb: bool },
    /// [B,R,h*dh] -> [B*h,R,dh]
    SplitHeads { x: NodeId, heads: usize },
    /// [B*h,R,dh] -> [B,R,h*dh]
    MergeHeads { x: NodeId, heads: usize },
    /// Softmax over the last axis.
    SoftmaxLast { x: NodeId },
    /// Per-row layer norm over the last axis with learned gain/bias.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Silu(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    /// [B,R,C] -> [B,1,C]
    MeanRows(NodeId),
    /// [B,1,C] -> [B,R,C]
    BroadcastRows { x: NodeId },
    /// [B,R,C] -> [B,1,C] picking one row.
    SelectRow { x: NodeId, row: usize },
    /// [B,R,C] -> [B,len(blocks),C]; entry j = mean over rows in blocks[j].
    PoolRows { x: NodeId, blocks: Vec<(usize, usize)> },
    /// Concatenate along the last axis.
    ConcatLast(NodeId, NodeId),
    /// 0-D scalar broadcast to an arbitrary shape.
    BroadcastScalar { x: NodeId },
    /// Multiply every row of batch b by mask[b] (constant mask).
    ScaleBatch { x: NodeId, mask: Array1<f64> },
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires: bool,
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn view3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("expected 3-D value")
}

fn view2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected 2-D value")
}

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>, out: &mut ArrayViewMut2<f64>, beta: f64) {
    ndarray::linalg::general_mat_mul(1.0, &a, &b, beta, out);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Extract a 0-D node as a plain scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.ndim(), 0, "scalar() on non-scalar node");
        *v.first().expect("empty scalar node")
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Insert an untracked leaf.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a tracked leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Re-insert the value of `id` as a constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), req)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| mul * e + add);
        let req = self.requires(x);
        self.push(v, Op::Affine { x, mul }, req)
    }

    pub fn scale(&mut self, x: NodeId, mul: f64) -> NodeId {
        self.affine(x, mul, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = view3(self.value(x));
        let wv = view2(self.value(w));
        let (bsz, rows, cin) = xv.dim();
        debug_assert_eq!(cin, wv.nrows());
        let cout = wv.ncols();
        let x2 = xv.to_shape((bsz * rows, cin)).expect("linear: x not contiguous");
        let mut out = Array2::<f64>::zeros((bsz * rows, cout));
        matmul(x2.view(), wv, &mut out.view_mut(), 0.0);
        let v = out
            .into_shape_with_order((bsz, rows, cout))
            .expect("linear: reshape")
            .into_dyn();
        let req = self.requires(x) || self.requires(w);
        self.push(v, Op::Linear { x, w }, req)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = view3(self.value(x));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias must be 1-D");
        debug_assert_eq!(xv.dim().2, bv.len());
        let v = (&xv + &bv).into_dyn();
        let req = self.requires(x) || self.requires(b);
        self.push(v, Op::AddBias { x, b }, req)
    }

    /// Add a per-row table to every batch element.
    pub fn add_rows(&mut self, x: NodeId, p: NodeId) -> NodeId {
        let xv = view3(self.value(x));
        let pv = view2(self.value(p));
        debug_assert_eq!((xv.dim().1, xv.dim().2), pv.dim());
        let v = (&xv + &pv).into_dyn();
        let req = self.requires(x) || self.requires(p);
        self.push(v, Op::AddRows { x, p }, req)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = view3(self.value(a));
        let bv = view3(self.value(b));
        debug_assert_eq!(av.dim().0, bv.dim().0);
        let bsz = av.dim().0;
        let (m, ka) = if ta { (av.dim().2, av.dim().1) } else { (av.dim().1, av.dim().2) };
        let (kb, n) = if tb { (bv.dim().2, bv.dim().1) } else { (bv.dim().1, bv.dim().2) };
        debug_assert_eq!(ka, kb, "bmm inner dims");
        let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
        for i in 0..bsz {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let ai = if ta { ai.reversed_axes() } else { ai };
            let bi = if tb { bi.reversed_axes() } else { bi };
            let mut oi = out.index_axis_mut(Axis(0), i);
            matmul(ai, bi, &mut oi, 0.0);
        }
        let req = self.requires(a) || self.requires(b);
        self.push(out.into_dyn(), Op::Bmm { a, b, ta, tb }, req)
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = view3(self.value(x));
        let (bsz, rows, width) = xv.dim();
        debug_assert_eq!(width % heads, 0);
        let dh = width / heads;
        let mut out = ndarray::Array3::<f64>::zeros((bsz * heads, rows, dh));
        for bi in 0..bsz {
            for h in 0..heads {
                for r in 0..rows {
                    for c in 0..dh {
                        out[[bi * heads + h, r, c]] = xv[[bi, r, h * dh + c]];
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::SplitHeads { x, heads }, req)
    }

    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = view3(self.value(x));
        let (bh, rows, dh) = xv.dim();
        debug_assert_eq!(bh % heads, 0);
        let bsz = bh / heads;
        let mut out = ndarray::Array3::<f64>::zeros((bsz, rows, heads * dh));
        for bi in 0..bsz {
            for h in 0..heads {
                for r in 0..rows {
                    for c in 0..dh {
                        out[[bi, r, h * dh + c]] = xv[[bi * heads + h, r, c]];
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::MergeHeads { x, heads }, req)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        let last = v.ndim() - 1;
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        debug_assert!(last < usize::MAX);
        let req = self.requires(x);
        self.push(v, Op::SoftmaxLast { x }, req)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let xv = view3(self.value(x));
        let g = self.value(gain).view().into_dimensionality::<Ix1>().expect("gain 1-D");
        let b = self.value(bias).view().into_dimensionality::<Ix1>().expect("bias 1-D");
        let (bsz, rows, cols) = xv.dim();
        debug_assert_eq!(cols, g.len());
        let mut out = ndarray::Array3::<f64>::zeros((bsz, rows, cols));
        for bi in 0..bsz {
            for r in 0..rows {
                let row = xv.slice(ndarray::s![bi, r, ..]);
                let mu = row.mean().unwrap();
                let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / cols as f64;
                let s = (var + EPS).sqrt();
                for c in 0..cols {
                    out[[bi, r, c]] = g[c] * (row[c] - mu) / s + b[c];
                }
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(out.into_dyn(), Op::LayerNorm { x, gain, bias }, req)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e / (1.0 + (-e).exp()));
        let req = self.requires(x);
        self.push(v, Op::Silu(x), req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let req = self.requires(x);
        self.push(v, Op::Relu(x), req)
    }

    /// Numerically stable softplus: ln(1 + exp(x)).
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.max(0.0) + (-e.abs()).exp().ln_1p());
        let req = self.requires(x);
        self.push(v, Op::Softplus(x), req)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = view3(self.value(x));
        let (bsz, _rows, cols) = xv.dim();
        let mut out = ndarray::Array3::<f64>::zeros((bsz, 1, cols));
        for bi in 0..bsz {
            let m = xv.index_axis(Axis(0), bi).mean_axis(Axis(0)).unwrap();
            out.slice_mut(ndarray::s![bi, 0, ..]).assign(&m);
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::MeanRows(x), req)
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        let xv = view3(self.value(x));
        let (bsz, one, cols) = xv.dim();
        debug_assert_eq!(one, 1);
        let mut out = ndarray::Array3::<f64>::zeros((bsz, rows, cols));
        for bi in 0..bsz {
            for r in 0..rows {
                out.slice_mut(ndarray::s![bi, r, ..]).assign(&xv.slice(ndarray::s![bi, 0, ..]));
            }
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::BroadcastRows { x }, req)
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let xv = view3(self.value(x));
        let (bsz, rows, cols) = xv.dim();
        debug_assert!(row < rows);
        let mut out = ndarray::Array3::<f64>::zeros((bsz, 1, cols));
        for bi in 0..bsz {
            out.slice_mut(ndarray::s![bi, 0, ..]).assign(&xv.slice(ndarray::s![bi, row, ..]));
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::SelectRow { x, row }, req)
    }

    /// Mean-pool row ranges; `blocks` are half-open `[start, end)` ranges.
    pub fn pool_rows(&mut self, x: NodeId, blocks: Vec<(usize, usize)>) -> NodeId {
        let xv = view3(self.value(x));
        let (bsz, rows, cols) = xv.dim();
        let mut out = ndarray::Array3::<f64>::zeros((bsz, blocks.len(), cols));
        for (j, &(s, e)) in blocks.iter().enumerate() {
            debug_assert!(s < e && e <= rows);
            let len = (e - s) as f64;
            for bi in 0..bsz {
                for r in s..e {
                    for c in 0..cols {
                        out[[bi, j, c]] += xv[[bi, r, c]] / len;
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::PoolRows { x, blocks }, req)
    }

    /// Broadcast a 0-D node to `shape`.
    pub fn broadcast_scalar(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let s = self.scalar(x);
        let v = ArrayD::from_elem(IxDyn(shape), s);
        let req = self.requires(x);
        self.push(v, Op::BroadcastScalar { x }, req)
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = view3(self.value(a));
        let bv = view3(self.value(b));
        debug_assert_eq!(av.dim().0, bv.dim().0);
        debug_assert_eq!(av.dim().1, bv.dim().1);
        let v = ndarray::concatenate(Axis(2), &[av, bv]).expect("concat_last");
        let req = self.requires(a) || self.requires(b);
        self.push(v.into_dyn(), Op::ConcatLast(a, b), req)
    }

    /// Scale each batch element by a constant per-batch factor.
    pub fn scale_batch(&mut self, x: NodeId, mask: Array1<f64>) -> NodeId {
        let xv = view3(self.value(x));
        debug_assert_eq!(xv.dim().0, mask.len());
        let mut out = xv.to_owned();
        for (bi, &m) in mask.iter().enumerate() {
            out.index_axis_mut(Axis(0), bi).mapv_inplace(|e| e * m);
        }
        let req = self.requires(x);
        self.push(out.into_dyn(), Op::ScaleBatch { x, mask }, req)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let req = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x), req)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let req = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(x), req)
    }

    /// Backpropagate from a scalar root and return gradients for tracked nodes.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).ndim(), 0, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=root.0).rev() {
            if !self.requires(NodeId(id)) {
                grads[id] = None;
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.accumulate(NodeId(id), &dy, &mut grads);
            if !matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = None;
            } else {
                grads[id] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn add_to(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: NodeId, dy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_to(grads, *a, dy.clone());
                self.add_to(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.add_to(grads, *a, dy.clone());
                self.add_to(grads, *b, dy.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.add_to(grads, *a, dy * &self.nodes[b.0].value);
                }
                if self.requires(*b) {
                    self.add_to(grads, *b, dy * &self.nodes[a.0].value);
                }
            }
            Op::Affine { x, mul, .. } => {
                self.add_to(grads, *x, dy.mapv(|e| e * mul));
            }
            Op::Linear { x, w } => {
                let xv = view3(&self.nodes[x.0].value);
                let wv = view2(&self.nodes[w.0].value);
                let (bsz, rows, cin) = xv.dim();
                let cout = wv.ncols();
                let dy3 = view3(dy);
                let dy2 = dy3.to_shape((bsz * rows, cout)).expect("linear bw: dy");
                if self.requires(*x) {
                    let mut dx = Array2::<f64>::zeros((bsz * rows, cin));
                    matmul(dy2.view(), wv.t(), &mut dx.view_mut(), 0.0);
                    let dx = dx.into_shape_with_order((bsz, rows, cin)).unwrap().into_dyn();
                    self.add_to(grads, *x, dx);
                }
                if self.requires(*w) {
                    let x2 = xv.to_shape((bsz * rows, cin)).expect("linear bw: x");
                    let mut dw = Array2::<f64>::zeros((cin, cout));
                    matmul(x2.t(), dy2.view(), &mut dw.view_mut(), 0.0);
                    self.add_to(grads, *w, dw.into_dyn());
                }
            }
            Op::AddBias { x, b } => {
                self.add_to(grads, *x, dy.clone());
                if self.requires(*b) {
                    let dy3 = view3(dy);
                    let db = dy3.sum_axis(Axis(0)).sum_axis(Axis(0));
                    self.add_to(grads, *b, db.into_dyn());
                }
            }
            Op::AddRows { x, p } => {
                self.add_to(grads, *x, dy.clone());
                if self.requires(*p) {
                    let dy3 = view3(dy);
                    let dp = dy3.sum_axis(Axis(0));
                    self.add_to(grads, *p, dp.into_dyn());
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                // With A' = op_a(A), B' = op_b(B) and C = A'.B':
                //   dA' = dC.B'^T, dB' = A'^T.dC, transposed back where needed.
                let av = view3(&self.nodes[a.0].value);
                let bv = view3(&self.nodes[b.0].value);
                let dyv = view3(dy);
                let bsz = av.dim().0;
                if self.requires(*a) {
                    let mut da = ndarray::Array3::<f64>::zeros(av.dim());
                    for i in 0..bsz {
                        let dyi = dyv.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        let bi = if *tb { bi.reversed_axes() } else { bi };
                        let mut dai = da.index_axis_mut(Axis(0), i);
                        if *ta {
                            matmul(bi, dyi.reversed_axes(), &mut dai, 0.0);
                        } else {
                            matmul(dyi, bi.reversed_axes(), &mut dai, 0.0);
                        }
                    }
                    self.add_to(grads, *a, da.into_dyn());
                }
                if self.requires(*b) {
                    let mut db = ndarray::Array3::<f64>::zeros(bv.dim());
                    for i in 0..bsz {
                        let dyi = dyv.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let ai = if *ta { ai.reversed_axes() } else { ai };
                        let mut dbi = db.index_axis_mut(Axis(0), i);
                        if *tb {
                            matmul(dyi.reversed_axes(), ai, &mut dbi, 0.0);
                        } else {
                            matmul(ai.reversed_axes(), dyi, &mut dbi, 0.0);
                        }
                    }
                    self.add_to(grads, *b, db.into_dyn());
                }
            }
            Op::SplitHeads { x, heads } => {
                let dyv = view3(dy);
                let (bh, rows, dh) = dyv.dim();
                let bsz = bh / heads;
                let mut dx = ndarray::Array3::<f64>::zeros((bsz, rows, heads * dh));
                for bi in 0..bsz {
                    for h in 0..*heads {
                        for r in 0..rows {
                            for c in 0..dh {
                                dx[[bi, r, h * dh + c]] = dyv[[bi * heads + h, r, c]];
                            }
                        }
                    }
                }
                self.add_to(grads, *x, dx.into_dyn());
            }
            Op::MergeHeads { x, heads } => {
                let dyv = view3(dy);
                let (bsz, rows, width) = dyv.dim();
                let dh = width / heads;
                let mut dx = ndarray::Array3::<f64>::zeros((bsz * heads, rows, dh));
                for bi in 0..bsz {
                    for h in 0..*heads {
                        for r in 0..rows {
                            for c in 0..dh {
                                dx[[bi * heads + h, r, c]] = dyv[[bi, r, h * dh + c]];
                            }
                        }
                    }
                }
                self.add_to(grads, *x, dx.into_dyn());
            }
            Op::SoftmaxLast { x } => {
                let y = &self.nodes[id.0].value;
                let mut dx = dy.clone();
                // dx = y * (dy - sum(dy * y)) per row.
                let mut dxv = dx.view_mut();
                let yv = y.view();
                for (mut drow, yrow) in dxv.rows_mut().into_iter().zip(yv.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                }
                self.add_to(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                const EPS: f64 = 1e-5;
                let xv = view3(&self.nodes[x.0].value);
                let g = self.nodes[gain.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let dyv = view3(dy);
                let (bsz, rows, cols) = xv.dim();
                let n = cols as f64;
                let mut dx = ndarray::Array3::<f64>::zeros((bsz, rows, cols));
                let mut dg = Array1::<f64>::zeros(cols);
                let mut db = Array1::<f64>::zeros(cols);
                for bi in 0..bsz {
                    for r in 0..rows {
                        let row = xv.slice(ndarray::s![bi, r, ..]);
                        let dyr = dyv.slice(ndarray::s![bi, r, ..]);
                        let mu = row.mean().unwrap();
                        let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
                        let s = (var + EPS).sqrt();
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let xh = (row[c] - mu) / s;
                            let gd = g[c] * dyr[c];
                            m1 += gd;
                            m2 += gd * xh;
                            dg[c] += dyr[c] * xh;
                            db[c] += dyr[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let xh = (row[c] - mu) / s;
                            dx[[bi, r, c]] = (g[c] * dyr[c] - m1 - xh * m2) / s;
                        }
                    }
                }
                self.add_to(grads, *x, dx.into_dyn());
                if self.requires(*gain) {
                    self.add_to(grads, *gain, dg.into_dyn());
                }
                if self.requires(*bias) {
                    self.add_to(grads, *bias, db.into_dyn());
                }
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(xv).for_each(|d, &e| {
                    let sig = 1.0 / (1.0 + (-e).exp());
                    *d *= sig * (1.0 + e * (1.0 - sig));
                });
                self.add_to(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(xv).for_each(|d, &e| {
                    if e <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.add_to(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let xv = &self.nodes[x.0].value;
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(xv).for_each(|d, &e| *d *= 1.0 / (1.0 + (-e).exp()));
                self.add_to(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let xv = view3(&self.nodes[x.0].value);
                let (bsz, rows, cols) = xv.dim();
                let dyv = view3(dy);
                let mut dx = ndarray::Array3::<f64>::zeros((bsz, rows, cols));
                for bi in 0..bsz {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[[bi, r, c]] = dyv[[bi, 0, c]] / rows as f64;
                        }
                    }
                }
                self.add_to(grads, *x, dx.into_dyn());
            }
            Op::BroadcastRows { x } => {
                let dyv = view3(dy);
                let ds = dyv.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.add_to(grads, *x, ds.into_dyn());
            }
            Op::SelectRow { x, row } => {
                let xv = view3(&self.nodes[x.0].value);
                let dyv = view3(dy);
                let mut dx = ndarray::Array3::<f64>::zeros(xv.dim());
                for bi in 0..xv.dim().0 {
                    dx.slice_mut(ndarray::s![bi, *row, ..]).assign(&dyv.slice(ndarray::s![bi, 0, ..]));
                }
                self.add_to(grads, *x, dx.into_dyn());
            }
            Op::PoolRows { x, blocks } => {
                let xv = view3(&self.nodes[x.0].value);
                let dyv = view3(dy);
                let mut dx = ndarray::Array3::<f64>::zeros(xv.dim());
                for (j, &(s, e)) in blocks.iter().enumerate() {
                    let len = (e - s) as f64;
                    for bi in 0..xv.dim().0 {
                        for r in s..e {
                            for c in 0..xv.dim().2 {
                                dx[[bi, r, c]] += dyv[[bi, j, c]] / len;
                            }
                        }
                    }
                }
                self.add_to(grads, *x, dx.into_dyn());
            }
            Op::BroadcastScalar { x } => {
                let d = dy.sum();
                self.add_to(grads, *x, ArrayD::from_elem(IxDyn(&[]), d));
            }
            Op::ConcatLast(a, b) => {
                let ac = view3(&self.nodes[a.0].value).dim().2;
                let dyv = view3(dy);
                if self.requires(*a) {
                    let da = dyv.slice(ndarray::s![.., .., ..ac]).to_owned();
                    self.add_to(grads, *a, da.into_dyn());
                }
                if self.requires(*b) {
                    let db = dyv.slice(ndarray::s![.., .., ac..]).to_owned();
                    self.add_to(grads, *b, db.into_dyn());
                }
            }
            Op::ScaleBatch { x, mask } => {
                let dyv = view3(dy);
                let mut dx = dyv.to_owned();
                for (bi, &m) in mask.iter().enumerate() {
                    dx.index_axis_mut(Axis(0), bi).mapv_inplace(|e| e * m);
                }
                self.add_to(grads, *x, dx.into_dyn());
            }
            Op::SumAll(x) => {
                let d = dy.first().copied().unwrap_or(0.0);
                let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), d);
                self.add_to(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                let d = dy.first().copied().unwrap_or(0.0) / n;
                let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), d);
                self.add_to(grads, *x, dx);
            }
        }
    }
}
