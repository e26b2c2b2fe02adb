//! Reverse-mode tape over jet-valued, batched nodes.
//!
//! Every node holds a `rows x cols` matrix of scalars. Nodes recorded with
//! spatial derivatives carry four planes (value, d/dx, d/dy, d/dz) laid out
//! plane-major in one arena, so a linear layer over all planes is a single
//! matrix product. The reverse pass propagates jet-valued adjoints: the
//! adjoint of a node's spatial plane is injected by `extract_spatial` and
//! flows back through the second-derivative terms of each operation, which
//! is what makes parameter gradients of spatial gradients (d²f/dθdx) exact.
//!
//! Node inputs always have smaller ids than their outputs, so one reverse
//! sweep in id order is a valid topological traversal. Two backward calls
//! on the same tape are bitwise identical: iteration and accumulation
//! order are fixed by construction.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::AdError;
use crate::jet::{sigmoid, softplus, Jet};
use crate::params::{ParamRef, ParameterStore};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub u32);

/// Snapshot of the tape length, used to truncate between steps.
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    nodes: usize,
    vals: usize,
}

/// Smooth elementwise maps with first and second derivatives.
#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Softplus { beta: f64 },
    Sigmoid,
    Exp,
    Sqrt,
    Abs,
    Square,
    Recip,
    MaxConst { k: f64 },
}

impl Unary {
    /// Returns (g(v), g'(v), g''(v)).
    #[inline]
    fn eval(self, v: f64) -> (f64, f64, f64) {
        match self {
            Unary::Softplus { beta } => {
                // saturated tails are exact at f64 precision
                let bx = beta * v;
                if bx > 40.0 {
                    (v, 1.0, 0.0)
                } else if bx < -40.0 {
                    (0.0, 0.0, 0.0)
                } else {
                    let s = sigmoid(bx);
                    (softplus(v, beta), s, beta * s * (1.0 - s))
                }
            }
            Unary::Sigmoid => {
                let s = sigmoid(v);
                let sp = s * (1.0 - s);
                (s, sp, sp * (1.0 - 2.0 * s))
            }
            Unary::Exp => {
                let e = v.exp();
                (e, e, e)
            }
            Unary::Sqrt => {
                let r = v.sqrt();
                (r, 0.5 / r, -0.25 / (r * r * r))
            }
            Unary::Abs => (v.abs(), if v >= 0.0 { 1.0 } else { -1.0 }, 0.0),
            Unary::Square => (v * v, 2.0 * v, 2.0),
            Unary::Recip => {
                let r = 1.0 / v;
                (r, -r * r, 2.0 * r * r * r)
            }
            Unary::MaxConst { k } => {
                if v >= k {
                    (v, 1.0, 0.0)
                } else {
                    (k, 0.0, 0.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf with externally supplied values.
    Constant,
    /// Leaf view of a parameter block, flattened to one row.
    ParamVec { r: ParamRef },
    /// Copy values of an `R x 3` node and seed identity spatial derivatives.
    SeedSpatial { x: NodeId },
    /// `y = x W (+ b)`, applied independently per plane; `W` is `(in, out)`.
    Linear {
        w: ParamRef,
        b: Option<ParamRef>,
        x: NodeId,
    },
    Pointwise { kind: Unary, x: NodeId },
    Scale { x: NodeId, k: f64 },
    AddConst { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// Elementwise product with a broadcast `1 x 1` scalar node.
    MulScalar { a: NodeId, s: NodeId },
    /// Scale row `r` of `a` by element `r` of the `R x 1` node `s`.
    RowScale { a: NodeId, s: NodeId },
    /// Sinusoidal positional encoding of an `R x 3` node.
    PosEncode {
        x: NodeId,
        freqs: usize,
        include_input: bool,
    },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Spatial planes of an `R x 1` jet node as an `R x 3` value node.
    ExtractSpatial { x: NodeId },
    SumAll { x: NodeId },
    DotRows { a: NodeId, b: NodeId },
    /// Discrete opacity from consecutive SDF samples and sharpness `s`.
    AlphaFromSdf { f: NodeId, s: NodeId, eps: f64 },
    /// Front-to-back compositing weights `w_i = alpha_i prod_{j<i}(1-alpha_j)`.
    CompositeWeights { alpha: NodeId },
    /// `out_c = sum_i w_i v_{i,c}`.
    WeightedSum { w: NodeId, v: NodeId },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    spatial: bool,
    off: usize,
    requires_grad: bool,
}

impl Node {
    #[inline]
    fn planes(&self) -> usize {
        if self.spatial {
            4
        } else {
            1
        }
    }

    #[inline]
    fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    fn total_len(&self) -> usize {
        self.planes() * self.plane_len()
    }
}

/// Append-only recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    /// Reused adjoint arena; cleared at the start of every reverse pass.
    adj_scratch: Vec<f64>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            vals: self.vals.len(),
        }
    }

    /// Drop everything recorded after `mark`.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.vals.truncate(mark.vals);
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn is_spatial(&self, id: NodeId) -> bool {
        self.node(id).spatial
    }

    /// Value plane of a node, row-major.
    pub fn values(&self, id: NodeId) -> &[f64] {
        let n = self.node(id);
        &self.vals[n.off..n.off + n.plane_len()]
    }

    /// Scalar convenience accessor for `1 x 1` nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = self.node(id);
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar node");
        self.vals[n.off]
    }

    /// Full jet of one element.
    pub fn jet_at(&self, id: NodeId, row: usize, col: usize) -> Jet {
        let n = self.node(id);
        assert!(row < n.rows && col < n.cols);
        let pl = n.plane_len();
        let base = n.off + row * n.cols + col;
        let mut j = Jet::constant(self.vals[base]);
        if n.spatial {
            for p in 0..3 {
                j.d[p] = self.vals[base + (p + 1) * pl];
            }
        }
        j
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, spatial: bool, rg: bool) -> NodeId {
        let off = self.vals.len();
        let node = Node {
            op,
            rows,
            cols,
            spatial,
            off,
            requires_grad: rg,
        };
        self.vals.resize(off + node.total_len(), 0.0);
        self.nodes.push(node);
        NodeId(self.nodes.len() as u32 - 1)
    }

    #[inline]
    fn rg(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    // ----- leaves -------------------------------------------------------

    /// Constant `rows x cols` values (no spatial derivative, no gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        assert_eq!(data.len(), rows * cols);
        let id = self.push(Op::Constant, rows, cols, false, false);
        let n = &self.nodes[id.0 as usize];
        self.vals[n.off..n.off + data.len()].copy_from_slice(data);
        id
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, &[v])
    }

    /// A parameter block as a node of the block's declared shape.
    pub fn param_vector(&mut self, params: &ParameterStore, r: ParamRef) -> NodeId {
        let id = self.push(Op::ParamVec { r }, r.rows, r.cols, false, true);
        let n = &self.nodes[id.0 as usize];
        let off = n.off;
        self.vals[off..off + r.len()].copy_from_slice(params.slice(r));
        id
    }

    // ----- structure ----------------------------------------------------

    /// Seed identity spatial derivatives on an `R x 3` point batch.
    pub fn seed_spatial(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, 3, "seed_spatial expects R x 3 points");
        let rg = self.rg(x);
        let id = self.push(Op::SeedSpatial { x }, rows, 3, true, rg);
        let (xn, on) = (self.node(x).off, self.node(id).off);
        let pl = rows * 3;
        for i in 0..pl {
            self.vals[on + i] = self.vals[xn + i];
        }
        for r in 0..rows {
            for p in 0..3 {
                self.vals[on + (p + 1) * pl + r * 3 + p] = 1.0;
            }
        }
        id
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let spatial = parts.iter().any(|&p| self.is_spatial(p));
        let rg = parts.iter().any(|&p| self.rg(p));
        let id = self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rows,
            cols,
            spatial,
            rg,
        );
        let on = self.node(id).off;
        let opl = rows * cols;
        let planes = if spatial { 4 } else { 1 };
        let mut c0 = 0usize;
        for &pid in parts {
            let pn = self.node(pid).clone();
            assert_eq!(pn.rows, rows, "concat_cols: row mismatch");
            for p in 0..planes.min(pn.planes()) {
                for r in 0..rows {
                    let src = pn.off + p * pn.plane_len() + r * pn.cols;
                    let dst = on + p * opl + r * cols + c0;
                    let (s, d) = (src, dst);
                    for c in 0..pn.cols {
                        self.vals[d + c] = self.vals[s + c];
                    }
                }
            }
            c0 += pn.cols;
        }
        id
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let spatial = parts.iter().any(|&p| self.is_spatial(p));
        let rg = parts.iter().any(|&p| self.rg(p));
        let id = self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rows,
            cols,
            spatial,
            rg,
        );
        let on = self.node(id).off;
        let opl = rows * cols;
        let planes = if spatial { 4 } else { 1 };
        let mut r0 = 0usize;
        for &pid in parts {
            let pn = self.node(pid).clone();
            assert_eq!(pn.cols, cols, "concat_rows: col mismatch");
            for p in 0..planes.min(pn.planes()) {
                let src = pn.off + p * pn.plane_len();
                let dst = on + p * opl + r0 * cols;
                for i in 0..pn.plane_len() {
                    self.vals[dst + i] = self.vals[src + i];
                }
            }
            r0 += pn.rows;
        }
        id
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xn = self.node(x).clone();
        assert!(start + len <= xn.rows, "slice_rows out of range");
        let rg = xn.requires_grad;
        let id = self.push(Op::SliceRows { x, start }, len, xn.cols, xn.spatial, rg);
        let on = self.node(id).off;
        let opl = len * xn.cols;
        for p in 0..xn.planes() {
            let src = xn.off + p * xn.plane_len() + start * xn.cols;
            let dst = on + p * opl;
            for i in 0..opl {
                self.vals[dst + i] = self.vals[src + i];
            }
        }
        id
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xn = self.node(x).clone();
        assert!(start + len <= xn.cols, "slice_cols out of range");
        let rg = xn.requires_grad;
        let id = self.push(Op::SliceCols { x, start }, xn.rows, len, xn.spatial, rg);
        let on = self.node(id).off;
        let opl = xn.rows * len;
        for p in 0..xn.planes() {
            for r in 0..xn.rows {
                let src = xn.off + p * xn.plane_len() + r * xn.cols + start;
                let dst = on + p * opl + r * len;
                for c in 0..len {
                    self.vals[dst + c] = self.vals[src + c];
                }
            }
        }
        id
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xn = self.node(x).clone();
        for &i in idx {
            assert!(i < xn.rows, "gather_rows index out of range");
        }
        let rg = xn.requires_grad;
        let id = self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            idx.len(),
            xn.cols,
            xn.spatial,
            rg,
        );
        let on = self.node(id).off;
        let opl = idx.len() * xn.cols;
        for p in 0..xn.planes() {
            for (r, &i) in idx.iter().enumerate() {
                let src = xn.off + p * xn.plane_len() + i * xn.cols;
                let dst = on + p * opl + r * xn.cols;
                for c in 0..xn.cols {
                    self.vals[dst + c] = self.vals[src + c];
                }
            }
        }
        id
    }

    /// Spatial gradient of an `R x 1` jet node as `R x 3` values.
    pub fn extract_spatial(&mut self, x: NodeId) -> NodeId {
        let xn = self.node(x).clone();
        assert_eq!(xn.cols, 1, "extract_spatial expects R x 1");
        assert!(xn.spatial, "extract_spatial expects a jet node");
        let rg = xn.requires_grad;
        let id = self.push(Op::ExtractSpatial { x }, xn.rows, 3, false, rg);
        let on = self.node(id).off;
        for r in 0..xn.rows {
            for p in 0..3 {
                self.vals[on + r * 3 + p] = self.vals[xn.off + (p + 1) * xn.plane_len() + r];
            }
        }
        id
    }

    // ----- arithmetic ----------------------------------------------------

    /// `y = x W (+ b)` over all planes. `spatial_out` controls whether the
    /// result keeps spatial planes; a value-only result of a jet input is
    /// exact when no downstream consumer reads the dropped planes.
    pub fn linear(
        &mut self,
        params: &ParameterStore,
        w: ParamRef,
        b: Option<ParamRef>,
        x: NodeId,
        spatial_out: bool,
    ) -> NodeId {
        let xn = self.node(x).clone();
        assert_eq!(xn.cols, w.rows, "linear: input width mismatch");
        if let Some(b) = b {
            assert_eq!(b.len(), w.cols, "linear: bias length mismatch");
        }
        let id = self.push(Op::Linear { w, b, x }, xn.rows, w.cols, spatial_out, true);
        let on = self.node(id).off;
        let o_planes = if spatial_out { 4 } else { 1 };
        let common = o_planes.min(xn.planes());
        let opl = xn.rows * w.cols;
        {
            let wv = view(params.values(), w.offset, w.rows, w.cols);
            let (head, tail) = self.vals.split_at_mut(on);
            let xs = &head[xn.off..xn.off + common * xn.plane_len()];
            let xv = view(xs, 0, common * xn.rows, xn.cols);
            let mut yv = view_mut(&mut tail[..common * opl], 0, common * xn.rows, w.cols);
            ndarray::linalg::general_mat_mul(1.0, &xv, &wv, 0.0, &mut yv);
        }
        if let Some(b) = b {
            let bs = params.slice(b);
            for r in 0..xn.rows {
                let dst = on + r * w.cols;
                for c in 0..w.cols {
                    self.vals[dst + c] += bs[c];
                }
            }
        }
        id
    }

    pub fn pointwise(&mut self, kind: Unary, x: NodeId) -> NodeId {
        let xn = self.node(x).clone();
        let rg = xn.requires_grad;
        let id = self.push(Op::Pointwise { kind, x }, xn.rows, xn.cols, xn.spatial, rg);
        let on = self.node(id).off;
        let pl = xn.plane_len();
        for i in 0..pl {
            let (g, g1, _) = kind.eval(self.vals[xn.off + i]);
            self.vals[on + i] = g;
            if xn.spatial {
                for p in 1..4 {
                    self.vals[on + p * pl + i] = g1 * self.vals[xn.off + p * pl + i];
                }
            }
        }
        id
    }

    pub fn softplus(&mut self, x: NodeId, beta: f64) -> NodeId {
        self.pointwise(Unary::Softplus { beta }, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.pointwise(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.pointwise(Unary::Exp, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.pointwise(Unary::Sqrt, x)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.pointwise(Unary::Abs, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.pointwise(Unary::Square, x)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let xn = self.node(x).clone();
        let rg = xn.requires_grad;
        let id = self.push(Op::Scale { x, k }, xn.rows, xn.cols, xn.spatial, rg);
        let on = self.node(id).off;
        for i in 0..xn.total_len() {
            self.vals[on + i] = k * self.vals[xn.off + i];
        }
        id
    }

    pub fn add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let xn = self.node(x).clone();
        let rg = xn.requires_grad;
        let id = self.push(Op::AddConst { x }, xn.rows, xn.cols, xn.spatial, rg);
        let on = self.node(id).off;
        let pl = xn.plane_len();
        for i in 0..pl {
            self.vals[on + i] = self.vals[xn.off + i] + k;
        }
        for i in pl..xn.total_len() {
            self.vals[on + i] = self.vals[xn.off + i];
        }
        id
    }

    fn binary_shape(&self, a: NodeId, b: NodeId) -> (usize, usize, bool, bool) {
        let (an, bn) = (self.node(a), self.node(b));
        assert_eq!(
            (an.rows, an.cols),
            (bn.rows, bn.cols),
            "elementwise op: shape mismatch"
        );
        (
            an.rows,
            an.cols,
            an.spatial || bn.spatial,
            an.requires_grad || bn.requires_grad,
        )
    }

    /// Jet of element `i` of a node, reading missing planes as zero.
    #[inline]
    fn jet_lin(&self, n: &Node, i: usize) -> Jet {
        let mut j = Jet::constant(self.vals[n.off + i]);
        if n.spatial {
            let pl = n.plane_len();
            for p in 0..3 {
                j.d[p] = self.vals[n.off + (p + 1) * pl + i];
            }
        }
        j
    }

    fn store_jet(&mut self, id: NodeId, i: usize, j: Jet) {
        let n = self.node(id);
        let (off, pl, spatial) = (n.off, n.plane_len(), n.spatial);
        self.vals[off + i] = j.v;
        if spatial {
            for p in 0..3 {
                self.vals[off + (p + 1) * pl + i] = j.d[p];
            }
        }
    }

    fn elementwise(&mut self, op: Op, a: NodeId, b: NodeId, f: fn(Jet, Jet) -> Jet) -> NodeId {
        let (rows, cols, spatial, rg) = self.binary_shape(a, b);
        let id = self.push(op, rows, cols, spatial, rg);
        let (an, bn) = (self.node(a).clone(), self.node(b).clone());
        for i in 0..rows * cols {
            let j = f(self.jet_lin(&an, i), self.jet_lin(&bn, i));
            self.store_jet(id, i, j);
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(Op::Add { a, b }, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(Op::Sub { a, b }, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(Op::Mul { a, b }, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(Op::Div { a, b }, a, b, |x, y| x / y)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: s must be 1 x 1");
        let an = self.node(a).clone();
        let sn = self.node(s).clone();
        let spatial = an.spatial || sn.spatial;
        let rg = an.requires_grad || sn.requires_grad;
        let id = self.push(Op::MulScalar { a, s }, an.rows, an.cols, spatial, rg);
        let sj = self.jet_lin(&sn, 0);
        for i in 0..an.plane_len() {
            let j = self.jet_lin(&an, i) * sj;
            self.store_jet(id, i, j);
        }
        id
    }

    pub fn row_scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let an = self.node(a).clone();
        let sn = self.node(s).clone();
        assert_eq!((sn.rows, sn.cols), (an.rows, 1), "row_scale: s must be R x 1");
        let spatial = an.spatial || sn.spatial;
        let rg = an.requires_grad || sn.requires_grad;
        let id = self.push(Op::RowScale { a, s }, an.rows, an.cols, spatial, rg);
        for r in 0..an.rows {
            let sj = self.jet_lin(&sn, r);
            for c in 0..an.cols {
                let j = self.jet_lin(&an, r * an.cols + c) * sj;
                self.store_jet(id, r * an.cols + c, j);
            }
        }
        id
    }

    pub fn pos_encode(&mut self, x: NodeId, freqs: usize, include_input: bool) -> NodeId {
        let xn = self.node(x).clone();
        assert_eq!(xn.cols, 3, "pos_encode expects R x 3");
        let blocks = if include_input { 1 } else { 0 } + 2 * freqs;
        let cols = 3 * blocks;
        let rg = xn.requires_grad;
        let id = self.push(
            Op::PosEncode {
                x,
                freqs,
                include_input,
            },
            xn.rows,
            cols,
            xn.spatial,
            rg,
        );
        for r in 0..xn.rows {
            let mut c = 0usize;
            if include_input {
                for k in 0..3 {
                    let j = self.jet_lin(&xn, r * 3 + k);
                    self.store_jet(id, r * cols + c, j);
                    c += 1;
                }
            }
            for f in 0..freqs {
                let w = std::f64::consts::PI * (1u64 << f) as f64;
                for k in 0..3 {
                    let j = self.jet_lin(&xn, r * 3 + k).scale(w).sin();
                    self.store_jet(id, r * cols + c + k, j);
                }
                for k in 0..3 {
                    let j = self.jet_lin(&xn, r * 3 + k).scale(w).cos();
                    self.store_jet(id, r * cols + c + 3 + k, j);
                }
                c += 6;
            }
        }
        id
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xn = self.node(x).clone();
        let rg = xn.requires_grad;
        let id = self.push(Op::SumAll { x }, 1, 1, xn.spatial, rg);
        let on = self.node(id).off;
        let pl = xn.plane_len();
        for p in 0..xn.planes() {
            let mut acc = 0.0;
            for i in 0..pl {
                acc += self.vals[xn.off + p * pl + i];
            }
            self.vals[on + p] = acc;
        }
        id
    }

    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols, spatial, rg) = self.binary_shape(a, b);
        let id = self.push(Op::DotRows { a, b }, rows, 1, spatial, rg);
        let (an, bn) = (self.node(a).clone(), self.node(b).clone());
        for r in 0..rows {
            let mut acc = Jet::ZERO;
            for c in 0..cols {
                acc = acc + self.jet_lin(&an, r * cols + c) * self.jet_lin(&bn, r * cols + c);
            }
            self.store_jet(id, r, acc);
        }
        id
    }

    /// Discrete NeuS opacity: for consecutive samples `i`, `i+1`,
    /// `alpha_i = clamp((phi(s f_i) - phi(s f_{i+1})) / max(phi(s f_i), eps), 0, 1)`.
    pub fn alpha_from_sdf(&mut self, f: NodeId, s: NodeId, eps: f64) -> NodeId {
        let fn_ = self.node(f).clone();
        assert_eq!(fn_.cols, 1, "alpha_from_sdf expects R x 1 sdf values");
        assert!(fn_.rows >= 2, "alpha_from_sdf needs at least two samples");
        assert_eq!(self.shape(s), (1, 1));
        let rg = fn_.requires_grad || self.rg(s);
        let id = self.push(Op::AlphaFromSdf { f, s, eps }, fn_.rows - 1, 1, false, rg);
        let on = self.node(id).off;
        let sv = self.scalar(s);
        for i in 0..fn_.rows - 1 {
            let pi = sigmoid(sv * self.vals[fn_.off + i]);
            let pj = sigmoid(sv * self.vals[fn_.off + i + 1]);
            let a = ((pi - pj) / pi.max(eps)).clamp(0.0, 1.0);
            self.vals[on + i] = a;
        }
        id
    }

    pub fn composite_weights(&mut self, alpha: NodeId) -> NodeId {
        let an = self.node(alpha).clone();
        assert_eq!(an.cols, 1, "composite_weights expects R x 1 alphas");
        let rg = an.requires_grad;
        let id = self.push(Op::CompositeWeights { alpha }, an.rows, 1, false, rg);
        let on = self.node(id).off;
        let mut t = 1.0;
        for i in 0..an.rows {
            let a = self.vals[an.off + i];
            self.vals[on + i] = t * a;
            t *= 1.0 - a;
        }
        id
    }

    pub fn weighted_sum(&mut self, w: NodeId, v: NodeId) -> NodeId {
        let wn = self.node(w).clone();
        let vn = self.node(v).clone();
        assert_eq!(wn.cols, 1, "weighted_sum: weights must be R x 1");
        assert_eq!(wn.rows, vn.rows, "weighted_sum: row mismatch");
        let rg = wn.requires_grad || vn.requires_grad;
        let id = self.push(Op::WeightedSum { w, v }, 1, vn.cols, false, rg);
        let on = self.node(id).off;
        for i in 0..vn.rows {
            let wi = self.vals[wn.off + i];
            for c in 0..vn.cols {
                self.vals[on + c] += wi * self.vals[vn.off + i * vn.cols + c];
            }
        }
        id
    }

    // ----- reverse pass ---------------------------------------------------

    /// Reverse sweep from a scalar loss; returns dLoss/dtheta aligned with
    /// the parameter store. Nodes that do not reach the loss contribute zero.
    pub fn backward(&mut self, params: &ParameterStore, loss: NodeId) -> Result<Vec<f64>, AdError> {
        let mut grad = vec![0.0; params.len()];
        self.backward_into(params, loss, &mut grad)?;
        Ok(grad)
    }

    /// Like [`Tape::backward`] but accumulates into an existing buffer.
    pub fn backward_into(
        &mut self,
        params: &ParameterStore,
        loss: NodeId,
        grad: &mut [f64],
    ) -> Result<(), AdError> {
        if loss.0 as usize >= self.nodes.len() {
            return Err(AdError::InvalidNode(loss));
        }
        let ln = self.node(loss);
        if (ln.rows, ln.cols) != (1, 1) {
            return Err(AdError::NonScalarLoss {
                rows: ln.rows,
                cols: ln.cols,
            });
        }
        assert_eq!(grad.len(), params.len());

        let mut adj = std::mem::take(&mut self.adj_scratch);
        adj.clear();
        adj.resize(self.vals.len(), 0.0);
        adj[self.node(loss).off] = 1.0;

        let mut failed = None;
        for ni in (0..=loss.0 as usize).rev() {
            let n = &self.nodes[ni];
            if !n.requires_grad {
                continue;
            }
            // The adjoint of this node is the partial of the loss w.r.t.
            // it; a finite-sum scan catches NaN/inf without branching.
            if !lane_sum(&adj[n.off..n.off + n.total_len()]).is_finite() {
                failed = Some(NodeId(ni as u32));
                break;
            }
            self.backward_node(n, params, &mut adj, grad);
        }
        self.adj_scratch = adj;
        match failed {
            Some(id) => Err(AdError::NonFinitePartial(id)),
            None => Ok(()),
        }
    }

    fn backward_node(&self, n: &Node, params: &ParameterStore, adj: &mut [f64], grad: &mut [f64]) {
        let opl = n.plane_len();
        match &n.op {
            Op::Constant => {}
            Op::ParamVec { r } => {
                for i in 0..r.len() {
                    grad[r.offset + i] += adj[n.off + i];
                }
            }
            Op::SeedSpatial { x } => {
                let xn = self.node(*x);
                // Spatial seeds are constants; only value adjoints flow back.
                for i in 0..opl {
                    adj[xn.off + i] += adj[n.off + i];
                }
            }
            Op::Linear { w, b, x } => {
                let xn = self.node(*x);
                let common = n.planes().min(xn.planes());
                let cr = common * n.rows;
                // dW += X^T Ybar over the planes both sides carry.
                {
                    let xv = view(&self.vals, xn.off, cr, xn.cols);
                    let yv = view(adj, n.off, cr, n.cols);
                    let mut gw = view_mut(grad, w.offset, w.rows, w.cols);
                    ndarray::linalg::general_mat_mul(1.0, &xv.t(), &yv, 1.0, &mut gw);
                }
                if let Some(b) = b {
                    for r in 0..n.rows {
                        for c in 0..n.cols {
                            grad[b.offset + c] += adj[n.off + r * n.cols + c];
                        }
                    }
                }
                if xn.requires_grad {
                    let wv = view(params.values(), w.offset, w.rows, w.cols);
                    // Inputs are recorded before outputs, so the input
                    // adjoint lies strictly below n.off in the arena.
                    let (head, tail) = adj.split_at_mut(n.off);
                    let yv = view(tail, 0, cr, n.cols);
                    let mut xv = view_mut(head, xn.off, cr, xn.cols);
                    ndarray::linalg::general_mat_mul(1.0, &yv, &wv.t(), 1.0, &mut xv);
                }
            }
            Op::Pointwise { kind, x } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                let xpl = xn.plane_len();
                for i in 0..opl {
                    let xv = self.vals[xn.off + i];
                    let (_, g1, g2) = kind.eval(xv);
                    let ybar = adj[n.off + i];
                    let mut xbar_v = ybar * g1;
                    if n.spatial && xn.spatial {
                        for p in 1..4 {
                            let ydp = adj[n.off + p * opl + i];
                            let xdp = self.vals[xn.off + p * xpl + i];
                            xbar_v += ydp * g2 * xdp;
                            adj[xn.off + p * xpl + i] += ydp * g1;
                        }
                    }
                    adj[xn.off + i] += xbar_v;
                }
            }
            Op::Scale { x, k } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                let common = n.planes().min(xn.planes());
                for p in 0..common {
                    for i in 0..opl {
                        adj[xn.off + p * xn.plane_len() + i] += k * adj[n.off + p * opl + i];
                    }
                }
            }
            Op::AddConst { x } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                let common = n.planes().min(xn.planes());
                for p in 0..common {
                    for i in 0..opl {
                        adj[xn.off + p * xn.plane_len() + i] += adj[n.off + p * opl + i];
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate_linear(n, *a, 1.0, adj);
                self.accumulate_linear(n, *b, 1.0, adj);
            }
            Op::Sub { a, b } => {
                self.accumulate_linear(n, *a, 1.0, adj);
                self.accumulate_linear(n, *b, -1.0, adj);
            }
            Op::Mul { a, b } => {
                let (an, bn) = (self.node(*a), self.node(*b));
                for i in 0..n.plane_len() {
                    let ybar = self.read_adj_jet(n, i, adj);
                    if an.requires_grad {
                        let bj = self.jet_lin(bn, i);
                        self.apply_adj(an, i, ybar, bj, adj);
                    }
                    if bn.requires_grad {
                        let aj = self.jet_lin(an, i);
                        self.apply_adj(bn, i, ybar, aj, adj);
                    }
                }
            }
            Op::Div { a, b } => {
                let (an, bn) = (self.node(*a), self.node(*b));
                for i in 0..opl {
                    let aj = self.jet_lin(an, i);
                    let bj = self.jet_lin(bn, i);
                    let ybar = self.read_adj_jet(n, i, adj);
                    if an.requires_grad {
                        // d(a/b)/da = 1/b as a jet.
                        let da = Jet::constant(1.0) / bj;
                        self.apply_adj(an, i, ybar, da, adj);
                    }
                    if bn.requires_grad {
                        // d(a/b)/db = -a/b^2 as a jet.
                        let db = -(aj / (bj * bj));
                        self.apply_adj(bn, i, ybar, db, adj);
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let (an, sn) = (self.node(*a), self.node(*s));
                let sj = self.jet_lin(sn, 0);
                for i in 0..opl {
                    let ybar = self.read_adj_jet(n, i, adj);
                    if an.requires_grad {
                        self.apply_adj(an, i, ybar, sj, adj);
                    }
                    if sn.requires_grad {
                        let aj = self.jet_lin(an, i);
                        self.apply_adj(sn, 0, ybar, aj, adj);
                    }
                }
            }
            Op::RowScale { a, s } => {
                let (an, sn) = (self.node(*a), self.node(*s));
                for r in 0..n.rows {
                    let sj = self.jet_lin(sn, r);
                    for c in 0..n.cols {
                        let i = r * n.cols + c;
                        let ybar = self.read_adj_jet(n, i, adj);
                        if an.requires_grad {
                            self.apply_adj(an, i, ybar, sj, adj);
                        }
                        if sn.requires_grad {
                            let aj = self.jet_lin(an, i);
                            self.apply_adj(sn, r, ybar, aj, adj);
                        }
                    }
                }
            }
            Op::PosEncode {
                x,
                freqs,
                include_input,
            } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                for r in 0..n.rows {
                    let mut c = 0usize;
                    if *include_input {
                        for k in 0..3 {
                            let ybar = self.read_adj_jet(n, r * n.cols + c + k, adj);
                            self.apply_adj(xn, r * 3 + k, ybar, Jet::constant(1.0), adj);
                        }
                        c += 3;
                    }
                    for f in 0..*freqs {
                        let w = std::f64::consts::PI * (1u64 << f) as f64;
                        for k in 0..3 {
                            let xj = self.jet_lin(xn, r * 3 + k);
                            let arg = xj.scale(w);
                            // d sin(wx)/dx = w cos(wx), as a jet in x.
                            let dsin = arg.cos().scale(w);
                            let dcos = arg.sin().scale(-w);
                            let ys = self.read_adj_jet(n, r * n.cols + c + k, adj);
                            self.apply_adj(xn, r * 3 + k, ys, dsin, adj);
                            let yc = self.read_adj_jet(n, r * n.cols + c + 3 + k, adj);
                            self.apply_adj(xn, r * 3 + k, yc, dcos, adj);
                        }
                        c += 6;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut c0 = 0usize;
                for &pid in parts {
                    let pn = self.node(pid);
                    if pn.requires_grad {
                        let common = n.planes().min(pn.planes());
                        for p in 0..common {
                            for r in 0..n.rows {
                                for c in 0..pn.cols {
                                    adj[pn.off + p * pn.plane_len() + r * pn.cols + c] +=
                                        adj[n.off + p * opl + r * n.cols + c0 + c];
                                }
                            }
                        }
                    }
                    c0 += pn.cols;
                }
            }
            Op::ConcatRows { parts } => {
                let mut r0 = 0usize;
                for &pid in parts {
                    let pn = self.node(pid);
                    if pn.requires_grad {
                        let common = n.planes().min(pn.planes());
                        for p in 0..common {
                            for i in 0..pn.plane_len() {
                                adj[pn.off + p * pn.plane_len() + i] +=
                                    adj[n.off + p * opl + r0 * n.cols + i];
                            }
                        }
                    }
                    r0 += pn.rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                for p in 0..n.planes() {
                    for i in 0..opl {
                        adj[xn.off + p * xn.plane_len() + start * xn.cols + i] +=
                            adj[n.off + p * opl + i];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                for p in 0..n.planes() {
                    for r in 0..n.rows {
                        for c in 0..n.cols {
                            adj[xn.off + p * xn.plane_len() + r * xn.cols + start + c] +=
                                adj[n.off + p * opl + r * n.cols + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                for p in 0..n.planes() {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n.cols {
                            adj[xn.off + p * xn.plane_len() + i * xn.cols + c] +=
                                adj[n.off + p * opl + r * n.cols + c];
                        }
                    }
                }
            }
            Op::ExtractSpatial { x } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                // Inject value adjoints of the extracted gradient into the
                // spatial adjoint planes of the source jet node.
                for r in 0..n.rows {
                    for p in 0..3 {
                        adj[xn.off + (p + 1) * xn.plane_len() + r] += adj[n.off + r * 3 + p];
                    }
                }
            }
            Op::SumAll { x } => {
                let xn = self.node(*x);
                if !xn.requires_grad {
                    return;
                }
                let common = n.planes().min(xn.planes());
                for p in 0..common {
                    let ybar = adj[n.off + p];
                    for i in 0..xn.plane_len() {
                        adj[xn.off + p * xn.plane_len() + i] += ybar;
                    }
                }
            }
            Op::DotRows { a, b } => {
                let (an, bn) = (self.node(*a), self.node(*b));
                let cols = an.cols;
                for r in 0..n.rows {
                    let ybar = self.read_adj_jet(n, r, adj);
                    for c in 0..cols {
                        let i = r * cols + c;
                        if an.requires_grad {
                            let bj = self.jet_lin(bn, i);
                            self.apply_adj(an, i, ybar, bj, adj);
                        }
                        if bn.requires_grad {
                            let aj = self.jet_lin(an, i);
                            self.apply_adj(bn, i, ybar, aj, adj);
                        }
                    }
                }
            }
            Op::AlphaFromSdf { f, s, eps } => {
                let fnode = self.node(*f);
                let snode = self.node(*s);
                let sv = self.vals[snode.off];
                for i in 0..n.rows {
                    let abar = adj[n.off + i];
                    if abar == 0.0 {
                        continue;
                    }
                    let fi = self.vals[fnode.off + i];
                    let fj = self.vals[fnode.off + i + 1];
                    let pi = sigmoid(sv * fi);
                    let pj = sigmoid(sv * fj);
                    let num = pi - pj;
                    let den = pi.max(*eps);
                    let raw = num / den;
                    if !(0.0..=1.0).contains(&raw) {
                        continue; // clamped: zero local derivative
                    }
                    let dden = if pi > *eps { 1.0 } else { 0.0 };
                    let da_dpi = (den - num * dden) / (den * den);
                    let da_dpj = -1.0 / den;
                    let dpi = pi * (1.0 - pi);
                    let dpj = pj * (1.0 - pj);
                    if fnode.requires_grad {
                        adj[fnode.off + i] += abar * da_dpi * dpi * sv;
                        adj[fnode.off + i + 1] += abar * da_dpj * dpj * sv;
                    }
                    if snode.requires_grad {
                        adj[snode.off] += abar * (da_dpi * dpi * fi + da_dpj * dpj * fj);
                    }
                }
            }
            Op::CompositeWeights { alpha } => {
                let an = self.node(*alpha);
                if !an.requires_grad {
                    return;
                }
                let k = n.rows;
                // Rebuild transmittances, then run the adjoint recurrence of
                // T_{i+1} = T_i (1 - a_i), w_i = T_i a_i without divisions.
                let mut trans = vec![1.0; k + 1];
                for i in 0..k {
                    trans[i + 1] = trans[i] * (1.0 - self.vals[an.off + i]);
                }
                let mut tbar = 0.0;
                for i in (0..k).rev() {
                    let a = self.vals[an.off + i];
                    let wbar = adj[n.off + i];
                    adj[an.off + i] += wbar * trans[i] - tbar * trans[i];
                    tbar = wbar * a + tbar * (1.0 - a);
                }
            }
            Op::WeightedSum { w, v } => {
                let (wn, vn) = (self.node(*w), self.node(*v));
                for i in 0..vn.rows {
                    let wi = self.vals[wn.off + i];
                    for c in 0..vn.cols {
                        let ybar = adj[n.off + c];
                        if vn.requires_grad {
                            adj[vn.off + i * vn.cols + c] += wi * ybar;
                        }
                        if wn.requires_grad {
                            adj[wn.off + i] += self.vals[vn.off + i * vn.cols + c] * ybar;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint jet of element `i` of node `n` (missing planes read as zero).
    #[inline]
    fn read_adj_jet(&self, n: &Node, i: usize, adj: &[f64]) -> Jet {
        let mut j = Jet::constant(adj[n.off + i]);
        if n.spatial {
            let pl = n.plane_len();
            for p in 0..3 {
                j.d[p] = adj[n.off + (p + 1) * pl + i];
            }
        }
        j
    }

    /// Accumulate the jet-transposed product of an adjoint jet `ybar` and a
    /// local-derivative jet `d` into element `i` of node `xn`:
    /// value  += ybar.v * d.v + sum_p ybar.d_p * d.d_p
    /// d_p    += ybar.d_p * d.v
    #[inline]
    fn apply_adj(&self, xn: &Node, i: usize, ybar: Jet, d: Jet, adj: &mut [f64]) {
        let mut v = ybar.v * d.v;
        for p in 0..3 {
            v += ybar.d[p] * d.d[p];
        }
        adj[xn.off + i] += v;
        if xn.spatial {
            let pl = xn.plane_len();
            for p in 0..3 {
                adj[xn.off + (p + 1) * pl + i] += ybar.d[p] * d.v;
            }
        }
    }

    /// Plane-wise scaled accumulation for structurally linear ops.
    fn accumulate_linear(&self, n: &Node, src: NodeId, sign: f64, adj: &mut [f64]) {
        let sn = self.node(src);
        if !sn.requires_grad {
            return;
        }
        let common = n.planes().min(sn.planes());
        let opl = n.plane_len();
        for p in 0..common {
            for i in 0..opl {
                adj[sn.off + p * sn.plane_len() + i] += sign * adj[n.off + p * opl + i];
            }
        }
    }

}

/// Four-lane unrolled sum; vectorizes where a strict serial sum cannot.
#[inline]
fn lane_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut it = xs.chunks_exact(4);
    for c in &mut it {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut t = acc[0] + acc[1] + acc[2] + acc[3];
    for &x in it.remainder() {
        t += x;
    }
    t
}

#[inline]
fn view(data: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &data[off..off + rows * cols]).expect("view shape")
}

#[inline]
fn view_mut(data: &mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut data[off..off + rows * cols]).expect("view shape")
}
