//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! One [`Graph`] is one tape: every operation appends a node whose parents
//! already live on the tape, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are cheap, built per
//! forward pass, and never shared between threads.

mod spatial;

pub mod gradcheck;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(u32);

impl TensorId {
    #[inline]
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// Per-pixel displacement map in pixels, `(dx, dy)` planes stacked as 2xHxW.
///
/// Flows are carried outside the tape: sampling coordinates coming from the
/// coding loop are inputs, not parameters. Offset fields predicted inside the
/// network go through [`Graph::warp_dyn`] instead, which differentiates
/// through the coordinates as well.
#[derive(Clone, Debug)]
pub struct Flow {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Flow {
    pub fn new(dx: Vec<f64>, dy: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(Error::dimension("flow plane size does not match extents"));
        }
        Ok(Flow { dx, dy, height, width })
    }

    pub fn zero(height: usize, width: usize) -> Self {
        Flow {
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
            height,
            width,
        }
    }

    pub fn constant(dx: f64, dy: f64, height: usize, width: usize) -> Self {
        Flow {
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
            height,
            width,
        }
    }

    /// Average-pool both planes by 2 and halve the displacement magnitudes.
    pub fn downscale(&self) -> Result<Self> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::dimension("flow downscale requires even extents"));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let pool = |src: &[f64]| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let base = 2 * y * self.width + 2 * x;
                    out[y * w + x] = 0.25
                        * (src[base] + src[base + 1] + src[base + self.width] + src[base + self.width + 1])
                        * 0.5;
                }
            }
            out
        };
        Ok(Flow { dx: pool(&self.dx), dy: pool(&self.dy), height: h, width: w })
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    MaxScalar(TensorId, f64),
    LeakyRelu(TensorId, f64),
    Exp(TensorId),
    Ln(TensorId),
    Softplus(TensorId),
    GaussCdf(TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Softmax(TensorId, usize),
    Sum(TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Down2(TensorId),
    Up2(TensorId),
    Warp { x: TensorId, flow: Arc<Flow> },
    WarpDyn { x: TensorId, flow: TensorId },
    MulSpatial { x: TensorId, mask: TensorId },
    ConcatChannels(Vec<TensorId>),
    SliceChannels { x: TensorId, start: usize, len: usize },
    ConcatCols(Vec<TensorId>),
    SliceCols { x: TensorId, start: usize, len: usize },
    FlattenSpatial(TensorId),
    UnflattenSpatial { x: TensorId, channels: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    /// True when this node depends on some differentiable leaf; backward
    /// skips anything outside that cone.
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode tape. See module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes currently on the tape (audit hook).
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Largest element count of any node on the tape (audit hook).
    pub fn max_node_numel(&self) -> usize {
        self.nodes.iter().map(|n| n.data.len()).max().unwrap_or(0)
    }

    /// True if any node holds exactly `n` elements (allocation audit hook).
    pub fn has_node_with_numel(&self, n: usize) -> bool {
        self.nodes.iter().any(|node| node.data.len() == n)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { data, shape, grad: None, needs_grad, op });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.index()]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.node(id).needs_grad
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(Error::dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Differentiable leaf (parameter or probed state).
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(Error::dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape.to_vec(), true, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn is_leaf(&self, id: TensorId) -> bool {
        matches!(self.node(id).op, Op::Leaf)
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "div")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * c).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x + c).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::AddScalar(a, c))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.max(c)).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::MaxScalar(a, c))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.exp()).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| softplus(x)).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Softplus(a))
    }

    /// Standard normal CDF, elementwise.
    pub fn gauss_cdf(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| gauss_cdf(x)).collect();
        let shape = self.node(a).shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::GaussCdf(a))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dimension("matmul requires rank-2 operands"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul inner extents differ: {k} vs {k2}"
            )));
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], ng, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.node(a).shape;
        if s.len() != 2 {
            return Err(Error::dimension("transpose requires rank-2 operand"));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(data, vec![c, r], ng, Op::Transpose(a)))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() {
            return Err(Error::dimension(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let data = softmax_raw(&self.node(a).data, &shape, axis);
        let ng = self.needs(a);
        Ok(self.push(data, shape, ng, Op::Softmax(a, axis)))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.node(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(vec![s], vec![1], ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.node(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ── Shape ───────────────────────────────────────────────────────────

    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::dimension("concat_channels of zero tensors"));
        }
        let first = self.node(parts[0]).shape.clone();
        if first.len() != 3 {
            return Err(Error::dimension("concat_channels requires CxHxW operands"));
        }
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for &p in parts {
            let s = &self.node(p).shape;
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::dimension(format!(
                    "concat_channels: incompatible shape {:?}, expected _x{}x{}",
                    s, h, w
                )));
            }
            c_total += s[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![c_total, h, w], ng, Op::ConcatChannels(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        if s.len() != 3 || start + len > s[0] {
            return Err(Error::dimension(format!(
                "slice_channels {start}..{} out of {:?}",
                start + len,
                s
            )));
        }
        let plane = s[1] * s[2];
        let data = self.node(x).data[start * plane..(start + len) * plane].to_vec();
        let ng = self.needs(x);
        Ok(self.push(data, vec![len, s[1], s[2]], ng, Op::SliceChannels { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::dimension("concat_cols of zero tensors"));
        }
        let rows = self.node(parts[0]).shape[0];
        let mut cols_total = 0;
        for &p in parts {
            let s = &self.node(p).shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dimension("concat_cols: row counts differ"));
            }
            cols_total += s[1];
        }
        let mut data = vec![0.0; rows * cols_total];
        let mut col_off = 0;
        for &p in parts {
            let pc = self.node(p).shape[1];
            let src = &self.node(p).data;
            for r in 0..rows {
                data[r * cols_total + col_off..r * cols_total + col_off + pc]
                    .copy_from_slice(&src[r * pc..(r + 1) * pc]);
            }
            col_off += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![rows, cols_total], ng, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dimension(format!(
                "slice_cols {start}..{} out of {:?}",
                start + len,
                s
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.node(x).data;
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![rows, len], ng, Op::SliceCols { x, start, len }))
    }

    /// CxHxW -> (H*W)xC row-major positions, one row per pixel.
    pub fn flatten_spatial(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        if s.len() != 3 {
            return Err(Error::dimension("flatten_spatial requires CxHxW"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let src = &self.node(x).data;
        let mut data = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = src[ch * plane + p];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![plane, c], ng, Op::FlattenSpatial(x)))
    }

    /// (H*W)xC -> CxHxW, inverse of [`Graph::flatten_spatial`].
    pub fn unflatten_spatial(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let s = self.node(x).shape.clone();
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::dimension(format!(
                "unflatten_spatial: {:?} does not match {}x{}",
                s, h, w
            )));
        }
        let c = s[1];
        let plane = h * w;
        let src = &self.node(x).data;
        let mut data = vec![0.0; c * plane];
        for p in 0..plane {
            for ch in 0..c {
                data[ch * plane + p] = src[p * c + ch];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![c, h, w], ng, Op::UnflattenSpatial { x, channels: c }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; accumulates into every
    /// gradient-needing node reachable from it.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.node(root).data.len() != 1 {
            return Err(Error::usage("backward root must be a scalar"));
        }
        let n = root.index() + 1;
        self.nodes[root.index()].grad = Some(vec![1.0]);
        for i in (0..n).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.backprop_node(i, &op, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.index()];
        if !node.needs_grad {
            return;
        }
        match node.grad {
            Some(ref mut g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn accumulate_fn(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[id.index()];
        if !node.needs_grad {
            return;
        }
        if node.grad.is_none() {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        f(node.grad.as_mut().unwrap());
    }

    fn backprop_node(&mut self, i: usize, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(b).data)
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(a).data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Div(a, b) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(b).data)
                    .map(|(g, y)| g / y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.node(a).data.iter().zip(&self.node(b).data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a, _) => self.accumulate(a, grad),
            Op::MaxScalar(a, c) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(a).data)
                    .map(|(g, &x)| if x > c { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::LeakyRelu(a, slope) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(a).data)
                    .map(|(g, &x)| if x >= 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, e)| g * e)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(a).data)
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(a).data)
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::GaussCdf(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(a).data)
                    .map(|(g, &x)| g * gauss_pdf(x))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                let n = self.node(b).shape[1];
                // dA = dC * B^T
                let b_data = &self.node(b).data;
                let mut bt = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = b_data[p * n + j];
                    }
                }
                let da = matmul_raw(grad, &bt, m, n, k);
                // dB = A^T * dC
                let a_data = &self.node(a).data;
                let mut at = vec![0.0; m * k];
                for r in 0..m {
                    for p in 0..k {
                        at[p * m + r] = a_data[r * k + p];
                    }
                }
                let db = matmul_raw(&at, grad, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut da = vec![0.0; r * c];
                for y in 0..r {
                    for x in 0..c {
                        da[x * r + y] = grad[y * c + x];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Softmax(a, axis) => {
                let out = &self.nodes[i].data;
                let shape = &self.nodes[i].shape;
                let axis_size = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let mut dot = 0.0;
                        for s in 0..axis_size {
                            let idx = (o * axis_size + s) * inner + p;
                            dot += grad[idx] * out[idx];
                        }
                        for s in 0..axis_size {
                            let idx = (o * axis_size + s) * inner + p;
                            da[idx] = out[idx] * (grad[idx] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Sum(a) => {
                let g = grad[0];
                let n = self.node(a).data.len();
                self.accumulate_fn(a, |acc| {
                    for v in acc.iter_mut().take(n) {
                        *v += g;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, padding, groups } => {
                self.conv2d_backward(i, x, w, b, stride, padding, groups, grad);
            }
            Op::Down2(a) => self.down2_backward(a, grad),
            Op::Up2(a) => self.up2_backward(a, grad),
            Op::Warp { x, ref flow } => {
                let flow = flow.clone();
                self.warp_backward(x, &flow, grad);
            }
            Op::WarpDyn { x, flow } => self.warp_dyn_backward(x, flow, grad),
            Op::MulSpatial { x, mask } => {
                let (c, h, w) = {
                    let s = &self.node(x).shape;
                    (s[0], s[1], s[2])
                };
                let plane = h * w;
                let mask_data = self.node(mask).data.clone();
                let x_data = self.node(x).data.clone();
                let mut dx = vec![0.0; c * plane];
                let mut dm = vec![0.0; plane];
                for ch in 0..c {
                    for p in 0..plane {
                        let g = grad[ch * plane + p];
                        dx[ch * plane + p] = g * mask_data[p];
                        dm[p] += g * x_data[ch * plane + p];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(mask, &dm);
            }
            Op::ConcatChannels(ref parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let len = self.node(p).data.len();
                    let slice = grad[off..off + len].to_vec();
                    self.accumulate(p, &slice);
                    off += len;
                }
            }
            Op::SliceChannels { x, start, len } => {
                let s = &self.node(x).shape;
                let plane = s[1] * s[2];
                let (lo, hi) = (start * plane, (start + len) * plane);
                self.accumulate_fn(x, |acc| {
                    for (dst, g) in acc[lo..hi].iter_mut().zip(grad) {
                        *dst += g;
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let parts = parts.clone();
                let rows = self.nodes[i].shape[0];
                let cols_total = self.nodes[i].shape[1];
                let mut col_off = 0;
                for p in parts {
                    let pc = self.node(p).shape[1];
                    let mut dp = vec![0.0; rows * pc];
                    for r in 0..rows {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&grad[r * cols_total + col_off..r * cols_total + col_off + pc]);
                    }
                    self.accumulate(p, &dp);
                    col_off += pc;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = (self.node(x).shape[0], self.node(x).shape[1]);
                self.accumulate_fn(x, |acc| {
                    for r in 0..rows {
                        for j in 0..len {
                            acc[r * cols + start + j] += grad[r * len + j];
                        }
                    }
                });
            }
            Op::FlattenSpatial(x) => {
                let s = &self.node(x).shape;
                let (c, plane) = (s[0], s[1] * s[2]);
                let mut dx = vec![0.0; c * plane];
                for ch in 0..c {
                    for p in 0..plane {
                        dx[ch * plane + p] = grad[p * c + ch];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::UnflattenSpatial { x, channels } => {
                let plane = grad.len() / channels;
                let mut dx = vec![0.0; channels * plane];
                for p in 0..plane {
                    for ch in 0..channels {
                        dx[p * channels + ch] = grad[ch * plane + p];
                    }
                }
                self.accumulate(x, &dx);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for p in 0..inner {
            let mut max_v = f64::NEG_INFINITY;
            for s in 0..axis_size {
                max_v = max_v.max(data[(o * axis_size + s) * inner + p]);
            }
            let mut denom = 0.0;
            for s in 0..axis_size {
                let idx = (o * axis_size + s) * inner + p;
                let e = (data[idx] - max_v).exp();
                out[idx] = e;
                denom += e;
            }
            for s in 0..axis_size {
                out[(o * axis_size + s) * inner + p] /= denom;
            }
        }
    }
    out
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gauss_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn gauss_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = g.constant(vec![3.0, -1.0, 2.0, 5.0], &[2, 2]).unwrap();
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(out), &[3.0, -1.0, 2.0, 5.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = g.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.0; 8], &[2, 4]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetry_and_single_element() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for &v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = g.constant(vec![42.0], &[1]).unwrap();
        let s1 = g.softmax(one, 0).unwrap();
        assert_eq!(g.data(s1), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (got, want) in g.data(s).iter().zip([1f64, 2.0, 3.0]) {
            assert!((got - want.exp() / denom).abs() < 1e-12);
        }
        let total: f64 = g.data(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, -2.0], &[2]).unwrap();
        let zero = g.constant(vec![0.0, 0.0], &[2]).unwrap();
        let same = g.add(x, zero).unwrap();
        assert_eq!(g.data(same), g.data(x));

        let y = g.constant(vec![-1.0], &[1]).unwrap();
        let lr = g.leaky_relu(y, 0.01);
        assert!((g.data(lr)[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn elementwise_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 2], &[2]).unwrap();
        let b = g.constant(vec![0.0; 3], &[3]).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_gives_x() {
        let mut g = Graph::new();
        let x = g.param(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.data(x));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fanout_accumulates_exactly() {
        let mut g = Graph::new();
        let x = g.param(vec![3.0], &[1]).unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_bit_identical_across_runs() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .param(vec![0.3, -0.7, 1.9, 0.11, -0.55, 0.72], &[2, 3])
                .unwrap();
            let w = g
                .param(vec![0.5, -0.25, 0.125, 1.5, -1.0, 2.0], &[3, 2])
                .unwrap();
            let y = g.matmul(x, w).unwrap();
            let sm = g.softmax(y, 1).unwrap();
            let loss = g.sum(sm);
            g.backward(loss).unwrap();
            (
                g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                g.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let b = g.constant(vec![5.0, 6.0, 7.0, 8.0], &[1, 2, 2]).unwrap();
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[2, 2, 2]);
        let back = g.slice_channels(cat, 1, 1).unwrap();
        assert_eq!(g.data(back), g.data(b));
    }

    #[test]
    fn flatten_matches_layout() {
        let mut g = Graph::new();
        // 2 channels of a 1x2 image
        let x = g.constant(vec![1.0, 2.0, 10.0, 20.0], &[2, 1, 2]).unwrap();
        let f = g.flatten_spatial(x).unwrap();
        assert_eq!(g.shape(f), &[2, 2]);
        assert_eq!(g.data(f), &[1.0, 10.0, 2.0, 20.0]);
        let back = g.unflatten_spatial(f, 1, 2).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }
}
