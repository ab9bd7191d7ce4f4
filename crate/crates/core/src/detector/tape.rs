//! Tensor-level reverse-mode differentiation.
//!
//! Values live in an arena indexed by [`NodeId`]. Each node remembers how
//! it was produced, and [`Tape::backward`] walks the arena in reverse
//! accumulating adjoints. A tape built with [`Tape::inference`] runs the same
//! forward kernels but records nothing, so it cannot be differentiated.

use crate::error::{MocError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MocError::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A fused operation with a hand-written backward pass.
pub trait CustomOp {
    /// Adjoints of each input given the adjoint of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SliceCols { src: NodeId, start: usize },
    /// `scale * x + shift`, with `shift` constant.
    ScaleShift { src: NodeId, scale: f64 },
    SumSquares(NodeId),
    LinComb(Vec<(NodeId, f64)>),
    /// Scalar whose local gradients were computed alongside its value.
    Local(Vec<(NodeId, Vec<f64>)>),
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    // row/column strides of the logical (possibly transposed) operands
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: slices hold m*k, k*n and m*n elements and the strides above
    // address exactly those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(MocError::Shape(format!(
                "matmul {}x{} by {}x{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta.rows, ta.cols, tb.cols, &ta.data, false, &tb.data, false, &mut out.data, 0.0);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(MocError::Shape(format!(
                "bias {}x{} for {}x{}",
                tb.rows, tb.cols, ta.rows, ta.cols
            )));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|v| v.tanh()).collect(),
        };
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push(out, Op::Sigmoid(a))
    }

    /// Columns `start .. start + len` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(MocError::Shape(format!(
                "columns {start}..{} of a {}-column tensor",
                start + len,
                t.cols
            )));
        }
        let mut data = Vec::with_capacity(t.rows * len);
        for row in t.data.chunks(t.cols.max(1)).take(t.rows) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor {
            rows: t.rows,
            cols: len,
            data,
        };
        Ok(self.push(out, Op::SliceCols { src: a, start }))
    }

    /// `scale * a + shift` elementwise; `shift` is not differentiated.
    pub fn scale_shift(&mut self, a: NodeId, scale: f64, shift: &[f64]) -> Result<NodeId> {
        let t = self.value(a);
        if shift.len() != t.len() {
            return Err(MocError::Shape(format!(
                "shift of length {} for {} values",
                shift.len(),
                t.len()
            )));
        }
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().zip(shift).map(|(x, s)| scale * x + s).collect(),
        };
        Ok(self.push(out, Op::ScaleShift { src: a, scale }))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data.iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(v), Op::SumSquares(a))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut v = 0.0;
        for &(id, w) in terms {
            let t = self.value(id);
            if t.len() != 1 {
                return Err(MocError::Shape("lin_comb expects scalar nodes".into()));
            }
            v += w * t.data[0];
        }
        Ok(self.push(Tensor::scalar(v), Op::LinComb(terms.to_vec())))
    }

    /// Scalar node with externally computed value and local gradients.
    pub fn local(&mut self, value: f64, grads: Vec<(NodeId, Vec<f64>)>) -> Result<NodeId> {
        for (id, g) in &grads {
            if g.len() != self.value(*id).len() {
                return Err(MocError::Shape(format!(
                    "local gradient of length {} for node {} of size {}",
                    g.len(),
                    id.0,
                    self.value(*id).len()
                )));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Local(grads)))
    }

    pub fn custom(&mut self, inputs: Vec<NodeId>, value: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Adjoints of every node with respect to the scalar `loss`. Entries for
    /// nodes that do not influence the loss are `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.recording || loss.0 >= self.nodes.len() {
            return Err(MocError::UntapedNode(loss.0));
        }
        if self.value(loss).len() != 1 {
            return Err(MocError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
            match &mut grads[id.0] {
                Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.to_vec()),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, &tb.data, true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, &g, false, &mut gb, 0.0);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::AddBias(a, b) => {
                    let cols = node.value.cols;
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &gb);
                }
                Op::Tanh(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *a, &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, *a, &d);
                }
                Op::SliceCols { src, start } => {
                    let t = self.value(*src);
                    let len = node.value.cols;
                    let mut d = vec![0.0; t.len()];
                    for r in 0..t.rows {
                        d[r * t.cols + start..r * t.cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    acc(&mut grads, *src, &d);
                }
                Op::ScaleShift { src, scale } => {
                    let d: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    acc(&mut grads, *src, &d);
                }
                Op::SumSquares(a) => {
                    let d: Vec<f64> = self.value(*a).data.iter().map(|x| 2.0 * x * g[0]).collect();
                    acc(&mut grads, *a, &d);
                }
                Op::LinComb(terms) => {
                    for &(id, w) in terms {
                        acc(&mut grads, id, &[w * g[0]]);
                    }
                }
                Op::Local(locals) => {
                    for (id, lg) in locals {
                        let d: Vec<f64> = lg.iter().map(|v| v * g[0]).collect();
                        acc(&mut grads, *id, &d);
                    }
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let ds = op.backward(&vals, &node.value, &g);
                    for (id, d) in inputs.iter().zip(ds) {
                        acc(&mut grads, *id, &d);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_params() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let l = tape.sum_squares(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g[p.0].as_deref().unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap());
        let l = tape.local(3.0, vec![(p, vec![0.0, 0.0])]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g[p.0].as_deref().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn untaped_nodes_are_rejected() {
        let mut tape = Tape::inference();
        let p = tape.leaf(Tensor::scalar(1.0));
        let l = tape.sum_squares(p);
        assert!(matches!(tape.backward(l), Err(MocError::UntapedNode(_))));
        let tape = Tape::new();
        assert!(matches!(tape.backward(NodeId(7)), Err(MocError::UntapedNode(7))));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add_bias(a, b).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 7, 3);
        let a = rand_tensor(&mut rng, m, k);
        let b = rand_tensor(&mut rng, k, n);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(ia, ib).unwrap();
        for i in 0..m {
            for j in 0..n {
                let v: f64 = (0..k).map(|p| a.data[i * k + p] * b.data[p * n + j]).sum();
                assert!((tape.value(c).data[i * n + j] - v).abs() < 1e-12);
            }
        }
    }

    /// Builds a small network touching every op and returns the loss.
    fn network(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor, shift: &[f64]) -> (NodeId, NodeId, NodeId) {
        let ix = tape.leaf(x.clone());
        let iw = tape.leaf(w.clone());
        let ib = tape.leaf(b.clone());
        let h = tape.matmul(ix, iw).unwrap();
        let h = tape.add_bias(h, ib).unwrap();
        let t = tape.tanh(h);
        let s = tape.sigmoid(h);
        let sl = tape.slice_cols(t, 1, 2).unwrap();
        let ss = tape.scale_shift(s, 0.3, shift).unwrap();
        let l1 = tape.sum_squares(sl);
        let l2 = tape.sum_squares(ss);
        let v: f64 = tape.value(sl).data.iter().sum();
        let g = vec![1.0; tape.value(sl).len()];
        let l3 = tape.local(v, vec![(sl, g)]).unwrap();
        let loss = tape.lin_comb(&[(l1, 1.5), (l2, -0.7), (l3, 2.0)]).unwrap();
        (loss, iw, ib)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 1, 4);
        let shift: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let mut tape = Tape::new();
        let (loss, iw, ib) = network(&mut tape, &x, &w, &b, &shift);
        let grads = tape.backward(loss).unwrap();
        let eval = |w: &Tensor, b: &Tensor| {
            let mut t = Tape::inference();
            let (l, _, _) = network(&mut t, &x, w, b, &shift);
            t.value(l).data[0]
        };
        let h = 1e-5;
        for (which, id, base) in [(0, iw, &w), (1, ib, &b)] {
            let analytic = grads[id.0].as_ref().unwrap();
            for k in 0..base.len() {
                let (mut p, mut m) = (base.clone(), base.clone());
                p.data[k] += h;
                m.data[k] -= h;
                let fd = if which == 0 { (eval(&p, &b) - eval(&m, &b)) / (2.0 * h) } else { (eval(&w, &p) - eval(&w, &m)) / (2.0 * h) };
                let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!((fd - analytic[k]).abs() / denom < 1e-6, "{fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn inference_values_equal_recorded_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 6, 3);
        let w = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 1, 4);
        let shift = vec![0.1; 24];
        let mut t1 = Tape::new();
        let mut t2 = Tape::inference();
        let (l1, _, _) = network(&mut t1, &x, &w, &b, &shift);
        let (l2, _, _) = network(&mut t2, &x, &w, &b, &shift);
        assert_eq!(t1.value(l1).data[0].to_bits(), t2.value(l2).data[0].to_bits());
    }
}
