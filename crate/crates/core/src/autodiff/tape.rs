use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, Array2, Axis, Zip};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MaxConst(usize, f64),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Relu(usize),
    Logistic(usize),
    /// `x · wᵀ`: the matrix-vector product `w · x_r` for every row `x_r`.
    MatMulT(usize, usize),
    AddRow(usize, usize),
    SumRows(usize),
    Mean(usize),
    SegCumsum(usize, Arc<[usize]>),
    SegDiff(usize, usize, Arc<[usize]>),
    Gather(usize, Arc<[usize]>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::MaxConst(..) => "max-const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "reciprocal",
            Op::Relu(..) => "relu",
            Op::Logistic(..) => "logistic",
            Op::MatMulT(..) => "matvec",
            Op::AddRow(..) => "add-row",
            Op::SumRows(..) => "sum-rows",
            Op::Mean(..) => "mean",
            Op::SegCumsum(..) => "segment-cumsum",
            Op::SegDiff(..) => "segment-diff",
            Op::Gather(..) => "gather",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Append-only record of 2-D tensor operations for reverse-mode
/// differentiation. Operands always precede their consumers, so one reverse
/// sweep visits nodes in a valid topological order.
///
/// Binary elementwise operations accept equal shapes or a 1×1 operand on
/// either side. Segment operations work on column vectors whose rows are split
/// into consecutive runs of the given lengths.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A leaf that gradients are not propagated to.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn scalar_param(&mut self, value: f64) -> Var {
        self.param(Array2::from_elem((1, 1), value))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[self.idx(v)].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "not a scalar node");
        value[[0, 0]]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value = if va.dim() == vb.dim() {
            Zip::from(va).and(vb).map_collect(|&x, &y| f(x, y))
        } else if vb.dim() == (1, 1) {
            let y = vb[[0, 0]];
            va.mapv(|x| f(x, y))
        } else if va.dim() == (1, 1) {
            let x = va[[0, 0]];
            vb.mapv(|y| f(x, y))
        } else {
            panic!("shape mismatch {:?} vs {:?}", va.dim(), vb.dim());
        };
        let g = self.grad_of(&[ia, ib]);
        self.push(op(ia, ib), value, g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.mapv(f);
        let g = self.nodes[ia].needs_grad;
        self.push(op, value, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, |x| -x, Op::Neg(i))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let i = self.idx(a);
        self.unary(a, |x| x * c, Op::Scale(i, c))
    }

    /// `max(x, c)`; the derivative at `x == c` is 0.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let i = self.idx(a);
        self.unary(a, |x| x.max(c), Op::MaxConst(i, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, f64::exp, Op::Exp(i))
    }

    /// Natural logarithm; non-positive inputs produce non-finite values that
    /// [`Tape::backward`] reports.
    pub fn log(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, f64::ln, Op::Log(i))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, |x| 1.0 / x, Op::Recip(i))
    }

    /// Elementwise ReLU; the derivative at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, |x| x.max(0.0), Op::Relu(i))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, logistic, Op::Logistic(i))
    }

    /// Row-wise matrix-vector product: for `x` of shape n×k and `w` of shape
    /// m×k returns the n×m matrix whose row r is `w · x_r`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        assert_eq!(vx.ncols(), vw.ncols(), "inner dimensions differ");
        let value = vx.dot(&vw.t());
        let g = self.grad_of(&[ix, iw]);
        self.push(Op::MatMulT(ix, iw), value, g)
    }

    /// Adds the 1×m row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (ix, ib) = (self.idx(x), self.idx(b));
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        assert_eq!(vb.dim(), (1, vx.ncols()), "bias must be a 1×m row");
        let value = vx + vb;
        let g = self.grad_of(&[ix, ib]);
        self.push(Op::AddRow(ix, ib), value, g)
    }

    /// Sum of every row, as an n×1 column.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let value = self.nodes[ix].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.nodes[ix].needs_grad;
        self.push(Op::SumRows(ix), value, g)
    }

    /// Mean over all elements, as a 1×1 scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let g = v.len() > 0 && self.nodes[ix].needs_grad;
        self.push(Op::Mean(ix), value, g)
    }

    fn check_segments(&self, i: usize, segments: &[usize]) {
        let v = &self.nodes[i].value;
        assert_eq!(v.ncols(), 1, "segment ops take a column vector");
        assert_eq!(segments.iter().sum::<usize>(), v.nrows(), "segments must cover every row");
    }

    /// Cumulative sum restarting at every segment.
    pub fn segment_cumsum(&mut self, x: Var, segments: Arc<[usize]>) -> Var {
        let ix = self.idx(x);
        self.check_segments(ix, &segments);
        let src = &self.nodes[ix].value;
        let mut value = Array2::zeros(src.raw_dim());
        let mut r = 0;
        for &len in segments.iter() {
            let mut acc = 0.0;
            for k in r..r + len {
                acc += src[[k, 0]];
                value[[k, 0]] = acc;
            }
            r += len;
        }
        let g = self.nodes[ix].needs_grad;
        self.push(Op::SegCumsum(ix, segments), value, g)
    }

    /// Successive differences within each segment; the first row of every
    /// segment subtracts the 1×1 `initial` value.
    pub fn segment_diff(&mut self, x: Var, initial: Var, segments: Arc<[usize]>) -> Var {
        let (ix, ii) = (self.idx(x), self.idx(initial));
        self.check_segments(ix, &segments);
        let src = &self.nodes[ix].value;
        let init = self.nodes[ii].value[[0, 0]];
        let mut value = Array2::zeros(src.raw_dim());
        let mut r = 0;
        for &len in segments.iter() {
            let mut prev = init;
            for k in r..r + len {
                value[[k, 0]] = src[[k, 0]] - prev;
                prev = src[[k, 0]];
            }
            r += len;
        }
        let g = self.grad_of(&[ix, ii]);
        self.push(Op::SegDiff(ix, ii, segments), value, g)
    }

    /// Picks the given rows of a column vector.
    pub fn gather(&mut self, x: Var, rows: Arc<[usize]>) -> Var {
        let ix = self.idx(x);
        let src = &self.nodes[ix].value;
        assert_eq!(src.ncols(), 1, "gather takes a column vector");
        let value = Array2::from_shape_fn((rows.len(), 1), |(i, _)| src[[rows[i], 0]]);
        let g = self.nodes[ix].needs_grad;
        self.push(Op::Gather(ix, rows), value, g)
    }

    /// Reverse sweep from the scalar `output`. Forward values are left
    /// untouched, so repeated calls give identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.idx(output);
        assert_eq!(self.nodes[out].value.dim(), (1, 1), "backward needs a scalar output");
        for (index, node) in self.nodes[..=out].iter().enumerate() {
            if let Some(&value) = node.value.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    kind: node.op.kind(),
                    index,
                    value,
                });
            }
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; out + 1];
        grads[out] = Some(Array2::ones((1, 1)));
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let val = |k: usize| &self.nodes[k].value;
            let wants = |k: usize| self.nodes[k].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], reduce_to(dy.clone(), val(*a)));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], reduce_to(dy, val(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], reduce_to(dy.clone(), val(*a)));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], reduce_to(-dy, val(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], reduce_to(broadcast_mul(&dy, val(*b)), val(*a)));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], reduce_to(broadcast_mul(&dy, val(*a)), val(*b)));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads[*a], -dy),
                Op::Scale(a, c) => accumulate(&mut grads[*a], dy * *c),
                Op::MaxConst(a, c) => {
                    let c = *c;
                    let g = Zip::from(&dy).and(val(*a)).map_collect(|&d, &x| if x > c { d } else { 0.0 });
                    accumulate(&mut grads[*a], g);
                }
                Op::Exp(a) => accumulate(&mut grads[*a], dy * &node.value),
                Op::Log(a) => {
                    let g = Zip::from(&dy).and(val(*a)).map_collect(|&d, &x| d / x);
                    accumulate(&mut grads[*a], g);
                }
                Op::Recip(a) => {
                    let g = Zip::from(&dy).and(&node.value).map_collect(|&d, &y| -d * y * y);
                    accumulate(&mut grads[*a], g);
                }
                Op::Relu(a) => {
                    let g = Zip::from(&dy).and(&node.value).map_collect(|&d, &y| if y > 0.0 { d } else { 0.0 });
                    accumulate(&mut grads[*a], g);
                }
                Op::Logistic(a) => {
                    let g = Zip::from(&dy).and(&node.value).map_collect(|&d, &y| d * y * (1.0 - y));
                    accumulate(&mut grads[*a], g);
                }
                Op::MatMulT(x, w) => {
                    if wants(*x) {
                        accumulate(&mut grads[*x], dy.dot(val(*w)));
                    }
                    if wants(*w) {
                        let slot = &mut grads[*w];
                        match slot {
                            Some(acc) => general_mat_mul(1.0, &dy.t(), val(*x), 1.0, acc),
                            None => *slot = Some(dy.t().dot(val(*x))),
                        }
                    }
                }
                Op::AddRow(x, b) => {
                    if wants(*b) {
                        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[*b], db);
                    }
                    if wants(*x) {
                        accumulate(&mut grads[*x], dy);
                    }
                }
                Op::SumRows(x) => {
                    let shape = val(*x).raw_dim();
                    let g = dy.broadcast(shape).expect("column broadcast").to_owned();
                    accumulate(&mut grads[*x], g);
                }
                Op::Mean(x) => {
                    let v = val(*x);
                    let g = Array2::from_elem(v.raw_dim(), dy[[0, 0]] / v.len() as f64);
                    accumulate(&mut grads[*x], g);
                }
                Op::SegCumsum(x, segments) => {
                    let mut g = Array2::zeros(dy.raw_dim());
                    let mut r = 0;
                    for &len in segments.iter() {
                        let mut acc = 0.0;
                        for k in (r..r + len).rev() {
                            acc += dy[[k, 0]];
                            g[[k, 0]] = acc;
                        }
                        r += len;
                    }
                    accumulate(&mut grads[*x], g);
                }
                Op::SegDiff(x, init, segments) => {
                    if wants(*x) {
                        let mut g = dy.clone();
                        let mut r = 0;
                        for &len in segments.iter() {
                            for k in r + 1..r + len {
                                g[[k - 1, 0]] -= dy[[k, 0]];
                            }
                            r += len;
                        }
                        accumulate(&mut grads[*x], g);
                    }
                    if wants(*init) {
                        let mut r = 0;
                        let mut total = 0.0;
                        for &len in segments.iter() {
                            if len > 0 {
                                total -= dy[[r, 0]];
                            }
                            r += len;
                        }
                        accumulate(&mut grads[*init], Array2::from_elem((1, 1), total));
                    }
                }
                Op::Gather(x, rows) => {
                    let mut g = Array2::zeros(val(*x).raw_dim());
                    for (i, &row) in rows.iter().enumerate() {
                        g[[row, 0]] += dy[[i, 0]];
                    }
                    accumulate(&mut grads[*x], g);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn broadcast_mul(dy: &Array2<f64>, other: &Array2<f64>) -> Array2<f64> {
    if other.dim() == dy.dim() {
        dy * other
    } else if other.dim() == (1, 1) {
        dy * other[[0, 0]]
    } else {
        // dy is 1×1 and the other operand is full-sized
        other * dy[[0, 0]]
    }
}

/// Sums a broadcast gradient back down to the operand's 1×1 shape.
fn reduce_to(g: Array2<f64>, operand: &Array2<f64>) -> Array2<f64> {
    if g.dim() == operand.dim() {
        g
    } else if operand.dim() == (1, 1) {
        Array2::from_elem((1, 1), g.sum())
    } else {
        // the operand is full-sized and the output gradient is 1×1
        Array2::from_elem(operand.raw_dim(), g[[0, 0]])
    }
}

/// Gradients of a scalar with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when `v` does not influence
    /// the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(v).raw_dim()))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, |g| g[[0, 0]])
    }
}
