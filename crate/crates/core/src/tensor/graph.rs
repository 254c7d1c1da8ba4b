use std::cell::RefCell;
use std::rc::Rc;

use super::{broadcast_index_map, broadcast_shape, strides, Result, Tensor, TensorError};

/// Backward rule recorded for each node. Parent ids are always smaller than
/// the node's own id, so reverse creation order is a valid topological order.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sqrt(usize),
    Tanh(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SumAxes(usize, Vec<usize>),
    MaxAxis(usize, Vec<usize>),
    Softmax(usize, usize),
    Conv2d(usize, Rc<Tensor>),
    Std(usize),
    Select(usize, usize, usize),
    Stack(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only tape. One graph per thread; variables borrow it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn stack<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let values: Vec<Tensor> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let out = Tensor::stack(&values)?;
        Ok(self.push(out, Op::Stack(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[out.id].value.shape().to_vec();
        if nodes[out.id].value.len() != 1 {
            return Err(TensorError::NonScalar(out_shape));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[out.id] = Some(Tensor::full(&out_shape, 1.0));
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(delta.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index_map(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    for (i, &j) in map.iter().enumerate() {
        out.data[j] += g.data[i];
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            accumulate(grads, *b, reduce_to(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            accumulate(grads, *b, reduce_to(&g.scale(-1.0), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ma, mb) = binary_maps(av, bv, g.shape());
            let ga = Tensor {
                shape: g.shape.clone(),
                data: (0..g.len()).map(|i| g.data[i] * bv.data[mb.at(i)]).collect(),
            };
            let gb = Tensor {
                shape: g.shape.clone(),
                data: (0..g.len()).map(|i| g.data[i] * av.data[ma.at(i)]).collect(),
            };
            accumulate(grads, *a, reduce_to(&ga, av.shape()));
            accumulate(grads, *b, reduce_to(&gb, bv.shape()));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ma, mb) = binary_maps(av, bv, g.shape());
            let ga = Tensor {
                shape: g.shape.clone(),
                data: (0..g.len()).map(|i| g.data[i] / bv.data[mb.at(i)]).collect(),
            };
            let gb = Tensor {
                shape: g.shape.clone(),
                data: (0..g.len())
                    .map(|i| {
                        let d = bv.data[mb.at(i)];
                        -g.data[i] * av.data[ma.at(i)] / (d * d)
                    })
                    .collect(),
            };
            accumulate(grads, *a, reduce_to(&ga, av.shape()));
            accumulate(grads, *b, reduce_to(&gb, bv.shape()));
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ma, mb) = binary_maps(av, bv, g.shape());
            let mut ga = Tensor::zeros(g.shape());
            let mut gb = Tensor::zeros(g.shape());
            for i in 0..g.len() {
                if av.data[ma.at(i)] <= bv.data[mb.at(i)] {
                    ga.data[i] = g.data[i];
                } else {
                    gb.data[i] = g.data[i];
                }
            }
            accumulate(grads, *a, reduce_to(&ga, av.shape()));
            accumulate(grads, *b, reduce_to(&gb, bv.shape()));
        }
        Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * y).unwrap()),
        Op::Ln(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g / x).unwrap()),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x).unwrap()),
        Op::Sqrt(a) => accumulate(
            grads,
            *a,
            g.zip_map(out, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                .unwrap(),
        ),
        Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * (1.0 - y * y)).unwrap()),
        Op::ClampMin(a, lo) => accumulate(
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > *lo { g } else { 0.0 }).unwrap(),
        ),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut ga = Tensor::zeros(&[m, k]);
            let mut gb = Tensor::zeros(&[k, n]);
            for i in 0..m {
                let grow = &g.data[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv.data[p * n..(p + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    ga.data[i * k + p] = acc;
                    let aip = av.data[i * k + p];
                    let gbrow = &mut gb.data[p * n..(p + 1) * n];
                    for j in 0..n {
                        gbrow[j] += aip * grow[j];
                    }
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, *a, Tensor { shape, data: g.data.clone() });
        }
        Op::Permute(a, perm) => {
            let src = val(*a);
            let map = permute_map(src.shape(), perm);
            let mut ga = Tensor::zeros(src.shape());
            for (i, &j) in map.iter().enumerate() {
                ga.data[j] = g.data[i];
            }
            accumulate(grads, *a, ga);
        }
        Op::SumAxes(a, keep_shape) => {
            let src = val(*a);
            let map = broadcast_index_map(keep_shape, src.shape());
            let ga = Tensor {
                shape: src.shape.clone(),
                data: map.iter().map(|&j| g.data[j]).collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::MaxAxis(a, arg) => {
            let mut ga = Tensor::zeros(val(*a).shape());
            for (i, &j) in arg.iter().enumerate() {
                ga.data[j] += g.data[i];
            }
            accumulate(grads, *a, ga);
        }
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let mut ga = Tensor::zeros(out.shape());
            for o in 0..outer {
                for k in 0..inner {
                    let base = o * n * inner + k;
                    let mut dot = 0.0;
                    for i in 0..n {
                        let p = base + i * inner;
                        dot += g.data[p] * out.data[p];
                    }
                    for i in 0..n {
                        let p = base + i * inner;
                        ga.data[p] = out.data[p] * (g.data[p] - dot);
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Conv2d(a, kernel) => {
            let ga = conv2d_transpose(g, kernel);
            accumulate(grads, *a, ga);
        }
        Op::Std(a) => {
            let x = val(*a);
            let s = out.data[0];
            let n = x.len() as f64;
            let m = x.mean();
            let ga = if s > 0.0 {
                x.map(|v| g.data[0] * (v - m) / (n * s))
            } else {
                Tensor::zeros(x.shape())
            };
            accumulate(grads, *a, ga);
        }
        Op::Select(a, axis, index) => {
            let src = val(*a);
            let (outer, n, inner) = axis_split(src.shape(), *axis);
            let mut ga = Tensor::zeros(src.shape());
            for o in 0..outer {
                let dst = o * n * inner + index * inner;
                ga.data[dst..dst + inner].copy_from_slice(&g.data[o * inner..(o + 1) * inner]);
            }
            accumulate(grads, *a, ga);
        }
        Op::Stack(parts) => {
            let inner = g.len() / parts.len();
            for (i, &p) in parts.iter().enumerate() {
                let shape = val(p).shape().to_vec();
                let data = g.data[i * inner..(i + 1) * inner].to_vec();
                accumulate(grads, p, Tensor { shape, data });
            }
        }
    }
}

/// Index maps for a broadcasting binary op; `Same` avoids materializing the
/// identity map.
enum IndexMap {
    Same,
    Map(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Map(m) => m[i],
        }
    }
}

fn binary_maps(a: &Tensor, b: &Tensor, out: &[usize]) -> (IndexMap, IndexMap) {
    let map = |t: &Tensor| {
        if t.shape() == out {
            IndexMap::Same
        } else {
            IndexMap::Map(broadcast_index_map(t.shape(), out))
        }
    };
    (map(a), map(b))
}

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ma, mb) = binary_maps(a, b, &shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| f(a.data[ma.at(i)], b.data[mb.at(i)])).collect();
    Ok(Tensor { shape, data })
}

/// For each flat index of the permuted output, the source flat index.
fn permute_map(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn conv2d_forward(x: &Tensor, kernel: &Tensor) -> Tensor {
    let nd = x.ndim();
    let (h, w) = (x.shape[nd - 2], x.shape[nd - 1]);
    let ks = kernel.shape[0];
    let r = (ks / 2) as isize;
    let planes = x.len() / (h * w);
    let mut out = Tensor::zeros(x.shape());
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for dy in 0..ks as isize {
                    let sy = y + dy - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks as isize {
                        let sx = xx + dx - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kernel.data[(dy as usize) * ks + dx as usize]
                            * src[sy as usize * w + sx as usize];
                    }
                }
                dst[y as usize * w + xx as usize] = acc;
            }
        }
    }
    out
}

fn conv2d_transpose(g: &Tensor, kernel: &Tensor) -> Tensor {
    let nd = g.ndim();
    let (h, w) = (g.shape[nd - 2], g.shape[nd - 1]);
    let ks = kernel.shape[0];
    let r = (ks / 2) as isize;
    let planes = g.len() / (h * w);
    let mut out = Tensor::zeros(g.shape());
    for p in 0..planes {
        let src = &g.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let gv = src[y as usize * w + xx as usize];
                for dy in 0..ks as isize {
                    let sy = y + dy - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks as isize {
                        let sx = xx + dx - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[sy as usize * w + sx as usize] +=
                            kernel.data[(dy as usize) * ks + dx as usize] * gv;
                    }
                }
            }
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.push(out, op)
    }

    fn check_same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables belong to different graphs"
        );
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let out = binary_forward("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.graph.push(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let out = binary_forward("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.graph.push(out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let out = binary_forward("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.graph.push(out, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let out = binary_forward("div", &self.value(), &other.value(), |a, b| a / b)?;
        Ok(self.graph.push(out, Op::Div(self.id, other.id)))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let out = binary_forward("minimum", &self.value(), &other.value(), |a, b| {
            if a <= b {
                a
            } else {
                b
            }
        })?;
        Ok(self.graph.push(out, Op::Minimum(self.id, other.id)))
    }

    pub fn scale(&self, k: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, k), |x| k * x)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'g> {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    fn check_nonnegative(&self, op: &'static str, strict: bool) -> Result<()> {
        let v = self.value();
        for (index, &value) in v.data().iter().enumerate() {
            if value < 0.0 || (strict && value == 0.0) || value.is_nan() {
                return Err(TensorError::NegativeInput { op, index, value });
            }
        }
        Ok(())
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn ln(&self) -> Result<Var<'g>> {
        self.check_nonnegative("ln", true)?;
        Ok(self.unary(Op::Ln(self.id), f64::ln))
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        self.check_nonnegative("sqrt", false)?;
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id)))
    }

    /// Explicit broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let target = broadcast_shape("broadcast_to", v.shape(), shape)?;
        if target != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: v.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let zeros = self.graph.leaf(Tensor::zeros(shape));
        zeros.add(*self)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= v.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {:?}", v.shape),
            });
        }
        let map = permute_map(v.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape[p]).collect();
        let data = map.iter().map(|&j| v.data[j]).collect();
        Ok(self.graph.push(Tensor { shape, data }, Op::Permute(self.id, perm.to_vec())))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Var<'g>> {
        self.permute(&[1, 0])
    }

    /// Sum over `axes`; reduced axes are dropped unless `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        let v = self.value();
        let mut keep_shape = v.shape.clone();
        for &a in axes {
            if a >= v.ndim() {
                return Err(TensorError::Invalid {
                    op: "sum_axes",
                    msg: format!("axis {a} out of range for {:?}", v.shape),
                });
            }
            keep_shape[a] = 1;
        }
        let map = broadcast_index_map(&keep_shape, v.shape());
        let mut out = Tensor::zeros(&keep_shape);
        for (i, &j) in map.iter().enumerate() {
            out.data[j] += v.data[i];
        }
        if !keepdim {
            out.shape = v
                .shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
        }
        let node = self.graph.push(out, Op::SumAxes(self.id, keep_shape));
        Ok(node)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes, keepdim)?.scale(1.0 / n as f64))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = self.value();
        let out = Tensor::scalar(v.sum());
        let keep = vec![1; v.ndim()];
        self.graph.push(out, Op::SumAxes(self.id, keep))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Maximum along `axis`; the gradient goes to the first attaining element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(TensorError::Invalid {
                op: "max_axis",
                msg: format!("axis {axis} out of range for {:?}", v.shape),
            });
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for k in 0..inner {
                let base = o * n * inner + k;
                let mut best = base;
                for i in 1..n {
                    let p = base + i * inner;
                    if v.data[p] > v.data[best] {
                        best = p;
                    }
                }
                data.push(v.data[best]);
                arg.push(best);
            }
        }
        let mut shape = v.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self.graph.push(Tensor { shape, data }, Op::MaxAxis(self.id, arg)))
    }

    /// Maximum over all elements, as a scalar.
    pub fn max(&self) -> Var<'g> {
        let v = self.value();
        let mut best = 0;
        for i in 1..v.len() {
            if v.data[i] > v.data[best] {
                best = i;
            }
        }
        self.graph
            .push(Tensor::scalar(v.data[best]), Op::MaxAxis(self.id, vec![best]))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", v.shape),
            });
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = Tensor::zeros(v.shape());
        for o in 0..outer {
            for k in 0..inner {
                let base = o * n * inner + k;
                let mut m = f64::NEG_INFINITY;
                for i in 0..n {
                    m = m.max(v.data[base + i * inner]);
                }
                let mut s = 0.0;
                for i in 0..n {
                    let e = (v.data[base + i * inner] - m).exp();
                    out.data[base + i * inner] = e;
                    s += e;
                }
                for i in 0..n {
                    out.data[base + i * inner] /= s;
                }
            }
        }
        Ok(self.graph.push(out, Op::Softmax(self.id, axis)))
    }

    /// Same-size 2-D convolution over the last two axes with zero padding.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Var<'g>> {
        let v = self.value();
        if kernel.ndim() != 2 || kernel.shape[0] != kernel.shape[1] || kernel.shape[0] % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel must be square with odd side, got {:?}", kernel.shape),
            });
        }
        if v.ndim() < 2 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input needs at least two axes, got {:?}", v.shape),
            });
        }
        let out = conv2d_forward(&v, kernel);
        Ok(self.graph.push(out, Op::Conv2d(self.id, Rc::new(kernel.clone()))))
    }

    /// Population standard deviation of all elements.
    pub fn std(&self) -> Var<'g> {
        let s = self.value().std();
        self.graph.push(Tensor::scalar(s), Op::Std(self.id))
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.ndim() || index >= v.shape[axis] {
            return Err(TensorError::Invalid {
                op: "select",
                msg: format!("index {index} on axis {axis} out of range for {:?}", v.shape),
            });
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let src = o * n * inner + index * inner;
            data.extend_from_slice(&v.data[src..src + inner]);
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        Ok(self.graph.push(Tensor { shape, data }, Op::Select(self.id, axis, index)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let g = Graph::new();
        let x = g.leaf(Tensor::full(&[4], 3.0));
        let y = x.softmax(0).unwrap();
        for v in y.value().data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = x.square().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn log_and_sqrt_reject_negative_input() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -0.5]));
        assert!(matches!(x.ln(), Err(TensorError::NegativeInput { index: 1, .. })));
        assert!(matches!(x.sqrt(), Err(TensorError::NegativeInput { index: 1, .. })));
        let z = g.leaf(Tensor::from_vec(vec![0.0]));
        assert!(z.sqrt().is_ok());
        assert!(z.ln().is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x.exp()), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn max_ties_route_to_first_element() {
        let g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 5.0, 5.0, 7.0, 7.0, 2.0]));
        let m = x.max_axis(1, false).unwrap();
        assert_eq!(m.value().data(), &[5.0, 7.0]);
        let grads = g.backward(m.sum()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

        let g = Graph::new();
        let x = g.leaf(t(&[4], &[3.0, 1.0, 3.0, 0.0]));
        let grads = g.backward(x.max()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn minimum_ties_route_to_first_operand() {
        let g = Graph::new();
        let a = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.leaf(t(&[3], &[1.0, 0.0, 4.0]));
        let m = a.minimum(b).unwrap();
        assert_eq!(m.value().data(), &[1.0, 0.0, 3.0]);
        let grads = g.backward(m.sum()).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0, 0.0, 1.0]);
        assert_eq!(grads.wrt(b).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let g = Graph::new();
        let a = g.leaf(t(&[2, 1], &[1.0, 2.0]));
        let b = g.leaf(t(&[3], &[1.0, 10.0, 100.0]));
        let y = a.mul(b).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(a).data(), &[111.0, 111.0]);
        assert_eq!(grads.wrt(b).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn matmul_and_transpose() {
        let g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t(&[3, 1], &[1.0, 0.0, -1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[-2.0, -2.0]);
        let at = a.t().unwrap();
        assert_eq!(at.shape(), vec![3, 2]);
        assert_eq!(at.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn sum_axes_shapes() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        assert_eq!(x.sum_axes(&[1], false).unwrap().shape(), vec![2, 4]);
        assert_eq!(x.sum_axes(&[0, 2], true).unwrap().shape(), vec![1, 3, 1]);
        let s = x.sum_axes(&[0, 1, 2], false).unwrap();
        assert_eq!(s.item(), (0..24).sum::<usize>() as f64);
    }

    #[test]
    fn conv_with_delta_kernel_is_identity() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 3], |i| i as f64));
        let k = t(&[3, 3], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let y = x.conv2d(&k).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        assert!(x.conv2d(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn select_and_stack_are_inverse() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let parts: Vec<_> = (0..3).map(|i| x.select(0, i).unwrap()).collect();
        let y = g.stack(&parts).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        let mid = x.select(1, 1).unwrap();
        assert_eq!(mid.value().data(), &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0]);
    }
}
