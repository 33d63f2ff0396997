use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`, element-wise.
    Affine(Var, f64),
    MatVec(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Exp(Var),
    Log {
        input: Var,
        floor: f64,
    },
    Square(Var),
    Softmax(Var),
    StopGradient,
    Index(Var, usize),
    MeanOf(Vec<Var>),
    WeightedMean {
        inputs: Vec<Var>,
        weights: Vec<f64>,
        total: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, same shape as its value.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_shape(node.value.shape(), node.grad.clone())
            .expect("gradient buffer always matches value shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient (inputs, labels, frozen values).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_shape(src.shape(), data).expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_shape(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_shape(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Element-wise product of two same-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_shape(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn div_scalar(&mut self, x: Var, divisor: f64) -> Result<Var> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(Error::Domain(format!("division by {divisor}")));
        }
        let inv = 1.0 / divisor;
        Ok(self.unary(x, Op::Affine(x, inv), |v| v / divisor))
    }

    /// Matrix-vector product `w · x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(w) {
            Shape::Matrix(r, c) => (r, c),
            other => return Err(Error::dim("matvec", format!("left operand is {other}"))),
        };
        match self.shape(x) {
            Shape::Vector(n) if n == cols => {}
            other => {
                return Err(Error::dim(
                    "matvec",
                    format!("matrix[{rows}x{cols}] times {other}"),
                ))
            }
        }
        let wd = self.data(w);
        let xd = self.data(x);
        let out = (0..rows)
            .map(|r| {
                let row = &wd[r * cols..(r + 1) * cols];
                row.iter().zip(xd).map(|(a, b)| a * b).sum()
            })
            .collect();
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log of `max(x, floor)`; zero gradient where the floor is active.
    pub fn log_floored(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Log { input: x, floor }, |v| v.max(floor).ln())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        Ok(self.log_floored(x, 0.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::dim("mean", "empty input"));
        }
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(x), needs))
    }

    /// Euclidean norm; the subgradient at the origin is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.needs(x);
        self.push(Tensor::scalar(n), Op::L2Norm(x), needs)
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if !matches!(self.shape(x), Shape::Vector(n) if n > 0) {
            return Err(Error::dim(
                "softmax",
                format!("needs a non-empty vector, got {}", self.shape(x)),
            ));
        }
        let out = softmax_values(self.data(x));
        let needs = self.needs(x);
        Ok(self.push(Tensor::vector(out), Op::Softmax(x), needs))
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Component `i` of a vector as a scalar node.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.data(x).len();
        if i >= n {
            return Err(Error::dim("index", format!("index {i} into length {n}")));
        }
        let v = self.data(x)[i];
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Index(x, i), needs))
    }

    /// `(x_1 + ... + x_n) / n` over same-shape nodes.
    pub fn mean_of(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("mean_of", "no inputs"))?;
        for &v in &inputs[1..] {
            self.same_shape("mean_of", first, v)?;
        }
        let shape = self.shape(first);
        let mut acc = vec![0.0; shape.len()];
        for &v in inputs {
            for (a, x) in acc.iter_mut().zip(self.data(v)) {
                *a += x;
            }
        }
        let n = inputs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_shape(shape, acc)?,
            Op::MeanOf(inputs.to_vec()),
            needs,
        ))
    }

    /// `(w_1 x_1 + ... + w_n x_n) / (w_1 + ... + w_n)` with constant weights.
    ///
    /// With all weights equal to one this performs exactly the arithmetic of
    /// [`Graph::mean_of`], so both give bit-identical values and gradients.
    pub fn weighted_mean(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        if inputs.len() != weights.len() {
            return Err(Error::dim(
                "weighted_mean",
                format!("{} inputs, {} weights", inputs.len(), weights.len()),
            ));
        }
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("weighted_mean", "no inputs"))?;
        for &v in &inputs[1..] {
            self.same_shape("weighted_mean", first, v)?;
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate(format!("weight total {total}")));
        }
        let shape = self.shape(first);
        let mut acc = vec![0.0; shape.len()];
        for (&v, &w) in inputs.iter().zip(weights) {
            for (a, x) in acc.iter_mut().zip(self.data(v)) {
                *a += w * x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        let needs = inputs.iter().any(|&v| self.needs(v));
        let op = Op::WeightedMean {
            inputs: inputs.to_vec(),
            weights: weights.to_vec(),
            total,
        };
        Ok(self.push(Tensor::from_shape(shape, acc)?, op, needs))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// node's buffer; call [`Graph::zero_grad`] between passes to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != Shape::Scalar {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            {
                let node = &mut self.nodes[i];
                for (acc, d) in node.grad.iter_mut().zip(&g) {
                    *acc += d;
                }
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, |buf| add_into(buf, g));
                self.accumulate(adj, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, |buf| add_into(buf, g));
                self.accumulate(adj, *b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(adj, *a, |buf| {
                    for ((x, d), o) in buf.iter_mut().zip(g).zip(bd) {
                        *x += d * o;
                    }
                });
                self.accumulate(adj, *b, |buf| {
                    for ((x, d), o) in buf.iter_mut().zip(g).zip(ad) {
                        *x += d * o;
                    }
                });
            }
            Op::Affine(x, scale) => {
                self.accumulate(adj, *x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, d)| *b += scale * d);
                });
            }
            Op::MatVec(w, x) => {
                let Shape::Matrix(rows, cols) = self.shape(*w) else {
                    unreachable!("checked at construction")
                };
                let (wd, xd) = (self.data(*w), self.data(*x));
                self.accumulate(adj, *w, |buf| {
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &mut buf[r * cols..(r + 1) * cols];
                        row.iter_mut().zip(xd).for_each(|(b, xv)| *b += gr * xv);
                    }
                });
                self.accumulate(adj, *x, |buf| {
                    for r in 0..rows {
                        let gr = g[r];
                        let row = &wd[r * cols..(r + 1) * cols];
                        buf.iter_mut().zip(row).for_each(|(b, wv)| *b += gr * wv);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.accumulate(adj, *x, |buf| {
                    for ((b, d), v) in buf.iter_mut().zip(g).zip(xd) {
                        if *v > 0.0 {
                            *b += d;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(adj, *x, |buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
            Op::Mean(x) => {
                let n = self.data(*x).len() as f64;
                self.accumulate(adj, *x, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
            }
            Op::L2Norm(x) => {
                let norm = out[0];
                if norm > 0.0 {
                    let xd = self.data(*x);
                    self.accumulate(adj, *x, |buf| {
                        buf.iter_mut()
                            .zip(xd)
                            .for_each(|(b, v)| *b += g[0] * v / norm);
                    });
                }
            }
            Op::Exp(x) => {
                self.accumulate(adj, *x, |buf| {
                    for ((b, d), y) in buf.iter_mut().zip(g).zip(out) {
                        *b += d * y;
                    }
                });
            }
            Op::Log { input, floor } => {
                let xd = self.data(*input);
                self.accumulate(adj, *input, |buf| {
                    for ((b, d), v) in buf.iter_mut().zip(g).zip(xd) {
                        if *v > *floor {
                            *b += d / v;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                self.accumulate(adj, *x, |buf| {
                    for ((b, d), v) in buf.iter_mut().zip(g).zip(xd) {
                        *b += 2.0 * v * d;
                    }
                });
            }
            Op::Softmax(x) => {
                let dot: f64 = g.iter().zip(out).map(|(d, p)| d * p).sum();
                self.accumulate(adj, *x, |buf| {
                    for ((b, d), p) in buf.iter_mut().zip(g).zip(out) {
                        *b += p * (d - dot);
                    }
                });
            }
            Op::Index(x, k) => {
                self.accumulate(adj, *x, |buf| buf[*k] += g[0]);
            }
            Op::MeanOf(inputs) => {
                let n = inputs.len() as f64;
                for &v in inputs {
                    self.accumulate(adj, v, |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, d)| *b += d / n);
                    });
                }
            }
            Op::WeightedMean {
                inputs,
                weights,
                total,
            } => {
                for (&v, &w) in inputs.iter().zip(weights) {
                    self.accumulate(adj, v, |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, d)| *b += w * d / total);
                    });
                }
            }
        }
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = &mut adj[target.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(buf);
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(b, d)| *b += d);
}

/// Numerically stable softmax on plain values.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
        assert_eq!(g.grad(y).item(), 1.0);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let _unused = g.sum(x);
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 12.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
    }

    #[test]
    fn matvec_identity_and_zero() {
        let mut g = Graph::new();
        let eye =
            g.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.matvec(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let zero = g.constant(Tensor::zeros(Shape::Matrix(2, 3)));
        let y = g.matvec(zero, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_shape_mismatch() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(Shape::Matrix(2, 3)));
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.matvec(w, x), Err(Error::Dimension { .. })));
        assert!(matches!(g.matvec(x, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.3; 10]));
        let p = g.softmax(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 0.1).abs() < 1e-15);
        }

        let x = g.constant(Tensor::vector(vec![9f64.ln(), 0.0]));
        let p = g.softmax(x).unwrap();
        assert!((g.value(p).data()[0] - 0.9).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 0.1).abs() < 1e-15);

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let p = g.softmax(x).unwrap();
        assert!(g.value(p).is_finite());
        assert!((g.value(p).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(p).data()[1] < 1e-300);

        let empty = g.constant(Tensor::vector(vec![]));
        assert!(g.softmax(empty).is_err());
    }

    #[test]
    fn stop_gradient_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.37));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s).item(), 0.37);
        let out = g.affine(s, 5.0, 0.0);
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).item(), 0.0);

        // loss = sg(x) * x at x = 2 -> dL/dx = 2
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let s = g.stop_gradient(x);
        let loss = g.mul(s, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).item(), 2.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let s1 = g.stop_gradient(x);
        let s2 = g.stop_gradient(s1);
        let loss = g.mul(s2, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.value(s2).item(), 2.0);
        assert_eq!(g.grad(x).item(), 2.0);
    }

    #[test]
    fn weighted_mean_with_unit_weights_matches_mean_of() {
        let vals = [[0.1, -0.7], [1.3, 0.2], [0.45, 2.5]];
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|v| g.param(Tensor::vector(v.to_vec())))
            .collect();
        let a = g.mean_of(&vars).unwrap();
        let b = g.weighted_mean(&vars, &[1.0; 3]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn weighted_mean_rejects_zero_total() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(1.0));
        assert!(matches!(
            g.weighted_mean(&[a], &[0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn l2_norm_subgradient_at_origin_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 0.0]));
        let n = g.l2_norm(x);
        g.backward(n).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_floor_blocks_gradient_below_floor() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.log_floored(x, 1e-12);
        assert_eq!(g.value(y).item(), 1e-12f64.ln());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 0.0);
    }
}
