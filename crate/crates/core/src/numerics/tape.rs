//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Every differentiable operation is a [`Primitive`] with a pure forward
//! evaluation and a vector-Jacobian product. A [`Tape`] records primitives in
//! call order; [`Tape::backward`] replays them in exact reverse order.
//!
//! ```
//! use ncl::numerics::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let sq = tape.mul(x, x).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::collections::HashMap;
use std::fmt;

use super::matrix::{dot, Matrix};
use super::params::ParamId;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a [`Primitive`], used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Mul,
    Relu,
    MaxPoolRows,
    ScaleRows,
    ConcatCols,
    SelectRows,
    StackRows,
    Sum,
    Scale,
    CosineMatrix,
    NceRows,
    MaskedMean,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::MaxPoolRows,
        OpKind::ScaleRows,
        OpKind::ConcatCols,
        OpKind::SelectRows,
        OpKind::StackRows,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::CosineMatrix,
        OpKind::NceRows,
        OpKind::MaskedMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::MaxPoolRows => "maxpool_rows",
            OpKind::ScaleRows => "scale_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SelectRows => "select_rows",
            OpKind::StackRows => "stack_rows",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::CosineMatrix => "cosine_matrix",
            OpKind::NceRows => "nce_rows",
            OpKind::MaskedMean => "masked_mean",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A differentiable operation together with its non-differentiable
/// configuration (constant weights, indices, temperature, mask).
#[derive(Clone, Debug)]
pub enum Primitive {
    Leaf,
    MatMul,
    /// `x (r x c) + b (1 x c)` broadcast over rows.
    AddBias,
    Add,
    /// Elementwise product.
    Mul,
    Relu,
    /// Per-column maximum over rows; ties go to the lowest row.
    MaxPoolRows,
    /// Row `i` scaled by the constant `weights[i]`.
    ScaleRows(Vec<f64>),
    ConcatCols,
    SelectRows(Vec<usize>),
    /// Vertical concatenation of inputs sharing a column count.
    StackRows,
    Sum,
    Scale(f64),
    /// `out[i][j] = cos(a_i, b_j)` between rows of the two inputs.
    CosineMatrix,
    /// Row-wise `-log softmax(s_i / tau)_i` of a square similarity matrix.
    NceRows {
        tau: f64,
    },
    /// `(1/B) sum_i mask_i x_i` of a `B x 1` column.
    MaskedMean(Vec<f64>),
}

impl Primitive {
    pub fn kind(&self) -> OpKind {
        match self {
            Primitive::Leaf => OpKind::Leaf,
            Primitive::MatMul => OpKind::MatMul,
            Primitive::AddBias => OpKind::AddBias,
            Primitive::Add => OpKind::Add,
            Primitive::Mul => OpKind::Mul,
            Primitive::Relu => OpKind::Relu,
            Primitive::MaxPoolRows => OpKind::MaxPoolRows,
            Primitive::ScaleRows(_) => OpKind::ScaleRows,
            Primitive::ConcatCols => OpKind::ConcatCols,
            Primitive::SelectRows(_) => OpKind::SelectRows,
            Primitive::StackRows => OpKind::StackRows,
            Primitive::Sum => OpKind::Sum,
            Primitive::Scale(_) => OpKind::Scale,
            Primitive::CosineMatrix => OpKind::CosineMatrix,
            Primitive::NceRows { .. } => OpKind::NceRows,
            Primitive::MaskedMean(_) => OpKind::MaskedMean,
        }
    }

    fn arity_error(&self, n: usize) -> Error {
        Error::shape(self.kind().name(), format!("wrong number of inputs ({n})"))
    }

    /// Forward evaluation.
    pub fn eval(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let op = self.kind().name();
        match (self, inputs) {
            (Primitive::Leaf, _) => Err(Error::shape(op, "leaves carry their own value")),
            (Primitive::MatMul, [a, b]) => a.matmul(b),
            (Primitive::AddBias, [x, b]) => {
                if b.rows() != 1 || b.cols() != x.cols() {
                    return Err(Error::shape(
                        op,
                        format!("bias {:?} for input {:?}", b.shape(), x.shape()),
                    ));
                }
                let mut out = (*x).clone();
                for r in 0..out.rows() {
                    for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Ok(out)
            }
            (Primitive::Add, [a, b]) => a.add(b),
            (Primitive::Mul, [a, b]) => a.hadamard(b),
            (Primitive::Relu, [x]) => Ok(x.map(|v| v.max(0.0))),
            (Primitive::MaxPoolRows, [x]) => {
                if x.rows() == 0 {
                    return Err(Error::Degenerate("maxpool over an empty matrix".into()));
                }
                let idx = argmax_rows(x);
                Ok(Matrix::row_vector(
                    idx.iter().enumerate().map(|(c, &r)| x.get(r, c)).collect(),
                ))
            }
            (Primitive::ScaleRows(w), [x]) => {
                if w.len() != x.rows() {
                    return Err(Error::shape(
                        op,
                        format!("{} weights for {} rows", w.len(), x.rows()),
                    ));
                }
                let mut out = (*x).clone();
                for (r, &wr) in w.iter().enumerate() {
                    for v in out.row_mut(r) {
                        *v *= wr;
                    }
                }
                Ok(out)
            }
            (Primitive::ConcatCols, [a, b]) => {
                if a.rows() != b.rows() {
                    return Err(Error::shape(
                        op,
                        format!("{:?} beside {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut data = Vec::with_capacity(a.len() + b.len());
                for r in 0..a.rows() {
                    data.extend_from_slice(a.row(r));
                    data.extend_from_slice(b.row(r));
                }
                Matrix::new(a.rows(), a.cols() + b.cols(), data)
            }
            (Primitive::SelectRows(idx), [x]) => x.select_rows(idx),
            (Primitive::StackRows, parts) => {
                let Some(first) = parts.first() else {
                    return Err(Error::shape(op, "nothing to stack"));
                };
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    if p.cols() != cols {
                        return Err(Error::shape(
                            op,
                            format!("column counts {} and {}", cols, p.cols()),
                        ));
                    }
                    data.extend_from_slice(p.data());
                    rows += p.rows();
                }
                Matrix::new(rows, cols, data)
            }
            (Primitive::Sum, [x]) => Ok(Matrix::scalar(x.sum())),
            (Primitive::Scale(s), [x]) => Ok(x.scale(*s)),
            (Primitive::CosineMatrix, [a, b]) => {
                if a.cols() != b.cols() {
                    return Err(Error::shape(
                        op,
                        format!("widths {} and {}", a.cols(), b.cols()),
                    ));
                }
                let na = row_norms(a)?;
                let nb = row_norms(b)?;
                let mut out = Matrix::zeros(a.rows(), b.rows());
                for i in 0..a.rows() {
                    for j in 0..b.rows() {
                        out.set(i, j, dot(a.row(i), b.row(j)) / (na[i] * nb[j]));
                    }
                }
                Ok(out)
            }
            (Primitive::NceRows { tau }, [s]) => {
                if s.rows() != s.cols() {
                    return Err(Error::shape(op, format!("non-square {:?}", s.shape())));
                }
                let out = (0..s.rows())
                    .map(|i| {
                        let z: Vec<f64> = s.row(i).iter().map(|v| v / tau).collect();
                        log_sum_exp(&z) - z[i]
                    })
                    .collect();
                Ok(Matrix::column_vector(out))
            }
            (Primitive::MaskedMean(mask), [x]) => {
                if x.cols() != 1 || x.rows() != mask.len() {
                    return Err(Error::shape(
                        op,
                        format!("mask of {} for {:?}", mask.len(), x.shape()),
                    ));
                }
                let b = mask.len() as f64;
                Ok(Matrix::scalar(dot(mask, x.data()) / b))
            }
            _ => Err(self.arity_error(inputs.len())),
        }
    }

    /// Vector-Jacobian product: gradients of `<upstream, out>` with respect
    /// to every input.
    pub fn vjp(&self, inputs: &[&Matrix], out: &Matrix, up: &Matrix) -> Result<Vec<Matrix>> {
        let grads = match (self, inputs) {
            (Primitive::Leaf, _) => vec![],
            (Primitive::MatMul, [a, b]) => {
                vec![up.matmul(&b.transpose())?, a.transpose().matmul(up)?]
            }
            (Primitive::AddBias, [_, b]) => {
                let mut gb = Matrix::zeros(1, b.cols());
                for r in 0..up.rows() {
                    for (g, u) in gb.data_mut().iter_mut().zip(up.row(r)) {
                        *g += u;
                    }
                }
                vec![up.clone(), gb]
            }
            (Primitive::Add, [_, _]) => vec![up.clone(), up.clone()],
            (Primitive::Mul, [a, b]) => vec![up.hadamard(b)?, up.hadamard(a)?],
            (Primitive::Relu, [x]) => {
                let mut g = up.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![g]
            }
            (Primitive::MaxPoolRows, [x]) => {
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for (c, r) in argmax_rows(x).into_iter().enumerate() {
                    g.set(r, c, up.get(0, c));
                }
                vec![g]
            }
            (Primitive::ScaleRows(w), [_]) => {
                let mut g = up.clone();
                for (r, &wr) in w.iter().enumerate() {
                    for v in g.row_mut(r) {
                        *v *= wr;
                    }
                }
                vec![g]
            }
            (Primitive::ConcatCols, [a, b]) => {
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                let mut gb = Matrix::zeros(b.rows(), b.cols());
                for r in 0..up.rows() {
                    let row = up.row(r);
                    ga.row_mut(r).copy_from_slice(&row[..a.cols()]);
                    gb.row_mut(r).copy_from_slice(&row[a.cols()..]);
                }
                vec![ga, gb]
            }
            (Primitive::SelectRows(idx), [x]) => {
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (gv, u) in g.row_mut(i).iter_mut().zip(up.row(k)) {
                        *gv += u;
                    }
                }
                vec![g]
            }
            (Primitive::StackRows, parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let idx: Vec<usize> = (offset..offset + p.rows()).collect();
                        offset += p.rows();
                        up.select_rows(&idx)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            (Primitive::Sum, [x]) => vec![Matrix::filled(x.rows(), x.cols(), up.item())],
            (Primitive::Scale(s), [_]) => vec![up.scale(*s)],
            (Primitive::CosineMatrix, [a, b]) => {
                let na = row_norms(a)?;
                let nb = row_norms(b)?;
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                let mut gb = Matrix::zeros(b.rows(), b.cols());
                for i in 0..a.rows() {
                    for j in 0..b.rows() {
                        let g = up.get(i, j);
                        if g == 0.0 {
                            continue;
                        }
                        let c = out.get(i, j);
                        let (ai, bj) = (a.row(i), b.row(j));
                        let (sa, sb) = (g / (na[i] * nb[j]), g * c);
                        let row_a = ga.row_mut(i);
                        for k in 0..ai.len() {
                            row_a[k] += sa * bj[k] - sb * ai[k] / (na[i] * na[i]);
                        }
                        let row_b = gb.row_mut(j);
                        for k in 0..bj.len() {
                            row_b[k] += sa * ai[k] - sb * bj[k] / (nb[j] * nb[j]);
                        }
                    }
                }
                vec![ga, gb]
            }
            (Primitive::NceRows { tau }, [s]) => {
                let n = s.rows();
                let mut g = Matrix::zeros(n, n);
                for i in 0..n {
                    let z: Vec<f64> = s.row(i).iter().map(|v| v / tau).collect();
                    let lse = log_sum_exp(&z);
                    let ui = up.get(i, 0);
                    for j in 0..n {
                        let p = (z[j] - lse).exp();
                        let delta = if i == j { 1.0 } else { 0.0 };
                        g.set(i, j, ui * (p - delta) / tau);
                    }
                }
                vec![g]
            }
            (Primitive::MaskedMean(mask), [_]) => {
                let b = mask.len() as f64;
                let u = up.item();
                vec![Matrix::column_vector(
                    mask.iter().map(|m| u * m / b).collect(),
                )]
            }
            _ => return Err(self.arity_error(inputs.len())),
        };
        Ok(grads)
    }
}

fn argmax_rows(x: &Matrix) -> Vec<usize> {
    (0..x.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..x.rows() {
                if x.get(r, c) > x.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|r| {
            let n = dot(m.row(r), m.row(r)).sqrt();
            if n == 0.0 {
                Err(Error::Degenerate(format!("row {r} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
struct Node {
    prim: Primitive,
    inputs: Vec<Var>,
    value: Matrix,
    param: Option<ParamId>,
}

/// Records primitive operations for one forward/backward pass.
///
/// A tape is single-threaded; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], one slot per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Matrix>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &Matrix {
        &self.slots[v.0]
    }
}

/// Relative factor applied to the VJP of a faulted op kind.
const FAULT_FACTOR: f64 = 1.5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: corrupt the backward rule of every op of `kind`.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].prim.kind()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            prim: Primitive::Leaf,
            inputs: vec![],
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; repeated calls return the same node so
    /// gradients accumulate into a single slot.
    pub(crate) fn param_leaf(&mut self, id: ParamId, value: &Matrix) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.nodes[v.0].param = Some(id);
        self.param_leaves.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_leaves.iter().map(|(&id, &v)| (id, v))
    }

    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = prim.eval(&values)?;
        self.nodes.push(Node {
            prim,
            inputs: inputs.to_vec(),
            value,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Primitive::AddBias, &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Primitive::Relu, &[x])
    }

    pub fn maxpool_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Primitive::MaxPoolRows, &[x])
    }

    pub fn scale_rows(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        self.record(Primitive::ScaleRows(weights), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::ConcatCols, &[a, b])
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.record(Primitive::SelectRows(rows), &[x])
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Primitive::StackRows, parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Primitive::Sum, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.record(Primitive::Scale(s), &[x])
    }

    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::CosineMatrix, &[a, b])
    }

    pub fn nce_rows(&mut self, sims: Var, tau: f64) -> Result<Var> {
        self.record(Primitive::NceRows { tau }, &[sims])
    }

    pub fn masked_mean(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        self.record(Primitive::MaskedMean(mask), &[x])
    }

    fn node_vjp(&self, node: &Node, up: &Matrix) -> Result<Vec<Matrix>> {
        let inputs: Vec<&Matrix> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let mut grads = node.prim.vjp(&inputs, &node.value, up)?;
        if self.fault == Some(node.prim.kind()) {
            for g in &mut grads {
                *g = g.scale(FAULT_FACTOR);
            }
        }
        Ok(grads)
    }

    /// Backpropagates from a scalar root through every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", root_value.shape()),
            ));
        }
        let mut slots: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        slots[root.0] = Matrix::scalar(1.0);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || slots[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let grads = self.node_vjp(node, &slots[idx])?;
            for (input, g) in node.inputs.iter().zip(grads) {
                slots[input.0].add_assign(&g);
            }
        }
        Ok(Gradients { slots })
    }

    /// Checks every recorded op's backward rule against central differences
    /// of its own forward evaluation, in recording order. Returns the kind of
    /// the first op whose VJP disagrees.
    pub fn localize_fault(&self, step: f64, tol: f64) -> Result<Option<OpKind>> {
        for node in &self.nodes {
            if node.inputs.is_empty() {
                continue;
            }
            // Deterministic non-trivial upstream direction.
            let up = node.value.map(|_| 0.0);
            let up = Matrix::new(
                up.rows(),
                up.cols(),
                (0..up.len())
                    .map(|k| 0.5 + ((k * 7919) % 13) as f64 / 13.0)
                    .collect(),
            )?;
            let analytic = self.node_vjp(node, &up)?;
            let mut inputs: Vec<Matrix> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].value.clone())
                .collect();
            for (slot, a) in analytic.iter().enumerate() {
                let mut numeric = Matrix::zeros(a.rows(), a.cols());
                for k in 0..a.len() {
                    let orig = inputs[slot].data()[k];
                    inputs[slot].data_mut()[k] = orig + step;
                    let plus = node.prim.eval(&inputs.iter().collect::<Vec<_>>())?;
                    inputs[slot].data_mut()[k] = orig - step;
                    let minus = node.prim.eval(&inputs.iter().collect::<Vec<_>>())?;
                    inputs[slot].data_mut()[k] = orig;
                    numeric.data_mut()[k] =
                        (dot(up.data(), plus.data()) - dot(up.data(), minus.data())) / (2.0 * step);
                }
                let diff = a.sub(&numeric)?.norm();
                let scale = a.norm().max(numeric.norm());
                let bad = if scale < 1e-6 {
                    diff > 1e-8
                } else {
                    diff / scale > tol
                };
                if bad {
                    return Ok(Some(node.prim.kind()));
                }
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_hand_case() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap());
        let p = t.maxpool_rows(x).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 5.0]);
    }

    #[test]
    fn maxpool_single_row_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![0.5, -1.0, 2.0]));
        let p = t.maxpool_rows(x).unwrap();
        assert_eq!(t.value(p), t.value(x));
    }

    #[test]
    fn maxpool_empty_is_error() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(0, 3));
        assert!(matches!(t.maxpool_rows(x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_lowest_row() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[0.0, 1.0], [2.0, 1.0], [2.0, 0.0]]).unwrap());
        let p = t.maxpool_rows(x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(
            g.wrt(x).data(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            "column 0 ties rows 1,2 -> row 1; column 1 ties rows 0,1 -> row 0"
        );
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::parse(k.name()), Some(k));
        }
    }
}
