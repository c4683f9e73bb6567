use crate::error::{Error, Result};

use super::tensor::{ParamSet, Tensor};

/// Lower clamp applied to probabilities inside cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operations a tape can record.
///
/// All operands are rank-2. Shapes below are `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// `[m,n] + [1,n]`, the bias row repeated over rows.
    AddRow,
    /// `[m,n] * [m,1]`, each row scaled by one entry of the column.
    MulCol,
    Scale(f64),
    Shift(f64),
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
    /// `CE(p, q)` per row: inputs `(p, q)`, output `[m,1]` with
    /// `-sum_j p_j ln max(q_j, LOG_CLAMP)`. `p` rows must be distributions.
    CrossEntropyRows,
    SliceCols {
        start: usize,
        end: usize,
    },
    SumAll,
    /// Row sums, `[m,n] -> [m,1]`.
    SumCols,
    Clamp {
        lo: f64,
        hi: f64,
    },
    Minimum,
    /// Row lookup into a table, `[v,e] -> [ids.len(), e]`.
    GatherRows(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulCol => "mul_col",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::CrossEntropyRows => "cross_entropy_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::SumAll => "sum_all",
            OpKind::SumCols => "sum_cols",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Minimum => "minimum",
            OpKind::GatherRows(_) => "gather_rows",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddRow
            | OpKind::MulCol
            | OpKind::CrossEntropyRows
            | OpKind::Minimum => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Origin {
    Constant,
    Variable,
    Param(usize),
    Op { kind: OpKind, inputs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the record is always
/// topologically sorted and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    swept: bool,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mismatch(op: &OpKind, ts: &[&Tensor]) -> Error {
    let shapes = ts
        .iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" and ");
    Error::ShapeMismatch {
        op: op.name(),
        shapes,
    }
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

    fn push(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Constant, false)
    }

    /// Records a free leaf whose gradient can be read back with [`Tape::grad`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Variable, true)
    }

    /// Records one learnable tensor of `params`.
    pub fn param(&mut self, params: &ParamSet, slot: usize) -> Var {
        let t = params.get(slot);
        let value = Tensor::raw(t.shape().to_vec(), t.values().to_vec());
        self.push(value, Origin::Param(slot), true)
    }

    /// Records every tensor of `params`, returning handles in slot order.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        (0..params.len()).map(|s| self.param(params, s)).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward sweep with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                shapes: format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            });
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::invalid(format!(
                    "{} input refers to unknown node",
                    kind.name()
                )));
            }
        }
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&kind, &ins)?
        };
        if value.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Origin::Op { kind, inputs }, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::AddRow, &[a, bias])
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(OpKind::MulCol, &[a, col])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Shift(c), &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }
    pub fn cross_entropy_rows(&mut self, target: Var, predicted: Var) -> Result<Var> {
        self.apply(OpKind::CrossEntropyRows, &[target, predicted])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumAll, &[a])
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumCols, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Minimum, &[a, b])
    }
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::GatherRows(ids), &[table])
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all needs at least one term"))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`, filling gradients for every node
    /// that depends on a learnable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.swept = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            if let Origin::Op { kind, inputs } = &self.nodes[idx].origin {
                let needs: Vec<bool> = inputs
                    .iter()
                    .map(|&i| self.nodes[i].requires_grad)
                    .collect();
                if needs.iter().any(|&n| n) {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let contributions =
                        backward_op(kind, &ins, &self.nodes[idx].value, &gout, &needs);
                    for (k, contrib) in contributions.into_iter().enumerate() {
                        let Some(contrib) = contrib else { continue };
                        let slot = &mut self.grads[inputs[k]];
                        match slot {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                            None => *slot = Some(contrib),
                        }
                    }
                }
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter leaf into `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        if !self.swept {
            return Err(Error::invalid("accumulate_into called before backward"));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            let Origin::Param(slot) = node.origin else {
                continue;
            };
            let Some(g) = self.grads[idx].as_ref() else {
                continue;
            };
            if slot >= params.len() || params.get(slot).len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "accumulate_into",
                    shapes: format!("slot {slot} does not match the bound tensor"),
                });
            }
            let target = params
                .get_mut(slot)
                .grad_mut()
                .ok_or_else(|| Error::invalid("parameter has no gradient buffer"))?;
            target.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// `backward` followed by `accumulate_into`.
    pub fn backward_into(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_into(params)
    }

    /// Drops stored gradients so that `backward` may run again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.swept = false;
    }
}

fn forward(kind: &OpKind, ins: &[&Tensor]) -> Result<Tensor> {
    let a = ins[0];
    let (m, n) = dims(a);
    let out = match kind {
        OpKind::MatMul => {
            let b = ins[1];
            let (k, n2) = dims(b);
            if n != k {
                return Err(mismatch(kind, ins));
            }
            let (av, bv) = (a.values(), b.values());
            let mut out = vec![0.0; m * n2];
            for i in 0..m {
                let orow = &mut out[i * n2..(i + 1) * n2];
                for p in 0..n {
                    let aip = av[i * n + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n2..(p + 1) * n2];
                    for (o, bpj) in orow.iter_mut().zip(brow) {
                        *o += aip * bpj;
                    }
                }
            }
            Tensor::raw(vec![m, n2], out)
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Minimum => {
            let b = ins[1];
            if a.shape() != b.shape() {
                return Err(mismatch(kind, ins));
            }
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                OpKind::Mul => |x, y| x * y,
                _ => |x: f64, y: f64| if x <= y { x } else { y },
            };
            let out = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::raw(a.shape().to_vec(), out)
        }
        OpKind::AddRow => {
            let b = ins[1];
            if dims(b) != (1, n) {
                return Err(mismatch(kind, ins));
            }
            let bv = b.values();
            let out = a
                .values()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
                .collect();
            Tensor::raw(vec![m, n], out)
        }
        OpKind::MulCol => {
            let c = ins[1];
            if dims(c) != (m, 1) {
                return Err(mismatch(kind, ins));
            }
            let cv = c.values();
            let out = a
                .values()
                .chunks(n)
                .zip(cv)
                .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                .collect();
            Tensor::raw(vec![m, n], out)
        }
        OpKind::Scale(c) => map(a, |x| c * x),
        OpKind::Shift(c) => map(a, |x| c + x),
        OpKind::Sigmoid => map(a, sigmoid),
        OpKind::Tanh => map(a, f64::tanh),
        OpKind::Relu => map(a, |x| x.max(0.0)),
        OpKind::SoftmaxRows => {
            let mut out = a.values().to_vec();
            for row in out.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor::raw(vec![m, n], out)
        }
        OpKind::CrossEntropyRows => {
            let q = ins[1];
            if a.shape() != q.shape() {
                return Err(mismatch(kind, ins));
            }
            let mut out = Vec::with_capacity(m);
            for (p_row, q_row) in a.values().chunks(n).zip(q.values().chunks(n)) {
                let total: f64 = p_row.iter().sum();
                if p_row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "cross-entropy target row is not a distribution",
                    ));
                }
                out.push(cross_entropy(p_row, q_row));
            }
            Tensor::raw(vec![m, 1], out)
        }
        OpKind::SliceCols { start, end } => {
            if start >= end || *end > n {
                return Err(Error::ShapeMismatch {
                    op: kind.name(),
                    shapes: format!("columns {start}..{end} of {:?}", a.shape()),
                });
            }
            let out = a
                .values()
                .chunks(n)
                .flat_map(|row| row[*start..*end].iter().copied())
                .collect();
            Tensor::raw(vec![m, end - start], out)
        }
        OpKind::SumAll => Tensor::scalar(a.values().iter().sum()),
        OpKind::SumCols => Tensor::raw(
            vec![m, 1],
            a.values().chunks(n).map(|r| r.iter().sum()).collect(),
        ),
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
            }
            map(a, |x| x.clamp(*lo, *hi))
        }
        OpKind::GatherRows(ids) => {
            if ids.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: kind.name(),
                    shapes: "no row ids".into(),
                });
            }
            let mut out = Vec::with_capacity(ids.len() * n);
            for &id in ids {
                if id >= m {
                    return Err(Error::ShapeMismatch {
                        op: kind.name(),
                        shapes: format!("row {id} of table {:?}", a.shape()),
                    });
                }
                out.extend_from_slice(a.row(id));
            }
            Tensor::raw(vec![ids.len(), n], out)
        }
    };
    Ok(out)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(
        a.shape().to_vec(),
        a.values().iter().map(|&x| f(x)).collect(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `-sum_i p_i ln max(q_i, LOG_CLAMP)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi != 0.0)
        .map(|(&pi, &qi)| pi * qi.max(LOG_CLAMP).ln())
        .sum::<f64>()
}

fn backward_op(
    kind: &OpKind,
    ins: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let a = ins[0];
    let (m, n) = dims(a);
    let av = a.values();
    let unary = |f: &dyn Fn(usize) -> f64| vec![Some((0..av.len()).map(f).collect::<Vec<_>>())];
    match kind {
        OpKind::MatMul => {
            let b = ins[1];
            let n2 = b.cols();
            let bv = b.values();
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let grow = &g[i * n2..(i + 1) * n2];
                    for p in 0..n {
                        let brow = &bv[p * n2..(p + 1) * n2];
                        ga[i * n + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; n * n2];
                for i in 0..m {
                    let grow = &g[i * n2..(i + 1) * n2];
                    for p in 0..n {
                        let aip = av[i * n + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, gij) in gb[p * n2..(p + 1) * n2].iter_mut().zip(grow) {
                            *o += aip * gij;
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        OpKind::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        OpKind::Sub => vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|x| -x).collect()),
        ],
        OpKind::Mul => {
            let bv = ins[1].values();
            vec![
                needs[0].then(|| g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                needs[1].then(|| g.iter().zip(av).map(|(x, y)| x * y).collect()),
            ]
        }
        OpKind::Minimum => {
            let bv = ins[1].values();
            vec![
                needs[0].then(|| {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| if x <= y { *gi } else { 0.0 })
                        .collect()
                }),
                needs[1].then(|| {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| if x <= y { 0.0 } else { *gi })
                        .collect()
                }),
            ]
        }
        OpKind::AddRow => {
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }
        OpKind::MulCol => {
            let cv = ins[1].values();
            let ga = needs[0].then(|| {
                g.chunks(n)
                    .zip(cv)
                    .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                    .collect()
            });
            let gc = needs[1].then(|| {
                g.chunks(n)
                    .zip(av.chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect()
            });
            vec![ga, gc]
        }
        OpKind::Scale(c) => unary(&|i| c * g[i]),
        OpKind::Shift(_) => vec![Some(g.to_vec())],
        OpKind::Sigmoid => {
            let y = out.values();
            unary(&|i| g[i] * y[i] * (1.0 - y[i]))
        }
        OpKind::Tanh => {
            let y = out.values();
            unary(&|i| g[i] * (1.0 - y[i] * y[i]))
        }
        OpKind::Relu => unary(&|i| if av[i] > 0.0 { g[i] } else { 0.0 }),
        OpKind::SoftmaxRows => {
            let y = out.values();
            let mut ga = vec![0.0; m * n];
            for r in 0..m {
                let span = r * n..(r + 1) * n;
                let dot: f64 = g[span.clone()]
                    .iter()
                    .zip(&y[span.clone()])
                    .map(|(x, z)| x * z)
                    .sum();
                for j in span {
                    ga[j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(ga)]
        }
        OpKind::CrossEntropyRows => {
            let qv = ins[1].values();
            let gp = needs[0].then(|| {
                (0..m * n)
                    .map(|j| -g[j / n] * qv[j].max(LOG_CLAMP).ln())
                    .collect()
            });
            let gq = needs[1].then(|| {
                (0..m * n)
                    .map(|j| {
                        if qv[j] > LOG_CLAMP {
                            -g[j / n] * av[j] / qv[j]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            });
            vec![gp, gq]
        }
        OpKind::SliceCols { start, end } => {
            let w = end - start;
            let mut ga = vec![0.0; m * n];
            for r in 0..m {
                ga[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(ga)]
        }
        OpKind::SumAll => vec![Some(vec![g[0]; av.len()])],
        OpKind::SumCols => unary(&|i| g[i / n]),
        OpKind::Clamp { lo, hi } => unary(&|i| {
            if av[i] >= *lo && av[i] <= *hi {
                g[i]
            } else {
                0.0
            }
        }),
        OpKind::GatherRows(ids) => {
            let mut ga = vec![0.0; m * n];
            for (r, &id) in ids.iter().enumerate() {
                ga[id * n..(id + 1) * n]
                    .iter_mut()
                    .zip(&g[r * n..(r + 1) * n])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(ga)]
        }
    }
}
