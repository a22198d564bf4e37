//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Shape errors inside the
//! tape are programming errors and panic; public model operations validate
//! their inputs before building nodes.

use super::tensor::{matmul_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    CrossEntropy(Var, Vec<Option<usize>>),
    SqDist(Var, Var),
    /// Scalar whose derivative with respect to `input` was computed alongside
    /// the value (e.g. an optimal-transport plan).
    Envelope(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = t.dims2();
    if t.shape() == [r, c] {
        t
    } else {
        t.reshape(vec![r, c]).expect("same element count")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: as_matrix(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar() on non-scalar node");
        t.data()[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.mat(a).matmul(self.mat(b)).expect("matmul shapes");
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.mat(a), self.mat(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.mat(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.mat(a), self.mat(row));
        let (r, c) = ta.dims2();
        assert_eq!(tb.dims2(), (1, c), "row broadcast shapes");
        let b = tb.data();
        let data = (0..r * c).map(|k| f(ta.data()[k], b[k % c])).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_broadcast(a, row, |x, y| x + y);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a (r×c) ∘ row (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_broadcast(a, row, |x, y| x * y);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.map(a, |x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.map(a, |x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.map(a, |x| x.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.mat(p);
                assert_eq!(t.rows(), rows, "concat_cols row counts");
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data).unwrap();
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical stacking; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.dims(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.mat(p);
            assert_eq!(t.cols(), cols, "concat_rows column counts");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::matrix(rows, cols, data).unwrap();
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.mat(a);
        let (r, c) = t.dims2();
        assert!(start + len <= c && len > 0, "slice_cols bounds");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data).unwrap();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.mat(a);
        let (r, c) = t.dims2();
        assert!(start + len <= r && len > 0, "slice_rows bounds");
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec()).unwrap();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    /// Row lookup (`table[ids]`), the embedding primitive.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.mat(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < t.rows(), "gather id {id} out of range");
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), c, data).unwrap();
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.mat(a);
        let (r, c) = t.dims2();
        let data = (0..r).flat_map(|i| softmax_row(t.row(i))).collect();
        let out = Tensor::matrix(r, c, data).unwrap();
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.mat(a);
        let (r, c) = t.dims2();
        let data = (0..r)
            .flat_map(|i| {
                let row = t.row(i);
                let lse = log_sum_exp(row);
                row.iter().map(move |&x| x - lse)
            })
            .collect();
        let out = Tensor::matrix(r, c, data).unwrap();
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.mat(a).data().iter().sum();
        self.push(Tensor::row_vector(vec![s]), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.mat(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.mat(a);
        let (r, c) = t.dims2();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, &x) in data.iter_mut().zip(t.row(i)) {
                *d += x;
            }
        }
        self.push(Tensor::row_vector(data), Op::SumRows(a))
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.dims(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.mat(a);
        let r = t.rows();
        let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::matrix(r, 1, data).unwrap(), Op::SumCols(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.mat(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// `x (1×in) · w (in×out) + b (1×out)`, or row-wise for `x (r×in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    /// Summed negative log-likelihood `Σ_i −log softmax(logits_i)[t_i]` over
    /// rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.mat(logits);
        let (r, c) = t.dims2();
        assert_eq!(targets.len(), r, "one target per logit row");
        let mut total = 0.0;
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(k) = *tgt {
                assert!(k < c, "target {k} out of range");
                let row = t.row(i);
                total += log_sum_exp(row) - row[k];
            }
        }
        self.push(
            Tensor::row_vector(vec![total]),
            Op::CrossEntropy(logits, targets.to_vec()),
        )
    }

    /// Pairwise squared Euclidean distances `‖x_i − y_j‖²`: `(n×d, m×d) → n×m`.
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Var {
        let (tx, ty) = (self.mat(x), self.mat(y));
        let (n, d) = tx.dims2();
        let (m, d2) = ty.dims2();
        assert_eq!(d, d2, "sq_dist feature dims");
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let xi = tx.row(i);
            for j in 0..m {
                data.push(xi.iter().zip(ty.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let out = Tensor::matrix(n, m, data).unwrap();
        self.push(out, Op::SqDist(x, y))
    }

    /// Scalar node with a precomputed derivative `d value / d input`.
    pub fn envelope(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.mat(input).numel(), "envelope gradient size");
        self.push(Tensor::row_vector(vec![value]), Op::Envelope(input, grad))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &up, &mut grads);
            grads[idx] = Some(up);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: &dyn Fn(&mut [f64])| {
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        let numel = |v: Var| self.mat(v).numel();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.mat(*a), self.mat(*b));
                let (r, k) = ta.dims2();
                let c = tb.cols();
                // dA = up · Bᵀ, dB = Aᵀ · up
                let bt = tb.transpose();
                let da = matmul_raw(up, bt.data(), r, c, k);
                let at = ta.transpose();
                let db = matmul_raw(at.data(), up, k, r, c);
                acc(grads, *a, r * k, &|g| add_into(g, &da));
                acc(grads, *b, k * c, &|g| add_into(g, &db));
            }
            Op::Add(a, b) => {
                acc(grads, *a, up.len(), &|g| add_into(g, up));
                acc(grads, *b, up.len(), &|g| add_into(g, up));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, up.len(), &|g| add_into(g, up));
                acc(grads, *b, up.len(), &|g| {
                    g.iter_mut().zip(up).for_each(|(x, u)| *x -= u)
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.mat(*a).data(), self.mat(*b).data());
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] * db[k];
                    }
                });
                acc(grads, *b, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] * da[k];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = out.cols();
                acc(grads, *a, up.len(), &|g| add_into(g, up));
                acc(grads, *row, c, &|g| {
                    for (k, u) in up.iter().enumerate() {
                        g[k % c] += u;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = out.cols();
                let (da, dr) = (self.mat(*a).data(), self.mat(*row).data());
                acc(grads, *a, up.len(), &|g| {
                    for (k, u) in up.iter().enumerate() {
                        g[k] += u * dr[k % c];
                    }
                });
                acc(grads, *row, c, &|g| {
                    for (k, u) in up.iter().enumerate() {
                        g[k % c] += u * da[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(grads, *a, up.len(), &|g| {
                g.iter_mut().zip(up).for_each(|(x, u)| *x += u * s)
            }),
            Op::AddScalar(a) => acc(grads, *a, up.len(), &|g| add_into(g, up)),
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] * y[k] * (1.0 - y[k]);
                    }
                })
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] * (1.0 - y[k] * y[k]);
                    }
                })
            }
            Op::Relu(a) => {
                let x = self.mat(*a).data();
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            g[k] += up[k];
                        }
                    }
                })
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] * y[k];
                    }
                })
            }
            Op::Ln(a) => {
                let x = self.mat(*a).data();
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] / x[k];
                    }
                })
            }
            Op::Powf(a, p) => {
                let x = self.mat(*a).data();
                acc(grads, *a, up.len(), &|g| {
                    for k in 0..g.len() {
                        g[k] += up[k] * p * x[k].powf(p - 1.0);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    acc(grads, p, r * w, &|g| {
                        for i in 0..r {
                            for j in 0..w {
                                g[i * w + j] += up[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = numel(p);
                    acc(grads, p, n, &|g| add_into(g, &up[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, w) = out.dims2();
                let c = self.dims(*a).1;
                acc(grads, *a, r * c, &|g| {
                    for i in 0..r {
                        for j in 0..w {
                            g[i * c + start + j] += up[i * w + j];
                        }
                    }
                })
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(grads, *a, numel(*a), &|g| {
                    add_into(&mut g[start * c..start * c + up.len()], up)
                })
            }
            Op::Gather(table, ids) => {
                let c = out.cols();
                acc(grads, *table, numel(*table), &|g| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * c..(id + 1) * c], &up[i * c..(i + 1) * c]);
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let y = out.data();
                acc(grads, *a, r * c, &|g| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = up[row.clone()].iter().zip(&y[row.clone()]).map(|(u, v)| u * v).sum();
                        for k in row {
                            g[k] += y[k] * (up[k] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let y = out.data();
                acc(grads, *a, r * c, &|g| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let s: f64 = up[row.clone()].iter().sum();
                        for k in row {
                            g[k] += up[k] - y[k].exp() * s;
                        }
                    }
                })
            }
            Op::SumAll(a) => acc(grads, *a, numel(*a), &|g| {
                g.iter_mut().for_each(|x| *x += up[0])
            }),
            Op::SumRows(a) => {
                let c = out.cols();
                acc(grads, *a, numel(*a), &|g| {
                    for (k, x) in g.iter_mut().enumerate() {
                        *x += up[k % c];
                    }
                })
            }
            Op::SumCols(a) => {
                let c = self.dims(*a).1;
                acc(grads, *a, numel(*a), &|g| {
                    for (k, x) in g.iter_mut().enumerate() {
                        *x += up[k / c];
                    }
                })
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2();
                // out is r×c, input is c×r
                acc(grads, *a, r * c, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += up[i * c + j];
                        }
                    }
                })
            }
            Op::CrossEntropy(logits, targets) => {
                let t = self.mat(*logits);
                let c = t.cols();
                acc(grads, *logits, t.numel(), &|g| {
                    for (i, tgt) in targets.iter().enumerate() {
                        if let Some(k) = *tgt {
                            let p = softmax_row(t.row(i));
                            for (j, pj) in p.into_iter().enumerate() {
                                let onehot = if j == k { 1.0 } else { 0.0 };
                                g[i * c + j] += up[0] * (pj - onehot);
                            }
                        }
                    }
                })
            }
            Op::SqDist(x, y) => {
                let (tx, ty) = (self.mat(*x), self.mat(*y));
                let (n, d) = tx.dims2();
                let m = ty.rows();
                acc(grads, *x, n * d, &|g| {
                    for i in 0..n {
                        for j in 0..m {
                            let u = up[i * m + j];
                            for k in 0..d {
                                g[i * d + k] += 2.0 * u * (tx.get(i, k) - ty.get(j, k));
                            }
                        }
                    }
                });
                acc(grads, *y, m * d, &|g| {
                    for i in 0..n {
                        for j in 0..m {
                            let u = up[i * m + j];
                            for k in 0..d {
                                g[j * d + k] -= 2.0 * u * (tx.get(i, k) - ty.get(j, k));
                            }
                        }
                    }
                });
            }
            Op::Envelope(input, grad) => acc(grads, *input, grad.len(), &|g| {
                g.iter_mut().zip(grad).for_each(|(x, d)| *x += up[0] * d)
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::gradient_check;

    fn rand_tensor(seed: u64, r: usize, c: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let err = gradient_check(|g, v| Ok(build(g, v)), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        let x = rand_tensor(1, 3, 4);
        check(|g, x| { let y = g.sigmoid(x); g.sum_all(y) }, x.clone());
        check(|g, x| { let y = g.tanh(x); let z = g.mul(y, x); g.sum_all(z) }, x.clone());
        check(|g, x| { let y = g.exp(x); let z = g.scale(y, 0.3); g.mean_all(z) }, x.clone());
        check(|g, x| { let y = g.mul(x, x); let y = g.add_scalar(y, 1.0); let z = g.ln(y); g.sum_all(z) }, x.clone());
        check(|g, x| { let y = g.mul(x, x); let y = g.add_scalar(y, 0.5); let z = g.powf(y, -0.5); g.sum_all(z) }, x);
    }

    #[test]
    fn structural_ops_gradients() {
        let x = rand_tensor(2, 3, 4);
        let w = rand_tensor(3, 4, 5);
        check(
            move |g, x| {
                let w = g.leaf(w.clone());
                let y = g.matmul(x, w);
                let s = g.softmax_rows(y);
                let t = g.transpose(s);
                let sq = g.mul(t, t);
                g.sum_all(sq)
            },
            x.clone(),
        );
        check(
            |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.row(x, 2);
                let c = g.concat_cols(&[b, b]);
                let d = g.concat_rows(&[a, a]);
                let e = g.sum_cols(d);
                let f = g.mean_rows(c);
                let e2 = g.mul(e, e);
                let f2 = g.mul(f, f);
                let s1 = g.sum_all(e2);
                let s2 = g.sum_all(f2);
                g.add(s1, s2)
            },
            x.clone(),
        );
        check(
            |g, x| {
                let m = g.mean_rows(x);
                let y = g.add_row(x, m);
                let z = g.mul_row(y, m);
                let ls = g.log_softmax_rows(z);
                let t = g.gather(ls, &[0, 2, 2]);
                g.sum_all(t)
            },
            x,
        );
    }

    #[test]
    fn cross_entropy_and_distances() {
        let x = rand_tensor(4, 3, 5);
        check(|g, x| g.cross_entropy(x, &[Some(1), None, Some(4)]), x.clone());
        let y = rand_tensor(5, 2, 5);
        check(
            move |g, x| {
                let y = g.leaf(y.clone());
                let d = g.sq_dist(x, y);
                let d2 = g.sq_dist(y, x);
                let p = g.mul(d, d);
                let s = g.sum_all(p);
                let s2 = g.sum_all(d2);
                g.add(s, s2)
            },
            x,
        );
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::row_vector(vec![-0.7, 0.3, 1.2, -0.1]);
        check(|g, x| { let y = g.relu(x); let z = g.mul(y, y); g.sum_all(z) }, x);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![1.0]));
        let b = g.leaf(Tensor::row_vector(vec![2.0]));
        let s = g.sum_all(a);
        let grads = g.backward(s);
        assert_eq!(grads.get(a), Some(&[1.0][..]));
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b, 1), vec![0.0]);
    }
}
