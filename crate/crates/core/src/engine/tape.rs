use std::sync::Arc;

use crate::engine::{strict_finite, Tensor};
use crate::{Error, Result, Scalar};

/// Index of a node in the tape arena.
pub type NodeId = usize;

/// Reverse-mode differentiation tape.
///
/// Operations are recorded in topological order (inputs always precede
/// their consumers, by construction). `backward` replays them once in
/// reverse, accumulating vector-Jacobian products. A tape is confined to
/// one thread for its lifetime; the tensors it produces are immutable and
/// may be shared freely afterwards.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatmulTransB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Sqrt { x: NodeId },
    Square { x: NodeId },
    Sin { x: NodeId },
    Cos { x: NodeId },
    Arcsin { x: NodeId },
    Softplus { x: NodeId },
    Scale { x: NodeId, c: T },
    AddConst { x: NodeId },
    Clamp { x: NodeId, lo: T, hi: T },
    Select { mask: Arc<Vec<bool>>, a: NodeId, b: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    SumRows { x: NodeId },
    SumCols { x: NodeId },
    BroadcastScalar { x: NodeId },
    BroadcastRow { x: NodeId },
    BroadcastCol { x: NodeId },
    SliceCols { x: NodeId, from: usize },
    ConcatCols { parts: Vec<NodeId> },
    PairwiseSqDist { x: NodeId },
    TopK { x: NodeId, keep: Arc<Vec<bool>> },
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, inv_std: Arc<Vec<T>> },
    LayerNormAffine { x: NodeId, scale: NodeId, shift: NodeId, mean: Arc<Vec<T>>, inv_std: Arc<Vec<T>> },
    Gelu { x: NodeId },
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a node, or `None` if no gradient flowed to it.
    pub fn get(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[id], g.clone()).expect("grad shape matches node"))
    }

    /// Gradient for a node, zeros if none flowed.
    pub fn get_or_zero(&self, id: NodeId) -> Tensor<T> {
        self.get(id).unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }
}

// Gradient guard against the root singularity: sqrt backward divides by
// max(output, SQRT_GUARD) so exact zeros (pairwise distances on the
// diagonal) contribute a bounded factor that the zero upstream gradient
// then annihilates.
const SQRT_GUARD: f64 = 1e-12;
// Lock-boundary guard: arcsin backward clamps |x| to 1 - ARCSIN_GUARD
// before the 1/sqrt(1-x^2) factor, bounding gradients at the boundary
// without changing forward values.
const ARCSIN_GUARD: f64 = 1e-6;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Record an input. Gradients accumulate for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Record a constant (gradient never flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str, requires_grad: bool) -> Result<NodeId> {
        if strict_finite() {
            if let Some(index) = value.first_nonfinite() {
                return Err(Error::NonFinite { op: name, index });
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    fn check_same_shape(&self, name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_rank2(&self, name: &'static str, x: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::BadShape {
                op: name,
                shape: s.to_vec(),
                msg: "expected a matrix".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- linear algebra --------------------------------------------------

    /// `a @ b` for `a: [n,k]`, `b: [k,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.check_rank2("matmul", a)?;
        let (kb, m) = self.check_rank2("matmul", b)?;
        if k != kb {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = mm_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[a, b]);
        self.push(Op::Matmul { a, b }, value, "matmul", req)
    }

    /// `a @ b.T` for `a: [n,k]`, `b: [m,k]`.
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.check_rank2("matmul_transb", a)?;
        let (m, kb) = self.check_rank2("matmul_transb", b)?;
        if k != kb {
            return Err(Error::DimMismatch {
                op: "matmul_transb",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = mm_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[a, b]);
        self.push(Op::MatmulTransB { a, b }, value, "matmul_transb", req)
    }

    /// `x @ w + b` with `x: [n,d_in]`, `w: [d_in,d_out]`, `b: [d_out]`.
    /// Fused: the bias is added in-kernel rather than materialized as a
    /// broadcast tensor.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.check_rank2("linear", x)?;
        let (kw, m) = self.check_rank2("linear", w)?;
        if k != kw {
            return Err(Error::DimMismatch {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let bs = self.shape(b);
        if bs.len() != 1 || bs[0] != m {
            return Err(Error::DimMismatch {
                op: "linear",
                left: vec![n, m],
                right: bs.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * m);
        let bv = self.value(b).data().to_vec();
        for _ in 0..n {
            data.extend_from_slice(&bv);
        }
        mm_nn_into(self.value(x).data(), self.value(w).data(), &mut data, n, k, m);
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[x, w, b]);
        self.push(Op::Linear { x, w, b }, value, "linear", req)
    }

    // ---- elementwise binary ----------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        let req = self.requires(&[a, b]);
        self.push(Op::Add { a, b }, value, "add", req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        let req = self.requires(&[a, b]);
        self.push(Op::Sub { a, b }, value, "sub", req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        let req = self.requires(&[a, b]);
        self.push(Op::Mul { a, b }, value, "mul", req)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        let value = self.zip(a, b, |x, y| x / y);
        let req = self.requires(&[a, b]);
        self.push(Op::Div { a, b }, value, "div", req)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(self.shape(a), data).expect("zip preserves shape")
    }

    // ---- elementwise unary -----------------------------------------------

    fn map(&mut self, x: NodeId, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<NodeId> {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("map preserves shape");
        let req = self.requires(&[x]);
        self.push(op, value, name, req)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "exp", Op::Exp { x }, |v| v.exp())
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "ln", Op::Ln { x }, |v| v.ln())
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "sqrt", Op::Sqrt { x }, |v| v.sqrt())
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "square", Op::Square { x }, |v| v * v)
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "sin", Op::Sin { x }, |v| v.sin())
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "cos", Op::Cos { x }, |v| v.cos())
    }

    pub fn arcsin(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "arcsin", Op::Arcsin { x }, |v| v.asin())
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "softplus", Op::Softplus { x }, softplus_stable)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.map(x, "scale", Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.map(x, "add_const", Op::AddConst { x }, |v| v + c)
    }

    /// Clamp to `[lo, hi]`. Backward passes gradient only strictly inside
    /// the interval; the boundary counts as outside.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.map(x, "clamp", Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// `mask ? a : b` elementwise; no gradient flows through the mask.
    pub fn select(&mut self, mask: Vec<bool>, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("select", a, b)?;
        if mask.len() != self.value(a).numel() {
            return Err(Error::BadShape {
                op: "select",
                shape: self.shape(a).to_vec(),
                msg: format!("mask has {} entries", mask.len()),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = mask
            .iter()
            .zip(av.iter().zip(bv))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let req = self.requires(&[a, b]);
        self.push(
            Op::Select {
                mask: Arc::new(mask),
                a,
                b,
            },
            value,
            "select",
            req,
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.value(x).data().iter().copied().sum();
        let req = self.requires(&[x]);
        self.push(Op::SumAll { x }, Tensor::scalar(s), "sum_all", req)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = T::from_f64_lossy(self.value(x).numel() as f64);
        let s: T = self.value(x).data().iter().copied().sum();
        let req = self.requires(&[x]);
        self.push(Op::MeanAll { x }, Tensor::scalar(s / n), "mean_all", req)
    }

    /// Row sums of a matrix: `[n,m] -> [n,1]`.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_rank2("sum_rows", x)?;
        let xv = self.value(x).data();
        let data: Vec<T> = (0..n).map(|i| xv[i * m..(i + 1) * m].iter().copied().sum()).collect();
        let value = Tensor::from_vec(&[n, 1], data)?;
        let req = self.requires(&[x]);
        self.push(Op::SumRows { x }, value, "sum_rows", req)
    }

    /// Column sums of a matrix: `[n,m] -> [1,m]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_rank2("sum_cols", x)?;
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); m];
        for i in 0..n {
            for (j, d) in data.iter_mut().enumerate() {
                *d += xv[i * m + j];
            }
        }
        let value = Tensor::from_vec(&[1, m], data)?;
        let req = self.requires(&[x]);
        self.push(Op::SumCols { x }, value, "sum_cols", req)
    }

    // ---- broadcasts --------------------------------------------------------

    /// `[1] -> shape`.
    pub fn broadcast_scalar(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.value(x).is_scalar() {
            return Err(Error::BadShape {
                op: "broadcast_scalar",
                shape: self.shape(x).to_vec(),
                msg: "expected a single-element tensor".into(),
            });
        }
        let value = Tensor::full(shape, self.value(x).item());
        let req = self.requires(&[x]);
        self.push(Op::BroadcastScalar { x }, value, "broadcast_scalar", req)
    }

    /// Tile a vector `[m]` into `rows` identical rows: `-> [rows, m]`.
    pub fn broadcast_row(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::BadShape {
                op: "broadcast_row",
                shape: s.to_vec(),
                msg: "expected a vector".into(),
            });
        }
        let m = s[0];
        let xv = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(&xv);
        }
        let value = Tensor::from_vec(&[rows, m], data)?;
        let req = self.requires(&[x]);
        self.push(Op::BroadcastRow { x }, value, "broadcast_row", req)
    }

    /// Tile a column `[n,1]` into `cols` identical columns: `-> [n, cols]`.
    pub fn broadcast_col(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != 1 {
            return Err(Error::BadShape {
                op: "broadcast_col",
                shape: s.to_vec(),
                msg: "expected an [n,1] column".into(),
            });
        }
        let n = s[0];
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * cols);
        for i in 0..n {
            for _ in 0..cols {
                data.push(xv[i]);
            }
        }
        let value = Tensor::from_vec(&[n, cols], data)?;
        let req = self.requires(&[x]);
        self.push(Op::BroadcastCol { x }, value, "broadcast_col", req)
    }

    // ---- structural --------------------------------------------------------

    /// Columns `[from, to)` of a matrix, or the same range of a vector.
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (value, ok) = match s.len() {
            1 => {
                let ok = to <= s[0] && from < to;
                let v = if ok {
                    Tensor::from_vec(&[to - from], self.value(x).data()[from..to].to_vec())?
                } else {
                    Tensor::zeros(&[1])
                };
                (v, ok)
            }
            2 => {
                let (n, m) = (s[0], s[1]);
                let ok = to <= m && from < to;
                let v = if ok {
                    let xv = self.value(x).data();
                    let mut data = Vec::with_capacity(n * (to - from));
                    for i in 0..n {
                        data.extend_from_slice(&xv[i * m + from..i * m + to]);
                    }
                    Tensor::from_vec(&[n, to - from], data)?
                } else {
                    Tensor::zeros(&[1])
                };
                (v, ok)
            }
            _ => (Tensor::zeros(&[1]), false),
        };
        if !ok {
            return Err(Error::BadShape {
                op: "slice_cols",
                shape: s,
                msg: format!("invalid column range {}..{}", from, to),
            });
        }
        let req = self.requires(&[x]);
        self.push(Op::SliceCols { x, from }, value, "slice_cols", req)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                shape: vec![],
                msg: "empty part list".into(),
            });
        }
        let (n, _) = self.check_rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, mp) = self.check_rank2("concat_cols", p)?;
            if np != n {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(mp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_vec(&[n, total], data)?;
        let req = self.requires(parts);
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
            "concat_cols",
            req,
        )
    }

    // ---- composites and custom nodes ---------------------------------------

    /// Pairwise squared distances between the rows of `[n,d]`: `-> [n,n]`,
    /// symmetric with an exactly zero diagonal.
    pub fn pairwise_sq_dist(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.check_rank2("pairwise_sq_dist", x)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            let ri = &xv[i * d..(i + 1) * d];
            for j in (i + 1)..n {
                let rj = &xv[j * d..(j + 1) * d];
                let mut s = T::zero();
                for (&a, &b) in ri.iter().zip(rj) {
                    let diff = a - b;
                    s += diff * diff;
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        let value = Tensor::from_vec(&[n, n], out)?;
        let req = self.requires(&[x]);
        self.push(Op::PairwiseSqDist { x }, value, "pairwise_sq_dist", req)
    }

    /// Keep the `k` largest entries per row, zero the rest. Ties at the
    /// selection boundary keep the lower column index.
    pub fn topk_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (n, m) = self.check_rank2("topk_rows", x)?;
        if k < 1 || k > m {
            return Err(Error::Config(format!(
                "top-k selection requires 1 <= k <= {}, got {}",
                m, k
            )));
        }
        let xv = self.value(x).data();
        let mut keep = vec![false; n * m];
        let mut order: Vec<usize> = Vec::with_capacity(m);
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            order.clear();
            order.extend(0..m);
            // Descending by value, ascending by column index on ties.
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            for &j in order.iter().take(k) {
                keep[i * m + j] = true;
            }
        }
        let data: Vec<T> = keep
            .iter()
            .zip(xv)
            .map(|(&kf, &v)| if kf { v } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[x]);
        self.push(
            Op::TopK {
                x,
                keep: Arc::new(keep),
            },
            value,
            "topk_rows",
            req,
        )
    }

    /// Row-wise max-subtracted softmax of a matrix.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_rank2("softmax_rows", x)?;
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[i * m..(i + 1) * m];
            let mut sum = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[x]);
        self.push(Op::SoftmaxRows { x }, value, "softmax_rows", req)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` with biased
    /// variance. Affine scale/shift compose on top via `mul`/`add`.
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let (n, m) = self.check_rank2("layer_norm_rows", x)?;
        let mf = T::from_f64_lossy(m as f64);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); n * m];
        let mut inv_std = vec![T::zero(); n];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = (var + eps).sqrt().recip();
            inv_std[i] = inv;
            for (o, &v) in data[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[x]);
        self.push(
            Op::LayerNormRows {
                x,
                inv_std: Arc::new(inv_std),
            },
            value,
            "layer_norm_rows",
            req,
        )
    }

    /// Per-row standardization with fused affine scale and shift:
    /// `scale ⊙ (x - mean)/sqrt(var + eps) + shift`.
    pub fn layer_norm_affine(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let (n, m) = self.check_rank2("layer_norm_affine", x)?;
        for &p in &[scale, shift] {
            let s = self.shape(p);
            if s.len() != 1 || s[0] != m {
                return Err(Error::DimMismatch {
                    op: "layer_norm_affine",
                    left: vec![n, m],
                    right: s.to_vec(),
                });
            }
        }
        let mf = T::from_f64_lossy(m as f64);
        let xv = self.value(x).data();
        let gv = self.value(scale).data().to_vec();
        let bv = self.value(shift).data().to_vec();
        let mut data = vec![T::zero(); n * m];
        let mut means = vec![T::zero(); n];
        let mut inv_std = vec![T::zero(); n];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = (var + eps).sqrt().recip();
            means[i] = mean;
            inv_std[i] = inv;
            for ((o, &v), (&g, &b)) in
                data[i * m..(i + 1) * m].iter_mut().zip(row).zip(gv.iter().zip(&bv))
            {
                *o = (v - mean) * inv * g + b;
            }
        }
        let value = Tensor::from_vec(&[n, m], data)?;
        let req = self.requires(&[x, scale, shift]);
        self.push(
            Op::LayerNormAffine {
                x,
                scale,
                shift,
                mean: Arc::new(means),
                inv_std: Arc::new(inv_std),
            },
            value,
            "layer_norm_affine",
            req,
        )
    }

    /// Exact-erf GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, "gelu", Op::Gelu { x }, |v| v * gauss_cdf(v))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar node. Visits every recorded node exactly
    /// once in reverse topological order.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                msg: "loss must be a single-element tensor".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let half = T::from_f64_lossy(0.5);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[1];
                if self.nodes[*x].requires_grad {
                    let dx = mm_nt(g, self.value(*w).data(), n, m, k);
                    add_into(&mut grads[*x], dx);
                }
                if self.nodes[*w].requires_grad {
                    let dw = mm_tn(self.value(*x).data(), g, n, k, m);
                    add_into(&mut grads[*w], dw);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![T::zero(); m];
                    for i in 0..n {
                        for (dj, &gv) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *dj += gv;
                        }
                    }
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Matmul { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.nodes[*a].requires_grad {
                    let da = mm_nt(g, self.value(*b).data(), n, m, k);
                    add_into(&mut grads[*a], da);
                }
                if self.nodes[*b].requires_grad {
                    let db = mm_tn(self.value(*a).data(), g, n, k, m);
                    add_into(&mut grads[*b], db);
                }
            }
            Op::MatmulTransB { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                if self.nodes[*a].requires_grad {
                    let da = mm_nn(g, self.value(*b).data(), n, m, k);
                    add_into(&mut grads[*a], da);
                }
                if self.nodes[*b].requires_grad {
                    let db = mm_tn(g, self.value(*a).data(), n, m, k);
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    add_into(&mut grads[*a], g.to_vec());
                }
                if self.nodes[*b].requires_grad {
                    add_into(&mut grads[*b], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].requires_grad {
                    add_into(&mut grads[*a], g.to_vec());
                }
                if self.nodes[*b].requires_grad {
                    add_into(&mut grads[*b], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bv = self.value(*b).data();
                    add_into(&mut grads[*a], g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                }
                if self.nodes[*b].requires_grad {
                    let av = self.value(*a).data();
                    add_into(&mut grads[*b], g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Div { a, b } => {
                let bv = self.value(*b).data();
                if self.nodes[*a].requires_grad {
                    add_into(&mut grads[*a], g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect());
                }
                if self.nodes[*b].requires_grad {
                    let out = self.value(id).data();
                    let db = g
                        .iter()
                        .zip(out.iter().zip(bv))
                        .map(|(&gi, (&oi, &bi))| -gi * oi / bi)
                        .collect();
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Exp { x } => {
                let out = self.value(id).data();
                self.unary_grad(*x, grads, g, |i, gi| gi * out[i]);
            }
            Op::Ln { x } => {
                let xv = self.value(*x).data();
                self.unary_grad(*x, grads, g, |i, gi| gi / xv[i]);
            }
            Op::Sqrt { x } => {
                let out = self.value(id).data();
                let guard = T::from_f64_lossy(SQRT_GUARD);
                self.unary_grad(*x, grads, g, |i, gi| gi / ((out[i].max(guard)) * (T::one() + T::one())));
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                let two = T::one() + T::one();
                self.unary_grad(*x, grads, g, |i, gi| gi * two * xv[i]);
            }
            Op::Sin { x } => {
                let xv = self.value(*x).data();
                self.unary_grad(*x, grads, g, |i, gi| gi * xv[i].cos());
            }
            Op::Cos { x } => {
                let xv = self.value(*x).data();
                self.unary_grad(*x, grads, g, |i, gi| -gi * xv[i].sin());
            }
            Op::Arcsin { x } => {
                let xv = self.value(*x).data();
                let lim = T::one() - T::from_f64_lossy(ARCSIN_GUARD);
                self.unary_grad(*x, grads, g, |i, gi| {
                    let xc = xv[i].max(-lim).min(lim);
                    gi / (T::one() - xc * xc).sqrt()
                });
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                self.unary_grad(*x, grads, g, |i, gi| gi / (T::one() + (-xv[i]).exp()));
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.unary_grad(*x, grads, g, |_, gi| gi * c);
            }
            Op::AddConst { x } => {
                self.unary_grad(*x, grads, g, |_, gi| gi);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(*x, grads, g, |i, gi| {
                    if xv[i] > lo && xv[i] < hi {
                        gi
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Select { mask, a, b } => {
                if self.nodes[*a].requires_grad {
                    let da = g
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gi, &m)| if m { gi } else { T::zero() })
                        .collect();
                    add_into(&mut grads[*a], da);
                }
                if self.nodes[*b].requires_grad {
                    let db = g
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gi, &m)| if m { T::zero() } else { gi })
                        .collect();
                    add_into(&mut grads[*b], db);
                }
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                self.unary_sized_grad(*x, grads, vec![g[0]; n]);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let c = g[0] / T::from_f64_lossy(n as f64);
                self.unary_sized_grad(*x, grads, vec![c; n]);
            }
            Op::SumRows { x } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = g[i];
                    }
                }
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::SumCols { x } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); n * m];
                for i in 0..n {
                    dx[i * m..(i + 1) * m].copy_from_slice(&g[0..m]);
                    let _ = i;
                }
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::BroadcastScalar { x } => {
                let s: T = g.iter().copied().sum();
                self.unary_sized_grad(*x, grads, vec![s]);
            }
            Op::BroadcastRow { x } => {
                let m = self.shape(*x)[0];
                let rows = g.len() / m;
                let mut dx = vec![T::zero(); m];
                for i in 0..rows {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d += g[i * m + j];
                    }
                }
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::BroadcastCol { x } => {
                let n = self.shape(*x)[0];
                let cols = g.len() / n;
                let dx: Vec<T> = (0..n)
                    .map(|i| g[i * cols..(i + 1) * cols].iter().copied().sum())
                    .collect();
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::SliceCols { x, from } => {
                let s = self.shape(*x);
                let out_shape = self.value(id).shape().to_vec();
                if s.len() == 1 {
                    let mut dx = vec![T::zero(); s[0]];
                    dx[*from..*from + out_shape[0]].copy_from_slice(g);
                    self.unary_sized_grad(*x, grads, dx);
                } else {
                    let (n, m) = (s[0], s[1]);
                    let w = out_shape[1];
                    let mut dx = vec![T::zero(); n * m];
                    for i in 0..n {
                        dx[i * m + from..i * m + from + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.unary_sized_grad(*x, grads, dx);
                }
            }
            Op::ConcatCols { parts } => {
                let n = self.shape(parts[0])[0];
                let total = self.value(id).shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![T::zero(); n * w];
                        for i in 0..n {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        add_into(&mut grads[p], dp);
                    }
                    offset += w;
                }
            }
            Op::PairwiseSqDist { x } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x).data();
                let two = T::one() + T::one();
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let c = two * (g[i * n + j] + g[j * n + i]);
                        if c == T::zero() {
                            continue;
                        }
                        let (ri, rj) = (&xv[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                        for ((dxi, &a), &b) in dx[i * d..(i + 1) * d].iter_mut().zip(ri).zip(rj) {
                            *dxi += c * (a - b);
                        }
                    }
                }
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::TopK { x, keep } => {
                let dx = g
                    .iter()
                    .zip(keep.iter())
                    .map(|(&gi, &k)| if k { gi } else { T::zero() })
                    .collect();
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::SoftmaxRows { x } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let y = self.value(id).data();
                let mut dx = vec![T::zero(); n * m];
                for i in 0..n {
                    let yi = &y[i * m..(i + 1) * m];
                    let gi = &g[i * m..(i + 1) * m];
                    let dot: T = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dx[i * m..(i + 1) * m].iter_mut().zip(gi).zip(yi) {
                        *d = (gv - dot) * yv;
                    }
                }
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mf = T::from_f64_lossy(m as f64);
                let y = self.value(id).data();
                let mut dx = vec![T::zero(); n * m];
                for i in 0..n {
                    let yi = &y[i * m..(i + 1) * m];
                    let gi = &g[i * m..(i + 1) * m];
                    let gmean = gi.iter().copied().sum::<T>() / mf;
                    let gydot = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum::<T>() / mf;
                    let inv = inv_std[i];
                    for ((d, &gv), &yv) in dx[i * m..(i + 1) * m].iter_mut().zip(gi).zip(yi) {
                        *d = inv * (gv - gmean - yv * gydot);
                    }
                }
                self.unary_sized_grad(*x, grads, dx);
            }
            Op::LayerNormAffine { x, scale, shift, mean, inv_std } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mf = T::from_f64_lossy(m as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*scale).data();
                if self.nodes[*shift].requires_grad {
                    let mut db = vec![T::zero(); m];
                    for i in 0..n {
                        for (dj, &gg) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *dj += gg;
                        }
                    }
                    add_into(&mut grads[*shift], db);
                }
                if self.nodes[*scale].requires_grad {
                    let mut dg = vec![T::zero(); m];
                    for i in 0..n {
                        let inv = inv_std[i];
                        let mu = mean[i];
                        for ((dj, &gg), &xx) in
                            dg.iter_mut().zip(&g[i * m..(i + 1) * m]).zip(&xv[i * m..(i + 1) * m])
                        {
                            *dj += gg * (xx - mu) * inv;
                        }
                    }
                    add_into(&mut grads[*scale], dg);
                }
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![T::zero(); n * m];
                    for i in 0..n {
                        let inv = inv_std[i];
                        let mu = mean[i];
                        let gi = &g[i * m..(i + 1) * m];
                        let xi = &xv[i * m..(i + 1) * m];
                        // gradient wrt the normalized row, then the standard
                        // layer-norm backward
                        let mut gmean = T::zero();
                        let mut gydot = T::zero();
                        for ((&gg, &gam), &xx) in gi.iter().zip(gv).zip(xi) {
                            let ghat = gg * gam;
                            let yhat = (xx - mu) * inv;
                            gmean += ghat;
                            gydot += ghat * yhat;
                        }
                        gmean = gmean / mf;
                        gydot = gydot / mf;
                        for (((d, &gg), &gam), &xx) in
                            dx[i * m..(i + 1) * m].iter_mut().zip(gi).zip(gv).zip(xi)
                        {
                            let ghat = gg * gam;
                            let yhat = (xx - mu) * inv;
                            *d = inv * (ghat - gmean - yhat * gydot);
                        }
                    }
                    self.unary_sized_grad(*x, grads, dx);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let inv_sqrt_2pi = T::from_f64_lossy(0.3989422804014327);
                self.unary_grad(*x, grads, g, |i, gi| {
                    let v = xv[i];
                    gi * (gauss_cdf(v) + v * inv_sqrt_2pi * (-v * v * half).exp())
                });
            }
        }
    }

    fn unary_grad(&self, x: NodeId, grads: &mut [Option<Vec<T>>], g: &[T], f: impl Fn(usize, T) -> T) {
        if !self.nodes[x].requires_grad {
            return;
        }
        let dx: Vec<T> = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
        add_into(&mut grads[x], dx);
    }

    fn unary_sized_grad(&self, x: NodeId, grads: &mut [Option<Vec<T>>], dx: Vec<T>) {
        if !self.nodes[x].requires_grad {
            return;
        }
        add_into(&mut grads[x], dx);
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gauss_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt_2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt_2).erf())
}

// C += A·B with A: [n,k], B: [k,m], accumulating onto the existing contents
// of C. Fixed ascending accumulation order over l for every output element.
fn mm_nn_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * m..(l + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
}

// C = A·B with A: [n,k], B: [k,m]. Fixed ascending accumulation order over
// l for every output element.
fn mm_nn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * m..(l + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
    c
}

// C = A·Bᵀ with A: [n,k], B: [m,k].
fn mm_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * m + j] = s;
        }
    }
    c
}

// C = Aᵀ·B with A: [n,k], B: [n,m] -> [k,m].
fn mm_tn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for l in 0..n {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * m..(l + 1) * m];
        for (i, &ali) in arow.iter().enumerate() {
            let crow = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ali * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_matches_hand_arithmetic() {
        // x = [1,1], W = [[1,2],[3,4]], b = [1,1] -> [5,7]
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[2], &[1.0, 1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn linear_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let err = tape.linear(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_shift_invariance_and_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let a = tape.constant(t64(&[1, 4], &[0.3, -1.2, 0.9, 2.0]));
        let b = tape.constant(t64(&[1, 4], &[0.3 + 7.5, -1.2 + 7.5, 0.9 + 7.5, 2.0 + 7.5]));
        let ya = tape.softmax_rows(a).unwrap();
        let yb = tape.softmax_rows(b).unwrap();
        let diff = tape.value(ya).max_abs_diff(tape.value(yb));
        assert!(diff < 1e-12, "shift invariance violated by {diff}");

        let extreme = tape.constant(t64(&[1, 2], &[1000.0, -1000.0]));
        let ye = tape.softmax_rows(extreme).unwrap();
        assert!(tape.value(ye).first_nonfinite().is_none());
        assert!((tape.value(ye).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 7], |i| ((i * 37 % 11) as f64) / 3.0 - 1.5));
        let y = tape.softmax_rows(x).unwrap();
        let yv = tape.value(y);
        for i in 0..5 {
            let s: f64 = (0..7).map(|j| yv.get2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_sq_dist_triangle_and_identical_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let d = tape.pairwise_sq_dist(x).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 25.0, 25.0, 0.0]);

        let same = tape.constant(t64(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let d2 = tape.pairwise_sq_dist(same).unwrap();
        assert!(tape.value(d2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_sq_dist_matches_double_loop_oracle() {
        let mut rng = crate::engine::SeededRng::new(3);
        let x: Tensor<f64> = rng.gaussian_matrix(&[8, 4], 0.0, 1.0);
        // Independent scalar double-loop oracle.
        let mut expect = vec![0.0f64; 64];
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for l in 0..4 {
                    let diff = x.get2(i, l) - x.get2(j, l);
                    s += diff * diff;
                }
                expect[i * 8 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let d = tape.pairwise_sq_dist(xn).unwrap();
        for (got, want) in tape.value(d).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_sq_dist_symmetric_zero_diagonal_property() {
        let mut rng = crate::engine::SeededRng::new(17);
        for _ in 0..20 {
            let n = 1 + rng.below(12);
            let d = 1 + rng.below(6);
            let x: Tensor<f64> = rng.gaussian_matrix(&[n, d], 0.0, 2.0);
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let dd = tape.pairwise_sq_dist(xn).unwrap();
            let dv = tape.value(dd);
            for i in 0..n {
                assert_eq!(dv.get2(i, i), 0.0, "diagonal must be exactly zero");
                for j in 0..n {
                    assert_eq!(dv.get2(i, j), dv.get2(j, i), "must be exactly symmetric");
                }
            }
        }
    }

    #[test]
    fn topk_keeps_largest_with_low_index_ties() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 4], &[0.9, 0.0, 0.5, 0.3]));
        let y = tape.topk_rows(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.9, 0.0, 0.5, 0.0]);

        // duplicate values at columns 1 and 3: column 1 wins the last slot
        let d = tape.constant(t64(&[1, 4], &[0.9, 0.5, 0.1, 0.5]));
        let yd = tape.topk_rows(d, 2).unwrap();
        assert_eq!(tape.value(yd).data(), &[0.9, 0.5, 0.0, 0.0]);

        // k = width is the identity
        let full = tape.topk_rows(x, 4).unwrap();
        assert_eq!(tape.value(full).data(), tape.value(x).data());
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.topk_rows(x, 0).is_err());
        assert!(tape.topk_rows(x, 4).is_err());
    }

    #[test]
    fn strict_finite_raises_on_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2], &[-1.0, 4.0]));
        let err = tape.sqrt(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "sqrt", index: 0 }));
    }

    #[test]
    fn layer_norm_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm_rows(x, 1e-5).unwrap();
        let yv = tape.value(y).data();
        assert!((yv[0] + 1.22474).abs() < 1e-4, "got {}", yv[0]);
        assert!(yv[1].abs() < 1e-12);
        assert!((yv[2] - 1.22474).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let y = tape.layer_norm_rows(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_reference_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3], &[0.0, 1.0, -10.0]));
        let y = tape.gelu(x).unwrap();
        let yv = tape.value(y).data();
        assert_eq!(yv[0], 0.0);
        assert!((yv[1] - 0.8413447460685429).abs() < 1e-12);
        assert!(yv[2].abs() < 1e-6);
    }

    #[test]
    fn backward_visits_chain_once_and_accumulates_fanout() {
        // y = x*x + x  (fanout of x: via square and direct) at x=3: dy/dx = 7
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.square(x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn clamp_boundary_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[0.5, 1.0, 2.0]), true);
        let y = tape.clamp(x, -1.0, 1.0).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        // 0.5 interior -> 1; 1.0 exactly at the boundary -> 0; 2.0 outside -> 0
        assert_eq!(g.data(), &[1.0, 0.0, 0.0]);
    }
}
