use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{matmul, matmul_at, matmul_bt};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Relu {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        slope: T,
    },
    Sigmoid {
        a: Var,
    },
    Softplus {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Sum {
        a: Var,
    },
    RowSum {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        cols: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    SegmentSum {
        a: Var,
        seg: Vec<usize>,
        cols: usize,
    },
    SegmentSoftmax {
        a: Var,
        seg: Vec<usize>,
        cols: usize,
    },
    HeadDot {
        x: Var,
        a: Var,
        heads: usize,
        head_dim: usize,
    },
    HeadScale {
        alpha: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// Every op appends one node whose inputs are earlier nodes, so the record is
/// topologically ordered by construction. Gradients accumulate on leaf
/// nodes: calling [`Tape::backward`] twice without [`Tape::zero_grad`]
/// doubles them.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

fn check_segments(seg: &[usize], rows: usize, num_segments: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::InvalidSegmentIds(format!(
            "{} segment ids for {rows} rows",
            seg.len()
        )));
    }
    if let Some(w) = seg.windows(2).find(|w| w[0] > w[1]) {
        return Err(Error::InvalidSegmentIds(format!(
            "segment ids must be non-decreasing, found {} before {}",
            w[0], w[1]
        )));
    }
    if let Some(&last) = seg.last() {
        if last >= num_segments {
            return Err(Error::InvalidSegmentIds(format!(
                "segment id {last} out of range for {num_segments} segments"
            )));
        }
    }
    Ok(())
}

/// Row ranges of each segment in a sorted id list.
fn segment_ranges(seg: &[usize]) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= seg.len() {
            return None;
        }
        let id = seg[start];
        let end = start + seg[start..].partition_point(|&s| s == id);
        let r = start..end;
        start = end;
        Some(r)
    })
}

fn cols_of(shape: &[usize]) -> usize {
    match shape {
        [] => 1,
        [.., c] => *c,
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of the kink every ReLU and leaky-ReLU input lies on, in
    /// record order. Two recordings of the same graph with equal patterns
    /// lie on the same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } | Op::LeakyRelu { a, .. } = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("unary op preserves shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Matrix product `[n x k] * [k x m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err(format!("matmul [{n}x{k}] * [{k2}x{m}]")));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(n, m, data)?,
            Op::MatMul { a, b, n, k, m },
            rg,
        ))
    }

    /// Elementwise sum. `b` may also be a vector (or `[1 x d]` row) added to
    /// every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let broadcast = if sa == sb {
            false
        } else {
            let cols = cols_of(sa);
            let b_is_row = sb == [cols] || sb == [1, cols];
            if sa.len() != 2 || !b_is_row {
                return Err(shape_err(format!("add {sa:?} + {sb:?}")));
            }
            true
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = if broadcast {
            let cols = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % cols])
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b, broadcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_data(a, b, |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_data(a, b, |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{name} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_data(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    /// Concatenation along the last dimension of two matrices.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(shape_err(format!("concat rows {ra} vs {rb}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(ra, ca + cb, data)?,
            Op::Concat { a, b, ca, cb },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * s },
            Op::LeakyRelu { a, slope: s },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus { a })
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean of an empty tensor".into()));
        }
        let m = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean { a }, rg))
    }

    /// Sum over all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Sum over the last dimension: `[n x d] -> [n x 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, cols) = self.value(a).dims2()?;
        let data: Vec<T> = if cols == 0 {
            vec![T::zero(); n]
        } else {
            self.value(a)
                .data()
                .chunks(cols)
                .map(|r| r.iter().copied().sum())
                .collect()
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, 1, data)?, Op::RowSum { a, cols }, rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length d.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(format!(
                "layer_norm over {d} columns with gamma {:?}, beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(n, d, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                cols: d,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    /// Rows of `table` selected by `ids` (repeats allowed).
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(format!(
                "row id {bad} out of range for {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), cols, data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Sums rows sharing a segment id: `[m x d] -> [num_segments x d]`.
    /// Empty segments yield zero rows.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let (m, cols) = self.value(a).dims2()?;
        check_segments(seg, m, num_segments)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); num_segments * cols];
        for (i, &s) in seg.iter().enumerate() {
            let dst = &mut out[s * cols..(s + 1) * cols];
            for (o, &x) in dst.iter_mut().zip(&av[i * cols..(i + 1) * cols]) {
                *o = *o + x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(num_segments, cols, out)?,
            Op::SegmentSum {
                a,
                seg: seg.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Softmax over the rows of each segment, independently per column.
    /// The per-segment maximum is subtracted before exponentiation.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let (m, cols) = self.value(a).dims2()?;
        check_segments(seg, m, num_segments)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * cols];
        for r in segment_ranges(seg) {
            for c in 0..cols {
                let max = r
                    .clone()
                    .map(|i| av[i * cols + c])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in r.clone() {
                    let e = (av[i * cols + c] - max).exp();
                    out[i * cols + c] = e;
                    total = total + e;
                }
                for i in r.clone() {
                    out[i * cols + c] = out[i * cols + c] / total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(m, cols, out)?,
            Op::SegmentSoftmax {
                a,
                seg: seg.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Per-head dot product: `x [n x h*d]` against `a [h x d]` gives
    /// `[n x h]`, entry `(i, j)` being `x[i, j-th block] . a[j]`.
    pub fn head_dot(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, width) = self.value(x).dims2()?;
        let (heads, head_dim) = self.value(a).dims2()?;
        if heads * head_dim != width {
            return Err(shape_err(format!(
                "head_dot [{n}x{width}] with [{heads}x{head_dim}]"
            )));
        }
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let mut out = vec![T::zero(); n * heads];
        for i in 0..n {
            for h in 0..heads {
                let xs = &xv[i * width + h * head_dim..i * width + (h + 1) * head_dim];
                let as_ = &av[h * head_dim..(h + 1) * head_dim];
                out[i * heads + h] = xs.iter().zip(as_).fold(T::zero(), |s, (&p, &q)| s + p * q);
            }
        }
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(
            Tensor::matrix(n, heads, out)?,
            Op::HeadDot {
                x,
                a,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Per-head scaling: `alpha [m x h]` times `v [m x h*d]`, each block of
    /// `d` columns scaled by its head's coefficient.
    pub fn head_scale(&mut self, alpha: Var, v: Var) -> Result<Var> {
        let (m, heads) = self.value(alpha).dims2()?;
        let (m2, width) = self.value(v).dims2()?;
        if m != m2 || heads == 0 || width % heads != 0 {
            return Err(shape_err(format!(
                "head_scale [{m}x{heads}] with [{m2}x{width}]"
            )));
        }
        let head_dim = width / heads;
        let (al, vv) = (self.value(alpha).data(), self.value(v).data());
        let out = (0..m * width)
            .map(|idx| {
                let (i, j) = (idx / width, idx % width);
                al[i * heads + j / head_dim] * vv[idx]
            })
            .collect();
        let rg = self.rg(alpha) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(m, width, out)?,
            Op::HeadScale {
                alpha,
                v,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` given its output gradient.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, n, k, m } => {
                if want(a) {
                    out.push((a, matmul_bt(g, val(b), n, m, k)));
                }
                if want(b) {
                    out.push((b, matmul_at(val(a), g, n, k, m)));
                }
            }
            &Op::Add { a, b, broadcast } => {
                out.push((a, g.to_vec()));
                if want(b) {
                    if broadcast {
                        let cols = self.nodes[b.0].value.len();
                        let mut gb = vec![T::zero(); cols];
                        for (j, &x) in g.iter().enumerate() {
                            gb[j % cols] = gb[j % cols] + x;
                        }
                        out.push((b, gb));
                    } else {
                        out.push((b, g.to_vec()));
                    }
                }
            }
            &Op::Sub { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&x| -x).collect()));
            }
            &Op::Mul { a, b } => {
                if want(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect()));
                }
                if want(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            &Op::Scale { a, c } => out.push((a, g.iter().map(|&x| x * c).collect())),
            &Op::AddScalar { a } => out.push((a, g.to_vec())),
            &Op::Concat { a, b, ca, cb } => {
                let w = ca + cb;
                let rows = g.len().checked_div(w).unwrap_or(0);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    ga.extend_from_slice(&g[r * w..r * w + ca]);
                    gb.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                }
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::Relu { a } => out.push((
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect(),
            )),
            &Op::LeakyRelu { a, slope } => out.push((
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { d * slope })
                    .collect(),
            )),
            &Op::Sigmoid { a } => out.push((
                a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect(),
            )),
            &Op::Softplus { a } => out.push((
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(&d, &x)| d * sigmoid(x))
                    .collect(),
            )),
            &Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                out.push((a, vec![g[0] / T::lit(n as f64); n]));
            }
            &Op::Sum { a } => out.push((a, vec![g[0]; self.nodes[a.0].value.len()])),
            &Op::RowSum { a, cols } => {
                let mut ga = Vec::with_capacity(g.len() * cols);
                for &x in g {
                    ga.extend(std::iter::repeat_n(x, cols));
                }
                out.push((a, ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                cols,
            } => {
                let d = *cols;
                let gam = val(*gamma);
                if want(*x) {
                    let dn = T::lit(d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[r * d + j] = is * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    out.push((*x, gx));
                }
                if want(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (idx, (&a, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[idx % d] = gg[idx % d] + a * h;
                    }
                    out.push((*gamma, gg));
                }
                if want(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for (idx, &a) in g.iter().enumerate() {
                        gb[idx % d] = gb[idx % d] + a;
                    }
                    out.push((*beta, gb));
                }
            }
            Op::Dropout { a, mask } => {
                out.push((*a, g.iter().zip(mask).map(|(&d, &m)| d * m).collect()));
            }
            Op::Gather { table, ids, cols } => {
                let mut gt = vec![T::zero(); self.nodes[table.0].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..*cols {
                        gt[id * cols + c] = gt[id * cols + c] + g[r * cols + c];
                    }
                }
                out.push((*table, gt));
            }
            Op::SegmentSum { a, seg, cols } => {
                let mut ga = Vec::with_capacity(seg.len() * cols);
                for &s in seg {
                    ga.extend_from_slice(&g[s * cols..(s + 1) * cols]);
                }
                out.push((*a, ga));
            }
            Op::SegmentSoftmax { a, seg, cols } => {
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                for r in segment_ranges(seg) {
                    for c in 0..*cols {
                        let dot = r
                            .clone()
                            .fold(T::zero(), |s, i| s + g[i * cols + c] * y[i * cols + c]);
                        for i in r.clone() {
                            ga[i * cols + c] = y[i * cols + c] * (g[i * cols + c] - dot);
                        }
                    }
                }
                out.push((*a, ga));
            }
            &Op::HeadDot {
                x,
                a,
                heads,
                head_dim,
            } => {
                let width = heads * head_dim;
                let (xv, av) = (val(x), val(a));
                let n = g.len() / heads.max(1);
                if want(x) {
                    let mut gx = vec![T::zero(); n * width];
                    for i in 0..n {
                        for h in 0..heads {
                            let d = g[i * heads + h];
                            for k in 0..head_dim {
                                gx[i * width + h * head_dim + k] = d * av[h * head_dim + k];
                            }
                        }
                    }
                    out.push((x, gx));
                }
                if want(a) {
                    let mut ga = vec![T::zero(); width];
                    for i in 0..n {
                        for h in 0..heads {
                            let d = g[i * heads + h];
                            for k in 0..head_dim {
                                ga[h * head_dim + k] =
                                    ga[h * head_dim + k] + d * xv[i * width + h * head_dim + k];
                            }
                        }
                    }
                    out.push((a, ga));
                }
            }
            &Op::HeadScale {
                alpha,
                v,
                heads,
                head_dim,
            } => {
                let width = heads * head_dim;
                let (al, vv) = (val(alpha), val(v));
                if want(v) {
                    let gv = g
                        .iter()
                        .enumerate()
                        .map(|(idx, &d)| d * al[(idx / width) * heads + (idx % width) / head_dim])
                        .collect();
                    out.push((v, gv));
                }
                if want(alpha) {
                    let mut ga = vec![T::zero(); al.len()];
                    for (idx, (&d, &x)) in g.iter().zip(vv).enumerate() {
                        let slot = (idx / width) * heads + (idx % width) / head_dim;
                        ga[slot] = ga[slot] + d * x;
                    }
                    out.push((alpha, ga));
                }
            }
        }
        out
    }
}
