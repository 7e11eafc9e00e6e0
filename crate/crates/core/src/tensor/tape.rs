use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Patch extraction layout for a 3×3-style convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Im2ColGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2ColGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Visits `(row, col, input_index)` for every in-bounds patch entry.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k, c) = (self.out_height(), self.out_width(), self.kernel, self.channels);
        let plen = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let base = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            let col = (ky * k + kx) * c;
                            for ch in 0..c {
                                f(row * plen, col + ch, base + ch);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    ClampedLog(Var, T),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    BroadcastCols(Var),
    RowDot(Var, Var),
    NormalizeRows(Var, Vec<T>),
    Softmax(Var, T),
    LogSoftmax(Var, T),
    LogSumExpRows(Var, Option<Vec<bool>>),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    AddRowVector(Var, Var),
    Im2Col(Var, Im2ColGeometry),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Records operations in creation order and replays them backwards.
///
/// Inputs of a node always precede it, so the creation order is a valid
/// topological order. A tape is single-threaded; independent runs use
/// independent tapes.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Softmax of `row / temperature` with max subtraction.
fn softmax_row<T: Scalar>(row: &[T], inv_t: T, out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) * inv_t).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Index(format!("variable {} not on this tape", v.0)))
        }
    }

    /// Records a leaf; its `requires_grad` flag decides whether gradients
    /// are collected for it.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.clear_grad();
        self.nodes.push(Node { op: Op::Leaf, value: tensor });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op: Op<T>, dims: Vec<usize>, data: Vec<T>, inputs: &[Var]) -> Result<Var> {
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{} (element {pos})", op_name(&op))));
        }
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        let value = Tensor::from_parts_unchecked(dims, data).with_requires_grad(rg);
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var) -> Result<(usize, usize)> {
        self.check(v)?;
        self.value(v).matrix_dims()
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (da, db) = (self.dims(a), self.dims(b));
        let ([m, k], [k2, n]) = (da, db) else {
            return Err(shape_err!("matmul needs rank-2 operands, got {da:?} and {db:?}"));
        };
        let (m, k, k2, n) = (*m, *k, *k2, *n);
        if k != k2 {
            return Err(shape_err!("matmul inner dims differ: [{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m, k, n, T::one(),
            self.data(a), k as isize, 1,
            self.data(b), n as isize, 1,
            T::zero(), &mut out, n as isize, 1,
        );
        self.push(Op::Matmul(a, b), vec![m, n], out, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let [m, n] = *self.dims(a) else {
            return Err(shape_err!("transpose needs rank 2, got {:?}", self.dims(a)));
        };
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a), vec![n, m], out, &[a])
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (dims, data) = if va.dims() == vb.dims() {
            let d = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            (va.dims().to_vec(), d)
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            (va.dims().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())
        } else if va.numel() == 1 {
            let x = va.data()[0];
            (vb.dims().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(shape_err!(
                "{} operands must match or be scalar: {:?} vs {:?}",
                op_name(&op),
                va.dims(),
                vb.dims()
            ));
        };
        self.push(op, dims, data, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        if self.data(b).iter().any(|v| *v == T::zero()) {
            return Err(Error::NumericDomain("division by zero".into()));
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let dims = v.dims().to_vec();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.push(op, dims, data, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.data(a).iter().any(|v| *v <= T::zero()) {
            return Err(Error::NumericDomain("log of a non-positive value".into()));
        }
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    /// `log(max(x, floor))`; gradient is zero where the floor is active.
    pub fn clamped_log(&mut self, a: Var, floor: T) -> Result<Var> {
        if floor <= T::zero() {
            return Err(Error::Parameter("log floor must be positive".into()));
        }
        self.unary(a, Op::ClampedLog(a, floor), |x| x.max(floor).ln())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.data(a).iter().any(|v| *v <= T::zero()) {
            return Err(Error::NumericDomain("sqrt needs strictly positive input".into()));
        }
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    // ---- reductions and reshapes ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.data(a).iter().copied().sum();
        self.push(Op::Sum(a), vec![1], vec![s], &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.data(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Op::Mean(a), vec![1], vec![s], &[a])
    }

    /// `[m, n] -> [m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        let v = self.data(a);
        let out = (0..m).map(|i| v[i * n..(i + 1) * n].iter().copied().sum()).collect();
        self.push(Op::RowSum(a), vec![m, 1], out, &[a])
    }

    /// Repeats a column `[m, 1]` into `[m, n]`.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let [m, 1] = *self.dims(a) else {
            return Err(shape_err!("broadcast_cols needs [m, 1], got {:?}", self.dims(a)));
        };
        if n == 0 {
            return Err(shape_err!("broadcast_cols to zero columns"));
        }
        let v = self.data(a);
        let out = (0..m * n).map(|idx| v[idx / n]).collect();
        self.push(Op::BroadcastCols(a), vec![m, n], out, &[a])
    }

    /// Row-wise inner products, `[m, n] x [m, n] -> [m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if self.matrix(b)? != (m, n) {
            return Err(shape_err!("row_dot shapes {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        let (x, y) = (self.data(a), self.data(b));
        let out = (0..m)
            .map(|i| (0..n).map(|j| x[i * n + j] * y[i * n + j]).sum())
            .collect();
        self.push(Op::RowDot(a, b), vec![m, 1], out, &[a, b])
    }

    /// L2-normalizes each row; rows with norm below `1e-12` are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        let x = self.data(a);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm.as_f64() < 1e-12 {
                return Err(Error::NumericDomain(format!("row {i} has zero norm")));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let dims = self.dims(a).to_vec();
        self.push(Op::NormalizeRows(a, norms), dims, out, &[a])
    }

    fn check_temperature(temperature: T) -> Result<T> {
        if temperature > T::zero() {
            Ok(T::one() / temperature)
        } else {
            Err(Error::Parameter(format!("temperature must be > 0, got {temperature:?}")))
        }
    }

    /// Softmax of `a / temperature` along the last axis (rank 1 or 2).
    pub fn softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        let inv_t = Self::check_temperature(temperature)?;
        let (m, n) = self.matrix(a)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_row(&x[i * n..(i + 1) * n], inv_t, &mut out[i * n..(i + 1) * n]);
        }
        let dims = self.dims(a).to_vec();
        self.push(Op::Softmax(a, inv_t), dims, out, &[a])
    }

    /// Log-softmax of `a / temperature` along the last axis.
    pub fn log_softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        let inv_t = Self::check_temperature(temperature)?;
        let (m, n) = self.matrix(a)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let lse = row.iter().map(|&v| ((v - max) * inv_t).exp()).sum::<T>().ln();
            for j in 0..n {
                out[i * n + j] = (row[j] - max) * inv_t - lse;
            }
        }
        let dims = self.dims(a).to_vec();
        self.push(Op::LogSoftmax(a, inv_t), dims, out, &[a])
    }

    /// `log Σ_j exp(a_ij)` over the entries where `mask` is true
    /// (all entries when `mask` is `None`). Output `[m, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(shape_err!("mask of length {} for [{m}, {n}]", mk.len()));
            }
        }
        let x = self.data(a);
        let on = |idx: usize| mask.as_ref().map_or(true, |mk| mk[idx]);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let max = (0..n)
                .filter(|&j| on(i * n + j))
                .map(|j| x[i * n + j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::DegenerateBatch(format!("row {i} has an empty logsumexp")));
            }
            let s: T = (0..n)
                .filter(|&j| on(i * n + j))
                .map(|j| (x[i * n + j] - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        self.push(Op::LogSumExpRows(a, mask), vec![m, 1], out, &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if rows.is_empty() {
            return Err(shape_err!("select_rows with no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} out of {m}")));
        }
        let x = self.data(a);
        let out = rows.iter().flat_map(|&r| x[r * n..(r + 1) * n].iter().copied()).collect();
        self.push(Op::SelectRows(a, rows.to_vec()), vec![rows.len(), n], out, &[a])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        self.check(a)?;
        if dims.iter().product::<usize>() != self.value(a).numel() || dims.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.dims(a)));
        }
        let data = self.data(a).to_vec();
        self.push(Op::Reshape(a), dims.to_vec(), data, &[a])
    }

    /// Adds a bias vector `[n]` (or `[1, n]`) to every row of `[m, n]`.
    pub fn add_row_vector(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        self.check(bias)?;
        if self.value(bias).numel() != n {
            return Err(shape_err!("bias {:?} for rows of width {n}", self.dims(bias)));
        }
        let (x, b) = (self.data(a), self.data(bias));
        let out = (0..m * n).map(|idx| x[idx] + b[idx % n]).collect();
        self.push(Op::AddRowVector(a, bias), vec![m, n], out, &[a, bias])
    }

    /// Extracts convolution patches from NHWC input `[B, H, W, C]` into
    /// `[B * Ho * Wo, k * k * C]`, zero padded.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.check(a)?;
        let [batch, height, width, channels] = *self.dims(a) else {
            return Err(shape_err!("im2col needs [B, H, W, C], got {:?}", self.dims(a)));
        };
        if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(shape_err!("im2col geometry k={kernel} s={stride} p={pad} on {height}x{width}"));
        }
        let geo = Im2ColGeometry { batch, height, width, channels, kernel, stride, pad };
        let rows = batch * geo.out_height() * geo.out_width();
        let mut out = vec![T::zero(); rows * geo.patch_len()];
        let x = self.data(a);
        geo.for_each(|row_base, col, src| out[row_base + col] = x[src]);
        self.push(Op::Im2Col(a, geo), vec![rows, geo.patch_len()], out, &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates `d root / d node` to every node that requires grad and
    /// adds the result into the gradient buffers of leaves. Calling it
    /// twice without resetting accumulates twice.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.value(root).numel() != 1 {
            return Err(shape_err!("backward from non-scalar root {:?}", self.dims(root)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g)?;
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        // Gradient of a binary operand that may have been broadcast from a scalar.
        let fold = |v: Var, per_elem: Vec<T>| -> Vec<T> {
            if self.value(v).numel() == 1 && per_elem.len() != 1 {
                vec![per_elem.into_iter().sum()]
            } else {
                per_elem
            }
        };
        let bcast = |v: Var, i: usize| -> T {
            let d = self.data(v);
            if d.len() == 1 { d[0] } else { d[i] }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let [m, k] = *self.dims(*a) else { unreachable!() };
                let n = self.dims(*b)[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m, n, k, T::one(),
                        g, n as isize, 1,
                        self.data(*b), 1, n as isize,
                        T::zero(), &mut ga, k as isize, 1,
                    );
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k, m, n, T::one(),
                        self.data(*a), 1, k as isize,
                        g, n as isize, 1,
                        T::zero(), &mut gb, n as isize, 1,
                    );
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let [m, n] = *self.dims(*a) else { unreachable!() };
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, ga);
            }
            Op::Add(a, b) => {
                send(*a, fold(*a, g.to_vec()));
                send(*b, fold(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                send(*a, fold(*a, g.to_vec()));
                send(*b, fold(*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let ga = (0..g.len()).map(|i| g[i] * bcast(*b, i)).collect();
                let gb = (0..g.len()).map(|i| g[i] * bcast(*a, i)).collect();
                send(*a, fold(*a, ga));
                send(*b, fold(*b, gb));
            }
            Op::Div(a, b) => {
                let ga = (0..g.len()).map(|i| g[i] / bcast(*b, i)).collect();
                let gb = (0..g.len())
                    .map(|i| {
                        let d = bcast(*b, i);
                        -g[i] * bcast(*a, i) / (d * d)
                    })
                    .collect();
                send(*a, fold(*a, ga));
                send(*b, fold(*b, gb));
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Neg(a) => send(*a, g.iter().map(|&x| -x).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()),
            Op::Log(a) => {
                let x = self.data(*a);
                send(*a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect());
            }
            Op::ClampedLog(a, floor) => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > *floor { gi / xi } else { T::zero() })
                    .collect();
                send(*a, ga);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                send(*a, ga);
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                send(*a, ga);
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                send(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * half / yi).collect());
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::RowSum(a) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                send(*a, (0..m * n).map(|idx| g[idx / n]).collect());
            }
            Op::BroadcastCols(a) => {
                let m = self.dims(*a)[0];
                let n = g.len() / m;
                send(*a, (0..m).map(|i| g[i * n..(i + 1) * n].iter().copied().sum()).collect());
            }
            Op::RowDot(a, b) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                let (x, z) = (self.data(*a), self.data(*b));
                send(*a, (0..m * n).map(|idx| g[idx / n] * z[idx]).collect());
                send(*b, (0..m * n).map(|idx| g[idx / n] * x[idx]).collect());
            }
            Op::NormalizeRows(a, norms) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                send(*a, ga);
            }
            Op::Softmax(a, inv_t) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        ga[i * n + j] = yr[j] * (gr[j] - dot) * *inv_t;
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a, inv_t) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - yr[j].exp() * gsum) * *inv_t;
                    }
                }
                send(*a, ga);
            }
            Op::LogSumExpRows(a, mask) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                let x = self.data(*a);
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let idx = i * n + j;
                        if mask.as_ref().map_or(true, |mk| mk[idx]) {
                            ga[idx] = g[i] * (x[idx] - y[i]).exp();
                        }
                    }
                }
                send(*a, ga);
            }
            Op::SelectRows(a, rows) => {
                let (m, n) = self.value(*a).matrix_dims().expect("matrix");
                let mut ga = vec![T::zero(); m * n];
                for (r_out, &r_in) in rows.iter().enumerate() {
                    for j in 0..n {
                        ga[r_in * n + j] += g[r_out * n + j];
                    }
                }
                send(*a, ga);
            }
            Op::AddRowVector(a, b) => {
                let n = self.value(*b).numel();
                send(*a, g.to_vec());
                let mut gb = vec![T::zero(); n];
                for (idx, &gi) in g.iter().enumerate() {
                    gb[idx % n] += gi;
                }
                send(*b, gb);
            }
            Op::Im2Col(a, geo) => {
                let mut ga = vec![T::zero(); self.value(*a).numel()];
                geo.for_each(|row_base, col, src| ga[src] += g[row_base + col]);
                send(*a, ga);
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::ClampedLog(..) => "clamped_log",
        Op::Relu(..) => "relu",
        Op::Abs(..) => "abs",
        Op::Sqrt(..) => "sqrt",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::RowSum(..) => "row_sum",
        Op::BroadcastCols(..) => "broadcast_cols",
        Op::RowDot(..) => "row_dot",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LogSumExpRows(..) => "logsumexp_rows",
        Op::SelectRows(..) => "select_rows",
        Op::Reshape(..) => "reshape",
        Op::AddRowVector(..) => "add_row_vector",
        Op::Im2Col(..) => "im2col",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.dims(c), &[2, 1]);
        assert_eq!(tape.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
        let a = tape.constant(t(&[3, 3], &vals));
        let i = tape.constant(Tensor::eye(3));
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let ai = tape.matmul(a, i).unwrap();
        let az = tape.matmul(a, z).unwrap();
        assert_eq!(tape.data(ai), vals.as_slice());
        assert!(tape.data(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_definition_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[-3.5]));
        let abs = tape.abs(a).unwrap();
        assert_eq!(tape.data(abs), &[3.5]);
        let z = tape.constant(Tensor::zeros(&[4]));
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.data(e), &[1.0; 4]);
        let r = tape.constant(t(&[2], &[-1.0, 2.0]));
        let relu = tape.relu(r).unwrap();
        assert_eq!(tape.data(relu), &[0.0, 2.0]);
    }

    #[test]
    fn elementwise_domain_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.log(a), Err(Error::NumericDomain(_))));
        assert!(matches!(tape.div(b, a), Err(Error::NumericDomain(_))));
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
        let s = tape.constant(Tensor::scalar(2.0));
        let bs = tape.mul(b, s).unwrap();
        assert_eq!(tape.data(bs), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let eq = tape.constant(t(&[3], &[0.4, 0.4, 0.4]));
        let p = tape.softmax(eq, 0.37).unwrap();
        for &v in tape.data(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let l = tape.constant(t(&[2], &[1.0, 0.0]));
        let p = tape.softmax(l, 1.0).unwrap();
        assert!((tape.data(p)[0] - 0.7311).abs() < 1e-4);
        assert!((tape.data(p)[1] - 0.2689).abs() < 1e-4);
        let l = tape.constant(t(&[2], &[10.0, 0.0]));
        let p = tape.softmax(l, 0.1).unwrap();
        assert!(tape.data(p)[0] > 1.0 - 1e-6);
        assert!(matches!(tape.softmax(l, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(tape.softmax(l, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1.75]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.5]);
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let e = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(e), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let mut tape = Tape::<f64>::new();
        let logits = [0.3, -1.2, 2.0, 0.1];
        let y = [0.0, 0.0, 1.0, 0.0];
        let x = tape.leaf(t(&[1, 4], &logits).with_requires_grad(true));
        let ls = tape.log_softmax(x, 1.0).unwrap();
        let yv = tape.constant(t(&[1, 4], &y));
        let prod = tape.mul(ls, yv).unwrap();
        let s = tape.sum(prod).unwrap();
        let loss = tape.neg(s).unwrap();
        tape.backward(loss).unwrap();
        let p = tape.softmax(x, 1.0).unwrap();
        let p = tape.data(p).to_vec();
        for j in 0..4 {
            assert!((tape.grad(x).unwrap()[j] - (p[j] - y[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_identity_kernel_roundtrip() {
        // A 1x1 kernel with stride 1 is a reshape.
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 3, 3, 2], &vals));
        let cols = tape.im2col(x, 1, 1, 0).unwrap();
        assert_eq!(tape.dims(cols), &[18, 2]);
        assert_eq!(tape.data(cols), vals.as_slice());
        let cols = tape.im2col(x, 3, 2, 1).unwrap();
        assert_eq!(tape.dims(cols), &[2 * 2 * 2, 18]);
    }
}
