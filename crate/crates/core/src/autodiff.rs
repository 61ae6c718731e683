//! Tape-based reverse-mode differentiation over dense row-major arrays.
//!
//! Tensors are generic over the element type: the model trains in `f32`
//! while gradient checks run in `f64`. Reductions accumulate in `f64`
//! either way.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};

pub trait Float:
    Copy
    + Default
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Float for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Float for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gather { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Bmm(Var, Var),
    BmmNt(Var, Var),
    Rope { x: Var, table: Arc<RopeTable> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Cosine and sine tables for rotary embeddings: `[seq, head_dim / 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub seq: usize,
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    /// Angle of pair `i` at position `p` is `p · base^(−2i/head_dim)`.
    pub fn new(seq: usize, head_dim: usize, base: f64, offset: usize) -> Result<Self> {
        if !head_dim.is_multiple_of(2) || head_dim == 0 {
            return Err(Error::Config(format!("rotary head dim {head_dim} must be even")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for p in 0..seq {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
                let a = (p + offset) as f64 * theta;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Ok(Self { seq, half, cos, sin })
    }

    /// Rotate `[rows, seq, 2·half]` in place; `sign = -1` applies the inverse.
    pub fn rotate<T: Float>(&self, data: &mut [T], sign: f64) {
        let d = 2 * self.half;
        for (r, row) in data.chunks_exact_mut(d).enumerate() {
            let p = r % self.seq;
            let cs = &self.cos[p * self.half..(p + 1) * self.half];
            let sn = &self.sin[p * self.half..(p + 1) * self.half];
            for i in 0..self.half {
                let (x0, x1) = (row[2 * i].to_f64(), row[2 * i + 1].to_f64());
                let (c, s) = (cs[i], sign * sn[i]);
                row[2 * i] = T::from_f64(x0 * c - x1 * s);
                row[2 * i + 1] = T::from_f64(x0 * s + x1 * c);
            }
        }
    }
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

const MR: usize = 4;

/// `out[i, j] += Σ_p A(i, p) · b[p, j]` with `A(i, p) = a[i·sa_i + p·sa_p]`,
/// register-blocked `MR × NR` and accumulated in `f64`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_body<T: Float, const NR: usize, const FMA: bool>(
    m: usize,
    n: usize,
    kd: usize,
    a: &[T],
    sa_i: usize,
    sa_p: usize,
    b: &[T],
    out: &mut [f64],
) {
    #[inline(always)]
    fn madd<const FMA: bool>(acc: f64, x: f64, y: f64) -> f64 {
        if FMA {
            x.mul_add(y, acc)
        } else {
            acc + x * y
        }
    }
    let m_main = m / MR * MR;
    let n_main = n / NR * NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0f64; NR]; MR];
            for p in 0..kd {
                let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                let bv: [f64; NR] = std::array::from_fn(|c| brow[c].to_f64());
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * sa_i + p * sa_p].to_f64();
                    for c in 0..NR {
                        row[c] = madd::<FMA>(row[c], av, bv[c]);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o: &mut [f64; NR] = (&mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]).try_into().unwrap();
                for c in 0..NR {
                    o[c] += row[c];
                }
            }
        }
        for i in i0..i0 + MR {
            for j in n_main..n {
                let mut s = 0.0;
                for p in 0..kd {
                    s = madd::<FMA>(s, a[i * sa_i + p * sa_p].to_f64(), b[p * n + j].to_f64());
                }
                out[i * n + j] += s;
            }
        }
    }
    for i in m_main..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..kd {
            let av = a[i * sa_i + p * sa_p].to_f64();
            for (ov, bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *ov = madd::<FMA>(*ov, av, bv.to_f64());
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx512<T: Float>(m: usize, n: usize, kd: usize, a: &[T], sa_i: usize, sa_p: usize, b: &[T], out: &mut [f64]) {
    gemm_body::<T, 16, true>(m, n, kd, a, sa_i, sa_p, b, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2<T: Float>(m: usize, n: usize, kd: usize, a: &[T], sa_i: usize, sa_p: usize, b: &[T], out: &mut [f64]) {
    gemm_body::<T, 8, true>(m, n, kd, a, sa_i, sa_p, b, out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(m: usize, n: usize, kd: usize, a: &[T], sa_i: usize, sa_p: usize, b: &[T], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("fma") {
            // SAFETY: the features were detected at runtime.
            return unsafe { gemm_avx512(m, n, kd, a, sa_i, sa_p, b, out) };
        }
        if has!("avx2") && has!("fma") {
            // SAFETY: the features were detected at runtime.
            return unsafe { gemm_avx2(m, n, kd, a, sa_i, sa_p, b, out) };
        }
    }
    gemm_body::<T, 8, false>(m, n, kd, a, sa_i, sa_p, b, out)
}

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn mm_nn<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut acc = vec![0f64; m * n];
    gemm(m, n, k, a, k, 1, b, &mut acc);
    for (o, s) in out.iter_mut().zip(acc) {
        *o = T::from_f64(s);
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`, accumulated in `f64`.
fn mm_tn_acc<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    gemm(k, n, m, a, 1, k, b, acc);
}

fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn mm_nt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let bt = transpose(b, n, k);
    mm_nn(a, &bt, m, k, n, out);
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `tanh` through a single `exp`; libm's version is several times slower.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

#[inline]
pub(crate) fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax over rows of width `w`. With `causal`, rows are grouped in
/// square blocks and row `i` of a block only sees columns `0..=i`.
fn softmax_rows<T: Float>(x: &[T], w: usize, causal: bool, out: &mut [T]) {
    for (r, (xr, or)) in x.chunks_exact(w).zip(out.chunks_exact_mut(w)).enumerate() {
        let valid = if causal { r % w + 1 } else { w };
        let mx = xr[..valid]
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let mut z = 0.0;
        for (o, &v) in or[..valid].iter_mut().zip(&xr[..valid]) {
            let e = (v.to_f64() - mx).exp();
            z += e;
            *o = T::from_f64(e);
        }
        let inv = 1.0 / z;
        for o in &mut or[..valid] {
            *o = T::from_f64(o.to_f64() * inv);
        }
        for o in &mut or[valid..] {
            *o = T::ZERO;
        }
    }
}

/// Reverse-mode tape. One forward per tape.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// `a[..., k] · b[k, n]` with leading axes of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return shape_err("matmul", &sa, sb);
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![T::ZERO; m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add", sa, sb);
        }
        let shape = sa.to_vec();
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bd.len().max(1)) {
            add_into(chunk, bd);
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("mul", sa, sb);
        }
        let shape = sa.to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * s).collect(),
            requires_grad: false,
        };
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| T::from_f64(gelu_f(x.to_f64()))).collect(),
            requires_grad: false,
        };
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis of `[.., s, s]` score blocks where query
    /// row `i` only attends to keys `0..=i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&w) = shape.last() else {
            return shape_err("softmax", &shape, &[]);
        };
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != w) {
            return shape_err("causal_softmax", &shape, &[w, w]);
        }
        let mut out = vec![T::ZERO; self.value(x).numel()];
        if w > 0 {
            softmax_rows(self.value(x).data(), w, causal, &mut out);
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), &[x]))
    }

    /// `x / rms(x) · gain` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gain));
        if sg.len() != 1 || sx.last() != Some(&sg[0]) {
            return shape_err("rmsnorm", sx, sg);
        }
        let shape = sx.to_vec();
        let d = sg[0];
        let g = self.value(gain).data();
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        let mut inv_rms = Vec::with_capacity(xd.len() / d.max(1));
        for (xr, or) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = xr.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for ((o, &v), &gv) in or.iter_mut().zip(xr).zip(g) {
                *o = T::from_f64(v.to_f64() * r * gv.to_f64());
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            &[x, gain],
        ))
    }

    /// Rows of `table[v, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return shape_err("gather", st, &[ids.len()]);
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return shape_err("gather", st, &[bad as usize]);
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i as usize * d..(i as usize + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Gather { table, ids },
            &[table],
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is
    /// set; zero when nothing is selected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() || sl[0] != mask.len() {
            return shape_err("cross_entropy", sl, &[targets.len(), mask.len()]);
        }
        let v = sl[1];
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t as usize >= v).map(|(t, _)| t) {
            return shape_err("cross_entropy", sl, &[bad as usize]);
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::ZERO; ld.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, (lr, pr)) in ld.chunks_exact(v).zip(probs.chunks_exact_mut(v)).enumerate() {
            if !mask[r] {
                continue;
            }
            let mx = lr.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
            let z: f64 = lr.iter().map(|x| (x.to_f64() - mx).exp()).sum();
            for (p, x) in pr.iter_mut().zip(lr) {
                *p = T::from_f64((x.to_f64() - mx).exp() / z);
            }
            total += z.ln() + mx - lr[targets[r] as usize].to_f64();
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || !s[1].is_multiple_of(heads) {
            return shape_err("split_heads", s, &[batch, seq, heads]);
        }
        let dh = s[1] / heads;
        let out = permute_heads(self.value(x).data(), batch, seq, heads, dh, true);
        Ok(self.push(
            Tensor::new(&[batch * heads, seq, dh], out)?,
            Op::SplitHeads { x, batch, seq, heads },
            &[x],
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads {
            return shape_err("merge_heads", s, &[batch, heads]);
        }
        let (seq, dh) = (s[1], s[2]);
        let out = permute_heads(self.value(x).data(), batch, seq, heads, dh, false);
        Ok(self.push(
            Tensor::new(&[batch * seq, heads * dh], out)?,
            Op::MergeHeads { x, batch, seq, heads },
            &[x],
        ))
    }

    /// Batched `a[b, m, k] · b[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", sa, sb);
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; nb * m * n];
        for i in 0..nb {
            mm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::new(&[nb, m, n], out)?, Op::Bmm(a, b), &[a, b]))
    }

    /// Batched `a[b, m, k] · b[b, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return shape_err("bmm_nt", sa, sb);
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; nb * m * n];
        for i in 0..nb {
            mm_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::new(&[nb, m, n], out)?, Op::BmmNt(a, b), &[a, b]))
    }

    /// Rotary embedding of `[rows, seq, dh]` at positions `0..seq`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] != table.seq || s[2] != 2 * table.half {
            return shape_err("rope", s, &[table.seq, 2 * table.half]);
        }
        let shape = s.to_vec();
        let mut out = self.value(x).data().to_vec();
        table.rotate(&mut out, 1.0);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Rope { x, table }, &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", self.shape(loss), &[]);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape[0], tb.shape[1]);
                let m = ta.numel() / k;
                self.accumulate(grads, *a, |ga| {
                    let mut tmp = vec![T::ZERO; m * k];
                    mm_nt(g, tb.data(), m, n, k, &mut tmp);
                    add_into(ga, &tmp);
                });
                self.accumulate(grads, *b, |gb| {
                    let mut acc = vec![0f64; k * n];
                    mm_tn_acc(ta.data(), g, m, k, n, &mut acc);
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o += T::from_f64(s);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    let w = gb.len().max(1);
                    let mut acc = vec![0f64; gb.len()];
                    for chunk in g.chunks_exact(w) {
                        for (s, &v) in acc.iter_mut().zip(chunk) {
                            *s += v.to_f64();
                        }
                    }
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o += T::from_f64(s);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi * *s;
                }
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += T::from_f64(gi.to_f64() * gelu_grad(xv.to_f64()));
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = *node.value.shape.last().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), or) in y.chunks_exact(w).zip(g.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += T::from_f64(yv.to_f64() * (gv.to_f64() - dot));
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let d = gd.len();
                self.accumulate(grads, *x, |gx| {
                    for (((xr, gr), or), &r) in xd
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        let mut dot = 0.0;
                        for ((&xv, &gv), &w) in xr.iter().zip(gr).zip(gd) {
                            dot += gv.to_f64() * w.to_f64() * xv.to_f64() * r;
                        }
                        let mean = dot / d as f64;
                        for (((o, &xv), &gv), &w) in or.iter_mut().zip(xr).zip(gr).zip(gd) {
                            let u = gv.to_f64() * w.to_f64();
                            *o += T::from_f64(r * (u - xv.to_f64() * r * mean));
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    let mut acc = vec![0f64; d];
                    for ((xr, gr), &r) in xd.chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                        for ((s, &xv), &gv) in acc.iter_mut().zip(xr).zip(gr) {
                            *s += gv.to_f64() * xv.to_f64() * r;
                        }
                    }
                    for (o, s) in gg.iter_mut().zip(acc) {
                        *o += T::from_f64(s);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i as usize * d..(i as usize + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = self.value(*logits).shape[1];
                let scale = g[0].to_f64() / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, (or, pr)) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        for (o, &p) in or.iter_mut().zip(pr) {
                            *o += T::from_f64(p.to_f64() * scale);
                        }
                        or[targets[r] as usize] += T::from_f64(-scale);
                    }
                });
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let dh = node.value.shape[2];
                self.accumulate(grads, *x, |gx| {
                    add_into(gx, &permute_heads(g, *batch, *seq, *heads, dh, false));
                });
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dh = node.value.shape[1] / heads;
                self.accumulate(grads, *x, |gx| {
                    add_into(gx, &permute_heads(g, *batch, *seq, *heads, dh, true));
                });
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (&self.value(*a).shape, &self.value(*b).shape);
                let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    let mut tmp = vec![T::ZERO; m * k];
                    for i in 0..nb {
                        mm_nt(&g[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], m, n, k, &mut tmp);
                        add_into(&mut ga[i * m * k..(i + 1) * m * k], &tmp);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..nb {
                        let mut acc = vec![0f64; k * n];
                        mm_tn_acc(&ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, k, n, &mut acc);
                        for (o, s) in gb[i * k * n..(i + 1) * k * n].iter_mut().zip(acc) {
                            *o += T::from_f64(s);
                        }
                    }
                });
            }
            Op::BmmNt(a, b) => {
                let (sa, sb) = (&self.value(*a).shape, &self.value(*b).shape);
                let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                self.accumulate(grads, *a, |ga| {
                    let mut tmp = vec![T::ZERO; m * k];
                    for i in 0..nb {
                        mm_nn(&g[i * m * n..(i + 1) * m * n], &bd[i * n * k..(i + 1) * n * k], m, n, k, &mut tmp);
                        add_into(&mut ga[i * m * k..(i + 1) * m * k], &tmp);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..nb {
                        let mut acc = vec![0f64; n * k];
                        mm_tn_acc(&g[i * m * n..(i + 1) * m * n], &ad[i * m * k..(i + 1) * m * k], m, n, k, &mut acc);
                        for (o, s) in gb[i * n * k..(i + 1) * n * k].iter_mut().zip(acc) {
                            *o += T::from_f64(s);
                        }
                    }
                });
            }
            Op::Rope { x, table } => self.accumulate(grads, *x, |gx| {
                let mut tmp = g.to_vec();
                table.rotate(&mut tmp, -1.0);
                add_into(gx, &tmp);
            }),
        }
    }
}

/// Move between `[b·s, h·dh]` (`split = true` reads this layout) and
/// `[b·h, s, dh]`.
fn permute_heads<T: Float>(x: &[T], b: usize, s: usize, h: usize, dh: usize, split: bool) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for si in 0..s {
            for hi in 0..h {
                let flat = (bi * s + si) * h * dh + hi * dh;
                let head = ((bi * h + hi) * s + si) * dh;
                let (src, dst) = if split { (flat, head) } else { (head, flat) };
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

/// Maximum relative error `|a − n| / (|a| + |n| + 1e-8)` between analytic
/// and central-difference gradients of `f` with respect to every element of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-5, 1e-2]")));
    }
    let eval = |ps: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone().with_grad(grad))).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite objective {value}")));
        }
        if !grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let gs = vars
            .iter()
            .zip(ps)
            .map(|(v, p)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        Ok((value, Some(gs)))
    };
    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, ga) in analytic.iter().enumerate() {
        for (ei, &a) in ga.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at param {pi}[{ei}]")));
            }
            let orig = work[pi].data[ei];
            let mut at = |h: f64| -> Result<f64> {
                work[pi].data[ei] = orig + h;
                eval(&work, false).map(|r| r.0)
            };
            // Fourth-order central stencil.
            let (f1, f_1) = (at(epsilon)?, at(-epsilon)?);
            let (f2, f_2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            work[pi].data[ei] = orig;
            let n = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * epsilon);
            let err = (a - n).abs() / (a.abs() + n.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
