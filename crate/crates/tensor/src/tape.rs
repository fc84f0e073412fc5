//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node's parents have
//! smaller indices and a single reverse sweep visits each node once.

use std::collections::HashMap;

use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu { x: Var, dy: Vec<f64> },
    Relu(Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumLast(Var),
    DivLast(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        steps: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Narrow0 {
        x: Var,
        offset: usize,
    },
    Concat0(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = a·b + beta·c` with `c` row-major of row stride `n`.
/// `c` may point at uninitialised memory when `beta` is 0
/// (dgemm then never reads it).
///
/// # Safety
/// `c` must be valid for m·n writes and must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: *mut f64,
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c,
            n as isize,
            1,
        );
    }
}

/// A vector of `len` elements written entirely by `fill`, which receives a
/// pointer to uninitialised storage.
fn written_by(len: usize, fill: impl FnOnce(*mut f64)) -> Vec<f64> {
    let mut v = Vec::with_capacity(len);
    fill(v.as_mut_ptr());
    // SAFETY: callers write every one of the `len` elements in `fill`.
    unsafe { v.set_len(len) };
    v
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    // tanh through exp is several times cheaper than libm's tanh
    let t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the open interval even where f64 rounding would saturate
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_order.iter().copied()
    }

    // ---- leaves ---------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Brings a stored parameter onto the tape; repeated calls return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Param,
            p.trainable,
        );
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.binary(a, b, |x, y| x / y, Op::Div(a, b)))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(TensorError::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Offset(x), rg)
    }

    /// Multiplies every entry of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(TensorError::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.scalar(s);
        let value = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::ScaleBy(x, s), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(TensorError::shape("mul_const", self.shape(x), c.shape()));
        }
        let value = self.value(x).iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        let mut dy = Vec::with_capacity(xv.len());
        for &v in xv {
            let (y, d) = gelu(v);
            value.push(y);
            dy.push(d);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu { x, dy }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis: `[..., n] -> [...]` (a 1-D input gives `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let value = self.value(x).chunks_exact(n).map(|c| c.iter().sum()).collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rg = self.rg(&[x]);
        self.push(out_shape, value, Op::SumLast(x), rg)
    }

    /// `x[..., n] / s[...]`, dividing each last-axis slice by its own scalar.
    pub fn div_last(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if numel(self.shape(s)) * n != numel(self.shape(x)) {
            return Err(TensorError::shape("div_last", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s);
        let value = self
            .value(x)
            .chunks_exact(n)
            .zip(sv)
            .flat_map(|(row, &d)| row.iter().map(move |v| v / d))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::DivLast(x, s), rg))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let (av, bv) = (self.value(a), self.value(b));
        // SAFETY: dgemm writes all m·n outputs when beta is 0.
        let value = written_by(m * n, |c| unsafe {
            gemm_raw(m, k, n, av, k as isize, 1, bv, n as isize, 1, c, 0.0)
        });
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with
    /// `b[B, n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: each dgemm call writes its own m·n block when beta is 0.
        let value = written_by(batch * m * n, |c| {
            for i in 0..batch {
                unsafe {
                    gemm_raw(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        k as isize,
                        1,
                        &bv[i * k * n..],
                        rsb,
                        csb,
                        c.add(i * m * n),
                        0.0,
                    )
                }
            }
        });
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            value,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose needs a matrix, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(TensorError::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    // ---- normalisation --------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let mx = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    value[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    value[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Softmax over the last axis of `x[B, m, n]` restricted to keys with
    /// `keep[b * n + j] == true`; excluded keys get probability exactly 0.
    /// Equivalent to adding `-inf` logits at the excluded positions.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || keep.len() != shape[0] * shape[2] {
            return Err(TensorError::shape("masked_softmax", &shape, &[keep.len()]));
        }
        let (batch, m, n) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for b in 0..batch {
            let kp = &keep[b * n..(b + 1) * n];
            if !kp.iter().any(|&k| k) {
                return Err(TensorError::Contract(format!(
                    "masked_softmax: batch item {b} has no unmasked keys"
                )));
            }
            for r in 0..m {
                let off = (b * m + r) * n;
                let row = &xv[off..off + n];
                let out = &mut value[off..off + n];
                let mx = row
                    .iter()
                    .zip(kp)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    if kp[j] {
                        let e = (row[j] - mx).exp();
                        out[j] = e;
                        z += e;
                    }
                }
                for v in out.iter_mut() {
                    *v /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::MaskedSoftmax(x), rg))
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, bb) = (self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                value[r * n + j] = h * g[j] + bb[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- structural -----------------------------------------------------

    /// Depthwise temporal convolution of `x[B, T, d]` with `w[K, d]` (K odd),
    /// zero-padded at each sequence boundary so batch items never mix.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[2] || sw[0] % 2 == 0 {
            return Err(TensorError::shape("temporal_conv", &sx, &sw));
        }
        let (batch, steps, d) = (sx[0], sx[1], sx[2]);
        let k = sw[0];
        let half = (k / 2) as isize;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut value = vec![0.0; xv.len()];
        for b in 0..batch {
            for t in 0..steps {
                let out = &mut value[(b * steps + t) * d..(b * steps + t + 1) * d];
                for j in 0..k {
                    let src = t as isize + j as isize - half;
                    if src < 0 || src >= steps as isize {
                        continue;
                    }
                    let xr = &xv[(b * steps + src as usize) * d..][..d];
                    let wr = &wv[j * d..(j + 1) * d];
                    for c in 0..d {
                        out[c] += wr[c] * xr[c];
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(sx, value, Op::TemporalConv { x, w, steps }, rg))
    }

    /// Row lookup `table[ids[i], :]`, output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::shape("gather_rows", &st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table);
        let value = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if len == 0 || start + len > n {
            return Err(TensorError::shape("slice_last", &shape, &[start, len]));
        }
        let value = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out, value, Op::SliceLast { x, start }, rg))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::shape("concat_last", &first, s));
            }
            total += s[s.len() - 1];
        }
        let rows = numel(lead);
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let w = *self.shape(p).last().unwrap();
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut out = lead.to_vec();
        out.push(total);
        let rg = self.rg(parts);
        Ok(self.push(out, value, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Slice `start..start+len` along the first axis.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(TensorError::shape("narrow0", &shape, &[start, len]));
        }
        let inner: usize = shape[1..].iter().product();
        let value = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut out = shape;
        out[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            value,
            Op::Narrow0 {
                x,
                offset: start * inner,
            },
            rg,
        ))
    }

    /// Concatenation along the first axis; trailing shapes must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(TensorError::shape("concat0", &first, s));
            }
            lead += s[0];
        }
        let value = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let mut out = first;
        out[0] = lead;
        let rg = self.rg(parts);
        Ok(self.push(out, value, Op::Concat0(parts.to_vec()), rg))
    }

    /// Picks flat entries of `x`, returning a vector `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {len} entries"
            )));
        }
        let xv = self.value(x);
        let value = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len()],
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `pred` against a constant target, with
    /// predictions clamped to `[eps, 1 - eps]` inside the logs.
    pub fn bce(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(TensorError::shape("bce", self.shape(pred), target.shape()));
        }
        let pv = self.value(pred);
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                target: target.data().to_vec(),
                eps,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Gradients of every
    /// reachable node that requires them are available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                propagate(nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

/// Adds `f(i)` to the gradient of `v`, or stores it directly for the first
/// contribution.
fn acc_map(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(gv) => gv.iter_mut().enumerate().for_each(|(i, x)| *x += f(i)),
        slot => *slot = Some((0..nodes[v.0].value.len()).map(f).collect()),
    }
}

/// Gradient buffer of `v` for a dgemm write and the beta to use: 1 when a
/// gradient exists, 0 on uninitialised storage otherwise. The caller must
/// write every element and then call `finish_slot`.
fn gemm_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<(&'g mut Vec<f64>, f64)> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let beta = if grads[v.0].is_some() { 1.0 } else { 0.0 };
    let len = nodes[v.0].value.len();
    Some((grads[v.0].get_or_insert_with(|| Vec::with_capacity(len)), beta))
}

fn finish_slot(buf: &mut Vec<f64>, len: usize) {
    // SAFETY: the dgemm calls issued on `buf` covered all `len` elements.
    unsafe { buf.set_len(len) };
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                acc_map(grads, nodes, v, |i| g[i]);
            }
        }
        Op::Sub(a, b) => {
            acc_map(grads, nodes, *a, |i| g[i]);
            acc_map(grads, nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(grads, nodes, *a, |i| g[i] * bv[i]);
            acc_map(grads, nodes, *b, |i| g[i] * av[i]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(grads, nodes, *a, |i| g[i] / bv[i]);
            acc_map(grads, nodes, *b, |i| -g[i] * av[i] / (bv[i] * bv[i]));
        }
        Op::AddBias(x, b) => {
            acc_map(grads, nodes, *x, |i| g[i]);
            if let Some(gb) = acc(grads, nodes, *b) {
                let n = gb.len();
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                }
            }
        }
        Op::Scale(x, c) => {
            acc_map(grads, nodes, *x, |i| c * g[i]);
        }
        Op::Offset(x) | Op::Reshape(x) => {
            acc_map(grads, nodes, *x, |i| g[i]);
        }
        Op::ScaleBy(x, s) => {
            let c = val(*s)[0];
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i| c * g[i]);
            if let Some(gs) = acc(grads, nodes, *s) {
                gs[0] += g.iter().zip(xv).map(|(y, v)| y * v).sum::<f64>();
            }
        }
        Op::MulConst { x, c } => {
            acc_map(grads, nodes, *x, |i| g[i] * c[i]);
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            if let Some((ga, beta)) = gemm_slot(grads, nodes, *a) {
                // dA += dC · Bᵀ
                unsafe { gemm_raw(m, n, k, g, n as isize, 1, bv, 1, n as isize, ga.as_mut_ptr(), beta) };
                finish_slot(ga, m * k);
            }
            if let Some((gb, beta)) = gemm_slot(grads, nodes, *b) {
                // dB += Aᵀ · dC
                unsafe { gemm_raw(k, m, n, av, 1, k as isize, g, n as isize, 1, gb.as_mut_ptr(), beta) };
                finish_slot(gb, k * n);
            }
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            // SAFETY: every block of the gradient buffers is written once.
            if let Some((ga, beta)) = gemm_slot(grads, nodes, *a) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..];
                    let bi = &bv[i * k * n..];
                    let out = unsafe { ga.as_mut_ptr().add(i * m * k) };
                    if *trans_b {
                        // B stored [n, k]: dA = dC · B
                        unsafe { gemm_raw(m, n, k, gi, n as isize, 1, bi, k as isize, 1, out, beta) };
                    } else {
                        unsafe { gemm_raw(m, n, k, gi, n as isize, 1, bi, 1, n as isize, out, beta) };
                    }
                }
                finish_slot(ga, batch * m * k);
            }
            if let Some((gb, beta)) = gemm_slot(grads, nodes, *b) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..];
                    let ai = &av[i * m * k..];
                    let out = unsafe { gb.as_mut_ptr().add(i * k * n) };
                    if *trans_b {
                        // dB[n, k] = dCᵀ · A
                        unsafe { gemm_raw(n, m, k, gi, 1, n as isize, ai, k as isize, 1, out, beta) };
                    } else {
                        unsafe { gemm_raw(k, m, n, ai, 1, k as isize, gi, n as isize, 1, out, beta) };
                    }
                }
                finish_slot(gb, batch * k * n);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            acc_map(grads, nodes, *x, |at| g[(at % c) * r + at / c]);
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..*len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..*len {
                            let at = base + j * inner;
                            gx[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            let y = &node.value;
            let n = *node.shape.last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((gr, yr), out) in g
                    .chunks_exact(n)
                    .zip(y.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            acc_map(grads, nodes, *x, |i| g[i] * y[i] * (1.0 - y[i]));
        }
        Op::Tanh(x) => {
            let y = &node.value;
            acc_map(grads, nodes, *x, |i| g[i] * (1.0 - y[i] * y[i]));
        }
        Op::Gelu { x, dy } => {
            acc_map(grads, nodes, *x, |i| g[i] * dy[i]);
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i| if xv[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Exp(x) => {
            let y = &node.value;
            acc_map(grads, nodes, *x, |i| g[i] * y[i]);
        }
        Op::Ln(x) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i| g[i] / xv[i]);
        }
        Op::ClampMin(x, floor) => {
            let xv = val(*x);
            acc_map(grads, nodes, *x, |i| if xv[i] > *floor { g[i] } else { 0.0 });
        }
        Op::Sum(x) => {
            acc_map(grads, nodes, *x, |_| g[0]);
        }
        Op::SumLast(x) => {
            let n = *nodes[x.0].shape.last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (row, gy) in gx.chunks_exact_mut(n).zip(g) {
                    row.iter_mut().for_each(|a| *a += gy);
                }
            }
        }
        Op::DivLast(x, s) => {
            let n = *nodes[x.0].shape.last().unwrap();
            let (xv, sv) = (val(*x), val(*s));
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((row, gr), d) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(sv) {
                    row.iter_mut().zip(gr).for_each(|(a, y)| *a += y / d);
                }
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                for (r, (gr, xr)) in g.chunks_exact(n).zip(xv.chunks_exact(n)).enumerate() {
                    let d = sv[r];
                    gs[r] -= gr.iter().zip(xr).map(|(y, v)| y * v).sum::<f64>() / (d * d);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = *node.shape.last().unwrap();
            let gv = val(*gain);
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for gr in g.chunks_exact(n) {
                    gb.iter_mut().zip(gr).for_each(|(a, y)| *a += y);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let nf = n as f64;
                for (r, ((gr, hr), out)) in g
                    .chunks_exact(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let rs = rstd[r];
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        out[j] += rs / nf * (nf * dh - s1 - hr[j] * s2);
                    }
                }
            }
        }
        Op::TemporalConv { x, w, steps } => {
            let s = &nodes[x.0].shape;
            let (batch, d) = (s[0], s[2]);
            let steps = *steps;
            let k = nodes[w.0].shape[0];
            let half = (k / 2) as isize;
            let (xv, wv) = (val(*x), val(*w));
            let for_each = |f: &mut dyn FnMut(usize, usize, usize)| {
                for b in 0..batch {
                    for t in 0..steps {
                        for j in 0..k {
                            let src = t as isize + j as isize - half;
                            if src >= 0 && src < steps as isize {
                                f(b * steps + t, b * steps + src as usize, j);
                            }
                        }
                    }
                }
            };
            if let Some(gx) = acc(grads, nodes, *x) {
                for_each(&mut |dst, src, j| {
                    let gr = &g[dst * d..(dst + 1) * d];
                    let wr = &wv[j * d..(j + 1) * d];
                    let out = &mut gx[src * d..(src + 1) * d];
                    for c in 0..d {
                        out[c] += gr[c] * wr[c];
                    }
                });
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for_each(&mut |dst, src, j| {
                    let gr = &g[dst * d..(dst + 1) * d];
                    let xr = &xv[src * d..(src + 1) * d];
                    let out = &mut gw[j * d..(j + 1) * d];
                    for c in 0..d {
                        out[c] += gr[c] * xr[c];
                    }
                });
            }
        }
        Op::GatherRows { table, ids } => {
            let d = nodes[table.0].shape[1];
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let out = &mut gt[id * d..(id + 1) * d];
                    out.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, y)| *a += y);
                }
            }
        }
        Op::SliceLast { x, start } => {
            let n = *nodes[x.0].shape.last().unwrap();
            let len = *node.shape.last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (row, gr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                    row[*start..start + len]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, y)| *a += y);
                }
            }
        }
        Op::ConcatLast(parts) => {
            let total = *node.shape.last().unwrap();
            let mut off = 0;
            for &p in parts {
                let w = *nodes[p.0].shape.last().unwrap();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (row, gr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                        row.iter_mut().zip(&gr[off..off + w]).for_each(|(a, y)| *a += y);
                    }
                }
                off += w;
            }
        }
        Op::Narrow0 { x, offset } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx[*offset..offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, y)| *a += y);
            }
        }
        Op::Concat0(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                acc_map(grads, nodes, p, |i| g[off + i]);
                off += len;
            }
        }
        Op::Gather { x, idx } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (&i, y) in idx.iter().zip(g) {
                    gx[i] += y;
                }
            }
        }
        Op::Bce { pred, target, eps } => {
            let pv = val(*pred);
            let n = pv.len() as f64;
            if let Some(gp) = acc(grads, nodes, *pred) {
                for i in 0..pv.len() {
                    let p = pv[i];
                    if p <= *eps || p >= 1.0 - eps {
                        continue;
                    }
                    let t = target[i];
                    gp[i] += g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n;
                }
            }
        }
    }
}
