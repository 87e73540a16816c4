//! Primitive forward kernels and their backward rules.

use std::sync::Arc;

use super::broadcast::{self, Broadcast};
use super::real::{gemm, View};
use super::tape::Node;
use super::{check_finite, invalid, shape_err, Real, Result, Tensor, Var};

type Custom<F> = Arc<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

/// One bilinear sample: the four corner rows, their weights, and the
/// coordinate sensitivities needed for the offset gradient.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell<F> {
    rows: [usize; 4],
    w: [F; 4],
    fy: F,
    fx: F,
    active_y: bool,
    active_x: bool,
}

pub(crate) enum Op<F: Real> {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Div(usize, usize, Broadcast),
    Scale(usize, F),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    GatherRows { x: usize, idx: Arc<Vec<Option<usize>>> },
    Bilinear { grid: usize, pos: usize, cells: Vec<Cell<F>> },
    Patches { x: usize, centers: Arc<Vec<[usize; 3]>> },
    Giou { a: usize, b: usize },
    Custom { inputs: Vec<usize>, backward: Custom<F> },
}

impl<F: Real> Op<F> {
    pub fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) | Div(a, b, _) => vec![*a, *b],
            MatMul { a, b, .. } | Giou { a, b } => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Gelu(x) | Sigmoid(x) | Softplus(x) | Abs(x) | Sum(x)
            | Mean(x) | Reshape(x) => vec![*x],
            Softmax { x, .. }
            | LogSoftmax { x, .. }
            | SumAxis { x, .. }
            | Permute { x, .. }
            | Narrow { x, .. }
            | GatherRows { x, .. }
            | Patches { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { xs, .. } => xs.clone(),
            Bilinear { grid, pos, .. } => vec![*grid, *pos],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// (outer, len, inner) factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Visits `(out_index, in_index)` for a permutation of axes.
fn permute_walk(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let in_st = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    va: View,
    vb: View,
    sa: usize,
    sb: usize,
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatDims> {
    if a.len() != b.len() || !(a.len() == 2 || a.len() == 3) {
        return shape_err("matmul", format!("{a:?} x {b:?}"));
    }
    let r = a.len();
    let batch = if r == 3 { a[0] } else { 1 };
    if r == 3 && b[0] != batch {
        return shape_err("matmul", format!("batch {a:?} x {b:?}"));
    }
    let (ar, ac) = (a[r - 2], a[r - 1]);
    let (br, bc) = (b[r - 2], b[r - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return shape_err("matmul", format!("{a:?}{} x {b:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }));
    }
    let va = if ta { View::row_major(ac).transposed() } else { View::row_major(ac) };
    let vb = if tb { View::row_major(bc).transposed() } else { View::row_major(bc) };
    Ok(MatDims { batch, m, k, n, va, vb, sa: ar * ac, sb: br * bc })
}

fn bilinear_corners<F: Real>(
    frame: usize,
    h: usize,
    w: usize,
    y: F,
    x: F,
) -> Cell<F> {
    let axis = |p: F, len: usize| -> (usize, usize, F, bool) {
        let hi = F::from_f64((len - 1) as f64);
        let active = p >= F::zero() && p <= hi;
        let pc = p.max(F::zero()).min(hi);
        if len == 1 {
            return (0, 0, F::zero(), false);
        }
        let base = pc.floor().as_f64() as usize;
        let base = base.min(len - 2);
        (base, 1, pc - F::from_f64(base as f64), active)
    };
    let (y0, dy, fy, active_y) = axis(y, h);
    let (x0, dx, fx, active_x) = axis(x, w);
    let r00 = (frame * h + y0) * w + x0;
    let rows = [r00, r00 + dx, r00 + dy * w, r00 + dy * w + dx];
    let one = F::one();
    let wts = [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx];
    Cell { rows, w: wts, fy, fx, active_y, active_x }
}

#[derive(Clone, Copy)]
struct BoxGeom<F> {
    x0: F,
    y0: F,
    x1: F,
    y1: F,
}

fn corners<F: Real>(b: &[F]) -> BoxGeom<F> {
    let half = F::from_f64(0.5);
    BoxGeom { x0: b[0] - half * b[2], y0: b[1] - half * b[3], x1: b[0] + half * b[2], y1: b[1] + half * b[3] }
}

/// GIoU of two center-format boxes and its gradient w.r.t. both.
fn giou_with_grad<F: Real>(a: &[F], b: &[F], want_grad: bool) -> Result<(F, [F; 4], [F; 4])> {
    let (ca, cb) = (corners(a), corners(b));
    let zero = F::zero();
    let area_a = a[2] * a[3];
    let area_b = b[2] * b[3];
    if !(area_a > zero && area_b > zero) {
        return invalid("giou", "degenerate zero-area box");
    }
    let ix0 = ca.x0.max(cb.x0);
    let ix1 = ca.x1.min(cb.x1);
    let iy0 = ca.y0.max(cb.y0);
    let iy1 = ca.y1.min(cb.y1);
    let iw = (ix1 - ix0).max(zero);
    let ih = (iy1 - iy0).max(zero);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let ex0 = ca.x0.min(cb.x0);
    let ex1 = ca.x1.max(cb.x1);
    let ey0 = ca.y0.min(cb.y0);
    let ey1 = ca.y1.max(cb.y1);
    let ew = ex1 - ex0;
    let eh = ey1 - ey0;
    let enc = ew * eh;
    let value = inter / union - (enc - union) / enc;
    if !want_grad {
        return Ok((value, [zero; 4], [zero; 4]));
    }
    let g_inter = F::one() / union + inter / (union * union) - F::one() / enc;
    let g_area = -inter / (union * union) + F::one() / enc;
    let g_enc = -union / (enc * enc);
    let (g_iw, g_ih) = (g_inter * ih, g_inter * iw);
    let (g_iw, g_ih) = (if ix1 > ix0 { g_iw } else { zero }, if iy1 > iy0 { g_ih } else { zero });
    let (g_ew, g_eh) = (g_enc * eh, g_enc * ew);
    // corner gradients: [x0, y0, x1, y1] for a and b
    let mut da = [zero; 4];
    let mut db = [zero; 4];
    // intersection: ix1 = min(ax1, bx1), ix0 = max(ax0, bx0)
    if ca.x1 <= cb.x1 { da[2] = da[2] + g_iw } else { db[2] = db[2] + g_iw }
    if ca.x0 >= cb.x0 { da[0] = da[0] - g_iw } else { db[0] = db[0] - g_iw }
    if ca.y1 <= cb.y1 { da[3] = da[3] + g_ih } else { db[3] = db[3] + g_ih }
    if ca.y0 >= cb.y0 { da[1] = da[1] - g_ih } else { db[1] = db[1] - g_ih }
    // enclosure: ex1 = max, ex0 = min
    if ca.x1 >= cb.x1 { da[2] = da[2] + g_ew } else { db[2] = db[2] + g_ew }
    if ca.x0 <= cb.x0 { da[0] = da[0] - g_ew } else { db[0] = db[0] - g_ew }
    if ca.y1 >= cb.y1 { da[3] = da[3] + g_eh } else { db[3] = db[3] + g_eh }
    if ca.y0 <= cb.y0 { da[1] = da[1] - g_eh } else { db[1] = db[1] - g_eh }
    let half = F::from_f64(0.5);
    let to_center = |d: [F; 4], bx: &[F]| -> [F; 4] {
        // x0 = cx - w/2, x1 = cx + w/2, area = w*h
        [
            d[0] + d[2],
            d[1] + d[3],
            half * (d[2] - d[0]) + g_area * bx[3],
            half * (d[3] - d[1]) + g_area * bx[2],
        ]
    };
    Ok((value, to_center(da, a), to_center(db, b)))
}

/// GIoU of two center-format boxes `[cx, cy, w, h]`.
pub fn giou_value<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    giou_with_grad(a, b, false).map(|r| r.0)
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
    (y, dy)
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

impl<'t, F: Real> Var<'t, F> {
    fn unary(self, op_name: &'static str, data: Vec<F>, shape: Vec<usize>, op: Op<F>) -> Result<Var<'t, F>> {
        check_finite(op_name, &data)?;
        let rg = op.inputs().iter().any(|&i| self.tape.requires_grad(i));
        Ok(self.tape.push(Tensor::from_parts(shape, data), op, rg))
    }

    fn binary(self, other: Var<'t, F>, name: &'static str, f: impl Fn(F, F) -> F, mk: impl FnOnce(usize, usize, Broadcast) -> Op<F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let (out_shape, plan) = broadcast::plan(name, a.shape(), b.shape())?;
        let n: usize = out_shape.iter().product();
        let mut data = vec![F::zero(); n];
        let (ad, bd) = (a.data(), b.data());
        match plan {
            Broadcast::Same => {
                for ((o, &x), &y) in data.iter_mut().zip(ad).zip(bd) {
                    *o = f(x, y);
                }
            }
            _ => plan.for_each(n, |o, ia, ib| data[o] = f(ad[ia], bd[ib])),
        }
        self.unary(name, data, out_shape, mk(self.id, other.id, plan))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(self, s: F) -> Result<Var<'t, F>> {
        let v = self.value();
        self.unary("scale", v.data().iter().map(|&x| x * s).collect(), v.shape().to_vec(), Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Result<Var<'t, F>> {
        self.scale(-F::one())
    }

    pub fn add_scalar(self, s: F) -> Result<Var<'t, F>> {
        let v = self.value();
        self.unary("add_scalar", v.data().iter().map(|&x| x + s).collect(), v.shape().to_vec(), Op::AddScalar(self.id))
    }

    /// Matrix product over the last two axes; rank 2 or batched rank 3.
    pub fn matmul_t(self, other: Var<'t, F>, ta: bool, tb: bool) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let d = matmul_dims(a.shape(), b.shape(), ta, tb)?;
        let mut out = vec![F::zero(); d.batch * d.m * d.n];
        for bi in 0..d.batch {
            gemm(
                d.m,
                d.k,
                d.n,
                a.data(),
                d.va.at(bi * d.sa),
                b.data(),
                d.vb.at(bi * d.sb),
                F::zero(),
                &mut out,
                View::row_major(d.n).at(bi * d.m * d.n),
            );
        }
        let shape = if a.rank() == 3 { vec![d.batch, d.m, d.n] } else { vec![d.m, d.n] };
        self.unary("matmul", out, shape, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_t(other, false, false)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let v = self.value();
        if axis >= v.rank() {
            return shape_err("softmax", format!("axis {axis} of {:?}", v.shape()));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = F::neg_infinity();
                for j in 0..len {
                    m = m.max(x[at(j)]);
                }
                let mut s = F::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / s;
                }
            }
        }
        self.unary("softmax", y, v.shape().to_vec(), Op::Softmax { x: self.id, axis })
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let v = self.value();
        if axis >= v.rank() {
            return shape_err("log_softmax", format!("axis {axis} of {:?}", v.shape()));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = F::neg_infinity();
                for j in 0..len {
                    m = m.max(x[at(j)]);
                }
                let mut s = F::zero();
                for j in 0..len {
                    s = s + (x[at(j)] - m).exp();
                }
                let lse = m + s.ln();
                for j in 0..len {
                    y[at(j)] = x[at(j)] - lse;
                }
            }
        }
        self.unary("log_softmax", y, v.shape().to_vec(), Op::LogSoftmax { x: self.id, axis })
    }

    /// Normalizes over the last axis, then applies the affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let v = self.value();
        let d = *v.shape().last().unwrap_or(&1);
        let (g, b) = (gamma.value(), beta.value());
        if g.numel() != d || b.numel() != d {
            return shape_err("layer_norm", format!("features {d}, affine {:?}/{:?}", g.shape(), b.shape()));
        }
        let rows = v.numel() / d;
        let x = v.data();
        let mut y = vec![F::zero(); x.len()];
        let mut xhat = vec![F::zero(); x.len()];
        let mut rstd = vec![F::zero(); rows];
        let df = F::from_f64(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        self.unary("layer_norm", y, v.shape().to_vec(), op)
    }

    pub fn gelu(self) -> Result<Var<'t, F>> {
        let v = self.value();
        self.unary("gelu", v.data().iter().map(|&x| gelu_parts(x).0).collect(), v.shape().to_vec(), Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, F>> {
        let v = self.value();
        self.unary("sigmoid", v.data().iter().map(|&x| sigmoid(x)).collect(), v.shape().to_vec(), Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(self) -> Result<Var<'t, F>> {
        let v = self.value();
        self.unary("softplus", v.data().iter().map(|&x| softplus(x)).collect(), v.shape().to_vec(), Op::Softplus(self.id))
    }

    pub fn abs(self) -> Result<Var<'t, F>> {
        let v = self.value();
        self.unary("abs", v.data().iter().map(|x| x.abs()).collect(), v.shape().to_vec(), Op::Abs(self.id))
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<F>();
        self.unary("sum", vec![s], vec![], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<F>() / F::from_f64(v.numel() as f64);
        self.unary("mean", vec![s], vec![], Op::Mean(self.id))
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, F>> {
        let v = self.value();
        if axis >= v.rank() {
            return shape_err("sum_axis", format!("axis {axis} of {:?}", v.shape()));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.unary("sum_axis", y, shape, Op::SumAxis { x: self.id, axis })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = self.value().reshape(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Reshape(self.id), rg))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, F>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} for {:?}", v.shape()));
        }
        let x = v.data();
        let mut y = vec![F::zero(); x.len()];
        permute_walk(v.shape(), perm, |o, i| y[o] = x[i]);
        let shape = perm.iter().map(|&p| v.shape()[p]).collect();
        self.unary("permute", y, shape, Op::Permute { x: self.id, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, F>> {
        let r = self.shape().len();
        if r < 2 {
            return shape_err("transpose", "rank < 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let v = self.value();
        if axis >= v.rank() || start + len > v.shape()[axis] || len == 0 {
            return shape_err("narrow", format!("axis {axis} [{start}, +{len}) of {:?}", v.shape()));
        }
        let (outer, full, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.unary("narrow", y, shape, Op::Narrow { x: self.id, axis, start })
    }

    /// Rows of a rank-2 tensor; `None` yields a zero row.
    pub fn gather_rows(self, idx: Arc<Vec<Option<usize>>>) -> Result<Var<'t, F>> {
        let v = self.value();
        if v.rank() != 2 {
            return shape_err("gather_rows", format!("needs rank 2, got {:?}", v.shape()));
        }
        let (rows, c) = (v.shape()[0], v.shape()[1]);
        if idx.is_empty() {
            return shape_err("gather_rows", "empty index");
        }
        let x = v.data();
        let mut y = vec![F::zero(); idx.len() * c];
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return shape_err("gather_rows", format!("row {i} of {rows}"));
                }
                y[o * c..(o + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        self.unary("gather_rows", y, vec![idx.len(), c], Op::GatherRows { x: self.id, idx })
    }

    /// Bilinear samples of a `[T, H, W, C]` grid at fractional `(row, col)`
    /// positions `self = pos [M, 2]`; positions are clamped to the grid.
    pub fn sample_bilinear(grid: Var<'t, F>, pos: Var<'t, F>, frames: &[usize]) -> Result<Var<'t, F>> {
        let (g, p) = (grid.value(), pos.value());
        if g.rank() != 4 || p.shape() != [frames.len(), 2] {
            return shape_err("bilinear", format!("grid {:?}, pos {:?}, {} frames", g.shape(), p.shape(), frames.len()));
        }
        let (t, h, w, c) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
        let mut cells = Vec::with_capacity(frames.len());
        let mut y = vec![F::zero(); frames.len() * c];
        let gd = g.data();
        for (m, &f) in frames.iter().enumerate() {
            if f >= t {
                return shape_err("bilinear", format!("frame {f} of {t}"));
            }
            let cell = bilinear_corners(f, h, w, p.data()[2 * m], p.data()[2 * m + 1]);
            let out = &mut y[m * c..(m + 1) * c];
            for k in 0..4 {
                let wk = cell.w[k];
                let src = &gd[cell.rows[k] * c..(cell.rows[k] + 1) * c];
                for (o, &s) in out.iter_mut().zip(src) {
                    *o = *o + wk * s;
                }
            }
            cells.push(cell);
        }
        let op = Op::Bilinear { grid: grid.id, pos: pos.id, cells };
        grid.unary("bilinear", y, vec![frames.len(), c], op)
    }

    /// 3x3 neighborhoods of a `[T, H, W, C]` grid around `(t, row, col)`
    /// centers, zero outside the grid. Output `[M, 9C]`, ordered (dy, dx, c).
    pub fn patches3x3(self, centers: Arc<Vec<[usize; 3]>>) -> Result<Var<'t, F>> {
        let v = self.value();
        if v.rank() != 4 {
            return shape_err("patches3x3", format!("needs [T,H,W,C], got {:?}", v.shape()));
        }
        let (t, h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let x = v.data();
        let mut y = vec![F::zero(); centers.len() * 9 * c];
        for (m, &[ft, r, col]) in centers.iter().enumerate() {
            if ft >= t || r >= h || col >= w {
                return shape_err("patches3x3", format!("center {:?} outside {:?}", [ft, r, col], v.shape()));
            }
            for (k, (dy, dx)) in (0..9).map(|k| (k / 3, k % 3)).enumerate() {
                let (rr, cc) = (r + dy, col + dx);
                if rr == 0 || cc == 0 || rr > h || cc > w {
                    continue;
                }
                let src = ((ft * h + rr - 1) * w + cc - 1) * c;
                y[(m * 9 + k) * c..(m * 9 + k + 1) * c].copy_from_slice(&x[src..src + c]);
            }
        }
        self.unary("patches3x3", y, vec![centers.len(), 9 * c], Op::Patches { x: self.id, centers })
    }

    /// Row-wise GIoU of two `[n, 4]` center-format box sets.
    pub fn giou(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || a.shape()[1] != 4 || a.shape() != b.shape() {
            return shape_err("giou", format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        let n = a.shape()[0];
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            y.push(giou_value(&a.data()[4 * i..4 * i + 4], &b.data()[4 * i..4 * i + 4])?);
        }
        self.unary("giou", y, vec![n], Op::Giou { a: self.id, b: other.id })
    }

    /// Identity in the forward pass; contributes no gradient.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.constant(self.value())
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'t, F: Real>(xs: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
    let Some(first) = xs.first() else { return shape_err("concat", "no inputs") };
    let vals: Vec<Tensor<F>> = xs.iter().map(|x| x.value()).collect();
    let base = vals[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err("concat", format!("axis {axis} of {base:?}"));
    }
    for v in &vals {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return shape_err("concat", format!("{s:?} vs {base:?}"));
        }
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
    let mut y = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &vals {
            let len = v.shape()[axis];
            y.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids = xs.iter().map(|x| x.id).collect();
    first.unary("concat", y, shape, Op::Concat { xs: ids, axis })
}

fn acc<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: usize,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let buf = grads[id].get_or_insert_with(|| vec![F::zero(); n]);
    f(buf)
}

/// Applies the backward rule of node `id` given its output gradient `g`.
pub(crate) fn backward_node<F: Real>(
    nodes: &[Node<F>],
    id: usize,
    g: &Tensor<F>,
    grads: &mut [Option<Vec<F>>],
) -> Result<()> {
    let out = &nodes[id].value;
    let gd = g.data();
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -F::one() } else { F::one() };
            let n = out.numel();
            acc(nodes, grads, *a, |ga| plan.for_each(n, |o, ia, _| ga[ia] = ga[ia] + gd[o]));
            acc(nodes, grads, *b, |gb| plan.for_each(n, |o, _, ib| gb[ib] = gb[ib] + sign * gd[o]));
        }
        Op::Mul(a, b, plan) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let n = out.numel();
            acc(nodes, grads, *a, |ga| plan.for_each(n, |o, ia, ib| ga[ia] = ga[ia] + gd[o] * bv[ib]));
            acc(nodes, grads, *b, |gb| plan.for_each(n, |o, ia, ib| gb[ib] = gb[ib] + gd[o] * av[ia]));
        }
        Op::Div(a, b, plan) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let n = out.numel();
            acc(nodes, grads, *a, |ga| plan.for_each(n, |o, ia, ib| ga[ia] = ga[ia] + gd[o] / bv[ib]));
            acc(nodes, grads, *b, |gb| {
                plan.for_each(n, |o, ia, ib| gb[ib] = gb[ib] - gd[o] * av[ia] / (bv[ib] * bv[ib]))
            });
        }
        Op::Scale(x, s) => acc(nodes, grads, *x, |gx| gx.iter_mut().zip(gd).for_each(|(d, &g)| *d = *d + *s * g)),
        Op::AddScalar(x) | Op::Reshape(x) => {
            acc(nodes, grads, *x, |gx| gx.iter_mut().zip(gd).for_each(|(d, &g)| *d = *d + g))
        }
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let d = matmul_dims(av.shape(), bv.shape(), *ta, *tb)?;
            let vg = View::row_major(d.n);
            acc(nodes, grads, *a, |ga| {
                for bi in 0..d.batch {
                    // dA' = dC * op(B)^T written through op(A)'s view
                    gemm(d.m, d.n, d.k, gd, vg.at(bi * d.m * d.n), bv.data(), d.vb.transposed().at(bi * d.sb), F::one(), ga, d.va.at(bi * d.sa));
                }
            });
            acc(nodes, grads, *b, |gb| {
                for bi in 0..d.batch {
                    gemm(d.k, d.m, d.n, av.data(), d.va.transposed().at(bi * d.sa), gd, vg.at(bi * d.m * d.n), F::one(), gb, d.vb.at(bi * d.sb));
                }
            });
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            acc(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: F = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = gx[at(j)] + y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            acc(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: F = (0..len).map(|j| gd[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = gx[at(j)] + gd[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = val(*gamma).numel();
            let rows = out.numel() / d;
            let gam = val(*gamma).data();
            acc(nodes, grads, *gamma, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] = gg[j] + gd[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] = gb[j] + gd[r * d + j];
                    }
                }
            });
            acc(nodes, grads, *x, |gx| {
                let df = F::from_f64(d as f64);
                for r in 0..rows {
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..d {
                        let dh = gd[r * d + j] * gam[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * xhat[r * d + j];
                    }
                    m1 = m1 / df;
                    m2 = m2 / df;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gam[j];
                        gx[r * d + j] = gx[r * d + j] + rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            acc(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + gd[i] * gelu_parts(xv[i]).1;
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            acc(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + gd[i] * y[i] * (F::one() - y[i]);
                }
            });
        }
        Op::Softplus(x) => {
            let xv = val(*x).data();
            acc(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + gd[i] * sigmoid(xv[i]);
                }
            });
        }
        Op::Abs(x) => {
            let xv = val(*x).data();
            acc(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let s = if xv[i] > F::zero() {
                        F::one()
                    } else if xv[i] < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    gx[i] = gx[i] + gd[i] * s;
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + gd[0])),
        Op::Mean(x) => {
            let s = gd[0] / F::from_f64(val(*x).numel() as f64);
            acc(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + s))
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            acc(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d = *d + s;
                        }
                    }
                }
            });
        }
        Op::Permute { x, perm } => {
            let shape = val(*x).shape().to_vec();
            acc(nodes, grads, *x, |gx| permute_walk(&shape, perm, |o, i| gx[i] = gx[i] + gd[o]));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &xi in xs {
                let len = val(xi).shape()[*axis];
                acc(nodes, grads, xi, |gx| {
                    for o in 0..outer {
                        let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &s) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
            let len = out.shape()[*axis];
            acc(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (d, &s) in dst.iter_mut().zip(&gd[o * len * inner..(o + 1) * len * inner]) {
                        *d = *d + s;
                    }
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let c = out.shape()[1];
            acc(nodes, grads, *x, |gx| {
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + gd[o * c + j];
                        }
                    }
                }
            });
        }
        Op::Bilinear { grid, pos, cells } => {
            let c = out.shape()[1];
            acc(nodes, grads, *grid, |gg| {
                for (m, cell) in cells.iter().enumerate() {
                    let go = &gd[m * c..(m + 1) * c];
                    for k in 0..4 {
                        let dst = &mut gg[cell.rows[k] * c..(cell.rows[k] + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(go) {
                            *d = *d + cell.w[k] * s;
                        }
                    }
                }
            });
            let gv = val(*grid).data();
            acc(nodes, grads, *pos, |gp| {
                let one = F::one();
                for (m, cell) in cells.iter().enumerate() {
                    let go = &gd[m * c..(m + 1) * c];
                    let row = |k: usize| &gv[cell.rows[k] * c..(cell.rows[k] + 1) * c];
                    let (v00, v01, v10, v11) = (row(0), row(1), row(2), row(3));
                    let (mut sy, mut sx) = (F::zero(), F::zero());
                    for j in 0..c {
                        let dy = (one - cell.fx) * (v10[j] - v00[j]) + cell.fx * (v11[j] - v01[j]);
                        let dx = (one - cell.fy) * (v01[j] - v00[j]) + cell.fy * (v11[j] - v10[j]);
                        sy = sy + go[j] * dy;
                        sx = sx + go[j] * dx;
                    }
                    if cell.active_y {
                        gp[2 * m] = gp[2 * m] + sy;
                    }
                    if cell.active_x {
                        gp[2 * m + 1] = gp[2 * m + 1] + sx;
                    }
                }
            });
        }
        Op::Patches { x, centers } => {
            let s = val(*x).shape().to_vec();
            let (h, w, c) = (s[1], s[2], s[3]);
            acc(nodes, grads, *x, |gx| {
                for (m, &[ft, r, col]) in centers.iter().enumerate() {
                    for k in 0..9 {
                        let (rr, cc) = (r + k / 3, col + k % 3);
                        if rr == 0 || cc == 0 || rr > h || cc > w {
                            continue;
                        }
                        let dst = ((ft * h + rr - 1) * w + cc - 1) * c;
                        for j in 0..c {
                            gx[dst + j] = gx[dst + j] + gd[(m * 9 + k) * c + j];
                        }
                    }
                }
            });
        }
        Op::Giou { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let n = out.numel();
            let mut da = vec![F::zero(); 4 * n];
            let mut db = vec![F::zero(); 4 * n];
            for i in 0..n {
                let (_, ga, gb) = giou_with_grad(&av[4 * i..4 * i + 4], &bv[4 * i..4 * i + 4], true)?;
                for j in 0..4 {
                    da[4 * i + j] = gd[i] * ga[j];
                    db[4 * i + j] = gd[i] * gb[j];
                }
            }
            acc(nodes, grads, *a, |g| g.iter_mut().zip(&da).for_each(|(d, &s)| *d = *d + s));
            acc(nodes, grads, *b, |g| g.iter_mut().zip(&db).for_each(|(d, &s)| *d = *d + s));
        }
        Op::Custom { inputs, backward } => {
            let parts = backward(g);
            if parts.len() != inputs.len() {
                return invalid("custom", format!("{} gradients for {} inputs", parts.len(), inputs.len()));
            }
            for (&i, p) in inputs.iter().zip(parts) {
                if p.numel() != val(i).numel() {
                    return shape_err("custom", format!("gradient {:?} for input {:?}", p.shape(), val(i).shape()));
                }
                acc(nodes, grads, i, |gx| gx.iter_mut().zip(p.data()).for_each(|(d, &s)| *d = *d + s));
            }
        }
    }
    Ok(())
}
