use super::{shape_err, Result};

/// Index mapping for a numpy-style broadcast of two operands.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand repeats with period `n` over the (unbroadcast) left one.
    RightCycle(usize),
    /// Right operand is a single value.
    RightScalar,
    General { out: Vec<usize>, sa: Vec<usize>, sb: Vec<usize> },
}

pub(crate) fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return shape_err(op, format!("cannot broadcast {a:?} with {b:?}"));
        }
    }
    let nb: usize = b.iter().product();
    if out == pa {
        if nb == 1 {
            return Ok((out, Broadcast::RightScalar));
        }
        // b equal to a trailing block of a
        let tail = &a[a.len() - b.len().min(a.len())..];
        let b_trimmed: Vec<usize> = {
            let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
            b[first..].to_vec()
        };
        if tail.ends_with(&b_trimmed) {
            return Ok((out, Broadcast::RightCycle(nb)));
        }
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if p[i] == 1 { 0 } else { acc };
            acc *= p[i];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    Ok((out.clone(), Broadcast::General { out, sa, sb }))
}

impl Broadcast {
    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, n_out: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Broadcast::Same => (0..n_out).for_each(|i| f(i, i, i)),
            Broadcast::RightCycle(nb) => (0..n_out).for_each(|i| f(i, i, i % nb)),
            Broadcast::RightScalar => (0..n_out).for_each(|i| f(i, i, 0)),
            Broadcast::General { out, sa, sb } => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..n_out {
                    f(o, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += sa[d];
                        ib += sb[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        ia -= sa[d] * out[d];
                        ib -= sb[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
