//! Temporal token linking through an exemplar frame.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId};
use crate::tensor::{concat, Real, Tensor, Var};

pub fn select_exemplar(t: usize) -> Result<usize> {
    if t < 2 {
        return invalid(format!("linking needs at least 2 frames, got {t}"));
    }
    Ok(t / 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    /// Greedy one-to-one assignment with straight-through gradients.
    NmsOneHot,
    /// Soft similarities used directly as weights.
    GumbelSoftmax,
    /// Per-key argmax over queries, no conflict resolution.
    OneHot,
    /// No linking: tubelets are temporal means of same-index tokens.
    None,
}

impl std::str::FromStr for AssignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nms-one-hot" => Ok(AssignMode::NmsOneHot),
            "gumbel-softmax" => Ok(AssignMode::GumbelSoftmax),
            "one-hot" => Ok(AssignMode::OneHot),
            "none" | "mean-pool" => Ok(AssignMode::None),
            _ => Err(Error::Config(format!("unknown assignment mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for AssignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssignMode::NmsOneHot => "nms-one-hot",
            AssignMode::GumbelSoftmax => "gumbel-softmax",
            AssignMode::OneHot => "one-hot",
            AssignMode::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TubeletMerge {
    WeightedSum,
    Concat,
}

impl std::str::FromStr for TubeletMerge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-sum" | "w-sum" => Ok(TubeletMerge::WeightedSum),
            "concat" => Ok(TubeletMerge::Concat),
            _ => Err(Error::Config(format!("unknown tubelet merge {s:?}"))),
        }
    }
}

impl std::fmt::Display for TubeletMerge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TubeletMerge::WeightedSum => "weighted-sum",
            TubeletMerge::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LinkConfig {
    pub tau: f64,
    pub assign: AssignMode,
    pub merge: TubeletMerge,
    /// Draw noise per logit instead of per query.
    pub noise_per_logit: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { tau: 1.0, assign: AssignMode::NmsOneHot, merge: TubeletMerge::WeightedSum, noise_per_logit: false }
    }
}

#[derive(Clone, Debug)]
pub struct LinkingParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Projection of concatenated frame tokens, for [`TubeletMerge::Concat`].
    pub concat: Option<Linear>,
    pub c: usize,
}

impl LinkingParams {
    pub fn new<F: Real>(init: &mut Init<'_, F>, c: usize, merge: TubeletMerge, frames: usize) -> Self {
        Self {
            wq: init.xavier("link.wq", c, c),
            wk: init.xavier("link.wk", c, c),
            wv: init.xavier("link.wv", c, c),
            wo: init.xavier("link.wo", c, c),
            concat: (merge == TubeletMerge::Concat).then(|| Linear::new(init, "link.concat", frames * c, c)),
            c,
        }
    }
}

/// Standard Gumbel samples `[T-1, N, 1]` (per query) or `[T-1, N, N]`.
pub fn sample_gumbel<F: Real>(rng: &mut ChaCha8Rng, frames: usize, n: usize, per_logit: bool) -> Tensor<F> {
    let cols = if per_logit { n } else { 1 };
    Tensor::from_fn([frames, n, cols], |_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        F::from_f64(-(-u.ln()).ln())
    })
}

/// Soft assignment `A [T-1, N, N]` for every non-exemplar frame, rows are
/// exemplar queries `i` and columns keys `j`; each column sums to one.
pub fn similarity_matrix<'t, F: Real>(
    cx: &Ctx<'t, F>,
    z: Var<'t, F>,
    params: &LinkingParams,
    tau: f64,
    noise: Option<&Tensor<F>>,
) -> Result<Var<'t, F>> {
    let s = z.shape();
    if s.len() != 3 || s[2] != params.c {
        return invalid(format!("instance tokens must be [T, N, {}], got {s:?}", params.c));
    }
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    let (t, n, c) = (s[0], s[1], s[2]);
    let q = select_exemplar(t)?;
    let zq = z.narrow(0, q, 1)?.reshape(&[n, c])?.matmul(cx.p(params.wq))?;
    let others = other_frames(z, q)?;
    let k = others.reshape(&[(t - 1) * n, c])?.matmul(cx.p(params.wk))?;
    let mut logits = zq.matmul_t(k, false, true)?.reshape(&[n, t - 1, n])?.permute(&[1, 0, 2])?;
    if let Some(g) = noise {
        if g.shape() != [t - 1, n, 1] && g.shape() != [t - 1, n, n] {
            return invalid(format!("noise {:?} does not fit {} frames of {n} tokens", g.shape(), t - 1));
        }
        logits = logits.add(cx.constant(g.clone()))?;
    }
    if tau != 1.0 {
        logits = logits.scale(F::from_f64(1.0 / tau))?;
    }
    Ok(logits.softmax(1)?)
}

/// Non-exemplar frames `[T-1, N, C]` in temporal order.
fn other_frames<'t, F: Real>(z: Var<'t, F>, q: usize) -> Result<Var<'t, F>> {
    let t = z.shape()[0];
    let mut parts = Vec::with_capacity(2);
    if q > 0 {
        parts.push(z.narrow(0, 0, q)?);
    }
    if q + 1 < t {
        parts.push(z.narrow(0, q + 1, t - q - 1)?);
    }
    Ok(if parts.len() == 1 { parts[0] } else { concat(&parts, 0)? })
}

/// Greedy one-to-one assignment on a row-major `N x N` similarity matrix
/// (rows queries, columns keys). Takes the highest remaining entry among
/// free queries and keys; ties go to the lower query, then the lower key.
/// Returns `phi[i]`, the key linked to query `i`.
pub fn nms_one_hot(a: &[f64], n: usize) -> Result<Vec<usize>> {
    if a.len() != n * n || n == 0 {
        return invalid(format!("nms-one-hot needs a square matrix, got {} entries for N = {n}", a.len()));
    }
    let mut phi = vec![usize::MAX; n];
    let mut key_free = vec![true; n];
    for _ in 0..n {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..n).filter(|&i| phi[i] == usize::MAX) {
            for j in (0..n).filter(|&j| key_free[j]) {
                if best.map_or(true, |(bi, bj)| a[i * n + j] > a[bi * n + bj]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("a free pair remains");
        phi[i] = j;
        key_free[j] = false;
    }
    Ok(phi)
}

/// Per-key argmax over queries, ties to the lower query. `owner[j]` is the
/// query that claims key `j`.
pub fn one_hot_argmax(a: &[f64], n: usize) -> Result<Vec<usize>> {
    if a.len() != n * n || n == 0 {
        return invalid(format!("one-hot needs a square matrix, got {} entries for N = {n}", a.len()));
    }
    Ok((0..n)
        .map(|j| (0..n).fold(0, |best, i| if a[i * n + j] > a[best * n + j] { i } else { best }))
        .collect())
}

pub fn permutation_matrix(phi: &[usize]) -> Vec<f64> {
    let n = phi.len();
    let mut p = vec![0.0; n * n];
    for (i, &j) in phi.iter().enumerate() {
        p[i * n + j] = 1.0;
    }
    p
}

/// `A - sg(A) + P`: the value of `P`, the gradient of `A`.
pub fn straight_through<'t, F: Real>(a: Var<'t, F>, hard: &Tensor<F>) -> Result<Var<'t, F>> {
    if a.shape() != hard.shape() {
        return invalid(format!("hard assignment {:?} vs soft {:?}", hard.shape(), a.shape()));
    }
    Ok(a.sub(a.detach())?.add(a.tape().constant(hard.clone()))?)
}

/// Frame-wise result of linking.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub exemplar: usize,
    /// Non-exemplar frame indices, in the order of the matrices below.
    pub frames: Vec<usize>,
    /// `phi[k][i]`: key in `frames[k]` linked to query `i` (bijective modes).
    pub phi: Vec<Vec<usize>>,
    /// Soft matrices `A_t`, `[T-1, N, N]`.
    pub soft: Vec<f64>,
    /// Hard selection mask, `[T-1, N, N]`.
    pub hard: Vec<f64>,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct TubeletSet<'t, F: Real> {
    /// `[N, C]`.
    pub tokens: Var<'t, F>,
    pub assignment: Option<Assignment>,
    pub exemplar: usize,
}

/// Tubelets from `z [T, N, C]` and per-frame weights `[T-1, N, N]`. With
/// weighted-sum merging, tubelet `i` is the exemplar token plus `W_o` of
/// the weight-normalized sum of `W_v`-projected linked tokens.
pub fn form_tubelets<'t, F: Real>(
    cx: &Ctx<'t, F>,
    z: Var<'t, F>,
    weights: Var<'t, F>,
    params: &LinkingParams,
    merge: TubeletMerge,
) -> Result<Var<'t, F>> {
    let s = z.shape();
    let (t, n, c) = (s[0], s[1], s[2]);
    if weights.shape() != [t - 1, n, n] {
        return invalid(format!("weights {:?} do not fit tokens {s:?}", weights.shape()));
    }
    let q = select_exemplar(t)?;
    let ex = z.narrow(0, q, 1)?.reshape(&[n, c])?;
    let v = other_frames(z, q)?.reshape(&[(t - 1) * n, c])?.matmul(cx.p(params.wv))?.reshape(&[t - 1, n, c])?;
    let linked = weights.matmul(v)?;
    match merge {
        TubeletMerge::WeightedSum => {
            let mut den = weights.sum_axis(2)?.sum_axis(0)?;
            let dv = den.value();
            if dv.data().iter().any(|&d| d == F::zero()) {
                // a query that claimed no key keeps its exemplar token
                let guard = Tensor::from_fn([n], |i| if dv.data()[i] == F::zero() { F::one() } else { F::zero() });
                den = den.add(cx.constant(guard))?;
            }
            let agg = linked.sum_axis(0)?.div(den.reshape(&[n, 1])?)?;
            Ok(ex.add(agg.matmul(cx.p(params.wo))?)?)
        }
        TubeletMerge::Concat => {
            let proj = params.concat.as_ref().ok_or_else(|| Error::Invalid("concat merge needs its projection".into()))?;
            if proj.d_in != t * c {
                return invalid(format!("concat projection built for {} frames, got {t}", proj.d_in / c));
            }
            let mut parts = Vec::with_capacity(t);
            for f in 0..t {
                parts.push(match f.cmp(&q) {
                    std::cmp::Ordering::Equal => ex,
                    std::cmp::Ordering::Less => linked.narrow(0, f, 1)?.reshape(&[n, c])?,
                    std::cmp::Ordering::Greater => linked.narrow(0, f - 1, 1)?.reshape(&[n, c])?,
                });
            }
            proj.forward(cx, concat(&parts, 1)?)
        }
    }
}

/// Links one clip of instance tokens `[T, N, C]`; the temporal position
/// encoding must already be added. `noise` is `None` at inference.
pub fn link_tokens<'t, F: Real>(
    cx: &Ctx<'t, F>,
    z: Var<'t, F>,
    params: &LinkingParams,
    cfg: &LinkConfig,
    noise: Option<&Tensor<F>>,
) -> Result<TubeletSet<'t, F>> {
    let s = z.shape();
    let (t, n) = (s[0], s[1]);
    let q = select_exemplar(t)?;
    if cfg.assign == AssignMode::None {
        let tokens = z.sum_axis(0)?.scale(F::from_f64(1.0 / t as f64))?;
        return Ok(TubeletSet { tokens, assignment: None, exemplar: q });
    }
    let a = similarity_matrix(cx, z, params, cfg.tau, noise)?;
    let soft = a.value().to_f64_vec();
    let frames: Vec<usize> = (0..t).filter(|&f| f != q).collect();
    let mut hard = vec![0.0; soft.len()];
    let mut phis = Vec::new();
    for k in 0..t - 1 {
        let at = &soft[k * n * n..(k + 1) * n * n];
        let block = &mut hard[k * n * n..(k + 1) * n * n];
        match cfg.assign {
            AssignMode::NmsOneHot => {
                let phi = nms_one_hot(at, n)?;
                block.copy_from_slice(&permutation_matrix(&phi));
                phis.push(phi);
            }
            AssignMode::OneHot => {
                for (j, i) in one_hot_argmax(at, n)?.into_iter().enumerate() {
                    block[i * n + j] = 1.0;
                }
            }
            AssignMode::GumbelSoftmax => block.iter_mut().for_each(|v| *v = 1.0),
            AssignMode::None => unreachable!(),
        }
    }
    let hard_t = Tensor::from_fn([t - 1, n, n], |i| F::from_f64(hard[i]));
    let weights = match cfg.assign {
        AssignMode::GumbelSoftmax => a,
        _ => straight_through(a, &hard_t)?.mul(cx.constant(hard_t))?,
    };
    let tokens = form_tubelets(cx, z, weights, params, cfg.merge)?;
    Ok(TubeletSet { tokens, assignment: Some(Assignment { exemplar: q, frames, phi: phis, soft, hard, n }), exemplar: q })
}

/// Splits `t` frames into `ceil(t / len)` segments of `len`; a trailing
/// segment shorter than two frames is merged into the one before it.
pub fn segments(t: usize, len: usize) -> Result<Vec<Range<usize>>> {
    if len < 2 {
        return invalid(format!("segment length must be at least 2, got {len}"));
    }
    if t < 2 {
        return invalid(format!("linking needs at least 2 frames, got {t}"));
    }
    let mut out: Vec<Range<usize>> = (0..t.div_ceil(len)).map(|k| k * len..((k + 1) * len).min(t)).collect();
    if out.len() > 1 && out.last().map_or(false, |r| r.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    Ok(out)
}

/// Runs [`link_tokens`] independently on each segment of a long clip.
/// Exemplar indices in the result are global frame indices.
pub fn link_long_video<'t, F: Real>(
    cx: &Ctx<'t, F>,
    z: Var<'t, F>,
    clip_length: usize,
    params: &LinkingParams,
    cfg: &LinkConfig,
) -> Result<Vec<TubeletSet<'t, F>>> {
    let t = z.shape()[0];
    let mut out = Vec::new();
    for r in segments(t, clip_length)? {
        let mut set = link_tokens(cx, z.narrow(0, r.start, r.len())?, params, cfg, None)?;
        set.exemplar += r.start;
        if let Some(a) = set.assignment.as_mut() {
            a.exemplar += r.start;
            a.frames.iter_mut().for_each(|f| *f += r.start);
        }
        out.push(set);
    }
    Ok(out)
}
