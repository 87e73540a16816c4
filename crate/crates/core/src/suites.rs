//! Registry of finite-difference gradient suites. Each suite evaluates one
//! operation at several seeded random points in 64-bit and reports the
//! worst relative error.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::abstraction::{agglomerate_tokens, s_block_forward, Agglomerate, MergeMode, SBlock, WindowSpec};
use crate::decoder::{decode, global_context_layer, predict_heads, ContextLayer, Decoder, DecoderConfig, HeadOutputs, Heads};
use crate::error::{Error, Result};
use crate::frontend::{conv3x3_stride2, PosEncoding, PosMode};
use crate::linking::{form_tubelets, link_tokens, sample_gumbel, AssignMode, LinkConfig, LinkingParams, TubeletMerge};
use crate::matching::{hungarian_match, training_loss, HoiInstance, LossConfig};
use crate::nn::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::gradcheck::{finite_diff_check_many, GradCheck};
use crate::tensor::{concat, BackwardFn, Tape, Tensor, Var};

const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct Suite {
    pub name: &'static str,
    pub tolerance: f64,
    /// Number of random points evaluated.
    pub points: usize,
    check: fn(u64) -> Result<GradCheck>,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub points: usize,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl Suite {
    pub fn run(&self) -> Result<SuiteResult> {
        let mut worst = 0.0f64;
        let mut coordinates = 0;
        for p in 0..self.points {
            let r = (self.check)(p as u64)?;
            // NaN must not be swallowed by max
            worst = if r.max_rel_error.is_nan() { f64::NAN } else { worst.max(r.max_rel_error) };
            coordinates += r.coordinates;
        }
        Ok(SuiteResult { name: self.name, tolerance: self.tolerance, points: self.points, max_rel_error: worst, coordinates })
    }
}

/// All suites, elementary primitives first.
pub fn gradcheck_suites() -> Vec<Suite> {
    let e = |name, check| Suite { name, tolerance: 1e-5, points: 100, check };
    let c = |name, points, check| Suite { name, tolerance: 1e-4, points, check };
    vec![
        e("matmul", matmul),
        e("softmax", softmax),
        e("log_softmax", log_softmax),
        e("layer_norm", layer_norm),
        e("conv3x3", conv3x3),
        e("sigmoid", |s| unary(s, |x| x.sigmoid())),
        e("gelu", |s| unary(s, |x| x.gelu())),
        e("softplus", |s| unary(s, |x| x.softplus())),
        e("abs", |s| unary(s, |x| x.abs())),
        e("elementwise", elementwise),
        e("concat_narrow_permute", concat_narrow_permute),
        e("reductions", reductions),
        e("gather_rows", gather_rows),
        e("bilinear_sample", bilinear_sample),
        e("giou", giou),
        c("bilinear_offsets", 100, bilinear_offsets),
        c("s_block", 4, s_block),
        c("agglomerate", 10, agglomerate),
        c("form_tubelets", 20, tubelets),
        c("link_gumbel_softmax", 20, link_gumbel),
        c("context_decoder_heads", 5, decoder_heads),
        c("training_loss", 20, loss),
    ]
}

/// A primitive whose backward reports `x` for `d(x^2)/dx`; must fail.
pub fn corrupted_suite() -> Suite {
    Suite { name: "corrupted_square", tolerance: 1e-5, points: 3, check: corrupted }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Magnitudes in `[0.2, 1]` with random sign, away from kinks at zero.
fn signed(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.2..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * w)` for a fixed random probe `w` shaped like `y`.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut r = rng(seed, 99);
    let w = uniform(&mut r, &y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum()?)
}

fn check<Func>(f: Func, points: &[Tensor<f64>]) -> Result<GradCheck>
where
    Func: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    finite_diff_check_many(f, points, STEP)
}

fn matmul(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 1);
    let (ta, tb) = (seed % 2 == 1, seed % 4 >= 2);
    let a = uniform(&mut r, if ta { &[2, 4, 3] } else { &[2, 3, 4] }, -1.0, 1.0);
    let b = uniform(&mut r, if tb { &[2, 5, 4] } else { &[2, 4, 5] }, -1.0, 1.0);
    check(|v| probe(v[0].matmul_t(v[1], ta, tb)?, seed), &[a, b])
}

fn softmax(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 2);
    let axis = (seed % 3) as usize;
    check(|v| probe(v[0].softmax(axis)?, seed), &[uniform(&mut r, &[2, 3, 4], -2.0, 2.0)])
}

fn log_softmax(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 3);
    let axis = (seed % 2) as usize;
    check(|v| probe(v[0].log_softmax(axis)?, seed), &[uniform(&mut r, &[3, 5], -2.0, 2.0)])
}

fn layer_norm(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 4);
    let pts = [uniform(&mut r, &[3, 6], -1.0, 1.0), uniform(&mut r, &[6], 0.5, 1.5), uniform(&mut r, &[6], -0.5, 0.5)];
    check(|v| probe(v[0].layer_norm(v[1], v[2], 1e-6)?, seed), &pts)
}

fn conv3x3(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 5);
    let pts = [uniform(&mut r, &[2, 4, 4, 2], -1.0, 1.0), uniform(&mut r, &[18, 3], -0.5, 0.5), uniform(&mut r, &[3], -0.5, 0.5)];
    check(|v| probe(conv3x3_stride2(v[0], v[1], v[2])?, seed), &pts)
}

fn unary(seed: u64, op: for<'t> fn(Var<'t, f64>) -> crate::tensor::Result<Var<'t, f64>>) -> Result<GradCheck> {
    let mut r = rng(seed, 6);
    check(|v| probe(op(v[0])?, seed), &[signed(&mut r, &[3, 4])])
}

fn elementwise(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 7);
    // broadcasting a row and a column against a matrix
    let pts = [uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4], -1.0, 1.0), signed(&mut r, &[3, 1])];
    check(
        |v| {
            let y = v[0].add(v[1])?.mul(v[0])?.sub(v[1].scale(0.5)?)?.div(v[2])?.neg()?.add_scalar(0.3)?;
            probe(y, seed)
        },
        &pts,
    )
}

fn concat_narrow_permute(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 8);
    let pts = [uniform(&mut r, &[2, 3, 2], -1.0, 1.0), uniform(&mut r, &[2, 1, 2], -1.0, 1.0)];
    check(
        |v| {
            let c = concat(&[v[0], v[1]], 1)?.permute(&[2, 0, 1])?.narrow(2, 1, 3)?;
            probe(c.reshape(&[4, 3])?.transpose()?, seed)
        },
        &pts,
    )
}

fn reductions(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 9);
    let axis = (seed % 3) as usize;
    check(
        |v| {
            let s = probe(v[0].sum_axis(axis)?, seed)?;
            Ok(s.add(v[0].mul(v[0])?.mean()?)?.add(v[0].sum()?.scale(0.1)?)?)
        },
        &[uniform(&mut r, &[2, 3, 4], -1.0, 1.0)],
    )
}

fn gather_rows(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 10);
    let idx: Vec<Option<usize>> = (0..6).map(|_| if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..4)) }).collect();
    let x = uniform(&mut r, &[4, 3], -1.0, 1.0);
    check(|v| probe(v[0].gather_rows(Arc::new(idx.clone()))?, seed), &[x])
}

/// Fractional positions stay at least 0.1 from cell edges so that a
/// difference step never crosses into the next interpolation cell.
fn fractional_positions(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([n, 2], |i| {
        let lim = if i % 2 == 0 { h } else { w };
        r.gen_range(0..lim - 1) as f64 + r.gen_range(0.1..0.9)
    })
}

fn bilinear_sample(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 11);
    let grid = uniform(&mut r, &[2, 4, 5, 3], -1.0, 1.0);
    let pos = fractional_positions(&mut r, 4, 4, 5);
    let frames = [0, 1, 1, 0];
    check(|v| probe(Var::sample_bilinear(v[0], v[1], &frames)?, seed), &[grid, pos])
}

fn giou(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 12);
    let boxes = |r: &mut ChaCha8Rng| {
        Tensor::from_fn([3, 4], |i| if i % 4 < 2 { r.gen_range(0.3..0.7) } else { r.gen_range(0.1..0.4) })
    };
    let (a, b) = (boxes(&mut r), boxes(&mut r));
    check(|v| probe(v[0].giou(v[1])?, seed), &[a, b])
}

fn bilinear_offsets(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 13);
    let grid = uniform(&mut r, &[1, 6, 6, 4], -1.0, 1.0);
    let pos = fractional_positions(&mut r, 5, 6, 6);
    check(
        |v| {
            let g = v[0].tape().constant(grid.clone());
            probe(Var::sample_bilinear(g, v[0], &[0; 5])?, seed)
        },
        &[pos],
    )
}

fn store_with<T>(seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> Result<T>) -> Result<(ParamStore<f64>, T)> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 14);
    let v = f(&mut Init { store: &mut store, rng: &mut r })?;
    Ok((store, v))
}

fn randomize(store: &mut ParamStore<f64>, id: ParamId, scale: f64, r: &mut ChaCha8Rng) -> Result<()> {
    let shape = store.get(id).shape().to_vec();
    store.set(id, uniform(r, &shape, -scale, scale))
}

fn s_block(seed: u64) -> Result<GradCheck> {
    let spec = WindowSpec::new(7)?;
    let (mut store, b) = store_with(seed, |i| SBlock::new(i, "blk", 32, &spec))?;
    let mut r = rng(seed, 15);
    // nonzero offsets so that sampling happens at fractional positions
    randomize(&mut store, b.offsets.w, 0.05, &mut r)?;
    randomize(&mut store, b.offsets.b, 0.5, &mut r)?;
    let pe = PosEncoding::new(1, 8, 8, 32, PosMode::Factorized)?;
    let grid = uniform(&mut r, &[1, 8, 8, 32], -1.0, 1.0);
    check(
        |v| {
            let cx = Ctx::new(v[0].tape(), &store);
            probe(s_block_forward(&cx, v[0], &b, &spec, &pe)?, seed)
        },
        &[grid],
    )
}

fn agglomerate(seed: u64) -> Result<GradCheck> {
    let (mut store, agg) = store_with(seed, |i| Ok(Agglomerate::new(i, "merge", 4, MergeMode::IrWin2C)))?;
    let mut r = rng(seed, 16);
    if let Some(o) = &agg.offsets {
        randomize(&mut store, o.w, 0.05, &mut r)?;
        randomize(&mut store, o.b, 0.4, &mut r)?;
    }
    let grid = uniform(&mut r, &[2, 4, 4, 4], -1.0, 1.0);
    check(
        |v| {
            let cx = Ctx::new(v[0].tape(), &store);
            probe(agglomerate_tokens(&cx, v[0], &agg)?, seed)
        },
        &[grid],
    )
}

fn tubelets(seed: u64) -> Result<GradCheck> {
    let merge = if seed % 2 == 0 { TubeletMerge::WeightedSum } else { TubeletMerge::Concat };
    let (store, p) = store_with(seed, |i| Ok(LinkingParams::new(i, 4, merge, 3)))?;
    let mut r = rng(seed, 17);
    let z = uniform(&mut r, &[3, 3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 3, 3], 0.1, 1.0);
    check(
        |v| {
            let cx = Ctx::new(v[0].tape(), &store);
            probe(form_tubelets(&cx, v[0], v[1], &p, merge)?, seed)
        },
        &[z, w],
    )
}

fn link_gumbel(seed: u64) -> Result<GradCheck> {
    let (store, p) = store_with(seed, |i| Ok(LinkingParams::new(i, 4, TubeletMerge::WeightedSum, 4)))?;
    let mut r = rng(seed, 18);
    let noise: Tensor<f64> = sample_gumbel(&mut r, 3, 3, seed % 2 == 0);
    let cfg = LinkConfig { assign: AssignMode::GumbelSoftmax, tau: 0.7, ..Default::default() };
    let z = uniform(&mut r, &[4, 3, 4], -1.0, 1.0);
    check(
        |v| {
            let cx = Ctx::new(v[0].tape(), &store);
            probe(link_tokens(&cx, v[0], &p, &cfg, Some(&noise))?.tokens, seed)
        },
        &[z],
    )
}

fn decoder_heads(seed: u64) -> Result<GradCheck> {
    let dcfg = DecoderConfig { n_q: 4, layers: 2, c: 8, n_obj: 3, n_act: 4 };
    let (mut store, (ctx, dec, heads)) = store_with(seed, |i| {
        Ok((ContextLayer::new(i, 8)?, Decoder::new(i, &dcfg)?, Heads::new(i, &dcfg)))
    })?;
    let mut r = rng(seed, 19);
    // distinct queries, otherwise every output row is identical
    randomize(&mut store, dec.queries, 1.0, &mut r)?;
    let x = uniform(&mut r, &[3, 8], -1.0, 1.0);
    check(
        |v| {
            let cx = Ctx::new(v[0].tape(), &store);
            let emb = decode(&cx, global_context_layer(&cx, v[0], &ctx)?, &dec)?;
            let out = predict_heads(&cx, emb, &heads)?;
            let parts = [out.human, out.object, out.class_logits, out.action_logits];
            let mut total = probe(parts[0], seed)?;
            for (k, &p) in parts.iter().enumerate().skip(1) {
                total = total.add(probe(p, seed + 1000 * k as u64)?)?;
            }
            Ok(total)
        },
        &[x],
    )
}

fn raw_heads<'t>(v: &[Var<'t, f64>]) -> Result<HeadOutputs<'t, f64>> {
    Ok(HeadOutputs { human: v[0].sigmoid()?, object: v[1].sigmoid()?, class_logits: v[2], action_logits: v[3] })
}

fn loss(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 20);
    let (n_q, n_obj, n_act) = (4, 3, 3);
    let points = [
        uniform(&mut r, &[n_q, 4], -1.0, 1.0),
        uniform(&mut r, &[n_q, 4], -1.0, 1.0),
        uniform(&mut r, &[n_q, n_obj + 1], -1.0, 1.0),
        uniform(&mut r, &[n_q, n_act], -1.0, 1.0),
    ];
    let center = |r: &mut ChaCha8Rng| [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.1..0.3), r.gen_range(0.1..0.3)];
    let gts: Vec<HoiInstance> = (0..2)
        .map(|_| {
            let mut actions: Vec<bool> = (0..n_act).map(|_| r.gen_bool(0.4)).collect();
            actions[r.gen_range(0..n_act)] = true;
            HoiInstance { human: center(&mut r), object: center(&mut r), class: r.gen_range(0..n_obj), actions }
        })
        .collect();
    let cfg = LossConfig::default();
    let m = {
        let tape = Tape::new();
        let v: Vec<_> = points.iter().map(|p| tape.var(p.clone())).collect();
        hungarian_match(&gts, &raw_heads(&v)?.predictions()?, &cfg)?
    };
    check(|v| Ok(training_loss(&raw_heads(v)?, &gts, &m, &cfg)?.0), &points)
}

fn corrupted(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed, 21);
    let x = signed(&mut r, &[4]);
    check(
        |v| {
            let xv = v[0].value();
            let back: BackwardFn<f64> =
                Box::new(move |g| vec![Tensor::from_fn(xv.shape().to_vec(), |i| g.data()[i] * xv.data()[i])]);
            let y = v[0].tape().custom(&[v[0]], v[0].value().map(|a| a * a), back)?;
            Ok(y.sum()?)
        },
        &[x],
    )
    .map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let s = gradcheck_suites();
        let mut names: Vec<_> = s.iter().map(|s| s.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), s.len());
    }

    #[test]
    fn cheap_suites_pass() {
        for s in gradcheck_suites().into_iter().filter(|s| s.tolerance < 1e-4) {
            let r = Suite { points: 5, ..s }.run().unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = corrupted_suite().run().unwrap();
        assert!(!r.passed(), "{r:?}");
    }
}
