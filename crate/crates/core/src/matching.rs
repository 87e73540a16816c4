//! Bipartite matching of predictions to ground truth and the training loss.

use std::sync::Arc;

use crate::decoder::{HeadOutputs, HoiPrediction};
use crate::error::{invalid, Error, Result};
use crate::tensor::{giou_value, Real, Tensor, Var};

/// One annotated interaction. Boxes are normalized `(cx, cy, w, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiInstance {
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub class: usize,
    pub actions: Vec<bool>,
}

impl HoiInstance {
    pub fn validate(&self, n_obj: usize, n_act: usize) -> Result<()> {
        for b in [&self.human, &self.object] {
            if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
                return invalid(format!("degenerate box {b:?}"));
            }
        }
        if self.class >= n_obj {
            return invalid(format!("object class {} out of {n_obj}", self.class));
        }
        if self.actions.len() != n_act || !self.actions.iter().any(|&a| a) {
            return invalid(format!("action vector must have {n_act} entries with at least one set"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: [f64; 3],
    pub beta: [f64; 2],
    pub eta: [f64; 3],
    pub eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub no_pair_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: [1.0, 1.0, 1.0],
            beta: [2.5, 1.0],
            eta: [1.0, 1.0, 1.0],
            eps: 1e-4,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            no_pair_weight: 0.1,
        }
    }
}

/// Generalized IoU of two center-format boxes.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    Ok(giou_value(a, b)?)
}

pub fn corners_to_center(x0: f64, y0: f64, x1: f64, y1: f64) -> [f64; 4] {
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn box_cost(gt: &HoiInstance, pred: &HoiPrediction, cfg: &LossConfig) -> Result<f64> {
    let l = l1(&gt.human, &pred.human) + l1(&gt.object, &pred.object);
    let g = giou(&gt.human, &pred.human)? + giou(&gt.object, &pred.object)?;
    Ok(cfg.beta[0] * l - cfg.beta[1] * g)
}

pub fn object_cost(gt: &HoiInstance, pred: &HoiPrediction) -> f64 {
    -pred.class_prob[gt.class]
}

pub fn action_cost(gt: &HoiInstance, pred: &HoiPrediction, eps: f64) -> f64 {
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0.0, 0.0, 0.0);
    for (&c, &p) in gt.actions.iter().zip(&pred.action_prob) {
        if c {
            pos += p;
            npos += 1.0;
        } else {
            neg += 1.0 - p;
            nneg += 1.0;
        }
    }
    -0.5 * (pos / (npos + eps) + neg / (nneg + eps))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCost {
    pub box_cost: f64,
    pub obj_cost: f64,
    pub act_cost: f64,
    pub total: f64,
}

pub fn pair_cost(gt: &HoiInstance, pred: &HoiPrediction, cfg: &LossConfig) -> Result<PairCost> {
    let (b, o, a) = (box_cost(gt, pred, cfg)?, object_cost(gt, pred), action_cost(gt, pred, cfg.eps));
    Ok(PairCost { box_cost: b, obj_cost: o, act_cost: a, total: cfg.alpha[0] * b + cfg.alpha[1] * o + cfg.alpha[2] * a })
}

/// Optimal assignment of every row to a distinct column of a rectangular
/// `rows <= cols` cost matrix (shortest augmenting paths with potentials).
/// Returns the column chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) || n > m {
        return invalid(format!("cost matrix must be rectangular with rows <= cols, got {n} x {m}"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return invalid("cost matrix has non-finite entries");
    }
    // 1-based arrays; p[j] is the row matched to column j, 0 for none
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Ground truth `i` matched to prediction `pairs[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<usize>,
    pub costs: Vec<PairCost>,
    pub total: f64,
}

pub fn cost_matrix(gts: &[HoiInstance], preds: &[HoiPrediction], cfg: &LossConfig) -> Result<Vec<Vec<PairCost>>> {
    gts.iter().map(|g| preds.iter().map(|p| pair_cost(g, p, cfg)).collect()).collect()
}

/// Minimum-cost injective assignment of real ground truths to predictions.
/// Padding entries would cost zero against every prediction, so they are
/// left out of the matrix.
pub fn hungarian_match(gts: &[HoiInstance], preds: &[HoiPrediction], cfg: &LossConfig) -> Result<MatchResult> {
    if gts.len() > preds.len() {
        return invalid(format!("{} ground truths exceed {} queries", gts.len(), preds.len()));
    }
    let costs = cost_matrix(gts, preds, cfg)?;
    let totals: Vec<Vec<f64>> = costs.iter().map(|r| r.iter().map(|c| c.total).collect()).collect();
    let pairs = hungarian(&totals)?;
    let chosen: Vec<PairCost> = pairs.iter().enumerate().map(|(i, &j)| costs[i][j]).collect();
    let total = chosen.iter().map(|c| c.total).sum();
    Ok(MatchResult { pairs, costs: chosen, total })
}

/// Scalar losses of one clip.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub boxes: f64,
    pub object: f64,
    pub action: f64,
}

fn gt_boxes<F: Real>(gts: &[HoiInstance], human: bool) -> Tensor<F> {
    Tensor::from_fn([gts.len(), 4], |i| F::from_f64(if human { gts[i / 4].human[i % 4] } else { gts[i / 4].object[i % 4] }))
}

/// Summed box and focal terms over matched pairs plus the class
/// cross-entropy averaged over all queries with per-query weights.
pub fn training_loss<'t, F: Real>(
    out: &HeadOutputs<'t, F>,
    gts: &[HoiInstance],
    m: &MatchResult,
    cfg: &LossConfig,
) -> Result<(Var<'t, F>, LossParts)> {
    let tape = out.human.tape();
    let n_q = out.human.shape()[0];
    let n_cls = out.class_logits.shape()[1];
    let n_act = out.action_logits.shape()[1];
    if m.pairs.len() != gts.len() || m.pairs.iter().any(|&p| p >= n_q) {
        return invalid("match does not fit the predictions");
    }
    let f = F::from_f64;
    let zero = || tape.constant(Tensor::scalar(F::zero()));

    let (l_box, l_act) = if gts.is_empty() {
        (zero(), zero())
    } else {
        let idx = Arc::new(m.pairs.iter().map(|&p| Some(p)).collect::<Vec<_>>());
        let mut terms = Vec::new();
        for (boxes, human) in [(out.human, true), (out.object, false)] {
            let pred = boxes.gather_rows(idx.clone())?;
            let gt = tape.constant(gt_boxes::<F>(gts, human));
            let l1 = pred.sub(gt)?.abs()?.sum()?.scale(f(cfg.beta[0]))?;
            let g = pred.giou(gt)?.sum()?.scale(f(cfg.beta[1]))?;
            terms.push(l1.sub(g)?);
        }
        let l_box = terms[0].add(terms[1])?;

        let x = out.action_logits.gather_rows(idx)?;
        let y = Tensor::from_fn([gts.len(), n_act], |i| if gts[i / n_act].actions[i % n_act] { F::one() } else { F::zero() });
        let l_act = focal_loss(x, &y, cfg.focal_gamma, cfg.focal_alpha)?;
        (l_box, l_act)
    };

    let mut target = vec![n_cls - 1; n_q];
    for (g, &p) in m.pairs.iter().enumerate() {
        target[p] = gts[g].class;
    }
    let weight: Vec<f64> = target.iter().map(|&t| if t == n_cls - 1 { cfg.no_pair_weight } else { 1.0 }).collect();
    let wsum: f64 = weight.iter().sum();
    let wt = Tensor::from_fn([n_q, n_cls], |i| if i % n_cls == target[i / n_cls] { f(weight[i / n_cls] / wsum) } else { F::zero() });
    let l_obj = out.class_logits.log_softmax(1)?.mul(tape.constant(wt))?.sum()?.neg()?;

    let total = l_box.scale(f(cfg.eta[0]))?.add(l_obj.scale(f(cfg.eta[1]))?)?.add(l_act.scale(f(cfg.eta[2]))?)?;
    let parts = LossParts {
        total: total.value().item().as_f64(),
        boxes: l_box.value().item().as_f64(),
        object: l_obj.value().item().as_f64(),
        action: l_act.value().item().as_f64(),
    };
    if !parts.total.is_finite() {
        return Err(Error::Invalid("non-finite loss".into()));
    }
    Ok((total, parts))
}

/// Sigmoid focal loss on logits, summed over all entries.
pub fn focal_loss<'t, F: Real>(x: Var<'t, F>, y: &Tensor<F>, gamma: f64, alpha: f64) -> Result<Var<'t, F>> {
    let tape = x.tape();
    let f = F::from_f64;
    let yv = tape.constant(y.clone());
    let one_minus_y = tape.constant(y.map(|v| F::one() - v));
    let p = x.sigmoid()?;
    // 1 - p_t = y (1 - p) + (1 - y) p
    let q = yv.mul(p.neg()?.add_scalar(F::one())?)?.add(one_minus_y.mul(p)?)?;
    let ce = x.softplus()?.sub(x.mul(yv)?)?;
    let modulator = if gamma == 2.0 { q.mul(q)? } else { pow(q, gamma)? };
    let alpha_t = tape.constant(y.map(|v| f(alpha) * v + f(1.0 - alpha) * (F::one() - v)));
    Ok(alpha_t.mul(modulator)?.mul(ce)?.sum()?)
}

fn pow<'t, F: Real>(q: Var<'t, F>, gamma: f64) -> Result<Var<'t, F>> {
    // q^g = exp(g ln q) is not in the primitive set; integer powers cover
    // the configurations we use
    if gamma.fract() != 0.0 || gamma < 0.0 {
        return invalid(format!("focal gamma must be a non-negative integer, got {gamma}"));
    }
    let mut acc = q.tape().constant(Tensor::full(q.shape(), F::one()));
    for _ in 0..gamma as usize {
        acc = acc.mul(q)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::finite_diff_check_many;
    use crate::tensor::Tape;

    fn inst(h: [f64; 4], o: [f64; 4], class: usize, actions: &[bool]) -> HoiInstance {
        HoiInstance { human: h, object: o, class, actions: actions.to_vec() }
    }

    fn pred_of(g: &HoiInstance, n_cls: usize) -> HoiPrediction {
        let mut class_prob = vec![0.0; n_cls];
        class_prob[g.class] = 1.0;
        HoiPrediction {
            human: g.human,
            object: g.object,
            class_prob,
            action_prob: g.actions.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        }
    }

    #[test]
    fn giou_examples() {
        let a = corners_to_center(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        assert!((giou(&a, &corners_to_center(1.0, 0.0, 2.0, 1.0)).unwrap()).abs() < 1e-15);
        assert!((giou(&a, &corners_to_center(2.0, 0.0, 3.0, 1.0)).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert!(giou(&a, &[0.5, 0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn box_cost_examples() {
        let g = inst([0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, &[true]);
        let cfg = LossConfig::default();
        assert!((box_cost(&g, &pred_of(&g, 2), &cfg).unwrap() + 2.0).abs() < 1e-12);
        let mut p = pred_of(&g, 2);
        p.human.iter_mut().chain(p.object.iter_mut()).for_each(|v| *v += 0.1);
        let (gh, go) = (giou(&g.human, &p.human).unwrap(), giou(&g.object, &p.object).unwrap());
        assert!((box_cost(&g, &p, &cfg).unwrap() - (2.5 * 0.8 - gh - go)).abs() < 1e-12);
        let zero = LossConfig { beta: [0.0, 0.0], ..cfg };
        assert_eq!(box_cost(&g, &p, &zero).unwrap(), 0.0);
    }

    #[test]
    fn object_and_action_cost_examples() {
        let g = inst([0.5; 4], [0.5; 4], 2, &[true, false, false]);
        let mut p = pred_of(&g, 5);
        assert_eq!(object_cost(&g, &p), -1.0);
        p.class_prob = vec![0.2; 5];
        assert_eq!(object_cost(&g, &p), -0.2);
        p.class_prob[2] = 0.0;
        assert_eq!(object_cost(&g, &p), 0.0);

        p.action_prob = vec![1.0, 0.0, 0.0];
        assert!((action_cost(&g, &p, 1e-12) + 1.0).abs() < 1e-9);
        p.action_prob = vec![0.0, 1.0, 1.0];
        assert_eq!(action_cost(&g, &p, 1e-4), 0.0);
        let all = inst([0.5; 4], [0.5; 4], 0, &[true, true, true]);
        p.action_prob = vec![1.0; 3];
        assert!((action_cost(&all, &p, 1e-4) + 0.5 * 3.0 / (3.0 + 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap(), vec![1, 0]);
        assert_eq!(hungarian(&[vec![5.0, 1.0, 7.0]]).unwrap(), vec![1]);
        assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
    }

    fn random_pred(rng: &mut ChaCha8Rng, n_cls: usize, n_act: usize) -> HoiPrediction {
        let mut bx = || [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4)];
        let (human, object) = (bx(), bx());
        let raw: Vec<f64> = (0..n_cls).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        HoiPrediction { human, object, class_prob: raw.iter().map(|v| v / s).collect(), action_prob: (0..n_act).map(|_| rng.gen()).collect() }
    }

    fn random_gt(rng: &mut ChaCha8Rng, n_obj: usize, n_act: usize) -> HoiInstance {
        let p = random_pred(rng, 1, n_act);
        let k = rng.gen_range(0..n_act);
        inst(p.human, p.object, rng.gen_range(0..n_obj), &(0..n_act).map(|a| a == k || rng.gen_bool(0.2)).collect::<Vec<_>>())
    }

    #[test]
    fn scaling_alpha_keeps_the_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let preds: Vec<_> = (0..6).map(|_| random_pred(&mut rng, 5, 6)).collect();
            let gts: Vec<_> = (0..3).map(|_| random_gt(&mut rng, 4, 6)).collect();
            let cfg = LossConfig::default();
            let scaled = LossConfig { alpha: [3.0, 3.0, 3.0], ..cfg.clone() };
            assert_eq!(hungarian_match(&gts, &preds, &cfg).unwrap().pairs, hungarian_match(&gts, &preds, &scaled).unwrap().pairs);
        }
    }

    #[test]
    fn beats_random_alternatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let preds: Vec<_> = (0..8).map(|_| random_pred(&mut rng, 5, 6)).collect();
        let gts: Vec<_> = (0..4).map(|_| random_gt(&mut rng, 4, 6)).collect();
        let cfg = LossConfig::default();
        let m = hungarian_match(&gts, &preds, &cfg).unwrap();
        let costs = cost_matrix(&gts, &preds, &cfg).unwrap();
        for _ in 0..100 {
            let mut cols: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                cols.swap(i, rng.gen_range(0..=i));
            }
            let alt: f64 = (0..4).map(|g| costs[g][cols[g]].total).sum();
            assert!(m.total <= alt + 1e-12);
        }
    }

    fn heads_from<'t>(tape: &'t Tape<f64>, v: &[Var<'t, f64>]) -> HeadOutputs<'t, f64> {
        let _ = tape;
        HeadOutputs { human: v[0].sigmoid().unwrap(), object: v[1].sigmoid().unwrap(), class_logits: v[2], action_logits: v[3] }
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |s: &[usize]| tape.var(Tensor::from_fn(s.to_vec(), |_| rng.gen_range(-1.0..1.0)));
        let v = [r(&[3, 4]), r(&[3, 4]), r(&[3, 5]), r(&[3, 6])];
        let out = heads_from(&tape, &v);
        let gts = vec![inst([0.5, 0.5, 0.2, 0.3], [0.4, 0.4, 0.1, 0.1], 1, &[true, false, false, false, false, false])];
        let m = hungarian_match(&gts, &out.predictions().unwrap(), &LossConfig::default()).unwrap();
        let cfg = LossConfig { eta: [0.0; 3], ..LossConfig::default() };
        assert_eq!(training_loss(&out, &gts, &m, &cfg).unwrap().1.total, 0.0);
    }

    #[test]
    fn near_perfect_predictions_reach_the_giou_floor() {
        let tape = Tape::<f64>::new();
        let g = inst([0.5, 0.5, 0.2, 0.4], [0.3, 0.6, 0.1, 0.1], 1, &[false, true, false]);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let hb: Vec<f64> = g.human.iter().map(|&v| logit(v)).collect();
        let ob: Vec<f64> = g.object.iter().map(|&v| logit(v)).collect();
        let h = tape.var(Tensor::from_f64([2, 4], &[hb.clone(), vec![0.0; 4]].concat()).unwrap());
        let o = tape.var(Tensor::from_f64([2, 4], &[ob.clone(), vec![0.0; 4]].concat()).unwrap());
        let cls = tape.var(Tensor::from_f64([2, 3], &[-30.0, 30.0, -30.0, -30.0, -30.0, 30.0]).unwrap());
        let act = tape.var(Tensor::from_f64([2, 3], &[-30.0, 30.0, -30.0, 0.0, 0.0, 0.0]).unwrap());
        let out = HeadOutputs { human: h.sigmoid().unwrap(), object: o.sigmoid().unwrap(), class_logits: cls, action_logits: act };
        let m = hungarian_match(&[g.clone()], &out.predictions().unwrap(), &LossConfig::default()).unwrap();
        assert_eq!(m.pairs, vec![0]);
        let (_, parts) = training_loss(&out, &[g], &m, &LossConfig::default()).unwrap();
        assert!((parts.total + 2.0).abs() < 1e-6, "{parts:?}");
    }

    #[test]
    fn loss_gradcheck_with_fixed_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = |s: &[usize]| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(-1.0..1.0));
        let points = [r(&[4, 4]), r(&[4, 4]), r(&[4, 5]), r(&[4, 3])];
        let gts = vec![
            inst([0.45, 0.5, 0.3, 0.35], [0.6, 0.55, 0.2, 0.25], 2, &[true, false, true]),
            inst([0.3, 0.35, 0.25, 0.2], [0.35, 0.45, 0.3, 0.1], 0, &[false, true, false]),
        ];
        let m = {
            let tape = Tape::new();
            let v: Vec<_> = points.iter().map(|p| tape.var(p.clone())).collect();
            hungarian_match(&gts, &heads_from(&tape, &v).predictions().unwrap(), &LossConfig::default()).unwrap()
        };
        let rep = finite_diff_check_many(
            |v| {
                let out = heads_from(v[0].tape(), v);
                Ok::<_, Error>(training_loss(&out, &gts, &m, &LossConfig::default())?.0)
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    proptest! {
        #[test]
        fn giou_is_symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pred(&mut rng, 1, 1).human;
            let b = random_pred(&mut rng, 1, 1).object;
            let (ab, ba) = (giou(&a, &b).unwrap(), giou(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ab > -1.0 && ab <= 1.0);
            prop_assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn action_cost_in_unit_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gt(&mut rng, 4, 6);
            let p = random_pred(&mut rng, 5, 6);
            let c = action_cost(&g, &p, 1e-4);
            prop_assert!((-1.0..=0.0).contains(&c));
        }
    }
}
