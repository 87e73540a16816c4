//! AdamW training with warmup and step decay, plus batched inference.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::decoder::HoiPrediction;
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_map, EvalReport};
use crate::matching::{hungarian_match, training_loss, LossConfig, LossParts, MatchResult};
use crate::model::Tutor;
use crate::nn::{Ctx, ParamStore};
use crate::synth::{augment, Sample};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Random flip and translation of up to this many pixels per training
    /// clip; `None` trains on the clips as generated.
    pub augment_shift: Option<usize>,
    /// Global gradient-norm limit, 0 disables clipping.
    pub clip_norm: f64,
    /// Worker threads per batch, 0 uses all cores.
    pub threads: usize,
    /// Parameters whose names start with any of these are never updated.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 2.5e-4,
            lr_backbone: 2.5e-4,
            warmup_epochs: 2,
            decay_epochs: vec![10, 15],
            decay_factor: 0.5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment_shift: Some(8),
            clip_norm: 0.1,
            threads: 0,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        for (k, v) in [("lr", self.lr), ("lr_backbone", self.lr_backbone), ("weight_decay", self.weight_decay), ("clip_norm", self.clip_norm)] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{k} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return invalid("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    /// Learning-rate multiplier at fractional epoch `progress`: linear
    /// warmup, then a factor per passed decay epoch.
    pub fn lr_scale(&self, progress: f64) -> f64 {
        if progress < self.warmup_epochs as f64 {
            return (progress + 1e-3).min(self.warmup_epochs as f64) / self.warmup_epochs as f64;
        }
        let passed = self.decay_epochs.iter().filter(|&&e| progress >= e as f64).count();
        self.decay_factor.powi(passed as i32)
    }
}

/// Decoupled weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let z: Vec<Vec<F>> = store.values().iter().map(|t| vec![F::zero(); t.numel()]).collect();
        Self { m: z.clone(), v: z, step: 0 }
    }

    /// One update; `lrs[i]` is the learning rate of parameter `i`, NaN
    /// leaves it untouched.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lrs: &[f64], cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = lrs[i];
            if lr.is_nan() {
                // frozen parameter
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get(id);
            let g = grads[i].data();
            let decay = F::from_f64(1.0 - lr * cfg.weight_decay);
            let step = F::from_f64(lr / bc1);
            let eps = F::from_f64(cfg.adam_eps);
            let inv_bc2 = F::from_f64(1.0 / bc2);
            let data: Vec<F> = p
                .data()
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    m[k] = b1 * m[k] + (F::one() - b1) * g[k];
                    v[k] = b2 * v[k] + (F::one() - b2) * g[k] * g[k];
                    w * decay - step * m[k] / ((v[k] * inv_bc2).sqrt() + eps)
                })
                .collect();
            store.set(id, Tensor::new(p.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossParts,
    pub map_all: f64,
    pub map_static: f64,
    pub map_dynamic: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,loss_total,loss_b,loss_o,loss_a,map_all,map_static,map_dynamic"
    }

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, l.total, l.boxes, l.object, l.action, self.map_all, self.map_static, self.map_dynamic
        )
    }
}

/// Loss and parameter gradients of one clip.
pub fn clip_gradients<F: Real>(
    model: &Tutor,
    store: &ParamStore<F>,
    sample: &Sample,
    noise: Option<&Tensor<F>>,
    loss_cfg: &LossConfig,
) -> Result<(Vec<Tensor<F>>, LossParts)> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store);
    let out = model.forward(&cx, &sample.clip, noise)?.outputs;
    let m = hungarian_match(&sample.gts, &out.predictions()?, loss_cfg)?;
    let (loss, parts) = training_loss(&out, &sample.gts, &m, loss_cfg)?;
    let grads = tape.backward(loss)?;
    Ok((cx.param_grads(&grads), parts))
}

/// Inference-mode predictions (no noise) for one clip.
pub fn predict<F: Real>(model: &Tutor, store: &ParamStore<F>, sample: &Sample) -> Result<Vec<HoiPrediction>> {
    let tape = Tape::new();
    let cx = Ctx::frozen(&tape, store);
    model.forward(&cx, &sample.clip, None)?.outputs.predictions()
}

fn thread_count(requested: usize, work: usize) -> usize {
    let n = if requested == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { requested };
    n.clamp(1, work.max(1))
}

/// Runs `f` on every index in `0..n`, spread over `threads` workers, and
/// returns the results in index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread_count(threads, n);
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let f = &f;
                s.spawn(move || (k..n).step_by(threads).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index is filled")).collect()
}

pub fn predict_all<F: Real>(model: &Tutor, store: &ParamStore<F>, samples: &[Sample], threads: usize) -> Result<Vec<Vec<HoiPrediction>>> {
    parallel_map(samples.len(), threads, |i| predict(model, store, &samples[i])).into_iter().collect()
}

pub fn evaluate<F: Real>(
    model: &Tutor,
    store: &ParamStore<F>,
    samples: &[Sample],
    dynamic: &[bool],
    iou_threshold: f64,
    threads: usize,
) -> Result<EvalReport> {
    let preds = predict_all(model, store, samples, threads)?;
    let gts: Vec<_> = samples.iter().map(|s| s.gts.clone()).collect();
    evaluate_map(&preds, &gts, model.cfg.n_obj, dynamic, iou_threshold)
}

/// Optimal matches of every clip under the current model, for reporting.
pub fn match_all<F: Real>(
    model: &Tutor,
    store: &ParamStore<F>,
    samples: &[Sample],
    loss_cfg: &LossConfig,
    threads: usize,
) -> Result<Vec<MatchResult>> {
    let preds = predict_all(model, store, samples, threads)?;
    samples.iter().zip(&preds).map(|(s, p)| hungarian_match(&s.gts, p, loss_cfg)).collect()
}

fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().flat_map(|g| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

pub struct Trainer<'a, F: Real> {
    pub model: &'a Tutor,
    pub store: ParamStore<F>,
    pub opt: AdamW<F>,
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub rng: ChaCha8Rng,
    /// Box IoU needed for a hit in the per-epoch mAP.
    pub iou_threshold: f64,
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(model: &'a Tutor, store: ParamStore<F>, cfg: TrainConfig, loss_cfg: LossConfig, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&store);
        Ok(Self { model, store, opt, cfg, loss_cfg, rng, iou_threshold: 0.5 })
    }

    /// One pass over `train` in a seeded shuffled order; returns the mean
    /// per-clip losses.
    pub fn epoch(&mut self, epoch: usize, train: &[Sample]) -> Result<LossParts> {
        if train.is_empty() {
            return invalid("empty training set");
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let lrs_base: Vec<f64> = self
            .store
            .ids()
            .map(|id| {
                let name = self.store.name(id);
                if self.cfg.frozen.iter().any(|p| name.starts_with(p.as_str())) {
                    f64::NAN
                } else if Tutor::is_backbone(name) {
                    self.cfg.lr_backbone
                } else {
                    self.cfg.lr
                }
            })
            .collect();
        let batches = order.len().div_ceil(self.cfg.batch_size);
        let mut sum = LossParts::default();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let noise: Vec<Option<Tensor<F>>> = chunk.iter().map(|_| self.model.sample_noise(&mut self.rng)).collect();
            let augmented: Vec<Option<Sample>> = match self.cfg.augment_shift {
                Some(shift) => chunk.iter().map(|&i| Some(augment(&train[i], &mut self.rng, shift))).collect(),
                None => vec![None; chunk.len()],
            };
            let (model, store, loss_cfg) = (self.model, &self.store, &self.loss_cfg);
            let results = parallel_map(chunk.len(), self.cfg.threads, |k| {
                let sample = augmented[k].as_ref().unwrap_or(&train[chunk[k]]);
                clip_gradients(model, store, sample, noise[k].as_ref(), loss_cfg)
            });
            let mut acc: Option<Vec<Vec<F>>> = None;
            let scale = F::from_f64(1.0 / chunk.len() as f64);
            for r in results {
                let (grads, parts) = r.map_err(|e| Error::Invalid(format!("epoch {}, batch {b}: {e}", epoch + 1)))?;
                sum.total += parts.total;
                sum.boxes += parts.boxes;
                sum.object += parts.object;
                sum.action += parts.action;
                match acc.as_mut() {
                    None => acc = Some(grads.iter().map(|g| g.data().iter().map(|&v| v * scale).collect()).collect()),
                    Some(a) => {
                        for (ai, g) in a.iter_mut().zip(&grads) {
                            for (x, &y) in ai.iter_mut().zip(g.data()) {
                                *x = *x + y * scale;
                            }
                        }
                    }
                }
            }
            let ids: Vec<_> = self.store.ids().collect();
            let mut grads: Vec<Tensor<F>> = acc
                .expect("non-empty batch")
                .into_iter()
                .zip(&ids)
                .map(|(d, &id)| Tensor::new(self.store.get(id).shape().to_vec(), d))
                .collect::<std::result::Result<_, _>>()?;
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return invalid(format!("non-finite gradient norm in epoch {}, batch {b}", epoch + 1));
            }
            if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
                let s = F::from_f64(self.cfg.clip_norm / norm);
                grads = grads.iter().map(|g| g.map(|v| v * s)).collect();
            }
            let scale = self.cfg.lr_scale(epoch as f64 + b as f64 / batches as f64);
            let lrs: Vec<f64> = lrs_base.iter().map(|l| l * scale).collect();
            self.opt.update(&mut self.store, &grads, &lrs, &self.cfg)?;
        }
        let n = train.len() as f64;
        Ok(LossParts { total: sum.total / n, boxes: sum.boxes / n, object: sum.object / n, action: sum.action / n })
    }

    /// Full schedule; `eval` scores mAP after each epoch and `on_epoch`
    /// sees every row as it is produced.
    pub fn run(
        &mut self,
        train: &[Sample],
        eval: &[Sample],
        dynamic: &[bool],
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut rows = Vec::with_capacity(self.cfg.epochs);
        for e in 0..self.cfg.epochs {
            let loss = self.epoch(e, train)?;
            let rep = if eval.is_empty() { None } else { Some(evaluate(self.model, &self.store, eval, dynamic, self.iou_threshold, self.cfg.threads)?) };
            let row = EpochMetrics {
                epoch: e + 1,
                loss,
                map_all: rep.as_ref().map_or(0.0, |r| r.map_all),
                map_static: rep.as_ref().map_or(0.0, |r| r.map_static),
                map_dynamic: rep.as_ref().map_or(0.0, |r| r.map_dynamic),
            };
            on_epoch(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}
