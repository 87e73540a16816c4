//! Global context over tubelets, the query decoder and prediction heads.

use crate::abstraction::heads_for;
use crate::error::{invalid, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub n_q: usize,
    pub layers: usize,
    pub c: usize,
    pub n_obj: usize,
    pub n_act: usize,
}

/// Pre-norm self-attention and MLP block over all tubelets.
#[derive(Clone, Debug)]
pub struct ContextLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl ContextLayer {
    pub fn new<F: Real>(init: &mut Init<'_, F>, c: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, "context.ln1", c),
            attn: MultiHeadAttention::new(init, "context.attn", c, heads_for(c))?,
            ln2: LayerNorm::new(init, "context.ln2", c),
            mlp: Mlp::new(init, "context.mlp", c, 4 * c),
        })
    }
}

/// `[N, C]` tubelets to refined `[N, C]` tubelets.
pub fn global_context_layer<'t, F: Real>(cx: &Ctx<'t, F>, tubelets: Var<'t, F>, layer: &ContextLayer) -> Result<Var<'t, F>> {
    let s = tubelets.shape();
    if s.len() != 2 {
        return invalid(format!("tubelets must be [N, C], got {s:?}"));
    }
    let x = tubelets.reshape(&[1, s[0], s[1]])?;
    let h = layer.ln1.forward(cx, x)?;
    let x = x.add(layer.attn.forward(cx, h, h, h)?)?;
    let x = x.add(layer.mlp.forward(cx, layer.ln2.forward(cx, x)?)?)?;
    Ok(x.reshape(&s)?)
}

/// Post-norm layer: query self-attention, cross-attention to tubelets, MLP.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub ln3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new<F: Real>(init: &mut Init<'_, F>, cfg: &DecoderConfig) -> Result<Self> {
        let c = cfg.c;
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(init, &format!("{name}.self"), c, heads_for(c))?,
                    ln1: LayerNorm::new(init, &format!("{name}.ln1"), c),
                    cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross"), c, heads_for(c))?,
                    ln2: LayerNorm::new(init, &format!("{name}.ln2"), c),
                    mlp: Mlp::new(init, &format!("{name}.mlp"), c, 4 * c),
                    ln3: LayerNorm::new(init, &format!("{name}.ln3"), c),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { queries: init.zeros("decoder.queries", &[cfg.n_q, c]), layers, cfg: cfg.clone() })
    }
}

/// `N_q x C` output embeddings. The target starts at zero; the learned
/// query embedding is added to the inputs of every attention query.
pub fn decode<'t, F: Real>(cx: &Ctx<'t, F>, tubelets: Var<'t, F>, dec: &Decoder) -> Result<Var<'t, F>> {
    let s = tubelets.shape();
    let (n_q, c) = (dec.cfg.n_q, dec.cfg.c);
    if s.len() != 2 || s[1] != c {
        return invalid(format!("decoder expects [N, {c}] tubelets, got {s:?}"));
    }
    let memory = tubelets.reshape(&[1, s[0], c])?;
    let qpos = cx.p(dec.queries).reshape(&[1, n_q, c])?;
    let mut tgt = cx.constant(Tensor::zeros([1, n_q, c]));
    for l in &dec.layers {
        let q = tgt.add(qpos)?;
        tgt = l.ln1.forward(cx, tgt.add(l.self_attn.forward(cx, q, q, tgt)?)?)?;
        let q = tgt.add(qpos)?;
        tgt = l.ln2.forward(cx, tgt.add(l.cross_attn.forward(cx, q, memory, memory)?)?)?;
        tgt = l.ln3.forward(cx, tgt.add(l.mlp.forward(cx, tgt)?)?)?;
    }
    Ok(tgt.reshape(&[n_q, c])?)
}

/// Three linear layers with GELU between.
#[derive(Clone, Debug)]
pub struct BoxMlp {
    pub layers: [Linear; 3],
}

impl BoxMlp {
    fn new<F: Real>(init: &mut Init<'_, F>, name: &str, c: usize) -> Self {
        Self {
            layers: [
                Linear::new(init, &format!("{name}.fc1"), c, c),
                Linear::new(init, &format!("{name}.fc2"), c, c),
                Linear::new(init, &format!("{name}.fc3"), c, 4),
            ],
        }
    }

    fn forward<'t, F: Real>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.layers[0].forward(cx, x)?.gelu()?;
        let h = self.layers[1].forward(cx, h)?.gelu()?;
        self.layers[2].forward(cx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub human: BoxMlp,
    pub object: BoxMlp,
    pub class: Linear,
    pub action: Linear,
}

impl Heads {
    pub fn new<F: Real>(init: &mut Init<'_, F>, cfg: &DecoderConfig) -> Self {
        Self {
            human: BoxMlp::new(init, "head.human", cfg.c),
            object: BoxMlp::new(init, "head.object", cfg.c),
            class: Linear::new(init, "head.class", cfg.c, cfg.n_obj + 1),
            action: Linear::new(init, "head.action", cfg.c, cfg.n_act),
        }
    }
}

/// Differentiable head outputs for all queries.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs<'t, F: Real> {
    /// `[N_q, 4]` center-format boxes in `(0, 1)`.
    pub human: Var<'t, F>,
    pub object: Var<'t, F>,
    /// `[N_q, N_obj + 1]`, last column is the no-pair class.
    pub class_logits: Var<'t, F>,
    /// `[N_q, N_act]`.
    pub action_logits: Var<'t, F>,
}

/// One query's prediction as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiPrediction {
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub class_prob: Vec<f64>,
    pub action_prob: Vec<f64>,
}

pub fn predict_heads<'t, F: Real>(cx: &Ctx<'t, F>, emb: Var<'t, F>, heads: &Heads) -> Result<HeadOutputs<'t, F>> {
    Ok(HeadOutputs {
        human: heads.human.forward(cx, emb)?.sigmoid()?,
        object: heads.object.forward(cx, emb)?.sigmoid()?,
        class_logits: heads.class.forward(cx, emb)?,
        action_logits: heads.action.forward(cx, emb)?,
    })
}

impl<F: Real> HeadOutputs<'_, F> {
    pub fn predictions(&self) -> Result<Vec<HoiPrediction>> {
        let (h, o) = (self.human.value().to_f64_vec(), self.object.value().to_f64_vec());
        let cls = self.class_logits.softmax(1)?.value().to_f64_vec();
        let act = self.action_logits.sigmoid()?.value().to_f64_vec();
        let n_q = self.human.shape()[0];
        let (k, a) = (cls.len() / n_q, act.len() / n_q);
        let four = |v: &[f64], q: usize| [v[4 * q], v[4 * q + 1], v[4 * q + 2], v[4 * q + 3]];
        Ok((0..n_q)
            .map(|q| HoiPrediction {
                human: four(&h, q),
                object: four(&o, q),
                class_prob: cls[q * k..(q + 1) * k].to_vec(),
                action_prob: act[q * a..(q + 1) * a].to_vec(),
            })
            .collect())
    }
}

impl HoiPrediction {
    /// One line: boxes, best object class with probability, and the actions
    /// whose probability exceeds `threshold`.
    pub fn dump_line(&self, threshold: f64) -> String {
        let n_obj = self.class_prob.len() - 1;
        let (cls, p) = self.class_prob.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let fmt = |b: &[f64; 4]| b.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ");
        let label = if cls == n_obj { "none".to_string() } else { cls.to_string() };
        let actions: Vec<String> = self
            .action_prob
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(i, v)| format!("{i}:{v:.4}"))
            .collect();
        format!("human {} object {} class {label} {p:.4} actions [{}]", fmt(&self.human), fmt(&self.object), actions.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;

    fn cfg(n_q: usize, layers: usize, c: usize) -> DecoderConfig {
        DecoderConfig { n_q, layers, c, n_obj: 4, n_act: 6 }
    }

    fn build(c: &DecoderConfig, seed: u64) -> (ParamStore<f64>, ContextLayer, Decoder, Heads) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let ctx = ContextLayer::new(&mut init, c.c).unwrap();
        let dec = Decoder::new(&mut init, c).unwrap();
        let heads = Heads::new(&mut init, c);
        (store, ctx, dec, heads)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn singleton_context_attends_to_itself() {
        let c = cfg(4, 1, 32);
        let (store, layer, _, _) = build(&c, 1);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = cx.constant(random(&[1, 32], 2));
        let y = global_context_layer(&cx, x, &layer).unwrap().value();
        let h = layer.ln1.forward(&cx, x).unwrap();
        let v = layer.attn.o.forward(&cx, layer.attn.v.forward(&cx, h).unwrap()).unwrap();
        let x1 = x.add(v).unwrap();
        let expect = x1.add(layer.mlp.forward(&cx, layer.ln2.forward(&cx, x1).unwrap()).unwrap()).unwrap().value();
        assert!(y.data().iter().zip(expect.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn context_is_permutation_equivariant() {
        let c = cfg(4, 1, 256);
        let (store, layer, _, _) = build(&c, 3);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = random(&[4, 256], 4);
        let y = global_context_layer(&cx, cx.constant(x.clone()), &layer).unwrap().value();
        assert_eq!(y.shape(), &[4, 256]);
        let perm = [3, 1, 0, 2];
        let xp = Tensor::new([4, 256], perm.iter().flat_map(|&p| x.data()[p * 256..(p + 1) * 256].to_vec()).collect()).unwrap();
        let yp = global_context_layer(&cx, cx.constant(xp), &layer).unwrap().value();
        for (k, &p) in perm.iter().enumerate() {
            for ch in 0..256 {
                assert!((yp.data()[k * 256 + ch] - y.data()[p * 256 + ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_emits_one_embedding_per_query() {
        for (n_q, n) in [(100, 4), (50, 1), (8, 9)] {
            let c = cfg(n_q, 2, 256);
            let (store, _, dec, _) = build(&c, 5);
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store);
            let e = decode(&cx, cx.constant(random(&[n, 256], 6)), &dec).unwrap();
            assert_eq!(e.shape(), vec![n_q, 256]);
        }
    }

    #[test]
    fn zero_queries_and_tubelets_give_identical_outputs() {
        let c = cfg(5, 2, 32);
        let (store, _, dec, _) = build(&c, 7);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let e = decode(&cx, cx.constant(Tensor::zeros([3, 32])), &dec).unwrap().value();
        for q in 1..5 {
            assert_eq!(&e.data()[q * 32..(q + 1) * 32], &e.data()[..32]);
        }
    }

    #[test]
    fn heads_respect_their_ranges() {
        let c = cfg(6, 1, 32);
        let (store, _, _, heads) = build(&c, 8);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = predict_heads(&cx, cx.constant(random(&[6, 32], 9).map(|v| 5.0 * v)), &heads).unwrap();
        for p in out.predictions().unwrap() {
            assert!(p.human.iter().chain(&p.object).all(|&v| v > 0.0 && v < 1.0));
            assert!((p.class_prob.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(p.class_prob.len(), 5);
            assert_eq!(p.action_prob.len(), 6);
        }
    }

    #[test]
    fn zero_heads_are_uninformative() {
        let c = cfg(2, 1, 8);
        let (mut store, _, _, heads) = build(&c, 10);
        for id in [heads.class.w, heads.action.w] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = predict_heads(&cx, cx.constant(Tensor::zeros([2, 8])), &heads).unwrap();
        for p in out.predictions().unwrap() {
            assert!(p.action_prob.iter().all(|&v| v == 0.5));
            assert!(p.class_prob.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn dump_line_lists_confident_actions() {
        let p = HoiPrediction {
            human: [0.5; 4],
            object: [0.25; 4],
            class_prob: vec![0.1, 0.7, 0.2],
            action_prob: vec![0.9, 0.1, 0.6],
        };
        let line = p.dump_line(0.5);
        assert!(line.contains("class 1 0.7000"));
        assert!(line.ends_with("actions [0:0.9000 2:0.6000]"));
    }
}
