//! Parameter storage and the small set of layers the model is built from.

mod checkpoint;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};

use crate::error::{invalid, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return invalid(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Same names and shapes, values converted to another scalar type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(|v| v.cast()).collect() }
    }

    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| CheckpointEntry {
                name: n.clone(),
                shape: v.shape().to_vec(),
                values: v.data().iter().map(|x| x.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from checkpoint entries matched by name.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let by_name: HashMap<&str, &CheckpointEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != self.len() || entries.len() != self.len() {
            return invalid(format!("checkpoint has {} entries, model has {}", entries.len(), self.len()));
        }
        for i in 0..self.len() {
            let Some(e) = by_name.get(self.names[i].as_str()) else {
                return invalid(format!("checkpoint lacks {}", self.names[i]));
            };
            let t = Tensor::new(e.shape.clone(), e.values.iter().map(|&x| F::from_f64(x as f64)).collect())?;
            self.set(ParamId(i), t)?;
        }
        Ok(())
    }
}

/// Binds every parameter of a store to a tape for one forward pass.
pub struct Ctx<'t, F: Real> {
    tape: &'t Tape<F>,
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Real> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &ParamStore<F>) -> Self {
        let vars = store.values.iter().map(|v| tape.var(v.clone())).collect();
        Self { tape, vars }
    }

    /// Parameters enter as constants: no gradient is tracked for them.
    pub fn frozen(tape: &'t Tape<F>, store: &ParamStore<F>) -> Self {
        let vars = store.values.iter().map(|v| tape.constant(v.clone())).collect();
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(t)
    }

    /// Gradient per parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<Tensor<F>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Seeded parameter initializer.
pub struct Init<'a, F: Real> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Real> Init<'_, F> {
    /// Uniform Xavier/Glorot `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn([fan_in, fan_out], |_| F::from_f64(rng.gen_range(-limit..limit)));
        self.store.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| F::from_f64(rng.gen_range(-limit..limit)));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), F::one()))
    }
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.xavier(&format!("{name}.w"), d_in, d_out);
        let b = init.zeros(&format!("{name}.b"), &[d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn zeroed<F: Real>(init: &mut Init<'_, F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.zeros(&format!("{name}.w"), &[d_in, d_out]);
        let b = init.zeros(&format!("{name}.b"), &[d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.last() != Some(&self.d_in) {
            return invalid(format!("linear expects last axis {}, got {shape:?}", self.d_in));
        }
        let rows = x.value().numel() / self.d_in;
        let y = x.reshape(&[rows, self.d_in])?.matmul(cx.p(self.w))?.add(cx.p(self.b))?;
        let mut out = shape;
        *out.last_mut().unwrap() = self.d_out;
        Ok(y.reshape(&out)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        Self { gamma: init.ones(&format!("{name}.g"), &[dim]), beta: init.zeros(&format!("{name}.b"), &[dim]) }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(x.layer_norm(cx.p(self.gamma), cx.p(self.beta), F::from_f64(LN_EPS))?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, dim: usize, hidden: usize) -> Self {
        Self { fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden), fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim) }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        self.fc2.forward(cx, self.fc1.forward(cx, x)?.gelu()?)
    }
}

/// Scaled dot-product attention over `[B, L, C]` batches split into heads.
/// Returns the attended values `[B, Lq, C]` and the weights `[B*heads, Lq, Lk]`.
pub fn attend<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    heads: usize,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || v.shape() != ks {
        return invalid(format!("attention shapes q {qs:?} k {ks:?} v {:?}", v.shape()));
    }
    let (b, lq, c) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if heads == 0 || c % heads != 0 {
        return invalid(format!("{heads} heads do not divide {c} channels"));
    }
    let d = c / heads;
    let split = |x: Var<'t, F>, l: usize| -> Result<Var<'t, F>> {
        if heads == 1 {
            return Ok(x);
        }
        Ok(x.reshape(&[b, l, heads, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, l, d])?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scale = F::from_f64(1.0 / (d as f64).sqrt());
    let w = qh.matmul_t(kh, false, true)?.scale(scale)?.softmax(2)?;
    let o = w.matmul(vh)?;
    let o = if heads == 1 { o } else { o.reshape(&[b, heads, lq, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, c])? };
    Ok((o, w))
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return invalid(format!("{heads} heads do not divide {dim} channels"));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.o"), dim, dim),
            heads,
        })
    }

    /// `query [B, Lq, C]` attends over `key`/`value [B, Lk, C]`.
    pub fn forward<'t, F: Real>(
        &self,
        cx: &Ctx<'t, F>,
        query: Var<'t, F>,
        key: Var<'t, F>,
        value: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        Ok(self.forward_with_weights(cx, query, key, value)?.0)
    }

    /// Also returns the attention weights `[B*heads, Lq, Lk]`.
    pub fn forward_with_weights<'t, F: Real>(
        &self,
        cx: &Ctx<'t, F>,
        query: Var<'t, F>,
        key: Var<'t, F>,
        value: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let (q, k, v) = (self.q.forward(cx, query)?, self.k.forward(cx, key)?, self.v.forward(cx, value)?);
        let (o, w) = attend(q, k, v, self.heads)?;
        Ok((self.o.forward(cx, o)?, w))
    }
}
