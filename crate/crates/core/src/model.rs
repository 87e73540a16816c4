//! The assembled detector: stem, abstraction, linking, context, decoder
//! and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::abstraction::{run_abstraction, Abstraction, AbstractionConfig};
use crate::decoder::{decode, global_context_layer, predict_heads, ContextLayer, Decoder, DecoderConfig, HeadOutputs, Heads};
use crate::error::{invalid, Result};
use crate::frontend::{embed_clip, PosEncoding, PosMode, Stem, VideoClip, C0};
use crate::linking::{link_tokens, sample_gumbel, AssignMode, LinkConfig, LinkingParams, TubeletSet};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub abstraction: AbstractionConfig,
    pub link: LinkConfig,
    /// Gumbel noise on the similarity logits while training.
    pub gumbel_noise: bool,
    pub n_q: usize,
    pub decoder_layers: usize,
    pub n_obj: usize,
    pub n_act: usize,
    /// Standard deviation of the query-embedding init, zero for constant init.
    pub query_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 64,
            width: 64,
            abstraction: AbstractionConfig::default(),
            link: LinkConfig::default(),
            gumbel_noise: true,
            n_q: 8,
            decoder_layers: 6,
            n_obj: 4,
            n_act: 6,
            query_std: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 4 << self.abstraction.depths.len();
        if self.height % stride != 0 || self.width % stride != 0 {
            return invalid(format!("frame size {}x{} must be divisible by {stride}", self.height, self.width));
        }
        if self.link.assign != AssignMode::None && self.frames < 2 {
            return invalid("linking needs at least 2 frames");
        }
        if self.n_q == 0 || self.n_obj == 0 || self.n_act == 0 {
            return invalid("query and class counts must be positive");
        }
        if !(self.link.tau > 0.0) {
            return invalid(format!("tau must be positive, got {}", self.link.tau));
        }
        Ok(())
    }

    /// Instance-token grid `(h, w)` per frame.
    pub fn token_grid(&self) -> (usize, usize) {
        let s = 4 << self.abstraction.depths.len();
        (self.height / s, self.width / s)
    }
}

#[derive(Clone, Debug)]
pub struct Tutor {
    pub cfg: ModelConfig,
    pub stem: Stem,
    pub abstraction: Abstraction,
    pub linking: LinkingParams,
    pub context: ContextLayer,
    pub decoder: Decoder,
    pub heads: Heads,
    pub c: usize,
}

pub struct Forward<'t, F: Real> {
    pub outputs: HeadOutputs<'t, F>,
    pub tubelets: TubeletSet<'t, F>,
}

impl Tutor {
    /// Builds the architecture and its freshly initialized parameters.
    pub fn new<F: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        let stem = Stem::new(&mut init);
        let abstraction = Abstraction::new(&mut init, C0, &cfg.abstraction)?;
        let c = abstraction.out_channels();
        let linking = LinkingParams::new(&mut init, c, cfg.link.merge, cfg.frames);
        let context = ContextLayer::new(&mut init, c)?;
        let dcfg = DecoderConfig { n_q: cfg.n_q, layers: cfg.decoder_layers, c, n_obj: cfg.n_obj, n_act: cfg.n_act };
        let decoder = Decoder::new(&mut init, &dcfg)?;
        let heads = Heads::new(&mut init, &dcfg);
        if cfg.query_std > 0.0 {
            // uniform on [-a, a] has standard deviation a / sqrt(3)
            let a = cfg.query_std * 3f64.sqrt();
            let q = Tensor::from_fn([cfg.n_q, c], |_| F::from_f64(rng.gen_range(-a..a)));
            store.set(decoder.queries, q)?;
        }
        Ok((Self { cfg: cfg.clone(), stem, abstraction, linking, context, decoder, heads, c }, store))
    }

    /// Gumbel noise for one training forward, or `None` when disabled.
    pub fn sample_noise<F: Real>(&self, rng: &mut ChaCha8Rng) -> Option<Tensor<F>> {
        if !self.cfg.gumbel_noise || self.cfg.link.assign == AssignMode::None {
            return None;
        }
        let (h, w) = self.cfg.token_grid();
        Some(sample_gumbel(rng, self.cfg.frames - 1, h * w, self.cfg.link.noise_per_logit))
    }

    /// Instance tokens `[T, N, C]` ready for linking, temporal encoding
    /// included. Any clip length works here.
    pub fn instance_tokens<'t, F: Real>(&self, cx: &Ctx<'t, F>, clip: &VideoClip) -> Result<Var<'t, F>> {
        let grids = embed_clip(cx, clip, &self.stem)?;
        let z = run_abstraction(cx, grids, &self.abstraction)?;
        if self.abstraction.pos != PosMode::Factorized {
            // joint 3-D tables already carry time inside the blocks
            return Ok(z);
        }
        let s = z.shape();
        let (h, w) = self.cfg.token_grid();
        if h * w != s[1] {
            return invalid(format!("clip {}x{} does not give the model's {h}x{w} token grid", clip.h, clip.w));
        }
        let pe = PosEncoding::new(clip.t, h, w, self.c, PosMode::Factorized)?;
        Ok(z.add(cx.constant(pe.temporal_tensor()))?)
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, F>, clip: &VideoClip, noise: Option<&Tensor<F>>) -> Result<Forward<'t, F>> {
        if (clip.t, clip.h, clip.w) != (self.cfg.frames, self.cfg.height, self.cfg.width) {
            return invalid(format!(
                "clip {}x{}x{} does not match the model's {}x{}x{}",
                clip.t, clip.h, clip.w, self.cfg.frames, self.cfg.height, self.cfg.width
            ));
        }
        let z = self.instance_tokens(cx, clip)?;
        let tubelets = link_tokens(cx, z, &self.linking, &self.cfg.link, noise)?;
        let refined = global_context_layer(cx, tubelets.tokens, &self.context)?;
        let emb = decode(cx, refined, &self.decoder)?;
        let outputs = predict_heads(cx, emb, &self.heads)?;
        Ok(Forward { outputs, tubelets })
    }

    /// Parameters of the stem and the abstraction stages.
    pub fn is_backbone(name: &str) -> bool {
        name.starts_with("stem.") || name.starts_with("stage")
    }
}
