//! Raw clips, the convolutional stem, and sine position tables.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, ParamId};
use crate::tensor::{Real, Tensor, Var};

/// Stem output channels.
pub const C0: usize = 32;
const STEM_HIDDEN: usize = 16;

/// `T x H x W x 3` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub fps: f32,
    pub frames: Vec<f32>,
}

impl VideoClip {
    pub fn new(t: usize, h: usize, w: usize, fps: f32, frames: Vec<f32>) -> Result<Self> {
        let clip = Self { t, h, w, fps, frames };
        clip.validate()?;
        Ok(clip)
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w, fps: 8.0, frames: vec![0.0; t * h * w * 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return invalid(format!("a clip needs at least 2 frames, got {}", self.t));
        }
        if self.h == 0 || self.w == 0 || self.h % 4 != 0 || self.w % 4 != 0 {
            return invalid(format!("frame size {}x{} is not divisible by the stem stride 4", self.h, self.w));
        }
        if self.frames.len() != self.t * self.h * self.w * 3 {
            return invalid(format!("clip holds {} values, expected {}", self.frames.len(), self.t * self.h * self.w * 3));
        }
        if let Some(v) = self.frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * self.h + y) * self.w + x) * 3;
        [self.frames[i], self.frames[i + 1], self.frames[i + 2]]
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_fn([self.t, self.h, self.w, 3], |i| F::from_f64(self.frames[i] as f64))
    }

    /// Copy with frames reordered: frame `k` of the result is `order[k]`.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.t || order.iter().any(|&o| o >= self.t) {
            return invalid(format!("bad frame order {order:?} for {} frames", self.t));
        }
        let n = self.h * self.w * 3;
        let frames = order.iter().flat_map(|&o| self.frames[o * n..(o + 1) * n].iter().copied()).collect();
        Ok(Self { frames, ..self.clone() })
    }

    /// Header line `T H W fps`, then little-endian `f32` pixels.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {} {}", self.t, self.h, self.w, self.fps)?;
        let mut buf = Vec::with_capacity(self.frames.len() * 4);
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad clip header {header:?}")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad clip extent {s:?}")));
        let (t, h, w) = (dim(parts[0])?, dim(parts[1])?, dim(parts[2])?);
        let fps: f32 = parts[3].parse().map_err(|_| Error::Format(format!("bad frame rate {:?}", parts[3])))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != t * h * w * 12 {
            return Err(Error::Format(format!("clip payload has {} bytes, expected {}", bytes.len(), t * h * w * 12)));
        }
        let frames = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Self::new(t, h, w, fps, frames)
    }
}

/// Two stride-2 3x3 convolutions with GELU between, then a LayerNorm.
#[derive(Clone, Debug)]
pub struct Stem {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm: LayerNorm,
}

impl Stem {
    pub fn new<F: Real>(init: &mut Init<'_, F>) -> Self {
        Self {
            w1: init.xavier("stem.conv1.w", 27, STEM_HIDDEN),
            b1: init.zeros("stem.conv1.b", &[STEM_HIDDEN]),
            w2: init.xavier("stem.conv2.w", 9 * STEM_HIDDEN, C0),
            b2: init.zeros("stem.conv2.b", &[C0]),
            norm: LayerNorm::new(init, "stem.norm", C0),
        }
    }
}

/// Stride-2 3x3 convolution of `[T, H, W, C]`, output `[T, H/2, W/2, C_out]`.
/// Output cell `(i, j)` is centered on input `(2i, 2j)`.
pub fn conv3x3_stride2<'t, F: Real>(x: Var<'t, F>, w: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (t, h, wd) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / 2, wd / 2);
    let mut centers = Vec::with_capacity(t * oh * ow);
    for f in 0..t {
        for i in 0..oh {
            for j in 0..ow {
                centers.push([f, 2 * i, 2 * j]);
            }
        }
    }
    let y = x.patches3x3(Arc::new(centers))?.matmul(w)?.add(b)?;
    let c_out = w.shape()[1];
    Ok(y.reshape(&[t, oh, ow, c_out])?)
}

/// Stage-1 token grids `[T, H/4, W/4, 32]` for a clip; frame `t` is row `t`.
pub fn embed_clip<'t, F: Real>(cx: &Ctx<'t, F>, clip: &VideoClip, stem: &Stem) -> Result<Var<'t, F>> {
    clip.validate()?;
    let x = cx.constant(clip.to_tensor());
    let h = conv3x3_stride2(x, cx.p(stem.w1), cx.p(stem.b1))?.gelu()?;
    stem.norm.forward(cx, conv3x3_stride2(h, cx.p(stem.w2), cx.p(stem.b2))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosMode {
    /// Separate row/column spatial table plus a temporal table.
    Factorized,
    /// One table over (row, column, time).
    Joint3d,
}

impl std::str::FromStr for PosMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2+1d" | "(2+1)d" | "factorized" => Ok(PosMode::Factorized),
            "3d" | "joint" => Ok(PosMode::Joint3d),
            _ => Err(Error::Config(format!("unknown position encoding {s:?}"))),
        }
    }
}

impl std::fmt::Display for PosMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PosMode::Factorized => "2+1d",
            PosMode::Joint3d => "3d",
        })
    }
}

/// Sine position tables for one stage geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoding {
    pub mode: PosMode,
    /// `[T, H, W, C]`; in factorized mode every frame carries the same table.
    pub spatial: Vec<f64>,
    /// `[T, C]`, added to instance tokens before linking.
    pub temporal: Vec<f64>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Writes the `dims` sine/cosine channels of one axis at `pos` into `out`.
fn sine_axis(pos: usize, dims: usize, out: &mut [f64]) {
    for k in 0..dims / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / dims as f64);
        let a = pos as f64 * freq;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
}

/// Channel split `(rows, cols, time)` for the spatial table.
fn axis_split(mode: PosMode, c: usize) -> Result<(usize, usize, usize)> {
    let split = match mode {
        PosMode::Factorized => (c / 2, c - c / 2, 0),
        PosMode::Joint3d => {
            let a = 2 * (c / 6);
            (a, a, c - 2 * a)
        }
    };
    if [split.0, split.1, split.2].iter().any(|d| d % 2 != 0) || split.0 == 0 {
        return invalid(format!("{c} channels cannot be split into even {mode} axis groups"));
    }
    Ok(split)
}

impl PosEncoding {
    pub fn new(t: usize, h: usize, w: usize, c: usize, mode: PosMode) -> Result<Self> {
        if c % 2 != 0 {
            return invalid(format!("temporal encoding needs an even channel count, got {c}"));
        }
        let (cr, cc, ct) = axis_split(mode, c)?;
        let mut spatial = vec![0.0; t * h * w * c];
        for f in 0..t {
            for r in 0..h {
                for col in 0..w {
                    let o = ((f * h + r) * w + col) * c;
                    let cell = &mut spatial[o..o + c];
                    sine_axis(r, cr, &mut cell[..cr]);
                    sine_axis(col, cc, &mut cell[cr..cr + cc]);
                    if ct > 0 {
                        sine_axis(f, ct, &mut cell[cr + cc..]);
                    }
                }
            }
        }
        let mut temporal = vec![0.0; t * c];
        for f in 0..t {
            sine_axis(f, c, &mut temporal[f * c..(f + 1) * c]);
        }
        Ok(Self { mode, spatial, temporal, t, h, w, c })
    }

    pub fn spatial_at(&self, f: usize, r: usize, col: usize) -> &[f64] {
        let o = ((f * self.h + r) * self.w + col) * self.c;
        &self.spatial[o..o + self.c]
    }

    pub fn temporal_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_fn([self.t, 1, self.c], |i| F::from_f64(self.temporal[i]))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;

    fn stem_store(seed: u64) -> (ParamStore<f64>, Stem) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem::new(&mut Init { store: &mut store, rng: &mut rng });
        (store, stem)
    }

    fn random_clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::new(t, h, w, 8.0, (0..t * h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn stem_output_is_quarter_resolution() {
        let (store, stem) = stem_store(1);
        for (t, h, w) in [(4, 64, 64), (2, 32, 32)] {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store);
            let g = embed_clip(&cx, &random_clip(t, h, w, 2), &stem).unwrap();
            assert_eq!(g.shape(), vec![t, h / 4, w / 4, 32]);
        }
    }

    #[test]
    fn zero_clip_gives_zero_grid() {
        let (store, stem) = stem_store(3);
        let tape = Tape::new();
        let g = embed_clip(&Ctx::new(&tape, &store), &VideoClip::zeros(2, 16, 16), &stem).unwrap();
        assert!(g.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_geometry_is_rejected() {
        assert!(VideoClip::new(2, 30, 32, 8.0, vec![0.0; 2 * 30 * 32 * 3]).is_err());
        assert!(VideoClip::new(1, 32, 32, 8.0, vec![0.0; 32 * 32 * 3]).is_err());
        assert!(VideoClip::new(2, 4, 4, 8.0, vec![1.5; 96]).is_err());
    }

    #[test]
    fn four_pixel_shift_moves_grid_one_token() {
        let (store, stem) = stem_store(4);
        let clip = random_clip(2, 32, 32, 5);
        let mut shifted = clip.clone();
        for t in 0..2 {
            for y in 0..32 {
                for x in 0..32 {
                    let src = if x >= 4 { clip.pixel(t, y, x - 4) } else { [0.0; 3] };
                    let i = ((t * 32 + y) * 32 + x) * 3;
                    shifted.frames[i..i + 3].copy_from_slice(&src);
                }
            }
        }
        let run = |c: &VideoClip| {
            let tape = Tape::new();
            embed_clip(&Ctx::new(&tape, &store), c, &stem).unwrap().value()
        };
        let (a, b) = (run(&clip), run(&shifted));
        for t in 0..2 {
            for r in 1..7 {
                for col in 2..7 {
                    for ch in 0..32 {
                        let va = a.data()[((t * 8 + r) * 8 + col - 1) * 32 + ch];
                        let vb = b.data()[((t * 8 + r) * 8 + col) * 32 + ch];
                        assert!((va - vb).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn clip_file_roundtrip() {
        let clip = random_clip(2, 8, 4, 6);
        let mut bytes = Vec::new();
        clip.write_to(&mut bytes).unwrap();
        assert_eq!(VideoClip::read_from(&bytes[..]).unwrap(), clip);
    }

    #[test]
    fn origin_is_sine_zero_cosine_one() {
        let pe = PosEncoding::new(2, 4, 4, 32, PosMode::Factorized).unwrap();
        let cell = pe.spatial_at(0, 0, 0);
        for k in 0..16 {
            assert_eq!(cell[2 * k], 0.0);
            assert_eq!(cell[2 * k + 1], 1.0);
        }
        assert_eq!(&pe.temporal[..2], &[0.0, 1.0]);
    }

    #[test]
    fn encodings_are_deterministic() {
        for mode in [PosMode::Factorized, PosMode::Joint3d] {
            assert_eq!(PosEncoding::new(3, 5, 6, 32, mode).unwrap(), PosEncoding::new(3, 5, 6, 32, mode).unwrap());
        }
    }

    #[test]
    fn swapping_axes_swaps_channel_halves() {
        let pe = PosEncoding::new(1, 8, 8, 32, PosMode::Factorized).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let (a, b) = (pe.spatial_at(0, r, c), pe.spatial_at(0, c, r));
                assert_eq!(&a[..16], &b[16..]);
                assert_eq!(&a[16..], &b[..16]);
            }
        }
    }

    #[test]
    fn norms_are_constant_and_values_bounded() {
        for mode in [PosMode::Factorized, PosMode::Joint3d] {
            let pe = PosEncoding::new(4, 6, 5, 64, mode).unwrap();
            let norms: Vec<f64> = pe.spatial.chunks(64).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            assert!(norms.iter().all(|n| (n - norms[0]).abs() < 1e-6));
            assert!(pe.spatial.iter().chain(&pe.temporal).all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn joint_mode_encodes_time_spatially() {
        let pe = PosEncoding::new(3, 2, 2, 32, PosMode::Joint3d).unwrap();
        assert_ne!(pe.spatial_at(0, 1, 1), pe.spatial_at(2, 1, 1));
        assert_eq!(&pe.spatial_at(0, 1, 1)[..20], &pe.spatial_at(2, 1, 1)[..20]);
    }

    #[test]
    fn odd_split_is_an_error() {
        assert!(PosEncoding::new(2, 2, 2, 6, PosMode::Factorized).is_err());
        assert!(PosEncoding::new(2, 2, 2, 7, PosMode::Joint3d).is_err());
    }
}
