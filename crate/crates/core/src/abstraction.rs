//! Spatial token abstraction: window partitions over regular and offset
//! sample grids, windowed attention blocks, 2x2 token agglomeration and
//! attention cost accounting.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::frontend::{PosEncoding, PosMode};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{concat, Real, Tape, Tensor, Var};

/// Regular `S x S` sampling grid shared by every window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: usize,
    /// `(dy, dx)` in row-major order.
    pub offsets: Vec<[usize; 2]>,
}

impl WindowSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return invalid("window size must be positive");
        }
        let offsets = (0..size * size).map(|n| [n / size, n % size]).collect();
        Ok(Self { size, offsets })
    }

    pub fn n(&self) -> usize {
        self.size * self.size
    }
}

/// Window geometry of a `[T, H, W]` grid tiled by `S x S` windows, padded at
/// the bottom/right edge up to a multiple of `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Windows that share a valid-slot count, batched together for attention.
#[derive(Clone, Debug)]
pub struct WindowGroup {
    pub windows: Vec<usize>,
    pub valid: usize,
    /// `(window, slot)` pairs, window-major, slots in grid order.
    pub slots: Vec<(usize, usize)>,
}

impl WindowLayout {
    pub fn new(t: usize, h: usize, w: usize, spec: &WindowSpec) -> Self {
        let s = spec.size;
        Self { t, h, w, size: s, rows: h.div_ceil(s), cols: w.div_ceil(s) }
    }

    pub fn of_grid(shape: &[usize], spec: &WindowSpec) -> Result<Self> {
        if shape.len() != 4 {
            return invalid(format!("token grids are [T, H, W, C], got {shape:?}"));
        }
        Ok(Self::new(shape[0], shape[1], shape[2], spec))
    }

    pub fn count(&self) -> usize {
        self.t * self.rows * self.cols
    }

    pub fn n(&self) -> usize {
        self.size * self.size
    }

    fn origin(&self, win: usize) -> (usize, usize, usize) {
        let per = self.rows * self.cols;
        let (f, k) = (win / per, win % per);
        (f, (k / self.cols) * self.size, (k % self.cols) * self.size)
    }

    /// Grid position `(frame, row, col)` of slot `n`, `None` for padding.
    pub fn slot(&self, win: usize, n: usize) -> Option<(usize, usize, usize)> {
        let (f, r0, c0) = self.origin(win);
        let (r, c) = (r0 + n / self.size, c0 + n % self.size);
        (r < self.h && c < self.w).then_some((f, r, c))
    }

    /// Center cell of the window, clamped into the grid.
    pub fn anchor(&self, win: usize) -> [usize; 3] {
        let (f, r0, c0) = self.origin(win);
        [f, (r0 + self.size / 2).min(self.h - 1), (c0 + self.size / 2).min(self.w - 1)]
    }

    pub fn valid_slots(&self, win: usize) -> Vec<usize> {
        (0..self.n()).filter(|&n| self.slot(win, n).is_some()).collect()
    }

    pub fn groups(&self) -> Vec<WindowGroup> {
        let mut by_valid: BTreeMap<std::cmp::Reverse<usize>, WindowGroup> = BTreeMap::new();
        for win in 0..self.count() {
            let slots = self.valid_slots(win);
            let g = by_valid.entry(std::cmp::Reverse(slots.len())).or_insert_with(|| WindowGroup {
                windows: Vec::new(),
                valid: slots.len(),
                slots: Vec::new(),
            });
            g.windows.push(win);
            g.slots.extend(slots.into_iter().map(|n| (win, n)));
        }
        by_valid.into_values().collect()
    }

    fn flat(&self, (f, r, c): (usize, usize, usize)) -> usize {
        (f * self.h + r) * self.w + c
    }
}

/// Padded windows `[#windows, N, C]` with a validity mask per slot.
#[derive(Clone, Copy, Debug)]
pub struct Windows<'t, F: Real> {
    pub tokens: Var<'t, F>,
    pub layout: WindowLayout,
}

impl<F: Real> Windows<'_, F> {
    pub fn mask(&self) -> Vec<bool> {
        let l = self.layout;
        (0..l.count()).flat_map(|w| (0..l.n()).map(move |n| l.slot(w, n).is_some())).collect()
    }
}

fn flatten_grid<'t, F: Real>(grid: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = grid.shape();
    Ok(grid.reshape(&[s[0] * s[1] * s[2], s[3]])?)
}

/// Tokens at the listed slots: exact grid rows without offsets, bilinear
/// samples at the offset positions otherwise. Output `[slots, C]`.
fn sample_slots<'t, F: Real>(
    grid: Var<'t, F>,
    layout: &WindowLayout,
    offsets: Option<Var<'t, F>>,
    slots: &[(usize, usize)],
) -> Result<Var<'t, F>> {
    let pos: Vec<(usize, usize, usize)> = slots.iter().map(|&(w, n)| layout.slot(w, n).expect("valid slot")).collect();
    match offsets {
        None => {
            let idx = pos.iter().map(|&p| Some(layout.flat(p))).collect();
            Ok(flatten_grid(grid)?.gather_rows(Arc::new(idx))?)
        }
        Some(off) => {
            let n = layout.n();
            let flat_off = off.reshape(&[layout.count() * n, 2])?;
            let delta = flat_off.gather_rows(Arc::new(slots.iter().map(|&(w, s)| Some(w * n + s)).collect()))?;
            let base = Tensor::from_fn([slots.len(), 2], |i| {
                let (_, r, c) = pos[i / 2];
                F::from_f64(if i % 2 == 0 { r } else { c } as f64)
            });
            let p = grid.tape().constant(base).add(delta)?;
            let frames: Vec<usize> = pos.iter().map(|p| p.0).collect();
            Ok(Var::sample_bilinear(grid, p, &frames)?)
        }
    }
}

fn pad_windows<'t, F: Real>(
    sampled: Var<'t, F>,
    layout: WindowLayout,
    slots: &[(usize, usize)],
) -> Result<Windows<'t, F>> {
    let n = layout.n();
    let mut idx = vec![None; layout.count() * n];
    for (row, &(w, s)) in slots.iter().enumerate() {
        idx[w * n + s] = Some(row);
    }
    let c = sampled.shape()[1];
    let tokens = sampled.gather_rows(Arc::new(idx))?.reshape(&[layout.count(), n, c])?;
    Ok(Windows { tokens, layout })
}

fn all_valid_slots(layout: &WindowLayout) -> Vec<(usize, usize)> {
    (0..layout.count()).flat_map(|w| layout.valid_slots(w).into_iter().map(move |n| (w, n))).collect()
}

/// Groups the tokens of a `[T, H, W, C]` grid into `S x S` windows; slots
/// beyond the grid edge are zero and masked.
pub fn regular_window_partition<'t, F: Real>(grid: Var<'t, F>, spec: &WindowSpec) -> Result<Windows<'t, F>> {
    let layout = WindowLayout::of_grid(&grid.shape(), spec)?;
    let slots = all_valid_slots(&layout);
    pad_windows(sample_slots(grid, &layout, None, &slots)?, layout, &slots)
}

/// Like [`regular_window_partition`], but slot `n` of each window samples
/// the grid at its regular position plus the learned offset `[#windows, N, 2]`.
pub fn irregular_window_partition<'t, F: Real>(
    grid: Var<'t, F>,
    spec: &WindowSpec,
    offsets: Var<'t, F>,
) -> Result<Windows<'t, F>> {
    let layout = WindowLayout::of_grid(&grid.shape(), spec)?;
    check_offsets(&layout, offsets)?;
    let slots = all_valid_slots(&layout);
    pad_windows(sample_slots(grid, &layout, Some(offsets), &slots)?, layout, &slots)
}

fn check_offsets<F: Real>(layout: &WindowLayout, offsets: Var<'_, F>) -> Result<()> {
    if offsets.shape() != [layout.count(), layout.n(), 2] {
        return invalid(format!("offsets {:?} do not fit {} windows of {}", offsets.shape(), layout.count(), layout.n()));
    }
    Ok(())
}

/// 3x3 convolution that predicts `2N` offsets at each window anchor.
#[derive(Clone, Debug)]
pub struct OffsetConv {
    pub w: ParamId,
    pub b: ParamId,
    pub n: usize,
}

impl OffsetConv {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, c: usize, n: usize) -> Self {
        Self { w: init.zeros(&format!("{name}.w"), &[9 * c, 2 * n]), b: init.zeros(&format!("{name}.b"), &[2 * n]), n }
    }
}

/// Offsets `[#windows, N, 2]` in token units, `(row, col)` per slot.
pub fn predict_offsets<'t, F: Real>(
    cx: &Ctx<'t, F>,
    grid: Var<'t, F>,
    conv: &OffsetConv,
    layout: &WindowLayout,
) -> Result<Var<'t, F>> {
    if conv.n != layout.n() {
        return invalid(format!("offset conv predicts {} slots, windows have {}", conv.n, layout.n()));
    }
    let anchors: Vec<[usize; 3]> = (0..layout.count()).map(|w| layout.anchor(w)).collect();
    let y = grid.patches3x3(Arc::new(anchors))?.matmul(cx.p(conv.w))?.add(cx.p(conv.b))?;
    Ok(y.reshape(&[layout.count(), layout.n(), 2])?)
}

pub fn heads_for(c: usize) -> usize {
    (c / 32).max(1)
}

/// One selective-attention block.
#[derive(Clone, Debug)]
pub struct SBlock {
    pub offsets: OffsetConv,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub c: usize,
}

impl SBlock {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, c: usize, spec: &WindowSpec) -> Result<Self> {
        Ok(Self {
            offsets: OffsetConv::new(init, &format!("{name}.offset"), c, spec.n()),
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), c),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), c, heads_for(c))?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), c),
            mlp: Mlp::new(init, &format!("{name}.mlp"), c, 4 * c),
            c,
        })
    }
}

/// Intermediate values of one block, recorded for inspection.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// `[#windows, N, 2]`.
    pub offsets: Vec<f64>,
    /// `[#windows, heads, N, N]`; rows and columns of padded slots are zero.
    pub attention: Vec<f64>,
    pub windows: usize,
    pub n: usize,
    pub heads: usize,
}

fn pos_rows<F: Real>(pe: &PosEncoding, layout: &WindowLayout, slots: &[(usize, usize)]) -> Tensor<F> {
    let c = pe.c;
    Tensor::from_fn([slots.len(), c], |i| {
        let (w, n) = slots[i / c];
        let (f, r, col) = layout.slot(w, n).expect("valid slot");
        F::from_f64(pe.spatial_at(f, r, col)[i % c])
    })
}

/// Block forward over all frames of a `[T, H, W, C]` grid; each frame is
/// attended independently inside its own windows.
pub fn s_block_forward<'t, F: Real>(
    cx: &Ctx<'t, F>,
    grid: Var<'t, F>,
    block: &SBlock,
    spec: &WindowSpec,
    pe: &PosEncoding,
) -> Result<Var<'t, F>> {
    s_block_forward_traced(cx, grid, block, spec, pe, None)
}

pub fn s_block_forward_traced<'t, F: Real>(
    cx: &Ctx<'t, F>,
    grid: Var<'t, F>,
    block: &SBlock,
    spec: &WindowSpec,
    pe: &PosEncoding,
    mut trace: Option<&mut BlockTrace>,
) -> Result<Var<'t, F>> {
    let shape = grid.shape();
    let layout = WindowLayout::of_grid(&shape, spec)?;
    let c = shape[3];
    if c != block.c || [pe.t, pe.h, pe.w, pe.c] != shape[..] {
        return invalid(format!("block for {} channels and encoding {:?} applied to {shape:?}", block.c, [pe.t, pe.h, pe.w, pe.c]));
    }
    let offsets = predict_offsets(cx, grid, &block.offsets, &layout)?;
    let heads = block.attn.heads;
    let n = layout.n();
    if let Some(tr) = trace.as_deref_mut() {
        *tr = BlockTrace {
            offsets: offsets.value().to_f64_vec(),
            attention: vec![0.0; layout.count() * heads * n * n],
            windows: layout.count(),
            n,
            heads,
        };
    }
    let mut outputs = Vec::new();
    let mut order = Vec::with_capacity(layout.t * layout.h * layout.w);
    for g in layout.groups() {
        let sampled = sample_slots(grid, &layout, Some(offsets), &g.slots)?;
        let x = sampled.add(cx.constant(pos_rows(pe, &layout, &g.slots)))?;
        let x = block.ln1.forward(cx, x)?.reshape(&[g.windows.len(), g.valid, c])?;
        let (o, weights) = block.attn.forward_with_weights(cx, x, x, x)?;
        if let Some(tr) = trace.as_deref_mut() {
            let wv = weights.value();
            let v = g.valid;
            for (gi, &win) in g.windows.iter().enumerate() {
                let slots = &g.slots[gi * v..(gi + 1) * v];
                for h in 0..heads {
                    for (a, &(_, sa)) in slots.iter().enumerate() {
                        for (b, &(_, sb)) in slots.iter().enumerate() {
                            tr.attention[((win * heads + h) * n + sa) * n + sb] =
                                wv.data()[((gi * heads + h) * v + a) * v + b].as_f64();
                        }
                    }
                }
            }
        }
        outputs.push(o.reshape(&[g.slots.len(), c])?);
        order.extend(g.slots.iter().map(|&(w, s)| layout.flat(layout.slot(w, s).expect("valid slot"))));
    }
    let attended = if outputs.len() == 1 { outputs[0] } else { concat(&outputs, 0)? };
    let mut inverse = vec![None; order.len()];
    for (row, &p) in order.iter().enumerate() {
        inverse[p] = Some(row);
    }
    let attended = attended.gather_rows(Arc::new(inverse))?;
    let zhat = attended.add(flatten_grid(grid)?)?;
    let out = block.mlp.forward(cx, block.ln2.forward(cx, zhat)?)?.add(zhat)?;
    Ok(out.reshape(&shape)?)
}

/// The same block with plain global attention over each frame's tokens,
/// written directly without window bookkeeping. Offsets are not used.
pub fn global_block_forward<'t, F: Real>(
    cx: &Ctx<'t, F>,
    grid: Var<'t, F>,
    block: &SBlock,
    pe: &PosEncoding,
) -> Result<Var<'t, F>> {
    let shape = grid.shape();
    let (t, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
    let table = Tensor::from_fn([t, hw, c], |i| F::from_f64(pe.spatial[i]));
    let tokens = grid.reshape(&[t, hw, c])?;
    let x = block.ln1.forward(cx, tokens.add(cx.constant(table))?)?;
    let zhat = block.attn.forward(cx, x, x, x)?.add(tokens)?;
    let out = block.mlp.forward(cx, block.ln2.forward(cx, zhat)?)?.add(zhat)?;
    Ok(out.reshape(&shape)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// Offset 2x2 windows, output `2C`.
    IrWin2C,
    /// Regular 2x2 windows, output `2C`.
    RWin,
    /// Offset 2x2 windows, output `C`.
    IrWinC,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir-win-2c" | "ir-win-2C" => Ok(MergeMode::IrWin2C),
            "r-win" => Ok(MergeMode::RWin),
            "ir-win-c" | "ir-win-C" => Ok(MergeMode::IrWinC),
            _ => Err(Error::Config(format!("unknown merge mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMode::IrWin2C => "ir-win-2C",
            MergeMode::RWin => "r-win",
            MergeMode::IrWinC => "ir-win-C",
        })
    }
}

impl MergeMode {
    pub fn out_channels(self, c: usize) -> usize {
        match self {
            MergeMode::IrWinC => c,
            _ => 2 * c,
        }
    }
}

/// 2x2 token merge: sample, concatenate, project.
#[derive(Clone, Debug)]
pub struct Agglomerate {
    pub mode: MergeMode,
    pub offsets: Option<OffsetConv>,
    pub fc: Linear,
}

impl Agglomerate {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, c: usize, mode: MergeMode) -> Self {
        let offsets = (mode != MergeMode::RWin).then(|| OffsetConv::new(init, &format!("{name}.offset"), c, 4));
        Self { mode, offsets, fc: Linear::new(init, &format!("{name}.fc"), 4 * c, mode.out_channels(c)) }
    }
}

/// `[T, H, W, C]` to `[T, H/2, W/2, C']`.
pub fn agglomerate_tokens<'t, F: Real>(cx: &Ctx<'t, F>, grid: Var<'t, F>, agg: &Agglomerate) -> Result<Var<'t, F>> {
    let shape = grid.shape();
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return invalid(format!("agglomeration needs even extents, got {h}x{w}"));
    }
    let spec = WindowSpec::new(2)?;
    let layout = WindowLayout::new(t, h, w, &spec);
    let offsets = match &agg.offsets {
        Some(conv) => Some(predict_offsets(cx, grid, conv, &layout)?),
        None => None,
    };
    let slots = all_valid_slots(&layout);
    let sampled = sample_slots(grid, &layout, offsets, &slots)?;
    let merged = agg.fc.forward(cx, sampled.reshape(&[layout.count(), 4 * c])?)?;
    Ok(merged.reshape(&[t, h / 2, w / 2, agg.fc.d_out])?)
}

/// S-blocks of one stage followed by its agglomeration.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SBlock>,
    pub merge: Agglomerate,
    pub c: usize,
}

#[derive(Clone, Debug)]
pub struct AbstractionConfig {
    pub depths: Vec<usize>,
    pub window: usize,
    pub merge: MergeMode,
    pub pos: PosMode,
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        Self { depths: vec![1, 1, 3], window: 7, merge: MergeMode::IrWin2C, pos: PosMode::Factorized }
    }
}

#[derive(Clone, Debug)]
pub struct Abstraction {
    pub stages: Vec<Stage>,
    pub spec: WindowSpec,
    pub pos: PosMode,
}

impl Abstraction {
    pub fn new<F: Real>(init: &mut Init<'_, F>, c0: usize, cfg: &AbstractionConfig) -> Result<Self> {
        let spec = WindowSpec::new(cfg.window)?;
        let mut stages = Vec::new();
        let mut c = c0;
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let blocks = (0..depth)
                .map(|b| SBlock::new(init, &format!("stage{}.block{b}", s + 1), c, &spec))
                .collect::<Result<Vec<_>>>()?;
            let merge = Agglomerate::new(init, &format!("stage{}.merge", s + 1), c, cfg.merge);
            stages.push(Stage { blocks, merge, c });
            c = cfg.merge.out_channels(c);
        }
        Ok(Self { stages, spec, pos: cfg.pos })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.merge.fc.d_out)
    }
}

/// Instance tokens `[T, N, C]` from stage-1 grids `[T, H, W, C0]`.
pub fn run_abstraction<'t, F: Real>(cx: &Ctx<'t, F>, grids: Var<'t, F>, abs: &Abstraction) -> Result<Var<'t, F>> {
    let mut g = grids;
    for stage in &abs.stages {
        let s = g.shape();
        if s[3] != stage.c {
            return invalid(format!("stage expects {} channels, got {:?}", stage.c, s));
        }
        if !stage.blocks.is_empty() {
            let pe = PosEncoding::new(s[0], s[1], s[2], s[3], abs.pos)?;
            for block in &stage.blocks {
                g = s_block_forward(cx, g, block, &abs.spec, &pe)?;
            }
        }
        g = agglomerate_tokens(cx, g, &stage.merge)?;
    }
    let s = g.shape();
    Ok(g.reshape(&[s[0], s[1] * s[2], s[3]])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Global,
    IrregularWindow,
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Global => "global",
            AttentionMode::IrregularWindow => "irregular-window",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub mode: AttentionMode,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c: usize,
    pub flops: u64,
    pub wall_ms: f64,
}

impl FlopReport {
    pub fn csv_header() -> &'static str {
        "mode,H,W,T,C,flops,wall_ms"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{},{:.4}", self.mode, self.h, self.w, self.t, self.c, self.flops, self.wall_ms)
    }
}

/// Closed-form attention cost over `H*W*T` tokens of `C` channels.
pub fn flop_count(mode: AttentionMode, h: usize, w: usize, t: usize, c: usize, s_w: usize, k: usize) -> u64 {
    let tokens = (h * w * t) as u64;
    let c = c as u64;
    let proj = 4 * tokens * c * c;
    match mode {
        AttentionMode::Global => proj + 2 * tokens * tokens * c,
        AttentionMode::IrregularWindow => proj + 2 * ((s_w * s_w + k * k) as u64) * tokens * c,
    }
}

/// Times one attention forward pass (projections included) in `f32`:
/// global attention over all `H*W*T` tokens, or offset sampling plus
/// per-window attention. Returns the best of `reps` runs.
pub fn bench_attention(mode: AttentionMode, h: usize, w: usize, t: usize, c: usize, s_w: usize, reps: usize, seed: u64) -> Result<FlopReport> {
    let spec = WindowSpec::new(s_w)?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (attn, offsets) = {
        let mut init = Init { store: &mut store, rng: &mut rng };
        let attn = MultiHeadAttention::new(&mut init, "bench.attn", c, heads_for(c))?;
        let offsets = OffsetConv::new(&mut init, "bench.offset", c, spec.n());
        (attn, offsets)
    };
    let grid = Tensor::from_fn([t, h, w, c], |i| ((i * 7919 % 1000) as f32) / 1000.0 - 0.5);
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let tape = Tape::new();
        let cx = Ctx::frozen(&tape, &store);
        let g = cx.constant(grid.clone());
        let start = Instant::now();
        match mode {
            AttentionMode::Global => {
                let x = g.reshape(&[1, t * h * w, c])?;
                attn.forward(&cx, x, x, x)?;
            }
            AttentionMode::IrregularWindow => {
                let layout = WindowLayout::new(t, h, w, &spec);
                let off = predict_offsets(&cx, g, &offsets, &layout)?;
                for grp in layout.groups() {
                    let x = sample_slots(g, &layout, Some(off), &grp.slots)?.reshape(&[grp.windows.len(), grp.valid, c])?;
                    attn.forward(&cx, x, x, x)?;
                }
            }
        }
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(FlopReport { mode, h, w, t, c, flops: flop_count(mode, h, w, t, c, s_w, 3), wall_ms: best })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return invalid("slope needs at least two positive (x, y) pairs");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
