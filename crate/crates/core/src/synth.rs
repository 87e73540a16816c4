//! Procedural toy clips of shapes interacting with a "human" rectangle.
//!
//! Static actions are fixed spatial relations with overlapping boxes. The
//! dynamic ones move the object horizontally through the same set of gaps
//! in different frame orders, so no single frame tells them apart.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::frontend::VideoClip;
use crate::linking::select_exemplar;
use crate::matching::HoiInstance;

pub const OBJECT_NAMES: [&str; 4] = ["square", "circle", "triangle", "diamond"];
const OBJECT_COLORS: [[f32; 3]; 4] = [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95], [0.95, 0.9, 0.1]];
const HUMAN_COLOR: [f32; 3] = [0.95, 0.7, 0.5];
const OVERLAP: f64 = 3.0;
const GAP0: f64 = 2.0;
const GAP_STEP: f64 = 4.0;
const RETRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Hold,
    Wear,
    Ride,
    Push,
    Pull,
    Throw,
}

impl Action {
    pub const ALL: [Action; 6] = [Action::Hold, Action::Wear, Action::Ride, Action::Push, Action::Pull, Action::Throw];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, Action::Push | Action::Pull | Action::Throw)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Hold => "hold",
            Action::Wear => "wear",
            Action::Ride => "ride",
            Action::Push => "push",
            Action::Pull => "pull",
            Action::Throw => "throw",
        }
    }

    /// Gap step used in each frame. Push moves away, pull is its reverse,
    /// throw reaches its widest gap on the exemplar frame.
    pub fn gap_steps(self, t: usize) -> Vec<usize> {
        let up: Vec<usize> = (0..t).collect();
        match self {
            Action::Push => up,
            Action::Pull => up.into_iter().rev().collect(),
            Action::Throw => {
                let mut s = up;
                s.swap(t / 2, t - 1);
                s
            }
            _ => vec![0; t],
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Config(format!("unknown action {s:?}")))
    }
}

/// Which actions a scenario draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSet {
    All,
    Static,
    Dynamic,
}

impl ActionSet {
    pub fn actions(self) -> Vec<Action> {
        Action::ALL
            .into_iter()
            .filter(|a| match self {
                ActionSet::All => true,
                ActionSet::Static => !a.is_dynamic(),
                ActionSet::Dynamic => a.is_dynamic(),
            })
            .collect()
    }
}

impl fmt::Display for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionSet::All => "all",
            ActionSet::Static => "static",
            ActionSet::Dynamic => "dynamic",
        })
    }
}

impl FromStr for ActionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ActionSet::All),
            "static" => Ok(ActionSet::Static),
            "dynamic" => Ok(ActionSet::Dynamic),
            _ => Err(Error::Config(format!("unknown action set {s:?}, expected all, static or dynamic"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScenario {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub max_instances: usize,
    pub actions: ActionSet,
}

impl Default for SynthScenario {
    fn default() -> Self {
        Self { seed: 0, t: 4, h: 64, w: 64, max_instances: 2, actions: ActionSet::All }
    }
}

impl SynthScenario {
    pub fn n_obj(&self) -> usize {
        OBJECT_NAMES.len()
    }

    pub fn n_act(&self) -> usize {
        Action::ALL.len()
    }

    pub fn dynamic_mask(&self) -> Vec<bool> {
        Action::ALL.iter().map(|a| a.is_dynamic()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 3 && self.actions != ActionSet::Static {
            return invalid("dynamic actions need at least 3 frames");
        }
        if self.h < 32 || self.w < 32 || self.h % 32 != 0 || self.w % 32 != 0 {
            return invalid(format!("frame size {}x{} must be a positive multiple of 32", self.h, self.w));
        }
        if self.max_instances == 0 {
            return invalid("max_instances must be at least 1");
        }
        Ok(())
    }
}

/// Pixel-space box `[x0, y0, w, h]`.
type PixBox = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    human: PixBox,
    obj_size: [f64; 2],
    class: usize,
    action: Action,
    side: f64,
    dy: f64,
}

impl Layout {
    fn object_at(&self, step: usize) -> PixBox {
        let [hx, hy, hw, hh] = self.human;
        let [ow, oh] = self.obj_size;
        let beside_y = hy + hh / 2.0 - oh / 2.0 + self.dy;
        let beside = |gap: f64| if self.side > 0.0 { hx + hw + gap } else { hx - gap - ow };
        match self.action {
            Action::Hold => [beside(-OVERLAP), beside_y, ow, oh],
            Action::Wear => [hx + hw / 2.0 - ow / 2.0, hy - oh + OVERLAP, ow, oh],
            Action::Ride => [hx + hw / 2.0 - ow / 2.0, hy + hh - OVERLAP, ow, oh],
            _ => [beside(GAP0 + GAP_STEP * step as f64), beside_y, ow, oh],
        }
    }

    fn objects(&self, t: usize) -> Vec<PixBox> {
        self.action.gap_steps(t).into_iter().map(|s| self.object_at(s)).collect()
    }

    fn footprint(&self, t: usize) -> PixBox {
        let mut lo = [self.human[0], self.human[1]];
        let mut hi = [self.human[0] + self.human[2], self.human[1] + self.human[3]];
        for b in self.objects(t) {
            lo = [lo[0].min(b[0]), lo[1].min(b[1])];
            hi = [hi[0].max(b[0] + b[2]), hi[1].max(b[1] + b[3])];
        }
        [lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]]
    }

    fn shifted(&self, dx: f64, dy: f64) -> Self {
        let mut l = self.clone();
        l.human[0] += dx;
        l.human[1] += dy;
        l
    }
}

fn normalized(b: &PixBox, w: usize, h: usize) -> [f64; 4] {
    [(b[0] + b[2] / 2.0) / w as f64, (b[1] + b[3] / 2.0) / h as f64, b[2] / w as f64, b[3] / h as f64]
}

fn disjoint(a: &PixBox, b: &PixBox, margin: f64) -> bool {
    a[0] + a[2] + margin <= b[0] || b[0] + b[2] + margin <= a[0] || a[1] + a[3] + margin <= b[1] || b[1] + b[3] + margin <= a[1]
}

fn inside_shape(class: usize, b: &PixBox, x: f64, y: f64) -> bool {
    let (u, v) = ((x - b[0]) / b[2], (y - b[1]) / b[3]);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    let (du, dv) = (u - 0.5, v - 0.5);
    match class {
        0 => true,
        1 => du * du + dv * dv <= 0.25,
        2 => du.abs() <= v / 2.0,
        _ => du.abs() + dv.abs() <= 0.5,
    }
}

fn paint(frame: &mut [f32], w: usize, b: &PixBox, color: [f32; 3], mut inside: impl FnMut(f64, f64) -> bool) {
    let h = frame.len() / (3 * w);
    let y0 = b[1].floor().max(0.0) as usize;
    let x0 = b[0].floor().max(0.0) as usize;
    let y1 = ((b[1] + b[3]).ceil() as usize).min(h);
    let x1 = ((b[0] + b[2]).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

fn sample_layout(rng: &mut ChaCha8Rng, actions: &[Action], w: f64, h: f64) -> Layout {
    let hw = rng.gen_range(0.13..0.18) * w;
    let hh = rng.gen_range(0.28..0.36) * h;
    let os = rng.gen_range(0.14..0.19) * w.min(h);
    Layout {
        human: [0.0, 0.0, hw, hh],
        obj_size: [os, os * rng.gen_range(0.9..1.1)],
        class: rng.gen_range(0..OBJECT_NAMES.len()),
        action: actions[rng.gen_range(0..actions.len())],
        side: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        dy: rng.gen_range(-0.15..0.15) * hh,
    }
}

/// Places `layouts` at random non-overlapping positions inside the frame.
fn place(rng: &mut ChaCha8Rng, layouts: &[Layout], t: usize, w: f64, h: f64) -> Option<Vec<Layout>> {
    let mut placed: Vec<Layout> = Vec::new();
    for l in layouts {
        let fp = l.footprint(t);
        if fp[2] + 2.0 > w || fp[3] + 2.0 > h {
            return None;
        }
        let mut ok = None;
        for _ in 0..RETRIES {
            let x = rng.gen_range(1.0..w - fp[2] - 1.0);
            let y = rng.gen_range(1.0..h - fp[3] - 1.0);
            let cand = l.shifted((x - fp[0]).round(), (y - fp[1]).round());
            let cfp = cand.footprint(t);
            if cfp[0] >= 0.0 && cfp[1] >= 0.0 && cfp[0] + cfp[2] <= w && cfp[1] + cfp[3] <= h
                && placed.iter().all(|p| disjoint(&p.footprint(t), &cfp, 2.0))
            {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

fn render(rng: &mut ChaCha8Rng, layouts: &[Layout], t: usize, h: usize, w: usize) -> Result<VideoClip> {
    let n = h * w * 3;
    let mut frames: Vec<f32> = (0..n).map(|_| 0.08 + rng.gen_range(-0.03..0.03f32)).collect();
    let background = frames.clone();
    for _ in 1..t {
        frames.extend_from_slice(&background);
    }
    for l in layouts {
        let objects = l.objects(t);
        for (f, ob) in objects.iter().enumerate() {
            let frame = &mut frames[f * n..(f + 1) * n];
            paint(frame, w, &l.human, HUMAN_COLOR, |_, _| true);
            paint(frame, w, ob, OBJECT_COLORS[l.class], |x, y| inside_shape(l.class, ob, x, y));
        }
    }
    VideoClip::new(t, h, w, 8.0, frames)
}

/// Deterministic clip `index` of the scenario with its annotations.
pub fn generate_clip(sc: &SynthScenario, index: u64) -> Result<(VideoClip, Vec<HoiInstance>)> {
    sc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    rng.set_stream(index);
    let actions = sc.actions.actions();
    let (w, h) = (sc.w as f64, sc.h as f64);
    let count = rng.gen_range(1..=sc.max_instances);
    let mut layouts = None;
    for _ in 0..RETRIES {
        let drawn: Vec<Layout> = (0..count).map(|_| sample_layout(&mut rng, &actions, w, h)).collect();
        if let Some(p) = place(&mut rng, &drawn, sc.t, w, h) {
            layouts = Some(p);
            break;
        }
    }
    let layouts = layouts.ok_or_else(|| Error::Invalid(format!("could not place {count} instances in clip {index}")))?;
    let clip = render(&mut rng, &layouts, sc.t, sc.h, sc.w)?;
    let q = select_exemplar(sc.t)?;
    let gts = layouts
        .iter()
        .map(|l| HoiInstance {
            human: normalized(&l.human, sc.w, sc.h),
            object: normalized(&l.objects(sc.t)[q], sc.w, sc.h),
            class: l.class,
            actions: Action::ALL.iter().map(|&a| a == l.action).collect(),
        })
        .collect();
    Ok((clip, gts))
}

/// Object centroid path of every instance, in normalized units, for
/// diagnostics and tests.
pub fn object_tracks(sc: &SynthScenario, index: u64) -> Result<Vec<(Action, Vec<[f64; 2]>)>> {
    sc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    rng.set_stream(index);
    let actions = sc.actions.actions();
    let count = rng.gen_range(1..=sc.max_instances);
    for _ in 0..RETRIES {
        let drawn: Vec<Layout> = (0..count).map(|_| sample_layout(&mut rng, &actions, sc.w as f64, sc.h as f64)).collect();
        if let Some(p) = place(&mut rng, &drawn, sc.t, sc.w as f64, sc.h as f64) {
            return Ok(p
                .iter()
                .map(|l| {
                    let track = l.objects(sc.t).iter().map(|b| { let n = normalized(b, sc.w, sc.h); [n[0], n[1]] }).collect();
                    (l.action, track)
                })
                .collect());
        }
    }
    invalid(format!("could not place {count} instances in clip {index}"))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: VideoClip,
    pub gts: Vec<HoiInstance>,
}

/// Pixels above this level belong to a drawn shape rather than the background.
const FOREGROUND: f32 = 0.2;
const BACKGROUND: f32 = 0.08;

/// Random horizontal flip plus an integer translation that keeps every
/// drawn pixel, in every frame, inside the frame. Boxes follow the pixels;
/// labels are unchanged since no action depends on left versus right.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng, max_shift: usize) -> Sample {
    let VideoClip { t, h, w, .. } = sample.clip;
    let src = &sample.clip.frames;
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let i = ((f * h + y) * w + x) * 3;
                if src[i..i + 3].iter().any(|&v| v > FOREGROUND) {
                    (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
                }
            }
        }
    }
    let flip = rng.gen_bool(0.5);
    if x1 <= x0 {
        return sample.clone();
    }
    let (x0, x1) = if flip { (w - x1, w - x0) } else { (x0, x1) };
    let m = max_shift as i64;
    let dx = rng.gen_range(-(x0 as i64).min(m)..=((w - x1) as i64).min(m));
    let dy = rng.gen_range(-(y0 as i64).min(m)..=((h - y1) as i64).min(m));
    let mut frames = vec![BACKGROUND; src.len()];
    for f in 0..t {
        for y in 0..h {
            let sy = y as i64 - dy;
            if !(0..h as i64).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let fx = x as i64 - dx;
                if !(0..w as i64).contains(&fx) {
                    continue;
                }
                let sx = if flip { w - 1 - fx as usize } else { fx as usize };
                let (o, i) = (((f * h + y) * w + x) * 3, ((f * h + sy as usize) * w + sx) * 3);
                frames[o..o + 3].copy_from_slice(&src[i..i + 3]);
            }
        }
    }
    let move_box = |b: [f64; 4]| {
        let cx = if flip { 1.0 - b[0] } else { b[0] };
        [cx + dx as f64 / w as f64, b[1] + dy as f64 / h as f64, b[2], b[3]]
    };
    let gts = sample.gts.iter().map(|g| HoiInstance { human: move_box(g.human), object: move_box(g.object), ..g.clone() }).collect();
    Sample { clip: VideoClip { frames, ..sample.clip.clone() }, gts }
}

pub fn generate_dataset(sc: &SynthScenario, start: u64, count: usize) -> Result<Vec<Sample>> {
    (start..start + count as u64).map(|i| generate_clip(sc, i).map(|(clip, gts)| Sample { clip, gts })).collect()
}

pub fn annotation_text(gts: &[HoiInstance]) -> String {
    let mut s = String::new();
    for g in gts {
        let b = |v: &[f64; 4]| format!("{} {} {} {}", v[0], v[1], v[2], v[3]);
        let bits: String = g.actions.iter().map(|&a| if a { '1' } else { '0' }).collect();
        s.push_str(&format!("human {} object {} class {} actions {bits}\n", b(&g.human), b(&g.object), g.class));
    }
    s
}

pub fn parse_annotations(text: &str, n_obj: usize, n_act: usize) -> Result<Vec<HoiInstance>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("annotation line {}: {line:?}", ln + 1));
        let p: Vec<&str> = line.split_whitespace().collect();
        if p.len() != 14 || p[0] != "human" || p[5] != "object" || p[10] != "class" || p[12] != "actions" {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let bx = |o: usize| -> Result<[f64; 4]> { Ok([num(p[o])?, num(p[o + 1])?, num(p[o + 2])?, num(p[o + 3])?]) };
        let actions = p[13].chars().map(|c| match c { '0' => Ok(false), '1' => Ok(true), _ => Err(bad()) }).collect::<Result<Vec<_>>>()?;
        let g = HoiInstance { human: bx(1)?, object: bx(6)?, class: p[11].parse().map_err(|_| bad())?, actions };
        g.validate(n_obj, n_act).map_err(|e| Error::Format(format!("annotation line {}: {e}", ln + 1)))?;
        out.push(g);
    }
    Ok(out)
}

/// Writes `clip_XXXXX.bin`, `clip_XXXXX.txt` and `manifest.txt` under `dir`.
pub fn write_dataset(dir: &Path, sc: &SynthScenario, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        s.clip.write_to(BufWriter::new(fs::File::create(dir.join(format!("clip_{i:05}.bin")))?))?;
        fs::write(dir.join(format!("clip_{i:05}.txt")), annotation_text(&s.gts))?;
    }
    let mut m = BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    writeln!(m, "clips {}", samples.len())?;
    writeln!(m, "frames {}", sc.t)?;
    writeln!(m, "height {}", sc.h)?;
    writeln!(m, "width {}", sc.w)?;
    writeln!(m, "seed {}", sc.seed)?;
    writeln!(m, "max_instances {}", sc.max_instances)?;
    writeln!(m, "action_set {}", sc.actions)?;
    writeln!(m, "objects {}", OBJECT_NAMES.join(" "))?;
    writeln!(m, "actions {}", Action::ALL.map(|a| a.name()).join(" "))?;
    writeln!(m, "dynamic {}", Action::ALL.map(|a| if a.is_dynamic() { "1" } else { "0" }).join(" "))?;
    m.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(SynthScenario, Vec<Sample>)> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut sc = SynthScenario::default();
    let mut clips = None;
    for line in manifest.lines() {
        let (k, v) = line.split_once(' ').ok_or_else(|| Error::Format(format!("manifest line {line:?}")))?;
        let num = || v.parse::<u64>().map_err(|_| Error::Format(format!("manifest value {line:?}")));
        match k {
            "clips" => clips = Some(num()? as usize),
            "frames" => sc.t = num()? as usize,
            "height" => sc.h = num()? as usize,
            "width" => sc.w = num()? as usize,
            "seed" => sc.seed = num()?,
            "max_instances" => sc.max_instances = num()? as usize,
            "action_set" => sc.actions = v.parse()?,
            "objects" if v != OBJECT_NAMES.join(" ") => return Err(Error::Format(format!("unsupported object vocabulary {v:?}"))),
            "actions" if v != Action::ALL.map(|a| a.name()).join(" ") => return Err(Error::Format(format!("unsupported action vocabulary {v:?}"))),
            _ => {}
        }
    }
    let clips = clips.ok_or_else(|| Error::Format("manifest lacks a clip count".into()))?;
    let mut samples = Vec::with_capacity(clips);
    for i in 0..clips {
        let clip = VideoClip::read_from(BufReader::new(fs::File::open(dir.join(format!("clip_{i:05}.bin")))?))?;
        let gts = parse_annotations(&fs::read_to_string(dir.join(format!("clip_{i:05}.txt")))?, sc.n_obj(), sc.n_act())?;
        samples.push(Sample { clip, gts });
    }
    Ok((sc, samples))
}
