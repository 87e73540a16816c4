use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tutor::abstraction::{bench_attention, log_log_slope, AttentionMode, FlopReport};
use tutor::config::{Precision, RunConfig};
use tutor::error::{Error, Result};
use tutor::eval::evaluate_map;
use tutor::linking::{link_long_video, link_tokens, AssignMode, TubeletSet};
use tutor::matching::hungarian_match;
use tutor::model::Tutor;
use tutor::nn::{read_checkpoint, write_checkpoint, Ctx, ParamStore};
use tutor::suites::{corrupted_suite, gradcheck_suites};
use tutor::synth::{generate_clip, generate_dataset, read_dataset, write_dataset, Action, Sample, SynthScenario};
use tutor::tensor::{Real, Tape};
use tutor::train::{predict_all, EpochMetrics, Trainer};

/// Calls `$f` instantiated at the configured scalar type.
macro_rules! typed {
    ($cfg:expr, $f:ident $(, $arg:expr)*) => {
        match $cfg.mode {
            Precision::F32 => $f::<f32>($cfg $(, $arg)*),
            Precision::F64 => $f::<f64>($cfg $(, $arg)*),
        }
    };
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let p = PathBuf::from(&cfg.out);
    fs::create_dir_all(&p)?;
    Ok(p)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    if cfg.checkpoint.is_empty() {
        Path::new(&cfg.out).join("checkpoint.bin")
    } else {
        PathBuf::from(&cfg.checkpoint)
    }
}

fn build<F: Real>(cfg: &RunConfig) -> Result<(Tutor, ParamStore<F>, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, store) = Tutor::new::<F>(&cfg.model, &mut rng)?;
    Ok((model, store, rng))
}

fn load_into<F: Real>(store: &mut ParamStore<F>, path: &Path) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    store.load_entries(&read_checkpoint(BufReader::new(f))?)
}

fn save<F: Real>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &store.to_entries())?;
    w.flush()?;
    Ok(())
}

fn check_scenario(cfg: &RunConfig, sc: &SynthScenario, dir: &Path) -> Result<()> {
    let m = &cfg.model;
    if (sc.t, sc.h, sc.w) != (m.frames, m.height, m.width) {
        return Err(Error::Config(format!(
            "dataset {} has {}x{}x{} clips, the model expects {}x{}x{}",
            dir.display(),
            sc.t,
            sc.h,
            sc.w,
            m.frames,
            m.height,
            m.width
        )));
    }
    Ok(())
}

fn split(cfg: &RunConfig, name: &str, start: u64, count: usize) -> Result<Vec<Sample>> {
    if cfg.data_dir.is_empty() {
        return generate_dataset(&cfg.scenario(), start, count);
    }
    let dir = Path::new(&cfg.data_dir).join(name);
    let (sc, samples) = read_dataset(&dir)?;
    check_scenario(cfg, &sc, &dir)?;
    Ok(samples)
}

fn dynamic_mask() -> Vec<bool> {
    Action::ALL.iter().map(|a| a.is_dynamic()).collect()
}

pub fn train(cfg: &RunConfig) -> Result<bool> {
    typed!(cfg, train_typed)
}

fn train_typed<F: Real>(cfg: &RunConfig) -> Result<bool> {
    let out = out_dir(cfg)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let train = split(cfg, "train", 0, cfg.train_clips)?;
    let eval = split(cfg, "eval", cfg.eval_offset, cfg.eval_clips)?;
    let (model, mut store, rng) = build::<F>(cfg)?;
    if !cfg.checkpoint.is_empty() {
        load_into(&mut store, Path::new(&cfg.checkpoint))?;
    }
    println!("training on {} clips, scoring on {}, {} parameters", train.len(), eval.len(), store.num_scalars());
    let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(csv, "{}", EpochMetrics::csv_header())?;
    csv.flush()?;
    println!("{}", EpochMetrics::csv_header());
    let mut trainer = Trainer::new(&model, store, cfg.train.clone(), cfg.loss.clone(), rng)?;
    trainer.iou_threshold = cfg.iou_threshold;
    let mut write_err = None;
    let rows = trainer.run(&train, &eval, &dynamic_mask(), |row| {
        println!("{}", row.csv_row());
        if let Err(e) = writeln!(csv, "{}", row.csv_row()).and_then(|_| csv.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let rows = rows?;
    let ck = out.join("checkpoint.bin");
    save(&trainer.store, &ck)?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!("loss {:.4} -> {:.4}, final mAP {:.4} (static {:.4}, dynamic {:.4})", first.loss.total, last.loss.total, last.map_all, last.map_static, last.map_dynamic);
    }
    println!("checkpoint written to {}", ck.display());
    Ok(true)
}

pub fn eval(cfg: &RunConfig) -> Result<bool> {
    typed!(cfg, eval_typed)
}

fn eval_typed<F: Real>(cfg: &RunConfig) -> Result<bool> {
    let out = out_dir(cfg)?;
    let samples = split(cfg, "eval", cfg.eval_offset, cfg.eval_clips)?;
    let (model, mut store, _) = build::<F>(cfg)?;
    load_into(&mut store, &checkpoint_path(cfg))?;
    let preds = predict_all(&model, &store, &samples, cfg.train.threads)?;
    let gts: Vec<_> = samples.iter().map(|s| s.gts.clone()).collect();
    let report = evaluate_map(&preds, &gts, model.cfg.n_obj, &dynamic_mask(), cfg.iou_threshold)?;

    let mut csv = String::from("clip_id,gt_idx,pred_idx,box_cost,obj_cost,act_cost\n");
    let mut dump = String::new();
    for (i, (s, p)) in samples.iter().zip(&preds).enumerate() {
        let m = hungarian_match(&s.gts, p, &cfg.loss)?;
        for (g, (&q, c)) in m.pairs.iter().zip(&m.costs).enumerate() {
            csv.push_str(&format!("{i},{g},{q},{:.6},{:.6},{:.6}\n", c.box_cost, c.obj_cost, c.act_cost));
        }
        for (q, pred) in p.iter().enumerate() {
            dump.push_str(&format!("clip {i} query {q} {}\n", pred.dump_line(cfg.score_threshold)));
        }
    }
    fs::write(out.join("eval_costs.csv"), &csv)?;
    fs::write(out.join("predictions.txt"), &dump)?;
    print!("{csv}");
    for (a, ap) in Action::ALL.iter().zip(&report.ap) {
        match ap {
            Some(v) => println!("ap {} {v:.4}", a.name()),
            None => println!("ap {} n/a", a.name()),
        }
    }
    println!("map_all {:.4}\nmap_static {:.4}\nmap_dynamic {:.4}", report.map_all, report.map_static, report.map_dynamic);
    Ok(true)
}

pub fn bench(cfg: &RunConfig) -> Result<bool> {
    let out = out_dir(cfg)?;
    let mut rows: Vec<FlopReport> = Vec::new();
    for mode in [AttentionMode::Global, AttentionMode::IrregularWindow] {
        for &s in &cfg.bench_sizes {
            rows.push(bench_attention(mode, s, s, cfg.bench_frames, cfg.bench_channels, cfg.model.abstraction.window, cfg.bench_reps, cfg.seed)?);
        }
    }
    let mut csv = format!("{}\n", FlopReport::csv_header());
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(out.join("bench.csv"), &csv)?;
    print!("{csv}");
    if cfg.bench_sizes.len() >= 2 {
        for mode in [AttentionMode::Global, AttentionMode::IrregularWindow] {
            let sel: Vec<_> = rows.iter().filter(|r| r.mode == mode).collect();
            let x: Vec<f64> = sel.iter().map(|r| (r.h * r.w * r.t) as f64).collect();
            let y: Vec<f64> = sel.iter().map(|r| r.wall_ms).collect();
            println!("slope {mode} {:.3}", log_log_slope(&x, &y)?);
        }
        let n = cfg.bench_sizes.len();
        println!("windowed/global wall time at the largest size {:.3}", rows[2 * n - 1].wall_ms / rows[n - 1].wall_ms);
    }
    Ok(true)
}

pub fn gradcheck(negative_control: bool) -> Result<bool> {
    let mut suites = gradcheck_suites();
    if negative_control {
        suites.push(corrupted_suite());
    }
    println!("suites run in f64");
    println!("{:<24} {:>9} {:>6} {:>12}  status", "suite", "tolerance", "points", "max_rel_err");
    let mut ok = true;
    for s in &suites {
        let r = s.run()?;
        let status = if r.passed() { "pass" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<24} {:>9.0e} {:>6} {:>12.3e}  {status}", r.name, r.tolerance, r.points, r.max_rel_error);
    }
    println!("{}", if ok { "all suites passed" } else { "some suites failed" });
    Ok(ok)
}

pub fn link_demo(cfg: &RunConfig, clip: usize) -> Result<bool> {
    typed!(cfg, link_demo_typed, clip)
}

fn link_demo_typed<F: Real>(cfg: &RunConfig, clip: usize) -> Result<bool> {
    let out = out_dir(cfg)?;
    let sample = if cfg.data_dir.is_empty() {
        let (clip, gts) = generate_clip(&cfg.scenario(), cfg.eval_offset + clip as u64)?;
        Sample { clip, gts }
    } else {
        let mut s = split(cfg, "eval", 0, 0)?;
        if clip >= s.len() {
            return Err(Error::Config(format!("clip {clip} is outside the {} held-out clips", s.len())));
        }
        s.swap_remove(clip)
    };
    let (model, mut store, _) = build::<F>(cfg)?;
    let ck = checkpoint_path(cfg);
    let source = if ck.exists() {
        load_into(&mut store, &ck)?;
        format!("checkpoint {}", ck.display())
    } else {
        "freshly initialized weights".to_string()
    };
    let tape = Tape::new();
    let cx = Ctx::frozen(&tape, &store);
    let z = model.instance_tokens(&cx, &sample.clip)?;
    let (gh, gw) = model.cfg.token_grid();
    let link = &model.cfg.link;
    let sets = if sample.clip.t > cfg.clip_length {
        link_long_video(&cx, z, cfg.clip_length, &model.linking, link)?
    } else {
        vec![link_tokens(&cx, z, &model.linking, link, None)?]
    };
    let mut text = format!("# {} frames, {gh}x{gw} tokens per frame, assignment {}, {source}\n", sample.clip.t, link.assign);
    for (k, set) in sets.iter().enumerate() {
        text.push_str(&describe(k, set, gw));
    }
    fs::write(out.join("link_demo.txt"), &text)?;
    print!("{text}");
    Ok(true)
}

/// Per-frame assignment table and the token trace of each tubelet.
fn describe<F: Real>(segment: usize, set: &TubeletSet<'_, F>, gw: usize) -> String {
    let Some(a) = &set.assignment else {
        return format!("segment {segment}: assignment {}, tokens are averaged over frames\n", AssignMode::None);
    };
    let n = a.n;
    let mut s = format!("segment {segment} exemplar frame {}\nframe query key similarity\n", a.exemplar);
    let mut keys = vec![vec![0usize; n]; a.frames.len()];
    for (k, &f) in a.frames.iter().enumerate() {
        let soft = &a.soft[k * n * n..(k + 1) * n * n];
        for i in 0..n {
            let j = match a.phi.get(k) {
                Some(phi) => phi[i],
                None => (0..n).fold(0, |b, j| if soft[i * n + j] > soft[i * n + b] { j } else { b }),
            };
            keys[k][i] = j;
            s.push_str(&format!("{f} {i} {j} {:.6}\n", soft[i * n + j]));
        }
    }
    let mut frames: Vec<(usize, Option<usize>)> = a.frames.iter().enumerate().map(|(k, &f)| (f, Some(k))).collect();
    frames.push((a.exemplar, None));
    frames.sort_unstable();
    for i in 0..n {
        let trace: Vec<String> = frames
            .iter()
            .map(|&(f, k)| {
                let j = k.map_or(i, |k| keys[k][i]);
                let mark = if k.is_none() { "*" } else { "" };
                format!("f{f}:({},{}){mark}", j / gw, j % gw)
            })
            .collect();
        s.push_str(&format!("tubelet {i}: {}\n", trace.join(" ")));
    }
    s
}

pub fn gen_data(cfg: &RunConfig) -> Result<bool> {
    let root = if cfg.data_dir.is_empty() { Path::new(&cfg.out).join("data") } else { PathBuf::from(&cfg.data_dir) };
    let sc = cfg.scenario();
    let train = generate_dataset(&sc, 0, cfg.train_clips)?;
    write_dataset(&root.join("train"), &sc, &train)?;
    let eval = generate_dataset(&sc, cfg.eval_offset, cfg.eval_clips)?;
    write_dataset(&root.join("eval"), &sc, &eval)?;
    let count = |s: &[Sample]| s.iter().map(|x| x.gts.len()).sum::<usize>();
    println!("wrote {} train clips ({} instances) and {} held-out clips ({} instances) under {}", train.len(), count(&train), eval.len(), count(&eval), root.display());
    Ok(true)
}
