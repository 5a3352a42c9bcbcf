use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use covsegnet_core::config::{Mode, RunConfig};
use covsegnet_core::data::{self, DatasetManifest, Layout, Volume};
use covsegnet_core::metrics::{self, EvaluationReport, MetricScores};
use covsegnet_core::network::{self, count_specs, reference_total_millions};
use covsegnet_core::pipeline::{
    self, cross_validate, cross_validate_hybrid, evaluate_models, load_model, train_hybrid, train_single,
    Candidate, CheckpointSink, CurveRow, Hybrid, RunDir, Segmenter, SliceWise,
};
use covsegnet_core::{viz, Dims, Error, Model, NetworkConfig, Tensor, Variant};
use log::info;

use crate::{Cli, Command, DimsArg, Global};

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: missing or conflicting flags, unreadable config.
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Core(e) => e.fmt(f),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli.global, matches!(cli.command, Command::Train { .. }))?;
    let out = &cli.global.out;
    write_snapshot(out, &cfg)?;
    match cli.command {
        Command::Synth => synth(&cfg, out),
        Command::Train { phase1 } => train(&cfg, out, phase1),
        Command::Evaluate { checkpoints, compare } => evaluate(&cfg, out, &checkpoints, &compare),
        Command::Predict { input, checkpoint, checkpoint3d, gt, probabilities } => {
            predict(&cfg, out, &input, &checkpoint, checkpoint3d.as_deref(), gt.as_deref(), probabilities)
        }
        Command::Ablate { variants, levels, stages } => ablate(&cfg, out, variants, &levels, &stages),
        Command::Params { dims, levels, stages, base, breakdown } => params(out, dims, &levels, stages, base, breakdown),
        Command::Plot { run, image, pred, gt } => plot(out, run, image, pred, gt),
    }
}

/// Defaults (or the desk profile), then the config file, then `--set`
/// overrides, then `--seed`.
fn resolve_config(g: &Global, required: bool) -> Outcome<RunConfig> {
    let base = if g.desk { RunConfig::desk() } else { RunConfig::default() };
    let mut cfg = match &g.config {
        Some(p) if !p.is_file() => return usage(format!("config file {} does not exist", p.display())),
        Some(p) => RunConfig::load(p, base)?,
        None if required && !g.desk => return usage("train needs --config FILE or --desk"),
        None => base,
    };
    for kv in &g.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.snapshot");
    std::fs::write(&p, cfg.snapshot()).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Outcome<DatasetManifest> {
    let Some(root) = &cfg.data_root else {
        return usage("data.root is not set (pass --set data.root=DIR; `covsegnet synth` makes a corpus)");
    };
    Ok(data::open_dataset(root, Layout::new(cfg.mode.data_dims()))?)
}

fn with_folds(m: DatasetManifest, cfg: &RunConfig) -> Outcome<DatasetManifest> {
    if m.num_folds() == cfg.folds {
        return Ok(m);
    }
    Ok(data::make_folds(&m, cfg.folds, cfg.seed)?)
}

fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let m = data::synth_generate(out, &cfg.synth_config()?)?;
    println!("wrote {} {} samples to {}", m.len(), cfg.mode.data_dims(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, phase1: Option<PathBuf>) -> Outcome {
    let m = dataset(cfg)?;
    let run = RunDir::create(out)?;
    let sink = CheckpointSink::new(&run.checkpoints(), "");
    let curves = match cfg.mode {
        Mode::D2 | Mode::D3 => {
            if phase1.is_some() {
                return usage("--phase1 applies to hybrid runs only");
            }
            let dims = cfg.mode.data_dims();
            let r = train_single(&cfg.network(dims, 1), &m, &cfg.train_config(dims), &sink)?;
            println!(
                "trained {} {} network for {} iterations, best epoch {}",
                r.best.count_parameters(),
                dims,
                r.iterations,
                r.best_epoch.map_or("-".into(), |e| e.to_string())
            );
            r.curves
        }
        Mode::Hybrid => {
            let p1 = phase1.as_deref().map(load_model).transpose()?;
            let r = train_hybrid(
                &cfg.hybrid_config(),
                &m,
                &m.subjects(),
                &cfg.train_config(Dims::D2),
                &cfg.train_config(Dims::D3),
                p1,
                &sink,
            )?;
            let mut rows: Vec<CurveRow> = Vec::new();
            if let Some(p) = r.phase1 {
                rows.extend(p.curves.into_iter().map(|c| CurveRow { split: format!("phase1_{}", c.split), ..c }));
            }
            rows.extend(r.phase2.curves);
            println!("hybrid training done, best phase-2 epoch {}", r.phase2.best_epoch.map_or("-".into(), |e| e.to_string()));
            rows
        }
    };
    run.write_curves(&curves)?;
    viz::write_curve_plots(&run.root, &curves)?;
    println!("run written to {}", run.root.display());
    Ok(())
}

fn checkpoint_name(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".ckpt").map(str::to_string).unwrap_or(name)
}

fn parse_pairs(specs: &[String]) -> Outcome<Vec<(String, String)>> {
    specs
        .iter()
        .map(|s| match s.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
            _ => usage(format!("comparison `{s}` is not A:B")),
        })
        .collect()
}

fn evaluate(cfg: &RunConfig, out: &Path, checkpoints: &[PathBuf], compare: &[String]) -> Outcome {
    let m = with_folds(dataset(cfg)?, cfg)?;
    let report = if checkpoints.is_empty() {
        if !compare.is_empty() {
            return usage("--compare needs --checkpoint");
        }
        match cfg.mode {
            Mode::Hybrid => cross_validate_hybrid(
                &m,
                &cfg.hybrid_config(),
                &cfg.train_config(Dims::D2),
                &cfg.train_config(Dims::D3),
            )?,
            mode => {
                let dims = mode.data_dims();
                let net = cfg.network(dims, 1);
                let c = Candidate { name: net.variant.to_string(), network: net };
                cross_validate(&m, &[c], &cfg.train_config(dims), &[])?
            }
        }
    } else {
        let mut models: Vec<(String, Vec<Model<f32>>)> = Vec::new();
        for p in checkpoints {
            let name = checkpoint_name(p);
            if models.iter().any(|(n, _)| *n == name) {
                return usage(format!("two checkpoints are named `{name}`"));
            }
            models.push((name, vec![load_model(p)?]));
        }
        let pairs = if compare.is_empty() {
            models[1..].iter().map(|(n, _)| (n.clone(), models[0].0.clone())).collect()
        } else {
            parse_pairs(compare)?
        };
        evaluate_models(&m, &models, cfg.threshold, &cfg.loss, &pairs)?
    };
    let run = RunDir::create(out)?;
    run.write_report(&report)?;
    print!("{}", metric_table(&report));
    Ok(())
}

const TABLE_METRICS: [&str; 4] = ["dice", "iou", "sensitivity", "specificity"];

/// Rows of `model class mean±std...`, then one line per comparison.
fn metric_table(report: &EvaluationReport) -> String {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for a in &report.aggregates {
        if !keys.contains(&(a.model.as_str(), a.class.as_str())) {
            keys.push((&a.model, &a.class));
        }
    }
    let mut s = format!("{:<12} {:<9}", "model", "class");
    for m in TABLE_METRICS {
        let _ = write!(s, " {m:>15}");
    }
    let p_of = |model: &str| report.comparisons.iter().find(|c| c.a == model).map(|c| (c.b.as_str(), c.test.p_value));
    let reference = report.comparisons.first().map(|c| c.b.as_str());
    if let Some(r) = reference {
        let _ = write!(s, " {:>10}", format!("p vs {r}"));
    }
    s.push('\n');
    for (model, class) in keys {
        let _ = write!(s, "{model:<12} {class:<9}");
        for m in TABLE_METRICS {
            let cell = report
                .aggregate_for(model, class, m)
                .map_or("-".to_string(), |f| format!("{:.4}±{:.4}", f.mean, f.std));
            let _ = write!(s, " {cell:>15}");
        }
        if reference.is_some() {
            let cell = match p_of(model) {
                Some((b, p)) if Some(b) == reference => format!("{p:.4}"),
                _ => "-".into(),
            };
            let _ = write!(s, " {cell:>10}");
        }
        s.push('\n');
    }
    for c in &report.comparisons {
        let _ = writeln!(
            s,
            "{} vs {}: rank-sum p = {:.4}{} ({} vs {} samples)",
            c.a,
            c.b,
            c.test.p_value,
            if c.test.significant { " (significant)" } else { "" },
            c.a_values.len(),
            c.b_values.len()
        );
    }
    s
}

fn ablate(cfg: &RunConfig, out: &Path, variants: Option<Vec<String>>, levels: &[usize], stages: &[usize]) -> Outcome {
    let variants = match variants {
        Some(v) => {
            let parsed: Vec<Variant> =
                v.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_, _>>()?;
            if parsed.is_empty() {
                return usage("--variants needs at least one of V1..V7");
            }
            Some(parsed)
        }
        None => None,
    };
    let grid = !levels.is_empty() || !stages.is_empty();
    if variants.is_none() && !grid {
        return usage("ablate needs --variants or a --levels/--stages grid");
    }
    let dims = cfg.mode.data_dims();
    let m = match &cfg.data_root {
        Some(_) => dataset(cfg)?,
        None => {
            let root = out.join("data");
            info!("no data.root set, generating a synthetic corpus in {}", root.display());
            data::synth_generate(&root, &cfg.synth_config()?)?
        }
    };
    let m = with_folds(m, cfg)?;
    let tc = cfg.train_config(dims);
    let base = cfg.network(dims, 1);
    if let Some(vs) = variants {
        let cands: Vec<Candidate> =
            vs.iter().map(|v| Candidate { name: v.to_string(), network: base.clone().with_variant(*v) }).collect();
        let reference = if vs.contains(&Variant::V1) { Variant::V1 } else { vs[0] }.to_string();
        let pairs: Vec<(String, String)> =
            cands.iter().filter(|c| c.name != reference).map(|c| (c.name.clone(), reference.clone())).collect();
        let report = cross_validate(&m, &cands, &tc, &pairs)?;
        report.write(&out.join("ablation.json"), &out.join("ablation.csv"))?;
        print!("{}", metric_table(&report));
    }
    if grid {
        let levels = if levels.is_empty() { vec![base.levels] } else { levels.to_vec() };
        let stages = if stages.is_empty() { vec![base.stages] } else { stages.to_vec() };
        let mut cands = Vec::new();
        for &l in &levels {
            for &s in &stages {
                let network = NetworkConfig { levels: l, stages: s, ..base.clone() };
                network.validate()?;
                cands.push(Candidate { name: format!("L{l}S{s}"), network });
            }
        }
        let report = cross_validate(&m, &cands, &tc, &[])?;
        report.write(&out.join("sweep.json"), &out.join("sweep.csv"))?;
        print!("{}", sweep_table(&report, &levels, &stages));
    }
    Ok(())
}

/// Dice mean±std with levels as rows and stages as columns.
fn sweep_table(report: &EvaluationReport, levels: &[usize], stages: &[usize]) -> String {
    let class = report.aggregates.first().map_or("lesion", |a| a.class.as_str());
    let mut s = format!("{:<8}", "dice");
    for st in stages {
        let _ = write!(s, " {:>15}", format!("S={st}"));
    }
    s.push('\n');
    for l in levels {
        let _ = write!(s, "{:<8}", format!("L={l}"));
        for st in stages {
            let cell = report
                .aggregate_for(&format!("L{l}S{st}"), class, "dice")
                .map_or("-".to_string(), |f| format!("{:.4}±{:.4}", f.mean, f.std));
            let _ = write!(s, " {cell:>15}");
        }
        s.push('\n');
    }
    s
}

/// Largest deviation from a published total that still counts as a match.
const PARAM_TOLERANCE: f64 = 0.20;

fn params(out: &Path, dims: DimsArg, levels: &[usize], stages: usize, base: usize, breakdown: bool) -> Outcome {
    let families = match dims {
        DimsArg::D2 => vec![Dims::D2],
        DimsArg::D3 => vec![Dims::D3],
        DimsArg::Both => vec![Dims::D2, Dims::D3],
    };
    let mut csv = String::from("dims,levels,stages,base,params,reference_millions,deviation\n");
    println!("{:<4} {:>2} {:>2} {:>5} {:>12} {:>10} {:>10}", "dims", "L", "S", "base", "params", "published", "deviation");
    let mut flagged = 0;
    for d in families {
        let ls: Vec<usize> = match (levels.is_empty(), d) {
            (false, _) => levels.to_vec(),
            (true, Dims::D2) => (2..=5).collect(),
            (true, Dims::D3) => (2..=4).collect(),
        };
        for l in ls {
            if l == 0 {
                return usage("levels must be at least 1");
            }
            let side = 4usize << (l - 1);
            let input = match d {
                Dims::D2 => vec![side, side],
                Dims::D3 => vec![side, side, side],
            };
            let cfg = NetworkConfig::new(d, l, stages, base, input);
            let specs = network::trace(&cfg)?.specs;
            let total = count_specs(&specs);
            let reference = if base == 16 { reference_total_millions(d, l, stages) } else { None };
            let dev = reference.map(|r| total as f64 / (r * 1e6) - 1.0);
            let mark = match dev {
                Some(x) if x.abs() > PARAM_TOLERANCE => {
                    flagged += 1;
                    "  !"
                }
                _ => "",
            };
            println!(
                "{:<4} {l:>2} {stages:>2} {base:>5} {:>12} {:>10} {:>10}{mark}",
                d.to_string(),
                total,
                reference.map_or("-".into(), |r| format!("{r:.2}M")),
                dev.map_or("-".into(), |x| format!("{:+.1}%", 100.0 * x)),
            );
            let _ = writeln!(
                csv,
                "{d},{l},{stages},{base},{total},{},{}",
                reference.map_or(String::new(), |r| r.to_string()),
                dev.map_or(String::new(), |x| format!("{x:.4}"))
            );
            if breakdown {
                for mc in network::breakdown_specs(&specs) {
                    println!("    {:<10} {:>12}", mc.module, mc.params);
                }
            }
        }
    }
    if flagged > 0 {
        println!("{flagged} configuration(s) deviate more than {:.0}% from the published total", 100.0 * PARAM_TOLERANCE);
    }
    let p = out.join("params.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Output name next to `dir` with the volume extension of `like`.
fn volume_name(dir: &Path, stem: &str, like: &Path) -> PathBuf {
    let name = like.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = [".nii.gz", ".nii", ".raw"].into_iter().find(|e| name.ends_with(e)).unwrap_or(".raw");
    dir.join(format!("{stem}{ext}"))
}

fn predict(
    cfg: &RunConfig,
    out: &Path,
    input: &Path,
    checkpoint: &Path,
    checkpoint3d: Option<&Path>,
    gt: Option<&Path>,
    probabilities: bool,
) -> Outcome {
    let m1 = load_model(checkpoint)?;
    let m3 = checkpoint3d.map(load_model).transpose()?;
    if is_png(input) {
        if m1.config.dims != Dims::D2 || m3.is_some() {
            return usage("a PNG input needs a single 2D checkpoint");
        }
        let [h, w] = [m1.config.input_size[0], m1.config.input_size[1]];
        let (raw, ih, iw) = data::read_png(input, false)?;
        let img = data::preprocess_plane(&raw, ih, iw, [h, w], false);
        let x = Tensor::from_vec(vec![1, 1, h, w], img.clone())?;
        let p = pipeline::predict(&m1, &x, cfg.threshold)?;
        let binary = p.probabilities.channels() == 1;
        let mask: Vec<f32> = p.mask.data().iter().map(|&v| if binary { v * 255.0 } else { v }).collect();
        data::write_png_mask(&out.join("mask.png"), &mask, h, w)?;
        if probabilities {
            for c in 0..p.probabilities.channels() {
                let name = if binary { "probability.png".into() } else { format!("probability_c{c}.png") };
                data::write_png_intensity(&out.join(name), &p.probabilities.data()[c * h * w..(c + 1) * h * w], h, w)?;
            }
        }
        if let Some(g) = gt {
            let (raw, gh, gw) = data::read_png(g, true)?;
            let gtm = data::preprocess_plane(&raw, gh, gw, [h, w], true);
            report_overlay(&out.join("overlay.png"), &img, p.mask.data(), &gtm, [h, w])?;
        }
        println!("prediction written to {}", out.display());
        return Ok(());
    }
    let vol = data::read_volume(input)?;
    let (seg, target, depth): (Box<dyn Segmenter + '_>, [usize; 2], usize) = match (m1.config.dims, &m3) {
        (Dims::D2, None) => (Box::new(SliceWise(&m1)), [m1.config.input_size[0], m1.config.input_size[1]], vol.shape[0]),
        (Dims::D2, Some(m3)) if m3.config.dims == Dims::D3 => (
            Box::new(Hybrid { model2d: &m1, model3d: m3 }),
            [m1.config.input_size[0], m1.config.input_size[1]],
            m3.config.input_size[0],
        ),
        (Dims::D3, None) => {
            let s = &m1.config.input_size;
            (Box::new(&m1 as &Model<f32>), [s[1], s[2]], s[0])
        }
        _ => return usage("volume prediction takes a 2D, a 3D, or a 2D + 3D (--checkpoint3d) checkpoint"),
    };
    let v = data::standardize_depth(&data::preprocess_volume(&vol, target, false), depth, false)?;
    let [d, h, w] = v.shape;
    let x = Tensor::from_vec(vec![1, 1, d, h, w], v.data.clone())?;
    let p = pipeline::predict(seg.as_ref(), &x, cfg.threshold)?;
    data::write_volume(&volume_name(out, "mask", input), &Volume::new(v.shape, p.mask.data().to_vec())?)?;
    if probabilities {
        let n = d * h * w;
        for c in 0..p.probabilities.channels() {
            let stem = if p.probabilities.channels() == 1 { "probability".into() } else { format!("probability_c{c}") };
            let data = p.probabilities.data()[c * n..(c + 1) * n].to_vec();
            data::write_volume(&volume_name(out, &stem, input), &Volume::new(v.shape, data)?)?;
        }
    }
    if let Some(g) = gt {
        let gv = data::standardize_depth(&data::preprocess_volume(&data::read_volume(g)?, target, true), depth, true)?;
        let dir = out.join("overlays");
        let pm = p.mask.data();
        let mut total = metrics::ConfusionCounts::default();
        for z in 0..d {
            let r = z * h * w..(z + 1) * h * w;
            let path = dir.join(format!("slice_{z:03}.png"));
            viz::write_overlay(&path, &v.data[r.clone()], &labels_u8(&pm[r.clone()]), &labels_u8(&gv.data[r.clone()]), [h, w])?;
            total.add(&foreground_counts(&pm[r.clone()], &gv.data[r])?);
        }
        print_scores(&total.scores());
    }
    println!("prediction written to {}", out.display());
    Ok(())
}

/// Counts with any nonzero label as foreground.
fn foreground_counts(pred: &[f32], gt: &[f32]) -> Outcome<metrics::ConfusionCounts> {
    let fg = |v: &[f32]| v.iter().map(|&x| if x != 0.0 { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
    Ok(metrics::confusion_slices(&fg(pred), &fg(gt))?)
}

fn report_overlay(path: &Path, image: &[f32], pred: &[f32], gt: &[f32], extents: [usize; 2]) -> Outcome {
    viz::write_overlay(path, image, &labels_u8(pred), &labels_u8(gt), extents)?;
    print_scores(&foreground_counts(pred, gt)?.scores());
    Ok(())
}

fn print_scores(s: &MetricScores) {
    println!(
        "dice {:.4}  iou {:.4}  sensitivity {:.4}  specificity {:.4}",
        s.dice, s.iou, s.sensitivity, s.specificity
    );
}

fn labels_u8(v: &[f32]) -> Vec<u8> {
    v.iter().map(|&x| x.clamp(0.0, 255.0) as u8).collect()
}

fn plot(out: &Path, run: Option<PathBuf>, image: Option<PathBuf>, pred: Option<PathBuf>, gt: Option<PathBuf>) -> Outcome {
    if let Some(dir) = run {
        let path = dir.join("curves.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = pipeline::parse_curves_csv(&text)?;
        for p in viz::write_curve_plots(out, &rows)? {
            println!("wrote {}", p.display());
        }
        return Ok(());
    }
    let (Some(image), Some(pred), Some(gt)) = (image, pred, gt) else {
        return usage("plot needs --run DIR, or --image, --pred and --gt");
    };
    if is_png(&image) {
        let (mut img, h, w) = data::read_png(&image, false)?;
        data::normalize_plane(&mut img);
        let mask = |p: &Path| -> Outcome<Vec<f32>> {
            let (m, mh, mw) = data::read_png(p, true)?;
            Ok(data::resize_plane(&m, mh, mw, h, w, true))
        };
        let path = out.join("overlay.png");
        report_overlay(&path, &img, &mask(&pred)?, &mask(&gt)?, [h, w])?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let vol = data::read_volume(&image)?;
    let (pv, gv) = (data::read_volume(&pred)?, data::read_volume(&gt)?);
    if pv.shape != vol.shape || gv.shape != vol.shape {
        return Err(Error::Shape(format!(
            "volume {:?}, prediction {:?} and ground truth {:?} differ in shape",
            vol.shape, pv.shape, gv.shape
        ))
        .into());
    }
    let [d, h, w] = vol.shape;
    let dir = out.join("overlays");
    for z in 0..d {
        let mut img = vol.slice(z).to_vec();
        data::normalize_plane(&mut img);
        viz::write_overlay(&dir.join(format!("slice_{z:03}.png")), &img, &labels_u8(pv.slice(z)), &labels_u8(gv.slice(z)), [h, w])?;
    }
    println!("wrote {d} overlays to {}", dir.display());
    Ok(())
}
