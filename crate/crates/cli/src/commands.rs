//! Subcommand implementations. Each writes its human-readable output to
//! `out` and returns whether its checks passed.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use refseg_core::dataset::{
    assemble, foreground_histogram, is_valid_scene_id, load_manifest, relative_path, save_manifest,
    split_by_scene, verdict_counts, Manifest, Scene, Split,
};
use refseg_core::metrics::{evaluate_dirs, per_sample_csv};
use refseg_core::raster::{
    load_label_map, load_rgb, resample_labels, resample_rgb, save_rgb, tile_crops, TileSpec,
};
use refseg_core::synth::{render_palette, synth_scene};
use refseg_lgce::checks::{run_suite, SuiteOptions};

use crate::args::{
    EvaluateArgs, GenerateArgs, LgceCheckArgs, SplitArgs, StatsArgs, SynthArgs, TileArgs,
};
use crate::config::RunConfig;

/// Successful runs either pass (exit 0) or report a failed check (exit 1).
/// Errors map to exit 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Passed => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn dir_of(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

pub fn synth(args: &SynthArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let tax = cfg.taxonomy(args.taxonomy.as_deref())?;
    ensure!(args.count > 0, "--count must be positive");
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let map = synth_scene(&tax, args.side, seed).map_err(anyhow::Error::msg)?;
        let name = format!("scene-{i:03}.png");
        let labels = args.out.join("labels");
        let images = args.out.join("images");
        std::fs::create_dir_all(&labels)?;
        std::fs::create_dir_all(&images)?;
        map.save_png(&labels.join(&name))?;
        save_rgb(&render_palette(&map, seed), &images.join(&name))?;
    }
    writeln!(out, "wrote {} scenes of {}x{} to {}", args.count, args.side, args.side, args.out.display())?;
    Ok(Outcome::Passed)
}

pub fn tile(args: &TileArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let tax = cfg.taxonomy(args.taxonomy.as_deref())?;
    let map = load_label_map(&args.labels, &tax)?;
    let image = args.image.as_deref().map(load_rgb).transpose()?;
    if let Some(img) = &image {
        ensure!(
            (img.width() as usize, img.height() as usize) == (map.width(), map.height()),
            "image is {}x{} but labels are {}x{}",
            img.width(),
            img.height(),
            map.width(),
            map.height()
        );
    }
    let spec = TileSpec {
        window: args.window,
        stride: args.stride,
        output_side: args.output_side,
    };
    let crops = tile_crops((map.width(), map.height()), &spec)?;
    let prefix = match &args.prefix {
        Some(p) => p.clone(),
        None => args
            .labels
            .file_stem()
            .and_then(|s| s.to_str())
            .context("label path has no usable file stem")?
            .to_string(),
    };
    std::fs::create_dir_all(args.out.join("labels"))?;
    if image.is_some() {
        std::fs::create_dir_all(args.out.join("images"))?;
    }
    for (i, rect) in crops.iter().enumerate() {
        let name = format!("{prefix}-{i:03}.png");
        resample_labels(&map.crop(*rect)?, spec.output_side)?.save_png(&args.out.join("labels").join(&name))?;
        if let Some(img) = &image {
            let c = image::imageops::crop_imm(img, rect.x as u32, rect.y as u32, rect.side as u32, rect.side as u32)
                .to_image();
            save_rgb(&resample_rgb(&c, spec.output_side), &args.out.join("images").join(&name))?;
        }
    }
    writeln!(out, "{} crops of {}px -> {}px", crops.len(), spec.window, spec.output_side)?;
    Ok(Outcome::Passed)
}

/// Scenes of a directory laid out as `labels/<id>.png` plus
/// `images/<id>.png`, sorted by id. Manifest paths are made relative to
/// `manifest_dir`.
pub fn load_scenes(dir: &Path, manifest_dir: &Path, tax: &refseg_core::taxonomy::Taxonomy) -> Result<Vec<Scene>> {
    let labels_dir = dir.join("labels");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&labels_dir)
        .with_context(|| format!("reading scene directory {}", labels_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        bail!("no scenes: {} contains no .png label maps", labels_dir.display());
    }
    paths
        .iter()
        .map(|label_path| {
            let id = label_path
                .file_stem()
                .and_then(|s| s.to_str())
                .filter(|s| is_valid_scene_id(s))
                .with_context(|| format!("{} is not a valid scene id", label_path.display()))?
                .to_string();
            let image_path = dir.join("images").join(format!("{id}.png"));
            ensure!(image_path.is_file(), "scene {id} has no image at {}", image_path.display());
            Ok(Scene {
                labels: load_label_map(label_path, tax).with_context(|| format!("scene {id}"))?,
                image_path: relative_path(&image_path, manifest_dir),
                label_path: relative_path(label_path, manifest_dir),
                id,
            })
        })
        .collect()
}

pub fn generate(args: &GenerateArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let tax = cfg.taxonomy(args.taxonomy.as_deref())?;
    let predicate = cfg.predicate(&args.predicate.section())?;
    let manifest_path = args.out.join(MANIFEST_FILE);
    if manifest_path.exists() && !args.force {
        bail!("{} already exists; pass --force to regenerate", manifest_path.display());
    }
    let scenes = load_scenes(&args.scenes, &args.out, &tax)?;
    let masks = args.out.join("masks");
    if args.force && masks.exists() {
        std::fs::remove_dir_all(&masks).with_context(|| format!("clearing {}", masks.display()))?;
    }
    std::fs::create_dir_all(&args.out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
    let (manifest, summary) = pool.install(|| assemble(&scenes, &tax, &predicate, &args.out))?;
    save_manifest(&manifest, &manifest_path)?;
    writeln!(
        out,
        "scenes: {}  triplets: {}  dropped-empty: {}\nmanifest: {}",
        summary.scenes,
        summary.triplets,
        summary.dropped_empty,
        manifest_path.display()
    )?;
    Ok(Outcome::Passed)
}

/// Re-expresses relative record paths written for `from` as paths
/// relative to `to`.
pub fn rebase_manifest(m: &mut Manifest, from: &Path, to: &Path) {
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = relative_path(&from.join(&*p), to);
        }
    };
    for r in &mut m.records {
        rebase(&mut r.image_path);
        rebase(&mut r.label_path);
        rebase(&mut r.mask_path);
    }
}

pub fn split(args: &SplitArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let fractions = match args.fractions.as_deref() {
        None => None,
        Some(&[a, b, c]) => Some([a, b, c]),
        Some(f) => bail!("--fractions takes exactly three values (train,val,test), got {}", f.len()),
    };
    let (fractions, seed) = cfg.split(fractions, args.seed)?;
    let manifest = load_manifest(&args.manifest)?;
    ensure!(!manifest.records.is_empty(), "{} has no records", args.manifest.display());
    let mut split = split_by_scene(&manifest, fractions, seed)?;
    split.check_scene_disjoint()?;
    let target = args.out.clone().unwrap_or_else(|| args.manifest.clone());
    rebase_manifest(&mut split, dir_of(&args.manifest), dir_of(&target));
    save_manifest(&split, &target)?;
    writeln!(out, "{:<6} {:>7} {:>9}", "split", "scenes", "triplets")?;
    for s in Split::ALL {
        let recs: Vec<_> = split.records.iter().filter(|r| r.split == Some(s)).collect();
        let scenes: std::collections::BTreeSet<&str> = recs.iter().map(|r| r.scene_id.as_str()).collect();
        writeln!(out, "{:<6} {:>7} {:>9}", s.as_str(), scenes.len(), recs.len())?;
    }
    writeln!(out, "manifest: {}", target.display())?;
    Ok(Outcome::Passed)
}

pub fn stats(args: &StatsArgs, _cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let manifest = load_manifest(&args.manifest)?;
    ensure!(!manifest.records.is_empty(), "{} has no records", args.manifest.display());
    let hist = foreground_histogram(&manifest, args.bin_width)?;
    writeln!(out, "foreground ratio, {} triplets", hist.total())?;
    write!(out, "{}", hist.render_bars(40))?;
    let (all, per) = verdict_counts(&manifest);
    writeln!(out, "\n{:<11} {:>8} {:>8} {:>8}", "split", "pending", "keep", "discard")?;
    for (name, c) in per.iter().chain([(&"all".to_string(), &all)]) {
        writeln!(out, "{:<11} {:>8} {:>8} {:>8}", name, c.pending, c.keep, c.discard)?;
    }
    match &args.csv {
        Some(p) => write_file(p, &hist.to_csv())?,
        None => write!(out, "\n{}", hist.to_csv())?,
    }
    Ok(Outcome::Passed)
}

pub fn evaluate(args: &EvaluateArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    let split = match args.split.as_str() {
        "all" => None,
        s => Some(Split::parse(s).with_context(|| format!("unknown split {s:?}; use train, val, test or all"))?),
    };
    let thresholds = cfg.thresholds(args.thresholds.as_deref())?;
    let rule = cfg.rule(args.inclusive);
    let manifest = load_manifest(&args.manifest)?;
    let manifest_dir = dir_of(&args.manifest);
    let (report, rows) = evaluate_dirs(&args.pred, &manifest, manifest_dir, split, &thresholds, rule)?;
    let report_dir = args.out.clone().unwrap_or_else(|| manifest_dir.join("eval"));
    write_file(&report_dir.join("report.csv"), &report.to_csv())?;
    write_file(&report_dir.join("per_sample.csv"), &per_sample_csv(&rows))?;
    write!(out, "{}", report.to_table())?;
    Ok(Outcome::Passed)
}

pub fn lgce_check(args: &LgceCheckArgs, _cfg: &RunConfig, out: &mut dyn Write) -> Result<Outcome> {
    ensure!(args.trials > 0 && args.grad_seeds > 0, "--trials and --grad-seeds must be positive");
    let mut opts = SuiteOptions {
        seed: args.seed,
        trials: args.trials,
        grad_seeds: args.grad_seeds,
        ..SuiteOptions::default()
    };
    opts.grad.analytic_fault = args.inject_grad_fault;
    let report = run_suite(&opts);
    write!(out, "{}", report.to_table())?;
    let passed = report.all_passed();
    writeln!(out, "{}", if passed { "all checks passed" } else { "some checks FAILED" })?;
    Ok(if passed { Outcome::Passed } else { Outcome::CheckFailed })
}
