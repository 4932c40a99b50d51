//! Triplet manifests: assembly from scenes, scene-disjoint splitting,
//! verdict replay and corpus statistics.
//!
//! A manifest is JSON Lines. Line 1 is a header carrying the predicate
//! config and taxonomy hash the masks were generated with; every further
//! line is one [`TripletRecord`]. Paths inside records are relative to the
//! manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprgen::{enumerate_expressions, Expression};
use crate::maskgen::{generate_mask, MaskGenError, SpatialPredicateConfig};
use crate::raster::{BinaryMask, LabelMap, RasterError};
use crate::taxonomy::Taxonomy;

pub const MANIFEST_FORMAT: &str = "refseg-manifest/1";

/// Published corpus figures, kept for documentation and split-policy
/// fixtures: (triplets, scenes) overall and per split.
pub mod reference {
    pub const TRIPLETS: usize = 4420;
    pub const SCENES: usize = 285;
    pub const TRAIN: (usize, usize) = (2172, 151);
    pub const VAL: (usize, usize) = (431, 31);
    pub const TEST: (usize, usize) = (1817, 103);

    /// Scene shares of the published train/val/test split.
    pub fn scene_fractions() -> [f64; 3] {
        [TRAIN.1, VAL.1, TEST.1].map(|n| n as f64 / SCENES as f64)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("scene {scene:?} appears in both {first:?} and {second:?}")]
    SplitOverlap {
        scene: String,
        first: Split,
        second: Split,
    },
    #[error("{id}: mask file {path} is missing")]
    MissingMaskFile { id: String, path: PathBuf },
    #[error("{id}: stored foreground ratio {stored} but mask has {actual}")]
    StaleForegroundRatio { id: String, stored: f64, actual: f64 },
    #[error("duplicate triplet id {0}")]
    DuplicateId(String),
    #[error("unknown triplet id {0}")]
    UnknownTripletId(String),
    #[error("need at least {needed} scenes for the requested split, have {available}")]
    TooFewScenes { needed: usize, available: usize },
    #[error("invalid split fractions {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("bin width must be in (0, 1], got {0}")]
    InvalidBinWidth(f64),
    #[error("no scenes to assemble")]
    NoScenes,
    #[error("invalid scene id {0:?}: use letters, digits, '-', '_' or '.'")]
    InvalidSceneId(String),
    #[error("scene {scene}: {source}")]
    MaskGen {
        scene: String,
        #[source]
        source: MaskGenError,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    #[default]
    Pending,
    Keep,
    Discard,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pending => "pending",
            Verdict::Keep => "keep",
            Verdict::Discard => "discard",
        }
    }

    pub fn parse(s: &str) -> Option<Verdict> {
        [Verdict::Pending, Verdict::Keep, Verdict::Discard]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

/// Human decision on one triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Discard,
}

impl From<Decision> for Verdict {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Keep => Verdict::Keep,
            Decision::Discard => Verdict::Discard,
        }
    }
}

/// One line of the append-only verdict log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub id: String,
    pub verdict: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// UTC seconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub scene_id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub mask_path: PathBuf,
    pub expression: Expression,
    pub split: Option<Split>,
    pub foreground_ratio: f64,
    pub verdict: Verdict,
}

/// Settings the masks on disk were generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub predicate: SpatialPredicateConfig,
    pub taxonomy_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    snapshot: ConfigSnapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<TripletRecord>,
    pub snapshot: ConfigSnapshot,
}

impl Manifest {
    pub fn scene_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.scene_id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&TripletRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// First scene found in two different splits, if any.
    pub fn check_scene_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            let Some(split) = r.split else { continue };
            match seen.get(r.scene_id.as_str()) {
                Some(&first) if first != split => {
                    return Err(DatasetError::SplitOverlap {
                        scene: r.scene_id.clone(),
                        first,
                        second: split,
                    })
                }
                _ => {
                    seen.insert(&r.scene_id, split);
                }
            }
        }
        Ok(())
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    /// Id and scene-split invariants.
    pub fn validate(&self) -> Result<()> {
        self.check_unique_ids()?;
        self.check_scene_disjoint()
    }

    /// Re-reads every mask under `base` and compares its foreground ratio
    /// with the stored value.
    pub fn verify_masks(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            let path = base.join(&r.mask_path);
            if !path.exists() {
                return Err(DatasetError::MissingMaskFile {
                    id: r.id.clone(),
                    path,
                });
            }
            let actual = BinaryMask::load_png(&path)?.foreground_ratio();
            if actual != r.foreground_ratio {
                return Err(DatasetError::StaleForegroundRatio {
                    id: r.id.clone(),
                    stored: r.foreground_ratio,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// One labelled scene ready for triplet generation.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub labels: LabelMap,
    /// Paths as they should appear in the manifest.
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AssembleSummary {
    pub scenes: usize,
    pub triplets: usize,
    pub dropped_empty: usize,
}

pub fn is_valid_scene_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// File-name-safe form of an expression text.
pub fn slug(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn triplet_id(scene_id: &str, expr: &Expression) -> String {
    format!("{scene_id}--{}", slug(&expr.text))
}

/// Non-empty masks for every enumerated expression, in enumeration order,
/// plus the number of empty ones that were dropped.
pub fn scene_triplets(
    labels: &LabelMap,
    tax: &Taxonomy,
    exprs: &[Expression],
    cfg: &SpatialPredicateConfig,
) -> std::result::Result<(Vec<(Expression, BinaryMask)>, usize), MaskGenError> {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for e in exprs {
        let mask = generate_mask(labels, tax, e, cfg)?;
        if mask.is_empty() {
            dropped += 1;
        } else {
            kept.push((e.clone(), mask));
        }
    }
    Ok((kept, dropped))
}

/// Generates masks for all scenes (in parallel on the current rayon pool),
/// writes them under `out_dir/masks/<scene>/` and returns the manifest
/// with every verdict pending and no split assigned.
pub fn assemble(
    scenes: &[Scene],
    tax: &Taxonomy,
    cfg: &SpatialPredicateConfig,
    out_dir: &Path,
) -> Result<(Manifest, AssembleSummary)> {
    if scenes.is_empty() {
        return Err(DatasetError::NoScenes);
    }
    let mut seen = HashSet::new();
    for s in scenes {
        if !is_valid_scene_id(&s.id) || !seen.insert(s.id.as_str()) {
            return Err(DatasetError::InvalidSceneId(s.id.clone()));
        }
    }
    cfg.validate().map_err(|source| DatasetError::MaskGen {
        scene: String::new(),
        source,
    })?;
    let exprs = enumerate_expressions(tax);

    let per_scene: Vec<Result<(Vec<TripletRecord>, usize)>> = scenes
        .par_iter()
        .map(|scene| {
            let (kept, dropped) = scene_triplets(&scene.labels, tax, &exprs, cfg).map_err(
                |source| DatasetError::MaskGen {
                    scene: scene.id.clone(),
                    source,
                },
            )?;
            let mut records = Vec::with_capacity(kept.len());
            for (expr, mask) in kept {
                let mask_path = PathBuf::from("masks")
                    .join(&scene.id)
                    .join(format!("{}.png", slug(&expr.text)));
                mask.save_png(&out_dir.join(&mask_path))?;
                records.push(TripletRecord {
                    id: triplet_id(&scene.id, &expr),
                    scene_id: scene.id.clone(),
                    image_path: scene.image_path.clone(),
                    label_path: scene.label_path.clone(),
                    mask_path,
                    expression: expr,
                    split: None,
                    foreground_ratio: mask.foreground_ratio(),
                    verdict: Verdict::Pending,
                });
            }
            Ok((records, dropped))
        })
        .collect();

    let mut summary = AssembleSummary {
        scenes: scenes.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for r in per_scene {
        let (recs, dropped) = r?;
        summary.dropped_empty += dropped;
        records.extend(recs);
    }
    summary.triplets = records.len();
    let manifest = Manifest {
        records,
        snapshot: ConfigSnapshot {
            predicate: *cfg,
            taxonomy_hash: tax.content_hash(),
        },
    };
    Ok((manifest, summary))
}

/// Scenes per split: floor of each share, then the remainder goes to the
/// largest fractional parts (ties to the earlier split). A split with a
/// positive fraction that ends up empty borrows one scene from the
/// largest split.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidFractions(fractions));
    }
    let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(DatasetError::TooFewScenes {
            needed: nonzero,
            available: n,
        });
    }
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Assigns whole scenes to train/val/test. Scene ids are sorted, shuffled
/// with a ChaCha8 stream seeded by `seed`, then cut by [`split_counts`].
pub fn split_by_scene(m: &Manifest, fractions: [f64; 3], seed: u64) -> Result<Manifest> {
    let mut scenes: Vec<&str> = m.scene_ids().into_iter().collect();
    let counts = split_counts(scenes.len(), fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    let mut it = scenes.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for scene in it.by_ref().take(count) {
            assignment.insert(scene, split);
        }
    }
    let mut out = m.clone();
    for r in &mut out.records {
        r.split = Some(assignment[r.scene_id.as_str()]);
    }
    out.check_scene_disjoint()?;
    Ok(out)
}

/// Replays `log` in order; the last event for an id wins.
pub fn apply_verdicts(m: &Manifest, log: &[VerdictEvent]) -> Result<Manifest> {
    let index: HashMap<&str, usize> = m
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut out = m.clone();
    for ev in log {
        let &i = index
            .get(ev.id.as_str())
            .ok_or_else(|| DatasetError::UnknownTripletId(ev.id.clone()))?;
        out.records[i].verdict = ev.verdict.into();
    }
    Ok(out)
}

/// Export view: discarded records always dropped, pending ones dropped
/// unless `include_pending`.
pub fn export_view(m: &Manifest, include_pending: bool) -> Manifest {
    Manifest {
        records: m
            .records
            .iter()
            .filter(|r| match r.verdict {
                Verdict::Keep => true,
                Verdict::Pending => include_pending,
                Verdict::Discard => false,
            })
            .cloned()
            .collect(),
        snapshot: m.snapshot.clone(),
    }
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.validate()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: MANIFEST_FORMAT.to_string(),
        snapshot: m.snapshot.clone(),
    };
    let write = |w: &mut BufWriter<File>, line: String| -> std::io::Result<()> {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")
    };
    write(&mut w, serde_json::to_string(&header).expect("header serializes")).map_err(io_err(path))?;
    for r in &m.records {
        write(&mut w, serde_json::to_string(r).expect("record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses and validates a manifest; mask paths are checked for existence
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
        }
        None => return Err(parse_err(1, "empty manifest".into())),
    };
    if header.format != MANIFEST_FORMAT {
        return Err(parse_err(1, format!("unsupported format {:?}", header.format)));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push(rec);
    }
    let m = Manifest {
        records,
        snapshot: header.snapshot,
    };
    m.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &m.records {
        let mask = base.join(&r.mask_path);
        if !mask.exists() {
            return Err(DatasetError::MissingMaskFile {
                id: r.id.clone(),
                path: mask,
            });
        }
    }
    Ok(m)
}

/// Appends one event and syncs it to disk before returning.
pub fn append_verdict(path: &Path, event: &VerdictEvent) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut line = serde_json::to_string(event).expect("event serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// A missing log file is an empty log.
pub fn load_verdict_log(path: &Path) -> Result<Vec<VerdictEvent>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins over `[0, 1]` of width `bin_width`, left-closed right-open
    /// except the last, which is closed. A width that does not divide 1
    /// leaves a narrower final bin.
    pub fn new(values: impl IntoIterator<Item = f64>, bin_width: f64) -> Result<Histogram> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(DatasetError::InvalidBinWidth(bin_width));
        }
        let raw = 1.0 / bin_width;
        let n = if (raw - raw.round()).abs() < 1e-9 {
            raw.round() as usize
        } else {
            raw.ceil() as usize
        };
        let mut bin_edges: Vec<f64> = (0..n).map(|i| i as f64 * bin_width).collect();
        bin_edges.push(1.0);
        let mut counts = vec![0u64; n];
        for v in values {
            let idx = bin_edges.partition_point(|&e| e <= v).saturating_sub(1).min(n - 1);
            counts[idx] += 1;
        }
        Ok(Histogram { bin_edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{:.6},{:.6},{}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                c
            ));
        }
        out
    }

    /// One line per bin with a proportional bar of at most `width` chars.
    pub fn render_bars(&self, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let len = (c as usize * width).div_ceil(max as usize);
            out.push_str(&format!(
                "[{:.3}, {:.3}{} {:>7} {}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                if i + 1 == self.counts.len() { "]" } else { ")" },
                c,
                "#".repeat(len)
            ));
        }
        out
    }
}

pub fn foreground_histogram(m: &Manifest, bin_width: f64) -> Result<Histogram> {
    Histogram::new(m.records.iter().map(|r| r.foreground_ratio), bin_width)
}

/// Per-split verdict tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerdictCounts {
    pub pending: usize,
    pub keep: usize,
    pub discard: usize,
}

impl VerdictCounts {
    fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Pending => self.pending += 1,
            Verdict::Keep => self.keep += 1,
            Verdict::Discard => self.discard += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.pending + self.keep + self.discard
    }
}

/// Overall and per-split (`"unassigned"` for records without a split)
/// verdict counts.
pub fn verdict_counts(m: &Manifest) -> (VerdictCounts, BTreeMap<String, VerdictCounts>) {
    let mut all = VerdictCounts::default();
    let mut per: BTreeMap<String, VerdictCounts> = BTreeMap::new();
    for r in &m.records {
        all.add(r.verdict);
        let key = r.split.map_or("unassigned", Split::as_str).to_string();
        per.entry(key).or_default().add(r.verdict);
    }
    (all, per)
}

/// `path` expressed relative to `base`, both resolved against the current
/// directory first. Falls back to the absolute path on a different root.
pub fn relative_path(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| {
        std::path::absolute(p)
            .map(|p| normalize_components(&p))
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let (path, base) = (abs(path), abs(base));
    let pc: Vec<Component> = path.components().collect();
    let bc: Vec<Component> = base.components().collect();
    if pc.first() != bc.first() {
        return path;
    }
    let common = pc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &pc[common..] {
        out.push(c);
    }
    out
}

fn normalize_components(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn record(id: &str, scene: &str, ratio: f64) -> TripletRecord {
        TripletRecord {
            id: id.into(),
            scene_id: scene.into(),
            image_path: "images/x.png".into(),
            label_path: "labels/x.png".into(),
            mask_path: format!("masks/{id}.png").into(),
            expression: Expression {
                text: "road".into(),
                category: "road".into(),
                attribute: None,
                relation: None,
            },
            split: None,
            foreground_ratio: ratio,
            verdict: Verdict::Pending,
        }
    }

    fn manifest(scenes: usize, per_scene: usize) -> Manifest {
        let mut records = Vec::new();
        for s in 0..scenes {
            for k in 0..per_scene {
                records.push(record(&format!("s{s:03}-{k}"), &format!("s{s:03}"), 0.1));
            }
        }
        Manifest {
            records,
            snapshot: ConfigSnapshot {
                predicate: SpatialPredicateConfig::default(),
                taxonomy_hash: "0".into(),
            },
        }
    }

    #[test]
    fn split_counts_policy() {
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        let f = [151.0 / 285.0, 31.0 / 285.0, 103.0 / 285.0];
        assert_eq!(split_counts(285, f).unwrap(), [151, 31, 103]);
        assert_eq!(split_counts(3, [0.98, 0.01, 0.01]).unwrap(), [1, 1, 1]);
        assert_eq!(split_counts(7, [1.0, 0.0, 0.0]).unwrap(), [7, 0, 0]);
        assert!(matches!(
            split_counts(2, [0.5, 0.25, 0.25]),
            Err(DatasetError::TooFewScenes { .. })
        ));
        assert!(split_counts(10, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let m = manifest(10, 3);
        let a = split_by_scene(&m, [0.8, 0.1, 0.1], 7).unwrap();
        let b = split_by_scene(&m, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
        a.check_scene_disjoint().unwrap();
        let mut per: HashMap<Split, BTreeSet<&str>> = HashMap::new();
        for r in &a.records {
            per.entry(r.split.unwrap()).or_default().insert(&r.scene_id);
        }
        assert_eq!(per[&Split::Train].len(), 8);
        assert_eq!(per[&Split::Val].len(), 1);
        assert_eq!(per[&Split::Test].len(), 1);
    }

    #[test]
    fn overlap_detected() {
        let mut m = manifest(2, 2);
        m.records[0].split = Some(Split::Train);
        m.records[1].split = Some(Split::Test);
        assert!(matches!(
            m.check_scene_disjoint(),
            Err(DatasetError::SplitOverlap { .. })
        ));
    }

    #[test]
    fn verdicts_last_wins() {
        let m = manifest(2, 2);
        let ev = |id: &str, v| VerdictEvent {
            id: id.into(),
            verdict: v,
            reason: None,
            timestamp: 0,
        };
        assert_eq!(apply_verdicts(&m, &[]).unwrap(), m);
        let out = apply_verdicts(
            &m,
            &[ev("s000-0", Decision::Discard), ev("s000-0", Decision::Keep)],
        )
        .unwrap();
        assert_eq!(out.records[0].verdict, Verdict::Keep);
        assert!(matches!(
            apply_verdicts(&m, &[ev("nope", Decision::Keep)]),
            Err(DatasetError::UnknownTripletId(_))
        ));
    }

    #[test]
    fn verdict_replay_matches_sequential_oracle() {
        let m = manifest(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let log: Vec<VerdictEvent> = (0..rng.random_range(0..40))
                .map(|t| VerdictEvent {
                    id: m.records[rng.random_range(0..m.records.len())].id.clone(),
                    verdict: if rng.random_bool(0.5) { Decision::Keep } else { Decision::Discard },
                    reason: None,
                    timestamp: t,
                })
                .collect();
            let got = apply_verdicts(&m, &log).unwrap();
            for r in &got.records {
                let want = log
                    .iter()
                    .rev()
                    .find(|e| e.id == r.id)
                    .map_or(Verdict::Pending, |e| e.verdict.into());
                assert_eq!(r.verdict, want);
            }
            let exported = export_view(&got, false);
            assert!(exported.records.iter().all(|r| r.verdict == Verdict::Keep));
            let with_pending = export_view(&got, true);
            assert!(with_pending.records.iter().all(|r| r.verdict != Verdict::Discard));
        }
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::new([0.01, 0.02, 0.5], 0.05).unwrap();
        assert_eq!(h.counts.len(), 20);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.total(), 3);

        let zeros = Histogram::new([0.0; 5], 0.1).unwrap();
        assert_eq!(zeros.counts[0], 5);

        let one = Histogram::new([0.0, 0.3, 1.0], 1.0).unwrap();
        assert_eq!(one.counts, vec![3]);

        let last = Histogram::new([1.0], 0.25).unwrap();
        assert_eq!(last.counts, vec![0, 0, 0, 1]);

        let uneven = Histogram::new([0.95], 0.3).unwrap();
        assert_eq!(uneven.counts.len(), 4);
        assert_eq!(uneven.counts[3], 1);

        assert!(Histogram::new([0.1], 0.0).is_err());
        assert!(Histogram::new([0.1], 1.5).is_err());
        assert!(h.to_csv().starts_with("bin_start,bin_end,count\n0.000000,0.050000,2\n"));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(3, 2);
        for r in &mut m.records {
            BinaryMask::from_points(4, 4, &[(0, 0)]).save_png(&dir.path().join(&r.mask_path)).unwrap();
            r.foreground_ratio = 1.0 / 16.0;
        }
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        back.verify_masks(dir.path()).unwrap();

        let mut stale = m.clone();
        stale.records[1].foreground_ratio = 0.5;
        assert!(matches!(
            stale.verify_masks(dir.path()),
            Err(DatasetError::StaleForegroundRatio { .. })
        ));

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"id\": broken";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::remove_file(dir.path().join(&m.records[0].mask_path)).unwrap();
        save_manifest(&m, &path).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(DatasetError::MissingMaskFile { .. })
        ));

    }

    #[test]
    fn verdict_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        assert!(load_verdict_log(&path).unwrap().is_empty());
        let ev = VerdictEvent {
            id: "a".into(),
            verdict: Decision::Discard,
            reason: Some("blurry".into()),
            timestamp: 42,
        };
        append_verdict(&path, &ev).unwrap();
        append_verdict(&path, &VerdictEvent { reason: None, ..ev.clone() }).unwrap();
        let back = load_verdict_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ev);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), r#"{"id":"a","verdict":"discard","timestamp":42}"#);
    }

    #[test]
    fn slugs_and_relative_paths() {
        assert_eq!(slug("light-duty vehicle in the parking area"), "light-duty_vehicle_in_the_parking_area");
        assert!(is_valid_scene_id("tile_03-r1c2"));
        assert!(!is_valid_scene_id("../x"));
        assert_eq!(relative_path(Path::new("/a/b/c.png"), Path::new("/a/d")), PathBuf::from("../b/c.png"));
        assert_eq!(relative_path(Path::new("/a/d/c.png"), Path::new("/a/d")), PathBuf::from("c.png"));
    }
}
