#![allow(dead_code)]

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refseg_core::dataset::{save_manifest, ConfigSnapshot, Manifest, Split, TripletRecord, Verdict};
use refseg_core::exprgen::enumerate_expressions;
use refseg_core::maskgen::SpatialPredicateConfig;
use refseg_core::raster::BinaryMask;
use refseg_core::taxonomy::Taxonomy;

pub fn refseg<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_refseg"))
        .args(args)
        .output()
        .expect("refseg binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `count` synthetic scenes under `root/scenes` and generates into
/// `root/out`. Returns the manifest path.
pub fn synth_and_generate(root: &Path, count: usize, side: usize) -> PathBuf {
    let scenes = root.join("scenes");
    let out = root.join("out");
    let o = refseg(["synth", "--out"].map(OsStr::new).into_iter().chain([
        scenes.as_os_str(),
        OsStr::new("--count"),
        OsStr::new(&count.to_string()),
        OsStr::new("--side"),
        OsStr::new(&side.to_string()),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = refseg([
        OsStr::new("generate"),
        OsStr::new("--scenes"),
        scenes.as_os_str(),
        OsStr::new("--out"),
        out.as_os_str(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.jsonl")
}

/// `(intersection, union)` for the six hand-made evaluation pairs.
pub const SIX_PAIRS: [(usize, usize); 6] = [(9, 10), (7, 10), (3, 4), (1, 2), (0, 5), (4, 4)];

/// Worked by hand from [`SIX_PAIRS`] with the strict `IoU > θ` rule:
/// IoUs 0.9, 0.7, 0.75, 0.5, 0, 1 give 4, 4, 3, 2, 1 hits of 6 at
/// θ = 0.5 … 0.9; oIoU = 24/35; mIoU = 3.85/6.
pub const SIX_PAIR_HEADER: [&str; 7] = ["Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "oIoU", "mIoU"];
pub const SIX_PAIR_ROW: [&str; 7] = ["0.6667", "0.6667", "0.5000", "0.3333", "0.1667", "0.6857", "0.6417"];

const FIXTURE_W: usize = 5;
const FIXTURE_H: usize = 4;

fn run_mask(start: usize, end: usize) -> BinaryMask {
    let idx: Vec<usize> = (start..end).collect();
    BinaryMask::from_indices(FIXTURE_W, FIXTURE_H, &idx)
}

/// Ground truth `[0, d + I)` and prediction `[d, U)` over a 5×4 grid,
/// where `d = (U − I) / 2`. Returns `(manifest, prediction dir)`.
pub fn six_pair_fixture(root: &Path) -> (PathBuf, PathBuf) {
    let tax = Taxonomy::refsegrs();
    let exprs = enumerate_expressions(&tax);
    let pred_dir = root.join("pred");
    std::fs::create_dir_all(&pred_dir).unwrap();
    let mut records = Vec::new();
    for (k, &(i, u)) in SIX_PAIRS.iter().enumerate() {
        let d = (u - i) / 2;
        let gt = run_mask(0, d + i);
        let pred = run_mask(d, u);
        assert_eq!(gt.overlap_counts(&pred).unwrap(), (i as u64, u as u64));
        let id = format!("pair-{}", k + 1);
        let mask_path = PathBuf::from("masks").join(format!("{id}.png"));
        std::fs::create_dir_all(root.join("masks")).unwrap();
        gt.save_png(&root.join(&mask_path)).unwrap();
        pred.save_png(&pred_dir.join(format!("{id}.png"))).unwrap();
        records.push(TripletRecord {
            id,
            scene_id: format!("fixture-{}", k + 1),
            image_path: "images/unused.png".into(),
            label_path: "labels/unused.png".into(),
            mask_path,
            expression: exprs[k].clone(),
            split: Some(Split::Test),
            foreground_ratio: gt.foreground_ratio(),
            verdict: Verdict::Pending,
        });
    }
    let manifest = Manifest {
        records,
        snapshot: ConfigSnapshot {
            predicate: SpatialPredicateConfig::default(),
            taxonomy_hash: tax.content_hash(),
        },
    };
    let path = root.join("manifest.jsonl");
    save_manifest(&manifest, &path).unwrap();
    (path, pred_dir)
}

/// Header and value cells of an evaluation table, `n` column dropped.
pub fn parse_table(table: &str) -> (Vec<String>, Vec<String>) {
    let mut lines = table.lines().filter(|l| !l.trim().is_empty());
    let split = |l: &str| l.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let mut head = split(lines.next().expect("header line"));
    let mut row = split(lines.next().expect("value line"));
    head.pop();
    row.pop();
    (head, row)
}
