//! Referring-segmentation metrics: per-sample IoU, overall IoU (oIoU),
//! mean IoU (mIoU) and precision at IoU thresholds (Pr@θ).
//!
//! Pixel counts are exact integers and ratios are exact rationals until
//! the final conversion for reporting. Conventions:
//! - both masks empty: IoU = 1; exactly one empty: IoU = 0;
//! - a sample passes Pr@θ when IoU > θ (strict) unless
//!   [`ThresholdRule::Inclusive`] is requested.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Manifest, Split};
use crate::raster::{BinaryMask, RasterError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dimensions differ for {id}: prediction {pred:?}, ground truth {gt:?}")]
    DimMismatch {
        id: String,
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("no samples to evaluate")]
    EmptySampleSet,
    #[error("missing prediction for {id} (expected {path})")]
    MissingPrediction { id: String, path: PathBuf },
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub struct EvalSample {
    pub id: String,
    pub pred: BinaryMask,
    pub gt: BinaryMask,
}

/// Intersection and union pixel counts of one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask, id: &str) -> Result<Overlap> {
        let (intersection, union) =
            pred.overlap_counts(gt)
                .map_err(|_| MetricsError::DimMismatch {
                    id: id.to_string(),
                    pred: pred.dims(),
                    gt: gt.dims(),
                })?;
        Ok(Overlap {
            intersection,
            union,
        })
    }

    /// Exact IoU; an empty union (both masks empty) counts as 1.
    pub fn ratio(&self) -> Ratio<u64> {
        if self.union == 0 {
            Ratio::from_integer(1)
        } else {
            Ratio::new(self.intersection, self.union)
        }
    }

    pub fn iou(&self) -> f64 {
        ratio_to_f64(self.ratio())
    }
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Threshold stored as an exact fraction in millionths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Threshold(Ratio<u64>);

impl Threshold {
    const SCALE: u64 = 1_000_000;

    pub fn new(theta: f64) -> Result<Threshold> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(MetricsError::InvalidThreshold(theta));
        }
        let micros = (theta * Self::SCALE as f64).round() as u64;
        Ok(Threshold(Ratio::new(micros, Self::SCALE)))
    }

    pub fn value(&self) -> f64 {
        ratio_to_f64(self.0)
    }

    pub fn label(&self) -> String {
        let s = format!("{:.6}", self.value());
        let s = s.trim_end_matches('0');
        format!("Pr@{}", s.strip_suffix('.').unwrap_or(s))
    }

    fn passes(&self, o: &Overlap, rule: ThresholdRule) -> bool {
        let iou = o.ratio();
        // Cross-multiplied in u128: a/b > c/d  <=>  a·d > c·b.
        let lhs = *iou.numer() as u128 * *self.0.denom() as u128;
        let rhs = *self.0.numer() as u128 * *iou.denom() as u128;
        match rule {
            ThresholdRule::Strict => lhs > rhs,
            ThresholdRule::Inclusive => lhs >= rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdRule {
    #[default]
    Strict,
    Inclusive,
}

pub fn default_thresholds() -> Vec<Threshold> {
    [0.5, 0.6, 0.7, 0.8, 0.9]
        .into_iter()
        .map(|t| Threshold::new(t).expect("valid threshold"))
        .collect()
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Overlap::of(pred, gt, "")?.iou())
}

fn non_empty(overlaps: &[Overlap]) -> Result<()> {
    if overlaps.is_empty() {
        Err(MetricsError::EmptySampleSet)
    } else {
        Ok(())
    }
}

/// Σ|∩| / Σ|∪| as an exact fraction; 1 when every union is empty.
pub fn overall_iou_exact(overlaps: &[Overlap]) -> Result<Ratio<u64>> {
    non_empty(overlaps)?;
    let inter: u64 = overlaps.iter().map(|o| o.intersection).sum();
    let union: u64 = overlaps.iter().map(|o| o.union).sum();
    Ok(if union == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(inter, union)
    })
}

pub fn overall_iou(overlaps: &[Overlap]) -> Result<f64> {
    overall_iou_exact(overlaps).map(ratio_to_f64)
}

/// Mean of per-sample IoU as an exact fraction.
pub fn mean_iou_exact(overlaps: &[Overlap]) -> Result<BigRational> {
    non_empty(overlaps)?;
    let mut sum = BigRational::zero();
    for o in overlaps {
        let r = o.ratio();
        sum += BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()));
    }
    Ok(sum / BigInt::from(overlaps.len()))
}

pub fn mean_iou(overlaps: &[Overlap]) -> Result<f64> {
    Ok(mean_iou_exact(overlaps)?
        .to_f64()
        .expect("mean IoU lies in [0, 1]"))
}

/// Number of samples passing `theta`, and the sample count.
pub fn precision_counts(
    overlaps: &[Overlap],
    theta: Threshold,
    rule: ThresholdRule,
) -> Result<(u64, u64)> {
    non_empty(overlaps)?;
    let hits = overlaps.iter().filter(|o| theta.passes(o, rule)).count() as u64;
    Ok((hits, overlaps.len() as u64))
}

pub fn precision_at(overlaps: &[Overlap], theta: Threshold, rule: ThresholdRule) -> Result<f64> {
    let (hits, n) = precision_counts(overlaps, theta, rule)?;
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `(θ, Pr@θ)` in ascending θ.
    pub pr: Vec<(f64, f64)>,
    pub oiou: f64,
    pub miou: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn from_overlaps(
        overlaps: &[Overlap],
        thresholds: &[Threshold],
        rule: ThresholdRule,
    ) -> Result<EvalReport> {
        let mut ths = thresholds.to_vec();
        ths.sort();
        ths.dedup();
        let pr = ths
            .iter()
            .map(|&t| Ok((t.value(), precision_at(overlaps, t, rule)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            pr,
            oiou: overall_iou(overlaps)?,
            miou: mean_iou(overlaps)?,
            n: overlaps.len(),
        })
    }

    fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .pr
            .iter()
            .map(|(t, _)| Threshold::new(*t).expect("stored thresholds are valid").label())
            .collect();
        labels.push("oIoU".into());
        labels.push("mIoU".into());
        labels
    }

    fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.pr.iter().map(|p| p.1).collect();
        v.push(self.oiou);
        v.push(self.miou);
        v
    }

    /// Aligned plain-text table: Pr@θ columns, then oIoU, mIoU and the
    /// sample count, values to four decimals.
    pub fn to_table(&self) -> String {
        let labels = self.labels();
        let values = self.values();
        let width = labels.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut head = String::new();
        let mut row = String::new();
        for (l, v) in labels.iter().zip(&values) {
            write!(head, "{l:>width$}  ").unwrap();
            write!(row, "{v:>width$.4}  ").unwrap();
        }
        writeln!(head, "{:>6}", "n").unwrap();
        writeln!(row, "{:>6}", self.n).unwrap();
        head + &row
    }

    pub fn to_csv(&self) -> String {
        let mut labels = self.labels();
        labels.push("n".into());
        let mut values: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        values.push(self.n.to_string());
        format!("{}\n{}\n", labels.join(","), values.join(","))
    }
}

/// Per-sample CSV: `id,intersection,union,iou`.
pub fn per_sample_csv(rows: &[(String, Overlap)]) -> String {
    let mut out = String::from("id,intersection,union,iou\n");
    for (id, o) in rows {
        writeln!(out, "{},{},{},{:.6}", id, o.intersection, o.union, o.iou()).unwrap();
    }
    out
}

pub fn evaluate_samples(
    samples: &[EvalSample],
    thresholds: &[Threshold],
    rule: ThresholdRule,
) -> Result<(EvalReport, Vec<(String, Overlap)>)> {
    let rows = samples
        .iter()
        .map(|s| Ok((s.id.clone(), Overlap::of(&s.pred, &s.gt, &s.id)?)))
        .collect::<Result<Vec<_>>>()?;
    let overlaps: Vec<Overlap> = rows.iter().map(|r| r.1).collect();
    Ok((EvalReport::from_overlaps(&overlaps, thresholds, rule)?, rows))
}

/// Pairs `<pred_dir>/<id>.png` with each selected record's ground truth
/// (resolved relative to `manifest_dir`). `split = None` evaluates every
/// record.
pub fn evaluate_dirs(
    pred_dir: &Path,
    manifest: &Manifest,
    manifest_dir: &Path,
    split: Option<Split>,
    thresholds: &[Threshold],
    rule: ThresholdRule,
) -> Result<(EvalReport, Vec<(String, Overlap)>)> {
    let mut rows = Vec::new();
    for r in manifest
        .records
        .iter()
        .filter(|r| split.is_none() || r.split == split)
    {
        let pred_path = pred_dir.join(format!("{}.png", r.id));
        if !pred_path.exists() {
            return Err(MetricsError::MissingPrediction {
                id: r.id.clone(),
                path: pred_path,
            });
        }
        let pred = BinaryMask::load_png(&pred_path)?;
        let gt = BinaryMask::load_png(&manifest_dir.join(&r.mask_path))?;
        rows.push((r.id.clone(), Overlap::of(&pred, &gt, &r.id)?));
    }
    let overlaps: Vec<Overlap> = rows.iter().map(|r| r.1).collect();
    Ok((EvalReport::from_overlaps(&overlaps, thresholds, rule)?, rows))
}
