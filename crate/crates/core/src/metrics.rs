//! Image quality metrics and codebook utilization.
//!
//! Volume metrics are computed on each axial slice (fixed depth index) and
//! averaged over slices. Projection maps are scored as single 2D images on
//! their raw values.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{projection_map, ProjectionMap, Volume};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const DATA_RANGE: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_image(a: &[f64], b: &[f64], dims: [usize; 2]) -> Result<()> {
    let n = dims[0] * dims[1];
    if n == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "images of {} and {} values for dims {dims:?}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mae_image(a: &[f64], b: &[f64], dims: [usize; 2]) -> Result<f64> {
    check_image(a, b, dims)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn psnr_image(a: &[f64], b: &[f64], dims: [usize; 2]) -> Result<f64> {
    check_image(a, b, dims)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()).min(PSNR_CAP))
}

/// Side of the Gaussian window for an image: 11, or the largest odd size
/// that fits when the image is smaller.
pub fn ssim_window_for(dims: [usize; 2]) -> usize {
    let m = dims[0].min(dims[1]).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

fn gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(img: &[f64], dims: [usize; 2], k: &[f64]) -> Vec<f64> {
    let [h, w] = dims;
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|t| k[t] * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5).
pub fn ssim_image(a: &[f64], b: &[f64], dims: [usize; 2]) -> Result<f64> {
    check_image(a, b, dims)?;
    if a == b {
        return Ok(1.0);
    }
    let k = gaussian(ssim_window_for(dims), SSIM_SIGMA);
    let c1 = (K1 * DATA_RANGE).powi(2);
    let c2 = (K2 * DATA_RANGE).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, dims, &k);
    let mu_b = filter_valid(b, dims, &k);
    let e_aa = filter_valid(&prod(a, a), dims, &k);
    let e_bb = filter_valid(&prod(b, b), dims, &k);
    let e_ab = filter_valid(&prod(a, b), dims, &k);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let saa = e_aa[i] - ma * ma;
        let sbb = e_bb[i] - mb * mb;
        let sab = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * sab + c2);
        let den = (ma * ma + mb * mb + c1) * (saa + sbb + c2);
        sum += num / den;
    }
    Ok((sum / mu_a.len() as f64).clamp(-1.0, 1.0))
}

fn check_volumes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("volume dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty volume".into()));
    }
    Ok(())
}

/// A per-image metric over two `[h, w]` images.
pub type ImageMetric = fn(&[f64], &[f64], [usize; 2]) -> Result<f64>;

fn slice_average(a: &Volume, b: &Volume, f: ImageMetric) -> Result<f64> {
    check_volumes(a, b)?;
    let [l, w, d] = a.dims();
    let per_slice = par::map_range(d, |z| f(&a.depth_slice(z), &b.depth_slice(z), [l, w]));
    let mut sum = 0.0;
    for v in per_slice {
        sum += v?;
    }
    Ok(sum / d as f64)
}

pub fn mae(a: &Volume, b: &Volume) -> Result<f64> {
    slice_average(a, b, mae_image)
}

pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    slice_average(a, b, psnr_image)
}

pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    slice_average(a, b, ssim_image)
}

fn check_maps(a: &ProjectionMap, b: &ProjectionMap) -> Result<[usize; 2]> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("map dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(a.dims())
}

pub fn mae_map(a: &ProjectionMap, b: &ProjectionMap) -> Result<f64> {
    mae_image(a.values(), b.values(), check_maps(a, b)?)
}

pub fn psnr_map(a: &ProjectionMap, b: &ProjectionMap) -> Result<f64> {
    psnr_image(a.values(), b.values(), check_maps(a, b)?)
}

pub fn ssim_map(a: &ProjectionMap, b: &ProjectionMap) -> Result<f64> {
    ssim_image(a.values(), b.values(), check_maps(a, b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsTarget {
    Volume,
    ProjectionMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub target: MetricsTarget,
    pub n_items: usize,
}

impl MetricsRecord {
    pub fn for_volumes(pred: &Volume, target: &Volume) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, target)?,
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
            target: MetricsTarget::Volume,
            n_items: 1,
        })
    }

    pub fn for_maps(pred: &ProjectionMap, target: &ProjectionMap) -> Result<Self> {
        Ok(Self {
            mae: mae_map(pred, target)?,
            psnr: psnr_map(pred, target)?,
            ssim: ssim_map(pred, target)?,
            target: MetricsTarget::ProjectionMap,
            n_items: 1,
        })
    }

    /// Item-weighted mean of records with the same target.
    pub fn average(records: &[MetricsRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Validation("no records to average".into()))?;
        if records.iter().any(|r| r.target != first.target) {
            return Err(Error::Validation(
                "cannot average volume and projection-map records".into(),
            ));
        }
        let n: usize = records.iter().map(|r| r.n_items).sum();
        let w = |f: fn(&MetricsRecord) -> f64| records.iter().map(|r| f(r) * r.n_items as f64).sum::<f64>() / n as f64;
        Ok(Self {
            mae: w(|r| r.mae),
            psnr: w(|r| r.psnr),
            ssim: w(|r| r.ssim),
            target: first.target,
            n_items: n,
        })
    }
}

/// Per-item volume and projection-map records for prediction/target pairs.
pub fn evaluate_pairs(preds: &[Volume], targets: &[Volume]) -> Result<Vec<(MetricsRecord, MetricsRecord)>> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let idx: Vec<usize> = (0..preds.len()).collect();
    par::map_slice(&idx, |&i| -> Result<_> {
        let vol = MetricsRecord::for_volumes(&preds[i], &targets[i])?;
        let pm = MetricsRecord::for_maps(&projection_map(&preds[i]), &projection_map(&targets[i]))?;
        Ok((vol, pm))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    #[serde(flatten)]
    pub record: MetricsRecord,
}

/// Writes `metrics.jsonl` (one row per line) and `summary.txt` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("summary.txt");
    std::fs::write(&path, summary_table(rows)).map_err(|e| Error::io(&path, e))
}

pub fn summary_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<width$}  {:<14}  {:>5}  {:>8}  {:>8}  {:>7}\n",
        "label", "target", "n", "MAE", "PSNR", "SSIM"
    );
    for r in rows {
        let target = match r.record.target {
            MetricsTarget::Volume => "volume",
            MetricsTarget::ProjectionMap => "projection_map",
        };
        let _ = writeln!(
            s,
            "{:<width$}  {:<14}  {:>5}  {:>8.4}  {:>8.3}  {:>7.4}",
            r.label, target, r.record.n_items, r.record.mae, r.record.psnr, r.record.ssim
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub used_entries: usize,
    pub total_entries: usize,
    pub rate: f64,
    pub histogram: Vec<u64>,
}

/// Hit counts of codebook entries over an index stream.
pub fn codebook_utilization<I: IntoIterator<Item = usize>>(indices: I, n: usize) -> Result<UtilizationReport> {
    if n == 0 {
        return Err(Error::Validation("codebook size must be positive".into()));
    }
    let mut histogram = vec![0u64; n];
    for i in indices {
        if i >= n {
            return Err(Error::Validation(format!("index {i} out of range for codebook of {n}")));
        }
        histogram[i] += 1;
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    if used == 0 {
        return Err(Error::Validation("empty index stream".into()));
    }
    Ok(UtilizationReport {
        used_entries: used,
        total_entries: n,
        rate: used as f64 / n as f64,
        histogram,
    })
}
