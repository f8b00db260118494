//! Pixel and geometry metrics, plus the per-task evaluation report.
//!
//! All arithmetic is done in `f64`. Luminance uses the Rec. 601 weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Image;
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const DEPTH_MIN: f64 = 0.01;

fn check_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::shape(op, &[a.height(), a.width()], &[b.height(), b.width()]))
    }
}

fn luminance64(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Intersection over union of the masks `luminance >= 0.5`.
pub fn iou(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims("iou", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in luminance64(pred).into_iter().zip(luminance64(gt)) {
        let (a, b) = (p >= 0.5, g >= 0.5);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean squared error over all channels.
pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims("mse", pred, gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (f64::from(p) - f64::from(g)).powi(2))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalized 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Mean structural similarity of the luminance channels: an 11x11 Gaussian
/// window (sigma 1.5) at every pixel with mirrored borders. Images smaller
/// than the window use a single global window.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims("ssim", pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let x = luminance64(pred);
    let y = luminance64(gt);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        return Ok(ssim_term(mx, my, vx, vy, cxy));
    }
    // Separable filtering of x, y, x^2, y^2, xy.
    let taps = gaussian_taps();
    let r = (SSIM_WINDOW / 2) as isize;
    let fields: [Vec<f64>; 5] = [
        x.clone(),
        y.clone(),
        x.iter().map(|v| v * v).collect(),
        y.iter().map(|v| v * v).collect(),
        x.iter().zip(&y).map(|(a, b)| a * b).collect(),
    ];
    let blur = |f: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                rows[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * f[i * w + reflect(j as isize + k as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                out[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * rows[reflect(i as isize + k as isize - r, h) * w + j])
                    .sum();
            }
        }
        out
    };
    let [mx, my, xx, yy, xy] = fields.map(|f| blur(&f));
    let total: f64 = (0..h * w)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            ssim_term(a, b, xx[i] - a * a, yy[i] - b * b, xy[i] - a * b)
        })
        .sum();
    Ok(total / (h * w) as f64)
}

/// Root mean squared luminance error on the 0-255 scale.
pub fn rmse255(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims("rmse255", pred, gt)?;
    let (p, g) = (luminance64(pred), luminance64(gt));
    let m = p.iter().zip(&g).map(|(a, b)| (255.0 * a - 255.0 * b).powi(2)).sum::<f64>() / p.len() as f64;
    Ok(m.sqrt())
}

/// `(AbsRel, delta1)` after least-squares affine alignment of the predicted
/// luminance depth to the ground truth, over pixels with `gt > 0.01`.
/// Aligned depths that are not positive never count toward delta1.
pub fn depth_metrics(pred: &Image, gt: &Image) -> Result<(f64, f64)> {
    check_dims("depth", pred, gt)?;
    let pairs: Vec<(f64, f64)> = luminance64(pred)
        .into_iter()
        .zip(luminance64(gt))
        .filter(|&(_, g)| g > DEPTH_MIN)
        .collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("depth: no pixel with gt > 0.01".into()));
    }
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let vp = pairs.iter().map(|p| (p.0 - mp).powi(2)).sum::<f64>();
    let cpg = pairs.iter().map(|p| (p.0 - mp) * (p.1 - mg)).sum::<f64>();
    let scale = if vp > 0.0 { cpg / vp } else { 0.0 };
    let shift = mg - scale * mp;
    let (mut absrel, mut within) = (0.0, 0usize);
    for &(p, d) in &pairs {
        let dh = scale * p + shift;
        absrel += (dh - d).abs() / d;
        if dh > 0.0 && (dh / d).max(d / dh) < 1.25 {
            within += 1;
        }
    }
    Ok((absrel / n, within as f64 / n))
}

fn decode_normal(p: &[f32]) -> Option<[f64; 3]> {
    let v = [0, 1, 2].map(|c| 2.0 * f64::from(p[c]) - 1.0);
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (len > 0.0).then(|| v.map(|c| c / len))
}

/// `(median, mean)` angular error in degrees between decoded unit normals.
pub fn normal_metrics(pred: &Image, gt: &Image) -> Result<(f64, f64)> {
    check_dims("normal", pred, gt)?;
    let mut errs: Vec<f64> = pred
        .data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .filter_map(|(p, g)| {
            let (a, b) = (decode_normal(p)?, decode_normal(g)?);
            // atan2 of |a x b| and a.b equals the arccos of the clamped dot
            // product but stays exact for identical normals.
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            Some(sin.atan2(dot).to_degrees())
        })
        .collect();
    if errs.is_empty() {
        return Err(Error::UndefinedMetric("normal: every pixel decodes to a zero vector".into()));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((median(&mut errs), mean))
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// A requested metric family. `depth` and `normal` each produce two values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Iou,
    Psnr,
    Ssim,
    Rmse255,
    Depth,
    Normal,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Iou, Metric::Psnr, Metric::Ssim, Metric::Rmse255, Metric::Depth, Metric::Normal];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Rmse255 => "rmse255",
            Metric::Depth => "depth",
            Metric::Normal => "normal",
        }
    }

    /// Named values this metric contributes to a report row.
    pub fn evaluate(self, pred: &Image, gt: &Image) -> Result<Vec<(&'static str, f64)>> {
        Ok(match self {
            Metric::Iou => vec![("iou", iou(pred, gt)?)],
            Metric::Psnr => vec![("psnr", psnr(pred, gt)?)],
            Metric::Ssim => vec![("ssim", ssim(pred, gt)?)],
            Metric::Rmse255 => vec![("rmse255", rmse255(pred, gt)?)],
            Metric::Depth => {
                let (a, d) = depth_metrics(pred, gt)?;
                vec![("absrel", a), ("delta1", d)]
            }
            Metric::Normal => {
                let (med, mean) = normal_metrics(pred, gt)?;
                vec![("normal_median", med), ("normal_mean", mean)]
            }
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

/// Comma-separated metric list, e.g. `psnr,ssim`.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out: Vec<Metric> = list.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub task: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        Self {
            mean,
            median: median(&mut sorted),
            std: var.sqrt(),
            count: n,
        }
    }
}

/// Per-item rows plus per-task, per-value aggregates (`report.json`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: Vec<ItemRow>,
    pub tasks: BTreeMap<String, BTreeMap<String, Aggregate>>,
}

impl MetricReport {
    pub fn from_items(items: Vec<ItemRow>) -> Self {
        let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for row in &items {
            let task = grouped.entry(row.task.clone()).or_default();
            for (k, &v) in &row.values {
                task.entry(k.clone()).or_default().push(v);
            }
        }
        let tasks = grouped
            .into_iter()
            .map(|(t, vals)| (t, vals.into_iter().map(|(k, v)| (k, Aggregate::of(&v))).collect()))
            .collect();
        Self { items, tasks }
    }

    pub fn mean(&self, task: &str, value: &str) -> Option<f64> {
        self.tasks.get(task)?.get(value).map(|a| a.mean)
    }
}

/// Evaluates every metric for one prediction.
pub fn evaluate_item(id: &str, task: &str, pred: &Image, gt: &Image, metrics: &[Metric]) -> Result<ItemRow> {
    let mut values = BTreeMap::new();
    for m in metrics {
        for (k, v) in m.evaluate(pred, gt)? {
            values.insert(k.to_string(), v);
        }
    }
    Ok(ItemRow {
        id: id.to_string(),
        task: task.to_string(),
        values,
    })
}
