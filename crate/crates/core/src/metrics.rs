//! Evaluation metrics: point-cloud (Chamfer, F-score), image (RMSE, MedAE,
//! PSNR, SSIM), ray-drop (RMSE, accuracy, F1) and semantic (PA, mIoU).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub type Point = [f64; 3];

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Static 3-d tree over a point set, used for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
    /// Implicit balanced tree: the median of `order[lo..hi]` is the node,
    /// split along `depth % 3`.
    order: Vec<usize>,
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    /// Squared distance to the nearest point, or `None` for an empty tree.
    /// The result is the minimum of [`squared_distance`] over all points, so
    /// it is bitwise equal to a brute-force scan.
    pub fn nearest_squared(&self, q: &Point) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: &Point, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.order[mid]];
        let d = squared_distance(q, p);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        // `<=` keeps equal-distance candidates reachable; the minimum is what
        // matters, not which point attains it.
        if diff * diff <= *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build(points: &[Point], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

fn nearest_all(from: &[Point], to: &[Point]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter().map(|p| tree.nearest_squared(p).unwrap_or(f64::INFINITY)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chamfer {
    /// Sum over both sides of squared nearest-neighbor distances.
    pub sum: f64,
    /// Per-side means added together; the headline number.
    pub mean: f64,
}

pub fn chamfer(a: &[Point], b: &[Point]) -> Result<Chamfer> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("chamfer needs two non-empty point sets".into()));
    }
    let ab: f64 = nearest_all(a, b).iter().sum();
    let ba: f64 = nearest_all(b, a).iter().sum();
    Ok(Chamfer {
        sum: ab + ba,
        mean: ab / a.len() as f64 + ba / b.len() as f64,
    })
}

pub const DEFAULT_FSCORE_THRESHOLD: f64 = 0.05;

/// Harmonic mean of precision (share of `pred` within `tau` of `gt`) and
/// recall (the converse).
pub fn f_score(pred: &[Point], gt: &[Point], tau: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet("f-score needs two non-empty point sets".into()));
    }
    let t2 = tau * tau;
    let frac = |d: Vec<f64>| d.iter().filter(|&&v| v < t2).count() as f64 / d.len() as f64;
    let precision = frac(nearest_all(pred, gt));
    let recall = frac(nearest_all(gt, pred));
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub rmse: f64,
    pub medae: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-d Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window actually used for an `h x w` image: 11, or the largest odd size
/// that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m.saturating_sub(1)
    } else {
        m
    }
}

/// Valid-position separable filter of an `h x w` image.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over valid window positions, data range 1.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::ShapeMismatch(format!("ssim: {} and {} values for {h}x{w}", x.len(), y.len())));
    }
    let size = ssim_window(h, w);
    if size == 0 {
        return Err(Error::EmptySet("ssim of an empty image".into()));
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let f = |v: Vec<f64>| filter_valid(&v, h, w, &k).0;
    let mx = f(x.to_vec());
    let my = f(y.to_vec());
    let xx = f(x.iter().map(|v| v * v).collect());
    let yy = f(y.iter().map(|v| v * v).collect());
    let xy = f(x.iter().zip(y).map(|(a, b)| a * b).collect());
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = xx[i] - a * a;
        let vy = yy[i] - b * b;
        let cov = xy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Median of a non-empty slice; the mean of the middle pair for even counts.
pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// RMSE and MedAE over `mask`; PSNR and SSIM over the full images divided by
/// `peak`. Empty masks give NaN for the masked metrics.
pub fn image_metrics(pred: &[f32], gt: &[f32], mask: &[bool], h: usize, w: usize, peak: f64) -> Result<ImageMetrics> {
    if pred.len() != h * w || gt.len() != h * w || mask.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "image metrics: pred {}, gt {}, mask {} for {h}x{w}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut err: Vec<f64> = (0..h * w).filter(|&i| mask[i]).map(|i| (pred[i] as f64 - gt[i] as f64).abs()).collect();
    let (rmse, medae) = if err.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mse = err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64;
        (mse.sqrt(), median(&mut err))
    };
    let x: Vec<f64> = pred.iter().map(|&v| v as f64 / peak).collect();
    let y: Vec<f64> = gt.iter().map(|&v| v as f64 / peak).collect();
    let mse = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() };
    Ok(ImageMetrics {
        rmse,
        medae,
        psnr,
        ssim: ssim(&x, &y, h, w)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaydropMetrics {
    pub rmse: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// `prob` is the predicted drop probability, `returned` the ground-truth
/// return mask. Dropped is the positive class; a prediction is "dropped" when
/// `prob > threshold`.
pub fn raydrop_metrics(prob: &[f32], returned: &[bool], threshold: f64) -> Result<RaydropMetrics> {
    if prob.len() != returned.len() {
        return Err(Error::ShapeMismatch(format!("ray drop: {} probabilities, {} labels", prob.len(), returned.len())));
    }
    if prob.is_empty() {
        return Err(Error::EmptySet("ray drop metrics of an empty image".into()));
    }
    let (mut tp, mut fp, mut fnn, mut correct, mut se) = (0usize, 0usize, 0usize, 0usize, 0.0f64);
    for (&p, &r) in prob.iter().zip(returned) {
        let truth = !r;
        let target = if truth { 1.0 } else { 0.0 };
        se += (p as f64 - target).powi(2);
        let pred = p as f64 > threshold;
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
        correct += (pred == truth) as usize;
    }
    let n = prob.len() as f64;
    let f1 = if tp + fp + fnn == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64 };
    Ok(RaydropMetrics {
        rmse: (se / n).sqrt(),
        accuracy: correct as f64 / n,
        f1,
    })
}

/// `counts[gt * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub ignore: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore: u32) -> Self {
        Self {
            num_classes,
            ignore,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Adds label pairs; pixels whose ground truth is the ignore class are
    /// skipped.
    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!("labels: {} predicted, {} ground truth", pred.len(), gt.len())));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == self.ignore {
                continue;
            }
            if p as usize >= k || g as usize >= k {
                return Err(Error::OutOfBounds {
                    what: "class id",
                    detail: format!("{} with {k} classes", p.max(g)),
                });
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        correct as f64 / self.total() as f64
    }

    /// IoU of every class that occurs in ground truth or prediction (the
    /// ignore class excepted).
    pub fn class_iou(&self) -> Vec<(usize, f64)> {
        let k = self.num_classes;
        (0..k)
            .filter(|&c| c as u32 != self.ignore)
            .filter_map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| (c, tp as f64 / union as f64))
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let ious = self.class_iou();
        ious.iter().map(|(_, v)| v).sum::<f64>() / ious.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

pub fn segmentation_metrics(pred: &[u32], gt: &[u32], num_classes: usize, ignore: u32) -> Result<SegmentationMetrics> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore);
    cm.add(pred, gt)?;
    Ok(SegmentationMetrics {
        pixel_accuracy: cm.pixel_accuracy(),
        mean_iou: cm.mean_iou(),
    })
}

/// Keys every full report carries.
pub const REPORT_KEYS: [&str; 15] = [
    "cd",
    "cd_sum",
    "fscore",
    "depth_rmse",
    "depth_medae",
    "depth_psnr",
    "depth_ssim",
    "intensity_rmse",
    "intensity_medae",
    "intensity_psnr",
    "intensity_ssim",
    "raydrop_rmse",
    "raydrop_acc",
    "raydrop_f1",
    "pa",
];

/// Flat metric name to value map, ordered by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Mean of each key over the reports that carry it.
    pub fn average(reports: &[MetricsReport]) -> MetricsReport {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in reports {
            for (k, &v) in &r.values {
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        MetricsReport {
            values: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        }
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// JSON object; non-finite values are written as strings (`"inf"`, `"NaN"`).
    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .values
            .iter()
            .map(|(k, &v)| {
                let j = if v.is_finite() {
                    serde_json::json!(v)
                } else {
                    serde_json::Value::String(v.to_string())
                };
                (k.clone(), j)
            })
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Format("metrics report must be a JSON object".into()))?;
        let mut out = MetricsReport::default();
        for (k, v) in obj {
            let x = match v {
                serde_json::Value::Number(n) => n.as_f64(),
                serde_json::Value::String(s) => s.parse::<f64>().ok(),
                _ => None,
            }
            .ok_or_else(|| Error::Format(format!("metric `{k}` is not a number")))?;
            out.insert(k.clone(), x);
        }
        Ok(out)
    }

    pub fn write_files(&self, text_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(text_path, self.to_text()).map_err(io_err(text_path))?;
        let json = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(json_path, json + "\n").map_err(io_err(json_path))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn window_shrinks_for_small_images() {
        assert_eq!(ssim_window(64, 64), 11);
        assert_eq!(ssim_window(8, 8), 7);
        assert_eq!(ssim_window(7, 30), 7);
        assert_eq!(ssim_window(1, 5), 1);
    }

    #[test]
    fn kd_tree_handles_duplicates() {
        let pts = vec![[1.0, 1.0, 1.0]; 7];
        let t = KdTree::new(&pts);
        assert_eq!(t.nearest_squared(&[1.0, 1.0, 2.0]), Some(1.0));
        assert_eq!(KdTree::new(&[]).nearest_squared(&[0.0; 3]), None);
    }

    #[test]
    fn json_round_trip_keeps_infinity() {
        let mut r = MetricsReport::default();
        r.insert("depth_psnr", f64::INFINITY);
        r.insert("pa", 0.5);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    }
}
