//! Segmentation evaluation: thresholding, confusion counts, the metric
//! sextet (DSC, IoU, recall, precision, accuracy, F2), FPS measurement,
//! table rendering and activation heatmaps.
//!
//! Metrics are exact count ratios; the epsilon convention only decides
//! degenerate 0/0 cases (an empty prediction against an empty mask scores
//! 1), so DSC = 2*IoU/(1+IoU) holds to machine precision. Dataset-level
//! numbers are unweighted per-image means; mIoU is the mean per-image
//! foreground IoU.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const METRIC_EPS: f64 = 1e-7;

/// Thresholds probabilities at `threshold` (>= maps to 1).
pub fn binarize(pred: &Tensor<f32>, threshold: f32) -> Result<Tensor<f32>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarize threshold must be in (0,1), got {threshold}"
        )));
    }
    Ok(pred.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Per-pixel confusion counts of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Counts TP/FP/TN/FN between two binary tensors of equal shape.
pub fn confusion(pred_bin: &Tensor<f32>, mask: &Tensor<f32>) -> Result<ConfusionCounts> {
    if pred_bin.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "confusion: prediction {:?} vs mask {:?}",
            pred_bin.shape(),
            mask.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &m) in pred_bin.data().iter().zip(mask.data()) {
        if !(p == 0.0 || p == 1.0) || !(m == 0.0 || m == 1.0) {
            return Err(Error::Numerical(format!(
                "confusion wants binary inputs, found ({p}, {m})"
            )));
        }
        match (p == 1.0, m == 1.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// The per-image metric sextet.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSextet {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
}

/// Exact ratio with the epsilon convention for an all-zero denominator
/// (scores 1: nothing to find, nothing predicted).
fn ratio(num: f64, den: f64, eps: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        (num + eps) / (den + eps)
    }
}

/// DSC, IoU, recall, precision, accuracy and F2 from confusion counts.
pub fn compute_metrics(c: &ConfusionCounts, eps: f64) -> MetricSextet {
    let tp = c.true_pos as f64;
    let fp = c.false_pos as f64;
    let tn = c.true_neg as f64;
    let fneg = c.false_neg as f64;
    let precision = ratio(tp, tp + fp, eps);
    let recall = ratio(tp, tp + fneg, eps);
    let f2_den = 4.0 * precision + recall;
    MetricSextet {
        dsc: ratio(2.0 * tp, 2.0 * tp + fp + fneg, eps),
        iou: ratio(tp, tp + fp + fneg, eps),
        recall,
        precision,
        accuracy: ratio(tp + tn, tp + tn + fp + fneg, eps),
        f2: if f2_den > 0.0 {
            5.0 * precision * recall / f2_den
        } else {
            0.0
        },
    }
}

/// Per-image and mean metrics over a dataset, the confusion counts they
/// came from (per image and pooled), and an optional FPS figure filled in
/// by the benchmark pathway.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_image: Vec<MetricSextet>,
    /// Unweighted per-image mean of each metric (mIoU convention).
    pub mean: MetricSextet,
    pub per_image_counts: Vec<ConfusionCounts>,
    /// Pixel-pooled totals across the dataset.
    pub total_counts: ConfusionCounts,
    pub fps: Option<f64>,
    pub image_count: usize,
}

impl MetricsReport {
    pub fn from_counts(counts: &[ConfusionCounts]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Data("metrics over an empty dataset".into()));
        }
        let per_image: Vec<MetricSextet> =
            counts.iter().map(|c| compute_metrics(c, METRIC_EPS)).collect();
        let n = per_image.len() as f64;
        let mut mean = MetricSextet::default();
        for m in &per_image {
            mean.dsc += m.dsc;
            mean.iou += m.iou;
            mean.recall += m.recall;
            mean.precision += m.precision;
            mean.accuracy += m.accuracy;
            mean.f2 += m.f2;
        }
        mean.dsc /= n;
        mean.iou /= n;
        mean.recall /= n;
        mean.precision /= n;
        mean.accuracy /= n;
        mean.f2 /= n;
        let mut total = ConfusionCounts::default();
        for c in counts {
            total.true_pos += c.true_pos;
            total.false_pos += c.false_pos;
            total.true_neg += c.true_neg;
            total.false_neg += c.false_neg;
        }
        Ok(MetricsReport {
            image_count: per_image.len(),
            per_image,
            mean,
            per_image_counts: counts.to_vec(),
            total_counts: total,
            fps: None,
        })
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = Some(fps);
        self
    }
}

// ---- FPS ------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FpsReport {
    pub fps: f64,
    /// Per-frame wall-clock latencies in seconds, in measurement order.
    pub latencies: Vec<f64>,
    pub warmup: usize,
    pub frames: usize,
    /// Set when per-frame latency approaches the timer's resolution.
    pub timer_warning: bool,
}

fn timer_resolution() -> f64 {
    let start = Instant::now();
    loop {
        let d = start.elapsed();
        if !d.is_zero() {
            return d.as_secs_f64();
        }
    }
}

/// Times `frames` sequential invocations after `warmup` unmeasured ones;
/// FPS = frames / total wall-clock seconds.
pub fn fps_benchmark(
    mut frame: impl FnMut() -> Result<()>,
    warmup: usize,
    frames: usize,
) -> Result<FpsReport> {
    if frames == 0 {
        return Err(Error::Config("fps_benchmark wants frames >= 1".into()));
    }
    for _ in 0..warmup {
        frame()?;
    }
    let resolution = timer_resolution();
    let mut latencies = Vec::with_capacity(frames);
    for _ in 0..frames {
        let t0 = Instant::now();
        frame()?;
        latencies.push(t0.elapsed().as_secs_f64());
    }
    let total: f64 = latencies.iter().sum();
    let min_latency = latencies.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(FpsReport {
        fps: frames as f64 / total,
        latencies,
        warmup,
        frames,
        timer_warning: min_latency < 10.0 * resolution,
    })
}

// ---- rendering ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub struct MethodRow {
    pub method: String,
    pub report: MetricsReport,
}

/// Rounds half-up to four decimals (metrics and FPS are non-negative).
pub fn round_half_up_4(x: f64) -> f64 {
    (x * 1e4 + 0.5).floor() / 1e4
}

fn fmt4(x: f64) -> String {
    let n = (x * 1e4 + 0.5).floor() as i64;
    format!("{}.{:04}", n / 10000, n % 10000)
}

/// Renders `Method,DSC,mIoU,Recall,Precision,Accuracy,F2,FPS` rows with
/// four decimal places in input order.
pub fn render_report(rows: &[MethodRow], format: ReportFormat) -> String {
    const COLS: [&str; 8] = [
        "Method", "DSC", "mIoU", "Recall", "Precision", "Accuracy", "F2", "FPS",
    ];
    let cells = |r: &MethodRow| -> Vec<String> {
        let m = &r.report.mean;
        vec![
            r.method.clone(),
            fmt4(m.dsc),
            fmt4(m.iou),
            fmt4(m.recall),
            fmt4(m.precision),
            fmt4(m.accuracy),
            fmt4(m.f2),
            r.report.fps.map(fmt4).unwrap_or_else(|| "-".into()),
        ]
    };
    match format {
        ReportFormat::Csv => {
            let mut out = COLS.join(",");
            out.push('\n');
            for row in rows {
                out.push_str(&cells(row).join(","));
                out.push('\n');
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = format!("| {} |\n", COLS.join(" | "));
            out.push_str(&format!("|{}\n", " --- |".repeat(COLS.len())));
            for row in rows {
                out.push_str(&format!("| {} |\n", cells(row).join(" | ")));
            }
            out
        }
    }
}

// ---- heatmaps -------------------------------------------------------------------

/// Five-stop blue -> cyan -> green -> yellow -> red ramp.
fn colormap(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// Channel-mean -> min-max normalize -> color ramp -> bilinear resize.
/// A constant feature map normalizes to zero and renders all blue.
pub fn activation_heatmap(fmap: &Tensor<f32>, out_size: usize) -> Result<Tensor<f32>> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!(
            "activation_heatmap wants [C,h,w], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut mean = vec![0.0f32; plane];
    for ch in 0..c {
        let src = &fmap.data()[ch * plane..(ch + 1) * plane];
        for (m, &v) in mean.iter_mut().zip(src) {
            *m += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= c as f32;
    }
    let lo = mean.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = mean.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let normed: Vec<f32> = if range > 0.0 {
        mean.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; plane]
    };
    let mut colored = vec![0.0f32; 3 * plane];
    for (i, &t) in normed.iter().enumerate() {
        let rgb = colormap(t);
        for ch in 0..3 {
            colored[ch * plane + i] = rgb[ch];
        }
    }
    let mut out = Vec::with_capacity(3 * out_size * out_size);
    for ch in 0..3 {
        out.extend(kernels::resize_bilinear_plane(
            &colored[ch * plane..(ch + 1) * plane],
            h,
            w,
            out_size,
            out_size,
        ));
    }
    Tensor::new(vec![3, out_size, out_size], out)
}
