//! Evaluation metrics and reports.
//!
//! Depth quality is reported as L1 error and AbsRel for both supervision
//! kinds (pixel-wise surface depth, object-wise center depth), detection
//! quality as mean translation error over Hungarian-matched pairs and a
//! center-distance average precision. Everything is reported overall and in
//! distance buckets (>0 m, >20 m, >40 m by the ground truth center's
//! horizontal distance from the origin).

use std::fmt::Write as _;
use thiserror::Error;

/// Bucket thresholds in meters; an entity belongs to bucket t when its
/// ground-truth center's horizontal distance exceeds t.
pub const BUCKET_THRESHOLDS: [f64; 3] = [0.0, 20.0, 40.0];
pub const BUCKET_LABELS: [&str; 3] = [">0", ">20", ">40"];

/// AbsRel denominators at or below this are excluded (with a counter).
const ABSREL_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthErrors {
    pub l1: f64,
    pub abs_rel: f64,
    pub count: usize,
    /// Entries whose ground truth was too small for a relative error.
    pub absrel_excluded: usize,
}

/// Mean |pred - gt| and mean |pred - gt| / gt over masked-valid entries.
pub fn depth_errors(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
) -> Result<DepthErrors, MetricsError> {
    let mut l1_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut n = 0usize;
    let mut n_rel = 0usize;
    let mut excluded = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        l1_sum += (p - g).abs();
        n += 1;
        if g > ABSREL_FLOOR {
            rel_sum += (p - g).abs() / g;
            n_rel += 1;
        } else {
            excluded += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::Undefined("no valid depth entries"));
    }
    Ok(DepthErrors {
        l1: l1_sum / n as f64,
        abs_rel: if n_rel > 0 { rel_sum / n_rel as f64 } else { 0.0 },
        count: n,
        absrel_excluded: excluded,
    })
}

/// Mean Euclidean distance between matched predicted and true 3D centers.
pub fn translation_error(pairs: &[([f64; 3], [f64; 3])]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Undefined("no matched pairs"));
    }
    let total: f64 = pairs
        .iter()
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

pub fn horizontal_distance(center: [f64; 3]) -> f64 {
    (center[0] * center[0] + center[1] * center[1]).sqrt()
}

pub fn in_bucket(distance: f64, threshold: f64) -> bool {
    distance > threshold
}

/// Average precision at a center-distance threshold: detections are matched
/// greedily in descending score order (2D center distance), and AP is the
/// area under the raw precision-recall step curve.
///
/// Edge rules: no ground truths and no detections is a perfect 1.0; no
/// ground truths with detections is 0.0; no detections against ground truths
/// is 0.0.
pub fn center_distance_ap(
    dets: &[(f64, [f64; 3])],
    gts: &[[f64; 3]],
    match_threshold: f64,
) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    if dets.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].0
            .partial_cmp(&dets[a].0)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for &di in &order {
        let (_, dc) = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &gc) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let dist =
                ((dc[0] - gc[0]).powi(2) + (dc[1] - gc[1]).powi(2)).sqrt();
            if dist <= match_threshold && best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = tp as f64 / gts.len() as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - last_recall) * precision;
        last_recall = recall;
    }
    ap
}

/// One report line: a metric in a distance bucket. `value` is None when the
/// metric is undefined on that bucket (empty population).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub bucket: &'static str,
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, metric: &str, bucket: &'static str, value: Option<f64>, count: usize) {
        self.rows.push(ReportRow {
            metric: metric.to_string(),
            bucket,
            value,
            count,
        });
    }

    pub fn get(&self, metric: &str, bucket: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.bucket == bucket)
            .and_then(|r| r.value)
    }

    /// CSV with one row per metric x bucket, tagged with the run's
    /// position-embedding variant.
    pub fn to_csv(&self, variant: &str) -> String {
        let mut out = String::from("variant,metric,bucket,value,count\n");
        for r in &self.rows {
            let value = r
                .value
                .map(|v| format!("{v:.9}"))
                .unwrap_or_else(|| "undefined".to_string());
            writeln!(out, "{variant},{},{},{value},{}", r.metric, r.bucket, r.count)
                .expect("string write");
        }
        out
    }
}

/// Minimal grouped bar chart as an SVG document.
pub fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let width = 80 + bars.len() * 90;
    let height = 320;
    let max = bars.iter().map(|b| b.1).fold(f64::MIN_POSITIVE, f64::max);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n\
         <text x=\"10\" y=\"20\" font-size=\"14\">{title}</text>\n"
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let h = (value / max * 220.0).max(1.0);
        let x = 50 + i * 90;
        let y = 260.0 - h;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{y:.1}\" width=\"60\" height=\"{h:.1}\" fill=\"#4477aa\"/>\n\
             <text x=\"{x}\" y=\"278\" font-size=\"11\">{label}</text>\n\
             <text x=\"{x}\" y=\"{:.1}\" font-size=\"11\">{value:.3}</text>",
            y - 5.0
        );
    }
    s.push_str("</svg>\n");
    s
}
