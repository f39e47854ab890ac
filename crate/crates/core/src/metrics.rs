//! Depth error metrics and a center-distance detection AP with translation
//! error and a reduced composite score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTH_MAX_RANGE: f64 = 80.0;
pub const MATCH_RADII: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Radius whose true positives define the translation error.
pub const ATE_RADIUS: f64 = 2.0;
pub const RANGE_BANDS: [f64; 4] = [10.0, 20.0, 30.0, 40.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthEvalResult {
    pub const PERFECT: Self = Self {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        delta1: 1.0,
        delta2: 1.0,
        delta3: 1.0,
    };

    /// Arithmetic mean of each field.
    pub fn average(results: &[Self]) -> Option<Self> {
        if results.is_empty() {
            return None;
        }
        let n = results.len() as f64;
        let f = |g: fn(&Self) -> f64| results.iter().map(g).sum::<f64>() / n;
        Some(Self {
            abs_rel: f(|r| r.abs_rel),
            sq_rel: f(|r| r.sq_rel),
            rmse: f(|r| r.rmse),
            rmse_log: f(|r| r.rmse_log),
            delta1: f(|r| r.delta1),
            delta2: f(|r| r.delta2),
            delta3: f(|r| r.delta3),
        })
    }
}

/// Depth metrics over pixels with `0 < gt <= max_range`. Predictions are
/// used as-is, without scale or shift alignment.
pub fn eval_depth(pred: &[f64], gt: &[f64], max_range: f64) -> Result<DepthEvalResult> {
    if pred.len() != gt.len() {
        return Err(Error::shape("eval_depth", &[pred.len()], &[gt.len()]));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for (&p, &g) in pred.iter().zip(gt) {
        if !(g > 0.0 && g <= max_range) {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::Domain(format!("depth prediction {p} is not positive")));
        }
        n += 1;
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        let dl = p.ln() - g.ln();
        se_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Domain("no supervised depth pixels".into()));
    }
    let nf = n as f64;
    Ok(DepthEvalResult {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// A predicted object center in the BEV plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// A ground-truth object center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub x: f64,
    pub y: f64,
}

/// Detections and ground truth of one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEval {
    pub preds: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetEvalResult {
    /// AP per class id averaged over radii; `None` for classes without GT.
    pub class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// Mean center distance of true positives at the 2 m radius.
    pub ate: Option<f64>,
    pub composite: f64,
}

#[derive(Clone, Copy, Debug)]
struct Match {
    score: f64,
    distance: Option<f64>,
}

/// Greedy matching of one class at one radius. Predictions are visited in
/// descending score order (ties by frame then input position) and take the
/// nearest unmatched GT of the same frame within `radius`.
fn match_class(frames: &[FrameEval], class: usize, radius: f64) -> (Vec<Match>, usize) {
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (f, frame) in frames.iter().enumerate() {
        n_gt += frame.gts.iter().filter(|g| g.class == class).count();
        order.extend(
            frame
                .preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.class == class)
                .map(|(i, _)| (f, i)),
        );
    }
    order.sort_by(|a, b| {
        let (pa, pb) = (&frames[a.0].preds[a.1], &frames[b.0].preds[b.1]);
        pb.score.total_cmp(&pa.score).then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut matches = Vec::with_capacity(order.len());
    for (f, i) in order {
        let p = &frames[f].preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in frames[f].gts.iter().enumerate() {
            if g.class != class || taken[f][j] {
                continue;
            }
            let d = (p.x - g.x).hypot(p.y - g.y);
            if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[f][j] = true;
        }
        matches.push(Match {
            score: p.score,
            distance: best.map(|(_, d)| d),
        });
    }
    (matches, n_gt)
}

/// Area under the precision-recall curve by the trapezoidal rule, starting
/// from `(recall 0, precision of the first prediction)`.
fn average_precision(matches: &[Match], n_gt: usize) -> f64 {
    if n_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prev_r = 0.0;
    let mut prev_p = if matches[0].distance.is_some() { 1.0 } else { 0.0 };
    let mut area = 0.0;
    for (i, m) in matches.iter().enumerate() {
        if m.distance.is_some() {
            tp += 1;
        }
        let r = tp as f64 / n_gt as f64;
        let p = tp as f64 / (i + 1) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    area
}

pub fn eval_detection(frames: &[FrameEval], classes: usize, radii: &[f64]) -> DetEvalResult {
    let mut class_ap = Vec::with_capacity(classes);
    let (mut tp_dist, mut tp_count) = (0.0, 0usize);
    for c in 0..classes {
        let mut sum = 0.0;
        let mut n_gt = 0;
        for &r in radii {
            let (matches, n) = match_class(frames, c, r);
            debug_assert!(matches.windows(2).all(|w| w[0].score >= w[1].score));
            n_gt = n;
            sum += average_precision(&matches, n);
        }
        let (m2, _) = match_class(frames, c, ATE_RADIUS);
        for d in m2.iter().filter_map(|m| m.distance) {
            tp_dist += d;
            tp_count += 1;
        }
        class_ap.push((n_gt > 0 && !radii.is_empty()).then(|| sum / radii.len() as f64));
    }
    let present: Vec<f64> = class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let ate = (tp_count > 0).then(|| tp_dist / tp_count as f64);
    let composite = (5.0 * map + 1.0 - ate.unwrap_or(1.0).min(1.0)) / 6.0;
    DetEvalResult {
        class_ap,
        map,
        ate,
        composite,
    }
}

/// mAP restricted to GT and predictions within each radial distance of the
/// ego origin. Bands without GT are reported as `None`.
pub fn eval_range_banded(
    frames: &[FrameEval],
    classes: usize,
    radii: &[f64],
    bands: &[f64],
) -> Vec<(f64, Option<f64>)> {
    bands
        .iter()
        .map(|&band| {
            let inside = |x: f64, y: f64| x.hypot(y) <= band;
            let clipped: Vec<FrameEval> = frames
                .iter()
                .map(|f| FrameEval {
                    preds: f.preds.iter().filter(|p| inside(p.x, p.y)).copied().collect(),
                    gts: f.gts.iter().filter(|g| inside(g.x, g.y)).copied().collect(),
                })
                .collect();
            if clipped.iter().all(|f| f.gts.is_empty()) {
                (band, None)
            } else {
                (band, Some(eval_detection(&clipped, classes, radii).map))
            }
        })
        .collect()
}

/// Header line plus one CSV row per named model.
pub fn metrics_csv(rows: &[(String, DepthEvalResult, DetEvalResult)]) -> String {
    let mut s = String::from("model,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,map,ate,composite\n");
    for (name, d, det) in rows {
        let ate = det.ate.map_or(String::from("nan"), |a| format!("{a:.6}"));
        let _ = writeln!(
            s,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{ate},{:.6}",
            d.abs_rel, d.sq_rel, d.rmse, d.rmse_log, d.delta1, d.delta2, d.delta3, det.map, det.composite
        );
    }
    s
}

/// Fixed-width table of the same rows for terminal output.
pub fn metrics_table(rows: &[(String, DepthEvalResult, DetEvalResult)]) -> String {
    let mut s = format!(
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "model", "AbsRel", "RMSE", "d<1.25", "mAP", "ATE", "score"
    );
    for (name, d, det) in rows {
        let ate = det.ate.map_or(String::from("-"), |a| format!("{a:.3}"));
        let _ = writeln!(
            s,
            "{:<22} {:>8.4} {:>8.3} {:>8.4} {:>8.4} {:>8} {:>8.4}",
            name, d.abs_rel, d.rmse, d.delta1, det.map, ate, det.composite
        );
    }
    s
}
