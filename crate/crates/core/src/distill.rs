//! Distillation and task losses, built from graph ops so they backpropagate
//! into the student. Teacher quantities enter as plain tensors and are
//! therefore detached by construction.

use serde::{Deserialize, Serialize};

use crate::bev_masks::BevGrid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_EPS: f64 = 1e-7;
const MASK_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SoftLabelDistance {
    #[default]
    Bce,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Fine-depth weight inside the depth distillation term.
    pub alpha: f64,
    /// BEV feature distillation weight.
    pub beta: f64,
    /// Depth distillation weight.
    pub gamma: f64,
    pub temperature: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub soft_distance: SoftLabelDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            temperature: 4.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            soft_distance: SoftLabelDistance::Bce,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.temperature > 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.focal_alpha >= 1.0
            && self.focal_beta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

fn same_shape(op: &'static str, g: &Graph, s: Var, t: &Tensor) -> Result<()> {
    if g.shape(s) != t.shape() {
        return Err(Error::shape(op, g.shape(s), t.shape()));
    }
    Ok(())
}

/// `sum(x * w)` for a constant weight tensor of the same shape.
fn weighted_sum(g: &mut Graph, x: Var, w: Tensor) -> Result<Var> {
    let wv = g.constant(w);
    let p = g.mul(x, wv)?;
    Ok(g.sum_all(p))
}

/// Masked L2 between student and teacher BEV features `(C, rows, cols)`,
/// summed over the `K` view masks and normalised by `C * sum(masks)`.
pub fn bev_distill_loss(g: &mut Graph, student: Var, teacher: &Tensor, masks: &[BevGrid]) -> Result<Var> {
    same_shape("bev_distill_loss", g, student, teacher)?;
    let shape = teacher.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("bev_distill_loss", &shape, &[0, 0, 0]));
    }
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let mut weight = vec![0.0; plane];
    let mut mass = 0.0;
    for m in masks {
        if m.channels != 1 || m.spec.rows != shape[1] || m.spec.cols != shape[2] {
            return Err(Error::shape(
                "bev_distill_loss mask",
                &[m.channels, m.spec.rows, m.spec.cols],
                &[1, shape[1], shape[2]],
            ));
        }
        for (w, v) in weight.iter_mut().zip(&m.values) {
            *w += v * v;
            mass += v;
        }
    }
    let w = Tensor::from_fn(&shape, |i| weight[i % plane]);
    let t = g.constant(teacher.clone());
    let diff = g.sub(student, t)?;
    let sq = g.square(diff);
    let total = weighted_sum(g, sq, w)?;
    Ok(g.scale(total, 1.0 / (c as f64 * mass + MASK_EPS)))
}

/// Temperature-scaled cross-entropy of the student depth distribution
/// against the teacher's, `(K, D, Hf, Wf)` logits, times `T^2`.
pub fn coarse_depth_loss(g: &mut Graph, student_logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
    same_shape("coarse_depth_loss", g, student_logits, teacher_logits)?;
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = teacher_logits.shape();
    if shape.len() != 4 {
        return Err(Error::shape("coarse_depth_loss", shape, &[0, 0, 0, 0]));
    }
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;
    let target = softmax_axis1(&teacher_logits.map(|v| v / temperature));
    let scaled = g.scale(student_logits, 1.0 / temperature);
    let log_q = g.log_softmax(scaled, 1)?;
    let s = weighted_sum(g, log_q, target)?;
    Ok(g.scale(s, -temperature * temperature / pixels))
}

/// Softmax over axis 1 of a 4-axis tensor.
pub fn softmax_axis1(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = x.clone();
    let v = out.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let idx = |k: usize| (b * d + k) * plane + p;
            let m = (0..d).map(|k| v[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..d {
                v[idx(k)] = (v[idx(k)] - m).exp();
                z += v[idx(k)];
            }
            for k in 0..d {
                v[idx(k)] /= z;
            }
        }
    }
    out
}

/// Mean squared difference of fine depth maps.
pub fn fine_depth_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    same_shape("fine_depth_loss", g, student, teacher)?;
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// `coarse + alpha * fine`.
pub fn depth_distill_loss(g: &mut Graph, coarse: Var, fine: Var, alpha: f64) -> Result<Var> {
    let f = g.scale(fine, alpha);
    g.add(coarse, f)
}

fn check_unit_interval(op: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("{op}: value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Distance between student and teacher heatmaps (probabilities).
pub fn soft_label_loss(g: &mut Graph, student: Var, teacher: &Tensor, distance: SoftLabelDistance) -> Result<Var> {
    same_shape("soft_label_loss", g, student, teacher)?;
    check_unit_interval("soft_label_loss student", g.value(student).data())?;
    check_unit_interval("soft_label_loss teacher", teacher.data())?;
    match distance {
        SoftLabelDistance::Bce => {
            let n = teacher.len() as f64;
            let s = g.clamp(student, PROB_EPS, 1.0 - PROB_EPS);
            let ls = g.log(s);
            let om = g.one_minus(s);
            let l1s = g.log(om);
            let a = weighted_sum(g, ls, teacher.clone())?;
            let b = weighted_sum(g, l1s, teacher.map(|t| 1.0 - t))?;
            let sum = g.add(a, b)?;
            Ok(g.scale(sum, -1.0 / n))
        }
        SoftLabelDistance::L2 => {
            let t = g.constant(teacher.clone());
            let d = g.sub(student, t)?;
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        }
    }
}

/// `soft + beta * bev + gamma * depth`.
pub fn total_distill_loss(g: &mut Graph, soft: Var, bev: Var, depth: Var, w: &LossWeights) -> Result<Var> {
    let b = g.scale(bev, w.beta);
    let d = g.scale(depth, w.gamma);
    let sb = g.add(soft, b)?;
    g.add(sb, d)
}

/// Penalty-reduced pixel focal loss for center heatmaps. `target` cells equal
/// to 1 are positives; the sum is divided by their count (at least 1).
pub fn center_focal_loss(g: &mut Graph, pred: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
    same_shape("center_focal_loss", g, pred, target)?;
    check_unit_interval("center_focal_loss target", target.data())?;
    let pos = target.map(|y| if y == 1.0 { 1.0 } else { 0.0 });
    let neg = target.map(|y| if y == 1.0 { 0.0 } else { (1.0 - y).powf(beta) });
    let n = pos.data().iter().sum::<f64>().max(1.0);
    let p = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let om = g.one_minus(p);
    let lp = g.log(p);
    let l1p = g.log(om);
    let om_a = g.powf(om, alpha);
    let p_a = g.powf(p, alpha);
    let pos_term = g.mul(om_a, lp)?;
    let neg_term = g.mul(p_a, l1p)?;
    let a = weighted_sum(g, pos_term, pos)?;
    let b = weighted_sum(g, neg_term, neg)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, -1.0 / n))
}

/// Mean-centred scale-invariant log depth loss over pixels with `gt > 0`:
/// `(1 / 2n) * sum (d_i - mean d)^2`, `d = log pred - log gt`.
pub fn scale_invariant_depth_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    same_shape("scale_invariant_depth_loss", g, pred, gt)?;
    let valid = gt.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let n: f64 = valid.data().iter().sum();
    if n == 0.0 {
        return Err(Error::Domain("scale-invariant loss has no valid pixels".into()));
    }
    if let Some((p, _)) = g
        .value(pred)
        .data()
        .iter()
        .zip(gt.data())
        .find(|(p, t)| **t > 0.0 && !(**p > 0.0))
    {
        return Err(Error::Domain(format!("depth prediction {p} is not positive")));
    }
    let log_gt = gt.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
    let safe = g.clamp(pred, f64::MIN_POSITIVE, f64::INFINITY);
    let lp = g.log(safe);
    let lg = g.constant(log_gt);
    let d = g.sub(lp, lg)?;
    let m = g.constant(valid);
    let dm = g.mul(d, m)?;
    let mean = g.sum_all(dm);
    let mean = g.scale(mean, 1.0 / n);
    let centred = g.sub(dm, mean)?;
    let centred = g.mul(centred, m)?;
    let sq = g.square(centred);
    let s = g.sum_all(sq);
    Ok(g.scale(s, 0.5 / n))
}

/// Binary cross-entropy of the depth distribution `(K, D, Hf, Wf)` against
/// the one-hot bin `bins[k, h, w]`, summed over bins and averaged over the
/// supervised pixels (`Some` entries).
pub fn depth_bin_bce_loss(g: &mut Graph, prob: Var, bins: &[Option<usize>]) -> Result<Var> {
    let s = g.shape(prob).to_vec();
    if s.len() != 4 || bins.len() != s[0] * s[2] * s[3] {
        return Err(Error::shape("depth_bin_bce_loss", &s, &[bins.len()]));
    }
    let (d, plane) = (s[1], s[2] * s[3]);
    let n = bins.iter().flatten().count();
    if n == 0 {
        return Err(Error::Domain("depth bin loss has no supervised pixels".into()));
    }
    let mut pos = Tensor::zeros(&s);
    let mut neg = Tensor::zeros(&s);
    for (pix, bin) in bins.iter().enumerate() {
        let Some(b) = *bin else { continue };
        if b >= d {
            return Err(Error::Domain(format!("depth bin {b} out of range for {d} bins")));
        }
        let (k, p) = (pix / plane, pix % plane);
        for dd in 0..d {
            let idx = (k * d + dd) * plane + p;
            if dd == b {
                pos.data_mut()[idx] = 1.0;
            } else {
                neg.data_mut()[idx] = 1.0;
            }
        }
    }
    let p = g.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let lp = g.log(p);
    let om = g.one_minus(p);
    let l1p = g.log(om);
    let a = weighted_sum(g, lp, pos)?;
    let b = weighted_sum(g, l1p, neg)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, -1.0 / n as f64))
}

/// Scalar values of every loss of one step. Terms that are switched off are
/// reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub focal: f64,
    pub sil: f64,
    pub depth_bce: f64,
    pub task: f64,
    pub soft: f64,
    pub bev: f64,
    pub coarse: f64,
    pub fine: f64,
    pub depth: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L_task,L_soft,L_bev,L_cd,L_fd,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.task, self.soft, self.bev, self.coarse, self.fine, self.total
        )
    }
}
