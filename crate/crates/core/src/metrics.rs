//! Segmentation and flow evaluation: region similarity J, contour accuracy
//! F, a flow-warped temporal-stability proxy T, average endpoint error, and
//! flip-ensemble inference.
//!
//! T here is a proxy, not the benchmark's contour-matching measure: the mean
//! over transitions of `1 - IoU(forward-warp(mask_t, flow_t), mask_{t+1})`.
//! Reports label it `T-proxy`. Lower is smoother.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SegFlowModel, SegFlowOutput};
use crate::tensor::Tensor;
use crate::types::{FramePair, Mask};

pub const DEFAULT_BOUNDARY_TOLERANCE: usize = 2;
pub const RECALL_THRESHOLD: f64 = 0.5;

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Intersection over union; two empty masks agree perfectly (1.0).
pub fn region_similarity(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour (inside the image) in the background.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    Mask::from_fn(h, w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        (y > 0 && !mask.get(y - 1, x))
            || (y + 1 < h && !mask.get(y + 1, x))
            || (x > 0 && !mask.get(y, x - 1))
            || (x + 1 < w && !mask.get(y, x + 1))
    })
}

/// Dilation by a Euclidean disk of radius `r`.
fn dilate(mask: &Mask, r: usize) -> Mask {
    let (h, w) = mask.shape();
    let ri = r as isize;
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dy * dy + dx * dx > ri * ri {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        out.set(ny as usize, nx as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a `tolerance_px` matching band.
pub fn contour_accuracy(pred: &Mask, gt: &Mask, tolerance_px: usize) -> Result<f64> {
    same_shape(pred, gt)?;
    let bp = boundary(pred);
    let bg = boundary(gt);
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let gt_band = dilate(&bg, tolerance_px);
    let pred_band = dilate(&bp, tolerance_px);
    let hits = |b: &Mask, band: &Mask| b.data().iter().zip(band.data()).filter(|(&p, &q)| p && q).count();
    let precision = hits(&bp, &gt_band) as f64 / np as f64;
    let recall = hits(&bg, &pred_band) as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTriplet {
    pub mean: f64,
    pub recall: f64,
    pub decay: f64,
}

/// Mean, recall (fraction above `threshold`) and decay (first temporal
/// quartile mean minus last quartile mean). Quartiles split frames by index
/// into four nearly equal bins, larger bins first. Sequences shorter than
/// four frames use their first and last values as the quartile means.
pub fn stat_triplet(values: &[f64], threshold: f64) -> StatTriplet {
    assert!(!values.is_empty(), "stat_triplet of an empty sequence");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let recall = values.iter().filter(|&&v| v > threshold).count() as f64 / n as f64;
    let decay = if n < 4 {
        values[0] - values[n - 1]
    } else {
        let base = n / 4;
        let extra = n % 4;
        let len = |i: usize| base + usize::from(i < extra);
        let first = &values[..len(0)];
        let last = &values[n - len(3)..];
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        avg(first) - avg(last)
    };
    StatTriplet { mean, recall, decay }
}

/// Push `mask` forward along `flow` (nearest-pixel splat).
pub fn forward_warp_mask(mask: &Mask, flow: &Tensor) -> Mask {
    let (h, w) = mask.shape();
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let tx = (x as f64 + flow.at(0, y, x) + 0.5).floor();
            let ty = (y as f64 + flow.at(1, y, x) + 0.5).floor();
            if tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                out.set(ty as usize, tx as usize, true);
            }
        }
    }
    out
}

/// Mean over transitions of `1 - IoU(warp(mask_t, flow_t), mask_{t+1})`.
pub fn temporal_stability_proxy(masks: &[Mask], flows: &[Tensor]) -> Result<f64> {
    if masks.len() < 2 {
        return Err(Error::Data("temporal stability needs at least two frames".into()));
    }
    if flows.len() < masks.len() - 1 {
        return Err(Error::Data(format!("{} flows for {} frames", flows.len(), masks.len())));
    }
    let mut total = 0.0;
    for (t, pair) in masks.windows(2).enumerate() {
        if flows[t].shape() != [2, pair[0].height(), pair[0].width()] {
            return Err(Error::Shape(format!("flow {:?} vs mask {:?}", flows[t].shape(), pair[0].shape())));
        }
        let warped = forward_warp_mask(&pair[0], &flows[t]);
        total += 1.0 - region_similarity(&warped, &pair[1])?;
    }
    Ok(total / (masks.len() - 1) as f64)
}

/// Mean over valid pixels of `sqrt((u - δu)² + (v - δv)²)`.
pub fn average_endpoint_error(pred: &Tensor, gt: &Tensor, valid: Option<&Mask>) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.dims3().0 != 2 {
        return Err(Error::Shape(format!("flow {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (_, h, w) = pred.dims3();
    if let Some(v) = valid {
        if v.shape() != (h, w) {
            return Err(Error::Shape(format!("flow_valid {:?} vs flow {:?}", v.shape(), (h, w))));
        }
    }
    let (pu, pv, gu, gv) = (pred.channel(0), pred.channel(1), gt.channel(0), gt.channel(1));
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..h * w {
        if valid.is_none_or(|m| m.data()[i]) {
            sum += ((pu[i] - gu[i]).powi(2) + (pv[i] - gv[i]).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(sum / n as f64)
}

/// Foreground probability map of 2-channel logits.
pub fn foreground_probability(logits: &Tensor) -> Tensor {
    let (_, h, w) = logits.dims3();
    let p = logits
        .channel(0)
        .iter()
        .zip(logits.channel(1))
        .map(|(&b, &f)| 1.0 / (1.0 + (b - f).exp()))
        .collect();
    Tensor::from_vec(&[1, h, w], p)
}

/// Average the prediction on `pair` with the un-mirrored prediction on its
/// horizontal mirror. Segmentation is averaged in probability space and
/// returned as log-probabilities (a valid logit pair); flow `u` is negated
/// before un-mirroring. The model is only read.
pub fn flip_ensemble_infer(model: &SegFlowModel, pair: &FramePair) -> Result<SegFlowOutput> {
    let direct = model.forward(pair)?;
    let mirrored = model.forward(&pair.flip_horizontal())?;

    let p1 = foreground_probability(&direct.seg_logits);
    let p2 = foreground_probability(&mirrored.seg_logits).flip_horizontal();
    let (_, h, w) = p1.dims3();
    let mut seg = Tensor::zeros(&[2, h, w]);
    for i in 0..h * w {
        let p = 0.5 * (p1.data()[i] + p2.data()[i]);
        seg.data_mut()[i] = (1.0 - p).ln();
        seg.data_mut()[h * w + i] = p.ln();
    }

    let mut back = mirrored.flow_pred.flip_horizontal();
    for v in back.channel_mut(0) {
        *v = -*v;
    }
    let mut flow = direct.flow_pred.clone();
    flow.add_assign(&back);
    flow.scale(0.5);
    Ok(SegFlowOutput {
        seg_logits: seg,
        flow_pred: flow,
    })
}

/// Per-frame J and F of one sequence and its T-proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub per_frame_j: Vec<f64>,
    pub per_frame_f: Vec<f64>,
    pub t_proxy: f64,
    pub frames: usize,
}

impl SequenceEval {
    /// Evaluate predicted masks against ground truth; `flows[t]` carries
    /// frame t to t+1 and drives the T-proxy.
    pub fn evaluate(pred: &[Mask], gt: &[Mask], flows: &[Tensor], tolerance_px: usize) -> Result<Self> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::Data(format!("{} predictions for {} annotations", pred.len(), gt.len())));
        }
        let per_frame_j = pred.iter().zip(gt).map(|(p, g)| region_similarity(p, g)).collect::<Result<Vec<_>>>()?;
        let per_frame_f = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| contour_accuracy(p, g, tolerance_px))
            .collect::<Result<Vec<_>>>()?;
        let t_proxy = if pred.len() >= 2 {
            temporal_stability_proxy(pred, flows)?
        } else {
            0.0
        };
        Ok(Self {
            per_frame_j,
            per_frame_f,
            t_proxy,
            frames: pred.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub j_mean: f64,
    pub j_recall: f64,
    pub j_decay: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub f_decay: f64,
    pub t_mean: f64,
    pub per_sequence: BTreeMap<String, SequenceEval>,
    pub epe: Option<f64>,
}

impl EvalReport {
    /// Aggregate per-sequence evaluations: statistics are computed per
    /// sequence, then averaged over sequences.
    pub fn from_sequences(per_sequence: BTreeMap<String, SequenceEval>, epe: Option<f64>) -> Result<Self> {
        if per_sequence.is_empty() {
            return Err(Error::Data("no sequences to report".into()));
        }
        let n = per_sequence.len() as f64;
        let (mut j, mut f) = ([0.0; 3], [0.0; 3]);
        let mut t = 0.0;
        for s in per_sequence.values() {
            let sj = stat_triplet(&s.per_frame_j, RECALL_THRESHOLD);
            let sf = stat_triplet(&s.per_frame_f, RECALL_THRESHOLD);
            for (acc, v) in j.iter_mut().zip([sj.mean, sj.recall, sj.decay]) {
                *acc += v;
            }
            for (acc, v) in f.iter_mut().zip([sf.mean, sf.recall, sf.decay]) {
                *acc += v;
            }
            t += s.t_proxy;
        }
        Ok(Self {
            j_mean: j[0] / n,
            j_recall: j[1] / n,
            j_decay: j[2] / n,
            f_mean: f[0] / n,
            f_recall: f[1] / n,
            f_decay: f[2] / n,
            t_mean: t / n,
            per_sequence,
            epe,
        })
    }

    /// Recompute the aggregates from the stored sequences.
    pub fn recompute(&self) -> Result<Self> {
        Self::from_sequences(self.per_sequence.clone(), self.epe)
    }

    /// One row per statistic.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>10}", "Measure", "Value");
        for (name, v) in [
            ("J Mean", self.j_mean),
            ("J Recall", self.j_recall),
            ("J Decay", self.j_decay),
            ("F Mean", self.f_mean),
            ("F Recall", self.f_recall),
            ("F Decay", self.f_decay),
            ("T-proxy Mean", self.t_mean),
        ] {
            let _ = writeln!(s, "{name:<16}{v:>10.4}");
        }
        if let Some(e) = self.epe {
            let _ = writeln!(s, "{:<16}{e:>10.4}", "EPE");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
