//! Sequence-level inference and evaluation.
//!
//! Frame `t` is predicted from the pair `(t, t+1)`. Scored frames exclude the
//! first (its mask is the given annotation) and the last (it has no
//! successor); two-frame sequences score frame 0. The T-proxy warps predicted
//! masks with ground-truth flow when the sequence has it, otherwise with the
//! predicted flow.

use std::collections::BTreeMap;

use crate::data::layout::Sequence;
use crate::error::{Error, Result};
use crate::metrics::{average_endpoint_error, flip_ensemble_infer, EvalReport, SequenceEval, DEFAULT_BOUNDARY_TOLERANCE};
use crate::model::{SegFlowModel, SegFlowOutput};
use crate::tensor::Tensor;
use crate::training::{online_finetune, TrainConfig};
use crate::types::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub flip_ensemble: bool,
    pub boundary_tolerance: usize,
    /// Fine-tune a copy of the model on each sequence's first mask first.
    pub online: Option<TrainConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            flip_ensemble: false,
            boundary_tolerance: DEFAULT_BOUNDARY_TOLERANCE,
            online: None,
        }
    }
}

/// Indices of the frames that are scored in a sequence of `n` frames.
pub fn scored_frames(n: usize) -> Vec<usize> {
    if n <= 2 {
        vec![0]
    } else {
        (1..n - 1).collect()
    }
}

/// Outputs for every pair `(t, t+1)` of a sequence.
pub fn predict_sequence(model: &SegFlowModel, seq: &Sequence, flip_ensemble: bool) -> Result<Vec<SegFlowOutput>> {
    (0..seq.len().saturating_sub(1))
        .map(|t| {
            let pair = seq.pair(t);
            if flip_ensemble {
                flip_ensemble_infer(model, &pair)
            } else {
                model.forward(&pair)
            }
        })
        .collect()
}

/// Mean endpoint error over the scored frames, or `None` without flow ground truth.
fn sequence_epe(seq: &Sequence, flows: &[Tensor]) -> Result<Option<(f64, usize)>> {
    let Some(gt) = &seq.flows else { return Ok(None) };
    let mut sum = 0.0;
    let mut n = 0;
    for t in scored_frames(seq.len()) {
        if gt[t].1.is_empty() {
            continue;
        }
        sum += average_endpoint_error(&flows[t], &gt[t].0, Some(&gt[t].1))?;
        n += 1;
    }
    Ok(Some((sum, n)))
}

/// Score predicted masks (one per pair, i.e. frames `0..n-1`) against a sequence.
pub fn score_masks(seq: &Sequence, masks: &[Mask], flows: &[Tensor], tolerance: usize) -> Result<SequenceEval> {
    let frames = scored_frames(seq.len());
    let mut pred = Vec::with_capacity(frames.len());
    let mut gt = Vec::with_capacity(frames.len());
    let mut warp = Vec::with_capacity(frames.len());
    for &t in &frames {
        let mask = seq.masks[t]
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sequence {} lacks an annotation for frame {}", seq.id, seq.frame_names[t])))?;
        pred.push(masks.get(t).cloned().ok_or_else(|| Error::Data(format!("no prediction for frame {t} of {}", seq.id)))?);
        gt.push(mask.clone());
        warp.push(match &seq.flows {
            Some(f) => f[t].0.clone(),
            None => flows[t].clone(),
        });
    }
    SequenceEval::evaluate(&pred, &gt, &warp, tolerance)
}

/// Evaluate one sequence; returns its scores and summed EPE over scored frames.
pub fn evaluate_sequence(model: &SegFlowModel, seq: &Sequence, options: &EvalOptions) -> Result<(SequenceEval, Option<(f64, usize)>)> {
    let adapted;
    let model = match &options.online {
        Some(cfg) => {
            let first = seq.masks[0]
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sequence {} has no first-frame mask", seq.id)))?;
            let mut m = model.clone();
            online_finetune(&mut m, &seq.frames[0], first, cfg)?;
            adapted = m;
            &adapted
        }
        None => model,
    };
    let outputs = predict_sequence(model, seq, options.flip_ensemble)?;
    let masks: Vec<Mask> = outputs.iter().map(|o| Mask::from_logits(&o.seg_logits)).collect();
    let flows: Vec<Tensor> = outputs.into_iter().map(|o| o.flow_pred).collect();
    let eval = score_masks(seq, &masks, &flows, options.boundary_tolerance)?;
    Ok((eval, sequence_epe(seq, &flows)?))
}

pub fn evaluate_sequences(model: &SegFlowModel, seqs: &[Sequence], options: &EvalOptions) -> Result<EvalReport> {
    let mut per_sequence = BTreeMap::new();
    let (mut epe_sum, mut epe_n, mut any_flow) = (0.0, 0usize, false);
    for seq in seqs {
        let (eval, epe) = evaluate_sequence(model, seq, options)?;
        if let Some((s, n)) = epe {
            any_flow = true;
            epe_sum += s;
            epe_n += n;
        }
        per_sequence.insert(seq.id.clone(), eval);
    }
    let epe = (any_flow && epe_n > 0).then(|| epe_sum / epe_n as f64);
    EvalReport::from_sequences(per_sequence, epe)
}
