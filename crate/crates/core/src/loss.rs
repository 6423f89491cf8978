//! Deep-supervised CE + Dice objective and the DSC metric.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels::interp_taps;
use crate::model::Pyramid;
use crate::tensor::Scalar;

pub const DICE_EPS: f64 = 1e-5;

/// Mean cross-entropy of `[K, spatial...]` logits.
pub fn ce_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: Rc<[u8]>) -> Result<Var<'g, T>> {
    logits.cross_entropy(labels)
}

/// Soft Dice over foreground classes of `softmax(logits)`.
pub fn dice_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: Rc<[u8]>) -> Result<Var<'g, T>> {
    logits.softmax(0)?.dice_loss(labels, DICE_EPS)
}

/// Nearest-neighbour label resampling from `from` to `to` (both `[D, H, W]`),
/// using the same source-index rule as nearest interpolation.
pub fn downsample_labels(labels: &[u8], from: [usize; 3], to: [usize; 3]) -> Vec<u8> {
    if from == to {
        return labels.to_vec();
    }
    let src: Vec<Vec<usize>> = (0..3)
        .map(|a| interp_taps(from[a], to[a], false).iter().map(|t| t[0].0).collect())
        .collect();
    let mut out = Vec::with_capacity(to.iter().product());
    for &d in &src[0] {
        for &h in &src[1] {
            for &w in &src[2] {
                out.push(labels[(d * from[1] + h) * from[2] + w]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    /// `p2d_i` or `p3d_res_i`.
    pub output: String,
    pub weight: f64,
    pub ce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    /// `Σ weight · (ce + dice)` recomputed from the terms.
    pub fn recompute(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * (t.ce + t.dice)).sum()
    }
}

/// Per-branch weights normalized to sum to one.
pub fn normalized(weights: [f64; 4]) -> [f64; 4] {
    let s: f64 = weights.iter().sum();
    weights.map(|w| w / s)
}

/// CE + Dice on the four 2D outputs and the four residual 3D outputs, with
/// labels (`[D, H, W]`, full resolution) nearest-downsampled to each output.
/// Weights are normalized within each branch.
pub fn deep_supervised_loss<'g, T: Scalar>(
    pyr: &Pyramid<'g, T>,
    labels: &[u8],
    dims: [usize; 3],
    weights: [f64; 4],
) -> Result<(Var<'g, T>, LossReport)> {
    let w = normalized(weights);
    weighted_loss(pyr, labels, dims, w)
}

/// [`deep_supervised_loss`] with the weights used as given.
pub fn weighted_loss<'g, T: Scalar>(
    pyr: &Pyramid<'g, T>,
    labels: &[u8],
    dims: [usize; 3],
    weights: [f64; 4],
) -> Result<(Var<'g, T>, LossReport)> {
    if labels.len() != dims.iter().product::<usize>() {
        return Err(Error::shape("loss", format!("{} labels for extent {dims:?}", labels.len())));
    }
    let mut total: Option<Var<'g, T>> = None;
    let mut terms = Vec::new();
    for (branch, outs) in [("p2d", &pyr.p2d), ("p3d_res", &pyr.p3d_res)] {
        for (i, &logits) in outs.iter().enumerate() {
            let s = logits.shape();
            let lab: Rc<[u8]> = Rc::from(downsample_labels(labels, dims, [s[1], s[2], s[3]]));
            let ce = ce_loss(logits, lab.clone())?;
            let dice = dice_loss(logits, lab)?;
            let term = ce.add(dice)?.scale(weights[i])?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
            terms.push(LossTerm {
                output: format!("{branch}_{i}"),
                weight: weights[i],
                ce: ce.value().data()[0].as_f64(),
                dice: dice.value().data()[0].as_f64(),
            });
        }
    }
    let total = total.ok_or_else(|| Error::invalid("loss", "empty prediction pyramid"))?;
    let report = LossReport {
        total: total.value().data()[0].as_f64(),
        terms,
    };
    Ok((total, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dsc {
    /// Foreground classes `1..K`.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// `2|P∩G| / (|P| + |G|)` per foreground class; a class absent from both
/// scores 1.
pub fn dsc_metric(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<Dsc> {
    if pred.len() != truth.len() {
        return Err(Error::shape("dsc", format!("{} vs {} voxels", pred.len(), truth.len())));
    }
    if num_classes < 2 {
        return Err(Error::invalid("dsc", "needs at least two classes"));
    }
    let mut inter = vec![0usize; num_classes];
    let mut np = vec![0usize; num_classes];
    let mut ng = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(truth) {
        if p as usize >= num_classes || g as usize >= num_classes {
            return Err(Error::invalid("dsc", format!("label {} out of range", p.max(g))));
        }
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<f64> = (1..num_classes)
        .map(|c| {
            if np[c] + ng[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / (np[c] + ng[c]) as f64
            }
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(Dsc { per_class, mean })
}
