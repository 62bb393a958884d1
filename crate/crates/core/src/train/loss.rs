use crate::geom::BoxDelta;
use crate::tensor::{Backward, Element, Graph, NodeId, Tensor, TensorError};

/// Robust regression penalty: `0.5 x^2` inside `|x| < 1`, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Sum of [`smooth_l1`] over the four delta components.
pub fn localization_loss(predicted: &BoxDelta, target: &BoxDelta) -> f64 {
    let (p, t) = (predicted.to_array(), target.to_array());
    (0..4).map(|k| smooth_l1(p[k] - t[k])).sum()
}

/// `-log s` for positives, `-log(1 - s)` for negatives.
pub fn classification_loss(score: f64, positive: bool) -> f64 {
    if positive {
        -score.ln()
    } else {
        -(1.0 - score).ln()
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Classification loss from a pre-logistic logit; equal to
/// `classification_loss(sigmoid(z), positive)` but finite for any `z`.
pub fn classification_loss_logit(z: f64, positive: bool) -> f64 {
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// One supervised row of a stage: index into the stage's outputs, label,
/// and the regression target for positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSample {
    pub index: usize,
    pub positive: bool,
    pub target: Option<BoxDelta>,
}

/// Mean classification and localization terms of one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTerms {
    pub cls: f64,
    pub loc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl StageTerms {
    pub fn total(&self, lambda: f64) -> f64 {
        self.cls + lambda * self.loc
    }
}

struct StageLossOp {
    samples: Vec<StageSample>,
    lambda: f64,
}

impl<T: Element> Backward<T> for StageLossOp {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let upstream = grad.data()[0].to_f64().expect("float");
        let (deltas, logits) = (inputs[0], inputs[1]);
        let n = self.samples.len().max(1) as f64;
        let pos = self.samples.iter().filter(|s| s.positive).count();
        let mut gd = needs[0].then(|| Tensor::zeros(deltas.shape()));
        let mut gl = needs[1].then(|| Tensor::zeros(logits.shape()));
        for s in &self.samples {
            if let Some(gl) = gl.as_mut() {
                let z = logits.data()[s.index].to_f64().expect("float");
                let p = crate::tensor::sigmoid(z);
                let dz = if s.positive { p - 1.0 } else { p };
                gl.data_mut()[s.index] += T::from_f64_lossy(upstream * dz / n);
            }
            if let (Some(gd), Some(t), true) = (gd.as_mut(), s.target, s.positive) {
                let t = t.to_array();
                for k in 0..4 {
                    let d = deltas.data()[4 * s.index + k].to_f64().expect("float");
                    gd.data_mut()[4 * s.index + k] += T::from_f64_lossy(upstream * self.lambda * smooth_l1_grad(d - t[k]) / pos as f64);
                }
            }
        }
        vec![gd, gl]
    }
}

/// Evaluates a stage's terms from raw delta (`[N, 4]`) and logit (`[N, 1]`)
/// values.
pub fn stage_terms<T: Element>(deltas: &Tensor<T>, logits: &Tensor<T>, samples: &[StageSample]) -> StageTerms {
    let mut terms = StageTerms::default();
    let (mut cls, mut loc) = (0.0, 0.0);
    for s in samples {
        let z = logits.data()[s.index].to_f64().expect("float");
        cls += classification_loss_logit(z, s.positive);
        if s.positive {
            terms.positives += 1;
            if let Some(t) = s.target {
                let d: Vec<f64> = deltas.data()[4 * s.index..4 * s.index + 4].iter().map(|v| v.to_f64().expect("float")).collect();
                loc += localization_loss(&BoxDelta::from_slice(&d), &t);
            }
        } else {
            terms.negatives += 1;
        }
    }
    if !samples.is_empty() {
        terms.cls = cls / samples.len() as f64;
    }
    if terms.positives > 0 {
        terms.loc = loc / terms.positives as f64;
    }
    terms
}

/// Appends `L_stage = mean cls over samples + lambda * mean loc over
/// positives` as a scalar node.
pub fn stage_loss<T: Element>(g: &mut Graph<T>, deltas: NodeId, logits: NodeId, samples: &[StageSample], lambda: f64) -> Result<(NodeId, StageTerms), TensorError> {
    let (dv, lv) = (g.value(deltas), g.value(logits));
    let rows = lv.len();
    if dv.rank() != 2 || dv.shape()[1] != 4 || lv.shape() != [rows, 1] || dv.shape()[0] != rows {
        return Err(crate::tensor::shape_err("stage_loss", format!("deltas {:?} / logits {:?}", dv.shape(), lv.shape())));
    }
    if let Some(s) = samples.iter().find(|s| s.index >= rows) {
        return Err(crate::tensor::shape_err("stage_loss", format!("sample index {} of {rows} rows", s.index)));
    }
    let terms = stage_terms(dv, lv, samples);
    let value = Tensor::scalar(T::from_f64_lossy(terms.total(lambda)));
    let op = StageLossOp { samples: samples.to_vec(), lambda };
    Ok((g.custom("stage_loss", &[deltas, logits], value, Box::new(op)), terms))
}

/// Loss of a stage sample given its score rather than its logit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub positive: bool,
    pub predicted: BoxDelta,
    pub target: BoxDelta,
}

/// Per-iteration loss report.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub pn_cls: f64,
    pub pn_loc: f64,
    pub ftn_cls: f64,
    pub ftn_loc: f64,
    pub pn_positives: usize,
    pub pn_negatives: usize,
    pub ftn_positives: usize,
    pub ftn_negatives: usize,
}

impl LossBreakdown {
    pub fn combine(pn: StageTerms, ftn: StageTerms, alpha: f64, lambda: f64) -> Self {
        Self {
            total: alpha * pn.total(lambda) + (1.0 - alpha) * ftn.total(lambda),
            pn_cls: pn.cls,
            pn_loc: pn.loc,
            ftn_cls: ftn.cls,
            ftn_loc: ftn.loc,
            pn_positives: pn.positives,
            pn_negatives: pn.negatives,
            ftn_positives: ftn.positives,
            ftn_negatives: ftn.negatives,
        }
    }
}

fn scored_terms(samples: &[ScoredSample]) -> StageTerms {
    let mut t = StageTerms::default();
    let (mut cls, mut loc) = (0.0, 0.0);
    for s in samples {
        cls += classification_loss(s.score, s.positive);
        if s.positive {
            t.positives += 1;
            loc += localization_loss(&s.predicted, &s.target);
        } else {
            t.negatives += 1;
        }
    }
    if !samples.is_empty() {
        t.cls = cls / samples.len() as f64;
    }
    if t.positives > 0 {
        t.loc = loc / t.positives as f64;
    }
    t
}

/// `alpha * L_pn + (1 - alpha) * L_ftn` over already-selected samples.
pub fn multistage_loss(pn: &[ScoredSample], ftn: &[ScoredSample], alpha: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown::combine(scored_terms(pn), scored_terms(ftn), alpha, lambda)
}
