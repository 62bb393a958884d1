//! Target assignment, the two-stage loss, hard example mining and the SGD
//! loop.

mod assign;
mod loss;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Sample;
use crate::geom::BBox;
use crate::model::{ConcatMode, Mode, Model, ModelError};
use crate::tensor::{Element, Graph, NodeId, Tensor, TensorError};

pub use assign::{
    assign_ftn_targets, assign_pn_targets, hard_mine, sample_minibatch, Assignment, Label, FTN_NEGATIVE_BAND,
    FTN_POSITIVE_IOU, PN_NEGATIVE_IOU, PN_POSITIVE_IOU,
};
pub use loss::{
    classification_loss, classification_loss_logit, localization_loss, multistage_loss, smooth_l1, stage_loss,
    stage_terms, LossBreakdown, ScoredSample, StageSample, StageTerms,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },
    #[error("training needs at least one image")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("writing loss log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_drop_iteration: u64,
    pub lr_after_drop: f64,
    pub total_iterations: u64,
    /// Samples per stage per iteration (PN and FTN independently).
    pub minibatch: usize,
    pub pn_pos_fraction: f64,
    pub ftn_pos_fraction: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub hard_mine_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_drop_iteration: 50_000,
            lr_after_drop: 1e-4,
            total_iterations: 70_000,
            minibatch: 256,
            pn_pos_fraction: 0.5,
            ftn_pos_fraction: 1.0,
            alpha: 0.5,
            lambda: 1.0,
            hard_mine_fraction: 0.7,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: 0.0,
            seed: 1,
            checkpoint_every: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            lr_initial: 1e-2,
            lr_drop_iteration: 3_000,
            lr_after_drop: 1e-3,
            total_iterations: 5_000,
            momentum: 0.9,
            grad_clip: 10.0,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must lie in (0, 1)");
        }
        if !(self.hard_mine_fraction > 0.0 && self.hard_mine_fraction <= 1.0) {
            return fail("hard_mine_fraction must lie in (0, 1]");
        }
        if self.minibatch == 0 {
            return fail("minibatch must be at least 1");
        }
        for (name, v) in [("pn_pos_fraction", self.pn_pos_fraction), ("ftn_pos_fraction", self.ftn_pos_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.lr_initial >= 0.0 && self.lr_after_drop >= 0.0 && self.lambda >= 0.0) {
            return fail("learning rates and lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("momentum must lie in [0, 1); weight_decay and grad_clip non-negative");
        }
        Ok(())
    }

    /// Learning rate in effect for the 0-based iteration `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.lr_drop_iteration {
            self.lr_initial
        } else {
            self.lr_after_drop
        }
    }
}

/// The discrete choices of one training step: which samples are supervised
/// and which proposals reach the FTN. Replaying a plan makes the loss a
/// smooth function of the parameters, which the end-to-end gradient check
/// relies on.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub pn_samples: Vec<StageSample>,
    /// Proposals fed to the FTN: box and generating anchor.
    pub ftn_rows: Vec<(BBox, usize)>,
    /// FTN samples after hard mining; indices into `ftn_rows`.
    pub ftn_samples: Vec<StageSample>,
}

/// Where the step's discrete choices come from.
pub enum PlanSource<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Replay(&'a StepPlan),
}

/// Graph holding one step's forward pass and loss.
pub struct StepGraph<T: Element> {
    pub graph: Graph<T>,
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
    pub plan: StepPlan,
    pub batch_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

fn to_samples(indices: &[usize], assignments: &[Assignment]) -> Vec<StageSample> {
    indices
        .iter()
        .enumerate()
        .map(|(row, &i)| StageSample {
            index: row,
            positive: assignments[i].label == Label::Positive,
            target: assignments[i].target,
        })
        .collect()
}

/// Builds the full training forward pass for one image: backbone in train
/// mode, PN over all anchors with a sampled minibatch, the PN inference path
/// to obtain proposals, the FTN over a sampled proposal minibatch, hard
/// mining, and `alpha * L_pn + (1 - alpha) * L_ftn`.
pub fn build_step<T: Element>(model: &Model<T>, sample: &Sample, cfg: &TrainConfig, source: PlanSource<'_>) -> Result<StepGraph<T>, TrainError> {
    let mcfg = model.config();
    let mut g = Graph::new();
    let image: Tensor<T> = sample.image.cast();
    let dcn = model.build_dcn(&mut g, &image, Mode::Train)?;
    let pn = model.build_pn(&mut g, dcn.hyper)?;

    let (plan, mut rng) = match source {
        PlanSource::Replay(plan) => (Some(plan.clone()), None),
        PlanSource::Fresh(rng) => (None, Some(rng)),
    };

    // PN minibatch over anchors; samples index anchors directly.
    let pn_samples = match &plan {
        Some(p) => p.pn_samples.clone(),
        None => {
            let assign = assign_pn_targets(model.anchors(), &sample.annotations, mcfg.image_w, mcfg.image_h);
            let picked = sample_minibatch(&assign, cfg.minibatch, cfg.pn_pos_fraction, rng.as_deref_mut().expect("fresh plan"));
            to_samples(&picked, &assign)
                .into_iter()
                .zip(&picked)
                .map(|(s, &i)| StageSample { index: i, ..s })
                .collect()
        }
    };
    let (pn_loss, pn_terms) = stage_loss(&mut g, pn.deltas, pn.logits, &pn_samples, cfg.lambda)?;

    let ftn_rows = match &plan {
        Some(p) => p.ftn_rows.clone(),
        None => {
            let proposals = model.pn_proposals(&g, &pn, true);
            let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
            let assign = assign_ftn_targets(&boxes, &sample.annotations);
            let picked = sample_minibatch(&assign, cfg.minibatch, cfg.ftn_pos_fraction, rng.as_deref_mut().expect("fresh plan"));
            picked.iter().map(|&i| (boxes[i], proposals[i].anchor_index)).collect()
        }
    };

    let mut ftn_samples = Vec::new();
    let mut ftn_terms = StageTerms::default();
    let mut total = g.scale(pn_loss, T::from_f64_lossy(cfg.alpha));
    if !ftn_rows.is_empty() {
        let boxes: Vec<BBox> = ftn_rows.iter().map(|r| r.0).collect();
        let anchors: Vec<usize> = ftn_rows.iter().map(|r| r.1).collect();
        let pn_features = match mcfg.concat_mode {
            ConcatMode::FtnOnly => None,
            ConcatMode::PnPlusFtn => Some(g.gather_rows(pn.fc, &anchors)?),
        };
        let ftn = model.build_ftn(&mut g, dcn.hyper, &boxes, pn_features)?;
        ftn_samples = match &plan {
            Some(p) => p.ftn_samples.clone(),
            None => {
                let assign = assign_ftn_targets(&boxes, &sample.annotations);
                let all: Vec<usize> = (0..boxes.len()).collect();
                let candidates = to_samples(&all, &assign);
                let logits = g.value(ftn.logits).data();
                let losses: Vec<f64> = candidates
                    .iter()
                    .map(|s| classification_loss_logit(logits[s.index].to_f64().expect("float"), s.positive))
                    .collect();
                let mut mined = hard_mine(&losses, cfg.hard_mine_fraction);
                mined.sort_unstable();
                mined.into_iter().map(|i| candidates[i]).collect()
            }
        };
        let (ftn_loss, terms) = stage_loss(&mut g, ftn.deltas, ftn.logits, &ftn_samples, cfg.lambda)?;
        ftn_terms = terms;
        let weighted = g.scale(ftn_loss, T::from_f64_lossy(1.0 - cfg.alpha));
        total = g.add(total, weighted)?;
    }

    Ok(StepGraph {
        graph: g,
        loss: total,
        breakdown: LossBreakdown::combine(pn_terms, ftn_terms, cfg.alpha, cfg.lambda),
        plan: StepPlan { pn_samples, ftn_rows, ftn_samples },
        batch_stats: dcn.batch_stats,
    })
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    /// 1-based number of the completed iteration.
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl IterationLog {
    /// Tab-separated: iteration, lr, total, pnCls, pnLoc, ftnCls, ftnLoc.
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.iteration, self.lr, l.total, l.pn_cls, l.pn_loc, l.ftn_cls, l.ftn_loc
        )
    }
}

/// SGD state around a model.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    iteration: u64,
    velocity: Vec<Option<Tensor<f32>>>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        Self::resume(model, cfg, 0)
    }

    /// Continues counting from `iteration` completed iterations (momentum
    /// buffers restart from zero).
    pub fn resume(model: Model, cfg: TrainConfig, iteration: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let velocity = vec![None; model.params().len()];
        Ok(Self { model, cfg, iteration, velocity })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Random stream for the 0-based iteration `i`; independent of history so
    /// resumed runs replay exactly.
    pub fn iteration_rng(&self, i: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(i);
        rng
    }

    /// Image visited at 0-based iteration `i`: epochs walk a fresh
    /// seed-determined permutation.
    pub fn image_index(&self, i: u64, n: usize) -> usize {
        let epoch = i / n as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0f_e70c);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order[(i % n as u64) as usize]
    }

    /// One SGD iteration on `sample`.
    pub fn step_on(&mut self, sample: &Sample) -> Result<IterationLog, TrainError> {
        let i = self.iteration;
        let lr = self.cfg.lr_at(i);
        let mut rng = self.iteration_rng(i);
        let mut step = build_step(&self.model, sample, &self.cfg, PlanSource::Fresh(&mut rng))?;
        if !step.breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: i + 1 });
        }
        let supervised = !step.plan.pn_samples.is_empty() || !step.plan.ftn_samples.is_empty();
        if supervised {
            self.model.params_mut().zero_grad();
            step.graph.backward_into(step.loss, self.model.params_mut())?;
            self.apply_update(lr);
            self.model.update_running_stats(&step.batch_stats);
        }
        self.iteration += 1;
        Ok(IterationLog { iteration: self.iteration, lr, loss: step.breakdown })
    }

    fn apply_update(&mut self, lr: f64) {
        let cfg = &self.cfg;
        let scale = if cfg.grad_clip > 0.0 {
            let norm: f64 = self
                .model
                .params()
                .iter()
                .filter(|p| p.trainable)
                .flat_map(|p| p.grad.data().iter())
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let (lr, mu, wd, scale) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32, scale as f32);
        for (p, vel) in self.model.params_mut().iter_mut().zip(self.velocity.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            if mu == 0.0 {
                for (w, &g) in p.value.data_mut().iter_mut().zip(grad) {
                    *w -= lr * (g * scale + wd * *w);
                }
            } else {
                let v = vel.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
                    *v = mu * *v + g * scale + wd * *w;
                    *w -= lr * *v;
                }
            }
        }
    }

    /// One iteration on the image the schedule selects from `samples`.
    pub fn step(&mut self, samples: &[Sample]) -> Result<IterationLog, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let idx = self.image_index(self.iteration, samples.len());
        self.step_on(&samples[idx])
    }

    /// Runs until `total_iterations` have completed, writing one log line
    /// per iteration and invoking `on_iteration` after each.
    pub fn run(
        &mut self,
        samples: &[Sample],
        log: &mut dyn Write,
        mut on_iteration: impl FnMut(&Trainer, &IterationLog) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.iteration < self.cfg.total_iterations {
            let entry = self.step(samples)?;
            writeln!(log, "{}", entry.line())?;
            on_iteration(self, &entry)?;
        }
        log.flush()?;
        Ok(())
    }
}

/// Trains `model` on `samples` for `cfg.total_iterations` iterations.
pub fn train(model: Model, samples: &[Sample], cfg: &TrainConfig, log: &mut dyn Write) -> Result<Model, TrainError> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(samples, log, |_, _| Ok(()))?;
    Ok(trainer.into_model())
}
