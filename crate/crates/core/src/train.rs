//! The composite model, the per-step objective with its gradient, the
//! training state machine and top-1 evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::config::{TrainConfig, WarmupObjective};
use crate::data::{DataCursor, DataPipeline, Dataset, LabeledBatch, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::mae::{MaeBranch, MaskPlan, MimBranch, Reconstruction};
use crate::nn::{Mode, ParamStore};
use crate::objective::{
    make_pseudo_labels, supervised_loss_grad, total_loss, unsupervised_loss_grad, LossBreakdown,
    PseudoLabel,
};
use crate::optim::{clip_grad_norm, AdamW, Phase, Schedule, Trainable};
use crate::patch::patchify;
use crate::rng::{RngStreams, Stream};
use crate::tensor::Images;
use crate::vit::{Logits, Vit};

/// Encoder + classification head + optional reconstruction branch, with all
/// parameters in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub vit: Vit,
    pub branch: Option<MaeBranch>,
    pub params: ParamStore,
    pub dropout: f64,
}

impl Model {
    /// Allocates and initializes parameters from the init stream. The
    /// encoder and head are initialized before the decoder, so a model built
    /// without the branch has identical encoder/head weights.
    pub fn new(cfg: &TrainConfig, streams: &mut RngStreams) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let vit = Vit::new(&mut params, &cfg.model);
        let branch = cfg
            .mae
            .enabled
            .then(|| MaeBranch::new(&mut params, &cfg.model, &cfg.mae));
        let rng = streams.get(Stream::Init);
        vit.init(&mut params, rng);
        if let Some(b) = &branch {
            b.init(&mut params, rng);
        }
        Ok(Self {
            vit,
            branch,
            params,
            dropout: cfg.model.dropout,
        })
    }

    pub fn classify(&self, images: &Images, mode: &mut Mode<'_>) -> Result<Logits> {
        self.vit.classify(self.params.values(), images, mode)
    }

    /// Normalized class-token features in eval mode.
    pub fn features(&self, images: &Images) -> Result<Vec<f64>> {
        self.vit
            .features(self.params.values(), images, &mut Mode::Eval)
    }

    pub fn reconstruct(&self, images: &Images, plan: &MaskPlan) -> Result<Reconstruction> {
        let branch = self
            .branch
            .as_ref()
            .ok_or_else(|| Error::Data("model has no reconstruction branch".into()))?;
        let grid = patchify(images, self.vit.encoder.patch_size)?;
        branch.reconstruct(self.params.values(), &self.vit.encoder, &grid, plan)
    }
}

/// Relative weights of the unsupervised and reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub mu_mae: f64,
}

/// Which terms contribute to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub supervised: bool,
    pub unsupervised: bool,
    pub reconstruction: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        supervised: true,
        unsupervised: true,
        reconstruction: true,
    };
    pub const SUPERVISED: Terms = Terms {
        supervised: true,
        unsupervised: false,
        reconstruction: false,
    };
    pub const UNSUPERVISED: Terms = Terms {
        supervised: false,
        unsupervised: true,
        reconstruction: false,
    };
    pub const RECONSTRUCTION: Terms = Terms {
        supervised: false,
        unsupervised: false,
        reconstruction: true,
    };
}

/// The stop-gradient inputs of a step: pseudo labels from the weak view and
/// the masking plan. With both fixed the objective is a deterministic
/// function of the parameters.
///
/// A term whose weight is zero is not evaluated, so its entry is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub pseudo: Option<Vec<PseudoLabel>>,
    pub mask: Option<MaskPlan>,
}

/// Pseudo labels (eval-mode weak forward, no gradient) and the mask plan
/// (drawn from the masking stream).
pub fn plan_step(
    model: &Model,
    ub: &UnlabeledBatch,
    weights: LossWeights,
    tau: f64,
    streams: &mut RngStreams,
) -> Result<StepPlan> {
    let pseudo = if weights.lambda_u > 0.0 {
        let weak = model.classify(&ub.weak, &mut Mode::Eval)?;
        Some(make_pseudo_labels(&weak, tau))
    } else {
        None
    };
    let mask = match &model.branch {
        Some(branch) if weights.mu_mae > 0.0 => {
            let grid = patchify(&ub.weak, model.vit.encoder.patch_size)?;
            Some(branch.plan(&grid, streams.get(Stream::Masking))?)
        }
        _ => None,
    };
    Ok(StepPlan { pseudo, mask })
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if [b.l_s, b.l_u, b.l_mae].iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss: l_s={} l_u={} l_mae={} acceptance_rate={}",
            b.l_s, b.l_u, b.l_mae, b.acceptance_rate
        )));
    }
    Ok(())
}

/// Evaluates the three terms for a fixed plan and accumulates the gradient
/// of the selected ones into a fresh buffer.
///
/// `l_s` uses the (weak) labeled images, `l_u` the strong unlabeled view
/// against the planned pseudo labels, and `l_mae` the weak unlabeled view
/// under the planned mask. Forwards run in `mode`.
#[allow(clippy::too_many_arguments)]
pub fn objective_grad(
    model: &Model,
    lb: &LabeledBatch,
    ub: &UnlabeledBatch,
    plan: &StepPlan,
    weights: LossWeights,
    terms: Terms,
    mode: &mut Mode<'_>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let p = model.params.values();
    let vit = &model.vit;
    let mut g = model.params.zeros_like();

    let (logits, trace) = vit.classify_traced(p, &lb.images, mode)?;
    let (l_s, d_logits) = supervised_loss_grad(&logits, &lb.labels)?;
    if terms.supervised {
        vit.classify_backward(p, &trace, &d_logits, &mut g);
    }
    drop(trace);

    let (mut l_u, mut acceptance_rate) = (0.0, 0.0);
    if let Some(pseudo) = &plan.pseudo {
        let (strong, trace) = vit.classify_traced(p, &ub.strong, mode)?;
        let (loss, rate, mut d_strong) = unsupervised_loss_grad(&strong, pseudo)?;
        (l_u, acceptance_rate) = (loss, rate);
        if terms.unsupervised {
            d_strong.iter_mut().for_each(|v| *v *= weights.lambda_u);
            vit.classify_backward(p, &trace, &d_strong, &mut g);
        }
    }

    let mut l_mae = 0.0;
    if let (Some(mask), Some(branch)) = (&plan.mask, &model.branch) {
        let grid = patchify(&ub.weak, vit.encoder.patch_size)?;
        l_mae = if terms.reconstruction {
            branch.loss_and_grad(p, &vit.encoder, &grid, mask, mode, weights.mu_mae, &mut g)?
        } else {
            branch.loss(p, &vit.encoder, &grid, mask)?
        };
    }

    let mut breakdown = LossBreakdown {
        l_s,
        l_u,
        l_mae,
        total: f64::NAN,
        acceptance_rate,
    };
    check_finite(&breakdown)?;
    breakdown = LossBreakdown {
        acceptance_rate,
        ..total_loss(l_s, l_u, l_mae, weights.lambda_u, weights.mu_mae)?
    };
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at {breakdown:?}"
        )));
    }
    Ok((breakdown, g))
}

/// Objective value only, in eval mode; used by finite-difference checks.
pub fn objective_value(
    model: &Model,
    lb: &LabeledBatch,
    ub: &UnlabeledBatch,
    plan: &StepPlan,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let p = model.params.values();
    let vit = &model.vit;
    let logits = vit.classify(p, &lb.images, &mut Mode::Eval)?;
    let l_s = crate::objective::supervised_loss(&logits, &lb.labels)?;
    let (mut l_u, mut rate) = (0.0, 0.0);
    if let Some(pseudo) = &plan.pseudo {
        let strong = vit.classify(p, &ub.strong, &mut Mode::Eval)?;
        (l_u, rate) = crate::objective::unsupervised_loss(&strong, pseudo)?;
    }
    let mut l_mae = 0.0;
    if let (Some(mask), Some(branch)) = (&plan.mask, &model.branch) {
        let grid = patchify(&ub.weak, vit.encoder.patch_size)?;
        l_mae = branch.loss(p, &vit.encoder, &grid, mask)?;
    }
    let b = total_loss(l_s, l_u, l_mae, weights.lambda_u, weights.mu_mae)?;
    Ok(LossBreakdown {
        acceptance_rate: rate,
        ..b
    })
}

/// Mutable training progress besides parameters and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub step_in_epoch: u64,
    pub streams: RngStreams,
    pub best_metric: f64,
    pub cursor: DataCursor,
}

impl RunState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            global_step: 0,
            step_in_epoch: 0,
            streams: RngStreams::new(seed),
            best_metric: f64::NEG_INFINITY,
            cursor: DataCursor::default(),
        }
    }
}

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    pub state: RunState,
}

impl Trainer {
    pub fn new(config: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        let mut state = RunState::new(config.seed);
        let model = Model::new(&config, &mut state.streams)?;
        let optimizer = AdamW::new(&config.optim, model.params.len());
        let schedule = Self::schedule_for(&config, steps_per_epoch);
        Ok(Self {
            config,
            model,
            optimizer,
            schedule,
            state,
        })
    }

    /// Steps per epoch: one unlabeled pass, optionally capped by
    /// `trainer.steps_per_epoch`.
    pub fn steps_per_epoch(config: &TrainConfig, pipeline_steps: usize) -> usize {
        match config.trainer.steps_per_epoch {
            0 => pipeline_steps,
            cap => cap.min(pipeline_steps),
        }
    }

    pub fn schedule_for(config: &TrainConfig, steps_per_epoch: usize) -> Schedule {
        Schedule {
            warmup_epochs: config.trainer.warmup_epochs,
            total_epochs: config.trainer.total_epochs,
            steps_per_epoch: steps_per_epoch.max(1) as u64,
            lr_init: config.optim.lr_init,
            lr_final: config.optim.lr_final,
        }
    }

    /// Term weights in effect at `step`: warmup drops the pseudo-label term
    /// (and, for the supervised-only warmup, the reconstruction term too).
    pub fn weights_at(&self, step: u64) -> LossWeights {
        let ssl = &self.config.ssl;
        let mu = if self.model.branch.is_some() {
            ssl.mu_mae
        } else {
            0.0
        };
        match self.schedule.phase(step) {
            Phase::Main => LossWeights {
                lambda_u: ssl.lambda_u,
                mu_mae: mu,
            },
            Phase::Warmup => match self.config.trainer.warmup_objective {
                WarmupObjective::SupervisedMae => LossWeights {
                    lambda_u: 0.0,
                    mu_mae: mu,
                },
                WarmupObjective::Supervised => LossWeights {
                    lambda_u: 0.0,
                    mu_mae: 0.0,
                },
            },
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state.global_step >= self.schedule.total_steps()
    }

    /// One update with explicit learning rate, weights and trainable
    /// groups. Does not advance the step counter.
    pub fn step_with(
        &mut self,
        lb: &LabeledBatch,
        ub: &UnlabeledBatch,
        lr: f64,
        weights: LossWeights,
        trainable: Trainable,
    ) -> Result<LossBreakdown> {
        let plan = plan_step(
            &self.model,
            ub,
            weights,
            self.config.ssl.tau,
            &mut self.state.streams,
        )?;
        let dropout = self.model.dropout;
        let rng: &mut ChaCha8Rng = self.state.streams.get(Stream::Dropout);
        let mut mode = Mode::Train { dropout, rng };
        let (breakdown, mut grads) =
            objective_grad(&self.model, lb, ub, &plan, weights, Terms::ALL, &mut mode)?;
        if self.config.optim.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.config.optim.grad_clip);
        }
        self.optimizer
            .update(&mut self.model.params, &grads, lr, trainable);
        Ok(breakdown)
    }

    /// One scheduled step on the given batches.
    pub fn train_step(&mut self, lb: &LabeledBatch, ub: &UnlabeledBatch) -> Result<StepRecord> {
        let step = self.state.global_step;
        let lr = self.schedule.lr_at(step)?;
        let weights = self.weights_at(step);
        let breakdown = self.step_with(lb, ub, lr, weights, Trainable::ALL)?;
        let record = StepRecord {
            step,
            epoch: self.state.epoch,
            phase: self.schedule.phase(step),
            lr,
            breakdown,
        };
        self.state.global_step += 1;
        self.state.step_in_epoch += 1;
        if self.state.step_in_epoch >= self.schedule.steps_per_epoch {
            self.state.epoch += 1;
            self.state.step_in_epoch = 0;
        }
        Ok(record)
    }

    /// Draws the next batch and takes one scheduled step.
    pub fn next_step(&mut self, pipeline: &DataPipeline<'_>) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::Schedule {
                step: self.state.global_step,
                total: self.schedule.total_steps(),
            });
        }
        if self.state.step_in_epoch == 0 {
            self.state.cursor.start_epoch();
        }
        let (lb, ub) = pipeline.next_batch(&mut self.state.cursor, &mut self.state.streams)?;
        self.train_step(&lb, &ub)
    }

    /// Runs the remaining steps of the current epoch.
    pub fn run_epoch<F>(&mut self, pipeline: &DataPipeline<'_>, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepRecord) -> Result<()>,
    {
        let epoch = self.state.epoch;
        while !self.is_finished() && self.state.epoch == epoch {
            let record = self.next_step(pipeline)?;
            on_step(&record)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub top1_accuracy: f64,
    pub num_samples: usize,
    pub correct: usize,
    /// Accuracy per class; classes without samples report 0.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
}

/// Exact top-1 accuracy in eval mode, batched by `batch_size`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let classes = data.num_classes;
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = data.images.select(chunk);
        let preds = model.classify(&images, &mut Mode::Eval)?.argmax();
        for (&i, &pred) in chunk.iter().zip(&preds) {
            let y = data.labels[i];
            counts[y] += 1;
            if pred == y {
                hits[y] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    let per_class_accuracy = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    Ok(EvalReport {
        top1_accuracy: correct as f64 / data.len() as f64,
        num_samples: data.len(),
        correct,
        per_class_accuracy,
        per_class_count: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_split, SyntheticShapes};

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.image_size = 8;
        cfg.model.patch_size = 4;
        cfg.model.encoder_width = 16;
        cfg.model.encoder_heads = 2;
        cfg.model.encoder_depth = 1;
        cfg.model.decoder_width = 8;
        cfg.model.decoder_heads = 2;
        cfg.model.decoder_depth = 1;
        cfg.model.mlp_ratio = 2;
        cfg.model.num_classes = 4;
        cfg.mae.mask_ratio = 0.5;
        cfg.trainer.labeled_per_batch = 2;
        cfg.trainer.unlabeled_ratio = 2;
        cfg
    }

    fn batches(cfg: &TrainConfig) -> (LabeledBatch, UnlabeledBatch) {
        let data = SyntheticShapes::from_config(cfg).unwrap().generate(80, 0);
        let split = make_split(80, &data.labels, 4, 0.25, 0).unwrap();
        let pipe = DataPipeline::new(&data, &split, cfg).unwrap();
        pipe.next_batch(&mut DataCursor::default(), &mut RngStreams::new(1))
            .unwrap()
    }

    #[test]
    fn zero_weights_reduce_to_a_supervised_step() {
        let cfg = tiny_config();
        let (lb, ub) = batches(&cfg);
        let mut a = Trainer::new(cfg.clone(), 10).unwrap();
        let mut b = a.clone();
        let zero = LossWeights {
            lambda_u: 0.0,
            mu_mae: 0.0,
        };
        let ba = a.step_with(&lb, &ub, 1e-3, zero, Trainable::ALL).unwrap();
        assert_eq!(ba.total, ba.l_s);
        // Supervised-only gradient applied by hand.
        let plan = StepPlan {
            pseudo: None,
            mask: None,
        };
        let (_, g) = objective_grad(
            &b.model,
            &lb,
            &ub,
            &plan,
            zero,
            Terms::SUPERVISED,
            &mut Mode::Eval,
        )
        .unwrap();
        b.optimizer
            .update(&mut b.model.params, &g, 1e-3, Trainable::ALL);
        assert_eq!(a.model.params.values(), b.model.params.values());
    }

    #[test]
    fn default_weights_compose_total() {
        let cfg = tiny_config();
        let (lb, ub) = batches(&cfg);
        let mut t = Trainer::new(cfg, 10).unwrap();
        let w = LossWeights {
            lambda_u: 10.0,
            mu_mae: 5.0,
        };
        let b = t.step_with(&lb, &ub, 1e-3, w, Trainable::ALL).unwrap();
        assert_eq!(b.total, (b.l_s + 10.0 * b.l_u) + 5.0 * b.l_mae);
        assert!(b.l_mae > 0.0);
    }

    #[test]
    fn identical_state_gives_identical_steps() {
        let cfg = tiny_config();
        let (lb, ub) = batches(&cfg);
        let mut a = Trainer::new(cfg, 10).unwrap();
        let mut b = a.clone();
        assert_eq!(
            a.train_step(&lb, &ub).unwrap(),
            b.train_step(&lb, &ub).unwrap()
        );
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn warmup_weights() {
        let mut cfg = tiny_config();
        cfg.trainer.warmup_epochs = 1;
        cfg.trainer.total_epochs = 2;
        let t = Trainer::new(cfg.clone(), 5).unwrap();
        assert_eq!(
            t.weights_at(0),
            LossWeights {
                lambda_u: 0.0,
                mu_mae: 5.0
            }
        );
        assert_eq!(
            t.weights_at(5),
            LossWeights {
                lambda_u: 10.0,
                mu_mae: 5.0
            }
        );
        cfg.trainer.warmup_objective = WarmupObjective::Supervised;
        let t = Trainer::new(cfg.clone(), 5).unwrap();
        assert_eq!(
            t.weights_at(4),
            LossWeights {
                lambda_u: 0.0,
                mu_mae: 0.0
            }
        );
        cfg.trainer.warmup_epochs = 0;
        let t = Trainer::new(cfg, 5).unwrap();
        assert_eq!(
            t.weights_at(0),
            LossWeights {
                lambda_u: 10.0,
                mu_mae: 5.0
            }
        );
    }

    #[test]
    fn evaluation_counts() {
        let cfg = tiny_config();
        let data = SyntheticShapes::from_config(&cfg).unwrap().generate(40, 3);
        let t = Trainer::new(cfg, 10).unwrap();
        let r = evaluate(&t.model, &data, 7).unwrap();
        assert_eq!(r.num_samples, 40);
        assert_eq!(r.top1_accuracy, r.correct as f64 / 40.0);
        assert_eq!(r.per_class_count, vec![10; 4]);
        // Relabel every sample with the model's own prediction.
        let preds = t
            .model
            .classify(&data.images, &mut Mode::Eval)
            .unwrap()
            .argmax();
        let relabeled = Dataset {
            labels: preds,
            ..data.clone()
        };
        assert_eq!(
            evaluate(&t.model, &relabeled, 16).unwrap().top1_accuracy,
            1.0
        );
        // Order invariance.
        let rev: Vec<usize> = (0..40).rev().collect();
        let a = evaluate(&t.model, &data, 16).unwrap();
        let b = evaluate(&t.model, &data.select(&rev), 16).unwrap();
        assert_eq!(a, b);
        let empty = data.select(&[]);
        assert!(matches!(evaluate(&t.model, &empty, 4), Err(Error::Data(_))));
    }
}
