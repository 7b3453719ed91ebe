//! The mini-batch training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TripletSample;
use crate::flow::{estimate_initial_flows, FlowEstimator, InitialFlows};
use crate::graph::Graph;
use crate::model::{Model, Variant};
use crate::params::ParamGrads;
use crate::tensor::{FlowField, Frame, Tensor, TimeStep};

use super::loss::{loss_graph, reference_flows, LossBreakdown, LossWeights, ReferenceFlows, WarpLossForm};
use super::optim::{adam_step, AdamConfig, AdamState, PlateauConfig, PlateauState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaPolicy {
    /// Each sample trains at the α recorded by its dataset.
    #[default]
    Recorded,
    /// Only samples at α = 0.5 are used.
    #[serde(rename = "fixed-0.5")]
    FixedHalf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stops after this many optimiser steps in total, mid-epoch if needed.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub weights: LossWeights,
    pub alpha_policy: AlphaPolicy,
    pub warp_loss: WarpLossForm,
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            max_steps: None,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            weights: LossWeights::default(),
            alpha_policy: AlphaPolicy::Recorded,
            warp_loss: WarpLossForm::Consistent,
            horizontal_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be a non-negative number".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(Error::Config("train.adam: betas must lie in [0,1) and epsilon be positive".into()));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor <= 1.0) || p.patience == 0 || p.min_delta < 0.0 {
            return Err(Error::Config(
                "train.plateau: factor in (0,1], patience ≥ 1 and min_delta ≥ 0 required".into(),
            ));
        }
        self.weights.validate()
    }

    /// Loss weights actually optimised for a variant.
    pub fn effective_weights(&self, variant: Variant) -> LossWeights {
        if variant.auxiliary_losses() {
            self.weights
        } else {
            self.weights.reconstruction_only()
        }
    }
}

/// A training sample with its flows precomputed by the frozen estimator.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub first: Frame,
    pub gt: Frame,
    pub last: Frame,
    pub alpha: TimeStep,
    pub init: InitialFlows,
    pub reference: ReferenceFlows,
}

pub fn prepare_samples(
    samples: &[TripletSample],
    estimator: &FlowEstimator,
    policy: AlphaPolicy,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if policy == AlphaPolicy::FixedHalf && s.alpha != TimeStep::HALF {
            continue;
        }
        let init = estimate_initial_flows(estimator, &s.first, &s.last, Some(&s.id))?;
        let reference = reference_flows(estimator, &s.first, &s.last, Some(&s.gt), s.alpha, &init)?;
        out.push(PreparedSample {
            id: s.id.clone(),
            first: s.first.clone(),
            gt: s.gt.clone(),
            last: s.last.clone(),
            alpha: s.alpha,
            init,
            reference,
        });
    }
    Ok(out)
}

fn flip_tensor(t: &Tensor, negate_channel: Option<usize>) -> Tensor {
    let w = t.width();
    Tensor::from_fn(t.height(), w, t.channels(), |i, j, c| {
        let v = t.get(i, w - 1 - j, c);
        if Some(c) == negate_channel {
            -v
        } else {
            v
        }
    })
}

fn flip_frame(f: &Frame) -> Frame {
    Frame::new(flip_tensor(f.tensor(), None)).expect("mirroring keeps a frame valid")
}

fn flip_flow(f: &FlowField) -> FlowField {
    FlowField::new(flip_tensor(f.tensor(), Some(0))).expect("mirroring keeps a flow valid")
}

impl PreparedSample {
    /// Left-right mirror image of the sample, flows included.
    pub fn flipped(&self) -> PreparedSample {
        PreparedSample {
            id: self.id.clone(),
            first: flip_frame(&self.first),
            gt: flip_frame(&self.gt),
            last: flip_frame(&self.last),
            alpha: self.alpha,
            init: InitialFlows {
                full_fwd: flip_flow(&self.init.full_fwd),
                full_bwd: flip_flow(&self.init.full_bwd),
                half_fwd_up: flip_flow(&self.init.half_fwd_up),
                half_bwd_up: flip_flow(&self.init.half_bwd_up),
            },
            reference: ReferenceFlows {
                to_t: flip_flow(&self.reference.to_t),
                to_t1: flip_flow(&self.reference.to_t1),
            },
        }
    }
}

/// Loss breakdown and parameter gradients of the total for one sample.
pub fn sample_loss(
    model: &Model,
    sample: &PreparedSample,
    weights: LossWeights,
    form: WarpLossForm,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut g = Graph::new(&model.params);
    let vars = model.forward(&mut g, &sample.first, &sample.last, &sample.init, sample.alpha)?;
    let loss = loss_graph(&mut g, &vars, &sample.gt, &sample.reference, weights, form)?;
    let grads = g.backward(loss.total).params;
    Ok((loss.breakdown(&g, weights), grads))
}

/// Mean losses of one epoch plus the learning rate it ran at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_r: f64,
    pub l_f: f64,
    pub l_w: f64,
    pub l_s: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,l_r,l_f,l_w,l_s,total,lr";

pub fn format_loss_log(log: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for e in log {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", e.epoch, e.l_r, e.l_f, e.l_w, e.l_s, e.total, e.lr);
    }
    s
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_loss_log(log)).map_err(|e| Error::io(path, e))
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub adam: AdamState,
    pub plateau: PlateauState,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            lr: config.learning_rate,
            adam: AdamState::new(&model.params),
            plateau: PlateauState::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains `model` in place. Samples are shuffled per epoch from the model seed;
/// gradients of a batch are summed in batch order and averaged.
pub fn train_loop(
    model: &mut Model,
    config: &TrainConfig,
    samples: &[PreparedSample],
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let weights = config.effective_weights(model.variant());
    let mut state = resume.unwrap_or_else(|| TrainState::new(model, config));
    let mut log = Vec::new();

    while state.epoch < config.epochs {
        if config.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let mut rng = epoch_rng(model.seed(), state.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| config.horizontal_flip && rng.gen_bool(0.5))
            .collect();

        let epoch_lr = state.lr;
        let mut sums = [0.0; 5];
        let mut seen = 0usize;
        for (batch, batch_flips) in order.chunks(config.batch_size).zip(flips.chunks(config.batch_size)) {
            if config.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let mut acc: Option<ParamGrads> = None;
            for (&k, &flip) in batch.iter().zip(batch_flips) {
                let flipped;
                let sample = if flip {
                    flipped = samples[k].flipped();
                    &flipped
                } else {
                    &samples[k]
                };
                let (b, grads) = sample_loss(model, sample, weights, config.warp_loss)?;
                for (s, v) in sums.iter_mut().zip([b.l_r, b.l_f, b.l_w, b.l_s, b.total]) {
                    *s += v;
                }
                match acc.as_mut() {
                    Some(a) => a.add_assign(&grads),
                    None => acc = Some(grads),
                }
            }
            seen += batch.len();
            let mut grads = acc.expect("batches are non-empty");
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut model.params, &grads, &mut state.adam, state.lr, &config.adam)?;
            state.step += 1;
        }
        if seen == 0 {
            break;
        }
        let n = seen as f64;
        let entry = EpochLog {
            epoch: state.epoch + 1,
            l_r: sums[0] / n,
            l_f: sums[1] / n,
            l_w: sums[2] / n,
            l_s: sums[3] / n,
            total: sums[4] / n,
            lr: epoch_lr,
        };
        log::info!(
            "epoch {} total {:.6} l_r {:.6} lr {:.2e}",
            entry.epoch,
            entry.total,
            entry.l_r,
            entry.lr
        );
        log.push(entry);
        state.lr = state.plateau.observe(entry.total, state.lr, &config.plateau);
        state.epoch += 1;
    }
    Ok(TrainOutcome { log, state })
}
