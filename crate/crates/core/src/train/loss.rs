//! Reconstruction, flow-consistency, warp-consistency and smoothness losses.
//! Every L1 norm is mean-reduced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{blend_flows, FlowEstimator, InitialFlows};
use crate::graph::{Graph, Var};
use crate::model::ForwardVars;
use crate::params::ParamSet;
use crate::refine::RefinedFlows;
use crate::tensor::{FlowField, Frame, TimeStep};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub flow: f64,
    pub warp: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reconstruction: 1.0,
            flow: 0.02,
            warp: 0.2,
            smooth: 0.5,
        }
    }
}

impl LossWeights {
    pub fn reconstruction_only(self) -> Self {
        LossWeights {
            flow: 0.0,
            warp: 0.0,
            smooth: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.reconstruction, self.flow, self.warp, self.smooth];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {all:?}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 4] {
        [self.reconstruction, self.flow, self.warp, self.smooth]
    }

    /// Weighted sum in the same order and association as the graph node.
    pub fn combine(&self, terms: [f64; 4]) -> f64 {
        terms.iter().zip(self.as_array()).map(|(t, w)| w * t).sum()
    }
}

/// The four loss terms, their weights and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_f: f64,
    pub l_w: f64,
    pub l_s: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.l_r, self.l_f, self.l_w, self.l_s]
    }

    /// Recomputes the total from the stored terms and weights.
    pub fn recomputed_total(&self) -> f64 {
        self.weights.combine(self.terms())
    }
}

pub fn total_loss(terms: [f64; 4], weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_r: terms[0],
        l_f: terms[1],
        l_w: terms[2],
        l_s: terms[3],
        total: weights.combine(terms),
        weights,
    }
}

/// Which frame the second warp-consistency term warps with the refined flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpLossForm {
    /// `I_{t+1}` on both sides of the second term.
    #[default]
    Consistent,
    /// `I_t` under the refined flow, as the formula is printed.
    Literal,
}

/// Supervision flows from the intermediate time to each input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFlows {
    pub to_t: FlowField,
    pub to_t1: FlowField,
}

/// Flows estimated from the ground-truth middle frame, or the time-step blend
/// of the initial flows when `gt` is absent or the estimator cannot run on
/// raw frames.
pub fn reference_flows(
    estimator: &FlowEstimator,
    i_t: &Frame,
    i_t1: &Frame,
    gt: Option<&Frame>,
    alpha: TimeStep,
    init: &InitialFlows,
) -> Result<ReferenceFlows> {
    if let (Some(gt), false) = (gt, matches!(estimator, FlowEstimator::FileBacked { .. })) {
        return Ok(ReferenceFlows {
            to_t: estimator.estimate(gt, i_t)?,
            to_t1: estimator.estimate(gt, i_t1)?,
        });
    }
    let (to_t, to_t1) = blend_flows(&init.full_fwd, &init.full_bwd, alpha)?;
    Ok(ReferenceFlows { to_t, to_t1 })
}

fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(g.mean_abs(d))
}

fn sum2(g: &mut Graph, a: Var, b: Var) -> Var {
    g.weighted_sum(&[(a, 1.0), (b, 1.0)])
}

pub(crate) fn reconstruction_term(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    l1(g, pred, gt)
}

/// Per direction: mean over pixels of `|Δu| + |Δv|`.
pub(crate) fn flow_term(g: &mut Graph, refined: (Var, Var), reference: (Var, Var)) -> Result<Var> {
    let a = l1(g, refined.0, reference.0)?;
    let b = l1(g, refined.1, reference.1)?;
    Ok(g.weighted_sum(&[(a, 2.0), (b, 2.0)]))
}

pub(crate) fn warp_term(
    g: &mut Graph,
    frames: (Var, Var),
    refined: (Var, Var),
    reference: (Var, Var),
    form: WarpLossForm,
) -> Result<Var> {
    let (i_t, i_t1) = frames;
    let ref_t = g.warp(i_t, reference.0)?;
    let est_t = g.warp(i_t, refined.0)?;
    let a = l1(g, ref_t, est_t)?;
    let ref_t1 = g.warp(i_t1, reference.1)?;
    let source = match form {
        WarpLossForm::Consistent => i_t1,
        WarpLossForm::Literal => i_t,
    };
    let est_t1 = g.warp(source, refined.1)?;
    let b = l1(g, ref_t1, est_t1)?;
    Ok(sum2(g, a, b))
}

pub(crate) fn smooth_term(g: &mut Graph, refined: (Var, Var)) -> Var {
    let a = g.grad_abs_mean(refined.0);
    let b = g.grad_abs_mean(refined.1);
    sum2(g, a, b)
}

/// Loss nodes for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_r: Var,
    pub l_f: Var,
    pub l_w: Var,
    pub l_s: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, weights: LossWeights) -> LossBreakdown {
        LossBreakdown {
            l_r: g.scalar(self.l_r),
            l_f: g.scalar(self.l_f),
            l_w: g.scalar(self.l_w),
            l_s: g.scalar(self.l_s),
            total: g.scalar(self.total),
            weights,
        }
    }
}

pub fn loss_graph(
    g: &mut Graph,
    vars: &ForwardVars,
    gt: &Frame,
    reference: &ReferenceFlows,
    weights: LossWeights,
    form: WarpLossForm,
) -> Result<LossVars> {
    let gt = g.constant(gt.tensor().clone());
    let ref_t = g.constant(reference.to_t.tensor().clone());
    let ref_t1 = g.constant(reference.to_t1.tensor().clone());
    let refined = (vars.to_t, vars.to_t1);
    let l_r = reconstruction_term(g, vars.prediction, gt)?;
    let l_f = flow_term(g, refined, (ref_t, ref_t1))?;
    let l_w = warp_term(g, (vars.i_t, vars.i_t1), refined, (ref_t, ref_t1), form)?;
    let l_s = smooth_term(g, refined);
    let total = g.weighted_sum(&[
        (l_r, weights.reconstruction),
        (l_f, weights.flow),
        (l_w, weights.warp),
        (l_s, weights.smooth),
    ]);
    Ok(LossVars {
        l_r,
        l_f,
        l_w,
        l_s,
        total,
    })
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let v = build(&mut g)?;
    Ok(g.scalar(v))
}

fn check_shape(a: &crate::Tensor, b: &crate::Tensor, what: &str) -> Result<()> {
    a.check_same_shape(b, what)
}

pub fn loss_reconstruction(pred: &Frame, gt: &Frame) -> Result<f64> {
    check_shape(pred.tensor(), gt.tensor(), "reconstruction loss")?;
    eval_scalar(|g| {
        let (p, t) = (g.constant(pred.tensor().clone()), g.constant(gt.tensor().clone()));
        reconstruction_term(g, p, t)
    })
}

pub fn loss_flow(refined: &RefinedFlows, reference: &ReferenceFlows) -> Result<f64> {
    check_shape(refined.to_t.tensor(), reference.to_t.tensor(), "flow loss")?;
    check_shape(refined.to_t1.tensor(), reference.to_t1.tensor(), "flow loss")?;
    eval_scalar(|g| {
        let r = (g.constant(refined.to_t.tensor().clone()), g.constant(refined.to_t1.tensor().clone()));
        let p = (g.constant(reference.to_t.tensor().clone()), g.constant(reference.to_t1.tensor().clone()));
        flow_term(g, r, p)
    })
}

pub fn loss_warp(
    i_t: &Frame,
    i_t1: &Frame,
    refined: &RefinedFlows,
    reference: &ReferenceFlows,
    form: WarpLossForm,
) -> Result<f64> {
    check_shape(i_t.tensor(), i_t1.tensor(), "warp loss")?;
    check_shape(refined.to_t.tensor(), reference.to_t.tensor(), "warp loss")?;
    check_shape(refined.to_t1.tensor(), reference.to_t1.tensor(), "warp loss")?;
    eval_scalar(|g| {
        let f = (g.constant(i_t.tensor().clone()), g.constant(i_t1.tensor().clone()));
        let r = (g.constant(refined.to_t.tensor().clone()), g.constant(refined.to_t1.tensor().clone()));
        let p = (g.constant(reference.to_t.tensor().clone()), g.constant(reference.to_t1.tensor().clone()));
        warp_term(g, f, r, p, form)
    })
}

pub fn loss_smooth(refined: &RefinedFlows) -> f64 {
    eval_scalar(|g| {
        let r = (g.constant(refined.to_t.tensor().clone()), g.constant(refined.to_t1.tensor().clone()));
        Ok(smooth_term(g, r))
    })
    .expect("smoothness term has no failure modes")
}
