//! Backward warping and motion-aware frame synthesis.

use crate::error::{Error, Result};
use crate::flow::{estimate_initial_flows, FlowEstimator};
use crate::graph::{Graph, Var};
use crate::metaops::{FeatureNet, KernelPredictionNet};
use crate::model::Model;
use crate::ops;
use crate::params::ParamSet;
use crate::refine::RefinedFlows;
use crate::tensor::{FlowField, Frame, Tensor, TimeStep};

/// The two input frames warped to the intermediate time.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedPair {
    pub from_t: Frame,
    pub from_t1: Frame,
}

/// Samples `frame` at `(i + v, j + u)` bilinearly, clamping to the border.
pub fn backward_warp(frame: &Frame, flow: &FlowField) -> Result<Frame> {
    if frame.height() != flow.height() || frame.width() != flow.width() {
        return Err(Error::invalid(format!(
            "warp: frame {}x{} vs flow {}x{}",
            frame.height(),
            frame.width(),
            flow.height(),
            flow.width()
        )));
    }
    Frame::new(ops::warp_forward(frame.tensor(), flow.tensor()))
}

pub fn warp_pair(refined: &RefinedFlows, i_t: &Frame, i_t1: &Frame) -> Result<WarpedPair> {
    Ok(WarpedPair {
        from_t: backward_warp(i_t, &refined.to_t)?,
        from_t1: backward_warp(i_t1, &refined.to_t1)?,
    })
}

/// Graph nodes produced by the synthesis stage.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisVars {
    pub warped_t: Var,
    pub warped_t1: Var,
    pub prediction: Var,
}

/// Records the synthesis stage. Without a kernel net the feature net output
/// is the prediction.
pub fn synthesize_graph(
    g: &mut Graph,
    kernel_net: Option<&KernelPredictionNet>,
    feature_net: &FeatureNet,
    flows: (Var, Var),
    frames: (Var, Var),
    alpha: TimeStep,
) -> Result<SynthesisVars> {
    let (to_t, to_t1) = flows;
    let (i_t, i_t1) = frames;
    let warped_t = g.warp(i_t, to_t)?;
    let warped_t1 = g.warp(i_t1, to_t1)?;
    let stacked = g.concat(&[warped_t, warped_t1, i_t, i_t1])?;
    let features = feature_net.forward(g, stacked)?;
    let prediction = match kernel_net {
        Some(net) => {
            let (h, w, _) = g.value(to_t).shape();
            let a = alpha.value();
            let time = g.constant(Tensor::from_fn(h, w, 2, |_, _, c| if c == 0 { a } else { 1.0 - a }));
            let side = g.concat(&[to_t, to_t1, time])?;
            let kernels = net.forward(g, side)?;
            g.adaptive_conv(features, kernels, net.kernel_size())?
        }
        None => features,
    };
    Ok(SynthesisVars {
        warped_t,
        warped_t1,
        prediction,
    })
}

pub fn synthesize_frame(
    params: &ParamSet,
    kernel_net: &KernelPredictionNet,
    feature_net: &FeatureNet,
    refined: &RefinedFlows,
    i_t: &Frame,
    i_t1: &Frame,
    alpha: TimeStep,
) -> Result<Frame> {
    check_frames(i_t, i_t1)?;
    if refined.to_t.height() != i_t.height() || refined.to_t.width() != i_t.width() {
        return Err(Error::invalid("refined flows do not match frame size"));
    }
    let mut g = Graph::new(params);
    let flows = (
        g.constant(refined.to_t.tensor().clone()),
        g.constant(refined.to_t1.tensor().clone()),
    );
    let frames = (g.constant(i_t.tensor().clone()), g.constant(i_t1.tensor().clone()));
    let out = synthesize_graph(&mut g, Some(kernel_net), feature_net, flows, frames, alpha)?;
    Frame::new(g.value(out.prediction).clone())
}

pub(crate) fn check_frames(i_t: &Frame, i_t1: &Frame) -> Result<()> {
    if i_t.tensor().shape() != i_t1.tensor().shape() {
        return Err(Error::invalid(format!(
            "input frames differ in shape: {:?} vs {:?}",
            i_t.tensor().shape(),
            i_t1.tensor().shape()
        )));
    }
    Ok(())
}

/// Full pipeline: initial flows, refinement, synthesis.
pub fn interpolate(
    model: &Model,
    estimator: &FlowEstimator,
    i_t: &Frame,
    i_t1: &Frame,
    alpha: f64,
) -> Result<Frame> {
    let alpha = TimeStep::new(alpha)?;
    check_frames(i_t, i_t1)?;
    let init = estimate_initial_flows(estimator, i_t, i_t1, None)?;
    model.predict(i_t, i_t1, &init, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metaops::{FeatureNetConfig, KernelNetConfig, ResidualInit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, h: usize, w: usize, c: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(Tensor::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = random_frame(1, 7, 9, 3);
        assert_eq!(backward_warp(&f, &FlowField::zeros(7, 9)).unwrap(), f);
    }

    #[test]
    fn integer_shift_matches_index_oracle() {
        let f = random_frame(2, 6, 8, 3);
        for (u, v) in [(1, 0), (-2, 1), (0, -1), (3, 2)] {
            let out = backward_warp(&f, &FlowField::constant(6, 8, u as f64, v as f64)).unwrap();
            let expected = Tensor::from_fn(6, 8, 3, |i, j, c| {
                let y = (i as i64 + v).clamp(0, 5) as usize;
                let x = (j as i64 + u).clamp(0, 7) as usize;
                f.tensor().get(y, x, c)
            });
            assert_eq!(out.tensor(), &expected, "flow ({u},{v})");
        }
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        let ramp = Frame::new(Tensor::from_fn(4, 8, 1, |_, j, _| j as f64 / 8.0)).unwrap();
        let out = backward_warp(&ramp, &FlowField::constant(4, 8, 0.5, 0.0)).unwrap();
        for i in 0..4 {
            for j in 0..7 {
                let expected = 0.5 * (ramp.tensor().get(i, j, 0) + ramp.tensor().get(i, j + 1, 0));
                assert!((out.tensor().get(i, j, 0) - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn warp_rejects_mismatch() {
        let f = random_frame(3, 6, 8, 1);
        assert!(backward_warp(&f, &FlowField::zeros(6, 7)).is_err());
    }

    proptest! {
        #[test]
        fn warp_linear_in_frame(seed in 0u64..5000, s in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(6, 7, 2, |_, _, _| rng.gen_range(-1.0..1.0));
            let b = Tensor::from_fn(6, 7, 2, |_, _, _| rng.gen_range(-1.0..1.0));
            let flow = Tensor::from_fn(6, 7, 2, |_, _, _| rng.gen_range(-3.0..3.0));
            let lhs = ops::warp_forward(&a.zip_map(&b, |x, y| x + s * y).unwrap(), &flow);
            let rhs = ops::warp_forward(&a, &flow).zip_map(&ops::warp_forward(&b, &flow), |x, y| x + s * y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
        }

        #[test]
        fn warp_of_unit_frame_stays_in_range(seed in 0u64..5000) {
            let f = random_frame(seed, 5, 5, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let flow = FlowField::new(Tensor::from_fn(5, 5, 2, |_, _, _| rng.gen_range(-8.0..8.0))).unwrap();
            let out = backward_warp(&f, &flow).unwrap();
            prop_assert!(out.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn static_scene_identity_composition() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = KernelPredictionNet::new(
            &mut params,
            "V",
            KernelNetConfig {
                kernel_size: 5,
                conv_width: 4,
                dense_width: 4,
            },
            &mut rng,
        )
        .unwrap();
        let a = FeatureNet::new(
            &mut params,
            "A_final",
            12,
            3,
            FeatureNetConfig {
                blocks: 1,
                convs_per_block: 1,
                channels: 4,
            },
            ResidualInit::MeanOfGroups(vec![0, 1]),
            &mut rng,
        )
        .unwrap();
        v.force_delta(&mut params);
        a.zero_branch(&mut params);
        let frame = random_frame(6, 8, 8, 3);
        let refined = RefinedFlows {
            to_t: FlowField::zeros(8, 8),
            to_t1: FlowField::zeros(8, 8),
        };
        let out = synthesize_frame(&params, &v, &a, &refined, &frame, &frame, TimeStep::HALF).unwrap();
        assert!(out.tensor().max_abs_diff(frame.tensor()) < 1e-15);
        let again = synthesize_frame(&params, &v, &a, &refined, &frame, &frame, TimeStep::HALF).unwrap();
        assert_eq!(out, again);
    }
}
