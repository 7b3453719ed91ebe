//! Flow refinement: blended flows are re-expressed as features and filtered
//! with kernels predicted from the coarse flows and the time step.

use crate::error::Result;
use crate::flow::{blend_flows, InitialFlows};
use crate::graph::{Graph, Var};
use crate::metaops::{build_side_tensor, FeatureNet, KernelPredictionNet};
use crate::params::ParamSet;
use crate::tensor::{FlowField, TimeStep};

/// Refined flows from the intermediate time to each input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedFlows {
    pub to_t: FlowField,
    pub to_t1: FlowField,
}

/// Records the refinement stage on `g` and returns `(to_t, to_t1)`.
///
/// `context`, when present, is concatenated after each blended flow as extra
/// feature-net input channels.
pub fn refine_graph(
    g: &mut Graph,
    kernel_net: &KernelPredictionNet,
    feature_net: &FeatureNet,
    init: &InitialFlows,
    alpha: TimeStep,
    context: Option<Var>,
) -> Result<(Var, Var)> {
    init.check_shapes()?;
    let (blend_t, blend_t1) = blend_flows(&init.full_fwd, &init.full_bwd, alpha)?;
    // Both directions share one side tensor built from the coarse flows.
    let side = build_side_tensor(&init.half_fwd_up, &init.half_bwd_up, alpha)?;
    let side = g.constant(side.into_tensor());
    let kernels = kernel_net.forward(g, side)?;
    let size = kernel_net.kernel_size();

    let mut refine = |blended: FlowField| -> Result<Var> {
        let f = g.constant(blended.into_tensor());
        let input = match context {
            Some(ctx) => g.concat(&[f, ctx])?,
            None => f,
        };
        let features = feature_net.forward(g, input)?;
        g.adaptive_conv(features, kernels, size)
    };
    let to_t = refine(blend_t)?;
    let to_t1 = refine(blend_t1)?;
    Ok((to_t, to_t1))
}

pub fn refine_flows(
    params: &ParamSet,
    kernel_net: &KernelPredictionNet,
    feature_net: &FeatureNet,
    init: &InitialFlows,
    alpha: TimeStep,
) -> Result<RefinedFlows> {
    let mut g = Graph::new(params);
    let (to_t, to_t1) = refine_graph(&mut g, kernel_net, feature_net, init, alpha, None)?;
    Ok(RefinedFlows {
        to_t: FlowField::new(g.value(to_t).clone())?,
        to_t1: FlowField::new(g.value(to_t1).clone())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metaops::{FeatureNetConfig, KernelNetConfig, ResidualInit};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nets(params: &mut ParamSet) -> (KernelPredictionNet, FeatureNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = KernelPredictionNet::new(
            params,
            "K",
            KernelNetConfig {
                kernel_size: 3,
                conv_width: 4,
                dense_width: 4,
            },
            &mut rng,
        )
        .unwrap();
        let a = FeatureNet::new(
            params,
            "A",
            2,
            2,
            FeatureNetConfig {
                blocks: 1,
                convs_per_block: 2,
                channels: 4,
            },
            ResidualInit::MeanOfGroups(vec![0]),
            &mut rng,
        )
        .unwrap();
        (k, a)
    }

    fn random_flows(seed: u64) -> InitialFlows {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = || FlowField::new(Tensor::from_fn(8, 8, 2, |_, _, _| rng.gen_range(-2.0..2.0))).unwrap();
        InitialFlows {
            full_fwd: f(),
            full_bwd: f(),
            half_fwd_up: f(),
            half_bwd_up: f(),
        }
    }

    #[test]
    fn identity_configuration_reduces_to_blend() {
        let mut params = ParamSet::new();
        let (k, a) = nets(&mut params);
        k.force_delta(&mut params);
        a.zero_branch(&mut params);
        let init = random_flows(1);
        let alpha = TimeStep::new(0.3).unwrap();
        let refined = refine_flows(&params, &k, &a, &init, alpha).unwrap();
        let (bt, bt1) = blend_flows(&init.full_fwd, &init.full_bwd, alpha).unwrap();
        assert_eq!(refined.to_t, bt);
        assert_eq!(refined.to_t1, bt1);
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let mut params = ParamSet::new();
        let (k, a) = nets(&mut params);
        let init = random_flows(2);
        let r1 = refine_flows(&params, &k, &a, &init, TimeStep::HALF).unwrap();
        let r2 = refine_flows(&params, &k, &a, &init, TimeStep::HALF).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.to_t.tensor().shape(), (8, 8, 2));
    }

    #[test]
    fn alpha_changes_output() {
        let mut params = ParamSet::new();
        let (k, a) = nets(&mut params);
        let init = random_flows(3);
        let r1 = refine_flows(&params, &k, &a, &init, TimeStep::new(0.25).unwrap()).unwrap();
        let r2 = refine_flows(&params, &k, &a, &init, TimeStep::new(0.75).unwrap()).unwrap();
        assert!(r1.to_t.tensor().max_abs_diff(r2.to_t.tensor()) > 0.0);
    }

    #[test]
    fn mismatched_initial_flows_rejected() {
        let mut params = ParamSet::new();
        let (k, a) = nets(&mut params);
        let mut init = random_flows(4);
        init.half_bwd_up = FlowField::zeros(8, 9);
        assert!(refine_flows(&params, &k, &a, &init, TimeStep::HALF).is_err());
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut params = ParamSet::new();
        let (k, a) = nets(&mut params);
        let init = random_flows(5);
        let alpha = TimeStep::new(0.4).unwrap();
        let loss = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new(ps);
            let (t, t1) = refine_graph(&mut g, &k, &a, &init, alpha, None).unwrap();
            let (m0, m1) = (g.mean_abs(t), g.mean_abs(t1));
            let s = g.weighted_sum(&[(m0, 1.0), (m1, 1.0)]);
            g.scalar(s)
        };
        let mut g = Graph::new(&params);
        let (t, t1) = refine_graph(&mut g, &k, &a, &init, alpha, None).unwrap();
        let (m0, m1) = (g.mean_abs(t), g.mean_abs(t1));
        let s = g.weighted_sum(&[(m0, 1.0), (m1, 1.0)]);
        let analytic = g.backward(s).params.flatten();
        let flat = params.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let idx = rng.gen_range(0..flat.len());
            let mut p = params.clone();
            let mut v = flat.clone();
            v[idx] += 1e-5;
            p.unflatten(&v).unwrap();
            let up = loss(&p);
            v[idx] -= 2e-5;
            p.unflatten(&v).unwrap();
            let down = loss(&p);
            let fd = (up - down) / 2e-5;
            let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(err <= 1e-4, "param {idx}: {} vs {fd}", analytic[idx]);
        }
    }
}
