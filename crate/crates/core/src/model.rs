//! Model configuration, the four ablation variants and end-to-end prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{blend_flows, InitialFlows};
use crate::graph::{Graph, Var};
use crate::metaops::{FeatureNet, FeatureNetConfig, KernelNetConfig, KernelPredictionNet, ResidualInit};
use crate::params::ParamSet;
use crate::refine::{refine_graph, RefinedFlows};
use crate::synth::{check_frames, synthesize_graph};
use crate::tensor::{FlowField, Frame, TimeStep};

/// Parameter-name prefixes of the four networks.
pub const FLOW_KERNEL_NET: &str = "K";
pub const FLOW_FEATURE_NET: &str = "A";
pub const FRAME_KERNEL_NET: &str = "V";
pub const FRAME_FEATURE_NET: &str = "A_final";

/// Ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Feature net over warps by the blended flows; no kernels, no refinement.
    MinBase,
    /// Base plus motion-aware kernel synthesis; no flow refinement.
    MinUnr,
    /// Full architecture trained with the reconstruction term only.
    MinUnc,
    #[default]
    MinFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MinBase, Variant::MinUnr, Variant::MinUnc, Variant::MinFull];

    pub fn refines_flow(self) -> bool {
        matches!(self, Variant::MinUnc | Variant::MinFull)
    }

    pub fn synthesis_kernels(self) -> bool {
        !matches!(self, Variant::MinBase)
    }

    /// Whether the flow, warp and smoothness terms enter the loss.
    pub fn auxiliary_losses(self) -> bool {
        !matches!(self, Variant::MinUnc)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::MinBase => "MIN-Base",
            Variant::MinUnr => "MIN-UNR",
            Variant::MinUnc => "MIN-UNC",
            Variant::MinFull => "MIN-Full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame channels (1 or 3).
    pub channels: usize,
    pub flow_kernel_net: KernelNetConfig,
    pub frame_kernel_net: KernelNetConfig,
    pub flow_features: FeatureNetConfig,
    pub frame_features: FeatureNetConfig,
    /// Feed both input frames to the flow feature net alongside the blended flow.
    pub content_aware_refine: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            flow_kernel_net: KernelNetConfig {
                kernel_size: 3,
                ..KernelNetConfig::default()
            },
            frame_kernel_net: KernelNetConfig::default(),
            flow_features: FeatureNetConfig {
                blocks: 4,
                convs_per_block: 4,
                channels: 32,
            },
            frame_features: FeatureNetConfig {
                blocks: 12,
                convs_per_block: 8,
                channels: 64,
            },
            content_aware_refine: false,
            variant: Variant::MinFull,
        }
    }
}

impl ModelConfig {
    /// Desk-scale networks for tests and quick experiments.
    pub fn toy() -> Self {
        let kernel = |k| KernelNetConfig {
            kernel_size: k,
            conv_width: 8,
            dense_width: 16,
        };
        ModelConfig {
            channels: 3,
            flow_kernel_net: kernel(3),
            frame_kernel_net: kernel(3),
            flow_features: FeatureNetConfig {
                blocks: 1,
                convs_per_block: 2,
                channels: 8,
            },
            frame_features: FeatureNetConfig {
                blocks: 2,
                convs_per_block: 2,
                channels: 16,
            },
            content_aware_refine: false,
            variant: Variant::MinFull,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!("model.channels must be 1 or 3, got {}", self.channels)));
        }
        for (name, k) in [
            ("flow_kernel_net", &self.flow_kernel_net),
            ("frame_kernel_net", &self.frame_kernel_net),
        ] {
            if k.kernel_size % 2 == 0 || k.conv_width == 0 || k.dense_width == 0 {
                return Err(Error::Config(format!("model.{name}: odd kernel size and positive widths required")));
            }
        }
        for (name, f) in [("flow_features", &self.flow_features), ("frame_features", &self.frame_features)] {
            if f.blocks == 0 || f.convs_per_block == 0 || f.channels == 0 {
                return Err(Error::Config(format!("model.{name}: all sizes must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct RefineStage {
    kernels: KernelPredictionNet,
    features: FeatureNet,
}

/// The interpolation network: configuration, parameters and network handles.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    pub params: ParamSet,
    refine: Option<RefineStage>,
    synth_kernels: Option<KernelPredictionNet>,
    synth_features: FeatureNet,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub i_t: Var,
    pub i_t1: Var,
    pub to_t: Var,
    pub to_t1: Var,
    pub warped_t: Var,
    pub warped_t1: Var,
    pub prediction: Var,
}

impl Model {
    /// Builds a freshly initialized model. Parameter values depend only on
    /// `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = config.channels;
        let refine = if config.variant.refines_flow() {
            let kernels = KernelPredictionNet::new(&mut params, FLOW_KERNEL_NET, config.flow_kernel_net, &mut rng)?;
            let in_ch = if config.content_aware_refine { 2 + 2 * c } else { 2 };
            let features = FeatureNet::new(
                &mut params,
                FLOW_FEATURE_NET,
                in_ch,
                2,
                config.flow_features,
                ResidualInit::MeanOfGroups(vec![0]),
                &mut rng,
            )?;
            Some(RefineStage { kernels, features })
        } else {
            None
        };
        let synth_kernels = if config.variant.synthesis_kernels() {
            Some(KernelPredictionNet::new(&mut params, FRAME_KERNEL_NET, config.frame_kernel_net, &mut rng)?)
        } else {
            None
        };
        let synth_features = FeatureNet::new(
            &mut params,
            FRAME_FEATURE_NET,
            4 * c,
            c,
            config.frame_features,
            ResidualInit::MeanOfGroups(vec![0, 1]),
            &mut rng,
        )?;
        Ok(Model {
            config,
            seed,
            params,
            refine,
            synth_kernels,
            synth_features,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn flow_kernel_net(&self) -> Option<&KernelPredictionNet> {
        self.refine.as_ref().map(|r| &r.kernels)
    }

    pub fn flow_feature_net(&self) -> Option<&FeatureNet> {
        self.refine.as_ref().map(|r| &r.features)
    }

    pub fn frame_kernel_net(&self) -> Option<&KernelPredictionNet> {
        self.synth_kernels.as_ref()
    }

    pub fn frame_feature_net(&self) -> &FeatureNet {
        &self.synth_features
    }

    /// Number of scalars in kernel-prediction networks.
    pub fn kernel_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| is_kernel_param(&p.name))
            .map(|(_, p)| p.values.len())
            .sum()
    }

    /// Sets every network to its identity configuration: delta kernels and
    /// zero feature branches, so the model reproduces the blend-and-average
    /// baseline.
    pub fn set_identity(&mut self) {
        if let Some(r) = &self.refine {
            r.kernels.force_delta(&mut self.params);
            r.features.zero_branch(&mut self.params);
        }
        if let Some(v) = &self.synth_kernels {
            v.force_delta(&mut self.params);
        }
        self.synth_features.zero_branch(&mut self.params);
    }

    /// Records a forward pass on a graph bound to `self.params`.
    pub fn forward(
        &self,
        g: &mut Graph,
        i_t: &Frame,
        i_t1: &Frame,
        init: &InitialFlows,
        alpha: TimeStep,
    ) -> Result<ForwardVars> {
        check_frames(i_t, i_t1)?;
        if i_t.channels() != self.config.channels {
            return Err(Error::invalid(format!(
                "model expects {} channels, frames have {}",
                self.config.channels,
                i_t.channels()
            )));
        }
        if init.height() != i_t.height() || init.width() != i_t.width() {
            return Err(Error::invalid("initial flows do not match frame size"));
        }
        let vt = g.constant(i_t.tensor().clone());
        let vt1 = g.constant(i_t1.tensor().clone());
        let (to_t, to_t1) = match &self.refine {
            Some(stage) => {
                let context = if self.config.content_aware_refine {
                    Some(g.concat(&[vt, vt1])?)
                } else {
                    None
                };
                refine_graph(g, &stage.kernels, &stage.features, init, alpha, context)?
            }
            None => {
                let (bt, bt1) = blend_flows(&init.full_fwd, &init.full_bwd, alpha)?;
                (g.constant(bt.into_tensor()), g.constant(bt1.into_tensor()))
            }
        };
        let synth = synthesize_graph(
            g,
            self.synth_kernels.as_ref(),
            &self.synth_features,
            (to_t, to_t1),
            (vt, vt1),
            alpha,
        )?;
        Ok(ForwardVars {
            i_t: vt,
            i_t1: vt1,
            to_t,
            to_t1,
            warped_t: synth.warped_t,
            warped_t1: synth.warped_t1,
            prediction: synth.prediction,
        })
    }

    /// Interpolated frame given precomputed initial flows.
    pub fn predict(&self, i_t: &Frame, i_t1: &Frame, init: &InitialFlows, alpha: TimeStep) -> Result<Frame> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward(&mut g, i_t, i_t1, init, alpha)?;
        Frame::new(g.value(vars.prediction).clone())
    }

    pub fn refined_flows(&self, i_t: &Frame, i_t1: &Frame, init: &InitialFlows, alpha: TimeStep) -> Result<RefinedFlows> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward(&mut g, i_t, i_t1, init, alpha)?;
        Ok(RefinedFlows {
            to_t: FlowField::new(g.value(vars.to_t).clone())?,
            to_t1: FlowField::new(g.value(vars.to_t1).clone())?,
        })
    }
}

pub fn is_kernel_param(name: &str) -> bool {
    let prefix = name.split('.').next().unwrap_or("");
    prefix == FLOW_KERNEL_NET || prefix == FRAME_KERNEL_NET
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::Texture;

    #[test]
    fn variants_register_expected_networks() {
        let prefixes = |v: Variant| -> Vec<String> {
            let m = Model::new(ModelConfig { variant: v, ..ModelConfig::toy() }, 0).unwrap();
            let mut p: Vec<String> = m.params.names().map(|n| n.split('.').next().unwrap().to_string()).collect();
            p.dedup();
            p
        };
        assert_eq!(prefixes(Variant::MinFull), ["K", "A", "V", "A_final"]);
        assert_eq!(prefixes(Variant::MinUnc), ["K", "A", "V", "A_final"]);
        assert_eq!(prefixes(Variant::MinUnr), ["V", "A_final"]);
        assert_eq!(prefixes(Variant::MinBase), ["A_final"]);
        let base = Model::new(ModelConfig { variant: Variant::MinBase, ..ModelConfig::toy() }, 0).unwrap();
        assert_eq!(base.kernel_param_count(), 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(ModelConfig::toy(), 7).unwrap();
        let b = Model::new(ModelConfig::toy(), 7).unwrap();
        let c = Model::new(ModelConfig::toy(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn identity_model_on_static_scene() {
        for variant in Variant::ALL {
            let mut m = Model::new(ModelConfig { variant, ..ModelConfig::toy() }, 1).unwrap();
            m.set_identity();
            let f = Texture::random(4).render(12, 10, 3, 0.0, 0.0);
            let out = m.predict(&f, &f, &InitialFlows::zeros(12, 10), TimeStep::HALF).unwrap();
            assert!(out.tensor().max_abs_diff(f.tensor()) < 1e-14, "{variant:?}");
        }
    }

    #[test]
    fn content_aware_refine_widens_input() {
        let cfg = ModelConfig {
            content_aware_refine: true,
            ..ModelConfig::toy()
        };
        let m = Model::new(cfg, 0).unwrap();
        assert_eq!(m.flow_feature_net().unwrap().in_channels(), 8);
        let f = Texture::random(2).render(8, 8, 3, 0.0, 0.0);
        let out = m.predict(&f, &f, &InitialFlows::zeros(8, 8), TimeStep::HALF).unwrap();
        assert_eq!(out.tensor().shape(), (8, 8, 3));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = Model::new(ModelConfig::toy(), 0).unwrap();
        let f = Frame::filled(8, 8, 1, 0.5).unwrap();
        assert!(m.predict(&f, &f, &InitialFlows::zeros(8, 8), TimeStep::HALF).is_err());
        assert!(Model::new(ModelConfig { channels: 2, ..ModelConfig::toy() }, 0).is_err());
    }
}
