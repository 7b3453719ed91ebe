//! Trains and benchmarks the four ablation variants under one budget.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::flow::FlowEstimator;
use crate::model::{Model, ModelConfig, Variant, FLOW_FEATURE_NET, FLOW_KERNEL_NET, FRAME_KERNEL_NET};
use crate::train::trainer::sample_loss;
use crate::train::{prepare_samples, train_loop, EpochLog, LossWeights, TrainConfig};

use super::bench::{run_benchmark_prepared, MetricReport};
use super::dataset::TripletSample;

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub param_count: usize,
    pub kernel_param_count: usize,
    /// Parameter-name prefixes present in the model.
    pub networks: Vec<String>,
    pub weights: LossWeights,
    /// The network set matches the variant definition.
    pub audit_passed: bool,
    /// The optimised total recomputes exactly from the effective weights.
    pub loss_wiring_passed: bool,
    #[serde(skip)]
    pub log: Vec<EpochLog>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub variants: Vec<VariantResult>,
}

fn expected_networks(variant: Variant) -> Vec<&'static str> {
    let mut v = vec!["A_final"];
    if variant.refines_flow() {
        v.extend([FLOW_FEATURE_NET, FLOW_KERNEL_NET]);
    }
    if variant.synthesis_kernels() {
        v.push(FRAME_KERNEL_NET);
    }
    v.sort();
    v
}

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == variant)
    }

    pub fn wiring_passed(&self) -> bool {
        self.variants.iter().all(|r| r.audit_passed && r.loss_wiring_passed)
    }

    /// Whether mean PSNR follows Full ≥ UNC ≥ UNR ≥ Base. Reported, not enforced.
    pub fn ordering_holds(&self) -> Option<bool> {
        let order = [Variant::MinFull, Variant::MinUnc, Variant::MinUnr, Variant::MinBase];
        let psnrs: Option<Vec<f64>> = order
            .iter()
            .map(|&v| self.get(v).and_then(|r| r.report.aggregates()).map(|a| a.psnr))
            .collect();
        psnrs.map(|p| p.windows(2).all(|w| w[0] >= w[1]))
    }

    pub fn table(&self) -> String {
        let mut s = String::from("variant,params,kernel_params,final_loss,psnr,ssim,ie,audit,loss_wiring\n");
        for r in &self.variants {
            let agg = r.report.aggregates();
            let final_loss = r.log.last().map(|e| e.total);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.variant.label(),
                r.param_count,
                r.kernel_param_count,
                final_loss.map_or("-".into(), |v| v.to_string()),
                agg.map_or("-".into(), |a| a.psnr.to_string()),
                agg.map_or("-".into(), |a| a.ssim.to_string()),
                agg.map_or("-".into(), |a| a.ie.to_string()),
                if r.audit_passed { "ok" } else { "FAIL" },
                if r.loss_wiring_passed { "ok" } else { "FAIL" },
            );
        }
        let note = match self.ordering_holds() {
            Some(true) => "expected ordering Full >= UNC >= UNR >= Base: observed",
            Some(false) => "expected ordering Full >= UNC >= UNR >= Base: not observed (soft expectation)",
            None => "expected ordering Full >= UNC >= UNR >= Base: no scores",
        };
        s.push_str(note);
        s.push('\n');
        s
    }
}

/// Trains every variant from the same seed on `dataset` and benchmarks it on
/// the same samples.
pub fn run_ablation(
    model: &ModelConfig,
    train: &TrainConfig,
    estimator: &FlowEstimator,
    dataset: &[TripletSample],
    seed: u64,
) -> Result<AblationReport> {
    let samples = prepare_samples(dataset, estimator, train.alpha_policy)?;
    let mut variants = Vec::new();
    for variant in Variant::ALL {
        let mut m = Model::new(ModelConfig { variant, ..model.clone() }, seed)?;
        let weights = train.effective_weights(variant);
        let mut networks: Vec<String> = m
            .params
            .names()
            .map(|n| n.split('.').next().unwrap_or(n).to_string())
            .collect();
        networks.sort();
        networks.dedup();
        let audit_passed = networks == expected_networks(variant)
            && (variant.synthesis_kernels() || m.kernel_param_count() == 0);
        let loss_wiring_passed = match samples.first() {
            Some(s) => {
                let (b, _) = sample_loss(&m, s, weights, train.warp_loss)?;
                let reconstruction_only = !variant.auxiliary_losses();
                b.total == b.recomputed_total()
                    && (!reconstruction_only || b.total == weights.reconstruction * b.l_r)
            }
            None => true,
        };
        log::info!("ablation: training {}", variant.label());
        let log = if samples.is_empty() {
            Vec::new()
        } else {
            train_loop(&mut m, train, &samples, None)?.log
        };
        let report = run_benchmark_prepared(&m, &samples);
        variants.push(VariantResult {
            variant,
            param_count: m.params.numel(),
            kernel_param_count: m.kernel_param_count(),
            networks,
            weights,
            audit_passed,
            loss_wiring_passed,
            log,
            report,
        });
    }
    Ok(AblationReport { variants })
}
