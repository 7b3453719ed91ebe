//! Finite-difference verification of the analytic parameter gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{ParamGrads, ParamId, ParamSet};

use super::loss::{loss_graph, LossWeights, WarpLossForm};
use super::trainer::{sample_loss, PreparedSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub n_params: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    pub seed: u64,
    /// Denominator floor of the relative error, so that two near-zero
    /// gradients do not produce a spurious large ratio.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            n_params: 40,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Names of the networks (parameter name prefixes) the sample touched.
    pub fn networks(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .entries
            .iter()
            .map(|e| network_of(&e.name).to_string())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn summary(&self) -> String {
        format!(
            "gradcheck: {} parameters over [{}], max rel. error {:.3e} (tolerance {:.1e}) {}",
            self.entries.len(),
            self.networks().join(", "),
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

fn network_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Draws `n` distinct scalar parameters, cycling through the networks so each
/// gets an equal share; within a network every scalar is equally likely.
pub fn sample_parameters(params: &ParamSet, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut pools: BTreeMap<&str, Vec<(ParamId, usize)>> = BTreeMap::new();
    for (id, p) in params.iter() {
        let pool = pools.entry(network_of(&p.name)).or_default();
        pool.extend((0..p.values.len()).map(|k| (id, k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<(ParamId, usize)>> = pools
        .into_values()
        .map(|mut pool| {
            pool.shuffle(&mut rng);
            pool
        })
        .collect();
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n && pools.iter().any(|p| !p.is_empty()) {
        for pool in pools.iter_mut() {
            if picked.len() == n {
                break;
            }
            if let Some(x) = pool.pop() {
                picked.push(x);
            }
        }
    }
    picked
}

fn total(model: &Model, sample: &PreparedSample, weights: LossWeights, form: WarpLossForm) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let vars = model.forward(&mut g, &sample.first, &sample.last, &sample.init, sample.alpha)?;
    let loss = loss_graph(&mut g, &vars, &sample.gt, &sample.reference, weights, form)?;
    Ok(g.scalar(loss.total))
}

/// Compares `analytic` against central differences of the total loss.
pub fn compare_gradients(
    model: &Model,
    sample: &PreparedSample,
    weights: LossWeights,
    form: WarpLossForm,
    options: &GradCheckOptions,
    analytic: &ParamGrads,
) -> Result<GradCheckReport> {
    if !(options.step > 0.0) {
        return Err(Error::invalid("gradcheck step must be positive"));
    }
    if analytic.len() != model.params.len() {
        return Err(Error::invalid("gradient layout does not match parameters"));
    }
    let mut probe = model.clone();
    let mut entries = Vec::new();
    for (id, k) in sample_parameters(&model.params, options.n_params, options.seed) {
        let original = probe.params.values(id)[k];
        probe.params.values_mut(id)[k] = original + options.step;
        let plus = total(&probe, sample, weights, form)?;
        probe.params.values_mut(id)[k] = original - options.step;
        let minus = total(&probe, sample, weights, form)?;
        probe.params.values_mut(id)[k] = original;
        let numeric = (plus - minus) / (2.0 * options.step);
        let a = analytic.get(id)[k];
        entries.push(GradCheckEntry {
            name: model.params.get(id).name.clone(),
            index: k,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, options.floor),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= options.tolerance,
        max_rel_error,
        tolerance: options.tolerance,
        entries,
    })
}

pub fn grad_check(
    model: &Model,
    sample: &PreparedSample,
    weights: LossWeights,
    form: WarpLossForm,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = sample_loss(model, sample, weights, form)?;
    compare_gradients(model, sample, weights, form, options, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::TripletSample;
    use crate::flow::FlowEstimator;
    use crate::model::{ModelConfig, Variant};
    use crate::synthetic::translation_triplet;
    use crate::tensor::TimeStep;
    use crate::train::{prepare_samples, AlphaPolicy};

    fn sample(alpha: f64) -> PreparedSample {
        let alpha = TimeStep::new(alpha).unwrap();
        let [a, b, c] = translation_triplet(8, 8, 3, (1.3, -0.6), alpha, 4).unwrap();
        let s = TripletSample::new("g", a, b, c, alpha).unwrap();
        prepare_samples(&[s], &FlowEstimator::default(), AlphaPolicy::Recorded)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn sampling_spans_networks_evenly() {
        let m = Model::new(ModelConfig::toy(), 0).unwrap();
        let picked = sample_parameters(&m.params, 40, 3);
        assert_eq!(picked.len(), 40);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (id, _) in &picked {
            *counts.entry(network_of(&m.params.get(*id).name).to_string()).or_default() += 1;
        }
        assert_eq!(counts.keys().collect::<Vec<_>>(), ["A", "A_final", "K", "V"]);
        assert!(counts.values().all(|&c| c == 10));
        let mut uniq = picked.clone();
        uniq.sort_by_key(|&(id, k)| (id.index(), k));
        uniq.dedup();
        assert_eq!(uniq.len(), 40);
        assert_eq!(sample_parameters(&m.params, 40, 3), picked);
    }

    #[test]
    fn linear_model_is_exact() {
        let mut m = Model::new(ModelConfig::toy(), 1).unwrap();
        m.set_identity();
        let opts = GradCheckOptions::default();
        let r = grad_check(&m, &sample(0.5), LossWeights::default(), WarpLossForm::Consistent, &opts).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.summary());
    }

    #[test]
    fn full_toy_pipeline_passes() {
        for (seed, alpha) in [(2, 0.5), (5, 0.3)] {
            let m = Model::new(ModelConfig::toy(), seed).unwrap();
            let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
            let r = grad_check(&m, &sample(alpha), LossWeights::default(), WarpLossForm::Consistent, &opts).unwrap();
            println!("{}", r.summary());
            assert!(r.passed, "{}\n{:#?}", r.summary(), r.entries);
            assert_eq!(r.networks(), ["A", "A_final", "K", "V"]);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let m = Model::new(ModelConfig::toy(), 2).unwrap();
        let s = sample(0.5);
        let w = LossWeights::default();
        let opts = GradCheckOptions::default();
        let (_, mut grads) = sample_loss(&m, &s, w, WarpLossForm::Consistent).unwrap();
        let (id, k) = sample_parameters(&m.params, opts.n_params, opts.seed)
            .into_iter()
            .find(|&(id, k)| grads.get(id)[k].abs() > 1e-4)
            .expect("some sampled gradient is sizeable");
        grads.get_mut(id)[k] = 0.0;
        let r = compare_gradients(&m, &s, w, WarpLossForm::Consistent, &opts, &grads).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 1.0).abs() < 1e-6);
    }

    #[test]
    fn every_variant_checks() {
        for variant in Variant::ALL {
            let m = Model::new(ModelConfig { variant, ..ModelConfig::toy() }, 6).unwrap();
            let opts = GradCheckOptions { n_params: 12, ..GradCheckOptions::default() };
            let r = grad_check(&m, &sample(0.5), LossWeights::default(), WarpLossForm::Literal, &opts).unwrap();
            assert!(r.passed, "{variant:?}: {}", r.summary());
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
