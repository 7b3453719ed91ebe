//! Initial flow estimation at two resolutions and the time-step blend.

mod classical;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use classical::{classical_flow, ClassicalParams};

use crate::error::{Error, Result};
use crate::io::read_flo;
use crate::resample::{downsample_half, upsample_flow_to};
use crate::tensor::{FlowField, Frame, Tensor, TimeStep};

/// Frozen initial flow estimator. No gradients flow into any variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FlowEstimator {
    /// Always returns zero displacement.
    Zero,
    /// Coarse-to-fine Horn–Schunck.
    Classical(ClassicalParams),
    /// Precomputed flows `<pair-id>_fwd.flo` / `<pair-id>_bwd.flo` in `dir`,
    /// with optional `_fwd_half.flo` / `_bwd_half.flo` coarse flows.
    FileBacked { dir: PathBuf },
}

impl Default for FlowEstimator {
    fn default() -> Self {
        FlowEstimator::Classical(ClassicalParams::default())
    }
}

impl FlowEstimator {
    /// Flow `f` such that `b(x + f(x)) ≈ a(x)`; shape of `a`.
    ///
    /// The file-backed estimator has no frame-based fallback and rejects this call.
    pub fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        check_pair(a, b)?;
        match self {
            FlowEstimator::Zero => Ok(FlowField::zeros(a.height(), a.width())),
            FlowEstimator::Classical(params) => classical_flow(a, b, params),
            FlowEstimator::FileBacked { .. } => Err(Error::invalid(
                "file-backed estimator needs a pair id; use estimate_initial_flows",
            )),
        }
    }

    fn flo_path(dir: &Path, pair_id: &str, suffix: &str) -> PathBuf {
        dir.join(format!("{pair_id}_{suffix}.flo"))
    }
}

fn check_pair(a: &Frame, b: &Frame) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::invalid(format!(
            "frame shapes differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// Full-resolution flows in both directions plus the half-resolution
/// estimates brought back to full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialFlows {
    pub full_fwd: FlowField,
    pub full_bwd: FlowField,
    pub half_fwd_up: FlowField,
    pub half_bwd_up: FlowField,
}

impl InitialFlows {
    pub fn zeros(height: usize, width: usize) -> Self {
        let z = FlowField::zeros(height, width);
        InitialFlows {
            full_fwd: z.clone(),
            full_bwd: z.clone(),
            half_fwd_up: z.clone(),
            half_bwd_up: z,
        }
    }

    pub fn height(&self) -> usize {
        self.full_fwd.height()
    }

    pub fn width(&self) -> usize {
        self.full_fwd.width()
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let shape = self.full_fwd.tensor().shape();
        for f in [&self.full_bwd, &self.half_fwd_up, &self.half_bwd_up] {
            if f.tensor().shape() != shape {
                return Err(Error::invalid("initial flows do not share one shape"));
            }
        }
        Ok(())
    }
}

/// Estimates flows between `i_t` and `i_t1` at full and half resolution.
/// `pair_id` is only consulted by the file-backed estimator.
pub fn estimate_initial_flows(
    estimator: &FlowEstimator,
    i_t: &Frame,
    i_t1: &Frame,
    pair_id: Option<&str>,
) -> Result<InitialFlows> {
    check_pair(i_t, i_t1)?;
    let (h, w) = (i_t.height(), i_t.width());
    if let FlowEstimator::FileBacked { dir } = estimator {
        let id = pair_id.ok_or_else(|| Error::invalid("file-backed estimator needs a pair id"))?;
        let load = |suffix: &str| -> Result<FlowField> {
            let flow = read_flo(FlowEstimator::flo_path(dir, id, suffix))?;
            if flow.height() != h || flow.width() != w {
                return Err(Error::invalid(format!(
                    "{id}_{suffix}.flo is {}x{}, frames are {h}x{w}",
                    flow.height(),
                    flow.width()
                )));
            }
            Ok(flow)
        };
        let full_fwd = load("fwd")?;
        let full_bwd = load("bwd")?;
        let half = |suffix: &str, full: &FlowField| -> Result<FlowField> {
            let path = FlowEstimator::flo_path(dir, id, suffix);
            if path.exists() {
                Ok(upsample_flow_to(&read_flo(path)?, h, w))
            } else {
                Ok(full.clone())
            }
        };
        return Ok(InitialFlows {
            half_fwd_up: half("fwd_half", &full_fwd)?,
            half_bwd_up: half("bwd_half", &full_bwd)?,
            full_fwd,
            full_bwd,
        });
    }
    let full_fwd = estimator.estimate(i_t, i_t1)?;
    let full_bwd = estimator.estimate(i_t1, i_t)?;
    let (d_t, d_t1) = (downsample_half(i_t)?, downsample_half(i_t1)?);
    let half_fwd_up = upsample_flow_to(&estimator.estimate(&d_t, &d_t1)?, h, w);
    let half_bwd_up = upsample_flow_to(&estimator.estimate(&d_t1, &d_t)?, h, w);
    Ok(InitialFlows {
        full_fwd,
        full_bwd,
        half_fwd_up,
        half_bwd_up,
    })
}

/// Blend weights `[[a, b], [c, d]]` such that
/// `to_t = a·fwd + b·bwd` and `to_t1 = c·fwd + d·bwd`.
pub fn blend_coefficients(alpha: f64) -> [[f64; 2]; 2] {
    let a = alpha;
    [
        [-(1.0 - a) * a, a * a],
        [(1.0 - a) * (1.0 - a), -a * (1.0 - a)],
    ]
}

/// Same as [`blend_flows`] but accepts any real `alpha`, including the
/// closed endpoints 0 and 1.
pub fn blend_flows_at(
    full_fwd: &FlowField,
    full_bwd: &FlowField,
    alpha: f64,
) -> Result<(FlowField, FlowField)> {
    if full_fwd.tensor().shape() != full_bwd.tensor().shape() {
        return Err(Error::invalid("blend: flow shapes differ"));
    }
    let [[a, b], [c, d]] = blend_coefficients(alpha);
    let mix = |x: f64, y: f64| -> Result<FlowField> {
        let t: Tensor = full_fwd
            .tensor()
            .zip_map(full_bwd.tensor(), |f, g| x * f + y * g)?;
        FlowField::new(t)
    };
    Ok((mix(a, b)?, mix(c, d)?))
}

/// Flows from the intermediate time `t + α` back to `t` and forward to `t + 1`,
/// approximated from the two inter-frame flows.
pub fn blend_flows(
    full_fwd: &FlowField,
    full_bwd: &FlowField,
    alpha: TimeStep,
) -> Result<(FlowField, FlowField)> {
    blend_flows_at(full_fwd, full_bwd, alpha.value())
}
