//! Coarse-to-fine Horn–Schunck flow with one warp per pyramid level.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ops::warp_forward;
use crate::resample::{pool_half, upsample_flow_to};
use crate::tensor::{FlowField, Frame, Tensor};

/// Levels stop being added once a side would drop below this.
const MIN_LEVEL_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalParams {
    pub levels: usize,
    pub iterations: usize,
    /// Horn–Schunck regularization weight on the 0–255 intensity scale.
    pub smoothness: f64,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        ClassicalParams {
            levels: 3,
            iterations: 50,
            smoothness: 15.0,
        }
    }
}

/// Flow `f` with `b(x + f(x)) ≈ a(x)`, estimated on luminance.
pub fn classical_flow(a: &Frame, b: &Frame, params: &ClassicalParams) -> Result<FlowField> {
    let mut pyr_a = vec![a.luminance().scaled(255.0)];
    let mut pyr_b = vec![b.luminance().scaled(255.0)];
    while pyr_a.len() < params.levels.max(1) {
        let last = pyr_a.last().unwrap();
        if last.height() / 2 < MIN_LEVEL_SIDE || last.width() / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let next_a = pool_half(last);
        let next_b = pool_half(pyr_b.last().unwrap());
        pyr_a.push(next_a);
        pyr_b.push(next_b);
    }

    let mut flow: Option<FlowField> = None;
    for (la, lb) in pyr_a.iter().zip(&pyr_b).rev() {
        let (h, w) = (la.height(), la.width());
        let init = match flow {
            Some(coarse) => upsample_flow_to(&coarse, h, w),
            None => FlowField::zeros(h, w),
        };
        flow = Some(refine_level(la, lb, init, params));
    }
    Ok(flow.expect("at least one pyramid level"))
}

fn central_diff(t: &Tensor, i: usize, j: usize, horizontal: bool) -> f64 {
    let (h, w) = (t.height(), t.width());
    if horizontal {
        0.5 * (t.get(i, (j + 1).min(w - 1), 0) - t.get(i, j.saturating_sub(1), 0))
    } else {
        0.5 * (t.get((i + 1).min(h - 1), j, 0) - t.get(i.saturating_sub(1), j, 0))
    }
}

/// Horn–Schunck neighbourhood average (1/6 edge, 1/12 corner neighbours).
fn neighbour_mean(t: &Tensor, i: usize, j: usize, c: usize) -> f64 {
    let (h, w) = (t.height() as isize, t.width() as isize);
    let at = |di: isize, dj: isize| {
        let y = (i as isize + di).clamp(0, h - 1) as usize;
        let x = (j as isize + dj).clamp(0, w - 1) as usize;
        t.get(y, x, c)
    };
    (at(-1, 0) + at(1, 0) + at(0, -1) + at(0, 1)) / 6.0
        + (at(-1, -1) + at(-1, 1) + at(1, -1) + at(1, 1)) / 12.0
}

fn refine_level(a: &Tensor, b: &Tensor, init: FlowField, params: &ClassicalParams) -> FlowField {
    let (h, w) = (a.height(), a.width());
    let warped = warp_forward(b, init.tensor());
    let mut ix = Vec::with_capacity(h * w);
    let mut iy = Vec::with_capacity(h * w);
    let mut it = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            ix.push(0.5 * (central_diff(a, i, j, true) + central_diff(&warped, i, j, true)));
            iy.push(0.5 * (central_diff(a, i, j, false) + central_diff(&warped, i, j, false)));
            it.push(warped.get(i, j, 0) - a.get(i, j, 0));
        }
    }
    let base = init.into_tensor();
    let alpha2 = params.smoothness * params.smoothness;
    let mut cur = base.clone();
    for _ in 0..params.iterations {
        let mut next = Tensor::zeros(h, w, 2);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let ubar = neighbour_mean(&cur, i, j, 0);
                let vbar = neighbour_mean(&cur, i, j, 1);
                let du = ubar - base.get(i, j, 0);
                let dv = vbar - base.get(i, j, 1);
                let t = (ix[p] * du + iy[p] * dv + it[p]) / (alpha2 + ix[p] * ix[p] + iy[p] * iy[p]);
                next.set(i, j, 0, ubar - ix[p] * t);
                next.set(i, j, 1, vbar - iy[p] * t);
            }
        }
        cur = next;
    }
    FlowField::new(cur).expect("Horn-Schunck iterates stay finite")
}
