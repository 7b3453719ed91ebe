//! Half-resolution pooling and flow upsampling.

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Frame, Tensor};

/// Smallest frame side the two-resolution pipeline accepts.
pub const MIN_FRAME_SIDE: usize = 8;

/// 2×2 average pooling to `⌈H/2⌉×⌈W/2⌉`. Odd trailing rows/columns are
/// replicated before pooling.
pub fn pool_half(t: &Tensor) -> Tensor {
    let (h, w, c) = t.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Tensor::from_fn(oh, ow, c, |i, j, ch| {
        let (i0, j0) = (2 * i, 2 * j);
        let (i1, j1) = ((2 * i + 1).min(h - 1), (2 * j + 1).min(w - 1));
        0.25 * (t.get(i0, j0, ch) + t.get(i0, j1, ch) + t.get(i1, j0, ch) + t.get(i1, j1, ch))
    })
}

/// Half-resolution copy of a frame for the coarse flow stage.
pub fn downsample_half(frame: &Frame) -> Result<Frame> {
    if frame.height() < MIN_FRAME_SIDE || frame.width() < MIN_FRAME_SIDE {
        return Err(Error::invalid(format!(
            "frame {}x{} is smaller than the {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE} minimum",
            frame.height(),
            frame.width()
        )));
    }
    Frame::new(pool_half(frame.tensor()))
}

/// Bilinear sample with half-pixel centres and edge clamping.
fn upsample_axis(out_index: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_index as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear 2× upsampling of every channel without rescaling values.
pub fn upsample_2x(t: &Tensor) -> Tensor {
    let (h, w, c) = t.shape();
    Tensor::from_fn(2 * h, 2 * w, c, |i, j, ch| {
        let (y0, y1, fy) = upsample_axis(i, h);
        let (x0, x1, fx) = upsample_axis(j, w);
        let top = (1.0 - fx) * t.get(y0, x0, ch) + fx * t.get(y0, x1, ch);
        let bottom = (1.0 - fx) * t.get(y1, x0, ch) + fx * t.get(y1, x1, ch);
        (1.0 - fy) * top + fy * bottom
    })
}

/// Bilinear 2× upsampling of a flow field; displacements double so they
/// stay in pixels of the target resolution.
pub fn upsample_flow_2x(flow: &FlowField) -> FlowField {
    let up = upsample_2x(flow.tensor()).scaled(2.0);
    FlowField::new(up).expect("upsampling preserves finiteness")
}

/// Upsamples ×2 and crops to `height`×`width` (odd full-resolution sides).
pub(crate) fn upsample_flow_to(flow: &FlowField, height: usize, width: usize) -> FlowField {
    let up = upsample_flow_2x(flow);
    if up.height() == height && up.width() == width {
        return up;
    }
    let t = up.tensor();
    FlowField::new(Tensor::from_fn(height, width, 2, |i, j, c| t.get(i, j, c)))
        .expect("cropping preserves finiteness")
}
