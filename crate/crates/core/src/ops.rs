//! Forward and backward kernels for the differentiable operators. All
//! spatial operators use replicate (edge-clamped) borders.

use crate::tensor::Tensor;

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Gathers the replicate-padded `size`×`size` neighbourhood of `(i, j)`,
/// tap-major then channel, into `patch`.
#[inline]
fn gather_patch(x: &Tensor, i: usize, j: usize, size: usize, patch: &mut Vec<f64>) {
    let (h, w, c) = x.shape();
    let r = (size / 2) as isize;
    patch.clear();
    for du in 0..size as isize {
        let y = clamp_index(i as isize + du - r, h);
        for dv in 0..size as isize {
            let xx = clamp_index(j as isize + dv - r, w);
            let start = (y * w + xx) * c;
            patch.extend_from_slice(&x.data()[start..start + c]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// 3×3 convolution. `weight` is laid out `[out][ky][kx][in]`.
pub fn conv3x3_forward(x: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let (h, w, cin) = x.shape();
    let cout = bias.len();
    let fan = 9 * cin;
    debug_assert_eq!(weight.len(), cout * fan);
    let mut out = Tensor::zeros(h, w, cout);
    let mut patch = Vec::with_capacity(fan);
    for i in 0..h {
        for j in 0..w {
            gather_patch(x, i, j, 3, &mut patch);
            let base = (i * w + j) * cout;
            let dst = &mut out.data_mut()[base..base + cout];
            for (o, d) in dst.iter_mut().enumerate() {
                *d = bias[o] + dot(&weight[o * fan..(o + 1) * fan], &patch);
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_weight, grad_bias)`; `grad_x` only when requested.
pub fn conv3x3_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let (h, w, cin) = x.shape();
    let cout = grad_out.channels();
    let fan = 9 * cin;
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let mut gx = want_input.then(|| Tensor::zeros(h, w, cin));
    let mut patch = Vec::with_capacity(fan);
    let mut gpatch = vec![0.0; fan];
    for i in 0..h {
        for j in 0..w {
            gather_patch(x, i, j, 3, &mut patch);
            let g = grad_out.pixel(i, j);
            gpatch.iter_mut().for_each(|v| *v = 0.0);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                axpy(go, &patch, &mut gw[o * fan..(o + 1) * fan]);
                if want_input {
                    axpy(go, &weight[o * fan..(o + 1) * fan], &mut gpatch);
                }
            }
            if let Some(gx) = gx.as_mut() {
                let mut t = 0;
                for du in 0..3isize {
                    let y = clamp_index(i as isize + du - 1, h);
                    for dv in 0..3isize {
                        let xx = clamp_index(j as isize + dv - 1, w);
                        let start = (y * w + xx) * cin;
                        for c in 0..cin {
                            gx.data_mut()[start + c] += gpatch[t * cin + c];
                        }
                        t += 1;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-pixel fully connected layer. `weight` is laid out `[out][in]`.
pub fn dense_forward(x: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let (h, w, cin) = x.shape();
    let cout = bias.len();
    debug_assert_eq!(weight.len(), cout * cin);
    let mut out = Tensor::zeros(h, w, cout);
    for p in 0..h * w {
        let src = &x.data()[p * cin..(p + 1) * cin];
        let dst = &mut out.data_mut()[p * cout..(p + 1) * cout];
        for (o, d) in dst.iter_mut().enumerate() {
            *d = bias[o] + dot(&weight[o * cin..(o + 1) * cin], src);
        }
    }
    out
}

pub fn dense_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let (h, w, cin) = x.shape();
    let cout = grad_out.channels();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let mut gx = want_input.then(|| Tensor::zeros(h, w, cin));
    for p in 0..h * w {
        let src = &x.data()[p * cin..(p + 1) * cin];
        let g = &grad_out.data()[p * cout..(p + 1) * cout];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            axpy(go, src, &mut gw[o * cin..(o + 1) * cin]);
            if let Some(gx) = gx.as_mut() {
                axpy(
                    go,
                    &weight[o * cin..(o + 1) * cin],
                    &mut gx.data_mut()[p * cin..(p + 1) * cin],
                );
            }
        }
    }
    (gx, gw, gb)
}

/// Spatially varying depthwise filter: each pixel owns one `size`×`size`
/// kernel (row-major in `kernels`' channels) applied to every feature channel.
pub fn adaptive_conv_forward(features: &Tensor, kernels: &Tensor, size: usize) -> Tensor {
    let (h, w, c) = features.shape();
    let mut out = Tensor::zeros(h, w, c);
    let mut patch = Vec::with_capacity(size * size * c);
    for i in 0..h {
        for j in 0..w {
            gather_patch(features, i, j, size, &mut patch);
            let k = kernels.pixel(i, j);
            let base = (i * w + j) * c;
            let dst = &mut out.data_mut()[base..base + c];
            for (t, &kt) in k.iter().enumerate() {
                axpy(kt, &patch[t * c..(t + 1) * c], dst);
            }
        }
    }
    out
}

/// Returns `(grad_features, grad_kernels)`, each only when requested.
pub fn adaptive_conv_backward(
    features: &Tensor,
    kernels: &Tensor,
    size: usize,
    grad_out: &Tensor,
    want_features: bool,
    want_kernels: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (h, w, c) = features.shape();
    let r = (size / 2) as isize;
    let mut gf = want_features.then(|| Tensor::zeros(h, w, c));
    let mut gk = want_kernels.then(|| Tensor::zeros(h, w, size * size));
    let mut patch = Vec::with_capacity(size * size * c);
    for i in 0..h {
        for j in 0..w {
            let g = grad_out.pixel(i, j);
            if let Some(gk) = gk.as_mut() {
                gather_patch(features, i, j, size, &mut patch);
                let base = (i * w + j) * size * size;
                for t in 0..size * size {
                    gk.data_mut()[base + t] = dot(g, &patch[t * c..(t + 1) * c]);
                }
            }
            if let Some(gf) = gf.as_mut() {
                let k = kernels.pixel(i, j);
                let mut t = 0;
                for du in 0..size as isize {
                    let y = clamp_index(i as isize + du - r, h);
                    for dv in 0..size as isize {
                        let xx = clamp_index(j as isize + dv - r, w);
                        let start = (y * w + xx) * c;
                        axpy(k[t], g, &mut gf.data_mut()[start..start + c]);
                        t += 1;
                    }
                }
            }
        }
    }
    (gf, gk)
}

/// Bilinear sample location along one axis: lower index, upper index,
/// fractional weight, and whether the coordinate was clamped.
#[inline]
fn sample_axis(pos: f64, len: usize) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let clamped = !(0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    if len == 1 {
        return (0, 0, 0.0, true);
    }
    let lo = (p.floor() as usize).min(len - 2);
    (lo, lo + 1, p - lo as f64, clamped)
}

/// Exact at both ends and for equal endpoints.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Backward warp: `out(i, j) = frame(i + v(i, j), j + u(i, j))`, bilinear,
/// with out-of-range coordinates clamped to the border.
pub fn warp_forward(frame: &Tensor, flow: &Tensor) -> Tensor {
    let (h, w, c) = frame.shape();
    let mut out = Tensor::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let f = flow.pixel(i, j);
            let (x0, x1, fx, _) = sample_axis(j as f64 + f[0], w);
            let (y0, y1, fy, _) = sample_axis(i as f64 + f[1], h);
            for ch in 0..c {
                let top = lerp(frame.get(y0, x0, ch), frame.get(y0, x1, ch), fx);
                let bottom = lerp(frame.get(y1, x0, ch), frame.get(y1, x1, ch), fx);
                let v = lerp(top, bottom, fy);
                out.set(i, j, ch, v);
            }
        }
    }
    out
}

/// Returns `(grad_frame, grad_flow)`, each only when requested.
pub fn warp_backward(
    frame: &Tensor,
    flow: &Tensor,
    grad_out: &Tensor,
    want_frame: bool,
    want_flow: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (h, w, c) = frame.shape();
    let mut gframe = want_frame.then(|| Tensor::zeros(h, w, c));
    let mut gflow = want_flow.then(|| Tensor::zeros(h, w, 2));
    for i in 0..h {
        for j in 0..w {
            let f = flow.pixel(i, j);
            let (x0, x1, fx, cx) = sample_axis(j as f64 + f[0], w);
            let (y0, y1, fy, cy) = sample_axis(i as f64 + f[1], h);
            let g = grad_out.pixel(i, j);
            if let Some(gf) = gframe.as_mut() {
                let weights = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (y, x, wt) in weights {
                    let start = (y * w + x) * c;
                    axpy(wt, g, &mut gf.data_mut()[start..start + c]);
                }
            }
            if let Some(gfl) = gflow.as_mut() {
                let (mut du, mut dv) = (0.0, 0.0);
                for (ch, &go) in g.iter().enumerate() {
                    let (a, b, cc, d) = (
                        frame.get(y0, x0, ch),
                        frame.get(y0, x1, ch),
                        frame.get(y1, x0, ch),
                        frame.get(y1, x1, ch),
                    );
                    du += go * ((1.0 - fy) * (b - a) + fy * (d - cc));
                    dv += go * ((1.0 - fx) * (cc - a) + fx * (d - b));
                }
                if !cx {
                    gfl.set(i, j, 0, du);
                }
                if !cy {
                    gfl.set(i, j, 1, dv);
                }
            }
        }
    }
    (gframe, gflow)
}
