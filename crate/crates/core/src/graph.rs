//! Reverse-mode differentiation over a recorded tape of coarse image operators.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 { x: Var, weight: ParamId, bias: ParamId },
    Dense { x: Var, weight: ParamId, bias: ParamId },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    AdaptiveConv { features: Var, kernels: Var, size: usize },
    Warp { frame: Var, flow: Var },
    MeanAbs(Var),
    GradAbsMean(Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape bound to one parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a node, if it was tracked and reached.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].as_ref()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1×1×1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn check_param(&self, id: ParamId, len: usize, what: &str) -> Result<()> {
        let p = self.params.get(id);
        if p.values.len() != len {
            return Err(Error::invalid(format!(
                "{what}: parameter {} has {} values, expected {len}",
                p.name,
                p.values.len()
            )));
        }
        Ok(())
    }

    pub fn conv3x3(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let cout = self.params.values(bias).len();
        let cin = self.value(x).channels();
        self.check_param(weight, cout * 9 * cin, "conv3x3")?;
        let out = ops::conv3x3_forward(self.value(x), self.params.values(weight), self.params.values(bias));
        Ok(self.push(out, Op::Conv3x3 { x, weight, bias }, true))
    }

    pub fn dense(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let cout = self.params.values(bias).len();
        let cin = self.value(x).channels();
        self.check_param(weight, cout * cin, "dense")?;
        let out = ops::dense_forward(self.value(x), self.params.values(weight), self.params.values(bias));
        Ok(self.push(out, Op::Dense { x, weight, bias }, true))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.tracked(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scaled(factor);
        let rg = self.tracked(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&values)?;
        let rg = parts.iter().any(|&v| self.tracked(v));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn adaptive_conv(&mut self, features: Var, kernels: Var, size: usize) -> Result<Var> {
        let (f, k) = (self.value(features), self.value(kernels));
        if !f.same_spatial(k) || k.channels() != size * size || size % 2 == 0 {
            return Err(Error::invalid(format!(
                "adaptive_conv: features {:?} vs kernels {:?} (size {size})",
                f.shape(),
                k.shape()
            )));
        }
        let out = ops::adaptive_conv_forward(f, k, size);
        let rg = self.tracked(features) || self.tracked(kernels);
        Ok(self.push(
            out,
            Op::AdaptiveConv {
                features,
                kernels,
                size,
            },
            rg,
        ))
    }

    pub fn warp(&mut self, frame: Var, flow: Var) -> Result<Var> {
        let (f, fl) = (self.value(frame), self.value(flow));
        if !f.same_spatial(fl) || fl.channels() != 2 {
            return Err(Error::invalid(format!(
                "warp: frame {:?} vs flow {:?}",
                f.shape(),
                fl.shape()
            )));
        }
        let out = ops::warp_forward(f, fl);
        let rg = self.tracked(frame) || self.tracked(flow);
        Ok(self.push(out, Op::Warp { frame, flow }, rg))
    }

    /// Mean of absolute values, as a scalar node.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().map(|v| v.abs()).sum::<f64>() / t.data().len() as f64;
        let rg = self.tracked(x);
        self.push(Tensor::scalar(m), Op::MeanAbs(x), rg)
    }

    /// Mean absolute horizontal forward difference plus mean absolute vertical
    /// forward difference, each averaged over all differences and channels.
    pub fn grad_abs_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (h, w, c) = t.shape();
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    if j + 1 < w {
                        sx += (t.get(i, j + 1, ch) - t.get(i, j, ch)).abs();
                    }
                    if i + 1 < h {
                        sy += (t.get(i + 1, j, ch) - t.get(i, j, ch)).abs();
                    }
                }
            }
        }
        let nx = (h * w.saturating_sub(1) * c).max(1) as f64;
        let ny = (h.saturating_sub(1) * w * c).max(1) as f64;
        let rg = self.tracked(x);
        self.push(Tensor::scalar(sx / nx + sy / ny), Op::GradAbsMean(x), rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let rg = terms.iter().any(|&(v, _)| self.tracked(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Back-propagates from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).data().len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut pgrads = self.params.zero_grads();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let send = |grads: &mut Vec<Option<Tensor>>, var: Var, delta: Tensor| {
                if !self.nodes[var.0].requires_grad {
                    return;
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.add_assign(&delta),
                    None => grads[var.0] = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3x3 { x, weight, bias } => {
                    let (gx, gw, gb) = ops::conv3x3_backward(
                        self.value(*x),
                        self.params.values(*weight),
                        &g,
                        self.tracked(*x),
                    );
                    pgrads.accumulate(*weight, &gw);
                    pgrads.accumulate(*bias, &gb);
                    if let Some(gx) = gx {
                        send(&mut grads, *x, gx);
                    }
                }
                Op::Dense { x, weight, bias } => {
                    let (gx, gw, gb) = ops::dense_backward(
                        self.value(*x),
                        self.params.values(*weight),
                        &g,
                        self.tracked(*x),
                    );
                    pgrads.accumulate(*weight, &gw);
                    pgrads.accumulate(*bias, &gb);
                    if let Some(gx) = gx {
                        send(&mut grads, *x, gx);
                    }
                }
                Op::Relu(x) => {
                    let d = node
                        .value
                        .zip_map(&g, |y, gy| if y > 0.0 { gy } else { 0.0 })
                        .expect("relu grad shape");
                    send(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, g.scaled(-1.0));
                    send(&mut grads, *a, g);
                }
                Op::Scale(x, f) => send(&mut grads, *x, g.scaled(*f)),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).channels();
                        if self.tracked(p) {
                            send(&mut grads, p, g.channel_slice(offset, c).expect("concat slice"));
                        }
                        offset += c;
                    }
                }
                Op::AdaptiveConv {
                    features,
                    kernels,
                    size,
                } => {
                    let (gf, gk) = ops::adaptive_conv_backward(
                        self.value(*features),
                        self.value(*kernels),
                        *size,
                        &g,
                        self.tracked(*features),
                        self.tracked(*kernels),
                    );
                    if let Some(gf) = gf {
                        send(&mut grads, *features, gf);
                    }
                    if let Some(gk) = gk {
                        send(&mut grads, *kernels, gk);
                    }
                }
                Op::Warp { frame, flow } => {
                    let (gf, gfl) = ops::warp_backward(
                        self.value(*frame),
                        self.value(*flow),
                        &g,
                        self.tracked(*frame),
                        self.tracked(*flow),
                    );
                    if let Some(gf) = gf {
                        send(&mut grads, *frame, gf);
                    }
                    if let Some(gfl) = gfl {
                        send(&mut grads, *flow, gfl);
                    }
                }
                Op::MeanAbs(x) => {
                    let t = self.value(*x);
                    let s = g.data()[0] / t.data().len() as f64;
                    send(&mut grads, *x, t.map(|v| s * sign(v)));
                }
                Op::GradAbsMean(x) => {
                    let t = self.value(*x);
                    let (h, w, c) = t.shape();
                    let gy = g.data()[0];
                    let sx = gy / (h * w.saturating_sub(1) * c).max(1) as f64;
                    let sy = gy / (h.saturating_sub(1) * w * c).max(1) as f64;
                    let mut d = Tensor::zeros(h, w, c);
                    for i in 0..h {
                        for j in 0..w {
                            for ch in 0..c {
                                if j + 1 < w {
                                    let s = sx * sign(t.get(i, j + 1, ch) - t.get(i, j, ch));
                                    let k = d.index(i, j + 1, ch);
                                    d.data_mut()[k] += s;
                                    let k = d.index(i, j, ch);
                                    d.data_mut()[k] -= s;
                                }
                                if i + 1 < h {
                                    let s = sy * sign(t.get(i + 1, j, ch) - t.get(i, j, ch));
                                    let k = d.index(i + 1, j, ch);
                                    d.data_mut()[k] += s;
                                    let k = d.index(i, j, ch);
                                    d.data_mut()[k] -= s;
                                }
                            }
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        send(&mut grads, v, g.scaled(w));
                    }
                }
            }
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(
        input: Tensor,
        build: impl Fn(&mut Graph, Var) -> Var,
        tol: f64,
    ) {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let x = g.input(input.clone());
        let root = build(&mut g, x);
        let grads = g.backward(root);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| {
            let (h, w, c) = input.shape();
            Tensor::zeros(h, w, c)
        });
        let eval = |t: Tensor| {
            let mut g = Graph::new(&params);
            let x = g.input(t);
            let r = build(&mut g, x);
            g.scalar(r)
        };
        let step = 1e-5;
        for k in 0..input.data().len() {
            let mut plus = input.clone();
            plus.data_mut()[k] += step;
            let mut minus = input.clone();
            minus.data_mut()[k] -= step;
            let fd = (eval(plus) - eval(minus)) / (2.0 * step);
            let a = analytic.data()[k];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err <= tol, "element {k}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn weighted_sum_and_abs() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let a = g.input(Tensor::from_vec(1, 2, 1, vec![1.0, -3.0]).unwrap());
        let b = g.constant(Tensor::from_vec(1, 2, 1, vec![0.5, 0.5]).unwrap());
        let d = g.sub(a, b).unwrap();
        let m = g.mean_abs(d);
        let s = g.weighted_sum(&[(m, 2.0)]);
        assert_eq!(g.scalar(s), 2.0 * (0.5 + 3.5) / 2.0);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, -1.0]);
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn warp_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_tensor(&mut rng, 5, 6, 2);
        // flows kept off integer sample positions
        let flow = Tensor::from_fn(5, 6, 2, |_, _, _| rng.gen_range(-1.5..1.5_f64).trunc() + 0.3);
        check_input_grad(
            flow,
            |g, fl| {
                let f = g.constant(frame.clone());
                let w = g.warp(f, fl).unwrap();
                let sq = g.concat(&[w, w]).unwrap();
                g.mean_abs(sq)
            },
            1e-3,
        );
    }

    #[test]
    fn adaptive_conv_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = random_tensor(&mut rng, 4, 5, 3);
        let kernels = random_tensor(&mut rng, 4, 5, 9);
        let k2 = kernels.clone();
        check_input_grad(
            feats.clone(),
            move |g, f| {
                let k = g.constant(k2.clone());
                let o = g.adaptive_conv(f, k, 3).unwrap();
                g.mean_abs(o)
            },
            1e-4,
        );
        check_input_grad(
            kernels,
            move |g, k| {
                let f = g.constant(feats.clone());
                let o = g.adaptive_conv(f, k, 3).unwrap();
                g.mean_abs(o)
            },
            1e-4,
        );
    }

    #[test]
    fn smoothness_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_input_grad(random_tensor(&mut rng, 4, 5, 2), |g, x| g.grad_abs_mean(x), 1e-4);
    }

    #[test]
    fn conv_and_dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let w1 = params.add_uniform("c.w", vec![4, 3, 3, 2], 18, &mut rng).unwrap();
        let b1 = params.add_uniform("c.b", vec![4], 18, &mut rng).unwrap();
        let w2 = params.add_uniform("d.w", vec![3, 4], 4, &mut rng).unwrap();
        let b2 = params.add_uniform("d.b", vec![3], 4, &mut rng).unwrap();
        let input = random_tensor(&mut rng, 4, 4, 2);
        let build = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new(ps);
            let x = g.constant(input.clone());
            let h = g.conv3x3(x, w1, b1).unwrap();
            let h = g.relu(h);
            let o = g.dense(h, w2, b2).unwrap();
            let m = g.mean_abs(o);
            g.scalar(m)
        };
        let mut g = Graph::new(&params);
        let x = g.input(input.clone());
        let h = g.conv3x3(x, w1, b1).unwrap();
        let h = g.relu(h);
        let o = g.dense(h, w2, b2).unwrap();
        let m = g.mean_abs(o);
        let grads = g.backward(m);
        let analytic = grads.params.flatten();
        let flat = params.flatten();
        for k in 0..flat.len() {
            let mut p = params.clone();
            let mut v = flat.clone();
            v[k] += 1e-5;
            p.unflatten(&v).unwrap();
            let fp = build(&p);
            v[k] -= 2e-5;
            p.unflatten(&v).unwrap();
            let fm = build(&p);
            let fd = (fp - fm) / 2e-5;
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: {} vs {fd}", analytic[k]);
        }
    }
}
