//! Side tensors, kernel-prediction networks, residual-dense feature networks
//! and the per-pixel adaptive convolution shared by both stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{ParamId, ParamSet};
use crate::tensor::{FlowField, Tensor, TimeStep};

/// Per-pixel conditioning `(a.u, a.v, b.u, b.v, α, 1−α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SideTensor(Tensor);

impl SideTensor {
    pub const CHANNELS: usize = 6;

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

pub fn build_side_tensor(flow_a: &FlowField, flow_b: &FlowField, alpha: TimeStep) -> Result<SideTensor> {
    let (a, b) = (flow_a.tensor(), flow_b.tensor());
    if a.shape() != b.shape() {
        return Err(Error::invalid("side tensor: flow shapes differ"));
    }
    let al = alpha.value();
    let t = Tensor::from_fn(a.height(), a.width(), SideTensor::CHANNELS, |i, j, c| match c {
        0 | 1 => a.get(i, j, c),
        2 | 3 => b.get(i, j, c - 2),
        4 => al,
        _ => 1.0 - al,
    });
    Ok(SideTensor(t))
}

/// Per-pixel `k`×`k` kernels stored row-major along the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    data: Tensor,
    size: usize,
}

impl KernelField {
    pub fn new(data: Tensor, size: usize) -> Result<Self> {
        if size % 2 == 0 || data.channels() != size * size {
            return Err(Error::invalid(format!(
                "kernel field with {} channels cannot hold odd {size}x{size} kernels",
                data.channels()
            )));
        }
        if !data.is_finite() {
            return Err(Error::invalid("kernel field contains non-finite values"));
        }
        Ok(KernelField { data, size })
    }

    /// Every pixel carries the identity kernel.
    pub fn delta(height: usize, width: usize, size: usize) -> Self {
        let centre = (size * size) / 2;
        let data = Tensor::from_fn(height, width, size * size, |_, _, t| (t == centre) as u8 as f64);
        KernelField { data, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Applies one spatially varying kernel per pixel to every channel of
/// `features`, with replicate borders.
pub fn adaptive_conv(features: &Tensor, kernels: &KernelField) -> Result<Tensor> {
    if !features.same_spatial(&kernels.data) {
        return Err(Error::invalid(format!(
            "adaptive_conv: features {:?} vs kernels {:?}",
            features.shape(),
            kernels.data.shape()
        )));
    }
    Ok(ops::adaptive_conv_forward(features, &kernels.data, kernels.size))
}

/// Output layers start this much smaller than their fan-in bound so a fresh
/// network stays close to its delta-kernel or residual-projection path.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

fn output_layer(params: &mut ParamSet, add: impl FnOnce(&mut ParamSet) -> Result<ParamId>) -> Result<ParamId> {
    let id = add(params)?;
    params.values_mut(id).iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
    Ok(id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelNetConfig {
    pub kernel_size: usize,
    pub conv_width: usize,
    pub dense_width: usize,
}

impl Default for KernelNetConfig {
    fn default() -> Self {
        KernelNetConfig {
            kernel_size: 5,
            conv_width: 32,
            dense_width: 64,
        }
    }
}

/// Two 3×3 convolutions followed by two per-pixel dense layers, ReLU between
/// layers and a linear output of `k²` kernel weights per pixel.
#[derive(Clone, Debug)]
pub struct KernelPredictionNet {
    config: KernelNetConfig,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl KernelPredictionNet {
    /// Registers parameters under `prefix.`. Weights are fan-in uniform; the
    /// output bias starts at the identity kernel.
    pub fn new(params: &mut ParamSet, prefix: &str, config: KernelNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let k2 = config.kernel_size * config.kernel_size;
        if config.kernel_size % 2 == 0 || config.kernel_size == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                config.kernel_size
            )));
        }
        let (cw, dw) = (config.conv_width, config.dense_width);
        let cin = SideTensor::CHANNELS;
        let conv1 = (
            params.add_uniform(format!("{prefix}.conv1.w"), vec![cw, 3, 3, cin], 9 * cin, rng)?,
            params.add_bias(format!("{prefix}.conv1.b"), cw, 9 * cin, rng)?,
        );
        let conv2 = (
            params.add_uniform(format!("{prefix}.conv2.w"), vec![cw, 3, 3, cw], 9 * cw, rng)?,
            params.add_bias(format!("{prefix}.conv2.b"), cw, 9 * cw, rng)?,
        );
        let fc1 = (
            params.add_uniform(format!("{prefix}.fc1.w"), vec![dw, cw], cw, rng)?,
            params.add_bias(format!("{prefix}.fc1.b"), dw, cw, rng)?,
        );
        let mut delta = vec![0.0; k2];
        delta[k2 / 2] = 1.0;
        let fc2 = (
            output_layer(params, |p| p.add_uniform(format!("{prefix}.fc2.w"), vec![k2, dw], dw, rng))?,
            params.add(format!("{prefix}.fc2.b"), vec![k2], delta)?,
        );
        Ok(KernelPredictionNet {
            config,
            conv1,
            conv2,
            fc1,
            fc2,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.config.kernel_size
    }

    pub fn config(&self) -> KernelNetConfig {
        self.config
    }

    pub fn forward(&self, g: &mut Graph, side: Var) -> Result<Var> {
        if g.value(side).channels() != SideTensor::CHANNELS {
            return Err(Error::invalid("kernel net expects a 6-channel side tensor"));
        }
        let h = g.conv3x3(side, self.conv1.0, self.conv1.1)?;
        let h = g.relu(h);
        let h = g.conv3x3(h, self.conv2.0, self.conv2.1)?;
        let h = g.relu(h);
        let h = g.dense(h, self.fc1.0, self.fc1.1)?;
        let h = g.relu(h);
        g.dense(h, self.fc2.0, self.fc2.1)
    }

    /// Makes the net emit the identity kernel everywhere, regardless of input.
    pub fn force_delta(&self, params: &mut ParamSet) {
        params.values_mut(self.fc2.0).fill(0.0);
        let b = params.values_mut(self.fc2.1);
        b.fill(0.0);
        let centre = b.len() / 2;
        b[centre] = 1.0;
    }
}

pub fn predict_kernels(params: &ParamSet, net: &KernelPredictionNet, side: &SideTensor) -> Result<KernelField> {
    let mut g = Graph::new(params);
    let s = g.constant(side.tensor().clone());
    let out = net.forward(&mut g, s)?;
    KernelField::new(g.value(out).clone(), net.kernel_size())
}

/// Residual-dense backbone size: blocks, convolutions per block, channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub blocks: usize,
    pub convs_per_block: usize,
    pub channels: usize,
}

/// How the global residual projection (input → output, 1×1) starts out.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualInit {
    Uniform,
    /// Average of the listed input channel groups, each `out` channels wide.
    MeanOfGroups(Vec<usize>),
}

#[derive(Clone, Debug)]
struct DenseBlock {
    convs: Vec<(ParamId, ParamId)>,
    fuse: (ParamId, ParamId),
}

/// Residual dense network with a global residual projection of the input:
/// `out = proj(x) + tail(features(x))`.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    config: FeatureNetConfig,
    in_channels: usize,
    out_channels: usize,
    shallow: (ParamId, ParamId),
    blocks: Vec<DenseBlock>,
    global_fuse: (ParamId, ParamId),
    global_conv: (ParamId, ParamId),
    tail: (ParamId, ParamId),
    projection: (ParamId, ParamId),
}

impl FeatureNet {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        config: FeatureNetConfig,
        residual: ResidualInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.blocks == 0 || config.convs_per_block == 0 || config.channels == 0 {
            return Err(Error::invalid(format!("degenerate feature net config {config:?}")));
        }
        let g = config.channels;
        let shallow = (
            params.add_uniform(format!("{prefix}.sfe.w"), vec![g, 3, 3, in_channels], 9 * in_channels, rng)?,
            params.add_bias(format!("{prefix}.sfe.b"), g, 9 * in_channels, rng)?,
        );
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut convs = Vec::with_capacity(config.convs_per_block);
            for l in 0..config.convs_per_block {
                let cin = g * (l + 1);
                convs.push((
                    params.add_uniform(format!("{prefix}.rdb{b}.conv{l}.w"), vec![g, 3, 3, cin], 9 * cin, rng)?,
                    params.add_bias(format!("{prefix}.rdb{b}.conv{l}.b"), g, 9 * cin, rng)?,
                ));
            }
            let cin = g * (config.convs_per_block + 1);
            let fuse = (
                params.add_uniform(format!("{prefix}.rdb{b}.fuse.w"), vec![g, cin], cin, rng)?,
                params.add_bias(format!("{prefix}.rdb{b}.fuse.b"), g, cin, rng)?,
            );
            blocks.push(DenseBlock { convs, fuse });
        }
        let cin = g * config.blocks;
        let global_fuse = (
            params.add_uniform(format!("{prefix}.gff.w"), vec![g, cin], cin, rng)?,
            params.add_bias(format!("{prefix}.gff.b"), g, cin, rng)?,
        );
        let global_conv = (
            params.add_uniform(format!("{prefix}.gff_conv.w"), vec![g, 3, 3, g], 9 * g, rng)?,
            params.add_bias(format!("{prefix}.gff_conv.b"), g, 9 * g, rng)?,
        );
        let tail = (
            output_layer(params, |p| p.add_uniform(format!("{prefix}.tail.w"), vec![out_channels, 3, 3, g], 9 * g, rng))?,
            output_layer(params, |p| p.add_bias(format!("{prefix}.tail.b"), out_channels, 9 * g, rng))?,
        );
        let proj_w = match residual {
            ResidualInit::Uniform => {
                let bound = (6.0 / in_channels as f64).sqrt();
                (0..out_channels * in_channels)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect()
            }
            ResidualInit::MeanOfGroups(groups) => {
                let mut w = vec![0.0; out_channels * in_channels];
                let share = 1.0 / groups.len() as f64;
                for &grp in &groups {
                    if (grp + 1) * out_channels > in_channels {
                        return Err(Error::invalid(format!(
                            "residual group {grp} exceeds {in_channels} input channels"
                        )));
                    }
                    for o in 0..out_channels {
                        w[o * in_channels + grp * out_channels + o] += share;
                    }
                }
                w
            }
        };
        let projection = (
            params.add(format!("{prefix}.proj.w"), vec![out_channels, in_channels], proj_w)?,
            params.add_zeros(format!("{prefix}.proj.b"), vec![out_channels])?,
        );
        Ok(FeatureNet {
            config,
            in_channels,
            out_channels,
            shallow,
            blocks,
            global_fuse,
            global_conv,
            tail,
            projection,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn config(&self) -> FeatureNetConfig {
        self.config
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cin = g.value(x).channels();
        if cin != self.in_channels {
            return Err(Error::invalid(format!(
                "feature net expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let shallow = g.conv3x3(x, self.shallow.0, self.shallow.1)?;
        let mut h = shallow;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut stack = vec![h];
            for &(w, b) in &block.convs {
                let input = if stack.len() == 1 { stack[0] } else { g.concat(&stack)? };
                let y = g.conv3x3(input, w, b)?;
                stack.push(g.relu(y));
            }
            let all = g.concat(&stack)?;
            let fused = g.dense(all, block.fuse.0, block.fuse.1)?;
            h = g.add(h, fused)?;
            block_outputs.push(h);
        }
        let gathered = if block_outputs.len() == 1 {
            block_outputs[0]
        } else {
            g.concat(&block_outputs)?
        };
        let fused = g.dense(gathered, self.global_fuse.0, self.global_fuse.1)?;
        let fused = g.conv3x3(fused, self.global_conv.0, self.global_conv.1)?;
        let features = g.add(fused, shallow)?;
        let branch = g.conv3x3(features, self.tail.0, self.tail.1)?;
        let skip = g.dense(x, self.projection.0, self.projection.1)?;
        g.add(skip, branch)
    }

    /// Zeroes the tail convolution so the output is the residual projection alone.
    pub fn zero_branch(&self, params: &mut ParamSet) {
        params.values_mut(self.tail.0).fill(0.0);
        params.values_mut(self.tail.1).fill(0.0);
    }

    pub fn projection_ids(&self) -> (ParamId, ParamId) {
        self.projection
    }
}

pub fn extract_features(params: &ParamSet, net: &FeatureNet, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = g.constant(input.clone());
    let out = net.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| r.gen_range(-1.0..1.0))
    }

    /// Direct transcription of the per-pixel sum, clamped indices.
    fn naive_adaptive(features: &Tensor, kernels: &Tensor, k: usize) -> Tensor {
        let (h, w, c) = features.shape();
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(h, w, c);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i as isize + u as isize - r).clamp(0, h as isize - 1) as usize;
                            let x = (j as isize + v as isize - r).clamp(0, w as isize - 1) as usize;
                            acc += kernels.get(i, j, u * k + v) * features.get(y, x, ch);
                        }
                    }
                    out.set(i, j, ch, acc);
                }
            }
        }
        out
    }

    #[test]
    fn side_tensor_layouts() {
        let z = FlowField::zeros(4, 5);
        let s = build_side_tensor(&z, &z, TimeStep::new(0.3).unwrap()).unwrap();
        assert_eq!(s.tensor().channels(), 6);
        for p in s.tensor().data().chunks(6) {
            assert_eq!(p, [0.0, 0.0, 0.0, 0.0, 0.3, 0.7]);
        }
        let a = FlowField::constant(3, 3, 1.0, 2.0);
        let b = FlowField::constant(3, 3, -1.0, 0.0);
        let s = build_side_tensor(&a, &b, TimeStep::HALF).unwrap();
        for p in s.tensor().data().chunks(6) {
            assert_eq!(p, [1.0, 2.0, -1.0, 0.0, 0.5, 0.5]);
        }
        assert!(build_side_tensor(&a, &FlowField::zeros(3, 4), TimeStep::HALF).is_err());
    }

    #[test]
    fn delta_kernels_are_identity() {
        let mut r = rng(0);
        for k in [1, 3, 5] {
            let f = random_tensor(&mut r, 6, 7, 3);
            let out = adaptive_conv(&f, &KernelField::delta(6, 7, k)).unwrap();
            assert_eq!(out, f);
        }
    }

    #[test]
    fn uniform_kernel_on_constant() {
        let f = Tensor::filled(5, 5, 2, 0.37);
        let k = KernelField::new(Tensor::filled(5, 5, 9, 1.0 / 9.0), 3).unwrap();
        let out = adaptive_conv(&f, &k).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn adaptive_conv_shape_mismatch() {
        let f = Tensor::zeros(4, 4, 1);
        let k = KernelField::delta(4, 5, 3);
        assert!(adaptive_conv(&f, &k).is_err());
        assert!(KernelField::new(Tensor::zeros(2, 2, 4), 2).is_err());
    }

    proptest! {
        #[test]
        fn adaptive_conv_matches_naive(h in 1usize..=8, w in 1usize..=8, c in 1usize..=4,
                                       k_idx in 0usize..3, seed in 0u64..10_000) {
            let k = [1, 3, 5][k_idx];
            let mut r = rng(seed);
            let f = random_tensor(&mut r, h, w, c);
            let kt = random_tensor(&mut r, h, w, k * k);
            let out = adaptive_conv(&f, &KernelField::new(kt.clone(), k).unwrap()).unwrap();
            prop_assert!(out.max_abs_diff(&naive_adaptive(&f, &kt, k)) <= 1e-12);
        }

        #[test]
        fn adaptive_conv_bilinear(seed in 0u64..10_000, s in -2.0f64..2.0) {
            let mut r = rng(seed);
            let (f1, f2) = (random_tensor(&mut r, 5, 6, 2), random_tensor(&mut r, 5, 6, 2));
            let (k1, k2) = (random_tensor(&mut r, 5, 6, 9), random_tensor(&mut r, 5, 6, 9));
            let kf1 = KernelField::new(k1.clone(), 3).unwrap();
            let lhs = adaptive_conv(&f1.zip_map(&f2, |a, b| a + s * b).unwrap(), &kf1).unwrap();
            let rhs = adaptive_conv(&f1, &kf1).unwrap()
                .zip_map(&adaptive_conv(&f2, &kf1).unwrap(), |a, b| a + s * b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
            let ksum = KernelField::new(k1.zip_map(&k2, |a, b| a + s * b).unwrap(), 3).unwrap();
            let lhs = adaptive_conv(&f1, &ksum).unwrap();
            let rhs = adaptive_conv(&f1, &kf1).unwrap()
                .zip_map(&adaptive_conv(&f1, &KernelField::new(k2, 3).unwrap()).unwrap(), |a, b| a + s * b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
        }
    }

    fn small_kernel_net(params: &mut ParamSet) -> KernelPredictionNet {
        let cfg = KernelNetConfig {
            kernel_size: 3,
            conv_width: 4,
            dense_width: 5,
        };
        KernelPredictionNet::new(params, "K", cfg, &mut rng(7)).unwrap()
    }

    #[test]
    fn kernel_net_deterministic_and_equivariant() {
        let mut params = ParamSet::new();
        let net = small_kernel_net(&mut params);
        let side = build_side_tensor(
            &FlowField::constant(8, 8, 0.4, -1.2),
            &FlowField::constant(8, 8, -0.3, 0.9),
            TimeStep::new(0.25).unwrap(),
        )
        .unwrap();
        let k1 = predict_kernels(&params, &net, &side).unwrap();
        let k2 = predict_kernels(&params, &net, &side).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(k1.tensor().shape(), (8, 8, 9));
        // replicate padding keeps a constant input constant everywhere
        let t = k1.tensor();
        let first = t.pixel(0, 0).to_vec();
        for i in 0..8 {
            for j in 0..8 {
                for (a, b) in t.pixel(i, j).iter().zip(&first) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forced_delta_kernel_net() {
        let mut params = ParamSet::new();
        let net = small_kernel_net(&mut params);
        net.force_delta(&mut params);
        let side = build_side_tensor(&FlowField::constant(8, 8, 3.0, 1.0), &FlowField::zeros(8, 8), TimeStep::HALF).unwrap();
        assert_eq!(predict_kernels(&params, &net, &side).unwrap(), KernelField::delta(8, 8, 3));
    }

    #[test]
    fn zero_branch_gives_projection() {
        let mut params = ParamSet::new();
        let cfg = FeatureNetConfig {
            blocks: 2,
            convs_per_block: 2,
            channels: 4,
        };
        let net = FeatureNet::new(&mut params, "A", 6, 2, cfg, ResidualInit::Uniform, &mut rng(3)).unwrap();
        net.zero_branch(&mut params);
        let mut r = rng(4);
        let x = random_tensor(&mut r, 9, 11, 6);
        let out = extract_features(&params, &net, &x).unwrap();
        assert_eq!(out.shape(), (9, 11, 2));
        let (pw, pb) = net.projection_ids();
        let expected = ops::dense_forward(&x, params.values(pw), params.values(pb));
        assert_eq!(out, expected);
        assert!(extract_features(&params, &net, &Tensor::zeros(9, 11, 5)).is_err());
    }

    #[test]
    fn mean_of_groups_projection() {
        let mut params = ParamSet::new();
        let cfg = FeatureNetConfig {
            blocks: 1,
            convs_per_block: 1,
            channels: 2,
        };
        let net = FeatureNet::new(&mut params, "F", 12, 3, cfg, ResidualInit::MeanOfGroups(vec![0, 1]), &mut rng(1)).unwrap();
        net.zero_branch(&mut params);
        let mut r = rng(2);
        let x = random_tensor(&mut r, 8, 8, 12);
        let out = extract_features(&params, &net, &x).unwrap();
        let expected = Tensor::from_fn(8, 8, 3, |i, j, c| 0.5 * (x.get(i, j, c) + x.get(i, j, 3 + c)));
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }
}
