//! Pre-activation residual network with a flat parameter vector.
//!
//! Each block computes `x + F(x)` with `F(x) = conv2(relu(conv1(relu(x))))`.
//! When a stage changes width or resolution the shortcut becomes a strided
//! 1x1 projection so the addition stays shape-consistent. There is no
//! post-addition nonlinearity, so a block whose branch weights are zero is the
//! identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeom, Shape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub max_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualNetSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

impl ResidualNetSpec {
    /// The 18-layer layout: 7x7/2 stem with max pooling, then four stages of
    /// two basic blocks at 64, 128, 256 and 512 channels.
    pub fn resnet18(input_size: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: [(64, 1), (128, 2), (256, 2), (512, 2)]
                .into_iter()
                .map(|(channels, stride)| StageSpec {
                    channels,
                    blocks: 2,
                    stride,
                })
                .collect(),
        }
    }

    /// A narrow variant for desk-scale runs: 3x3 stem, two stages of one
    /// block each.
    pub fn compact(input_size: usize, width: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            stem: StemSpec {
                channels: width,
                kernel: 3,
                stride: 1,
                max_pool: false,
            },
            stages: vec![
                StageSpec {
                    channels: width,
                    blocks: 1,
                    stride: 2,
                },
                StageSpec {
                    channels: width * 2,
                    blocks: 1,
                    stride: 2,
                },
            ],
        }
    }

    /// Weighted layers on the main path: stem, two per block, classifier head.
    pub fn depth(&self) -> usize {
        2 + 2 * self.stages.iter().map(|s| s.blocks).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("residual net: {m}")));
        if self.input_size == 0 || self.in_channels == 0 {
            return bad("input size and channels must be positive");
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return bad("stem dimensions must be positive");
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0) {
            return bad("stage dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
    in_shape: Shape,
    out_shape: Shape,
}

impl ConvLayer {
    fn w<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.weight..self.weight + self.geom.weight_len()]
    }

    fn b<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.bias..self.bias + self.geom.out_c]
    }

    fn forward(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_shape.len()];
        nn::conv_forward(&self.geom, input, self.in_shape, self.w(params), self.b(params), &mut out);
        out
    }

    fn backward(&self, params: &[f64], input: &[f64], grad_out: &[f64], grads: &mut [f64], grad_input: Option<&mut [f64]>) {
        let (gw, rest) = grads[self.weight..].split_at_mut(self.geom.weight_len());
        // bias always directly follows the weights
        let gb = &mut rest[..self.geom.out_c];
        nn::conv_backward(&self.geom, input, self.in_shape, self.w(params), grad_out, gw, gb, grad_input);
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvLayer,
    conv2: ConvLayer,
    projection: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvLayer,
    pool_shape: Option<Shape>,
    blocks: Vec<Block>,
    feature_shape: Shape,
    fc_weight: usize,
    fc_bias: usize,
    num_classes: usize,
    num_params: usize,
}

struct Allocator(usize);

impl Allocator {
    fn conv(&mut self, geom: ConvGeom, in_shape: Shape) -> ConvLayer {
        let weight = self.0;
        let bias = weight + geom.weight_len();
        self.0 = bias + geom.out_c;
        ConvLayer {
            geom,
            weight,
            bias,
            in_shape,
            out_shape: geom.out_shape(in_shape),
        }
    }
}

impl Layout {
    fn new(spec: &ResidualNetSpec, num_classes: usize) -> Self {
        let mut alloc = Allocator(0);
        let input = Shape::new(spec.in_channels, spec.input_size, spec.input_size);
        let stem = alloc.conv(
            ConvGeom {
                in_c: spec.in_channels,
                out_c: spec.stem.channels,
                kernel: spec.stem.kernel,
                stride: spec.stem.stride,
                pad: spec.stem.kernel / 2,
            },
            input,
        );
        let mut shape = stem.out_shape;
        let pool_shape = spec.stem.max_pool.then(|| {
            shape = Shape::new(shape.c, (shape.h + 2 - 3) / 2 + 1, (shape.w + 2 - 3) / 2 + 1);
            shape
        });
        let mut blocks = Vec::new();
        for stage in &spec.stages {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let conv1 = alloc.conv(
                    ConvGeom {
                        in_c: shape.c,
                        out_c: stage.channels,
                        kernel: 3,
                        stride,
                        pad: 1,
                    },
                    shape,
                );
                let conv2 = alloc.conv(
                    ConvGeom {
                        in_c: stage.channels,
                        out_c: stage.channels,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                    conv1.out_shape,
                );
                let projection = (stride != 1 || shape.c != stage.channels).then(|| {
                    alloc.conv(
                        ConvGeom {
                            in_c: shape.c,
                            out_c: stage.channels,
                            kernel: 1,
                            stride,
                            pad: 0,
                        },
                        shape,
                    )
                });
                if let Some(p) = &projection {
                    debug_assert_eq!(p.out_shape, conv2.out_shape);
                }
                shape = conv2.out_shape;
                blocks.push(Block {
                    conv1,
                    conv2,
                    projection,
                });
            }
        }
        let fc_weight = alloc.0;
        let fc_bias = fc_weight + num_classes * shape.c;
        let num_params = fc_bias + num_classes;
        Self {
            stem,
            pool_shape,
            blocks,
            feature_shape: shape,
            fc_weight,
            fc_bias,
            num_classes,
            num_params,
        }
    }
}

/// Activations retained from a forward pass for backpropagation.
struct Trace {
    input: Vec<f64>,
    stem_out: Vec<f64>,
    pool_argmax: Vec<usize>,
    block_in: Vec<Vec<f64>>,
    block_mid: Vec<Vec<f64>>,
    features: Vec<f64>,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ResidualNet {
    spec: ResidualNetSpec,
    layout: Layout,
    params: Vec<f64>,
}

/// Samples summed over a gradient evaluation.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss_sum: f64,
    pub correct: usize,
    pub grad: Vec<f64>,
}

const GROUP: usize = 4;

impl ResidualNet {
    /// Seeded He-normal initialization; the second convolution of each branch
    /// is scaled down by the square root of the block count.
    pub fn new(spec: &ResidualNetSpec, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        spec.validate()?;
        let layout = Layout::new(spec, num_classes);
        let mut params = vec![0.0; layout.num_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch_scale = 1.0 / (layout.blocks.len().max(1) as f64).sqrt();
        let mut init = |layer: &ConvLayer, scale: f64, params: &mut [f64]| {
            let fan_in = (layer.geom.in_c * layer.geom.kernel * layer.geom.kernel) as f64;
            let dist = Normal::new(0.0, scale * (2.0 / fan_in).sqrt()).expect("finite std");
            for w in &mut params[layer.weight..layer.weight + layer.geom.weight_len()] {
                *w = dist.sample(&mut rng);
            }
        };
        init(&layout.stem, 1.0, &mut params);
        for block in &layout.blocks {
            init(&block.conv1, 1.0, &mut params);
            init(&block.conv2, branch_scale, &mut params);
            if let Some(p) = &block.projection {
                init(p, 1.0, &mut params);
            }
        }
        let fc_in = layout.feature_shape.c as f64;
        let dist = Normal::new(0.0, (1.0 / fc_in).sqrt()).expect("finite std");
        for w in &mut params[layout.fc_weight..layout.fc_bias] {
            *w = dist.sample(&mut rng);
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(spec: &ResidualNetSpec, num_classes: usize, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(spec, num_classes, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &ResidualNetSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.layout.stem.in_shape.len()
    }

    /// Zeroes both branch convolutions (weights and biases) of block `index`.
    pub fn zero_branch(&mut self, index: usize) {
        let block = &self.layout.blocks[index];
        for layer in [&block.conv1, &block.conv2] {
            self.params[layer.weight..layer.bias + layer.geom.out_c].fill(0.0);
        }
    }

    pub fn block_has_projection(&self, index: usize) -> bool {
        self.layout.blocks[index].projection.is_some()
    }

    /// Output of block `index` for a given input activation of the right shape.
    pub fn block_forward(&self, index: usize, input: &[f64]) -> Vec<f64> {
        let block = &self.layout.blocks[index];
        let (out, _) = self.run_block(block, input);
        out
    }

    pub fn block_input_len(&self, index: usize) -> usize {
        self.layout.blocks[index].conv1.in_shape.len()
    }

    fn run_block(&self, block: &Block, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let mid = block.conv1.forward(p, &nn::relu(input));
        let mut out = block.conv2.forward(p, &nn::relu(&mid));
        match &block.projection {
            Some(proj) => {
                for (o, s) in out.iter_mut().zip(proj.forward(p, input)) {
                    *o += s;
                }
            }
            None => {
                for (o, &s) in out.iter_mut().zip(input) {
                    *o += s;
                }
            }
        }
        (out, mid)
    }

    fn forward_trace(&self, input: &[f64]) -> (Vec<f64>, Trace) {
        assert_eq!(input.len(), self.input_len(), "input length mismatch");
        let l = &self.layout;
        let p = &self.params;
        let stem_out = l.stem.forward(p, input);
        let mut pool_argmax = Vec::new();
        let mut x = if l.pool_shape.is_some() {
            let mut out = Vec::new();
            nn::max_pool_forward(&stem_out, l.stem.out_shape, &mut out, &mut pool_argmax);
            out
        } else {
            stem_out.clone()
        };
        let mut block_in = Vec::with_capacity(l.blocks.len());
        let mut block_mid = Vec::with_capacity(l.blocks.len());
        for block in &l.blocks {
            let (out, mid) = self.run_block(block, &x);
            block_in.push(std::mem::replace(&mut x, out));
            block_mid.push(mid);
        }
        let features = x;
        let fs = l.feature_shape;
        let pooled: Vec<f64> = (0..fs.c)
            .map(|c| {
                features[c * fs.plane()..(c + 1) * fs.plane()]
                    .iter()
                    .map(|&v| v.max(0.0))
                    .sum::<f64>()
                    / fs.plane() as f64
            })
            .collect();
        let logits = (0..l.num_classes)
            .map(|k| {
                let row = &p[l.fc_weight + k * fs.c..l.fc_weight + (k + 1) * fs.c];
                p[l.fc_bias + k] + row.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        let trace = Trace {
            input: input.to_vec(),
            stem_out,
            pool_argmax,
            block_in,
            block_mid,
            features,
            pooled,
        };
        (logits, trace)
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_trace(input).0
    }

    /// Accumulates parameter gradients given the gradient at the logits.
    fn backward(&self, trace: &Trace, grad_logits: &[f64], grads: &mut [f64]) {
        let l = &self.layout;
        let p = &self.params;
        let fs = l.feature_shape;
        let mut grad_pooled = vec![0.0; fs.c];
        for (k, &g) in grad_logits.iter().enumerate() {
            grads[l.fc_bias + k] += g;
            let w = l.fc_weight + k * fs.c;
            for c in 0..fs.c {
                grads[w + c] += g * trace.pooled[c];
                grad_pooled[c] += g * p[w + c];
            }
        }
        let inv = 1.0 / fs.plane() as f64;
        let mut grad_x = vec![0.0; fs.len()];
        for c in 0..fs.c {
            for i in c * fs.plane()..(c + 1) * fs.plane() {
                if trace.features[i] > 0.0 {
                    grad_x[i] = grad_pooled[c] * inv;
                }
            }
        }

        for (bi, block) in l.blocks.iter().enumerate().rev() {
            let input = &trace.block_in[bi];
            let mid = &trace.block_mid[bi];
            let mut grad_in = vec![0.0; input.len()];
            match &block.projection {
                Some(proj) => proj.backward(p, input, &grad_x, grads, Some(&mut grad_in)),
                None => grad_in.copy_from_slice(&grad_x),
            }
            let mut grad_mid = vec![0.0; mid.len()];
            block.conv2.backward(p, &nn::relu(mid), &grad_x, grads, Some(&mut grad_mid));
            nn::relu_backward_inplace(mid, &mut grad_mid);
            let mut grad_branch_in = vec![0.0; input.len()];
            block.conv1.backward(p, &nn::relu(input), &grad_mid, grads, Some(&mut grad_branch_in));
            nn::relu_backward_inplace(input, &mut grad_branch_in);
            for (g, b) in grad_in.iter_mut().zip(grad_branch_in) {
                *g += b;
            }
            grad_x = grad_in;
        }

        let grad_stem = if l.pool_shape.is_some() {
            let mut g = vec![0.0; trace.stem_out.len()];
            nn::max_pool_backward(&trace.pool_argmax, &grad_x, &mut g);
            g
        } else {
            grad_x
        };
        l.stem.backward(p, &trace.input, &grad_stem, grads, None);
    }

    /// Cross-entropy loss and parameter gradient for one sample.
    pub fn sample_gradient(&self, input: &[f64], label: usize, grads: &mut [f64]) -> (f64, bool) {
        let (logits, trace) = self.forward_trace(input);
        let (loss, grad_logits) = nn::cross_entropy(&logits, label);
        self.backward(&trace, &grad_logits, grads);
        (loss, argmax(&logits) == label)
    }

    pub fn loss(&self, input: &[f64], label: usize) -> f64 {
        nn::cross_entropy(&self.forward(input), label).0
    }

    /// Summed loss and gradient over a batch. Samples are processed in fixed
    /// groups whose partial sums are reduced in order, so the result is
    /// bit-identical for any thread count.
    pub fn batch_gradient(&self, batch: &[(&[f64], usize)], parallel: bool) -> BatchGradient {
        let n = self.params.len();
        let group = |chunk: &[(&[f64], usize)]| {
            let mut grad = vec![0.0; n];
            let mut loss_sum = 0.0;
            let mut correct = 0;
            for &(x, y) in chunk {
                let (loss, hit) = self.sample_gradient(x, y, &mut grad);
                loss_sum += loss;
                correct += hit as usize;
            }
            BatchGradient {
                loss_sum,
                correct,
                grad,
            }
        };
        let parts: Vec<BatchGradient> = if parallel {
            batch.par_chunks(GROUP).map(group).collect()
        } else {
            batch.chunks(GROUP).map(group).collect()
        };
        let mut total = BatchGradient {
            loss_sum: 0.0,
            correct: 0,
            grad: vec![0.0; n],
        };
        for part in parts {
            total.loss_sum += part.loss_sum;
            total.correct += part.correct;
            for (t, g) in total.grad.iter_mut().zip(part.grad) {
                *t += g;
            }
        }
        total
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(input: usize) -> ResidualNetSpec {
        ResidualNetSpec {
            input_size: input,
            in_channels: 3,
            stem: StemSpec {
                channels: 4,
                kernel: 3,
                stride: 1,
                max_pool: false,
            },
            stages: vec![StageSpec {
                channels: 4,
                blocks: 1,
                stride: 1,
            }],
        }
    }

    fn sample(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 0.37).sin()).collect()
    }

    #[test]
    fn resnet18_depth_is_eighteen() {
        assert_eq!(ResidualNetSpec::resnet18(224).depth(), 18);
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        assert!(ResidualNet::new(&tiny_spec(8), 1, 0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ResidualNet::new(&ResidualNetSpec::compact(16, 4), 3, 42).unwrap();
        let b = ResidualNet::new(&ResidualNetSpec::compact(16, 4), 3, 42).unwrap();
        let c = ResidualNet::new(&ResidualNetSpec::compact(16, 4), 3, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zeroed_identity_block_passes_input_through() {
        let mut net = ResidualNet::new(&ResidualNetSpec::resnet18(32), 5, 1).unwrap();
        for i in 0..net.num_blocks() {
            net.zero_branch(i);
        }
        let mut identity_blocks = 0;
        for i in 0..net.num_blocks() {
            if net.block_has_projection(i) {
                continue;
            }
            identity_blocks += 1;
            let x = sample(net.block_input_len(i), i as f64);
            assert_eq!(net.block_forward(i, &x), x);
        }
        assert_eq!(identity_blocks, 5);
    }

    #[test]
    fn gradients_with_max_pool_match_finite_differences() {
        let mut spec = tiny_spec(9);
        spec.stem.max_pool = true;
        spec.stem.stride = 2;
        spec.stages.push(StageSpec {
            channels: 6,
            blocks: 1,
            stride: 2,
        });
        let net = ResidualNet::new(&spec, 3, 5).unwrap();
        let x = sample(net.input_len(), 0.5);
        let mut grad = vec![0.0; net.params().len()];
        net.sample_gradient(&x, 2, &mut grad);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..grad.len()).step_by(7) {
            let mut plus = net.clone();
            plus.params_mut()[i] += eps;
            let mut minus = net.clone();
            minus.params_mut()[i] -= eps;
            let fd = (plus.loss(&x, 2) - minus.loss(&x, 2)) / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn batch_gradient_independent_of_parallelism() {
        let net = ResidualNet::new(&ResidualNetSpec::compact(12, 4), 2, 3).unwrap();
        let xs: Vec<Vec<f64>> = (0..9).map(|i| sample(net.input_len(), i as f64)).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
        let a = net.batch_gradient(&batch, true);
        let b = net.batch_gradient(&batch, false);
        assert_eq!(a.grad, b.grad);
        assert_eq!(a.loss_sum.to_bits(), b.loss_sum.to_bits());
    }
}
