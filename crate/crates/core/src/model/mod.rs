//! The Stack-Net encoder-decoder.
//!
//! Encoder: two convolutional stacks of `L` r×r conv+ReLU layers each, a third
//! stage of two 3×3 convs, every stage followed by 2×2 max pooling, then a
//! two-conv bottleneck. Decoder: three stages of [2×2 stride-2 transposed
//! conv, concat with the matching encoder output, two 3×3 conv+ReLU]. A 1×1
//! conv and a sigmoid produce the per-pixel lesion probability.
//!
//! Layer count is `14 + 2L` (24 at `L = 5`).

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{
    concat_channels, conv2d, conv2d_adjoint, maxpool2x2, maxpool2x2_adjoint, relu, relu_adjoint,
    sigmoid, sigmoid_adjoint, split_channels, transposed_conv2x2, transposed_conv2x2_adjoint,
    Padding, Parameter, Real, Shape, Tensor,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

/// Number of 2×2 pooling stages; input extents must be divisible by `2^3`.
pub const POOL_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackNetConfig {
    /// Kernel size `r` of the two convolutional stacks. Must be odd.
    pub kernel_size: usize,
    /// Stack depth `L`.
    pub stack_depth: usize,
    pub in_channels: usize,
    /// Widths of encoder stages 1..3 and the bottleneck.
    pub channel_widths: [usize; 4],
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for StackNetConfig {
    fn default() -> Self {
        StackNetConfig {
            kernel_size: 3,
            stack_depth: 5,
            in_channels: 2,
            channel_widths: [64, 96, 128, 256],
            height: 200,
            width: 200,
            seed: 0,
        }
    }
}

impl StackNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.stack_depth == 0 {
            return Err(Error::config("stack_depth must be at least 1"));
        }
        if self.in_channels == 0 || self.channel_widths.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        let m = 1 << POOL_STAGES;
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            return Err(Error::config(format!(
                "input extents {}x{} must be positive multiples of {m}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        14 + 2 * self.stack_depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded convolution followed by ReLU.
    ConvRelu,
    /// 2×2 stride-2 transposed convolution, no activation.
    UpConv,
    /// Final 1×1 convolution producing logits.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub kind: LayerKind,
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> Layer<T> {
    fn new<R: Rng>(kind: LayerKind, weight_shape: [usize; 4], rng: &mut R) -> Self {
        let [a, b, kh, kw] = weight_shape;
        let fan_in = match kind {
            LayerKind::UpConv => a,
            _ => b * kh * kw,
        };
        let out = match kind {
            LayerKind::UpConv => b,
            _ => a,
        };
        let std = (2.0 / fan_in as f64).sqrt();
        Layer {
            kind,
            weight: Parameter::new(Tensor::randn(weight_shape, std, rng)),
            bias: Parameter::new(Tensor::zeros([1, 1, 1, out])),
        }
    }

    fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let w = &self.weight.value;
        let b = self.bias.value.data();
        match self.kind {
            LayerKind::ConvRelu => Ok(relu(&conv2d(input, w, b, Padding::Same)?)),
            LayerKind::Head => conv2d(input, w, b, Padding::Same),
            LayerKind::UpConv => transposed_conv2x2(input, w, b),
        }
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the layer input.
    fn backprop(
        &mut self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let w = &self.weight.value;
        let grads = match self.kind {
            LayerKind::ConvRelu => {
                let g = relu_adjoint(output, grad_out)?;
                conv2d_adjoint(input, w, &g, Padding::Same)?
            }
            LayerKind::Head => conv2d_adjoint(input, w, grad_out, Padding::Same)?,
            LayerKind::UpConv => transposed_conv2x2_adjoint(input, w, grad_out)?,
        };
        self.weight.accumulate(grads.kernel.data());
        self.bias.accumulate(&grads.bias);
        Ok(grads.input)
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            kind: self.kind,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Index ranges of the named blocks within the flat layer list.
#[derive(Debug, Clone, Copy)]
struct Topology {
    depth: usize,
}

impl Topology {
    fn stack1(&self) -> std::ops::Range<usize> {
        0..self.depth
    }
    fn stack2(&self) -> std::ops::Range<usize> {
        self.depth..2 * self.depth
    }
    fn stage3(&self) -> std::ops::Range<usize> {
        2 * self.depth..2 * self.depth + 2
    }
    fn bottleneck(&self) -> std::ops::Range<usize> {
        2 * self.depth + 2..2 * self.depth + 4
    }
    /// Up-conv index followed by the two decoder convs, for decoder stage
    /// `k` = 0 (deepest) .. 2.
    fn decoder(&self, k: usize) -> (usize, std::ops::Range<usize>) {
        let up = 2 * self.depth + 4 + 3 * k;
        (up, up + 1..up + 3)
    }
    fn head(&self) -> usize {
        2 * self.depth + 13
    }
}

#[derive(Debug, Clone)]
struct PoolRecord {
    input_shape: Shape,
    argmax: Vec<usize>,
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
struct Cache<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    pools: Vec<PoolRecord>,
    skip_channels: [usize; 3],
    probs: Tensor<T>,
}

struct Recorder<T> {
    inputs: Vec<Option<Tensor<T>>>,
    outputs: Vec<Option<Tensor<T>>>,
    pools: Vec<PoolRecord>,
    keep: bool,
}

/// Same as [`StackNet::new`].
pub fn build_stacknet<T: Real>(config: StackNetConfig) -> Result<StackNet<T>> {
    StackNet::new(config)
}

#[derive(Debug, Clone)]
pub struct StackNet<T = f32> {
    config: StackNetConfig,
    layers: Vec<Layer<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Real> StackNet<T> {
    /// Builds the network and He-initializes it from `config.seed`.
    pub fn new(config: StackNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, &[0x5745_4947_4854]);
        let r = config.kernel_size;
        let [c1, c2, c3, c4] = config.channel_widths;
        let mut layers = Vec::with_capacity(config.layer_count());
        let conv = |out: usize, inp: usize, k: usize, rng: &mut _| {
            Layer::new(LayerKind::ConvRelu, [out, inp, k, k], rng)
        };

        let mut prev = config.in_channels;
        for _ in 0..config.stack_depth {
            layers.push(conv(c1, prev, r, &mut rng));
            prev = c1;
        }
        for _ in 0..config.stack_depth {
            layers.push(conv(c2, prev, r, &mut rng));
            prev = c2;
        }
        layers.push(conv(c3, c2, 3, &mut rng));
        layers.push(conv(c3, c3, 3, &mut rng));
        layers.push(conv(c4, c3, 3, &mut rng));
        layers.push(conv(c4, c4, 3, &mut rng));
        let mut below = c4;
        for width in [c3, c2, c1] {
            layers.push(Layer::new(LayerKind::UpConv, [below, width, 2, 2], &mut rng));
            layers.push(conv(width, 2 * width, 3, &mut rng));
            layers.push(conv(width, width, 3, &mut rng));
            below = width;
        }
        layers.push(Layer::new(LayerKind::Head, [1, c1, 1, 1], &mut rng));
        debug_assert_eq!(layers.len(), config.layer_count());

        Ok(StackNet {
            config,
            layers,
            cache: None,
        })
    }

    pub fn config(&self) -> &StackNetConfig {
        &self.config
    }

    /// Number of convolutional, transposed-convolutional, and classifier layers.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Parameters in topology order: each layer's weight, then its bias.
    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Real>(&self) -> StackNet<U> {
        StackNet {
            config: self.config.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            cache: None,
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        let m = 1 << POOL_STAGES;
        if s.c != self.config.in_channels {
            return Err(Error::dim(format!(
                "model expects {} input channels, batch is {s}",
                self.config.in_channels
            )));
        }
        if s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0 {
            return Err(Error::dim(format!(
                "spatial extents of {s} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }

    /// Inference pass; returns per-pixel probabilities of shape (N, 1, H, W).
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(batch, false)?.0)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_train(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let (probs, cache) = self.run(batch, true)?;
        self.cache = cache;
        Ok(probs)
    }

    fn run(&self, batch: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        self.check_input(batch)?;
        let topo = Topology {
            depth: self.config.stack_depth,
        };
        let n = self.layers.len();
        let mut rec = Recorder {
            inputs: vec![None; if keep { n } else { 0 }],
            outputs: vec![None; if keep { n } else { 0 }],
            pools: Vec::new(),
            keep,
        };

        let mut x = batch.clone();
        let mut skips = Vec::with_capacity(3);
        for block in [topo.stack1(), topo.stack2(), topo.stage3()] {
            x = self.run_block(block, x, &mut rec)?;
            let pooled = maxpool2x2(&x)?;
            if keep {
                rec.pools.push(PoolRecord {
                    input_shape: x.shape(),
                    argmax: pooled.argmax,
                });
            }
            skips.push(x);
            x = pooled.output;
        }
        x = self.run_block(topo.bottleneck(), x, &mut rec)?;
        let skip_channels = [skips[0].shape().c, skips[1].shape().c, skips[2].shape().c];
        for k in 0..3 {
            let (up, convs) = topo.decoder(k);
            let upsampled = self.run_layer(up, x, &mut rec)?;
            let skip = skips.pop().expect("one skip per encoder stage");
            x = concat_channels(&skip, &upsampled)?;
            x = self.run_block(convs, x, &mut rec)?;
        }
        let logits = self.run_layer(topo.head(), x, &mut rec)?;
        let probs = sigmoid(&logits);

        let cache = keep.then(|| Cache {
            inputs: rec.inputs.into_iter().map(|t| t.expect("recorded")).collect(),
            outputs: rec.outputs.into_iter().map(|t| t.expect("recorded")).collect(),
            pools: rec.pools,
            skip_channels,
            probs: probs.clone(),
        });
        Ok((probs, cache))
    }

    fn run_block(
        &self,
        block: std::ops::Range<usize>,
        mut x: Tensor<T>,
        rec: &mut Recorder<T>,
    ) -> Result<Tensor<T>> {
        for l in block {
            x = self.run_layer(l, x, rec)?;
        }
        Ok(x)
    }

    fn run_layer(&self, l: usize, x: Tensor<T>, rec: &mut Recorder<T>) -> Result<Tensor<T>> {
        let y = self.layers[l].apply(&x)?;
        if rec.keep {
            rec.inputs[l] = Some(x);
            rec.outputs[l] = Some(y.clone());
        }
        Ok(y)
    }

    /// Back-propagates `loss_grad` (gradient of the loss with respect to the
    /// output probabilities of the last [`Self::forward_train`]) and adds the
    /// parameter gradients to each `Parameter::grad`. Returns the gradient
    /// with respect to the input batch.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let result = self.backward_with(&cache, loss_grad);
        self.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &Cache<T>, loss_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let topo = Topology {
            depth: self.config.stack_depth,
        };
        let mut g = sigmoid_adjoint(&cache.probs, loss_grad)?;
        g = self.backprop_layer(cache, topo.head(), &g)?;

        let mut skip_grads = Vec::with_capacity(3);
        for k in (0..3).rev() {
            let (up, convs) = topo.decoder(k);
            g = self.backprop_block(cache, convs, g)?;
            let (g_skip, g_up) = split_channels(&g, cache.skip_channels[2 - k])?;
            skip_grads.push(g_skip);
            g = self.backprop_layer(cache, up, &g_up)?;
        }
        g = self.backprop_block(cache, topo.bottleneck(), g)?;

        for (stage, block) in [topo.stage3(), topo.stack2(), topo.stack1()]
            .into_iter()
            .enumerate()
        {
            let pool = &cache.pools[2 - stage];
            let mut gs = maxpool2x2_adjoint(pool.input_shape, &pool.argmax, &g)?;
            gs.add_assign(&skip_grads[2 - stage])?;
            g = self.backprop_block(cache, block, gs)?;
        }
        Ok(g)
    }

    fn backprop_block(
        &mut self,
        cache: &Cache<T>,
        block: std::ops::Range<usize>,
        mut g: Tensor<T>,
    ) -> Result<Tensor<T>> {
        for l in block.rev() {
            g = self.backprop_layer(cache, l, &g)?;
        }
        Ok(g)
    }

    fn backprop_layer(&mut self, cache: &Cache<T>, l: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.layers[l].backprop(&cache.inputs[l], &cache.outputs[l], g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(r: usize, depth: usize, hw: usize) -> StackNetConfig {
        StackNetConfig {
            kernel_size: r,
            stack_depth: depth,
            in_channels: 2,
            channel_widths: [3, 4, 4, 5],
            height: hw,
            width: hw,
            seed: 17,
        }
    }

    #[test]
    fn layer_counts() {
        for r in [3, 5] {
            let cfg = StackNetConfig {
                kernel_size: r,
                ..toy(r, 5, 16)
            };
            assert_eq!(StackNet::<f32>::new(cfg).unwrap().layer_count(), 24);
        }
        assert_eq!(StackNet::<f32>::new(toy(3, 2, 16)).unwrap().layer_count(), 18);
        assert_eq!(StackNet::<f32>::new(toy(3, 1, 16)).unwrap().layer_count(), 16);
        assert_eq!(StackNet::<f32>::new(toy(3, 6, 16)).unwrap().layer_count(), 26);
        assert_eq!(StackNetConfig::default().layer_count(), 24);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            StackNetConfig { kernel_size: 4, ..toy(3, 2, 16) },
            StackNetConfig { stack_depth: 0, ..toy(3, 2, 16) },
            StackNetConfig { height: 12, ..toy(3, 2, 16) },
            StackNetConfig { channel_widths: [1, 0, 1, 1], ..toy(3, 2, 16) },
        ] {
            assert!(matches!(StackNet::<f32>::new(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn shape_contract() {
        let model = StackNet::<f32>::new(toy(5, 2, 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([2, 2, 24, 16], 1.0, &mut rng);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 24, 16));
        assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(model.forward(&Tensor::zeros([1, 2, 12, 16])).is_err());
        assert!(model.forward(&Tensor::zeros([1, 3, 16, 16])).is_err());
    }

    #[test]
    fn zero_weights_give_half() {
        let mut model = StackNet::<f32>::new(toy(3, 2, 8)).unwrap();
        model.params_mut().for_each(|p| p.value.fill(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = model.forward(&Tensor::randn([1, 2, 16, 16], 1.0, &mut rng)).unwrap();
        assert!(y.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = StackNet::<f32>::new(toy(3, 2, 8)).unwrap();
        let b = StackNet::<f32>::new(toy(3, 2, 8)).unwrap();
        assert!(a.params().zip(b.params()).all(|(p, q)| p.value == q.value));
        let c = StackNet::<f32>::new(StackNetConfig { seed: 18, ..toy(3, 2, 8) }).unwrap();
        assert!(a.params().zip(c.params()).any(|(p, q)| p.value != q.value));
    }

    #[test]
    fn backward_requires_forward() {
        let mut model = StackNet::<f64>::new(toy(3, 1, 8)).unwrap();
        let g = Tensor::zeros([1, 1, 8, 8]);
        assert!(matches!(model.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn backward_accumulates() {
        let mut model = StackNet::<f64>::new(toy(3, 1, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 2, 8, 8], 1.0, &mut rng);
        model.forward_train(&x).unwrap();

        model.backward(&Tensor::zeros([2, 1, 8, 8])).unwrap();
        assert!(model.params().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));

        let g = Tensor::randn([2, 1, 8, 8], 1.0, &mut rng);
        model.backward(&g).unwrap();
        let once: Vec<_> = model.params().map(|p| p.grad.clone()).collect();
        model.backward(&g).unwrap();
        for (p, o) in model.params().zip(&once) {
            for (&two, &one) in p.grad.data().iter().zip(o.data()) {
                assert_eq!(two, 2.0 * one);
            }
        }
    }

    #[test]
    fn batch_decomposition_is_bit_identical() {
        let model = StackNet::<f32>::new(toy(3, 2, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([3, 2, 16, 8], 1.0, &mut rng);
        let whole = model.forward(&x).unwrap();
        let parts: Vec<_> = (0..3)
            .map(|i| model.forward(&x.batch_slice(i, 1).unwrap()).unwrap())
            .collect();
        assert_eq!(Tensor::stack_batch(&parts).unwrap(), whole);
    }
}
