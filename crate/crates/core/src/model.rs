//! The encoder-decoder network.
//!
//! A 3x3 stem lifts the grayscale frame to three channels, a VGG11-style
//! encoder downsamples through five max pools, and the decoder climbs back
//! up by unpooling with the encoder's own pooling indices and
//! concatenating the matched-depth encoder activation before each block
//! of convolutions. A 3x3 convolution and a sigmoid produce the per-pixel
//! foreground probability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, PoolIndices};
use crate::tensor::{Shape, Tensor};

/// Number of pooling stages; inputs must be divisible by `2^DEPTH`.
pub const DEPTH: usize = 5;
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;
const KERNEL: usize = 3;
const PADDING: usize = 1;

/// VGG11 feature widths, grouped by pooling stage.
pub const VGG11_STAGES: [&[usize]; DEPTH] = [&[64], &[128], &[256, 256], &[512, 512], &[512, 512]];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SumNetConfig {
    pub input_hw: (usize, usize),
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Convolution output widths per encoder stage; the decoder mirrors them.
    pub encoder_stages: Vec<Vec<usize>>,
    pub out_channels: usize,
}

/// One 3x3 convolution of the wiring table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerSpec {
    fn new(id: String, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { id, in_channels, out_channels, kernel: KERNEL }
    }

    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.out_channels, 1, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.kernel_shape().numel() + self.out_channels
    }
}

impl SumNetConfig {
    /// Full-width network: 1 -> 3 stem and VGG11 encoder widths.
    pub fn vgg11(height: usize, width: usize) -> Self {
        SumNetConfig {
            input_hw: (height, width),
            in_channels: 1,
            stem_channels: 3,
            encoder_stages: VGG11_STAGES.iter().map(|s| s.to_vec()).collect(),
            out_channels: 1,
        }
    }

    /// Same wiring with every encoder width divided by `divisor` (at least 1).
    pub fn narrowed(mut self, divisor: usize) -> Self {
        let divisor = divisor.max(1);
        for stage in &mut self.encoder_stages {
            for w in stage.iter_mut() {
                *w = (*w / divisor).max(1);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        check_spatial(h, w)?;
        if self.encoder_stages.len() != DEPTH {
            return Err(Error::Validation(format!(
                "encoder needs exactly {DEPTH} pooling stages, got {}",
                self.encoder_stages.len()
            )));
        }
        if self.encoder_stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Validation("every encoder stage needs at least one non-zero width".into()));
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if self.out_channels != 1 {
            return Err(Error::Validation(format!(
                "only single-channel binary heads are supported, got {}",
                self.out_channels
            )));
        }
        Ok(())
    }

    fn stage_input(&self, d: usize) -> usize {
        if d == 0 {
            self.stem_channels
        } else {
            *self.encoder_stages[d - 1].last().unwrap()
        }
    }

    fn skip_channels(&self, d: usize) -> usize {
        *self.encoder_stages[d].last().unwrap()
    }

    /// Convolutions of decoder stage `d` (0-based, mirrored depth).
    ///
    /// The encoder stage's convolutions are reversed with in/out swapped;
    /// the first one also takes the skip channels. The shallowest stage
    /// ends at its own width instead of returning to the stem's 3.
    fn decoder_stage(&self, d: usize) -> Vec<(usize, usize)> {
        let widths = &self.encoder_stages[d];
        let mut chain = vec![self.stage_input(d)];
        chain.extend_from_slice(widths);
        if d == 0 {
            chain[0] = widths[0];
        }
        let skip = self.skip_channels(d);
        let mut convs: Vec<(usize, usize)> = (1..chain.len()).rev().map(|i| (chain[i], chain[i - 1])).collect();
        convs[0].0 += skip;
        convs
    }

    /// All convolutions in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = vec![LayerSpec::new("stem.conv".into(), self.in_channels, self.stem_channels)];
        for (d, stage) in self.encoder_stages.iter().enumerate() {
            let mut cin = self.stage_input(d);
            for (i, &cout) in stage.iter().enumerate() {
                out.push(LayerSpec::new(format!("enc{}.conv{}", d + 1, i + 1), cin, cout));
                cin = cout;
            }
        }
        for d in (0..DEPTH).rev() {
            for (i, (cin, cout)) in self.decoder_stage(d).into_iter().enumerate() {
                out.push(LayerSpec::new(format!("dec{}.conv{}", d + 1, i + 1), cin, cout));
            }
        }
        let last = self.decoder_stage(0).last().unwrap().1;
        out.push(LayerSpec::new("head.conv".into(), last, self.out_channels));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::param_count).sum()
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Validation(format!(
            "spatial size {h}x{w} must be a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub id: String,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Learnable parameters, one entry per [`LayerSpec`] in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: SumNetConfig,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Checks every layer against the config's wiring.
    pub fn from_layers(config: SumNetConfig, layers: Vec<LayerParams>) -> Result<Self> {
        config.validate()?;
        let specs = config.layers();
        if specs.len() != layers.len() {
            return Err(Error::shape(format!(
                "config has {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (spec, layer) in specs.iter().zip(&layers) {
            if spec.id != layer.id {
                return Err(Error::shape(format!("expected layer {}, found {}", spec.id, layer.id)));
            }
            if layer.kernel.shape() != spec.kernel_shape() || layer.bias.shape() != spec.bias_shape() {
                return Err(Error::shape(format!(
                    "layer {}: kernel {} / bias {} do not match {} / {}",
                    spec.id,
                    layer.kernel.shape(),
                    layer.bias.shape(),
                    spec.kernel_shape(),
                    spec.bias_shape()
                )));
            }
        }
        Ok(ModelParams { config, layers })
    }

    pub fn config(&self) -> &SumNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.numel() + l.bias.numel()).sum()
    }

    /// Named tensors in a fixed order: each layer's weight, then its bias.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.id), &l.kernel), (format!("{}.bias", l.id), &l.bias)])
            .collect()
    }

    /// Replaces the tensors in [`Self::named_tensors`] order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 2 * self.layers.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                2 * self.layers.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams { id: l.id.clone(), kernel: it.next().unwrap(), bias: it.next().unwrap() })
            .collect();
        Self::from_layers(self.config.clone(), layers)
    }

    /// Raw bytes of every tensor, for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Kaiming-normal kernels (std `sqrt(2 / fan_in)`) and zero biases.
/// Identical seeds give bit-identical parameters.
pub fn build(config: &SumNetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .layers()
        .into_iter()
        .map(|spec| {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = spec.kernel_shape();
            let data = (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect();
            LayerParams {
                kernel: Tensor::from_parts(shape, data),
                bias: Tensor::zeros(spec.bias_shape()),
                id: spec.id,
            }
        })
        .collect();
    ModelParams::from_layers(config.clone(), layers)
}

/// Execution backend for the forward pass: plain tensors or a tape.
pub(crate) trait Graph {
    type Node: Clone;
    fn shape(&self, x: &Self::Node) -> Shape;
    fn conv2d(&mut self, x: &Self::Node, k: &Self::Node, b: &Self::Node, padding: usize) -> Result<Self::Node>;
    fn relu(&mut self, x: &Self::Node) -> Self::Node;
    fn sigmoid(&mut self, x: &Self::Node) -> Self::Node;
    fn maxpool2x2(&mut self, x: &Self::Node) -> Result<(Self::Node, PoolIndices)>;
    fn maxunpool2x2(&mut self, x: &Self::Node, idx: &PoolIndices, hw: (usize, usize)) -> Result<Self::Node>;
    fn concat_channels(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
}

pub(crate) struct Eager;

impl Graph for Eager {
    type Node = Tensor;
    fn shape(&self, x: &Tensor) -> Shape {
        x.shape()
    }
    fn conv2d(&mut self, x: &Tensor, k: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
        ops::conv2d(x, k, b, padding)
    }
    fn relu(&mut self, x: &Tensor) -> Tensor {
        ops::relu(x)
    }
    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        ops::sigmoid(x)
    }
    fn maxpool2x2(&mut self, x: &Tensor) -> Result<(Tensor, PoolIndices)> {
        ops::maxpool2x2(x)
    }
    fn maxunpool2x2(&mut self, x: &Tensor, idx: &PoolIndices, hw: (usize, usize)) -> Result<Tensor> {
        ops::maxunpool2x2(x, idx, hw)
    }
    fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::concat_channels(a, b)
    }
}

impl Graph for Tape {
    type Node = Var;
    fn shape(&self, x: &Var) -> Shape {
        self.value(*x).shape()
    }
    fn conv2d(&mut self, x: &Var, k: &Var, b: &Var, padding: usize) -> Result<Var> {
        Tape::conv2d(self, *x, *k, *b, padding)
    }
    fn relu(&mut self, x: &Var) -> Var {
        Tape::relu(self, *x)
    }
    fn sigmoid(&mut self, x: &Var) -> Var {
        Tape::sigmoid(self, *x)
    }
    fn maxpool2x2(&mut self, x: &Var) -> Result<(Var, PoolIndices)> {
        Tape::maxpool2x2(self, *x)
    }
    fn maxunpool2x2(&mut self, x: &Var, idx: &PoolIndices, hw: (usize, usize)) -> Result<Var> {
        Tape::maxunpool2x2(self, *x, idx, hw)
    }
    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::concat_channels(self, *a, *b)
    }
}

/// Structural record of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    /// (encoder depth 1..=5, pool indices id) in execution order.
    pub pools: Vec<(usize, u64)>,
    /// (decoder position 1..=5 in execution order, pool indices id consumed).
    pub unpools: Vec<(usize, u64)>,
    /// Per decoder position: (unpooled channels, skip channels, first conv input channels).
    pub decoder_inputs: Vec<(usize, usize, usize)>,
}

fn check_input(params: &ModelParams, shape: Shape) -> Result<()> {
    let cfg = params.config();
    if shape.c() != cfg.in_channels {
        return Err(Error::shape(format!(
            "expected {} input channel(s), got {shape}",
            cfg.in_channels
        )));
    }
    if shape.n() == 0 {
        return Err(Error::shape("empty batch"));
    }
    check_spatial(shape.h(), shape.w()).map_err(|e| Error::shape(e.to_string()))
}

pub(crate) fn forward_graph<G: Graph>(
    params: &ModelParams,
    g: &mut G,
    weights: &[(G::Node, G::Node)],
    input: G::Node,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<G::Node> {
    let cfg = params.config();
    let mut layer = weights.iter();
    let mut conv_relu = |g: &mut G, x: &G::Node| -> Result<G::Node> {
        let (k, b) = layer.next().expect("layer table matches wiring");
        let y = g.conv2d(x, k, b, PADDING)?;
        Ok(g.relu(&y))
    };

    let mut x = conv_relu(g, &input)?;
    let mut skips = Vec::with_capacity(DEPTH);
    for (d, stage) in cfg.encoder_stages.iter().enumerate() {
        for _ in stage {
            x = conv_relu(g, &x)?;
        }
        let (pooled, indices) = g.maxpool2x2(&x)?;
        if let Some(t) = trace.as_deref_mut() {
            t.pools.push((d + 1, indices.id()));
        }
        skips.push((x, indices));
        x = pooled;
    }

    for (pos, d) in (0..DEPTH).rev().enumerate() {
        let (skip, indices) = &skips[d];
        let skip_shape = g.shape(skip);
        let up = g.maxunpool2x2(&x, indices, (skip_shape.h(), skip_shape.w()))?;
        let up_c = g.shape(&up).c();
        x = g.concat_channels(&up, skip)?;
        if let Some(t) = trace.as_deref_mut() {
            t.unpools.push((pos + 1, indices.id()));
            t.decoder_inputs.push((up_c, skip_shape.c(), g.shape(&x).c()));
        }
        for _ in cfg.decoder_stage(d) {
            x = conv_relu(g, &x)?;
        }
    }

    let (k, b) = layer.next().expect("head layer");
    let logits = g.conv2d(&x, k, b, PADDING)?;
    Ok(g.sigmoid(&logits))
}

/// Per-pixel foreground probabilities for a `(N,1,H,W)` batch.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    forward_traced(params, batch, None)
}

pub fn forward_traced(params: &ModelParams, batch: &Tensor, trace: Option<&mut ForwardTrace>) -> Result<Tensor> {
    check_input(params, batch.shape())?;
    if batch.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    let weights: Vec<(Tensor, Tensor)> =
        params.layers().iter().map(|l| (l.kernel.clone(), l.bias.clone())).collect();
    forward_graph(params, &mut Eager, &weights, batch.clone(), trace)
}

/// Forward pass recorded on `tape`.
#[derive(Clone, Debug)]
pub struct TapedForward {
    pub output: Var,
    /// Leaves in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var>,
}

pub fn forward_on_tape(params: &ModelParams, batch: &Tensor, tape: &mut Tape) -> Result<TapedForward> {
    check_input(params, batch.shape())?;
    let mut leaves = Vec::with_capacity(2 * params.layers().len());
    let weights: Vec<(Var, Var)> = params
        .layers()
        .iter()
        .map(|l| {
            let k = tape.leaf(l.kernel.clone());
            let b = tape.leaf(l.bias.clone());
            leaves.extend([k, b]);
            (k, b)
        })
        .collect();
    let input = tape.constant(batch.clone());
    let output = forward_graph(params, tape, &weights, input, None)?;
    Ok(TapedForward { output, params: leaves })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wiring_table_for_full_width() {
        let cfg = SumNetConfig::vgg11(256, 384);
        let wiring: Vec<(String, usize, usize)> =
            cfg.layers().into_iter().map(|l| (l.id, l.in_channels, l.out_channels)).collect();
        let expected = [
            ("stem.conv", 1, 3),
            ("enc1.conv1", 3, 64),
            ("enc2.conv1", 64, 128),
            ("enc3.conv1", 128, 256),
            ("enc3.conv2", 256, 256),
            ("enc4.conv1", 256, 512),
            ("enc4.conv2", 512, 512),
            ("enc5.conv1", 512, 512),
            ("enc5.conv2", 512, 512),
            ("dec5.conv1", 1024, 512),
            ("dec5.conv2", 512, 512),
            ("dec4.conv1", 1024, 512),
            ("dec4.conv2", 512, 256),
            ("dec3.conv1", 512, 256),
            ("dec3.conv2", 256, 128),
            ("dec2.conv1", 256, 64),
            ("dec1.conv1", 128, 64),
            ("head.conv", 64, 1),
        ];
        let expected: Vec<(String, usize, usize)> =
            expected.iter().map(|&(id, i, o)| (id.to_string(), i, o)).collect();
        assert_eq!(wiring, expected);
    }

    #[test]
    fn parameter_count_matches_audit() {
        // Hand audit: sum over the table above of 9*cin*cout + cout.
        assert_eq!(SumNetConfig::vgg11(256, 384).param_count(), 23_895_263);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = SumNetConfig::vgg11(64, 96).narrowed(8);
        let a = build(&cfg, 7).unwrap();
        let b = build(&cfg, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), build(&cfg, 8).unwrap().to_bytes());
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn build_rejects_indivisible_sizes() {
        assert!(matches!(build(&SumNetConfig::vgg11(250, 384), 0), Err(Error::Validation(_))));
        let mut shallow = SumNetConfig::vgg11(64, 64);
        shallow.encoder_stages.pop();
        assert!(build(&shallow, 0).is_err());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let params = build(&SumNetConfig::vgg11(32, 32).narrowed(16), 1).unwrap();
        assert!(forward(&params, &Tensor::zeros(Shape::new(1, 2, 32, 32))).is_err());
        assert!(forward(&params, &Tensor::zeros(Shape::new(1, 1, 48, 32))).is_err());
    }

    #[test]
    fn tape_and_eager_agree() {
        let params = build(&SumNetConfig::vgg11(32, 64).narrowed(16), 3).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 1, 32, 64), |n, _, h, w| ((n * 7 + h * 3 + w) % 11) as f64 / 10.0).unwrap();
        let eager = forward(&params, &x).unwrap();
        let mut tape = Tape::new();
        let taped = forward_on_tape(&params, &x, &mut tape).unwrap();
        assert!(tape.value(taped.output).bit_eq(&eager));
        assert_eq!(taped.params.len(), 2 * params.layers().len());
    }
}
