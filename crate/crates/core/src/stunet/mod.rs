//! Four-stage U-Net with a linear 1x1 regression head.
//!
//! Layer inventory, in parameter order:
//!
//! * encoder stage k = 1..4: conv3x3 → relu → conv3x3 → relu → maxpool2x2,
//!   width `base * 2^(k-1)`
//! * bottleneck: conv3x3 → relu → conv3x3 → relu, width `base * 16`
//! * decoder stage k = 4..1: tconv2x2 → concat(skip_k) → conv3x3 → relu →
//!   conv3x3 → relu, width `base * 2^(k-1)`
//! * head: conv1x1 → 2 channels, no activation

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, conv2d_backward_with, conv2d_forward, init, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, split_channels, transposed_conv2x2_backward,
    transposed_conv2x2_forward, LayerParams, ParamGrads, Tensor,
};

pub const STAGES: usize = 4;
pub const OUT_CHANNELS: usize = 2;
/// 2 convs per encoder stage, 2 bottleneck convs, 3 layers per decoder stage, 1 head.
pub const LAYER_COUNT: usize = 2 * STAGES + 2 + 3 * STAGES + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StuNetArch {
    pub input_hw: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub out_channels: usize,
}

impl StuNetArch {
    pub fn new(input_hw: usize, in_channels: usize, base_channels: usize) -> Result<Self> {
        let arch = StuNetArch {
            input_hw,
            in_channels,
            base_channels,
            stages: STAGES,
            out_channels: OUT_CHANNELS,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages != STAGES || self.out_channels != OUT_CHANNELS {
            return Err(Error::InvalidArch(format!(
                "stages must be {STAGES} and out_channels {OUT_CHANNELS}"
            )));
        }
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(1 << STAGES) {
            return Err(Error::InvalidArch(format!(
                "input size {} is not divisible by {}",
                self.input_hw,
                1 << STAGES
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArch("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of encoder/decoder stage `k` (1-based); `k = 5` is the bottleneck.
    pub fn width(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }

    /// Closed-form parameter count of the fixed inventory.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| k * k * i * o + o;
        let mut total = 0;
        let mut prev = self.in_channels;
        for k in 1..=STAGES + 1 {
            let c = self.width(k);
            total += conv(prev, c, 3) + conv(c, c, 3);
            prev = c;
        }
        for k in (1..=STAGES).rev() {
            let c = self.width(k);
            total += 4 * self.width(k + 1) * c + c; // transposed conv
            total += conv(2 * c, c, 3) + conv(c, c, 3);
        }
        total + conv(self.base_channels, self.out_channels, 1)
    }
}

/// Per-channel (u, v) z-score statistics of inputs and targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: [f64; 2],
    pub input_std: [f64; 2],
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            input_mean: [0.0; 2],
            input_std: [1.0; 2],
            target_mean: [0.0; 2],
            target_std: [1.0; 2],
        }
    }
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        let all = self.input_std.iter().chain(&self.target_std);
        if all.clone().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("normalization std must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StuNetModel {
    pub arch: StuNetArch,
    pub params: Vec<LayerParams>,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub trained_epochs: usize,
    pub direction: Direction,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input of every parameterised layer, in parameter order.
    inputs: Vec<Tensor>,
    /// Post-activation output of every conv3x3 (relu gate), in parameter order.
    activations: Vec<Option<Tensor>>,
    pool_indices: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Zero-initialised layer list in parameter order.
fn inventory(arch: &StuNetArch) -> Vec<LayerParams> {
    let mut layers = Vec::with_capacity(LAYER_COUNT);
    let mut prev = arch.in_channels;
    for k in 1..=STAGES + 1 {
        let c = arch.width(k);
        layers.push(LayerParams::conv(c, prev, 3, 1));
        layers.push(LayerParams::conv(c, c, 3, 1));
        prev = c;
    }
    for k in (1..=STAGES).rev() {
        let c = arch.width(k);
        layers.push(LayerParams::tconv(arch.width(k + 1), c));
        layers.push(LayerParams::conv(c, 2 * c, 3, 1));
        layers.push(LayerParams::conv(c, c, 3, 1));
    }
    layers.push(LayerParams::head(arch.out_channels, arch.base_channels));
    layers
}

impl StuNetModel {
    /// Kaiming-uniform initialisation from `seed`.
    pub fn build(arch: StuNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = inventory(&arch);
        let mut rng = init::rng(seed);
        for p in params.iter_mut() {
            init::kaiming_uniform(p, &mut rng);
        }
        Ok(StuNetModel {
            arch,
            params,
            norm_stats: NormStats::default(),
            seed,
            trained_epochs: 0,
            direction: Direction::Forward,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::param_count).sum()
    }

    pub fn head(&self) -> &LayerParams {
        &self.params[LAYER_COUNT - 1]
    }

    pub fn head_mut(&mut self) -> &mut LayerParams {
        &mut self.params[LAYER_COUNT - 1]
    }

    /// Checks that the parameter list matches the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.norm_stats.validate()?;
        let expected = inventory(&self.arch);
        if self.params.len() != expected.len() {
            return Err(Error::InvalidArch(format!(
                "{} layers, expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (i, (p, e)) in self.params.iter().zip(&expected).enumerate() {
            if p.kind != e.kind || p.weight.shape() != e.weight.shape() || p.bias.shape() != e.bias.shape() {
                return Err(Error::InvalidArch(format!("layer {i} does not match the architecture")));
            }
        }
        if self.param_count() != self.arch.param_count() {
            return Err(Error::InvalidArch("parameter count mismatch".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let a = &self.arch;
        if c != a.in_channels || h != a.input_hw || w != a.input_hw {
            return Err(Error::ShapeMismatch(format!(
                "network expects [b, {}, {}, {}], got {:?}",
                a.in_channels,
                a.input_hw,
                a.input_hw,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass on normalized input `[b, in_ch, h, w]`, output `[b, 2, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(x)?.0)
    }

    /// Forward pass that also returns the activations needed by [`Self::backward`].
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(LAYER_COUNT),
            activations: Vec::with_capacity(LAYER_COUNT),
            pool_indices: Vec::with_capacity(STAGES),
        };
        let p = &self.params;
        let mut li = 0;
        let conv_relu = |h: Tensor, li: &mut usize, cache: &mut ForwardCache| -> Result<Tensor> {
            let y = relu_forward(&conv2d_forward(&h, &p[*li])?);
            cache.inputs.push(h);
            cache.activations.push(Some(y.clone()));
            *li += 1;
            Ok(y)
        };

        let mut h = x.clone();
        let mut skips = Vec::with_capacity(STAGES);
        for _ in 0..STAGES {
            h = conv_relu(h, &mut li, &mut cache)?;
            h = conv_relu(h, &mut li, &mut cache)?;
            let (pooled, idx) = maxpool2x2_forward(&h)?;
            cache.pool_indices.push((idx, h.shape().to_vec()));
            skips.push(h);
            h = pooled;
        }
        h = conv_relu(h, &mut li, &mut cache)?;
        h = conv_relu(h, &mut li, &mut cache)?;
        for skip in skips.iter().rev() {
            let up = transposed_conv2x2_forward(&h, &p[li])?;
            cache.inputs.push(h);
            cache.activations.push(None);
            li += 1;
            h = concat_channels(&up, skip)?;
            h = conv_relu(h, &mut li, &mut cache)?;
            h = conv_relu(h, &mut li, &mut cache)?;
        }
        let out = conv2d_forward(&h, &p[li])?;
        cache.inputs.push(h);
        cache.activations.push(None);
        Ok((out, cache))
    }

    /// Parameter gradients given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor) -> Result<Vec<ParamGrads>> {
        let p = &self.params;
        let mut grads: Vec<Option<ParamGrads>> = vec![None; LAYER_COUNT];
        let mut li = LAYER_COUNT - 1;

        let head = conv2d_backward_with(&cache.inputs[li], &p[li], grad_out, true)?;
        grads[li] = Some(head.params);
        let mut g = head.input.expect("requested");

        // conv → relu, walking backwards; returns the gradient wrt the conv input
        let conv_relu_back = |g: Tensor, li: usize, grads: &mut Vec<Option<ParamGrads>>, need_input: bool| -> Result<Option<Tensor>> {
            let act = cache.activations[li].as_ref().expect("conv3x3 activation");
            let g = relu_backward(act, &g)?;
            let b = conv2d_backward_with(&cache.inputs[li], &p[li], &g, need_input)?;
            grads[li] = Some(b.params);
            Ok(b.input)
        };

        let mut skip_grads = Vec::with_capacity(STAGES);
        for k in 1..=STAGES {
            let width = self.arch.width(k);
            li -= 1;
            g = conv_relu_back(g, li, &mut grads, true)?.expect("input grad");
            li -= 1;
            g = conv_relu_back(g, li, &mut grads, true)?.expect("input grad");
            let (g_up, g_skip) = split_channels(&g, width)?;
            skip_grads.push(g_skip);
            li -= 1;
            let (gx, gw, gb) = transposed_conv2x2_backward(&cache.inputs[li], &p[li], &g_up)?;
            grads[li] = Some(ParamGrads { weight: gw, bias: gb });
            g = gx;
        }
        for _ in 0..2 {
            li -= 1;
            g = conv_relu_back(g, li, &mut grads, true)?.expect("input grad");
        }
        for stage in (0..STAGES).rev() {
            let (idx, shape) = &cache.pool_indices[stage];
            let mut gs = maxpool2x2_backward(idx, &g, shape)?;
            gs.add_assign(&skip_grads[stage]);
            li -= 1;
            g = conv_relu_back(gs, li, &mut grads, true)?.expect("input grad");
            li -= 1;
            match conv_relu_back(g, li, &mut grads, li != 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        debug_assert_eq!(li, 0);
        Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
    }
}
