//! A small depth network containing all three adaptable subspaces.
//!
//! Layout, in forward order:
//!
//! 1. conv stem: two 4×4 stride-2 pad-1 convolutions with ReLU (`H×W → H/4×W/4`);
//! 2. attention blocks over the `H/4·W/4` token sequence, each with a fused
//!    QKV projection and an output projection plus residual;
//! 3. a per-token MLP head whose last layer emits 16 values, rearranged into
//!    the 4×4 pixel patch the token covers.
//!
//! The raw output `x` maps to depth through `1 / (a·sigmoid(x) + b)`, with
//! `a` and `b` chosen so depth spans exactly `[min_depth, max_depth]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::registry::{AdaptableModel, WeightInfo};
use crate::tensor::{Scalar, Tensor};

/// Spatial reduction of the conv stem; also the side of the output patch per token.
pub const PATCH: usize = 4;

/// Weight of the squared-mean term of the scale-invariant log loss.
pub const SI_LAMBDA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub base_channels: usize,
    pub attention_heads: usize,
    pub attention_blocks: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            base_channels: 32,
            attention_heads: 2,
            attention_blocks: 1,
            mlp_hidden: 64,
            mlp_layers: 2,
            min_depth: 0.1,
            max_depth: 15.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.input_height == 0 || self.input_width == 0 {
            return cfg("model.input_height/input_width must be positive".into());
        }
        if !self.input_height.is_multiple_of(PATCH) || !self.input_width.is_multiple_of(PATCH) {
            return cfg(format!(
                "model input {}×{} is not divisible by the stem stride {PATCH}",
                self.input_height, self.input_width
            ));
        }
        if self.base_channels == 0 || self.attention_heads == 0 || self.mlp_hidden == 0 {
            return cfg("model.base_channels, attention_heads and mlp_hidden must be positive".into());
        }
        if !self.base_channels.is_multiple_of(self.attention_heads) {
            return cfg(format!(
                "model.base_channels {} not divisible by attention_heads {}",
                self.base_channels, self.attention_heads
            ));
        }
        if self.mlp_layers == 0 {
            return cfg("model.mlp_layers must be at least 1".into());
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return cfg(format!(
                "model.min_depth {} must be positive and below model.max_depth {}",
                self.min_depth, self.max_depth
            ));
        }
        Ok(())
    }

    /// `(a, b)` of the disparity mapping `depth = 1 / (a·sigmoid(x) + b)`.
    pub fn disparity_coeffs(&self) -> (f64, f64) {
        let b = 1.0 / self.max_depth;
        (1.0 / self.min_depth - b, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Conv { in_channels: usize, kernel: usize, stride: usize, pad: usize },
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub id: String,
    pub module: &'static str,
    pub op: LayerOp,
    /// 2-D adaptation view, `out × in` (conv: `O × C·kh·kw`).
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1])
    }
}

/// A single predicted or ground-truth depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDepthModel<T> {
    cfg: ModelConfig,
    layers: Vec<Layer<T>>,
    /// Set once stage-1 adapters are folded into the base weights.
    stage1_merged: bool,
}

impl<T: Scalar> AdaptableModel for ToyDepthModel<T> {
    fn adaptable_weights(&self) -> Vec<WeightInfo> {
        self.layers
            .iter()
            .enumerate()
            .map(|(handle, l)| {
                let (rows, cols) = l.dims();
                WeightInfo {
                    layer_id: l.id.clone(),
                    module: l.module.to_string(),
                    rows,
                    cols,
                    handle,
                }
            })
            .collect()
    }
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

impl<T: Scalar> ToyDepthModel<T> {
    /// Deterministic seeded construction.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.base_channels;
        let mut layers = Vec::new();
        let mut push = |id: String, module: &'static str, op: LayerOp, rows: usize, cols: usize, std: f64, bias: Vec<f64>| -> Result<()> {
            let w = init_matrix(&mut rng, rows, cols, std);
            layers.push(Layer {
                id,
                module,
                op,
                weight: Tensor::from_f64([rows, cols], &w)?,
                bias: Tensor::from_f64([rows], &bias)?,
            });
            Ok(())
        };
        const K: usize = 4;
        let conv = |in_channels| LayerOp::Conv { in_channels, kernel: K, stride: 2, pad: 1 };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let xavier = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

        push("stem.conv1".into(), "conv2d", conv(3), c, 3 * K * K, he(3 * K * K), vec![0.0; c])?;
        push("stem.conv2".into(), "conv2d", conv(c), c, K * K * c, he(K * K * c), vec![0.0; c])?;
        for b in 0..cfg.attention_blocks {
            push(format!("attn{b}.qkv"), "attention.qkv", LayerOp::Linear, 3 * c, c, xavier(c), vec![0.0; 3 * c])?;
            push(format!("attn{b}.out"), "attention.out", LayerOp::Linear, c, c, 0.5 * xavier(c), vec![0.0; c])?;
        }
        let out_dim = PATCH * PATCH;
        // Final bias centres the initial prediction at the geometric mean of the depth range.
        let (a, bb) = cfg.disparity_coeffs();
        let mid = (cfg.min_depth * cfg.max_depth).sqrt();
        let s = ((1.0 / mid - bb) / a).clamp(1e-6, 1.0 - 1e-6);
        let out_bias = (s / (1.0 - s)).ln();
        let mut fan_in = c;
        for i in 0..cfg.mlp_layers {
            let last = i + 1 == cfg.mlp_layers;
            let rows = if last { out_dim } else { cfg.mlp_hidden };
            let (std, bias) = if last {
                (0.5 * xavier(fan_in), vec![out_bias; rows])
            } else {
                (he(fan_in), vec![0.0; rows])
            };
            push(format!("head.fc{}", i + 1), "linear", LayerOp::Linear, rows, fan_in, std, bias)?;
            fan_in = rows;
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            stage1_merged: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer(&self, handle: usize) -> &Layer<T> {
        &self.layers[handle]
    }

    pub fn layer_mut(&mut self, handle: usize) -> &mut Layer<T> {
        &mut self.layers[handle]
    }

    pub fn handle_of(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == layer_id)
    }

    pub fn stage1_merged(&self) -> bool {
        self.stage1_merged
    }

    pub fn mark_stage1_merged(&mut self) {
        self.stage1_merged = true;
    }

    /// Total scalar parameters, weights plus biases.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ToyDepthModel<U> {
        ToyDepthModel {
            cfg: self.cfg.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    module: l.module,
                    op: l.op,
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            stage1_merged: self.stage1_merged,
        }
    }

    /// Inserts every base weight as a constant leaf, in layer order.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.layers.iter().map(|l| g.constant(l.weight.clone())).collect()
    }

    fn linear(&self, g: &mut Graph<T>, x: NodeId, w: NodeId, handle: usize) -> Result<NodeId> {
        let wt = g.permute(w, &[1, 0])?;
        let y = g.matmul(x, wt)?;
        let b = g.constant(self.layers[handle].bias.clone());
        g.add(y, b)
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, w: NodeId, handle: usize) -> Result<NodeId> {
        let layer = &self.layers[handle];
        let LayerOp::Conv { in_channels, kernel, stride, pad } = layer.op else {
            return Err(Error::State(format!("layer `{}` is not a convolution", layer.id)));
        };
        let (o, _) = layer.dims();
        let k = g.reshape(w, &[o, in_channels, kernel, kernel])?;
        let y = g.conv2d(x, k, stride, pad)?;
        let s = g.shape(y).to_vec();
        let (h, wd) = (s[2], s[3]);
        // Bias expanded to [O, H', W'] so it broadcasts as a trailing suffix.
        let mut expanded = Vec::with_capacity(o * h * wd);
        for &bv in layer.bias.data() {
            expanded.extend(std::iter::repeat_n(bv, h * wd));
        }
        let b = g.constant(Tensor::new([o, h, wd], expanded)?);
        let y = g.add(y, b)?;
        Ok(g.relu(y))
    }

    /// Raw per-pixel network output `[B×H×W]` before the depth mapping.
    /// `weights[i]` is the 2-D weight node of layer `i`.
    pub fn forward_raw(&self, g: &mut Graph<T>, weights: &[NodeId], rgb: NodeId) -> Result<NodeId> {
        if weights.len() != self.layers.len() {
            return Err(Error::dim("forward", &[weights.len()], &[self.layers.len()]));
        }
        let shape = g.shape(rgb).to_vec();
        let (bsz, h, w) = match shape[..] {
            [b, 3, h, w] if h == self.cfg.input_height && w == self.cfg.input_width => (b, h, w),
            _ => {
                return Err(Error::dim(
                    "forward",
                    &shape,
                    &[0, 3, self.cfg.input_height, self.cfg.input_width],
                ))
            }
        };
        let c = self.cfg.base_channels;
        let heads = self.cfg.attention_heads;
        let dh = c / heads;
        let (hp, wp) = (h / PATCH, w / PATCH);
        let l = hp * wp;

        let x = self.conv(g, rgb, weights[0], 0)?;
        let x = self.conv(g, x, weights[1], 1)?;
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let mut tokens = g.reshape(x, &[bsz * l, c])?;

        let mut handle = 2;
        for _ in 0..self.cfg.attention_blocks {
            let qkv = self.linear(g, tokens, weights[handle], handle)?;
            let qkv = g.reshape(qkv, &[bsz, l, 3, heads, dh])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let qkv = g.reshape(qkv, &[3, bsz * heads, l, dh])?;
            let mut parts = [None; 3];
            for (i, part) in parts.iter_mut().enumerate() {
                let p = g.narrow(qkv, 0, i, 1)?;
                *part = Some(g.reshape(p, &[bsz * heads, l, dh])?);
            }
            let [q, k, v] = parts.map(|p| p.expect("filled"));
            let att = g.scaled_dot_attention(q, k, v)?;
            let att = g.reshape(att, &[bsz, heads, l, dh])?;
            let att = g.permute(att, &[0, 2, 1, 3])?;
            let att = g.reshape(att, &[bsz * l, c])?;
            let proj = self.linear(g, att, weights[handle + 1], handle + 1)?;
            tokens = g.add(tokens, proj)?;
            handle += 2;
        }

        let mut x = tokens;
        for i in 0..self.cfg.mlp_layers {
            x = self.linear(g, x, weights[handle], handle)?;
            if i + 1 < self.cfg.mlp_layers {
                x = g.gelu(x);
            }
            handle += 1;
        }
        let x = g.reshape(x, &[bsz, hp, wp, PATCH, PATCH])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4])?;
        g.reshape(x, &[bsz, h, w])
    }

    /// Maps raw output to depth in `[min_depth, max_depth]`.
    pub fn depth_from_raw(&self, g: &mut Graph<T>, raw: NodeId) -> Result<NodeId> {
        let (a, b) = self.cfg.disparity_coeffs();
        let s = g.sigmoid(raw);
        let s = g.scale(s, T::of(a));
        let disp = g.add_scalar(s, T::of(b));
        g.recip(disp)
    }

    /// Depth node `[B×H×W]` for `rgb[B×3×H×W]` with the given weight nodes.
    pub fn forward_graph(&self, g: &mut Graph<T>, weights: &[NodeId], rgb: &Tensor<T>) -> Result<NodeId> {
        if !rgb.is_finite() {
            return Err(Error::Domain("non-finite input image".into()));
        }
        let x = g.constant(rgb.clone());
        let raw = self.forward_raw(g, weights, x)?;
        self.depth_from_raw(g, raw)
    }

    /// Inference with the base weights only.
    pub fn forward_depth(&self, rgb: &Tensor<T>) -> Result<Vec<DepthMap>> {
        let mut g = Graph::new();
        let w = self.bind_frozen(&mut g);
        let d = self.forward_graph(&mut g, &w, rgb)?;
        Ok(split_depth(g.value(d), &self.cfg))
    }
}

/// Splits a `[B×H×W]` depth tensor into per-image maps clamped to the configured range.
pub fn split_depth<T: Scalar>(depth: &Tensor<T>, cfg: &ModelConfig) -> Vec<DepthMap> {
    let s = depth.shape();
    let (h, w) = (s[1], s[2]);
    depth
        .data()
        .chunks(h * w)
        .map(|c| DepthMap {
            height: h,
            width: w,
            // The mapping stays within range analytically; clamp away rounding at the endpoints.
            values: c
                .iter()
                .map(|v| v.to_f64_lossless().clamp(cfg.min_depth, cfg.max_depth))
                .collect(),
        })
        .collect()
}

/// Scale-invariant log loss on graph nodes, averaged over images:
/// with `e = ln pred − ln gt`, `L = mean(e²) − λ·mean_b(mean_px e)²`.
pub fn training_loss<T: Scalar>(g: &mut Graph<T>, pred: NodeId, gt: &Tensor<T>) -> Result<NodeId> {
    let shape = g.shape(pred).to_vec();
    if shape != gt.shape() {
        return Err(Error::dim("training_loss", &shape, gt.shape()));
    }
    if gt.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::Domain("non-positive ground-truth depth".into()));
    }
    let per_image: usize = shape[1..].iter().product();
    let images = shape.first().copied().unwrap_or(1);
    let lp = g.log(pred)?;
    let lg = g.constant(gt.map(|v| v.ln()));
    let e = g.sub(lp, lg)?;
    let sq = g.square(e);
    let mse = g.mean(sq);
    let rows = g.reshape(e, &[images, per_image])?;
    let ones = g.constant(Tensor::full([per_image, 1], T::one() / T::of(per_image as f64)));
    let means = g.matmul(rows, ones)?;
    let msq = g.square(means);
    let bias = g.mean(msq);
    let bias = g.scale(bias, T::of(SI_LAMBDA));
    g.sub(mse, bias)
}

/// Plain-value form of [`training_loss`] for a single map.
pub fn scale_invariant_log_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::dim("training_loss", &[pred.len()], &[gt.len()]));
    }
    if pred.iter().chain(gt).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("non-positive depth".into()));
    }
    let n = pred.len() as f64;
    let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.ln() - g.ln()).collect();
    let mean_sq = e.iter().map(|v| v * v).sum::<f64>() / n;
    let mean = e.iter().sum::<f64>() / n;
    Ok(mean_sq - SI_LAMBDA * mean * mean)
}
