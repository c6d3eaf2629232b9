//! Network description, desk-scale builders and the forward pass.
//!
//! A network is a sequence of [`Stage`]s over a shared store of convolution
//! layers addressed by id. Residual blocks hold their own stage sequence plus
//! an optional shortcut convolution; the block output is
//! `relu(body(x) + shortcut(x))`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// `[c_out, c_in, k, k]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn zeros(spec: ConvSpec) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[spec.c_out, spec.c_in, spec.k, spec.k]),
            bias: Tensor::zeros(&[spec.c_out]),
            spec,
        }
    }

    fn he_normal(spec: ConvSpec, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (spec.c_in * spec.k * spec.k) as f64;
        ConvLayer {
            weight: Tensor::randn(
                &[spec.c_out, spec.c_in, spec.k, spec.k],
                gain * (2.0 / fan_in).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[spec.c_out]),
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// `[d_out, d_in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Conv(usize),
    Relu,
    AvgPool(usize),
    GlobalAvgPool,
    Linear,
    Residual {
        body: Vec<Stage>,
        shortcut: Option<usize>,
    },
}

/// Why a convolution may not be compressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Protection {
    FirstConv,
    BlockFinal,
    Shortcut,
    /// Output feeds something other than a single convolution (a residual
    /// join, pooling into the classifier, ...).
    NoConvSuccessor,
}

/// Structure of a network without its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input: [usize; 3],
    pub num_classes: usize,
    pub convs: Vec<ConvSpec>,
    pub linear: [usize; 2],
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub convs: Vec<ConvLayer>,
    pub linear: LinearLayer,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResnetDepth {
    /// Four stages of two basic blocks.
    Lite18,
    /// Three stages of nine basic blocks.
    Lite56,
}

impl std::str::FromStr for ResnetDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "18" | "18-lite" | "resnet18-lite" | "resnet18_lite" => Ok(ResnetDepth::Lite18),
            "56" | "56-lite" | "resnet56-lite" | "resnet56_lite" => Ok(ResnetDepth::Lite56),
            other => Err(Error::arg(format!(
                "unsupported resnet depth {other:?} (expected 18-lite or 56-lite)"
            ))),
        }
    }
}

const CIFAR_INPUT: [usize; 3] = [3, 32, 32];

fn linear_init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> LinearLayer {
    LinearLayer {
        d_in,
        d_out,
        weight: Tensor::randn(&[d_out, d_in], (1.0 / d_in as f64).sqrt(), rng),
        bias: Tensor::zeros(&[d_out]),
    }
}

/// Four 3×3 convolutions with two 2×2 average pools, global pooling and a
/// linear classifier. Base width is `round(8·width_multiplier)`.
pub fn build_small_vgg(width_multiplier: f64, num_classes: usize, seed: u64) -> Result<Network> {
    let base = (8.0 * width_multiplier).round() as usize;
    if base == 0 || num_classes < 2 {
        return Err(Error::arg(format!(
            "vgg needs a positive width and at least two classes (got width {width_multiplier}, {num_classes} classes)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = |c_in, c_out| ConvSpec {
        c_in,
        c_out,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let convs = vec![
        ConvLayer::he_normal(spec(3, base), 1.0, &mut rng),
        ConvLayer::he_normal(spec(base, base), 1.0, &mut rng),
        ConvLayer::he_normal(spec(base, 2 * base), 1.0, &mut rng),
        ConvLayer::he_normal(spec(2 * base, 2 * base), 1.0, &mut rng),
    ];
    let linear = linear_init(2 * base, num_classes, &mut rng);
    let stages = vec![
        Stage::Conv(0),
        Stage::Relu,
        Stage::AvgPool(2),
        Stage::Conv(1),
        Stage::Relu,
        Stage::Conv(2),
        Stage::Relu,
        Stage::AvgPool(2),
        Stage::Conv(3),
        Stage::Relu,
        Stage::GlobalAvgPool,
        Stage::Linear,
    ];
    Ok(Network {
        input: CIFAR_INPUT,
        num_classes,
        convs,
        linear,
        stages,
    })
}

/// Basic-block residual network behind a stride-2 stem and a 2×2 pool.
/// Block-final convolutions start at a quarter of the He scale so the
/// unnormalized stack trains stably.
pub fn build_small_resnet(depth: ResnetDepth, num_classes: usize, seed: u64) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::arg("resnet needs at least two classes"));
    }
    let plan: &[(usize, usize, usize)] = match depth {
        // (width, blocks, first stride)
        ResnetDepth::Lite18 => &[(16, 2, 1), (32, 2, 2), (64, 2, 2), (64, 2, 1)],
        ResnetDepth::Lite56 => &[(16, 9, 1), (32, 9, 2), (64, 9, 2)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = vec![ConvLayer::he_normal(
        ConvSpec {
            c_in: 3,
            c_out: 16,
            k: 3,
            stride: 2,
            pad: 1,
        },
        1.0,
        &mut rng,
    )];
    let mut stages = vec![Stage::Conv(0), Stage::Relu, Stage::AvgPool(2)];
    let mut c = 16;
    for &(width, blocks, first_stride) in plan {
        for b in 0..blocks {
            let stride = if b == 0 { first_stride } else { 1 };
            let a = convs.len();
            convs.push(ConvLayer::he_normal(
                ConvSpec {
                    c_in: c,
                    c_out: width,
                    k: 3,
                    stride,
                    pad: 1,
                },
                1.0,
                &mut rng,
            ));
            convs.push(ConvLayer::he_normal(
                ConvSpec {
                    c_in: width,
                    c_out: width,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                0.25,
                &mut rng,
            ));
            let shortcut = if stride != 1 || c != width {
                convs.push(ConvLayer::he_normal(
                    ConvSpec {
                        c_in: c,
                        c_out: width,
                        k: 1,
                        stride,
                        pad: 0,
                    },
                    1.0,
                    &mut rng,
                ));
                Some(a + 2)
            } else {
                None
            };
            stages.push(Stage::Residual {
                body: vec![Stage::Conv(a), Stage::Relu, Stage::Conv(a + 1)],
                shortcut,
            });
            c = width;
        }
    }
    stages.push(Stage::GlobalAvgPool);
    stages.push(Stage::Linear);
    let linear = linear_init(c, num_classes, &mut rng);
    Ok(Network {
        input: CIFAR_INPUT,
        num_classes,
        convs,
        linear,
        stages,
    })
}

/// Handles for every parameter of a network recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub conv_weights: Vec<Var>,
    pub conv_biases: Vec<Var>,
    pub linear_weight: Var,
    pub linear_bias: Var,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        match id {
            ParamId::ConvWeight(i) => self.conv_weights[i],
            ParamId::ConvBias(i) => self.conv_biases[i],
            ParamId::LinearWeight => self.linear_weight,
            ParamId::LinearBias => self.linear_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    ConvWeight(usize),
    ConvBias(usize),
    LinearWeight,
    LinearBias,
}

impl ParamId {
    /// Stable name used in checkpoints, e.g. `conv3.weight`.
    pub fn name(self) -> String {
        match self {
            ParamId::ConvWeight(i) => format!("conv{i}.weight"),
            ParamId::ConvBias(i) => format!("conv{i}.bias"),
            ParamId::LinearWeight => "linear.weight".into(),
            ParamId::LinearBias => "linear.bias".into(),
        }
    }

    pub fn from_name(s: &str) -> Option<ParamId> {
        match s {
            "linear.weight" => return Some(ParamId::LinearWeight),
            "linear.bias" => return Some(ParamId::LinearBias),
            _ => {}
        }
        let (layer, kind) = s.strip_prefix("conv")?.split_once('.')?;
        let i = layer.parse().ok()?;
        match kind {
            "weight" => Some(ParamId::ConvWeight(i)),
            "bias" => Some(ParamId::ConvBias(i)),
            _ => None,
        }
    }
}

/// Values recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Output of every top-level stage (a residual stage yields its block output).
    pub stage_outputs: Vec<Var>,
    pub logits: Var,
}

/// Position of a convolution inside the stage tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSite {
    /// Index of the top-level stage containing it.
    top: usize,
    /// Index inside the block body, when nested.
    inner: Option<usize>,
    shortcut: bool,
}

impl Network {
    pub fn topology(&self) -> Topology {
        Topology {
            input: self.input,
            num_classes: self.num_classes,
            convs: self.convs.iter().map(|c| c.spec).collect(),
            linear: [self.linear.d_in, self.linear.d_out],
            stages: self.stages.clone(),
        }
    }

    /// Zero-valued network with the given structure.
    pub fn from_topology(t: &Topology) -> Network {
        Network {
            input: t.input,
            num_classes: t.num_classes,
            convs: t.convs.iter().map(|&s| ConvLayer::zeros(s)).collect(),
            linear: LinearLayer {
                d_in: t.linear[0],
                d_out: t.linear[1],
                weight: Tensor::zeros(&[t.linear[1], t.linear[0]]),
                bias: Tensor::zeros(&[t.linear[1]]),
            },
            stages: t.stages.clone(),
        }
    }

    /// Redraws every parameter (He-normal convolutions, zero biases) from `seed`.
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let finals: Vec<usize> = self
            .convs
            .iter()
            .enumerate()
            .filter(|(i, _)| self.protection(*i) == Some(Protection::BlockFinal))
            .map(|(i, _)| i)
            .collect();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            let gain = if finals.contains(&i) { 0.25 } else { 1.0 };
            *conv = ConvLayer::he_normal(conv.spec, gain, &mut rng);
        }
        self.linear = linear_init(self.linear.d_in, self.linear.d_out, &mut rng);
    }

    /// Every parameter id in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(2 * self.convs.len() + 2);
        for i in 0..self.convs.len() {
            ids.push(ParamId::ConvWeight(i));
            ids.push(ParamId::ConvBias(i));
        }
        ids.push(ParamId::LinearWeight);
        ids.push(ParamId::LinearBias);
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::ConvWeight(i) => &self.convs[i].weight,
            ParamId::ConvBias(i) => &self.convs[i].bias,
            ParamId::LinearWeight => &self.linear.weight,
            ParamId::LinearBias => &self.linear.bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::ConvWeight(i) => &mut self.convs[i].weight,
            ParamId::ConvBias(i) => &mut self.convs[i].bias,
            ParamId::LinearWeight => &mut self.linear.weight,
            ParamId::LinearBias => &mut self.linear.bias,
        }
    }

    /// SHA-256 over topology and the bit patterns of every parameter.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.topology()).expect("topology serializes"));
        for conv in &self.convs {
            for v in conv.weight.data().iter().chain(conv.bias.data()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in self.linear.weight.data().iter().chain(self.linear.bias.data()) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum::<usize>()
            + self.linear.weight.len()
            + self.linear.bias.len()
    }

    fn conv_sites(&self) -> BTreeMap<usize, ConvSite> {
        let mut out = BTreeMap::new();
        for (top, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Conv(id) => {
                    out.insert(
                        *id,
                        ConvSite {
                            top,
                            inner: None,
                            shortcut: false,
                        },
                    );
                }
                Stage::Residual { body, shortcut } => {
                    for (inner, s) in body.iter().enumerate() {
                        if let Stage::Conv(id) = s {
                            out.insert(
                                *id,
                                ConvSite {
                                    top,
                                    inner: Some(inner),
                                    shortcut: false,
                                },
                            );
                        }
                    }
                    if let Some(id) = shortcut {
                        out.insert(
                            *id,
                            ConvSite {
                                top,
                                inner: None,
                                shortcut: true,
                            },
                        );
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Convolution ids in execution order (shortcuts after their block body).
    pub fn conv_order(&self) -> Vec<usize> {
        let mut order = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv(id) => order.push(*id),
                Stage::Residual { body, shortcut } => {
                    order.extend(body.iter().filter_map(|s| match s {
                        Stage::Conv(id) => Some(*id),
                        _ => None,
                    }));
                    order.extend(shortcut.iter().copied());
                }
                _ => {}
            }
        }
        order
    }

    fn next_conv_in(seq: &[Stage], from: usize) -> Option<usize> {
        for s in &seq[from + 1..] {
            match s {
                Stage::Relu | Stage::AvgPool(_) => continue,
                Stage::Conv(id) => return Some(*id),
                _ => return None,
            }
        }
        None
    }

    /// The convolution consuming `conv`'s output, if it is a single conv.
    pub fn successor(&self, conv: usize) -> Option<usize> {
        let site = *self.conv_sites().get(&conv)?;
        if site.shortcut {
            return None;
        }
        match site.inner {
            None => Self::next_conv_in(&self.stages, site.top),
            Some(inner) => match &self.stages[site.top] {
                Stage::Residual { body, .. } => Self::next_conv_in(body, inner),
                _ => None,
            },
        }
    }

    /// `None` when `conv` may be compressed.
    pub fn protection(&self, conv: usize) -> Option<Protection> {
        let sites = self.conv_sites();
        let site = sites.get(&conv)?;
        if self.conv_order().first() == Some(&conv) {
            return Some(Protection::FirstConv);
        }
        if site.shortcut {
            return Some(Protection::Shortcut);
        }
        if self.successor(conv).is_none() {
            return Some(if site.inner.is_some() {
                Protection::BlockFinal
            } else {
                Protection::NoConvSuccessor
            });
        }
        None
    }

    pub fn compressible_layers(&self) -> Vec<usize> {
        self.conv_order()
            .into_iter()
            .filter(|&c| self.protection(c).is_none())
            .collect()
    }

    /// Top-level stage whose output measures the reconstruction error for a
    /// compressed `conv`: the post-activation output of its successor, or the
    /// enclosing residual block's output.
    pub fn recon_site(&self, conv: usize) -> Result<usize> {
        let site = *self
            .conv_sites()
            .get(&conv)
            .ok_or_else(|| Error::Validation(format!("layer {conv} does not exist")))?;
        if site.inner.is_some() || site.shortcut {
            return Ok(site.top);
        }
        let succ = self
            .successor(conv)
            .ok_or_else(|| Error::Validation(format!("layer {conv} has no successor")))?;
        let s_top = self.conv_sites()[&succ].top;
        Ok(match self.stages.get(s_top + 1) {
            Some(Stage::Relu) => s_top + 1,
            _ => s_top,
        })
    }

    /// Index of the residual block (counted among residual stages) holding
    /// `conv`, and its position among that block's body convolutions.
    pub fn block_position(&self, conv: usize) -> Option<(usize, usize)> {
        let site = self.conv_sites().get(&conv).copied()?;
        let inner = site.inner?;
        let block = self.stages[..site.top]
            .iter()
            .filter(|s| matches!(s, Stage::Residual { .. }))
            .count();
        match &self.stages[site.top] {
            Stage::Residual { body, .. } => {
                let pos = body[..inner]
                    .iter()
                    .filter(|s| matches!(s, Stage::Conv(_)))
                    .count();
                Some((block, pos))
            }
            _ => None,
        }
    }

    /// Records every parameter on `g`; `trainable` decides which become
    /// gradient-carrying leaves.
    pub fn record_params(&self, g: &mut Graph, trainable: impl Fn(ParamId) -> bool) -> ParamVars {
        let mut leaf = |t: &Tensor, id: ParamId| {
            if trainable(id) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let conv_weights = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| leaf(&c.weight, ParamId::ConvWeight(i)))
            .collect();
        let conv_biases = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| leaf(&c.bias, ParamId::ConvBias(i)))
            .collect();
        ParamVars {
            conv_weights,
            conv_biases,
            linear_weight: leaf(&self.linear.weight, ParamId::LinearWeight),
            linear_bias: leaf(&self.linear.bias, ParamId::LinearBias),
        }
    }

    /// Forward pass. For each `(conv, P)` in `projections` the conv output
    /// is mixed down to `P`'s columns and the next conv sees `Pᵀ` folded into
    /// its input channels.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        params: &ParamVars,
        projections: &BTreeMap<usize, Var>,
    ) -> Result<ForwardTrace> {
        let (stage_outputs, logits) = self.run_stages(g, x, params, projections, self.stages.len())?;
        let logits = logits.ok_or_else(|| Error::Validation("network has no classifier".into()))?;
        Ok(ForwardTrace {
            stage_outputs,
            logits,
        })
    }

    /// Outputs of the first `stages` top-level stages only. Cheaper than
    /// [`Network::forward`] when nothing past them is needed.
    pub fn forward_prefix(
        &self,
        g: &mut Graph,
        x: Var,
        params: &ParamVars,
        projections: &BTreeMap<usize, Var>,
        stages: usize,
    ) -> Result<Vec<Var>> {
        Ok(self.run_stages(g, x, params, projections, stages.min(self.stages.len()))?.0)
    }

    fn run_stages(
        &self,
        g: &mut Graph,
        x: Var,
        params: &ParamVars,
        projections: &BTreeMap<usize, Var>,
        limit: usize,
    ) -> Result<(Vec<Var>, Option<Var>)> {
        let mut h = x;
        let mut pending: Option<Var> = None;
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut logits = None;
        for stage in &self.stages[..limit] {
            match stage {
                Stage::Residual { body, shortcut } => {
                    if pending.is_some() {
                        return Err(Error::Validation(
                            "a projection cannot feed a residual block".into(),
                        ));
                    }
                    let input = h;
                    let mut inner = input;
                    let mut inner_pending = None;
                    for s in body {
                        inner = self.apply_simple(g, s, inner, params, projections, &mut inner_pending)?;
                    }
                    if inner_pending.is_some() {
                        return Err(Error::Validation(
                            "a block-final convolution cannot be projected".into(),
                        ));
                    }
                    let skip = match shortcut {
                        Some(id) => {
                            let c = &self.convs[*id];
                            g.conv2d(
                                input,
                                params.conv_weights[*id],
                                Some(params.conv_biases[*id]),
                                c.spec.stride,
                                c.spec.pad,
                            )?
                        }
                        None => input,
                    };
                    let sum = g.add(inner, skip)?;
                    h = g.relu(sum);
                }
                Stage::GlobalAvgPool => {
                    h = g.global_avg_pool(h)?;
                }
                Stage::Linear => {
                    if pending.is_some() {
                        return Err(Error::Validation(
                            "a projection cannot feed the classifier".into(),
                        ));
                    }
                    let flat = if g.shape(h).len() == 2 { h } else { g.flatten(h)? };
                    h = g.linear(flat, params.linear_weight, params.linear_bias)?;
                    logits = Some(h);
                }
                simple => {
                    h = self.apply_simple(g, simple, h, params, projections, &mut pending)?;
                }
            }
            stage_outputs.push(h);
        }
        Ok((stage_outputs, logits))
    }

    fn apply_simple(
        &self,
        g: &mut Graph,
        stage: &Stage,
        h: Var,
        params: &ParamVars,
        projections: &BTreeMap<usize, Var>,
        pending: &mut Option<Var>,
    ) -> Result<Var> {
        Ok(match stage {
            Stage::Conv(id) => {
                let c = &self.convs[*id];
                let w = match pending.take() {
                    Some(p) => g.fold_in(params.conv_weights[*id], p)?,
                    None => params.conv_weights[*id],
                };
                let y = g.conv2d(h, w, Some(params.conv_biases[*id]), c.spec.stride, c.spec.pad)?;
                match projections.get(id) {
                    Some(&p) => {
                        *pending = Some(p);
                        g.channel_project(y, p)?
                    }
                    None => y,
                }
            }
            Stage::Relu => g.relu(h),
            Stage::AvgPool(k) => g.avg_pool(h, *k)?,
            other => {
                return Err(Error::Validation(format!(
                    "stage {other:?} is not allowed inside a residual body"
                )))
            }
        })
    }

    /// Logits for a batch `[n, c, h, w]`, no gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let params = self.record_params(&mut g, |_| false);
        let trace = self.forward(&mut g, xv, &params, &BTreeMap::new())?;
        Ok(g.value(trace.logits).clone())
    }

    /// Checks channel consistency along every path and returns the spatial
    /// size seen by each convolution's output.
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        let (mut c, mut h, mut w) = (c, h, w);
        let mut flat = None;
        for stage in &self.stages {
            match stage {
                Stage::Residual { body, shortcut } => {
                    let (c0, h0, w0) = (c, h, w);
                    for s in body {
                        (c, h, w) = self.shape_step(s, c, h, w)?;
                    }
                    let (sc, sh, sw) = match shortcut {
                        Some(id) => self.shape_step(&Stage::Conv(*id), c0, h0, w0)?,
                        None => (c0, h0, w0),
                    };
                    if (sc, sh, sw) != (c, h, w) {
                        return Err(Error::Validation(format!(
                            "residual join mismatch: body {:?} vs skip {:?}",
                            [c, h, w],
                            [sc, sh, sw]
                        )));
                    }
                }
                Stage::GlobalAvgPool => {
                    flat = Some(c);
                    h = 1;
                    w = 1;
                }
                Stage::Linear => {
                    let d = flat.unwrap_or(c * h * w);
                    if d != self.linear.d_in {
                        return Err(Error::Validation(format!(
                            "classifier expects {} inputs, receives {d}",
                            self.linear.d_in
                        )));
                    }
                }
                s => (c, h, w) = self.shape_step(s, c, h, w)?,
            }
        }
        Ok(())
    }

    fn shape_step(&self, s: &Stage, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        Ok(match s {
            Stage::Conv(id) => {
                let spec = self.convs[*id].spec;
                if spec.c_in != c {
                    return Err(Error::Validation(format!(
                        "conv {id} expects {} input channels, receives {c}",
                        spec.c_in
                    )));
                }
                (
                    spec.c_out,
                    conv_out_dim(h, spec.k, spec.stride, spec.pad),
                    conv_out_dim(w, spec.k, spec.stride, spec.pad),
                )
            }
            Stage::AvgPool(k) => (c, h / k, w / k),
            _ => (c, h, w),
        })
    }
}
