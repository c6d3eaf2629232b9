//! The compression pipeline: projection training, kernel folding, kernel
//! relaxation and fine-tuning.
//!
//! A compressed conv `i` with projection `P` (`[c_out, r]`, orthonormal
//! columns) produces `channel_project(conv_i(x), P)`, and its successor reads
//! those `r` channels through `fold_in(W_next, P)`. Folding writes the same
//! algebra into the kernels, so the compressed network carries no extra layers.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::config::{Flag, KvFile};
use crate::cost::{self, CostReport};
use crate::data::{mix, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::network::{Network, ParamId};
use crate::proxy::{self, ProjectionProxy};
use crate::tensor::Tensor;
use crate::train::{check_loss, LrSchedule, Momentum};

// ---------------------------------------------------------------------------
// plan

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleLayer,
    CascadedGreedy,
    Simultaneous,
}

impl std::str::FromStr for Mode {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "single_layer" => Ok(Mode::SingleLayer),
            "cascaded_greedy" => Ok(Mode::CascadedGreedy),
            "simultaneous" => Ok(Mode::Simultaneous),
            _ => Err(()),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SingleLayer => "single_layer",
            Mode::CascadedGreedy => "cascaded_greedy",
            Mode::Simultaneous => "simultaneous",
        }
    }
}

/// Where projections come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSource {
    /// Trained proxies.
    Optimized,
    /// A fixed random orthonormal basis per layer (ablation baseline).
    Random,
}

impl std::str::FromStr for ProjectionSource {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "optimized" => Ok(ProjectionSource::Optimized),
            "random" => Ok(ProjectionSource::Random),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyInit {
    /// Top left singular vectors of the layer's unfolded kernel.
    Weights,
    /// Selection of the strongest output channels.
    Channels,
    Random,
}

impl std::str::FromStr for ProxyInit {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "weights" => Ok(ProxyInit::Weights),
            "channels" => Ok(ProxyInit::Channels),
            "random" => Ok(ProxyInit::Random),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTarget {
    Rank(usize),
    KeepRatio(f64),
}

impl LayerTarget {
    /// Rank for a layer with `c` output channels, `round(ratio·c)` clamped to `1..=c`.
    pub fn rank_for(self, c: usize) -> usize {
        match self {
            LayerTarget::Rank(r) => r,
            LayerTarget::KeepRatio(q) => ((q * c as f64).round() as usize).clamp(1, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionPlan {
    /// Applied to every compressible layer not listed in `layers`.
    pub all_layers: Option<LayerTarget>,
    pub layers: BTreeMap<usize, LayerTarget>,
    pub mode: Mode,
    pub gamma: f64,
    pub projection_steps: usize,
    pub relaxation_epochs: usize,
    pub finetune_epochs: usize,
    pub two_round: bool,
    pub projection: ProjectionSource,
    pub proxy_init: ProxyInit,
    pub projection_lr: f64,
    pub projection_momentum: f64,
    pub relax_lr: f64,
    pub finetune_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Divide each reconstruction term by the teacher's squared norm.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for CompressionPlan {
    fn default() -> Self {
        CompressionPlan {
            all_layers: None,
            layers: BTreeMap::new(),
            mode: Mode::CascadedGreedy,
            gamma: 1.0,
            projection_steps: 200,
            relaxation_epochs: 1,
            finetune_epochs: 0,
            two_round: false,
            projection: ProjectionSource::Optimized,
            proxy_init: ProxyInit::Channels,
            projection_lr: 0.05,
            projection_momentum: 0.9,
            relax_lr: 0.005,
            finetune_lr: 0.005,
            momentum: 0.9,
            batch_size: 32,
            normalize: true,
            seed: 0,
        }
    }
}

fn parse_target(kv: &KvFile, key: &str, kind: &str) -> Result<LayerTarget> {
    let line = kv.line_of(key).unwrap_or(0);
    let bad = |msg: String| Error::Parse { line, msg };
    match kind {
        "keep_ratio" => {
            let q: f64 = kv.require(key)?;
            if !(q > 0.0 && q <= 1.0) {
                return Err(bad(format!("{key} = {q} must lie in (0, 1]")));
            }
            Ok(LayerTarget::KeepRatio(q))
        }
        "rank" => {
            let r: usize = kv.require(key)?;
            if r == 0 {
                return Err(bad(format!("{key} must be positive")));
            }
            Ok(LayerTarget::Rank(r))
        }
        other => Err(bad(format!("unknown layer setting {other:?} (keep_ratio or rank)"))),
    }
}

impl CompressionPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let plan = Self::from_kv(&kv)?;
        kv.finish()?;
        Ok(plan)
    }

    /// Reads plan keys from `kv`. Unknown keys are left for the caller's
    /// [`KvFile::finish`].
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = CompressionPlan::default();
        let mut plan = CompressionPlan {
            mode: kv.get_or("mode", d.mode)?,
            gamma: kv.get_or("gamma", d.gamma)?,
            projection_steps: kv.get_or("projection_steps", d.projection_steps)?,
            relaxation_epochs: kv.get_or("relaxation_epochs", d.relaxation_epochs)?,
            finetune_epochs: kv.get_or("finetune_epochs", d.finetune_epochs)?,
            two_round: kv.get_or("two_round", Flag(d.two_round))?.0,
            projection: kv.get_or("projection", d.projection)?,
            proxy_init: kv.get_or("proxy_init", d.proxy_init)?,
            projection_lr: kv.get_or("projection_lr", d.projection_lr)?,
            projection_momentum: kv.get_or("projection_momentum", d.projection_momentum)?,
            relax_lr: kv.get_or("relax_lr", d.relax_lr)?,
            finetune_lr: kv.get_or("finetune_lr", d.finetune_lr)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            normalize: kv.get_or("normalize", Flag(d.normalize))?.0,
            seed: kv.get_or("seed", d.seed)?,
            ..d
        };
        if plan.gamma < 0.0 {
            return Err(Error::Parse {
                line: kv.line_of("gamma").unwrap_or(0),
                msg: format!("gamma must be non-negative, got {}", plan.gamma),
            });
        }
        if plan.batch_size == 0 {
            return Err(Error::Parse {
                line: kv.line_of("batch_size").unwrap_or(0),
                msg: "batch_size must be positive".into(),
            });
        }
        let keys: Vec<String> = kv.keys_with_prefix("layer.").map(str::to_string).collect();
        for key in keys {
            let line = kv.line_of(&key).unwrap_or(0);
            let parts: Vec<&str> = key.split('.').collect();
            let [_, which, kind] = parts[..] else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected layer.<id|all>.<keep_ratio|rank>, found {key}"),
                });
            };
            let target = parse_target(kv, &key, kind)?;
            if which == "all" {
                if plan.all_layers.replace(target).is_some() {
                    return Err(Error::Parse {
                        line,
                        msg: "layer.all set twice".into(),
                    });
                }
                continue;
            }
            let id: usize = which.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid layer id {which:?}"),
            })?;
            if plan.layers.insert(id, target).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("layer {id} given both a rank and a keep ratio"),
                });
            }
        }
        Ok(plan)
    }

    /// Canonical plan text; parsing it gives back an equal plan.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("mode", self.mode.name().into());
        put("gamma", format!("{:?}", self.gamma));
        put("projection_steps", self.projection_steps.to_string());
        put("relaxation_epochs", self.relaxation_epochs.to_string());
        put("finetune_epochs", self.finetune_epochs.to_string());
        put("two_round", self.two_round.to_string());
        put(
            "projection",
            match self.projection {
                ProjectionSource::Optimized => "optimized",
                ProjectionSource::Random => "random",
            }
            .into(),
        );
        put(
            "proxy_init",
            match self.proxy_init {
                ProxyInit::Weights => "weights",
                ProxyInit::Channels => "channels",
                ProxyInit::Random => "random",
            }
            .into(),
        );
        put("projection_lr", format!("{:?}", self.projection_lr));
        put("projection_momentum", format!("{:?}", self.projection_momentum));
        put("relax_lr", format!("{:?}", self.relax_lr));
        put("finetune_lr", format!("{:?}", self.finetune_lr));
        put("momentum", format!("{:?}", self.momentum));
        put("batch_size", self.batch_size.to_string());
        put("normalize", self.normalize.to_string());
        put("seed", self.seed.to_string());
        let target = |t: &LayerTarget| match t {
            LayerTarget::Rank(r) => ("rank", r.to_string()),
            LayerTarget::KeepRatio(q) => ("keep_ratio", format!("{q:?}")),
        };
        if let Some(t) = &self.all_layers {
            let (k, v) = target(t);
            put(&format!("layer.all.{k}"), v);
        }
        for (id, t) in &self.layers {
            let (k, v) = target(t);
            put(&format!("layer.{id}.{k}"), v);
        }
        s
    }

    /// Per-layer ranks for `net`, validated against its protection rules.
    pub fn ranks(&self, net: &Network) -> Result<BTreeMap<usize, usize>> {
        let mut out = BTreeMap::new();
        if let Some(t) = self.all_layers {
            for id in net.compressible_layers() {
                out.insert(id, t.rank_for(net.convs[id].spec.c_out));
            }
        }
        for (&id, t) in &self.layers {
            let c = net
                .convs
                .get(id)
                .ok_or_else(|| Error::Validation(format!("layer {id} does not exist")))?
                .spec
                .c_out;
            out.insert(id, t.rank_for(c));
        }
        cost::validate_ranks(net, &out)?;
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.all_layers.is_none() && self.layers.is_empty()
    }
}

/// Compressed shape of `net` under `plan` (values of resized tensors are zero).
pub fn apply_plan_shapes(net: &Network, plan: &CompressionPlan) -> Result<Network> {
    cost::compressed_skeleton(net, &plan.ranks(net)?)
}

// ---------------------------------------------------------------------------
// losses and the two-layer block

/// `‖teacher − student‖²_F`, divided by `max(‖teacher‖²_F, 1e-12)` when normalized.
pub fn reconstruction_loss(g: &mut Graph, student: Var, teacher: Var, normalize: bool) -> Result<Var> {
    let diff = g.sub(teacher, student)?;
    let sq = g.frobenius_sq(diff);
    if !normalize {
        return Ok(sq);
    }
    let norm = g.value(teacher).frobenius_sq().max(1e-12);
    Ok(g.scale(sq, 1.0 / norm))
}

/// Value-only version of [`reconstruction_loss`].
pub fn reconstruction_error(student: &Tensor, teacher: &Tensor, normalize: bool) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape("reconstruction_loss", teacher.shape(), student.shape()));
    }
    let sq: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(s, t)| (t - s) * (t - s))
        .sum();
    Ok(if normalize {
        sq / teacher.frobenius_sq().max(1e-12)
    } else {
        sq
    })
}

/// `Σ recon + γ·class`.
pub fn mixture_loss(g: &mut Graph, recon: &[Var], class_loss: Var, gamma: f64) -> Result<Var> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::arg(format!("gamma must be non-negative, got {gamma}")));
    }
    let mut total = g.scale(class_loss, gamma);
    for &r in recon {
        total = g.add(total, r)?;
    }
    Ok(total)
}

/// Stride and padding of the two convolutions in a compressed pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairGeometry {
    pub stride: usize,
    pub pad: usize,
    pub next_stride: usize,
    pub next_pad: usize,
}

impl PairGeometry {
    pub const SAME_3X3: PairGeometry = PairGeometry {
        stride: 1,
        pad: 1,
        next_stride: 1,
        next_pad: 1,
    };
}

/// `relu(conv(relu(conv(x, W, b)·P), fold_in(W_next, P), b_next))`, the
/// projected two-layer block during training.
#[allow(clippy::too_many_arguments)]
pub fn student_block_forward(
    g: &mut Graph,
    x: Var,
    w: Var,
    b: Var,
    p: Var,
    w_next: Var,
    b_next: Var,
    geom: PairGeometry,
) -> Result<Var> {
    let o = g.conv2d(x, w, Some(b), geom.stride, geom.pad)?;
    let projected = g.channel_project(o, p)?;
    let h = g.relu(projected);
    let w_in = g.fold_in(w_next, p)?;
    let o2 = g.conv2d(h, w_in, Some(b_next), geom.next_stride, geom.next_pad)?;
    Ok(g.relu(o2))
}

/// Mixes the output channels of a `[c, c_in, k, k]` kernel: `[r, c_in, k, k]`.
pub fn fold_out(w: &Tensor, p: &Tensor) -> Result<Tensor> {
    let [c, c_in, kh, kw] = w.dims4()?;
    let [pc, r] = p.dims2()?;
    if pc != c {
        return Err(Error::shape("fold_out", w.shape(), p.shape()));
    }
    let wm = Mat::new(c, c_in * kh * kw, w.data().to_vec())?;
    let pm = Mat::new(c, r, p.data().to_vec())?;
    Tensor::new(&[r, c_in, kh, kw], pm.t_matmul(&wm).data().to_vec())
}

/// `(W^O, b^O, W^I)`: output-mixed kernel, `Pᵀb`, input-mixed next kernel.
pub fn fold_kernels(w: &Tensor, b: &Tensor, p: &Tensor, w_next: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let w_out = fold_out(w, p)?;
    let [c, r] = p.dims2()?;
    if b.shape() != [c] {
        return Err(Error::shape("fold_kernels bias", b.shape(), &[c]));
    }
    let b_out = Tensor::from_fn(&[r], |j| (0..c).map(|m| p.data()[m * r + j] * b.data()[m]).sum());
    let w_in = crate::autodiff::fold_in_forward(w_next, p)?;
    Ok((w_out, b_out, w_in))
}

/// Writes projection `p` for `layer` into `net` (layer and its successor).
pub fn fold_into(net: &mut Network, layer: usize, p: &Tensor) -> Result<()> {
    let succ = net
        .successor(layer)
        .ok_or_else(|| Error::Validation(format!("layer {layer} has no successor to fold into")))?;
    let conv = &net.convs[layer];
    let (w_out, b_out, w_in) = fold_kernels(&conv.weight, &conv.bias, p, &net.convs[succ].weight)?;
    let r = b_out.len();
    let c = &mut net.convs[layer];
    c.spec.c_out = r;
    c.weight = w_out;
    c.bias = b_out;
    let s = &mut net.convs[succ];
    s.spec.c_in = r;
    s.weight = w_in;
    Ok(())
}

// ---------------------------------------------------------------------------
// teacher and data

/// Frozen copy of the uncompressed network.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    net: Network,
    hash: String,
}

impl TeacherSnapshot {
    pub fn new(net: &Network) -> Self {
        TeacherSnapshot {
            hash: net.param_hash(),
            net: net.clone(),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Output of every top-level stage for a batch.
    pub fn stage_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.stage_outputs_prefix(x, self.net.stages.len())
    }

    /// Outputs of the first `stages` top-level stages.
    pub fn stage_outputs_prefix(&self, x: &Tensor, stages: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let params = self.net.record_params(&mut g, |_| false);
        let outs = self.net.forward_prefix(&mut g, xv, &params, &BTreeMap::new(), stages)?;
        Ok(outs.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn verify(&self) -> Result<()> {
        if self.net.param_hash() != self.hash {
            return Err(Error::Numeric("teacher parameters changed".into()));
        }
        Ok(())
    }
}

/// Deterministic mini-batches indexed by step.
pub struct DataStream<'a> {
    data: &'a Dataset,
    norm: Normalization,
    batch: usize,
    seed: u64,
    cache: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'a> DataStream<'a> {
    pub fn new(data: &'a Dataset, norm: Normalization, batch: usize, seed: u64) -> Self {
        DataStream {
            data,
            norm,
            batch: batch.max(1),
            seed,
            cache: None,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch)
    }

    pub fn batch(&mut self, step: usize) -> (Tensor, Vec<usize>) {
        let per = self.batches_per_epoch().max(1);
        let epoch = (step / per) as u64;
        if self.cache.as_ref().map(|c| c.0) != Some(epoch) {
            self.cache = Some((epoch, self.data.epoch_batches(self.batch, self.seed, epoch)));
        }
        let idx = &self.cache.as_ref().expect("cached").1[step % per];
        self.data.batch(idx, &self.norm)
    }
}

// ---------------------------------------------------------------------------
// objectives

/// Loss pieces shared by projection training, relaxation and fine-tuning.
#[derive(Debug, Clone)]
struct Objective {
    sites: Vec<usize>,
    gamma: f64,
    normalize: bool,
}

impl Objective {
    /// Stages a forward pass must reach. Without the classification term
    /// nothing past the deepest site matters.
    fn depth(&self, net: &Network) -> usize {
        if self.gamma > 0.0 {
            net.stages.len()
        } else {
            self.sites.iter().map(|s| s + 1).max().unwrap_or(0)
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        net: &Network,
        x: Var,
        params: &crate::network::ParamVars,
        projections: &BTreeMap<usize, Var>,
    ) -> Result<(Vec<Var>, Option<Var>)> {
        if self.gamma > 0.0 {
            let trace = net.forward(g, x, params, projections)?;
            Ok((trace.stage_outputs, Some(trace.logits)))
        } else {
            Ok((net.forward_prefix(g, x, params, projections, self.depth(net))?, None))
        }
    }

    fn build(
        &self,
        g: &mut Graph,
        outputs: &(Vec<Var>, Option<Var>),
        targets: &[Tensor],
        labels: &[usize],
    ) -> Result<Var> {
        let mut terms = Vec::with_capacity(self.sites.len());
        for &s in &self.sites {
            let t = g.constant(targets[s].clone());
            terms.push(reconstruction_loss(g, outputs.0[s], t, self.normalize)?);
        }
        let ce = match outputs.1 {
            Some(logits) => g.softmax_cross_entropy(logits, labels)?,
            None => g.constant(Tensor::scalar(0.0)),
        };
        mixture_loss(g, &terms, ce, self.gamma)
    }
}

/// Value of the compression objective on one batch.
pub fn objective_value(
    student: &Network,
    teacher: &TeacherSnapshot,
    sites: &[usize],
    gamma: f64,
    normalize: bool,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let obj = Objective {
        sites: sites.to_vec(),
        gamma,
        normalize,
    };
    let targets = teacher.stage_outputs_prefix(x, obj.depth(student))?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params = student.record_params(&mut g, |_| false);
    let outputs = obj.forward(&mut g, student, xv, &params, &BTreeMap::new())?;
    let loss = obj.build(&mut g, &outputs, &targets, labels)?;
    Ok(g.value(loss).item())
}

/// Distinct reconstruction sites of `layers`, in order, when every layer in
/// `compressed` has projected outputs. A site is never inside projected
/// space: when a layer's successor is itself compressed, its error is
/// measured further down, at the site of the last layer in that chain.
pub fn recon_sites(net: &Network, layers: &[usize], compressed: &BTreeSet<usize>) -> Result<Vec<usize>> {
    let mut set = BTreeSet::new();
    for &l in layers {
        let mut last = l;
        while let Some(s) = net.successor(last).filter(|s| compressed.contains(s)) {
            last = s;
        }
        set.insert(net.recon_site(last)?);
    }
    Ok(set.into_iter().collect())
}

// ---------------------------------------------------------------------------
// projection training

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionLog {
    pub layers: Vec<usize>,
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Largest `‖PᵀP − I‖_∞` seen over all steps and layers.
    pub max_orthonormality_defect: f64,
    pub perturbations: u64,
}

/// Proxy settings for [`optimize_projection`].
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSettings {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub normalize: bool,
    pub guard: f64,
}

impl ProjectionSettings {
    pub fn from_plan(plan: &CompressionPlan) -> Self {
        ProjectionSettings {
            steps: plan.projection_steps,
            lr: plan.projection_lr,
            momentum: plan.projection_momentum,
            gamma: plan.gamma,
            normalize: plan.normalize,
            guard: linalg::DEFAULT_GUARD,
        }
    }
}

/// Trains `proxies` jointly by SGD on the mixture loss measured at
/// `sites`. Kernels stay frozen; `fixed` projections are applied as constants.
pub fn optimize_projection(
    student: &Network,
    teacher: &TeacherSnapshot,
    proxies: &mut BTreeMap<usize, ProjectionProxy>,
    fixed: &BTreeMap<usize, Tensor>,
    sites: &[usize],
    settings: &ProjectionSettings,
    stream: &mut DataStream,
) -> Result<ProjectionLog> {
    let obj = Objective {
        sites: sites.to_vec(),
        gamma: settings.gamma,
        normalize: settings.normalize,
    };
    let mut log = ProjectionLog {
        layers: proxies.keys().copied().collect(),
        steps: settings.steps,
        losses: Vec::with_capacity(settings.steps),
        max_orthonormality_defect: 0.0,
        perturbations: 0,
    };
    let perturbations_before: u64 = proxies.values().map(ProjectionProxy::perturbations).sum();
    for step in 0..settings.steps {
        let (x, y) = stream.batch(step);
        let targets = teacher.stage_outputs_prefix(&x, obj.depth(student))?;
        let mut g = Graph::new().with_svd_guard(settings.guard);
        let xv = g.constant(x);
        let params = student.record_params(&mut g, |_| false);
        let mut projections = BTreeMap::new();
        let mut proxy_vars = Vec::with_capacity(proxies.len());
        for (&id, proxy) in proxies.iter_mut() {
            proxy.ensure_differentiable(settings.guard)?;
            let xp = g.param(proxy.x().to_tensor());
            let p = g.phi(xp)?;
            let defect = Mat::from_tensor(g.value(p))?.orthonormality_defect();
            log.max_orthonormality_defect = log.max_orthonormality_defect.max(defect);
            projections.insert(id, p);
            proxy_vars.push((id, xp));
        }
        for (&id, p) in fixed {
            let pv = g.constant(p.clone());
            projections.insert(id, pv);
        }
        let outputs = obj.forward(&mut g, student, xv, &params, &projections)?;
        let loss = obj.build(&mut g, &outputs, &targets, &y)?;
        let value = g.value(loss).item();
        check_loss(step, value)?;
        log.losses.push(value);
        let grads = g.backward(loss)?;
        for (id, xp) in proxy_vars {
            let grad = Mat::from_tensor(&grads.get(xp))?;
            proxies
                .get_mut(&id)
                .expect("proxy exists")
                .sgd_step(&grad, settings.lr, settings.momentum);
        }
    }
    log.perturbations = proxies.values().map(ProjectionProxy::perturbations).sum::<u64>() - perturbations_before;
    Ok(log)
}

/// Current projection `Φ(X)` of every proxy.
fn projections_of(proxies: &mut BTreeMap<usize, ProjectionProxy>) -> Result<BTreeMap<usize, Tensor>> {
    proxies
        .iter_mut()
        .map(|(&id, p)| Ok((id, p.phi()?.to_tensor())))
        .collect()
}

fn new_proxy(net: &Network, layer: usize, rank: usize, plan: &CompressionPlan) -> Result<ProjectionProxy> {
    let c = net.convs[layer].spec.c_out;
    let seed = mix(plan.seed, 1000 + layer as u64);
    let warm = match plan.proxy_init {
        ProxyInit::Weights => Some(proxy::weight_warm_start(&net.convs[layer].weight, rank)?),
        ProxyInit::Channels => Some(proxy::channel_warm_start(&net.convs[layer].weight, rank)?),
        ProxyInit::Random => None,
    };
    ProjectionProxy::init(c, rank, seed, warm)
}

// ---------------------------------------------------------------------------
// relaxation and fine-tuning

#[derive(Debug, Clone, Copy)]
struct PhaseSettings {
    epochs: usize,
    lr: f64,
    momentum: f64,
    schedule: LrSchedule,
}

fn run_phase(
    student: &mut Network,
    teacher: &TeacherSnapshot,
    obj: &Objective,
    trainable: &[ParamId],
    phase: PhaseSettings,
    stream: &mut DataStream,
) -> Result<Vec<f64>> {
    let per_epoch = stream.batches_per_epoch();
    let total = phase.epochs * per_epoch;
    let keep: BTreeSet<ParamId> = trainable.iter().copied().collect();
    let mut opt = Momentum::default();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let (x, y) = stream.batch(step);
        let targets = teacher.stage_outputs_prefix(&x, obj.depth(student))?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let params = student.record_params(&mut g, |id| keep.contains(&id));
        let outputs = obj.forward(&mut g, student, xv, &params, &BTreeMap::new())?;
        let loss = obj.build(&mut g, &outputs, &targets, &y)?;
        let value = g.value(loss).item();
        check_loss(step, value)?;
        losses.push(value);
        let grads = g.backward(loss)?;
        let lr = phase.schedule.at(phase.lr, step, total);
        opt.step(student, &grads, &params, trainable, lr, phase.momentum, 0.0);
    }
    Ok(losses)
}

/// Kernel relaxation: trains only the folded kernels (`W^O`, `b^O` of each
/// compressed layer and `W^I` of its successor) on the mixture loss.
pub fn kernel_relaxation(
    student: &mut Network,
    teacher: &TeacherSnapshot,
    layers: &[usize],
    plan: &CompressionPlan,
    data: &Dataset,
    norm: &Normalization,
) -> Result<Vec<f64>> {
    if plan.relaxation_epochs == 0 || layers.is_empty() {
        return Ok(Vec::new());
    }
    let mut trainable = BTreeSet::new();
    for &l in layers {
        trainable.insert(ParamId::ConvWeight(l));
        trainable.insert(ParamId::ConvBias(l));
        if let Some(s) = student.successor(l) {
            trainable.insert(ParamId::ConvWeight(s));
        }
    }
    let trainable: Vec<ParamId> = trainable.into_iter().collect();
    let obj = Objective {
        sites: recon_sites(student, layers, &layers.iter().copied().collect())?,
        gamma: plan.gamma,
        normalize: plan.normalize,
    };
    let mut stream = DataStream::new(data, *norm, plan.batch_size, mix(plan.seed, 7));
    run_phase(
        student,
        teacher,
        &obj,
        &trainable,
        PhaseSettings {
            epochs: plan.relaxation_epochs,
            lr: plan.relax_lr,
            momentum: plan.momentum,
            schedule: LrSchedule::Constant,
        },
        &mut stream,
    )
}

fn finetune(
    student: &mut Network,
    teacher: &TeacherSnapshot,
    layers: &[usize],
    plan: &CompressionPlan,
    data: &Dataset,
    norm: &Normalization,
) -> Result<Vec<f64>> {
    if plan.finetune_epochs == 0 {
        return Ok(Vec::new());
    }
    let trainable = student.param_ids();
    let obj = Objective {
        sites: recon_sites(student, layers, &layers.iter().copied().collect())?,
        gamma: plan.gamma,
        normalize: plan.normalize,
    };
    let mut stream = DataStream::new(data, *norm, plan.batch_size, mix(plan.seed, 11));
    run_phase(
        student,
        teacher,
        &obj,
        &trainable,
        PhaseSettings {
            epochs: plan.finetune_epochs,
            lr: plan.finetune_lr,
            momentum: plan.momentum,
            schedule: LrSchedule::Cosine,
        },
        &mut stream,
    )
}

// ---------------------------------------------------------------------------
// orchestration

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub channels: usize,
    pub rank: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub mode: Mode,
    pub projection: ProjectionSource,
    pub gamma: f64,
    pub two_round: bool,
    /// Layer groups trained together, in order.
    pub rounds: Vec<Vec<usize>>,
    pub layers: Vec<LayerOutcome>,
    pub projection_steps_total: usize,
    pub max_orthonormality_defect: f64,
    pub perturbations: u64,
    pub relaxation_epochs: usize,
    pub relaxation_first_loss: Option<f64>,
    pub relaxation_last_loss: Option<f64>,
    pub finetune_epochs: usize,
    pub teacher_hash: String,
    pub original: CostReport,
    pub compressed: CostReport,
    pub flops_pct: f64,
    pub param_pct: f64,
    pub peak_mem_pct: f64,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub network: Network,
    /// The network after relaxation, before any fine-tuning.
    pub before_finetune: Network,
    /// Projections applied, by layer (as folded).
    pub projections: BTreeMap<usize, Tensor>,
    pub report: CompressionReport,
}

fn pct(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        100.0
    } else {
        100.0 * a / b
    }
}

/// Splits layers for the two-round schedule: inside each residual block
/// with more than one compressed layer, 1st, 3rd, ... go to round one and
/// 2nd, 4th, ... to round two. Everything else trains in round one.
pub fn two_round_split(net: &Network, layers: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut per_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &l in layers {
        if let Some((block, _)) = net.block_position(l) {
            per_block.entry(block).or_default().push(l);
        }
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &l in layers {
        match net.block_position(l) {
            Some((block, _)) if per_block[&block].len() > 1 => {
                let ordinal = per_block[&block].iter().position(|&x| x == l).expect("member");
                if ordinal % 2 == 0 {
                    first.push(l);
                } else {
                    second.push(l);
                }
            }
            _ => first.push(l),
        }
    }
    (first, second)
}

/// Runs the whole pipeline described by `plan` on a copy of `net`.
pub fn compress_network(
    net: &Network,
    plan: &CompressionPlan,
    data: &Dataset,
    norm: &Normalization,
) -> Result<Compressed> {
    let ranks = plan.ranks(net)?;
    let teacher = TeacherSnapshot::new(net);
    let mut student = net.clone();
    let planned: Vec<usize> = net
        .conv_order()
        .into_iter()
        .filter(|l| ranks.contains_key(l))
        .collect();
    // keeping every channel is the identity projection; the layer is left alone
    let order: Vec<usize> = planned
        .iter()
        .copied()
        .filter(|l| ranks[l] < net.convs[*l].spec.c_out)
        .collect();
    let settings = ProjectionSettings::from_plan(plan);
    let mut stream = DataStream::new(data, *norm, plan.batch_size, mix(plan.seed, 3));
    let mut logs: Vec<ProjectionLog> = Vec::new();
    let mut rounds: Vec<Vec<usize>> = Vec::new();
    let mut applied: BTreeMap<usize, Tensor> = BTreeMap::new();

    let random_p = |layer: usize, base: &Network| -> Result<Tensor> {
        let c = base.convs[layer].spec.c_out;
        Ok(proxy::random_orthonormal(c, ranks[&layer], mix(plan.seed, 2000 + layer as u64))?.to_tensor())
    };

    match (plan.projection, plan.mode) {
        (ProjectionSource::Random, _) => {
            for &l in &order {
                let p = random_p(l, &student)?;
                fold_into(&mut student, l, &p)?;
                applied.insert(l, p);
            }
            rounds.push(order.clone());
        }
        (ProjectionSource::Optimized, Mode::SingleLayer) => {
            // each layer against the untouched network, folded afterwards
            for &l in &order {
                let mut proxies = BTreeMap::from([(l, new_proxy(net, l, ranks[&l], plan)?)]);
                let sites = recon_sites(net, &[l], &BTreeSet::from([l]))?;
                logs.push(optimize_projection(net, &teacher, &mut proxies, &BTreeMap::new(), &sites, &settings, &mut stream)?);
                applied.extend(projections_of(&mut proxies)?);
                rounds.push(vec![l]);
            }
            for &l in &order {
                fold_into(&mut student, l, &applied[&l])?;
            }
        }
        (ProjectionSource::Optimized, Mode::CascadedGreedy) => {
            for &l in &order {
                let mut proxies = BTreeMap::from([(l, new_proxy(&student, l, ranks[&l], plan)?)]);
                let projected = applied.keys().copied().chain([l]).collect();
                let sites = recon_sites(&student, &[l], &projected)?;
                logs.push(optimize_projection(&student, &teacher, &mut proxies, &BTreeMap::new(), &sites, &settings, &mut stream)?);
                let p = projections_of(&mut proxies)?.remove(&l).expect("trained");
                fold_into(&mut student, l, &p)?;
                applied.insert(l, p);
                rounds.push(vec![l]);
            }
        }
        (ProjectionSource::Optimized, Mode::Simultaneous) => {
            let groups = if plan.two_round {
                let (a, b) = two_round_split(net, &order);
                [a, b].into_iter().filter(|g| !g.is_empty()).collect()
            } else {
                vec![order.clone()]
            };
            for group in groups {
                let mut proxies = BTreeMap::new();
                for &l in &group {
                    proxies.insert(l, new_proxy(net, l, ranks[&l], plan)?);
                }
                let supervised: Vec<usize> = applied.keys().copied().chain(group.iter().copied()).collect();
                let sites = recon_sites(net, &supervised, &supervised.iter().copied().collect())?;
                logs.push(optimize_projection(net, &teacher, &mut proxies, &applied, &sites, &settings, &mut stream)?);
                applied.extend(projections_of(&mut proxies)?);
                rounds.push(group);
            }
            for &l in &order {
                fold_into(&mut student, l, &applied[&l])?;
            }
        }
    }

    let relax = kernel_relaxation(&mut student, &teacher, &order, plan, data, norm)?;
    let before_finetune = student.clone();
    finetune(&mut student, &teacher, &order, plan, data, norm)?;
    teacher.verify()?;

    let original = cost::count_costs(net, 1)?;
    let compressed = cost::count_costs(&student, 1)?;
    let layer_loss = |l: usize, first: bool| {
        logs.iter().find(|g| g.layers.contains(&l)).and_then(|g| {
            if first {
                g.losses.first().copied()
            } else {
                g.losses.last().copied()
            }
        })
    };
    let report = CompressionReport {
        mode: plan.mode,
        projection: plan.projection,
        gamma: plan.gamma,
        two_round: plan.two_round,
        rounds,
        layers: planned
            .iter()
            .map(|&l| LayerOutcome {
                layer: l,
                channels: net.convs[l].spec.c_out,
                rank: ranks[&l],
                initial_loss: layer_loss(l, true),
                final_loss: layer_loss(l, false),
            })
            .collect(),
        projection_steps_total: logs.iter().map(|g| g.steps).sum(),
        max_orthonormality_defect: logs.iter().map(|g| g.max_orthonormality_defect).fold(0.0, f64::max),
        perturbations: logs.iter().map(|g| g.perturbations).sum(),
        relaxation_epochs: plan.relaxation_epochs,
        relaxation_first_loss: relax.first().copied(),
        relaxation_last_loss: relax.last().copied(),
        finetune_epochs: plan.finetune_epochs,
        teacher_hash: teacher.hash().to_string(),
        flops_pct: pct(compressed.flops as f64, original.flops as f64),
        param_pct: pct(compressed.param_count as f64, original.param_count as f64),
        peak_mem_pct: pct(
            compressed.peak_activation_bytes as f64,
            original.peak_activation_bytes as f64,
        ),
        original,
        compressed,
    };
    Ok(Compressed {
        network: student,
        before_finetune,
        projections: applied,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(0.25));
        let c = g.constant(Tensor::scalar(1.0));
        let m = mixture_loss(&mut g, &[a, b], c, 0.5).unwrap();
        assert_eq!(g.value(m).item(), 1.25);
        let z = g.constant(Tensor::scalar(0.0));
        let two = g.constant(Tensor::scalar(2.0));
        let m = mixture_loss(&mut g, &[z], two, 1.0).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let m = mixture_loss(&mut g, &[a, b], c, 0.0).unwrap();
        assert_eq!(g.value(m).item(), 0.75);
        assert!(matches!(mixture_loss(&mut g, &[a], c, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn reconstruction_basics() {
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        let s = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(reconstruction_error(&s, &t, false).unwrap(), 4.0);
        assert_eq!(reconstruction_error(&s, &s, true).unwrap(), 0.0);
        assert!(reconstruction_error(&s, &Tensor::zeros(&[1, 1, 2, 1]), false).is_err());
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let tv = g.constant(t.clone());
        let l = reconstruction_loss(&mut g, sv, tv, false).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
    }

    #[test]
    fn identity_fold_is_noop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let wn = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let p = Mat::identity(3).to_tensor();
        let (wo, bo, wi) = fold_kernels(&w, &b, &p, &wn).unwrap();
        assert_eq!((wo, bo, wi), (w, b, wn));
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let w1 = Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let b1 = Tensor::new(&[1], vec![-1.0]).unwrap();
        let (wo, bo, wi) = fold_kernels(&w1, &b1, &one, &w1).unwrap();
        assert_eq!((wo, bo, wi), (w1.clone(), b1, w1));
    }

    #[test]
    fn plan_text_round_trip() {
        let text = "mode = simultaneous\ngamma = 0.5\ntwo_round = true\nlayer.all.keep_ratio = 0.5\nlayer.3.rank = 4\n";
        let plan = CompressionPlan::parse(text).unwrap();
        assert_eq!(plan.mode, Mode::Simultaneous);
        assert_eq!(plan.layers[&3], LayerTarget::Rank(4));
        assert_eq!(CompressionPlan::parse(&plan.to_text()).unwrap(), plan);
    }

    #[test]
    fn plan_errors_name_lines() {
        for (text, line) in [
            ("gamma = -1\n", 1),
            ("mode = cascaded_greedy\nlayer.2.keep_ratio = 1.5\n", 2),
            ("layer.x.rank = 2\n", 1),
            ("mode = greedy\n", 1),
            ("\nbogus = 1\n", 2),
        ] {
            match CompressionPlan::parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn keep_ratio_rounding() {
        assert_eq!(LayerTarget::KeepRatio(0.5).rank_for(16), 8);
        assert_eq!(LayerTarget::KeepRatio(0.01).rank_for(16), 1);
        assert_eq!(LayerTarget::KeepRatio(1.0).rank_for(5), 5);
    }
}
