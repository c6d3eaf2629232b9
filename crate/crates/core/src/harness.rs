//! Run configuration and the end-to-end jobs behind the command line:
//! training, compression, evaluation, layer sweeps, ablation and gradient
//! checks. Every job is deterministic for a fixed seed.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{Checkpoint, RngState};
use crate::compress::{self, CompressionPlan, CompressionReport, Mode, ProjectionSource};
use crate::config::KvFile;
use crate::cost::{self, CostReport};
use crate::data::{self, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig, SuiteResult};
use crate::network::{self, Network, ResnetDepth};
use crate::train::{self, EpochMetrics, Momentum, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DataKind {
    SyntheticBlobs { classes: usize, seed: u64 },
    Cifar10Binary { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train_size: usize,
    pub test_size: usize,
    pub norm: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Arch {
    Vgg { width: f64 },
    Resnet(ResnetDepth),
}

/// Everything a run needs apart from the compression plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: Arch,
    pub train: TrainConfig,
    pub eval_batch: usize,
    pub sweep_layers: Option<Vec<usize>>,
    pub sweep_ratios: Vec<f64>,
    pub ablate_seeds: Vec<u64>,
    pub gradcheck: GradcheckConfig,
}

fn parse_triple(kv: &KvFile, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    match kv.list::<f64>(key)? {
        None => Ok(default),
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(v) => Err(Error::Parse {
            line: kv.line_of(key).unwrap_or(0),
            msg: format!("{key} needs 3 values, got {}", v.len()),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let cfg = Self::from_kv(&kv, seed_override)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, seed_override)
    }

    pub fn from_kv(kv: &KvFile, seed_override: Option<u64>) -> Result<Self> {
        let seed = match seed_override {
            Some(s) => {
                let _ = kv.get::<u64>("seed")?;
                s
            }
            None => kv.get_or("seed", 0u64)?,
        };
        let kind_name: String = kv.get_or("data.kind", "synthetic_blobs".to_string())?;
        let kind = match kind_name.as_str() {
            "synthetic_blobs" => DataKind::SyntheticBlobs {
                classes: kv.get_or("data.classes", 4)?,
                seed: kv.get_or("data.seed", 1)?,
            },
            "cifar10_binary" => DataKind::Cifar10Binary {
                path: kv.require::<String>("data.path")?.into(),
            },
            other => {
                return Err(Error::Parse {
                    line: kv.line_of("data.kind").unwrap_or(0),
                    msg: format!("unknown data.kind {other:?} (synthetic_blobs or cifar10_binary)"),
                })
            }
        };
        let default_norm = match kind {
            DataKind::SyntheticBlobs { .. } => Normalization {
                mean: [0.3; 3],
                std: [0.25; 3],
            },
            DataKind::Cifar10Binary { .. } => Normalization::CIFAR10,
        };
        let norm = Normalization {
            mean: parse_triple(kv, "data.mean", default_norm.mean)?,
            std: parse_triple(kv, "data.std", default_norm.std)?,
        };
        let arch_name: String = kv.get_or("model.arch", "vgg".to_string())?;
        let arch = match arch_name.as_str() {
            "vgg" => Arch::Vgg {
                width: kv.get_or("model.width", 2.0)?,
            },
            other => Arch::Resnet(other.parse().map_err(|_| Error::Parse {
                line: kv.line_of("model.arch").unwrap_or(0),
                msg: format!("unknown model.arch {other:?} (vgg, resnet18-lite, resnet56-lite)"),
            })?),
        };
        let gd = GradcheckConfig::default();
        Ok(RunConfig {
            seed,
            data: DataConfig {
                kind,
                train_size: kv.get_or("data.train_size", 512)?,
                test_size: kv.get_or("data.test_size", 256)?,
                norm,
            },
            arch,
            train: TrainConfig::from_kv(kv, seed)?,
            eval_batch: kv.get_or("eval.batch_size", 64)?,
            sweep_layers: kv.list("sweep.layers")?,
            sweep_ratios: kv
                .list("sweep.ratios")?
                .unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]),
            ablate_seeds: kv.list("ablate.seeds")?.unwrap_or_else(|| vec![0, 1, 2]),
            gradcheck: GradcheckConfig {
                seed,
                instances: kv.get_or("gradcheck.instances", gd.instances)?,
                ..gd
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        match self.data.kind {
            DataKind::SyntheticBlobs { classes, .. } => classes,
            DataKind::Cifar10Binary { .. } => 10,
        }
    }

    /// `(train, test)` splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data.kind {
            DataKind::SyntheticBlobs { classes, seed } => {
                let all = data::synthetic_blobs(self.data.train_size + self.data.test_size, *classes, *seed)?;
                Ok((
                    all.subset(0, self.data.train_size),
                    all.subset(self.data.train_size, self.data.test_size),
                ))
            }
            DataKind::Cifar10Binary { path } => {
                data::cifar10_binary(path, self.data.train_size, self.data.test_size)
            }
        }
    }

    pub fn build_model(&self, seed: u64) -> Result<Network> {
        match self.arch {
            Arch::Vgg { width } => network::build_small_vgg(width, self.num_classes(), seed),
            Arch::Resnet(depth) => network::build_small_resnet(depth, self.num_classes(), seed),
        }
    }
}

// ---------------------------------------------------------------------------
// train / eval

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train_set, test_set) = cfg.load_data()?;
    let mut net = cfg.build_model(cfg.seed)?;
    let mut opt = Momentum::default();
    let metrics = train::train(&mut net, &train_set, Some(&test_set), &cfg.data.norm, &cfg.train, &mut opt, 0)?;
    let mut checkpoint = Checkpoint::new(net);
    checkpoint.optimizer = opt;
    checkpoint.rng = RngState {
        seed: cfg.seed,
        epoch: cfg.train.epochs as u64,
    };
    Ok(TrainOutcome { checkpoint, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub param_hash: String,
    pub cost: CostReport,
}

pub fn run_eval(cfg: &RunConfig, net: &Network) -> Result<EvalReport> {
    let (_, test_set) = cfg.load_data()?;
    let (loss, accuracy) = train::evaluate(net, &test_set, &cfg.data.norm, cfg.eval_batch)?;
    Ok(EvalReport {
        samples: test_set.len(),
        loss,
        accuracy,
        param_hash: net.param_hash(),
        cost: cost::count_costs(net, 1)?,
    })
}

// ---------------------------------------------------------------------------
// compress

/// Headline numbers first, then absolute costs and the full pipeline report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressSummary {
    pub flops_pct: f64,
    pub param_pct: f64,
    pub peak_mem_pct: f64,
    pub acc_no_ft: f64,
    pub acc_ft: f64,
    pub base_acc: f64,
    pub finetune_epochs: usize,
    pub flops: u64,
    pub base_flops: u64,
    pub params: usize,
    pub base_params: usize,
    pub peak_activation_bytes: u64,
    pub base_peak_activation_bytes: u64,
    pub report: CompressionReport,
}

pub struct CompressOutcome {
    pub checkpoint: Checkpoint,
    pub summary: CompressSummary,
}

pub fn run_compress(cfg: &RunConfig, base: &Checkpoint, plan: &CompressionPlan) -> Result<CompressOutcome> {
    let (train_set, test_set) = cfg.load_data()?;
    let net = &base.network;
    let out = compress::compress_network(net, plan, &train_set, &cfg.data.norm)?;
    let acc = |n: &Network| train::evaluate(n, &test_set, &cfg.data.norm, cfg.eval_batch).map(|r| r.1);
    let base_acc = acc(net)?;
    let acc_no_ft = acc(&out.before_finetune)?;
    let acc_ft = if plan.finetune_epochs > 0 {
        acc(&out.network)?
    } else {
        acc_no_ft
    };
    let r = &out.report;
    let summary = CompressSummary {
        flops_pct: r.flops_pct,
        param_pct: r.param_pct,
        peak_mem_pct: r.peak_mem_pct,
        acc_no_ft,
        acc_ft,
        base_acc,
        finetune_epochs: plan.finetune_epochs,
        flops: r.compressed.flops,
        base_flops: r.original.flops,
        params: r.compressed.param_count,
        base_params: r.original.param_count,
        peak_activation_bytes: r.compressed.peak_activation_bytes,
        base_peak_activation_bytes: r.original.peak_activation_bytes,
        report: out.report.clone(),
    };
    let mut checkpoint = Checkpoint::new(out.network);
    checkpoint.rng = RngState {
        seed: plan.seed,
        epoch: 0,
    };
    checkpoint.plan = Some(plan.to_text());
    Ok(CompressOutcome { checkpoint, summary })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub layer: usize,
    pub ratio: f64,
    pub rank: usize,
    pub recon_error: f64,
    pub accuracy: f64,
}

pub const SWEEP_HEADER: &str = "layer,ratio,rank,recon_error,accuracy";

/// Spearman rank correlation (average ranks for ties). `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Single-layer compression of each listed layer at each keep ratio, no
/// relaxation. Reconstruction error is the normalized error at the layer's
/// reconstruction site on the held-out split.
pub fn run_sweep(cfg: &RunConfig, net: &Network, base_plan: &CompressionPlan) -> Result<Vec<SweepRow>> {
    let (train_set, test_set) = cfg.load_data()?;
    let layers = cfg.sweep_layers.clone().unwrap_or_else(|| net.compressible_layers());
    for &l in &layers {
        if let Some(p) = net.protection(l) {
            return Err(Error::Validation(format!("layer {l} is protected ({p:?})")));
        }
        if l >= net.convs.len() {
            return Err(Error::Validation(format!("layer {l} does not exist")));
        }
    }
    for &q in &cfg.sweep_ratios {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Validation(format!("sweep ratio {q} outside (0, 1]")));
        }
    }
    let mut ratios = cfg.sweep_ratios.clone();
    ratios.sort_by(f64::total_cmp);
    let mut layers_sorted = layers;
    layers_sorted.sort_unstable();
    let teacher = compress::TeacherSnapshot::new(net);
    let idx: Vec<usize> = (0..test_set.len()).collect();
    let (tx, ty) = test_set.batch(&idx, &cfg.data.norm);
    let targets = teacher.stage_outputs(&tx)?;
    let mut rows = Vec::new();
    for &layer in &layers_sorted {
        let site = net.recon_site(layer)?;
        for &ratio in &ratios {
            let plan = CompressionPlan {
                mode: Mode::SingleLayer,
                all_layers: None,
                layers: [(layer, compress::LayerTarget::KeepRatio(ratio))].into(),
                relaxation_epochs: 0,
                finetune_epochs: 0,
                gamma: 0.0,
                projection: ProjectionSource::Optimized,
                ..base_plan.clone()
            };
            let out = compress::compress_network(net, &plan, &train_set, &cfg.data.norm)?;
            let student = out.network;
            let mut g = crate::autodiff::Graph::new();
            let xv = g.constant(tx.clone());
            let params = student.record_params(&mut g, |_| false);
            let trace = student.forward(&mut g, xv, &params, &Default::default())?;
            let recon = compress::reconstruction_error(g.value(trace.stage_outputs[site]), &targets[site], true)?;
            let correct = train::argmax_rows(g.value(trace.logits))
                .iter()
                .zip(&ty)
                .filter(|(p, y)| p == y)
                .count();
            rows.push(SweepRow {
                layer,
                ratio,
                rank: out.report.layers[0].rank,
                recon_error: recon,
                accuracy: correct as f64 / ty.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// Spearman correlation between compression amount (`1 − ratio`) and
/// reconstruction error, per layer.
pub fn sweep_trends(rows: &[SweepRow]) -> Vec<(usize, f64)> {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.dedup();
    layers
        .into_iter()
        .map(|l| {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.layer == l)
                .map(|r| (1.0 - r.ratio, r.recon_error))
                .unzip();
            (l, spearman(&x, &y))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// The compressed architecture trained from a fresh initialization.
    FromScratch,
    /// Optimized projections, folded, no relaxation.
    ProjectionOnly,
    /// Random orthonormal projections followed by kernel relaxation.
    RandomRelax,
    /// Optimized projections followed by kernel relaxation.
    ProjectionRelax,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::FromScratch, Arm::ProjectionOnly, Arm::RandomRelax, Arm::ProjectionRelax];

    pub fn name(self) -> &'static str {
        match self {
            Arm::FromScratch => "from_scratch",
            Arm::ProjectionOnly => "projection_only",
            Arm::RandomRelax => "random_relax",
            Arm::ProjectionRelax => "projection_relax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: &'static str,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seeds: usize,
    pub base_acc: f64,
}

pub const ABLATION_HEADER: &str = "arm,mean_acc,std_acc,seeds,base_acc";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// `per_seed[arm][seed]` accuracies in [`Arm::ALL`] order.
    pub per_seed: Vec<Vec<f64>>,
}

impl Ablation {
    pub fn mean(&self, arm: Arm) -> f64 {
        self.rows.iter().find(|r| r.arm == arm.name()).map_or(f64::NAN, |r| r.mean_acc)
    }
}

fn arm_accuracy(
    cfg: &RunConfig,
    base: &Network,
    plan: &CompressionPlan,
    arm: Arm,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<f64> {
    let norm = &cfg.data.norm;
    let net = match arm {
        Arm::FromScratch => {
            let mut net = compress::apply_plan_shapes(base, plan)?;
            net.reinitialize(seed);
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            train::train(&mut net, train_set, None, norm, &tc, &mut Momentum::default(), 0)?;
            net
        }
        _ => {
            let (projection, relax) = match arm {
                Arm::ProjectionOnly => (ProjectionSource::Optimized, 0),
                Arm::RandomRelax => (ProjectionSource::Random, plan.relaxation_epochs.max(1)),
                _ => (ProjectionSource::Optimized, plan.relaxation_epochs.max(1)),
            };
            let p = CompressionPlan {
                projection,
                relaxation_epochs: relax,
                finetune_epochs: 0,
                seed,
                ..plan.clone()
            };
            compress::compress_network(base, &p, train_set, norm)?.network
        }
    };
    train::evaluate(&net, test_set, norm, cfg.eval_batch).map(|r| r.1)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// The four ablation arms over `cfg.ablate_seeds`, spread across at most
/// `threads` worker threads. Results do not depend on the thread count.
pub fn run_ablate(cfg: &RunConfig, base: &Network, plan: &CompressionPlan, threads: usize) -> Result<Ablation> {
    let (train_set, test_set) = cfg.load_data()?;
    let base_acc = train::evaluate(base, &test_set, &cfg.data.norm, cfg.eval_batch)?.1;
    let jobs: Vec<(usize, usize)> = (0..Arm::ALL.len())
        .flat_map(|a| (0..cfg.ablate_seeds.len()).map(move |s| (a, s)))
        .collect();
    let results = parallel_map(&jobs, threads, |&(a, s)| {
        arm_accuracy(cfg, base, plan, Arm::ALL[a], cfg.ablate_seeds[s], &train_set, &test_set)
    });
    let mut per_seed = vec![vec![0.0; cfg.ablate_seeds.len()]; Arm::ALL.len()];
    for (&(a, s), r) in jobs.iter().zip(results) {
        per_seed[a][s] = r?;
    }
    let rows = Arm::ALL
        .iter()
        .zip(&per_seed)
        .map(|(arm, accs)| {
            let (mean_acc, std_acc) = mean_std(accs);
            AblationRow {
                arm: arm.name(),
                mean_acc,
                std_acc,
                seeds: accs.len(),
                base_acc,
            }
        })
        .collect();
    Ok(Ablation { rows, per_seed })
}

/// Applies `f` to every job on up to `threads` scoped threads, keeping
/// the input order in the output.
pub fn parallel_map<T: Sync, R: Send>(jobs: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("every job ran")).collect()
}

// ---------------------------------------------------------------------------
// gradcheck and CSV helpers

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<SuiteResult>> {
    gradcheck::run_all(cfg)
}

pub const GRADCHECK_HEADER: &str = "suite,cases,degenerate_skipped,max_rel_err,passed";

/// Rows serialized under a fixed header.
pub fn to_csv<T: Serialize>(header: &str, rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!("{header}\n{}", String::from_utf8(body).expect("csv is utf-8")))
}

/// Human-readable pass/fail table.
pub fn gradcheck_table(results: &[SuiteResult]) -> String {
    let mut s = format!("{:<24}{:>7}{:>10}{:>14}  result\n", "suite", "cases", "skipped", "max_rel_err");
    for r in results {
        s.push_str(&format!(
            "{:<24}{:>7}{:>10}{:>14.3e}  {}\n",
            r.suite,
            r.cases,
            r.degenerate_skipped,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}
