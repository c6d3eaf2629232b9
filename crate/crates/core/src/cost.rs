//! Parameter, FLOP and activation-memory accounting.
//!
//! FLOPs are counted as two per multiply-accumulate and only for
//! convolutions and the classifier; activations, pooling and residual
//! additions are free. Activation bytes assume [`ELEMENT_BYTES`] per value.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{ConvLayer, ConvSpec, Network, Stage};
use crate::tensor::conv_out_dim;

/// Bytes per stored activation value (double precision, as computed here).
pub const ELEMENT_BYTES: usize = 8;

pub const FLOP_CONVENTION: &str = "2*MAC";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: [usize; 3],
    pub params: usize,
    pub flops: u64,
    pub output_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub flop_convention: &'static str,
    pub batch: usize,
    pub element_bytes: usize,
    pub param_count: usize,
    pub flops: u64,
    /// Every feature map of one training step held at once (the backward
    /// pass needs them all): input plus the sum of all layer outputs.
    pub peak_activation_bytes: u64,
    /// Sequential inference with each tensor freed as soon as it is consumed.
    pub inference_peak_bytes: u64,
    pub layers: Vec<LayerCost>,
}

/// FLOPs of one convolution for a single image with an `h_out × w_out` output.
pub fn conv_flops(spec: &ConvSpec, h_out: usize, w_out: usize) -> u64 {
    2 * (spec.c_out * spec.c_in * spec.k * spec.k * h_out * w_out) as u64
}

struct Walker<'a> {
    net: &'a Network,
    batch: u64,
    layers: Vec<LayerCost>,
    /// bytes of tensors that must stay alive (residual block inputs)
    held: u64,
    inference_peak: u64,
}

impl Walker<'_> {
    fn bytes(&self, shape: [usize; 3]) -> u64 {
        self.batch * (shape[0] * shape[1] * shape[2] * ELEMENT_BYTES) as u64
    }

    fn record(&mut self, name: String, kind: &'static str, input: [usize; 3], out: [usize; 3], params: usize, flops: u64) {
        let in_b = self.bytes(input);
        let out_b = self.bytes(out);
        self.inference_peak = self.inference_peak.max(self.held + in_b + out_b);
        self.layers.push(LayerCost {
            name,
            kind,
            out_shape: out,
            params,
            flops: flops * self.batch,
            output_bytes: out_b,
        });
    }

    fn conv(&mut self, id: usize, x: [usize; 3]) -> [usize; 3] {
        let c: &ConvLayer = &self.net.convs[id];
        let s = c.spec;
        let out = [
            s.c_out,
            conv_out_dim(x[1], s.k, s.stride, s.pad),
            conv_out_dim(x[2], s.k, s.stride, s.pad),
        ];
        let params = c.weight.len() + c.bias.len();
        self.record(format!("conv{id}"), "conv", x, out, params, conv_flops(&s, out[1], out[2]));
        out
    }

    fn simple(&mut self, stage: &Stage, x: [usize; 3]) -> Result<[usize; 3]> {
        Ok(match stage {
            Stage::Conv(id) => self.conv(*id, x),
            Stage::Relu => {
                self.record("relu".into(), "relu", x, x, 0, 0);
                x
            }
            Stage::AvgPool(k) => {
                let out = [x[0], x[1] / k, x[2] / k];
                self.record(format!("avgpool{k}"), "avg_pool", x, out, 0, 0);
                out
            }
            Stage::GlobalAvgPool => {
                let out = [x[0], 1, 1];
                self.record("gap".into(), "global_avg_pool", x, out, 0, 0);
                out
            }
            Stage::Linear => {
                let l = &self.net.linear;
                let out = [l.d_out, 1, 1];
                let flops = 2 * (l.d_in * l.d_out) as u64;
                self.record("linear".into(), "linear", x, out, l.weight.len() + l.bias.len(), flops);
                out
            }
            Stage::Residual { body, shortcut } => {
                let in_b = self.bytes(x);
                self.held += in_b;
                let mut h = x;
                for s in body {
                    h = self.simple(s, h)?;
                }
                let body_b = self.bytes(h);
                self.held += body_b;
                let skip = match shortcut {
                    Some(id) => self.conv(*id, x),
                    None => x,
                };
                self.held -= in_b + body_b;
                if skip != h {
                    return Err(Error::Validation(format!(
                        "residual join mismatch {h:?} vs {skip:?}"
                    )));
                }
                // join reads body output and skip, writes the block output
                let skip_b = if shortcut.is_some() { self.bytes(skip) } else { 0 };
                self.held += skip_b;
                self.record("residual_add".into(), "residual_add", h, h, 0, 0);
                self.held -= skip_b;
                h
            }
        })
    }
}

/// Costs of `net` for a batch of `batch` images.
pub fn count_costs(net: &Network, batch: usize) -> Result<CostReport> {
    let mut w = Walker {
        net,
        batch: batch as u64,
        layers: Vec::new(),
        held: 0,
        inference_peak: 0,
    };
    let mut x = net.input;
    for stage in &net.stages {
        x = w.simple(stage, x)?;
    }
    let input_bytes = if net.stages.is_empty() { 0 } else { w.bytes(net.input) };
    let layers = w.layers;
    Ok(CostReport {
        flop_convention: FLOP_CONVENTION,
        batch,
        element_bytes: ELEMENT_BYTES,
        param_count: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        peak_activation_bytes: input_bytes + layers.iter().map(|l| l.output_bytes).sum::<u64>(),
        inference_peak_bytes: w.inference_peak,
        layers,
    })
}

/// Checks that every `(conv, rank)` names a compressible layer with
/// `1 ≤ rank ≤ c_out`.
pub fn validate_ranks(net: &Network, ranks: &BTreeMap<usize, usize>) -> Result<()> {
    for (&id, &r) in ranks {
        if id >= net.convs.len() {
            return Err(Error::Validation(format!("layer {id} does not exist")));
        }
        if let Some(p) = net.protection(id) {
            return Err(Error::Validation(format!("layer {id} is protected ({p:?})")));
        }
        let c = net.convs[id].spec.c_out;
        if r == 0 || r > c {
            return Err(Error::Validation(format!(
                "layer {id}: rank {r} outside 1..={c}"
            )));
        }
    }
    Ok(())
}

/// The compressed shape of `net`: each listed conv keeps `rank` output
/// channels and its successor reads `rank` input channels. Resized tensors
/// are zero; everything else keeps its values.
pub fn compressed_skeleton(net: &Network, ranks: &BTreeMap<usize, usize>) -> Result<Network> {
    validate_ranks(net, ranks)?;
    let mut out = net.clone();
    for (&id, &r) in ranks {
        let succ = net.successor(id).expect("validated layers have successors");
        let spec = &mut out.convs[id].spec;
        spec.c_out = r;
        let s = *spec;
        out.convs[id] = ConvLayer::zeros(s);
        let mut ns = out.convs[succ].spec;
        ns.c_in = r;
        out.convs[succ] = ConvLayer::zeros(ns);
    }
    Ok(out)
}

/// Factorization with reprojection: each listed conv produces `rank`
/// channels, followed by an extra `reproj_k × reproj_k` conv back to the
/// original width; successors are untouched. The classic channel
/// decomposition uses `reproj_k = 1`.
pub fn factorization_variant(
    net: &Network,
    ranks: &BTreeMap<usize, usize>,
    reproj_k: usize,
) -> Result<Network> {
    validate_ranks(net, ranks)?;
    if reproj_k == 0 || reproj_k.is_multiple_of(2) {
        return Err(Error::arg("reprojection kernel must be odd and positive"));
    }
    let mut out = net.clone();
    for (&id, &r) in ranks {
        let orig = net.convs[id].spec;
        out.convs[id] = ConvLayer::zeros(ConvSpec { c_out: r, ..orig });
        let new_id = out.convs.len();
        out.convs.push(ConvLayer::zeros(ConvSpec {
            c_in: r,
            c_out: orig.c_out,
            k: reproj_k,
            stride: 1,
            pad: reproj_k / 2,
        }));
        insert_after(&mut out.stages, id, new_id);
    }
    Ok(out)
}

fn insert_after(stages: &mut Vec<Stage>, id: usize, new_id: usize) -> bool {
    for i in 0..stages.len() {
        match &mut stages[i] {
            Stage::Conv(c) if *c == id => {
                stages.insert(i + 1, Stage::Conv(new_id));
                return true;
            }
            Stage::Residual { body, .. } => {
                if insert_after(body, id, new_id) {
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}

/// Sum of FLOPs over the layers whose names are listed.
pub fn flops_of(report: &CostReport, names: &[String]) -> u64 {
    report
        .layers
        .iter()
        .filter(|l| names.contains(&l.name))
        .map(|l| l.flops)
        .sum()
}
