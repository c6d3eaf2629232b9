//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CAPCKPT\0"
//! version  u32
//! topology u64 length + JSON
//! params   u32 count, then tensors
//! momentum u32 count, then tensors
//! rng      u64 seed, u64 epoch
//! plan     u64 length + UTF-8 text (empty when absent)
//! proxies  u32 count, then (u64 layer, u64 seed, u64 perturbations, tensor X, tensor velocity)
//! ```
//!
//! A tensor is `u32` name length, name, `u32` rank, `u64` dims, then the
//! values as raw `f64` bit patterns, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::network::{Network, ParamId, Topology};
use crate::proxy::ProjectionProxy;
use crate::tensor::Tensor;
use crate::train::Momentum;

pub const MAGIC: &[u8; 8] = b"CAPCKPT\0";
pub const VERSION: u32 = 1;

/// Where the batch-order stream stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Momentum,
    pub rng: RngState,
    pub plan: Option<String>,
    pub proxies: BTreeMap<usize, ProjectionProxy>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            optimizer: Momentum::default(),
            rng: RngState::default(),
            plan: None,
            proxies: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(&serde_json::to_vec(&self.network.topology())?);
        let ids = self.network.param_ids();
        w.u32(ids.len() as u32);
        for id in ids {
            w.tensor(&id.name(), self.network.param(id));
        }
        w.u32(self.optimizer.velocity.len() as u32);
        for (id, v) in &self.optimizer.velocity {
            w.tensor(&id.name(), v);
        }
        w.u64(self.rng.seed);
        w.u64(self.rng.epoch);
        w.bytes(self.plan.as_deref().unwrap_or("").as_bytes());
        w.u32(self.proxies.len() as u32);
        for (&layer, p) in &self.proxies {
            w.u64(layer as u64);
            w.u64(p.seed());
            w.u64(p.perturbations());
            w.tensor("x", &p.x().to_tensor());
            w.tensor("velocity", &p.velocity().to_tensor());
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let topology: Topology = serde_json::from_slice(r.bytes()?)?;
        let mut network = Network::from_topology(&topology);
        network.validate()?;
        let count = r.u32()? as usize;
        let expected = network.param_ids();
        if count != expected.len() {
            return Err(Error::Format(format!(
                "{count} parameter tensors for a network with {}",
                expected.len()
            )));
        }
        for id in expected {
            let (name, t) = r.tensor()?;
            if name != id.name() {
                return Err(Error::Format(format!("expected {}, found {name}", id.name())));
            }
            let slot = network.param_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?} does not match topology {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let mut optimizer = Momentum::default();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            let id = ParamId::from_name(&name)
                .ok_or_else(|| Error::Format(format!("unknown optimizer entry {name}")))?;
            optimizer.velocity.insert(id, t);
        }
        let rng = RngState {
            seed: r.u64()?,
            epoch: r.u64()?,
        };
        let plan_text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Format("plan text is not UTF-8".into()))?;
        let plan = (!plan_text.is_empty()).then_some(plan_text);
        let mut proxies = BTreeMap::new();
        for _ in 0..r.u32()? {
            let layer = r.u64()? as usize;
            let seed = r.u64()?;
            let perturbations = r.u64()?;
            let x = Mat::from_tensor(&r.tensor()?.1)?;
            let v = Mat::from_tensor(&r.tensor()?.1)?;
            proxies.insert(layer, ProjectionProxy::from_parts(x, v, seed, perturbations)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            network,
            optimizer,
            rng,
            plan,
            proxies,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Ok((name, Tensor::new(&dims, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_small_vgg;

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0"), Err(Error::Format(_))));
        let mut b = Checkpoint::new(build_small_vgg(1.0, 3, 0).unwrap()).to_bytes().unwrap();
        b[8] = 99;
        match Checkpoint::from_bytes(&b) {
            Err(Error::Format(m)) => assert!(m.contains("version 99")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let b = Checkpoint::new(build_small_vgg(1.0, 3, 0).unwrap()).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn param_names_round_trip() {
        for id in [ParamId::ConvWeight(12), ParamId::ConvBias(0), ParamId::LinearWeight, ParamId::LinearBias] {
            assert_eq!(ParamId::from_name(&id.name()), Some(id));
        }
        assert_eq!(ParamId::from_name("conv.weight"), None);
    }
}
