use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpeakerNet};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"YVEC";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

/// Position of the stateless RNG streams: every draw derives from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rng: RngState,
    /// Caller-supplied configuration text, stored verbatim.
    pub snapshot: String,
}

/// Parameters, optimizer velocity and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor<f32>)>,
    pub velocity: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(net: &SpeakerNet<f32>, state: &TrainState, train: &TrainConfig, snapshot: impl Into<String>) -> Self {
        let names = net.params.names();
        Self {
            header: CheckpointHeader {
                model: net.config.clone(),
                train: train.clone(),
                rng: RngState {
                    seed: train.seed,
                    epoch: state.epoch,
                    step: state.step,
                },
                snapshot: snapshot.into(),
            },
            params: names.iter().cloned().zip(net.params.tensors().iter().cloned()).collect(),
            velocity: names.iter().cloned().zip(state.velocity.iter().cloned()).collect(),
        }
    }

    /// Rebuilds the network and optimizer state.
    pub fn restore(&self) -> Result<(SpeakerNet<f32>, TrainState)> {
        let net = SpeakerNet::from_named(self.header.model.clone(), self.params.clone())?;
        let mut velocity = net.params.zeros_like();
        if !self.velocity.is_empty() {
            if self.velocity.len() != velocity.len() {
                return Err(Error::Checkpoint(format!(
                    "{} velocity blobs for {} parameters",
                    self.velocity.len(),
                    velocity.len()
                )));
            }
            for (name, t) in &self.velocity {
                let id = net
                    .params
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("velocity for unknown parameter {name}")))?;
                if t.shape() != velocity[id.index()].shape() {
                    return Err(Error::Checkpoint(format!("velocity {name} has shape {:?}", t.shape())));
                }
                velocity[id.index()] = t.clone();
            }
        }
        let state = TrainState {
            epoch: self.header.rng.epoch,
            step: self.header.rng.step,
            velocity,
        };
        Ok((net, state))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, header.len() as u32);
        buf.extend_from_slice(&header);
        put_u32(&mut buf, (self.params.len() + self.velocity.len()) as u32);
        let velocity = self.velocity.iter().map(|(n, t)| (format!("{VELOCITY_PREFIX}{n}"), t));
        for (name, t) in self.params.iter().map(|(n, t)| (n.clone(), t)).chain(velocity) {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Reader { buf, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a YVEC checkpoint".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = c.u32()?;
        let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = c.u32()?;
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for _ in 0..count {
            let nlen = c.u32()?;
            let name = String::from_utf8(c.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            let rank = c.u32()?;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let data = c
                .take(n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(p) => velocity.push((p.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Self {
            header,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {} of {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
