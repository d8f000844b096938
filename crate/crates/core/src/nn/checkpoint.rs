//! Self-describing checkpoint container.
//!
//! ```text
//! b"OODCKPT1" | u32 version | u32 header_len | JSON header | u32 count | tensor * count
//! ```
//!
//! Tensors use the [`crate::tensor`] wire format with `f64` payloads, so a
//! save/load round trip is bit-exact. The same container carries fitted
//! detector statistics; the header says what the tensors mean.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OODCKPT1";
const VERSION: u32 = 1;
const MAX_HEADER: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(header: serde_json::Value, tensors: Vec<Tensor>) -> Self {
        Self { header, tensors }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            t.write_to(w, DType::F64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "not a checkpoint: expected magic {:?}, found {:?}",
                String::from_utf8_lossy(CHECKPOINT_MAGIC),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(r)? as usize;
        if len > MAX_HEADER {
            return Err(Error::Format(format!("checkpoint header of {len} bytes is implausible")));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(Tensor::read_from(r)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub train_accuracy: Option<f64>,
    #[serde(default)]
    pub test_accuracy: Option<f64>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    kind: String,
    spec: NetworkSpec,
    metadata: TrainingMetadata,
}

pub fn save_network(path: &Path, net: &Network, metadata: &TrainingMetadata) -> Result<()> {
    let header = NetworkHeader {
        kind: "network".into(),
        spec: net.spec().clone(),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_value(header).map_err(|e| Error::Format(e.to_string()))?;
    let tensors = net.params().iter().map(|p| (**p).clone()).collect();
    Container::new(header, tensors).save(path)
}

pub fn load_network(path: &Path) -> Result<(Network, TrainingMetadata)> {
    let c = Container::load(path)?;
    let header: NetworkHeader =
        serde_json::from_value(c.header).map_err(|e| Error::Format(format!("network header: {e}")))?;
    if header.kind != "network" {
        return Err(Error::Format(format!(
            "checkpoint holds a {:?}, not a network",
            header.kind
        )));
    }
    Ok((Network::with_params(header.spec, c.tensors)?, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zoo;

    #[test]
    fn network_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = Network::new(zoo::desk_cnn(7)).unwrap();
        let meta = TrainingMetadata {
            dataset: "unit".into(),
            seed: 7,
            ..Default::default()
        };
        save_network(&path, &net, &meta).unwrap();
        let (back, m) = load_network(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back, net);
        let x = Tensor::full(zoo::DIGIT_SHAPE.to_vec(), 0.3);
        let (a, b) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
        for (u, v) in a.logits.data().iter().zip(b.logits.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let c = Container::new(serde_json::json!({"kind": "x"}), vec![Tensor::scalar(1.0)]);
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        assert_eq!(Container::read_from(&mut bytes.as_slice()).unwrap(), c);
        assert!(Container::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'Z';
        let err = Container::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn wrong_param_shapes_are_rejected() {
        let spec = zoo::linear_encoder(0);
        assert!(Network::with_params(spec, vec![Tensor::zeros(vec![16, 255])]).is_err());
    }
}
