//! Portable checkpoint container for named [`DenseNet`]s.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic        8 bytes   "ADOSECKP"
//! version      u32       currently 1
//! meta_len     u32       length of the metadata blob
//! metadata     meta_len  UTF-8 JSON object (free-form, may be "{}")
//! net_count    u32
//! per net:
//!   name_len   u16
//!   name       name_len  UTF-8
//!   layers     u32
//!   per layer: in u32, out u32, activation u8 (0 = identity, 1 = relu)
//! parameter blocks, nets and layers in header order:
//!   weight     out*in f32, row-major (row = output unit)
//!   bias       out f32
//! ```
//!
//! The file ends exactly after the last bias block.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, Dense, DenseNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADOSECKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub nets: Vec<(String, DenseNet)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            metadata,
            nets: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, net: DenseNet) {
        self.nets.push((name.into(), net));
    }

    pub fn get(&self, name: &str) -> Option<&DenseNet> {
        self.nets.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.nets.len() as u32).to_le_bytes());
        for (name, net) in &self.nets {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(net.depth() as u32).to_le_bytes());
            for layer in net.layers() {
                out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
                out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
                out.push(layer.activation.code());
            }
        }
        for (_, net) in &self.nets {
            for p in net.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let net_count = r.u32()? as usize;
        let mut topologies = Vec::with_capacity(net_count);
        for _ in 0..net_count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("net name is not UTF-8".into()))?
                .to_owned();
            let layers = r.u32()? as usize;
            let mut shapes = Vec::with_capacity(layers);
            for _ in 0..layers {
                let i = r.u32()? as usize;
                let o = r.u32()? as usize;
                let act = Activation::from_code(r.u8()?)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown activation in `{name}`")))?;
                shapes.push((i, o, act));
            }
            topologies.push((name, shapes));
        }
        let mut nets = Vec::with_capacity(net_count);
        for (name, shapes) in topologies {
            let mut layers = Vec::with_capacity(shapes.len());
            for (i, o, activation) in shapes {
                let weight = Array2::from_shape_vec((o, i), r.f32s(o * i)?).expect("sized");
                let bias = Array1::from(r.f32s(o)?);
                layers.push(Dense { weight, bias, activation });
            }
            let net = DenseNet::new(layers).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            nets.push((name, net));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, nets })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_layout_of_a_tiny_net() {
        let mut l = Dense::zeros(2, 1, Activation::Relu);
        l.weight[[0, 0]] = 1.0;
        l.weight[[0, 1]] = -2.0;
        l.bias[0] = 0.5;
        let mut ck = Checkpoint::new(serde_json::json!({}));
        ck.push("a", DenseNet::new(vec![l]).unwrap());
        let bytes = ck.to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"ADOSECKP");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"{}");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'a');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(1);
        for v in [1.0f32, -2.0, 0.5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ck = Checkpoint::new(serde_json::json!({"domains": 4}));
        ck.push("enc", DenseNet::mlp(&[5, 7, 3], Activation::Relu, Activation::Relu, &mut rng).unwrap());
        ck.push("head", DenseNet::mlp(&[3, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut ck = Checkpoint::new(serde_json::json!({}));
        ck.push("x", DenseNet::zeros(&[2, 2], Activation::Relu, Activation::Identity).unwrap());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
