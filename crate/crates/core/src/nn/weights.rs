//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "E2EPHYW\0"
//! version      u32
//! count        u32      number of named tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   values     product(dims) × f64 (IEEE-754), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::net::{Layer, LayerSpec, NetParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: [u8; 8] = *b"E2EPHYW\0";
pub const FORMAT_VERSION: u32 = 1;

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.tensors.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(truncated)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(WeightFile { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn param_name(prefix: &str, layer: usize, what: &str) -> String {
    format!("{prefix}.{layer}.{what}")
}

impl NetParams {
    /// Adds this network's tensors under `prefix` (`<prefix>.<layer>.weight|bias`).
    pub fn export(&self, prefix: &str, file: &mut WeightFile) {
        for (i, l) in self.layers().iter().enumerate() {
            file.insert(param_name(prefix, i, "weight"), l.weight.clone());
            if let Some(b) = &l.bias {
                file.insert(param_name(prefix, i, "bias"), b.clone());
            }
        }
    }

    /// Rebuilds a network with the given architecture from `file`.
    pub fn import(specs: &[LayerSpec], prefix: &str, file: &WeightFile) -> Result<Self> {
        let fetch = |name: String| {
            file.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                Ok(Layer {
                    spec,
                    weight: fetch(param_name(prefix, i, "weight"))?,
                    bias: if spec.has_bias() {
                        Some(fetch(param_name(prefix, i, "bias"))?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetParams::new(layers).map_err(|e| Error::Format(format!("{prefix}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::init_params;
    use crate::nn::net::Activation;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn net_round_trip_is_bit_exact() {
        let specs = [LayerSpec::embedding(12, 5), LayerSpec::dense(5, 3, Activation::Softmax)];
        let net = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut f = WeightFile::new();
        net.export("tx", &mut f);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let back = WeightFile::read_from(&mut buf.as_slice()).unwrap();
        let net2 = NetParams::import(&specs, "tx", &back).unwrap();
        assert_eq!(net, net2);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = Vec::new();
        WeightFile::new().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(WeightFile::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        let err = WeightFile::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"));
        assert!(WeightFile::read_from(&mut &buf[..10]).is_err());
    }

    #[test]
    fn import_reports_missing_tensor() {
        let specs = [LayerSpec::dense(2, 2, Activation::Linear)];
        let err = NetParams::import(&specs, "rx", &WeightFile::new()).unwrap_err();
        assert!(err.to_string().contains("rx.0.weight"));
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(vals in proptest::collection::vec(any::<f64>(), 1..40), name in "[a-z.]{1,12}") {
            let n = vals.len();
            let mut f = WeightFile::new();
            f.insert(name.clone(), Tensor::new(vec![n], vals.clone()).unwrap());
            let mut buf = Vec::new();
            f.write_to(&mut buf).unwrap();
            let back = WeightFile::read_from(&mut buf.as_slice()).unwrap();
            let t = back.get(&name).unwrap();
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }
}
