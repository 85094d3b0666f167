//! Named-array container:
//!
//! ```text
//! magic  b"REVNMRCK"
//! u32    version (1)
//! u32    array count
//! per array:
//!   u32 name length, UTF-8 name
//!   u32 rank, rank × u32 extents
//!   f32 values (product of extents)
//! ```
//!
//! All integers and floats little-endian.

use thiserror::Error;

use super::net::{InvertibleNet, NetConfig, STAGES};
use super::NetError;
use crate::numeric::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 8] = b"REVNMRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported version {found} at offset 8")]
    UnsupportedVersion { found: u32 },
    #[error("truncated at offset {offset}: {what} needs {needed} more bytes")]
    Truncated { offset: usize, what: &'static str, needed: usize },
    #[error("array name at offset {offset} is not UTF-8")]
    BadName { offset: usize },
    #[error("array '{name}' at offset {offset} has rank {rank}")]
    BadRank { name: String, offset: usize, rank: usize },
    #[error("{count} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("array '{name}' has {found} values for shape {shape:?}")]
    DataLength { name: String, shape: Vec<usize>, found: usize },
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(CheckpointError::DataLength {
                name: a.name.clone(),
                shape: a.shape.clone(),
                found: a.data.len(),
            });
        }
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &e in &a.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let rest = &self.bytes[self.offset..];
        if rest.len() < n {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
                what,
                needed: n - rest.len(),
            });
        }
        self.offset += n;
        Ok(&rest[..n])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>, CheckpointError> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = r.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_offset = r.offset;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::BadName { offset: name_offset })?
            .to_owned();
        let rank_offset = r.offset;
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::BadRank {
                name,
                offset: rank_offset,
                rank,
            });
        }
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.saturating_mul(4), "array data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.offset != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            offset: r.offset,
            count: bytes.len() - r.offset,
        });
    }
    Ok(arrays)
}

impl InvertibleNet {
    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        self.parameter_names()
            .into_iter()
            .zip(self.parameters())
            .map(|(name, p)| NamedArray {
                name,
                shape: p.shape().to_vec(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect()
    }

    /// Copies arrays into this net; every parameter must appear once with its
    /// exact shape.
    pub fn load_named_arrays(&mut self, arrays: &[NamedArray]) -> Result<(), NetError> {
        let names = self.parameter_names();
        for a in arrays {
            if !names.contains(&a.name) {
                return Err(NetError::UnexpectedArray(a.name.clone()));
            }
        }
        let mut values = Vec::with_capacity(names.len());
        for (name, p) in names.iter().zip(self.parameters()) {
            let mut found = arrays.iter().filter(|a| &a.name == name);
            let a = found.next().ok_or_else(|| NetError::MissingArray(name.clone()))?;
            if found.next().is_some() {
                return Err(NetError::DuplicateArray(name.clone()));
            }
            if a.shape != p.shape() {
                return Err(NetError::ArrayShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: a.shape.clone(),
                });
            }
            values.push(Tensor::new(&a.shape, a.data.iter().map(|&v| f64::from(v)).collect())?);
        }
        for (p, v) in self.parameters_mut().zip(values) {
            *p = crate::numeric::Parameter::new(v);
        }
        Ok(())
    }

    /// Rebuilds a net, inferring its configuration from array names and shapes.
    pub fn from_named_arrays(arrays: &[NamedArray]) -> Result<Self, NetError> {
        let blocks_per_stage = (0..)
            .take_while(|b| arrays.iter().any(|a| a.name == format!("stage0.block{b}.conv1.weight")))
            .count();
        if blocks_per_stage == 0 {
            return Err(NetError::MissingArray("stage0.block0.conv1.weight".into()));
        }
        let last = format!("stage{}.block0.conv1.weight", STAGES - 1);
        let hidden_cap = arrays
            .iter()
            .find(|a| a.name == last)
            .and_then(|a| a.shape.first().copied())
            .ok_or(NetError::MissingArray(last))?;
        let mut net = Self::zeroed(NetConfig {
            blocks_per_stage,
            hidden_cap,
        });
        net.load_named_arrays(arrays)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    fn sample() -> Vec<NamedArray> {
        vec![
            NamedArray {
                name: "a".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25, 0.0, -0.0],
            },
            NamedArray {
                name: "scalar".into(),
                shape: vec![],
                data: vec![7.0],
            },
        ]
    }

    #[test]
    fn layout_of_header() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"REVNMRCK");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        assert_eq!(bytes[20], b'a');
    }

    #[test]
    fn bitwise_round_trip() {
        let arrays = sample();
        let back = decode(&encode(&arrays).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in arrays.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn every_truncation_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }));
        assert!(err.to_string().contains("offset"));
    }

    #[test]
    fn header_corruption() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert_eq!(decode(&bytes), Err(CheckpointError::BadMagic));
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 2;
        assert_eq!(decode(&bytes), Err(CheckpointError::UnsupportedVersion { found: 2 }));
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(CheckpointError::TrailingBytes { .. })));
    }

    #[test]
    fn net_round_trip_is_bitwise() {
        let config = NetConfig {
            blocks_per_stage: 1,
            hidden_cap: 4,
        };
        let net = InvertibleNet::random(config, &mut RngStream::new(8));
        let bytes = encode(&net.to_named_arrays()).unwrap();
        let back = InvertibleNet::from_named_arrays(&decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.config(), config);
        for (a, b) in net.parameters().zip(back.parameters()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_net_names_array() {
        let small = InvertibleNet::zeroed(NetConfig {
            blocks_per_stage: 2,
            hidden_cap: 4,
        });
        let mut big = InvertibleNet::zeroed(NetConfig::default());
        let err = big.load_named_arrays(&small.to_named_arrays()).unwrap_err();
        assert!(err.to_string().contains("stage0.block0.conv1.weight"), "{err}");
    }
}
