//! NWA1 named-tensor archive.
//!
//! Little-endian layout: magic `NWA1`, `u32` version, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, `u8` rank, `rank` x `u32`
//! dims, `u8` dtype (0 = f32) and the row-major f32 payload. Tensors are
//! written in sorted-name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::io::write_atomic;
use crate::numerics::Tensor;
use crate::vit::{VitConfig, VitParams};

pub const MAGIC: [u8; 4] = *b"NWA1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("bad magic {0:02X?}")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated at byte {0}")]
    Truncated(usize),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unsupported dtype code {0} for tensor {1:?}")]
    UnsupportedDtype(u8, String),
    #[error("invalid tensor {0:?}: {1}")]
    BadTensor(String, String),
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered map from tensor name to f32 tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, rejecting names already present.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<(), ArchiveError> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(ArchiveError::BadTensor(name, "name longer than 65535 bytes".into()));
        }
        if t.ndim() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(ArchiveError::BadTensor(
                name,
                format!("shape {:?} not encodable", t.shape()),
            ));
        }
        if self.tensors.contains_key(&name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>, ArchiveError> {
        self.get(name)
            .ok_or_else(|| ArchiveError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(k, t)| 8 + k.len() + 4 * t.ndim() + 4 * t.len())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut arch = Self::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ArchiveError::BadTensor(format!("<at byte {name_at}>"), "name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(ArchiveError::UnsupportedDtype(dtype, name));
            }
            if shape.contains(&0) {
                return Err(ArchiveError::BadTensor(name, format!("zero dimension in {shape:?}")));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or(ArchiveError::Truncated(bytes.len()))?;
            let data: Vec<f32> = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ArchiveError::BadTensor(name.clone(), e.to_string()))?;
            arch.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(arch)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ArchiveError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn write_archive(arch: &WeightArchive, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    write_atomic(path.as_ref(), &arch.to_bytes())?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<WeightArchive, ArchiveError> {
    WeightArchive::from_bytes(&std::fs::read(path)?)
}

/// Every parameter under its canonical name.
pub fn params_to_archive(params: &VitParams<f32>) -> WeightArchive {
    let mut arch = WeightArchive::new();
    for (name, t) in params.names().into_iter().zip(params.tensors()) {
        arch.insert(name, t.clone()).expect("canonical names are unique");
    }
    arch
}

/// Rebuilds parameters for `cfg`, requiring every canonical name with the
/// expected shape. Extra tensors are ignored.
pub fn params_from_archive(arch: &WeightArchive, cfg: &VitConfig) -> Result<VitParams<f32>, ArchiveError> {
    let mut tensors = Vec::new();
    for (name, want) in cfg.param_shapes() {
        let t = arch.require(&name)?;
        if t.shape() != want.as_slice() {
            return Err(ArchiveError::ShapeMismatch {
                got: t.shape().to_vec(),
                name,
                want,
            });
        }
        tensors.push(t.clone());
    }
    VitParams::from_tensors(cfg, tensors).map_err(|e| ArchiveError::BadTensor("<model>".into(), e.to_string()))
}

pub fn save_checkpoint(params: &VitParams<f32>, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    write_archive(&params_to_archive(params), path)
}

pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &VitConfig) -> Result<VitParams<f32>, ArchiveError> {
    params_from_archive(&read_archive(path)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn empty_archive_is_twelve_bytes() {
        let b = WeightArchive::new().to_bytes();
        assert_eq!(b, [0x4E, 0x57, 0x41, 0x31, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(WeightArchive::from_bytes(&b).unwrap().is_empty());
    }

    #[test]
    fn scalar_layout() {
        let mut a = WeightArchive::new();
        a.insert("a", Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let want: Vec<u8> = [
            &b"NWA1"[..],
            &[1, 0, 0, 0],
            &[1, 0, 0, 0],
            &[1, 0],
            b"a",
            &[1],
            &[1, 0, 0, 0],
            &[0],
            &[0x00, 0x00, 0x00, 0x3F],
        ]
        .concat();
        assert_eq!(a.to_bytes(), want);
    }

    #[test]
    fn rank_zero_scalar_round_trips() {
        let mut a = WeightArchive::new();
        a.insert("s", Tensor::scalar(-3.25)).unwrap();
        let b = a.to_bytes();
        assert_eq!(b.len(), 12 + 2 + 1 + 1 + 1 + 4);
        assert_eq!(WeightArchive::from_bytes(&b).unwrap(), a);
    }

    #[test]
    fn sorted_order_on_disk() {
        let mut a = WeightArchive::new();
        a.insert("zeta", Tensor::zeros(&[1])).unwrap();
        a.insert("alpha", Tensor::zeros(&[1])).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[14..19], b"alpha");
    }

    #[test]
    fn random_round_trip_bitwise() {
        let mut rng = Rng::new(5);
        let mut a = WeightArchive::new();
        for i in 0..6 {
            let shape: Vec<usize> = (0..1 + rng.below(4)).map(|_| 1 + rng.below(5)).collect();
            let mut t = Tensor::randn(&shape, 1.0, &mut rng);
            t.data_mut()[0] = f32::from_bits(0x7FC0_0001);
            a.insert(format!("t{i}.μ"), t).unwrap();
        }
        let back = WeightArchive::from_bytes(&a.to_bytes()).unwrap();
        for ((n1, t1), (n2, t2)) in a.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert!(t1.bits_eq(t2));
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            WeightArchive::from_bytes(b"NWA2\x01\0\0\0\0\0\0\0"),
            Err(ArchiveError::BadMagic(_))
        ));
        assert!(matches!(
            WeightArchive::from_bytes(b"NWA1\x02\0\0\0\0\0\0\0"),
            Err(ArchiveError::UnsupportedVersion(2))
        ));
        let mut a = WeightArchive::new();
        a.insert("w", Tensor::zeros(&[3, 2])).unwrap();
        let b = a.to_bytes();
        for cut in [5, 11, 13, b.len() - 1] {
            assert!(matches!(
                WeightArchive::from_bytes(&b[..cut]),
                Err(ArchiveError::Truncated(_))
            ));
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(
            WeightArchive::from_bytes(&extra),
            Err(ArchiveError::TrailingBytes(1))
        ));

        let mut dup = b.clone();
        dup[8] = 2;
        dup.extend_from_slice(&b[12..]);
        assert!(matches!(WeightArchive::from_bytes(&dup), Err(ArchiveError::DuplicateName(n)) if n == "w"));
        assert!(matches!(
            a.insert("w", Tensor::zeros(&[1])),
            Err(ArchiveError::DuplicateName(_))
        ));

        let mut bad_dtype = b.clone();
        bad_dtype[12 + 2 + 1 + 1 + 8] = 1;
        assert!(matches!(
            WeightArchive::from_bytes(&bad_dtype),
            Err(ArchiveError::UnsupportedDtype(1, _))
        ));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = b"NWA1\x01\0\0\0\x01\0\0\0\x01\0w\x02".to_vec();
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.push(0);
        assert!(matches!(WeightArchive::from_bytes(&b), Err(ArchiveError::Truncated(_))));
    }
}
