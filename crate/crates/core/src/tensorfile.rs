//! Named-tensor container used by checkpoints and embedding exports.
//!
//! ```text
//! magic (4 bytes), u32 version (1), u32 entry count, then per entry in name order:
//!   u32 name length, name bytes (UTF-8), u8 dtype code, u32 rank,
//!   rank × u64 dims, little-endian payload
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub magic: [u8; 4],
    pub entries: BTreeMap<String, Entry>,
}

impl TensorFile {
    pub fn new(magic: [u8; 4]) -> Self {
        TensorFile { magic, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: TensorData) -> Result<()> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::DimMismatch { expected: dims.iter().product(), actual: data.len() });
        }
        self.entries.insert(name.to_string(), Entry { dims, data });
        Ok(())
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.insert(name, t.dims().to_vec(), data)
    }

    pub fn insert_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.insert(name, vec![bytes.len()], TensorData::U8(bytes.to_vec()))
    }

    pub fn insert_u64(&mut self, name: &str, values: &[u64]) -> Result<()> {
        self.insert(name, vec![values.len()], TensorData::U64(values.to_vec()))
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| FormatError::Corrupt(format!("missing entry {name}")).into())
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = match (&e.data, T::DTYPE) {
            (TensorData::F32(v), DType::F32) => v.iter().map(|&x| T::c(x as f64)).collect(),
            (TensorData::F64(v), DType::F64) => v.iter().map(|&x| T::c(x)).collect(),
            (d, want) => {
                return Err(
                    FormatError::Corrupt(format!("{name}: stored as {:?}, requested {want:?}", d.dtype())).into()
                )
            }
        };
        Ok(Tensor::new(e.dims.clone(), data)?)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.entry(name)?.data {
            TensorData::U8(v) => Ok(v),
            d => Err(FormatError::Corrupt(format!("{name}: expected U8, found {:?}", d.dtype())).into()),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.entry(name)?.data {
            TensorData::U64(v) => Ok(v),
            d => Err(FormatError::Corrupt(format!("{name}: expected U64, found {:?}", d.dtype())).into()),
        }
    }

    /// Entry names under `prefix`, with the prefix stripped.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.keys().filter_map(move |k| k.strip_prefix(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.write_u32::<LE>(TENSOR_FILE_VERSION).expect("vec write");
        out.write_u32::<LE>(self.entries.len() as u32).expect("vec write");
        for (name, e) in &self.entries {
            out.write_u32::<LE>(name.len() as u32).expect("vec write");
            out.extend_from_slice(name.as_bytes());
            out.push(e.data.dtype() as u8);
            out.write_u32::<LE>(e.dims.len() as u32).expect("vec write");
            for &d in &e.dims {
                out.write_u64::<LE>(d as u64).expect("vec write");
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.write_f32::<LE>(*x).expect("vec write")),
                TensorData::F64(v) => v.iter().for_each(|x| out.write_f64::<LE>(*x).expect("vec write")),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::U64(v) => v.iter().for_each(|x| out.write_u64::<LE>(*x).expect("vec write")),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let trunc = |what: &'static str| move |_| FormatError::Truncated(what);
        let mut found = [0u8; 4];
        r.read_exact(&mut found).map_err(trunc("magic"))?;
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found }.into());
        }
        let version = r.read_u32::<LE>().map_err(trunc("version"))?;
        if version != TENSOR_FILE_VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: TENSOR_FILE_VERSION }.into());
        }
        let count = r.read_u32::<LE>().map_err(trunc("entry count"))?;
        let mut file = TensorFile::new(magic);
        for _ in 0..count {
            let n = r.read_u32::<LE>().map_err(trunc("name"))? as usize;
            if n > remaining(&r) {
                return Err(FormatError::Truncated("name").into());
            }
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(trunc("name"))?;
            let name = String::from_utf8(name).map_err(|_| FormatError::Corrupt("entry name is not UTF-8".into()))?;
            let code = r.read_u8().map_err(trunc("dtype"))?;
            let dtype =
                DType::from_code(code).ok_or_else(|| FormatError::Corrupt(format!("{name}: dtype code {code}")))?;
            let rank = r.read_u32::<LE>().map_err(trunc("rank"))? as usize;
            if rank.saturating_mul(8) > remaining(&r) {
                return Err(FormatError::Truncated("dims").into());
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u64::<LE>().map_err(trunc("dims"))? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FormatError::Corrupt(format!("{name}: dims overflow")))?;
            if len.saturating_mul(dtype.width()) > remaining(&r) {
                return Err(FormatError::Truncated("payload").into());
            }
            let data = match dtype {
                DType::F32 => {
                    let mut v = vec![0f32; len];
                    r.read_f32_into::<LE>(&mut v).map_err(trunc("payload"))?;
                    TensorData::F32(v)
                }
                DType::F64 => {
                    let mut v = vec![0f64; len];
                    r.read_f64_into::<LE>(&mut v).map_err(trunc("payload"))?;
                    TensorData::F64(v)
                }
                DType::U8 => {
                    let mut v = vec![0u8; len];
                    r.read_exact(&mut v).map_err(trunc("payload"))?;
                    TensorData::U8(v)
                }
                DType::U64 => {
                    let mut v = vec![0u64; len];
                    r.read_u64_into::<LE>(&mut v).map_err(trunc("payload"))?;
                    TensorData::U64(v)
                }
            };
            if file.entries.insert(name.clone(), Entry { dims, data }).is_some() {
                return Err(FormatError::Corrupt(format!("duplicate entry {name}")).into());
            }
        }
        let rest = remaining(&r);
        if rest != 0 {
            return Err(FormatError::TrailingBytes(rest).into());
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, magic)
    }
}

fn remaining(r: &Cursor<&[u8]>) -> usize {
    r.get_ref().len() - r.position() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new(*b"TEST");
        f.insert_tensor("a.w", &Tensor::new(vec![2, 3], vec![1f32, -2.5, 3e-7, 0.0, 7.0, f32::MIN_POSITIVE]).unwrap())
            .unwrap();
        f.insert_tensor("b", &Tensor::vector(&[std::f64::consts::PI])).unwrap();
        f.insert_bytes("meta.config", b"{\"x\":1}").unwrap();
        f.insert_u64("meta.step", &[u64::MAX]).unwrap();
        f
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let bytes = f.to_bytes();
        let g = TensorFile::from_bytes(&bytes, *b"TEST").unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_bytes(), bytes);
        assert_eq!(g.tensor::<f32>("a.w").unwrap().data()[2], 3e-7);
        assert_eq!(g.u64s("meta.step").unwrap(), &[u64::MAX]);
        assert!(g.tensor::<f64>("a.w").is_err());
        assert!(g.bytes("missing").is_err());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(matches!(TensorFile::from_bytes(&bytes, *b"UATV"), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            TensorFile::from_bytes(&v, *b"TEST"),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));
        for cut in 0..bytes.len() {
            assert!(
                matches!(
                    TensorFile::from_bytes(&bytes[..cut], *b"TEST"),
                    Err(Error::Format(FormatError::Truncated(_)))
                ),
                "cut {cut}"
            );
        }
        let mut v = bytes.clone();
        v.extend_from_slice(&[1, 2]);
        assert!(matches!(TensorFile::from_bytes(&v, *b"TEST"), Err(Error::Format(FormatError::TrailingBytes(2)))));
    }

    #[test]
    fn insert_checks_length() {
        let mut f = TensorFile::new(*b"TEST");
        assert!(f.insert("x", vec![2, 2], TensorData::U8(vec![0; 3])).is_err());
    }
}
