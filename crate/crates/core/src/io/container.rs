//! `OSCR` tensor container: a flat list of named little-endian arrays.
//!
//! ```text
//! "OSCR" | version u32 | count u32 | count × array
//! array: name_len u16 | name utf-8 | dtype u8 (0 = f32, 1 = u8) | rank u8 | dims u64×rank | payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{OscarError, Result};

pub const MAGIC: [u8; 4] = *b"OSCR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArray {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorArray {
    pub fn f32(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        Self::new(name.into(), dims, TensorData::F32(data))
    }

    pub fn u8(name: impl Into<String>, dims: Vec<u64>, data: Vec<u8>) -> Result<Self> {
        Self::new(name.into(), dims, TensorData::U8(data))
    }

    fn new(name: String, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        if name.len() > u16::MAX as usize {
            return Err(OscarError::format("array name longer than 65535 bytes"));
        }
        if dims.len() > u8::MAX as usize {
            return Err(OscarError::format("array rank above 255"));
        }
        let n = element_count(&dims)?;
        if n != data.len() as u64 {
            return Err(OscarError::format(format!(
                "array {name:?}: dims {dims:?} declare {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(TensorArray { name, dims, data })
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(OscarError::format(format!("array {:?} is not f32", self.name))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(OscarError::format(format!("array {:?} is not u8", self.name))),
        }
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| OscarError::format("array dims overflow"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    arrays: Vec<TensorArray>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[TensorArray] {
        &self.arrays
    }

    pub fn insert(&mut self, array: TensorArray) -> Result<()> {
        if self.get(&array.name).is_some() {
            return Err(OscarError::format(format!("duplicate array name {:?}", array.name)));
        }
        self.arrays.push(array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorArray> {
        self.get(name)
            .ok_or_else(|| OscarError::format(format!("missing array {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.tag());
            out.push(a.dims.len() as u8);
            for d in &a.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &a.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(OscarError::format("bad magic, not an OSCR container"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(OscarError::format(format!("unsupported container version {version}")));
        }
        let count = r.u32()?;
        let mut c = TensorContainer::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| OscarError::format("array name is not UTF-8"))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n = element_count(&dims)?;
            let width = match tag {
                0 => 4,
                1 => 1,
                t => return Err(OscarError::format(format!("unknown dtype tag {t}"))),
            };
            let size = n
                .checked_mul(width)
                .filter(|&s| s <= r.remaining() as u64)
                .ok_or_else(|| OscarError::format(format!("array {name:?} payload is truncated")))?;
            let payload = r.take(size as usize)?;
            let data = if tag == 0 {
                TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
            } else {
                TensorData::U8(payload.to_vec())
            };
            c.insert(TensorArray::new(name, dims, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(OscarError::format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(c)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(OscarError::format("unexpected end of container"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
