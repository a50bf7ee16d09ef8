//! `ACEVC1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        6 bytes  "ACEVC1"
//! version      u32
//! fingerprint  u64      hash of model kind + architecture config
//! n_entries    u32
//! entry table  n × { name_len u16, name utf-8, dtype u8, ndim u8,
//!                    dims ndim × u64, offset u64, byte_len u64 }
//! data         raw arrays, offsets relative to the start of this section
//! crc32        u32      over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::adam::Adam;
use crate::error::NnError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ACEVC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32 { shape: Vec<usize>, values: Vec<f32> },
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl EntryData {
    fn dtype(&self) -> u8 {
        match self {
            EntryData::F32 { .. } => 0,
            EntryData::U8(_) => 1,
            EntryData::U64(_) => 2,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            EntryData::F32 { shape, .. } => shape.clone(),
            EntryData::U8(v) => vec![v.len()],
            EntryData::U64(v) => vec![v.len()],
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            EntryData::F32 { values, .. } => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            EntryData::U8(v) => v.clone(),
            EntryData::U64(v) => v.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub fingerprint: u64,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Corrupt("truncated header".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(fingerprint: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            fingerprint,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: EntryData) {
        self.entries.push(Entry {
            name: name.into(),
            data,
        });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.push(
            name,
            EntryData::F32 {
                shape: vec![t.rows(), t.cols()],
                values: t.data().to_vec(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.data)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>, NnError> {
        match self.get(name) {
            Some(EntryData::F32 { shape, values }) => {
                let (rows, cols) = match shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (1, *n),
                    _ => return Err(NnError::Corrupt(format!("entry {name} is not a matrix"))),
                };
                Ok(Tensor::from_vec(rows, cols, values.clone()))
            }
            Some(_) => Err(NnError::Corrupt(format!("entry {name} is not f32"))),
            None => Err(NnError::MissingEntry(name.to_string())),
        }
    }

    pub fn bytes_entry(&self, name: &str) -> Result<&[u8], NnError> {
        match self.get(name) {
            Some(EntryData::U8(v)) => Ok(v),
            Some(_) => Err(NnError::Corrupt(format!("entry {name} is not u8"))),
            None => Err(NnError::MissingEntry(name.to_string())),
        }
    }

    pub fn u64_entry(&self, name: &str) -> Result<&[u64], NnError> {
        match self.get(name) {
            Some(EntryData::U64(v)) => Ok(v),
            Some(_) => Err(NnError::Corrupt(format!("entry {name} is not u64"))),
            None => Err(NnError::MissingEntry(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let payloads: Vec<Vec<u8>> = self.entries.iter().map(|e| e.data.bytes()).collect();
        let mut offset = 0u64;
        for (e, bytes) in self.entries.iter().zip(&payloads) {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype());
            let shape = e.data.shape();
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for bytes in &payloads {
            out.extend_from_slice(bytes);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NnError> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(NnError::BadMagic);
        }
        if buf.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
            return Err(NnError::Checksum);
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(NnError::Checksum);
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let fingerprint = r.u64()?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| NnError::Corrupt("entry name is not utf-8".into()))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            let byte_len = r.u64()? as usize;
            table.push((name, dtype, shape, offset, byte_len));
        }
        let data = &body[r.pos..];
        let mut entries = Vec::with_capacity(n);
        for (name, dtype, shape, offset, byte_len) in table {
            let bytes = data
                .get(offset..offset + byte_len)
                .ok_or_else(|| NnError::Corrupt(format!("entry {name} out of bounds")))?;
            let numel: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    if byte_len != numel * 4 {
                        return Err(NnError::Corrupt(format!("entry {name} length mismatch")));
                    }
                    EntryData::F32 {
                        shape,
                        values: bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    }
                }
                1 => EntryData::U8(bytes.to_vec()),
                2 => EntryData::U64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(NnError::Corrupt(format!("unknown dtype {other}"))),
            };
            entries.push(Entry { name, data });
        }
        Ok(Self {
            version,
            fingerprint,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn check_fingerprint(&self, expected: u64) -> Result<(), NnError> {
        if self.fingerprint != expected {
            return Err(NnError::Fingerprint {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }
}

/// Packs parameters, optimizer moments and embedded config text.
pub fn pack_model(
    fingerprint: u64,
    config: &str,
    store: &ParamStore<f32>,
    adam: &Adam,
) -> Container {
    let mut c = Container::new(fingerprint);
    c.push("config", EntryData::U8(config.as_bytes().to_vec()));
    c.push("adam.step", EntryData::U64(vec![adam.step]));
    for (i, p) in store.params().iter().enumerate() {
        c.push_tensor(format!("param/{}", p.name), &p.value);
        c.push_tensor(format!("adam.m/{}", p.name), &adam.m[i]);
        c.push_tensor(format!("adam.v/{}", p.name), &adam.v[i]);
    }
    c
}

/// Restores values into a freshly built store with the same layout.
pub fn unpack_model(c: &Container, store: &mut ParamStore<f32>) -> Result<Adam, NnError> {
    let mut adam = Adam::new(store);
    adam.step = *c
        .u64_entry("adam.step")?
        .first()
        .ok_or_else(|| NnError::Corrupt("empty adam.step".into()))?;
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let load = |prefix: &str, expect: (usize, usize)| -> Result<Tensor<f32>, NnError> {
            let t = c.tensor(&format!("{prefix}/{}", p.name))?;
            if t.shape() != expect {
                return Err(NnError::Shape(format!(
                    "{prefix}/{} stored as {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    expect
                )));
            }
            Ok(t)
        };
        let shape = p.value.shape();
        let (value, m, v) = (
            load("param", shape)?,
            load("adam.m", shape)?,
            load("adam.v", shape)?,
        );
        p.value = value;
        adam.m[i] = m;
        adam.v[i] = v;
    }
    Ok(adam)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(0xfeed);
        c.push("config", EntryData::U8(b"a = 1".to_vec()));
        c.push_tensor(
            "w",
            &Tensor::from_vec(2, 2, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]),
        );
        c.push("step", EntryData::U64(vec![7]));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let w = back.tensor("w").unwrap();
        assert_eq!(w.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_and_bitflips_fail_checksum() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, NnError::Checksum), "{err:?}");
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(
            Container::from_bytes(&flipped),
            Err(NnError::Checksum)
        ));
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(NnError::BadMagic)
        ));

        let mut c = sample();
        c.version = 9;
        let err = Container::from_bytes(&c.to_bytes()).unwrap_err();
        assert!(matches!(err, NnError::Version { found: 9, .. }));
    }

    #[test]
    fn fingerprint_check() {
        let c = sample();
        assert!(c.check_fingerprint(0xfeed).is_ok());
        assert!(matches!(
            c.check_fingerprint(1),
            Err(NnError::Fingerprint {
                expected: 1,
                found: 0xfeed
            })
        ));
    }
}
