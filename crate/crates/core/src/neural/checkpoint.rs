//! Binary checkpoint container.
//!
//! Layout (little-endian): `MMVSCKPT`, version byte, entry count `u32`, then
//! per entry `u16` name length, UTF-8 name, `u8` rank, `u32` dims and a `u64`
//! byte offset into the payload. The payload follows the manifest and holds
//! every tensor as `f32` in manifest (name) order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMVSCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy every tensor of `store` under `namespace/`.
    pub fn insert_store(&mut self, namespace: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.entries.insert(format!("{namespace}/{name}"), t.clone());
        }
    }

    /// All tensors under `namespace/`, with the prefix removed.
    pub fn store(&self, namespace: &str) -> ParamStore {
        let prefix = format!("{namespace}/");
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(&prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.entries.insert(name.to_string(), Tensor::new(vec![1], vec![v]).expect("one element"));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.entries.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(bad(format!("`{name}` is not a scalar"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        let count = u32::try_from(self.entries.len()).map_err(|_| bad("too many entries"))?;
        w.write_all(&count.to_le_bytes())?;
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("name `{name}` too long")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad(format!("`{name}` axis too large")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += 4 * t.len() as u64;
        }
        for t in self.entries.values() {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let magic: [u8; 8] = read_exact(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let [version] = read_exact::<_, 1>(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(read_exact(&mut r)?);
        let mut manifest = Vec::with_capacity(count as usize);
        let mut expected = 0u64;
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
            let [rank] = read_exact::<_, 1>(&mut r)?;
            if rank > 4 {
                return Err(bad(format!("`{name}` has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank)
                .map(|_| read_exact(&mut r).map(|b| u32::from_le_bytes(b) as usize))
                .collect::<Result<_>>()?;
            let offset = u64::from_le_bytes(read_exact(&mut r)?);
            if offset != expected {
                return Err(bad(format!("`{name}` has offset {offset}, expected {expected}")));
            }
            expected += 4 * shape.iter().product::<usize>() as u64;
            manifest.push((name, shape));
        }
        let mut entries = BTreeMap::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes).map_err(|_| bad(format!("payload of `{name}` is truncated")))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            if entries.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let mut ck = Checkpoint::new();
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.0, 1e-3]).unwrap());
        s.insert("a", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        ck.insert_store("param", &s);
        ck.insert_scalar("adam/step", 17.0);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.scalar("adam/step").unwrap(), 17.0);
        let p = back.store("param");
        assert_eq!(p.len(), 2);
        for (name, t) in s.iter() {
            for (x, y) in t.data().iter().zip(p.get(name).unwrap().data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("x", 1.0);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::read_from(&wrong[..]).is_err());
    }
}
