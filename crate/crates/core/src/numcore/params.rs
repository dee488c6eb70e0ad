//! Trainable parameter storage and its binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "ULOC"  version:u32  count:u32
//! repeated count times, sorted by path:
//!     path_len:u32  path:utf8  rows:u32  cols:u32  rows*cols × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ULOC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Path-addressed parameters with gradient buffers, iterated in path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Matrix) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(path));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.insert(path, Param { value, grad });
        Ok(())
    }

    /// Adds a `fan_in × fan_out` weight (`<path>.w`) and a zero bias (`<path>.b`).
    pub fn add_linear<R: Rng>(&mut self, path: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
        self.insert(format!("{path}.w"), Matrix::glorot(fan_in, fan_out, rng))?;
        self.insert(format!("{path}.b"), Matrix::zeros(1, fan_out))
    }

    pub fn get(&self, path: &str) -> Result<&Matrix> {
        self.entries
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Lookup(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Lookup(path.to_string()))
    }

    pub fn grad(&self, path: &str) -> Result<&Matrix> {
        self.entries
            .get(path)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Lookup(path.to_string()))
    }

    pub fn grad_mut(&mut self, path: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.grad)
            .ok_or_else(|| Error::Lookup(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Copies every parameter whose path starts with `prefix` from `other`.
    /// Returns the number of copied entries.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (path, src) in other.entries.range(prefix.to_string()..) {
            if !path.starts_with(prefix) {
                break;
            }
            let dst = self.get_mut(path)?;
            if dst.shape() != src.value.shape() {
                return Err(Error::Config(format!(
                    "{path}: shape {:?} does not match pretrained {:?}",
                    dst.shape(),
                    src.value.shape()
                )));
            }
            *dst = src.value.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Sub-store holding only the entries under the given prefixes.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { entries }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (path, p) in &self.entries {
            w.write_all(&(path.len() as u32).to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut raw = vec![0u8; len];
            read_exact(&mut r, &mut raw)?;
            let path = String::from_utf8(raw).map_err(|_| Error::Format("path is not UTF-8".into()))?;
            if last.as_ref().is_some_and(|l| *l >= path) {
                return Err(Error::Format(format!("entries not sorted at {path}")));
            }
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut b = [0u8; 8];
            for _ in 0..rows * cols {
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(path.clone(), Matrix::from_vec(rows, cols, data)?)?;
            last = Some(path);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of file".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_linear("b.layer", 3, 2, &mut rng).unwrap();
        s.add_linear("a.layer", 2, 4, &mut rng).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"ULOC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        // First entry is the lexicographically smallest path.
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + len], b"a.layer.b");
    }

    #[test]
    fn roundtrip() {
        let s = sample();
        assert_eq!(ParamStore::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let bytes = sample().to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(ParamStore::from_bytes(&long).is_err());
    }

    #[test]
    fn duplicate_and_missing_paths() {
        let mut s = sample();
        assert!(s.insert("a.layer.w", Matrix::zeros(1, 1)).is_err());
        assert!(matches!(s.get("nope"), Err(Error::Lookup(_))));
    }

    #[test]
    fn glorot_bounds() {
        let s = sample();
        let w = s.get("b.layer.w").unwrap();
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(s.get("b.layer.b").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn copy_prefix_checks_shapes() {
        let src = sample();
        let mut dst = sample();
        dst.get_mut("a.layer.w").unwrap().fill(9.0);
        assert_eq!(dst.copy_prefix_from(&src, "a.").unwrap(), 2);
        assert_eq!(dst.get("a.layer.w").unwrap(), src.get("a.layer.w").unwrap());

        let mut other = ParamStore::new();
        other.insert("a.layer.w", Matrix::zeros(5, 5)).unwrap();
        other.insert("a.layer.b", Matrix::zeros(1, 5)).unwrap();
        assert!(matches!(dst.copy_prefix_from(&other, "a."), Err(Error::Config(_))));
    }
}
