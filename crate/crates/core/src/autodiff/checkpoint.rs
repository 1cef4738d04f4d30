//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DISEMCKP"
//! version  u32      FORMAT_VERSION
//! epoch    u64
//! sets     u32
//! per set:
//!   tensors u32
//!   per tensor:
//!     name_len u32, name utf-8 bytes
//!     rows u64, cols u64
//!     rows*cols f64 (IEEE-754 bits, little-endian)
//! ```
//!
//! Values are stored as raw bits, so a round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DISEMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub sets: Vec<ParameterSet>,
}

impl Checkpoint {
    pub fn new(epoch: u64, sets: Vec<ParameterSet>) -> Self {
        Checkpoint { epoch, sets }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.sets.len() as u32).to_le_bytes());
        for set in &self.sets {
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for (name, t) in set.iter() {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
                out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
                for x in t.data() {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let epoch = read_u64(&mut r)?;
        let n_sets = read_u32(&mut r)?;
        let mut sets = Vec::with_capacity(n_sets as usize);
        for _ in 0..n_sets {
            let n_tensors = read_u32(&mut r)?;
            let mut set = ParameterSet::new();
            for _ in 0..n_tensors {
                let name_len = read_u32(&mut r)? as usize;
                if name_len > r.len() {
                    return Err(Error::Checkpoint("truncated name".into()));
                }
                let mut name = vec![0u8; name_len];
                read_exact(&mut r, &mut name)?;
                let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
                let rows = read_u64(&mut r)? as usize;
                let cols = read_u64(&mut r)? as usize;
                let count = rows
                    .checked_mul(cols)
                    .filter(|&c| c.saturating_mul(8) <= r.len())
                    .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {name}")))?;
                let data = (0..count).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<_>>()?;
                set.insert(name, Tensor::new(rows, cols, data)?);
            }
            sets.push(set);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { epoch, sets })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of data".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = ParameterSet::new();
        a.insert_random("w_x", 5, 4, 1.0, &mut rng);
        a.insert("b", Tensor::row(vec![-0.0, f64::MIN_POSITIVE, 1e300]));
        let mut b = ParameterSet::new();
        b.insert_random("w", 2, 2, 1.0, &mut rng);
        Checkpoint::new(17, vec![a, b])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.epoch, 17);
        let bits = |c: &Checkpoint| -> Vec<u64> { c.sets.iter().flat_map(|s| s.values().map(f64::to_bits)).collect() };
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), c.to_bytes());
    }
}
