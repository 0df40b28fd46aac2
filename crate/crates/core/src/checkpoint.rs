//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "COTUNECK"
//! version  u32      currently 1
//! count    u32      number of entries
//! entries  repeated `count` times, in the stored order:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 × rank)
//!   payload  f64 × product(dims), little-endian IEEE-754
//! ```
//!
//! Entries are written in the order given, so a `BTreeMap` source yields a
//! byte-stable file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"COTUNECK";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_to(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path)?;
    read_from(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            write_to(&mut buf, &[("w".to_string(), &t)]).unwrap();
            let back = read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, "w");
            prop_assert_eq!(back[0].1.checksum(), t.checksum());
        }
    }

    #[test]
    fn rejects_bad_header() {
        assert!(read_from(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&9u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_from(buf.as_slice()), Err(Error::Format(_))));
    }
}
