//! Flat container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "hulm-tensors v1\n"
//! u64 header_len, header bytes (UTF-8 key-value document, may be empty)
//! u64 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank × u64 dims,
//!             numel × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "hulm-tensors v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FORMAT_VERSION.as_bytes())?;
        w.write_all(b"\n")?;
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = vec![0u8; FORMAT_VERSION.len() + 1];
        r.read_exact(&mut magic)?;
        if &magic[..FORMAT_VERSION.len()] != FORMAT_VERSION.as_bytes() || magic[FORMAT_VERSION.len()] != b'\n' {
            return Err(Error::data(format!(
                "not a tensor file (expected header {FORMAT_VERSION:?})"
            )));
        }
        let header_len = read_u64(&mut r)? as usize;
        let header = read_string(&mut r, header_len)?;
        let count = read_u64(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, values)?));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::data(format!("invalid UTF-8 in tensor file: {e}")))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            header in "[a-z = \n]{0,40}",
            vals in proptest::collection::vec(any::<f64>(), 0..30),
            name in "[a-z.0-9]{1,12}",
        ) {
            let n = vals.len();
            let file = TensorFile {
                header,
                tensors: vec![
                    (name, Tensor::new(vec![n], vals.clone()).unwrap()),
                    ("s".into(), Tensor::scalar(-0.0)),
                ],
            };
            let mut buf = Vec::new();
            file.write_to(&mut buf).unwrap();
            let back = TensorFile::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(&back.header, &file.header);
            for ((na, a), (nb, b)) in back.tensors.iter().zip(&file.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let err = TensorFile::read_from(&b"something else entirely"[..]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn starts_with_version_line() {
        let mut buf = Vec::new();
        TensorFile::default().write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"hulm-tensors v1\n"));
    }
}
