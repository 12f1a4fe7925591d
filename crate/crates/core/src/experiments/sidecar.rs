//! Binary matrix container written next to fitted-posterior JSON files.
//!
//! Layout (little endian): magic `MVIB`, `u32` version, `u32` count, then per
//! matrix a `u32` name length, UTF-8 name, `u64` rows, `u64` cols and
//! `rows · cols` `f64` values in row-major order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVIB";
pub const VERSION: u32 = 1;

pub fn encode(matrices: &[(&str, &DMatrix<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for (name, m) in matrices {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("sidecar truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a matrix sidecar (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported sidecar version {version}")));
    }
    let count = r.u32("matrix count")? as usize;
    let mut out = Vec::new();
    for k in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("matrix {k} has a non-UTF-8 name")))?
            .to_owned();
        let rows = r.u64("rows")?;
        let cols = r.u64("cols")?;
        let cells = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .filter(|&b| b <= (bytes.len() - r.pos) as u64)
            .ok_or_else(|| Error::Format(format!("matrix '{name}' claims {rows}×{cols} values beyond the end of the data")))?;
        let data = r.take(cells as usize, "values")?;
        let values: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, DMatrix::from_row_slice(rows as usize, cols as usize, &values)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last matrix", bytes.len() - r.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI, -2.5]);
        let b = DMatrix::<f64>::zeros(0, 4);
        let bytes = encode(&[("a", &a), ("empty", &b)]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.iter().zip(a.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back[1].1.shape(), (0, 4));
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let good = encode(&[("a", &a)]);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut huge = good.clone();
        huge[17..25].copy_from_slice(&u64::MAX.to_le_bytes());
        for bytes in [&good[..good.len() - 1], &bad_magic[..], &huge[..], &[good.as_slice(), &[0]].concat()[..], &[][..]] {
            assert_eq!(decode(bytes).unwrap_err().exit_code(), 3);
        }
    }
}
