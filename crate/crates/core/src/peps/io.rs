//! Binary model files.
//!
//! Layout (all integers little-endian `u32`, reals little-endian `f64`):
//!
//! ```text
//! "PEPS" | version | H | W | d
//! vertical bond table   (H+1)×W   up leg of (r, c); row H = down leg of last row
//! horizontal bond table H×(W+1)   left leg of (r, c); column W = right leg of last column
//! site tensors in raster order, each row-major over (up, left, down, right, phys)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Peps;
use crate::error::{PepsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PEPS";
pub const VERSION: u32 = 1;

pub fn write_peps<T: Scalar, W: Write>(p: &Peps<T>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, p.height() as u32, p.width() as u32, p.phys_dim() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let (vertical, horizontal) = p.bond_tables();
    for row in vertical.iter().chain(horizontal.iter()) {
        for &b in row {
            buf.extend_from_slice(&(b as u32).to_le_bytes());
        }
    }
    for site in p.sites() {
        for &x in site.data() {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PepsError::format(
                self.pos as u64,
                format!("truncated file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn read_peps<T: Scalar, R: Read>(mut r: R) -> Result<Peps<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| PepsError::format(0, format!("read failed: {e}")))?;
    decode(&bytes)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<Peps<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(PepsError::format(0, "bad magic, expected \"PEPS\""));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(PepsError::format(4, format!("unsupported version {version}")));
    }
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let d = cur.u32("physical dimension")? as usize;
    if h == 0 || w == 0 || d == 0 {
        return Err(PepsError::format(8, "zero grid or physical dimension"));
    }
    let mut vertical = vec![vec![0usize; w]; h + 1];
    for row in vertical.iter_mut() {
        for b in row.iter_mut() {
            *b = cur.u32("vertical bond table")? as usize;
        }
    }
    let mut horizontal = vec![vec![0usize; w + 1]; h];
    for row in horizontal.iter_mut() {
        for b in row.iter_mut() {
            *b = cur.u32("horizontal bond table")? as usize;
        }
    }
    let mut sites = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let shape = vec![
                vertical[r][c],
                horizontal[r][c],
                vertical[r + 1][c],
                horizontal[r][c + 1],
                d,
            ];
            let start = cur.pos as u64;
            let n: usize = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .filter(|&n| n > 0)
                .ok_or_else(|| PepsError::format(start, format!("invalid site shape {shape:?}")))?;
            let raw = cur.take(n.saturating_mul(8), "site tensor data")?;
            let data: Vec<T> = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| PepsError::format(start, e.to_string()))?;
            sites.push(t);
        }
    }
    if cur.pos != bytes.len() {
        return Err(PepsError::format(cur.pos as u64, "trailing bytes after last site"));
    }
    Peps::new(h, w, d, sites).map_err(|e| PepsError::format(20, e.to_string()))
}

pub fn save_peps<T: Scalar>(p: &Peps<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| PepsError::io(path, e))?;
    write_peps(p, BufWriter::new(f)).map_err(|e| PepsError::io(path, e))
}

pub fn load_peps<T: Scalar>(path: impl AsRef<Path>) -> Result<Peps<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| PepsError::io(path, e))?;
    read_peps(BufReader::new(f))
}

/// Whether a file starts with the model magic.
pub fn is_peps_file(path: impl AsRef<Path>) -> bool {
    let mut head = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| &head == MAGIC)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peps::{bars_stripes_peps, random_peps};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let p = bars_stripes_peps::<f64>(2);
        let mut buf = Vec::new();
        write_peps(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PEPS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        // 20 header bytes + 3x2 + 2x3 bond entries + 4 sites of 2*2*1*1*2 reals
        assert_eq!(buf.len(), 20 + 4 * 12 + 4 * 8 * 8);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let p = random_peps::<f64>(2, 2, 2, 2, 0);
        let mut buf = Vec::new();
        write_peps(&p, &mut buf).unwrap();
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            read_peps::<f64, _>(truncated),
            Err(PepsError::Format { .. })
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_peps::<f64, _>(&bad[..]), Err(PepsError::Format { offset: 0, .. })));
        let mut inconsistent = buf.clone();
        inconsistent[20] = 2; // top boundary leg of (0, 0)
        assert!(read_peps::<f64, _>(&inconsistent[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1usize..4, w in 1usize..4, d in 1usize..4, bond in 1usize..4, seed in 0u64..100) {
            let mut p = random_peps::<f64>(h, w, d, bond, seed);
            p.scale_site(0, 0, -1.0e-7);
            let mut buf = Vec::new();
            write_peps(&p, &mut buf).unwrap();
            let q: Peps<f64> = read_peps(&buf[..]).unwrap();
            prop_assert_eq!(&p, &q);
            let mut again = Vec::new();
            write_peps(&q, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
