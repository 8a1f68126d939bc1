//! Binary tensor serialization (`.mtsr` files).
//!
//! Layout, all multi-byte fields little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MTSR" (4D 54 53 52)
//! 4       4     format version, u32 (currently 1)
//! 8       1     dtype code, u8 (0 = f32)
//! 9       1     rank, u8 (always 4)
//! 10      16    dims, 4 x u32 (n, c, h, w)
//! 26      ...   payload, n*c*h*w f32 values, row-major NCHW
//! ```
//!
//! Matrices and vectors are stored rank-4 too: a `rows x cols` matrix as
//! `(rows, cols, 1, 1)`, a length-`k` vector as `(k, 1, 1, 1)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

const MAGIC: [u8; 4] = *b"MTSR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const RANK: u8 = 4;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor4) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, RANK])?;
    for d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32 range")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02X?}, expected {:02X?}",
            magic, MAGIC
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    if buf2[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", buf2[0])));
    }
    if buf2[1] != RANK {
        return Err(Error::Format(format!(
            "unsupported rank {}, expected {RANK}",
            buf2[1]
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        r.read_exact(&mut buf4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow element count")))?;
    let mut payload = vec![
        0u8;
        count.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("dims {dims:?} overflow payload size"))
        })?
    ];
    r.read_exact(&mut payload)?;
    // reject trailing garbage
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => return Err(Error::Format("trailing bytes after payload".into())),
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor4::from_vec(dims[0], dims[1], dims[2], dims[3], data)
        .map_err(|e| Error::Format(format!("inconsistent header: {e}")))
}

pub fn save_tensor(path: &Path, t: &Tensor4) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor4> {
    let file = File::open(path)?;
    read_tensor(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = Tensor4::from_vec(1, 2, 1, 1, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], &[0x4D, 0x54, 0x53, 0x52]);
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(buf[8], 0); // f32
        assert_eq!(buf[9], 4); // rank
        assert_eq!(&buf[10..14], &[1, 0, 0, 0]);
        assert_eq!(&buf[14..18], &[2, 0, 0, 0]);
        assert_eq!(buf.len(), 26 + 2 * 4);
        assert_eq!(&buf[26..30], &1.0f32.to_le_bytes());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let data: Vec<f32> = (0..24)
            .map(|i| ((i * 2654435761u64 as usize) as f32).sin() * 1e3)
            .collect();
        let t = Tensor4::from_vec(2, 3, 2, 2, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn special_values_roundtrip() {
        let t = Tensor4::from_vec(
            1,
            1,
            1,
            5,
            vec![0.0, -0.0, f32::NAN, f32::INFINITY, f32::MIN_POSITIVE],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(buf.as_slice()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let t = Tensor4::zeros(1, 1, 1, 1).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_tensor(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor4::zeros(1, 1, 2, 2).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(buf.as_slice()).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let t = Tensor4::zeros(1, 1, 1, 1).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.push(0);
        assert!(matches!(read_tensor(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_and_dtype_rejected() {
        let t = Tensor4::zeros(1, 1, 1, 1).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(read_tensor(v2.as_slice()), Err(Error::Format(_))));
        let mut d1 = buf.clone();
        d1[8] = 1;
        assert!(matches!(read_tensor(d1.as_slice()), Err(Error::Format(_))));
        let mut r3 = buf;
        r3[9] = 3;
        assert!(matches!(read_tensor(r3.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mtsr");
        let t = Tensor4::from_vec(1, 2, 3, 4, (0..24).map(|i| i as f32 * 0.5).collect()).unwrap();
        save_tensor(&path, &t).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
    }
}
