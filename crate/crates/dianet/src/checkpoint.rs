//! Versioned binary container for model state and trace dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "DIA1"
//! u32    entry count
//! per entry: u32 id length, id bytes (UTF-8), u8 dtype (0 = f64),
//!            u32 rank, u64 * rank extents
//! payloads: for each entry in manifest order, numel f64 values (LE)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DIA1";
const DTYPE_F64: u8 = 0;

pub type Entry = (String, Vec<usize>, Vec<f64>);

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, shape, data) in entries {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Format(format!(
                "entry '{id}': shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for (_, _, data) in entries {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a DIA1 checkpoint".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("entry id is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("entry '{id}': unsupported dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        manifest.push((id, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (id, shape) in manifest {
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((id, shape, data));
    }
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payloads",
            r.buf.len() - r.pos
        )));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dia");
        let entries = vec![
            ("a.weight".to_string(), vec![2, 3], vec![1.5, -0.25, 0.0, f64::MIN_POSITIVE, 3.7, 9.0]),
            ("b.bias".to_string(), vec![1], vec![0.125]),
        ];
        write_entries(&path, &entries).unwrap();
        let back = read_entries(&path).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dia");
        let entries = vec![("x".to_string(), vec![4], vec![1.0, 2.0, 3.0, 4.0])];
        write_entries(&path, &entries).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_entries(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dia");
        fs::write(&path, b"NOPE____").unwrap();
        assert!(matches!(read_entries(&path), Err(Error::Format(_))));
    }
}
