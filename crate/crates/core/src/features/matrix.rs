//! `SGM1` matrix files: magic, u32 rows, u32 cols, then rows×cols f32
//! row-major, all little-endian. An archive is a plain concatenation of such
//! records next to a JSON index of byte offsets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binfmt::{expect_magic, read_f32, read_u32, write_f32, write_u32};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                context: "matrix",
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: data.len().to_string(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, self.rows as u32)?;
        write_u32(w, self.cols as u32)?;
        for v in &self.data {
            write_f32(w, *v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let rows = read_u32(r, "rows")? as usize;
        let cols = read_u32(r, "cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| *n <= 1 << 30)
            .ok_or_else(|| Error::Format(format!("matrix shape {rows}x{cols} is implausible")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f32(r, "matrix data")?);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Matrix::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Byte length of the encoded record.
    pub fn encoded_len(&self) -> u64 {
        12 + 4 * self.data.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: String,
    pub offset: u64,
    pub rows: u32,
    pub cols: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveIndex {
    entries: Vec<ArchiveEntry>,
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".index.json");
    PathBuf::from(p)
}

/// Writes `path` (concatenated records) and `path.index.json`.
pub fn write_archive<'a, I>(path: &Path, items: I) -> Result<Vec<ArchiveEntry>>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    let mut offset = 0u64;
    let mut entries = Vec::new();
    for (id, m) in items {
        m.write_to(&mut w)?;
        entries.push(ArchiveEntry {
            id: id.to_string(),
            offset,
            rows: m.rows as u32,
            cols: m.cols as u32,
        });
        offset += m.encoded_len();
    }
    w.flush()?;
    let index = ArchiveIndex { entries };
    std::fs::write(index_path(path), serde_json::to_vec_pretty(&index)?)?;
    Ok(index.entries)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let index: ArchiveIndex = serde_json::from_slice(&std::fs::read(index_path(path))?)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::with_capacity(index.entries.len());
    for e in index.entries {
        r.seek(SeekFrom::Start(e.offset))?;
        let m = Matrix::read_from(&mut r)?;
        if m.rows != e.rows as usize || m.cols != e.cols as usize {
            return Err(Error::Format(format!("archive entry {} does not match its index", e.id)));
        }
        out.push((e.id, m));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SGM1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[32..36], &6.5f32.to_le_bytes());
        assert_eq!(buf.len() as u64, m.encoded_len());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let m = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Matrix::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(Matrix::read_from(&mut &buf[..15]), Err(Error::Format(_))));
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mels.bin");
        let a = Matrix::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Matrix::new(1, 3, vec![-1.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        write_archive(&path, [("a", &a), ("b", &b)]).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
    }

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (seed as f32) * 0.5 - i as f32 / 3.0).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            m.write_to(&mut buf).unwrap();
            prop_assert_eq!(Matrix::read_from(&mut buf.as_slice()).unwrap(), m);
        }
    }
}
