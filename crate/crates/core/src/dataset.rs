//! Frozen point sets and their on-disk formats.
//!
//! Two formats are supported for both training data and sampler output:
//!
//! * CSV: one row per point, `d` columns, no header.
//! * Binary: the 8-byte magic `FLOWODE1`, then `n` and `d` as little-endian
//!   `u32`, then `n * d` little-endian `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"FLOWODE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// `.bin` selects the binary format; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => FileFormat::Binary,
            _ => FileFormat::Csv,
        }
    }
}

/// `n` points in `d` dimensions, row-major. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Arc<[f64]>,
    n: usize,
    d: usize,
}

impl Dataset {
    pub fn new(points: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if points.is_empty() || points.len() % d != 0 {
            return Err(Error::Format(format!(
                "{} values do not form a nonempty n x {d} matrix",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value at row {}, column {}",
                i / d,
                i % d
            )));
        }
        let n = points.len() / d;
        Ok(Dataset {
            points: points.into(),
            n,
            d,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        Dataset::new(flat, d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        match FileFormat::from_path(path) {
            FileFormat::Csv => Dataset::parse_csv(&bytes),
            FileFormat::Binary => Dataset::parse_binary(&bytes),
        }
    }

    pub fn parse_csv(bytes: &[u8]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(bytes);
        let mut flat = Vec::new();
        let mut d = None;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let width = record.len();
            match d {
                None => d = Some(width),
                Some(w) if w != width => {
                    return Err(Error::Format(format!(
                        "row {line} has {width} columns, expected {w}"
                    )))
                }
                _ => {}
            }
            for field in record.iter() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Format(format!("row {line}: cannot parse {field:?}")))?;
                flat.push(v);
            }
        }
        Dataset::new(flat, d.unwrap_or(0))
    }

    pub fn parse_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
            return Err(Error::Format("missing FLOWODE1 header".into()));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != n * d * 8 {
            return Err(Error::Format(format!(
                "header says {n} x {d} but body holds {} bytes",
                body.len()
            )));
        }
        let flat = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(flat, d)
    }

    pub fn to_bytes(&self, format: FileFormat) -> Vec<u8> {
        write_matrix_bytes(&self.points, self.d, format)
    }

    /// Writes atomically: the target only appears once fully written.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes(FileFormat::from_path(path)))
    }
}

/// Serializes a row-major matrix in either dataset format.
pub fn write_matrix_bytes(values: &[f64], d: usize, format: FileFormat) -> Vec<u8> {
    match format {
        FileFormat::Csv => {
            let mut out = Vec::with_capacity(values.len() * 24);
            for row in values.chunks_exact(d) {
                for (j, v) in row.iter().enumerate() {
                    if j > 0 {
                        out.push(b',');
                    }
                    // `{:?}` prints the shortest string that round-trips.
                    write!(out, "{v:?}").unwrap();
                }
                out.push(b'\n');
            }
            out
        }
        FileFormat::Binary => {
            let n = values.len() / d;
            let mut out = Vec::with_capacity(16 + values.len() * 8);
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&(n as u32).to_le_bytes());
            out.extend_from_slice(&(d as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".partial");
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let read = f.read(&mut buf)?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Dataset::new(vec![], 1).is_err());
        assert!(Dataset::new(vec![1.0, 2.0, 3.0], 2).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], 1).is_err());
        assert!(Dataset::new(vec![1.0], 0).is_err());
    }

    #[test]
    fn parses_csv_with_whitespace() {
        let d = Dataset::parse_csv(b"1.0, 2.5\n-3,4e-2\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.row(1), &[-3.0, 0.04]);
        assert!(Dataset::parse_csv(b"1,2\n3\n").is_err());
        assert!(Dataset::parse_csv(b"1,x\n").is_err());
    }

    #[test]
    fn binary_header_layout() {
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3).unwrap();
        let bytes = d.to_bytes(FileFormat::Binary);
        assert_eq!(&bytes[..8], b"FLOWODE1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 48);
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Dataset::parse_binary(&truncated).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(vec![0.1, -0.2, 0.3], 1).unwrap();
        for name in ["x.csv", "x.bin"] {
            let p = dir.path().join(name);
            d.save(&p).unwrap();
            assert_eq!(Dataset::load(&p).unwrap(), d);
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    proptest! {
        #[test]
        fn formats_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), d in 1usize..4) {
            let len = values.len() / d * d;
            prop_assume!(len > 0);
            let data = Dataset::new(values[..len].to_vec(), d).unwrap();
            for fmt in [FileFormat::Csv, FileFormat::Binary] {
                let bytes = data.to_bytes(fmt);
                let back = match fmt {
                    FileFormat::Csv => Dataset::parse_csv(&bytes).unwrap(),
                    FileFormat::Binary => Dataset::parse_binary(&bytes).unwrap(),
                };
                prop_assert_eq!(&back, &data);
            }
        }
    }
}
