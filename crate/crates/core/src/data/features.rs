//! Binary per-frame feature store.
//!
//! Layout: the 5-byte magic `MHNF1`, then records back to back. Each record is
//! `u32 id_len`, the UTF-8 id, `u32 F`, `u32 D_app`, `u32 D_mot`, then
//! `F * D_app` appearance values and `F * D_mot` motion values, all
//! little-endian `f32`. Every record in a file must share `D_app` and `D_mot`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{MhnError, Result};
use crate::sampling::FeatureRecord;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MHNF1";

pub struct FeatureWriter<W: Write> {
    inner: W,
    path: PathBuf,
    dims: Option<(usize, usize)>,
    written: usize,
}

impl FeatureWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| MhnError::io(path, e))?;
        FeatureWriter::new(BufWriter::new(file), path)
    }
}

impl<W: Write> FeatureWriter<W> {
    pub fn new(mut inner: W, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        inner.write_all(MAGIC).map_err(|e| MhnError::io(&path, e))?;
        Ok(FeatureWriter {
            inner,
            path,
            dims: None,
            written: 0,
        })
    }

    pub fn write(&mut self, record: &FeatureRecord) -> Result<()> {
        let dims = (record.app_dim(), record.mot_dim());
        match self.dims {
            Some(expected) if expected != dims => {
                return Err(MhnError::Contract(format!(
                    "record {} ({}) has widths {dims:?}, file uses {expected:?}",
                    self.written, record.video_id
                )))
            }
            _ => self.dims = Some(dims),
        }
        let id = record.video_id.as_bytes();
        let mut buf = Vec::with_capacity(
            16 + id.len() + 4 * (record.appearance.numel() + record.motion.numel()),
        );
        let header = [id.len(), record.frames(), dims.0, dims.1].map(|n| {
            u32::try_from(n).map_err(|_| {
                MhnError::Contract(format!("record {} field exceeds u32", record.video_id))
            })
        });
        for (i, n) in header.into_iter().enumerate() {
            buf.extend_from_slice(&n?.to_le_bytes());
            if i == 0 {
                buf.extend_from_slice(id);
            }
        }
        for v in record.appearance.data.iter().chain(&record.motion.data) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.inner
            .write_all(&buf)
            .map_err(|e| MhnError::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner
            .flush()
            .map_err(|e| MhnError::io(&self.path, e))?;
        Ok(self.inner)
    }
}

/// Writes all records to `path`.
pub fn write_features<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a FeatureRecord>,
) -> Result<()> {
    let mut w = FeatureWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}

/// Streaming reader; holds one record at a time.
pub struct FeatureReader<R: Read> {
    inner: R,
    path: PathBuf,
    offset: u64,
    /// Total byte length when known, used to reject impossible sizes before allocating.
    len: Option<u64>,
    index: usize,
    dims: Option<(usize, usize)>,
    failed: bool,
}

/// Opens a feature file for streaming.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| MhnError::io(path, e))?;
    let len = file.metadata().map_err(|e| MhnError::io(path, e))?.len();
    FeatureReader::new(BufReader::new(file), path, Some(len))
}

impl<R: Read> FeatureReader<R> {
    pub fn new(mut inner: R, path: impl Into<PathBuf>, len: Option<u64>) -> Result<Self> {
        let path = path.into();
        let mut magic = [0u8; 5];
        let got = read_full(&mut inner, &mut magic).map_err(|e| MhnError::io(&path, e))?;
        if got < magic.len() || &magic != MAGIC {
            return Err(MhnError::Format {
                path,
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected \"MHNF1\"",
                    String::from_utf8_lossy(&magic[..got])
                ),
            });
        }
        Ok(FeatureReader {
            inner,
            path,
            offset: MAGIC.len() as u64,
            len,
            index: 0,
            dims: None,
            failed: false,
        })
    }

    fn format_err(&self, offset: u64, message: String) -> MhnError {
        MhnError::Format {
            path: self.path.clone(),
            offset,
            message: format!("record {}: {message}", self.index),
        }
    }

    /// Fills `buf` or reports a truncation at the current offset.
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let got = read_full(&mut self.inner, buf).map_err(|e| MhnError::io(&self.path, e))?;
        if got < buf.len() {
            return Err(self.format_err(
                self.offset + got as u64,
                format!("truncated {what}: needed {} bytes, found {got}", buf.len()),
            ));
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn take_u32(&mut self, what: &str) -> Result<usize> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn check_room(&mut self, bytes: u64, what: &str) -> Result<()> {
        if let Some(len) = self.len {
            if self.offset.saturating_add(bytes) > len {
                return Err(self.format_err(
                    self.offset,
                    format!(
                        "truncated {what}: needs {bytes} bytes, {} remain",
                        len - self.offset
                    ),
                ));
            }
        }
        Ok(())
    }

    fn take_f32s(&mut self, rows: usize, cols: usize, what: &str) -> Result<Vec<f64>> {
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| {
                self.format_err(
                    self.offset,
                    format!("{what} size {rows} x {cols} overflows"),
                )
            })?;
        self.check_room(count as u64 * 4, what)?;
        let mut raw = vec![0u8; count * 4];
        self.take(&mut raw, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn read_record(&mut self) -> Result<Option<FeatureRecord>> {
        let start = self.offset;
        let mut first = [0u8; 4];
        let got =
            read_full(&mut self.inner, &mut first).map_err(|e| MhnError::io(&self.path, e))?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 {
            return Err(self.format_err(
                start,
                format!("truncated id length: needed 4 bytes, found {got}"),
            ));
        }
        self.offset += 4;
        let id_len = u32::from_le_bytes(first) as usize;
        self.check_room(id_len as u64, "video id")?;
        let mut id = vec![0u8; id_len];
        self.take(&mut id, "video id")?;
        let id = String::from_utf8(id)
            .map_err(|_| self.format_err(start + 4, "video id is not UTF-8".into()))?;
        let frames = self.take_u32("frame count")?;
        let dims_at = self.offset;
        let da = self.take_u32("appearance width")?;
        let dm = self.take_u32("motion width")?;
        if frames == 0 || da == 0 || dm == 0 {
            return Err(self.format_err(
                dims_at,
                format!("zero dimension (F={frames}, D_app={da}, D_mot={dm})"),
            ));
        }
        if let Some(expected) = self.dims {
            if expected != (da, dm) {
                return Err(self.format_err(
                    dims_at,
                    format!("widths ({da}, {dm}) disagree with the first record's {expected:?}"),
                ));
            }
        }
        self.dims = Some((da, dm));
        let app = self.take_f32s(frames, da, "appearance block")?;
        let mot = self.take_f32s(frames, dm, "motion block")?;
        let rec = FeatureRecord::new(
            id,
            Tensor::new(vec![frames, da], app)?,
            Tensor::new(vec![frames, dm], mot)?,
        )?;
        self.index += 1;
        Ok(Some(rec))
    }
}

impl<R: Read> Iterator for FeatureReader<R> {
    type Item = Result<FeatureRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, frames: usize, da: usize, dm: usize, base: f64) -> FeatureRecord {
        let app = (0..frames * da).map(|i| base + i as f64 * 0.5).collect();
        let mot = (0..frames * dm).map(|i| base - i as f64 * 0.25).collect();
        FeatureRecord::new(
            id,
            Tensor::new(vec![frames, da], app).unwrap(),
            Tensor::new(vec![frames, dm], mot).unwrap(),
        )
        .unwrap()
    }

    fn encode(records: &[FeatureRecord]) -> Vec<u8> {
        let mut w = FeatureWriter::new(Vec::new(), "mem").unwrap();
        for r in records {
            w.write(r).unwrap();
        }
        w.finish().unwrap()
    }

    fn decode(bytes: &[u8]) -> Vec<Result<FeatureRecord>> {
        match FeatureReader::new(bytes, "mem", Some(bytes.len() as u64)) {
            Ok(r) => r.collect(),
            Err(e) => vec![Err(e)],
        }
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let records = vec![rec("a", 3, 2, 4, 1.0), rec("clip-β", 5, 2, 4, -3.0)];
        let back: Vec<_> = decode(&encode(&records))
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(back, records);
    }

    #[test]
    fn layout_matches_description() {
        let bytes = encode(&[rec("ab", 1, 1, 1, 2.0)]);
        assert_eq!(&bytes[..5], b"MHNF1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..11], b"ab");
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 5 + 4 + 2 + 12 + 8);
        assert_eq!(&bytes[23..27], &2.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let err = decode(b"MHNF2....").pop().unwrap().unwrap_err();
        assert!(matches!(err, MhnError::Format { offset: 0, .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = encode(&[rec("a", 2, 3, 3, 0.0), rec("b", 2, 3, 3, 1.0)]);
        let cut = &bytes[..bytes.len() - 3];
        let out = decode(cut);
        assert_eq!(out.len(), 2);
        assert!(out[0].is_ok());
        let msg = out[1].as_ref().unwrap_err().to_string();
        assert!(
            msg.contains("record 1") && msg.contains("truncated"),
            "{msg}"
        );

        // Without a known length the reader still reports the truncation.
        let streamed: Vec<_> = FeatureReader::new(cut, "mem", None).unwrap().collect();
        assert!(streamed[1]
            .as_ref()
            .unwrap_err()
            .to_string()
            .contains("record 1"));
    }

    #[test]
    fn width_disagreement_is_rejected() {
        let mut bytes = encode(&[rec("a", 1, 2, 2, 0.0)]);
        let mut w = FeatureWriter::new(Vec::new(), "mem").unwrap();
        w.write(&rec("b", 1, 3, 2, 0.0)).unwrap();
        bytes.extend_from_slice(&w.finish().unwrap()[5..]);
        let out = decode(&bytes);
        let msg = out[1].as_ref().unwrap_err().to_string();
        assert!(msg.contains("disagree"), "{msg}");

        let mut w = FeatureWriter::new(Vec::new(), "mem").unwrap();
        w.write(&rec("a", 1, 2, 2, 0.0)).unwrap();
        assert!(w.write(&rec("b", 1, 3, 2, 0.0)).is_err());
    }

    #[test]
    fn absurd_sizes_fail_before_allocating() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        for n in [u32::MAX, u32::MAX, 1] {
            bytes.extend_from_slice(&n.to_le_bytes());
        }
        let err = decode(&bytes).pop().unwrap().unwrap_err();
        assert!(err.to_string().contains("appearance block"), "{err}");
    }
}
