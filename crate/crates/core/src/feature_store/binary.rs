//! Little-endian binary dumps.
//!
//! ```text
//! PRB1 | u32 n_samples | u32 n_classes | n*c f32      probabilities
//! LGT1 | u32 n_samples | u32 n_classes | n*c f32      logits
//! LBL1 | u32 n         | n u32                        labels
//! SEG1 | u32 n_images  | per image: u32 h, u32 w, u32 c, h*w*c f32
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{LabelVector, LogitMatrix, ProbMatrix, SegImage, SegmentationDump};
use crate::error::{Error, Result};

pub const PROB_MAGIC: &[u8; 4] = b"PRB1";
pub const LOGIT_MAGIC: &[u8; 4] = b"LGT1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const SEG_MAGIC: &[u8; 4] = b"SEG1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: need {n} bytes for {what} at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_matrix_payload(bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize, Vec<f64>)> {
    let mut cur = Cursor::new(bytes);
    cur.magic(magic)?;
    let n = cur.u32("n_samples")?;
    let c = cur.u32("n_classes")?;
    let count = n
        .checked_mul(c)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let data = cur.f32s(count, "matrix payload")?;
    cur.finish()?;
    Ok((n, c, data))
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
    })?;
    w.write_all(&v.to_le_bytes())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_matrix<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    n: usize,
    c: usize,
    data: &[f64],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    write_u32(w, n)?;
    write_u32(w, c)?;
    write_f32s(w, data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn save_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn with_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| e.context(path.display()))
}

pub fn read_prob_matrix(bytes: &[u8]) -> Result<ProbMatrix> {
    let (n, c, data) = read_matrix_payload(bytes, PROB_MAGIC)?;
    ProbMatrix::new(n, c, data)
}

pub fn write_prob_matrix<W: Write>(w: &mut W, m: &ProbMatrix) -> std::io::Result<()> {
    write_matrix(w, PROB_MAGIC, m.n_samples(), m.n_classes(), m.as_slice())
}

pub fn load_prob_matrix(path: impl AsRef<Path>) -> Result<ProbMatrix> {
    let path = path.as_ref();
    with_path(read_prob_matrix(&read_file(path)?), path)
}

pub fn save_prob_matrix(path: impl AsRef<Path>, m: &ProbMatrix) -> Result<()> {
    save_with(path.as_ref(), |w| write_prob_matrix(w, m))
}

pub fn read_logit_matrix(bytes: &[u8]) -> Result<LogitMatrix> {
    let (n, c, data) = read_matrix_payload(bytes, LOGIT_MAGIC)?;
    LogitMatrix::new(n, c, data)
}

pub fn write_logit_matrix<W: Write>(w: &mut W, m: &LogitMatrix) -> std::io::Result<()> {
    write_matrix(w, LOGIT_MAGIC, m.n_samples(), m.n_classes(), m.as_slice())
}

pub fn load_logit_matrix(path: impl AsRef<Path>) -> Result<LogitMatrix> {
    let path = path.as_ref();
    with_path(read_logit_matrix(&read_file(path)?), path)
}

pub fn save_logit_matrix(path: impl AsRef<Path>, m: &LogitMatrix) -> Result<()> {
    save_with(path.as_ref(), |w| write_logit_matrix(w, m))
}

pub fn read_label_vector(bytes: &[u8]) -> Result<LabelVector> {
    let mut cur = Cursor::new(bytes);
    cur.magic(LABEL_MAGIC)?;
    let n = cur.u32("n")?;
    let mut labels = Vec::with_capacity(n.min(bytes.len() / 4));
    for _ in 0..n {
        labels.push(cur.u32("label")?);
    }
    cur.finish()?;
    Ok(LabelVector::new(labels))
}

pub fn write_label_vector<W: Write>(w: &mut W, labels: &LabelVector) -> std::io::Result<()> {
    w.write_all(LABEL_MAGIC)?;
    write_u32(w, labels.len())?;
    for &l in labels.as_slice() {
        write_u32(w, l)?;
    }
    Ok(())
}

pub fn load_label_vector(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    with_path(read_label_vector(&read_file(path)?), path)
}

pub fn save_label_vector(path: impl AsRef<Path>, labels: &LabelVector) -> Result<()> {
    save_with(path.as_ref(), |w| write_label_vector(w, labels))
}

pub fn read_segmentation_dump(bytes: &[u8]) -> Result<SegmentationDump> {
    let mut cur = Cursor::new(bytes);
    cur.magic(SEG_MAGIC)?;
    let n_images = cur.u32("n_images")?;
    let mut images = Vec::with_capacity(n_images.min(bytes.len() / 12));
    for k in 0..n_images {
        let h = cur.u32("height")?;
        let w = cur.u32("width")?;
        let c = cur.u32("n_classes")?;
        let count = h
            .checked_mul(w)
            .and_then(|p| p.checked_mul(c))
            .ok_or_else(|| Error::Format(format!("image {k} size overflows")))?;
        let pixels = cur.f32s(count, "pixel payload")?;
        images.push(SegImage::new(h, w, c, pixels).map_err(|e| e.context(format!("image {k}")))?);
    }
    cur.finish()?;
    SegmentationDump::new(images)
}

pub fn write_segmentation_dump<W: Write>(
    w: &mut W,
    dump: &SegmentationDump,
) -> std::io::Result<()> {
    w.write_all(SEG_MAGIC)?;
    write_u32(w, dump.n_images())?;
    for im in dump.images() {
        write_u32(w, im.height())?;
        write_u32(w, im.width())?;
        write_u32(w, im.n_classes())?;
        write_f32s(w, im.as_slice())?;
    }
    Ok(())
}

pub fn load_segmentation_dump(path: impl AsRef<Path>) -> Result<SegmentationDump> {
    let path = path.as_ref();
    with_path(read_segmentation_dump(&read_file(path)?), path)
}

pub fn save_segmentation_dump(path: impl AsRef<Path>, dump: &SegmentationDump) -> Result<()> {
    save_with(path.as_ref(), |w| write_segmentation_dump(w, dump))
}
