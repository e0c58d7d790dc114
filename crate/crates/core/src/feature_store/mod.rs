//! In-memory data model for exported predictions, labels and manifests.
//!
//! Dumps are stored on disk as little-endian `f32` and promoted to `f64` on
//! load. Ingestion validates but never repairs: a row that does not sum to one
//! is rejected rather than re-normalized.

mod binary;
mod csv_import;
mod manifest;

pub use binary::{
    load_label_vector, load_logit_matrix, load_prob_matrix, load_segmentation_dump,
    read_label_vector, read_logit_matrix, read_prob_matrix, read_segmentation_dump,
    save_label_vector, save_logit_matrix, save_prob_matrix, save_segmentation_dump,
    write_label_vector, write_logit_matrix, write_prob_matrix, write_segmentation_dump,
    LABEL_MAGIC, LOGIT_MAGIC, PROB_MAGIC, SEG_MAGIC,
};
pub use csv_import::{read_label_csv, read_logit_csv, read_prob_csv};
pub use manifest::{
    load_manifest, Checkpoint, CheckpointEntry, CheckpointId, CheckpointRecord, Manifest,
    ManifestFile, TargetPredictions, Task,
};

use crate::error::{Error, Result};

/// Row-sum tolerance for classification probability dumps.
pub const PROB_ROW_TOLERANCE: f64 = 1e-4;
/// Row-sum tolerance for segmentation pixel probabilities.
pub const SEG_ROW_TOLERANCE: f64 = 1e-3;

/// N×C matrix of per-sample class probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    n_samples: usize,
    n_classes: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    pub fn new(n_samples: usize, n_classes: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(n_samples, n_classes, data.len(), "probability matrix")?;
        validate_prob_rows(&data, n_classes, PROB_ROW_TOLERANCE)?;
        Ok(ProbMatrix {
            n_samples,
            n_classes,
            data,
        })
    }

    /// Builds a matrix from a list of equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let (n, c, data) = flatten_rows(rows)?;
        Self::new(n, c, data)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n_classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Index of the largest probability in row `i`; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Copies the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> ProbMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_classes);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        ProbMatrix {
            n_samples: indices.len(),
            n_classes: self.n_classes,
            data,
        }
    }
}

/// N×C matrix of unnormalized classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    n_samples: usize,
    n_classes: usize,
    data: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(n_samples: usize, n_classes: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(n_samples, n_classes, data.len(), "logit matrix")?;
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite logit {} at row {}, column {}",
                data[k],
                k / n_classes,
                k % n_classes
            )));
        }
        Ok(LogitMatrix {
            n_samples,
            n_classes,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let (n, c, data) = flatten_rows(rows)?;
        Self::new(n, c, data)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n_classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Dense integer class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>) -> Self {
        LabelVector { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn select(&self, indices: &[usize]) -> LabelVector {
        LabelVector::new(indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Checks that the labels pair with a matrix of the given shape.
    pub fn validate_against(&self, n_samples: usize, n_classes: usize) -> Result<()> {
        if self.labels.len() != n_samples {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                self.labels.len(),
                n_samples
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= n_classes) {
            return Err(Error::Validation(format!(
                "label {} at index {} is out of range for {} classes",
                self.labels[i], i, n_classes
            )));
        }
        Ok(())
    }
}

/// One image of per-pixel class probabilities, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegImage {
    height: usize,
    width: usize,
    n_classes: usize,
    pixels: Vec<f64>,
}

impl SegImage {
    pub fn new(height: usize, width: usize, n_classes: usize, pixels: Vec<f64>) -> Result<Self> {
        let n_pixels = height
            .checked_mul(width)
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        check_shape(n_pixels, n_classes, pixels.len(), "segmentation image")?;
        validate_prob_rows(&pixels, n_classes, SEG_ROW_TOLERANCE)?;
        Ok(SegImage {
            height,
            width,
            n_classes,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.pixels[p * self.n_classes..(p + 1) * self.n_classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pixels
    }
}

/// A batch of segmentation outputs sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationDump {
    images: Vec<SegImage>,
}

impl SegmentationDump {
    pub fn new(images: Vec<SegImage>) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Validation("segmentation dump has no images".into()));
        };
        let c = first.n_classes;
        if let Some(k) = images.iter().position(|im| im.n_classes != c) {
            return Err(Error::Validation(format!(
                "image {} has {} classes, image 0 has {}",
                k, images[k].n_classes, c
            )));
        }
        Ok(SegmentationDump { images })
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_classes(&self) -> usize {
        self.images[0].n_classes
    }

    pub fn images(&self) -> &[SegImage] {
        &self.images
    }

    /// All pixels of all images stacked into one probability matrix.
    pub fn to_prob_matrix(&self) -> ProbMatrix {
        let data: Vec<f64> = self
            .images
            .iter()
            .flat_map(|im| im.pixels.iter().copied())
            .collect();
        ProbMatrix {
            n_samples: data.len() / self.n_classes(),
            n_classes: self.n_classes(),
            data,
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn check_shape(n_samples: usize, n_classes: usize, len: usize, what: &str) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::Validation(format!("{what} has no samples")));
    }
    if n_classes < 2 {
        return Err(Error::Validation(format!(
            "{what} needs at least 2 classes, got {n_classes}"
        )));
    }
    if n_samples.checked_mul(n_classes) != Some(len) {
        return Err(Error::Shape(format!(
            "{what} of {n_samples}x{n_classes} given {len} values"
        )));
    }
    Ok(())
}

fn flatten_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<(usize, usize, Vec<f64>)> {
    let c = rows.first().map_or(0, |r| r.as_ref().len());
    let mut data = Vec::with_capacity(rows.len() * c);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != c {
            return Err(Error::Shape(format!(
                "row {i} has {} columns, expected {c}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Ok((rows.len(), c, data))
}

/// Entries must be finite and in [0, 1]; rows must sum to one within `tol`.
/// Reports the first bad entry, or else the row with the worst sum.
fn validate_prob_rows(data: &[f64], n_classes: usize, tol: f64) -> Result<()> {
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite probability {} at row {}, column {}",
            data[k],
            k / n_classes,
            k % n_classes
        )));
    }
    if let Some(k) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation(format!(
            "probability {} outside [0, 1] at row {}, column {}",
            data[k],
            k / n_classes,
            k % n_classes
        )));
    }
    let mut worst: Option<(usize, f64)> = None;
    for (i, row) in data.chunks_exact(n_classes).enumerate() {
        let sum: f64 = row.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev > tol && worst.is_none_or(|(_, s)| dev > (s - 1.0).abs()) {
            worst = Some((i, sum));
        }
    }
    match worst {
        Some((i, sum)) => Err(Error::Validation(format!(
            "row {i} sums to {sum} (tolerance {tol})"
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_valid_rows() {
        let m = ProbMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap();
        assert_eq!(m.n_samples(), 3);
        assert_eq!(m.n_classes(), 2);
        assert_eq!(m.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_row_sum() {
        let err = ProbMatrix::from_rows(&[[0.5, 0.5], [0.6, 0.6]]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("row 1") && msg.contains("1.2"), "{msg}");
    }

    #[test]
    fn reports_worst_row_first_on_ties() {
        let err =
            ProbMatrix::from_rows(&[[0.5, 0.4], [0.5, 0.7], [0.5, 0.7], [0.5, 0.5]]).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        assert!(ProbMatrix::from_rows(&[[f64::NAN, 1.0]]).is_err());
        assert!(ProbMatrix::from_rows(&[[f64::INFINITY, 0.0]]).is_err());
        assert!(ProbMatrix::from_rows(&[[1.5, -0.5]]).is_err());
        assert!(LogitMatrix::from_rows(&[[1.0, f64::NAN]]).is_err());
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(ProbMatrix::new(0, 2, vec![]).is_err());
        assert!(ProbMatrix::from_rows(&[[1.0]]).is_err());
        assert!(ProbMatrix::new(2, 2, vec![1.0, 0.0]).is_err());
        assert!(ProbMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let m = ProbMatrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]).unwrap();
        assert_eq!(m.argmax(0), 0);
        assert_eq!(m.argmax(1), 1);
    }

    #[test]
    fn labels_validate_against_shape() {
        let l = LabelVector::new(vec![0, 1, 2]);
        assert!(l.validate_against(3, 3).is_ok());
        assert!(matches!(l.validate_against(4, 3), Err(Error::Shape(_))));
        assert!(matches!(
            l.validate_against(3, 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn segmentation_uses_looser_tolerance() {
        let ok = SegImage::new(1, 1, 2, vec![0.5, 0.5005]).unwrap();
        assert_eq!(ok.n_pixels(), 1);
        assert!(SegImage::new(1, 1, 2, vec![0.5, 0.502]).is_err());
        let a = SegImage::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let b = SegImage::new(1, 1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert!(SegmentationDump::new(vec![a, b]).is_err());
        assert!(SegmentationDump::new(vec![]).is_err());
    }
}
