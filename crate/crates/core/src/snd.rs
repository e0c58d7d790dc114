//! Soft neighborhood density.
//!
//! For L2-normalized features `f_i`, sample `i`'s soft neighborhood is the
//! distribution over every other sample `j != i`
//!
//! ```text
//! P_ij = exp(<f_i, f_j> / tau) / sum_{k != i} exp(<f_i, f_k> / tau)
//! ```
//!
//! and the density score is the mean entropy of those distributions (nats).
//! Dense, clustered neighborhoods give a high score.
//!
//! [`snd`] streams the similarity matrix in row tiles so memory stays at
//! `block_rows * N`. Each row's entropy is computed from a max-shifted
//! normalizer as `ln Z_i + sum_j P_ij (m_i - S_ij) / tau`, which stays finite
//! for small temperatures. [`snd_dense_oracle`] is the literal dense
//! transcription used to check it.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{LogitMatrix, ProbMatrix, SegmentationDump};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
/// Default number of pixels sampled per segmentation image.
pub const DEFAULT_SUBSAMPLE_PIXELS: usize = 100;
pub const DEFAULT_BLOCK_ROWS: usize = 256;
/// Largest sample count the dense oracle will materialize.
pub const DENSE_ORACLE_MAX_SAMPLES: usize = 5000;

const NORM_TOLERANCE: f64 = 1e-9;

/// Dense row-major feature matrix, optionally L2-normalized row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_samples: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl FeatureMatrix {
    /// Raw (unnormalized) features.
    pub fn new(n_samples: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || n_samples.checked_mul(dim) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "feature matrix {n_samples}x{dim} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            n_samples,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape("ragged feature rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    /// Features that are already unit-norm; each row is checked to 1e-9.
    pub fn from_unit_rows(n_samples: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(n_samples, dim, data)?;
        for (i, row) in m.rows().enumerate() {
            let norm = dot(row, row).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "row {i} has L2 norm {norm}, expected 1"
                )));
            }
        }
        m.normalized = true;
        Ok(m)
    }

    /// Copy with every row scaled to unit L2 norm. Zero rows are an error.
    pub fn l2_normalized(&self) -> Result<FeatureMatrix> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.dim).enumerate() {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Validation(format!(
                    "row {i} has zero norm and cannot be normalized"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(FeatureMatrix {
            n_samples: self.n_samples,
            dim: self.dim,
            data,
            normalized: true,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n_samples: indices.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }
}

/// L2-normalized softmax rows, the default input to [`snd`].
pub fn prepare_features(probs: &ProbMatrix) -> Result<FeatureMatrix> {
    FeatureMatrix::new(
        probs.n_samples(),
        probs.n_classes(),
        probs.as_slice().to_vec(),
    )?
    .l2_normalized()
}

/// L2-normalized logit rows, for the no-softmax ablation.
pub fn prepare_features_logits(logits: &LogitMatrix) -> Result<FeatureMatrix> {
    FeatureMatrix::new(
        logits.n_samples(),
        logits.n_classes(),
        logits.as_slice().to_vec(),
    )?
    .l2_normalized()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SndConfig {
    pub temperature: f64,
    pub block_rows: usize,
    pub subsample_pixels: usize,
    pub rng_seed: u64,
}

impl Default for SndConfig {
    fn default() -> Self {
        SndConfig {
            temperature: DEFAULT_TEMPERATURE,
            block_rows: DEFAULT_BLOCK_ROWS,
            subsample_pixels: DEFAULT_SUBSAMPLE_PIXELS,
            rng_seed: 0,
        }
    }
}

impl SndConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        SndConfig {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.block_rows == 0 {
            return Err(Error::Config("block_rows must be at least 1".into()));
        }
        if self.subsample_pixels < 2 {
            return Err(Error::Config("subsample_pixels must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SndResult {
    /// Mean neighborhood entropy in nats.
    pub value: f64,
    /// Samples per neighborhood graph (per image for segmentation).
    pub n_used: usize,
    pub per_sample_entropy: Option<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_features(features: &FeatureMatrix) -> Result<()> {
    if !features.is_normalized() {
        return Err(Error::Validation(
            "features must be L2-normalized before computing SND".into(),
        ));
    }
    if features.n_samples() < 2 {
        return Err(Error::Validation(format!(
            "SND needs at least 2 samples, got {}",
            features.n_samples()
        )));
    }
    Ok(())
}

/// Entropy of row `self_idx`'s neighborhood distribution given its
/// similarities to every sample (self included, and skipped).
fn row_entropy(sims: &[f64], self_idx: usize, inv_tau: f64, max_entropy: f64) -> f64 {
    let others = sims
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != self_idx)
        .map(|(_, &s)| s);
    let m = others.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted_gap = 0.0;
    for s in others {
        let gap = (m - s) * inv_tau;
        let e = (-gap).exp();
        z += e;
        weighted_gap += e * gap;
    }
    let h = z.ln() + weighted_gap / z;
    h.clamp(0.0, max_entropy)
}

/// Soft neighborhood density of normalized features, blocked over row tiles.
///
/// Tiles run in parallel; each row's entropy depends only on that row, and
/// the final mean is reduced sequentially, so the result does not depend on
/// `block_rows` or the thread count.
pub fn snd(features: &FeatureMatrix, config: &SndConfig) -> Result<SndResult> {
    config.validate()?;
    check_features(features)?;
    let n = features.n_samples();
    let inv_tau = 1.0 / config.temperature;
    let max_entropy = ((n - 1) as f64).ln();

    let mut entropies = vec![0.0; n];
    entropies
        .par_chunks_mut(config.block_rows)
        .enumerate()
        .for_each_init(Vec::new, |tile: &mut Vec<f64>, (b, out)| {
            let r0 = b * config.block_rows;
            tile.clear();
            tile.resize(out.len() * n, 0.0);
            for (k, sims) in tile.chunks_exact_mut(n).enumerate() {
                let fi = features.row(r0 + k);
                for (s, fj) in sims.iter_mut().zip(features.rows()) {
                    *s = dot(fi, fj);
                }
            }
            for (k, (sims, h)) in tile.chunks_exact(n).zip(out.iter_mut()).enumerate() {
                *h = row_entropy(sims, r0 + k, inv_tau, max_entropy);
            }
        });

    let value = entropies.iter().sum::<f64>() / n as f64;
    Ok(SndResult {
        value,
        n_used: n,
        per_sample_entropy: Some(entropies),
    })
}

/// Row-major N×N neighborhood distribution `P`, built densely with the
/// diagonal set to zero.
pub fn neighborhood_distribution(features: &FeatureMatrix, temperature: f64) -> Result<Vec<f64>> {
    check_features(features)?;
    let n = features.n_samples();
    if n > DENSE_ORACLE_MAX_SAMPLES {
        return Err(Error::Config(format!(
            "dense evaluation refused for {n} samples (limit {DENSE_ORACLE_MAX_SAMPLES})"
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 || 1.0 / temperature > 700.0 {
        return Err(Error::Config(format!(
            "dense evaluation needs 1/temperature <= 700, got temperature {temperature}"
        )));
    }
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = dot(features.row(i), features.row(j));
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (sim[i * n + j] / temperature).exp();
            }
        }
        for j in 0..n {
            if j != i {
                p[i * n + j] = (sim[i * n + j] / temperature).exp() / denom;
            }
        }
    }
    Ok(p)
}

/// Reference SND: materializes `S` and `P` and evaluates the entropy
/// directly. Limited to [`DENSE_ORACLE_MAX_SAMPLES`] samples.
pub fn snd_dense_oracle(features: &FeatureMatrix, temperature: f64) -> Result<SndResult> {
    let p = neighborhood_distribution(features, temperature)?;
    let n = features.n_samples();
    let per_sample: Vec<f64> = p
        .chunks_exact(n)
        .map(|row| {
            -row.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .collect();
    let value = per_sample.iter().sum::<f64>() / n as f64;
    Ok(SndResult {
        value,
        n_used: n,
        per_sample_entropy: Some(per_sample),
    })
}

/// Pixel indices drawn for one image: `count` distinct indices, from a ChaCha8
/// stream keyed by `(seed, image_index)`.
pub fn segmentation_sample_indices(
    seed: u64,
    image_index: usize,
    n_pixels: usize,
    count: usize,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_index as u64);
    index::sample(&mut rng, n_pixels, count).into_vec()
}

/// Segmentation SND: per image, `subsample_pixels` pixels are sampled without
/// replacement and scored; the result is the mean over images.
pub fn snd_segmentation(dump: &SegmentationDump, config: &SndConfig) -> Result<SndResult> {
    config.validate()?;
    let k = config.subsample_pixels;
    if let Some((i, im)) = dump
        .images()
        .iter()
        .enumerate()
        .find(|(_, im)| im.n_pixels() < k)
    {
        return Err(Error::Validation(format!(
            "image {i} has {} pixels, fewer than the {k} to sample",
            im.n_pixels()
        )));
    }
    let per_image = dump
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            let idx = segmentation_sample_indices(config.rng_seed, i, im.n_pixels(), k);
            let mut rows = Vec::with_capacity(k * im.n_classes());
            for &p in &idx {
                rows.extend_from_slice(im.pixel(p));
            }
            let feats = FeatureMatrix::new(k, im.n_classes(), rows)?.l2_normalized()?;
            snd(&feats, config).map(|r| r.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let value = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(SndResult {
        value,
        n_used: k,
        per_sample_entropy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::SegImage;

    fn unit(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows)
            .unwrap()
            .l2_normalized()
            .unwrap()
    }

    #[test]
    fn prepares_unit_rows() {
        let p = ProbMatrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        let f = prepare_features(&p).unwrap();
        assert_eq!(f.row(0), &[1.0, 0.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.row(1)[0] - h).abs() < 1e-15 && (f.row(1)[1] - h).abs() < 1e-15);
    }

    #[test]
    fn logit_features() {
        let l = LogitMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let f = prepare_features_logits(&l).unwrap();
        assert!((f.row(0)[0] - 0.6).abs() < 1e-15 && (f.row(0)[1] - 0.8).abs() < 1e-15);
        let z = LogitMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(prepare_features_logits(&z).is_err());
    }

    #[test]
    fn identical_vectors_give_log_n_minus_one() {
        let f = unit(&vec![vec![0.3, 0.7]; 5]);
        for tau in [0.01, 0.05, 1.0, 100.0] {
            let r = snd(&f, &SndConfig::with_temperature(tau)).unwrap();
            assert!((r.value - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_samples_give_zero() {
        let f = unit(&[vec![1.0, 0.0], vec![0.2, 0.9]]);
        let r = snd(&f, &SndConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(snd_dense_oracle(&f, 0.05).unwrap().value, 0.0);
    }

    #[test]
    fn two_one_hot_clusters() {
        let mut rows = vec![vec![1.0, 0.0]; 4];
        rows.extend(vec![vec![0.0, 1.0]; 4]);
        let f = unit(&rows);
        let r = snd(&f, &SndConfig::default()).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-6, "{}", r.value);
    }

    #[test]
    fn rejects_bad_inputs() {
        let one = unit(&[vec![1.0, 0.0]]);
        assert!(snd(&one, &SndConfig::default()).is_err());
        let raw = FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert!(snd(&raw, &SndConfig::default()).is_err());
        let f = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(snd(&f, &SndConfig::with_temperature(0.0)).is_err());
        assert!(snd(&f, &SndConfig::with_temperature(-1.0)).is_err());
        let cfg = SndConfig {
            block_rows: 0,
            ..SndConfig::default()
        };
        assert!(snd(&f, &cfg).is_err());
    }

    #[test]
    fn oracle_zeroes_the_diagonal() {
        let f = unit(&[
            vec![1.0, 0.2],
            vec![0.3, 1.0],
            vec![0.5, 0.5],
            vec![0.9, 0.1],
        ]);
        let p = neighborhood_distribution(&f, 0.05).unwrap();
        for i in 0..4 {
            assert_eq!(p[i * 4 + i], 0.0);
            let s: f64 = p[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_refuses_large_inputs() {
        let f = unit(&vec![vec![1.0, 0.0]; DENSE_ORACLE_MAX_SAMPLES + 1]);
        assert!(snd_dense_oracle(&f, 0.05).is_err());
    }

    #[test]
    fn block_size_does_not_change_result() {
        let rows: Vec<Vec<f64>> = (0..37)
            .map(|i| {
                vec![
                    (i as f64 * 0.37).sin().abs() + 0.01,
                    (i as f64 * 1.3).cos().abs(),
                ]
            })
            .collect();
        let f = unit(&rows);
        let base = snd(&f, &SndConfig::default()).unwrap().value;
        for b in [1, 2, 5, 36, 37, 1000] {
            let cfg = SndConfig {
                block_rows: b,
                ..SndConfig::default()
            };
            assert_eq!(snd(&f, &cfg).unwrap().value, base);
        }
    }

    #[test]
    fn segmentation_identical_pixels() {
        let im = SegImage::new(10, 12, 3, [0.2, 0.3, 0.5].repeat(120)).unwrap();
        let dump = SegmentationDump::new(vec![im]).unwrap();
        let r = snd_segmentation(&dump, &SndConfig::default()).unwrap();
        assert!((r.value - 99f64.ln()).abs() < 1e-9);
        assert_eq!(r.n_used, 100);
    }

    #[test]
    fn segmentation_rejects_small_images() {
        let big = SegImage::new(10, 10, 2, [0.5, 0.5].repeat(100)).unwrap();
        let small = SegImage::new(3, 3, 2, [0.5, 0.5].repeat(9)).unwrap();
        let dump = SegmentationDump::new(vec![big, small]).unwrap();
        let err = snd_segmentation(&dump, &SndConfig::default()).unwrap_err();
        assert!(err.to_string().contains("image 1"), "{err}");
    }

    #[test]
    fn sample_indices_are_distinct_and_reproducible() {
        let a = segmentation_sample_indices(7, 3, 500, 100);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_eq!(a, segmentation_sample_indices(7, 3, 500, 100));
        assert_ne!(a, segmentation_sample_indices(7, 4, 500, 100));
    }
}
