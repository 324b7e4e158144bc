//! View-consistency evaluation: temporal loss over frame intervals, per-video
//! perceptual diversity, their ratio, and the Fréchet distance between
//! feature distributions. Metrics operate on [0,1] pixels; converting from
//! the model's [-1,1] is the caller's contract and is enforced here.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::nn::normal_tensor;
use crate::rng::stage_rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const DIVERSITY_FLOOR: f64 = 1e-4;

/// Maps an image to multi-scale feature maps and a pooled vector. The
/// perceptual distance is defined on the feature maps.
pub trait FeatureExtractor: Sync {
    fn id(&self) -> String;

    /// Multi-scale feature maps for a `[3, H, W]` image in [0, 1].
    fn features(&self, image: &Array3<f64>) -> Result<Vec<Array3<f64>>>;

    /// Pooled descriptor (defaults to per-scale channel means, concatenated).
    fn pooled(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        let maps = self.features(image)?;
        let mut out = Vec::new();
        for m in maps {
            let (c, h, w) = m.dim();
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += m[[ch, y, x]];
                    }
                }
                out.push(acc / (h * w) as f64);
            }
        }
        Ok(Array1::from_vec(out))
    }

    /// Perceptual distance between two precomputed feature pyramids:
    /// mean over scales of the mean squared difference of unit-normalized
    /// maps (each spatial position's channel vector scaled to unit length).
    fn distance_maps(&self, a: &[Array3<f64>], b: &[Array3<f64>]) -> f64 {
        let mut total = 0.0;
        for (ma, mb) in a.iter().zip(b) {
            let na = unit_normalize(ma);
            let nb = unit_normalize(mb);
            let mut acc = 0.0;
            for (x, y) in na.iter().zip(nb.iter()) {
                let d = x - y;
                acc += d * d;
            }
            total += acc / na.len() as f64;
        }
        total / a.len() as f64
    }

    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
        Ok(self.distance_maps(&self.features(a)?, &self.features(b)?))
    }
}

fn unit_normalize(m: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = m.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut norm = 0.0;
            for ch in 0..c {
                norm += m[[ch, y, x]] * m[[ch, y, x]];
            }
            let norm = norm.sqrt().max(1e-10);
            for ch in 0..c {
                out[[ch, y, x]] = m[[ch, y, x]] / norm;
            }
        }
    }
    out
}

/// Default extractor: a fixed, seeded random convolutional pyramid. Three
/// scales, each a 3x3 convolution over the (progressively 2x-downsampled)
/// image followed by a leaky rectifier. Absolute values differ from
/// pretrained perceptual nets, but orderings are what the suite asserts,
/// and the extractor is pluggable.
pub struct RandomPyramidExtractor {
    seed: u64,
    channels: usize,
    scales: usize,
    weights: Vec<Array2<f64>>,
}

impl RandomPyramidExtractor {
    pub fn new(seed: u64, channels: usize, scales: usize) -> Self {
        let mut rng = stage_rng(seed, "metric-extractor");
        let weights = (0..scales)
            .map(|_| {
                let t = normal_tensor(&mut rng, &[27, channels], (1.0f64 / 27.0).sqrt());
                t.into_dimensionality::<ndarray::Ix2>().expect("2-d weights")
            })
            .collect();
        Self {
            seed,
            channels,
            scales,
            weights,
        }
    }

    /// Desk-scale default: 3 scales x 64 channels, pooled dim 192.
    pub fn default_with_seed(seed: u64) -> Self {
        Self::new(seed, 64, 3)
    }

    pub fn pooled_dim(&self) -> usize {
        self.channels * self.scales
    }
}

fn avg_pool_image(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, h2, w2));
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[[ch, y, x]] = 0.25
                    * (img[[ch, 2 * y, 2 * x]]
                        + img[[ch, 2 * y, 2 * x + 1]]
                        + img[[ch, 2 * y + 1, 2 * x]]
                        + img[[ch, 2 * y + 1, 2 * x + 1]]);
            }
        }
    }
    out
}

impl FeatureExtractor for RandomPyramidExtractor {
    fn id(&self) -> String {
        format!(
            "rand-pyramid-v1/seed{}/c{}x{}",
            self.seed, self.channels, self.scales
        )
    }

    fn features(&self, image: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        check_unit_range(std::slice::from_ref(image))?;
        let mut maps = Vec::with_capacity(self.scales);
        let mut current = image.clone();
        for w in &self.weights {
            let (c, h, wd) = current.dim();
            let x4 = current
                .clone()
                .into_shape_with_order((1, c, h, wd))
                .expect("4-d view");
            let cols = kernels::im2col(
                x4.view(),
                ConvSpec {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            );
            let y = kernels::matmul(cols.view(), w.view());
            let mut map = Array3::zeros((self.channels, h, wd));
            for yy in 0..h {
                for xx in 0..wd {
                    let row = yy * wd + xx;
                    for ch in 0..self.channels {
                        let v = y[[row, ch]];
                        map[[ch, yy, xx]] = if v > 0.0 { v } else { 0.2 * v };
                    }
                }
            }
            maps.push(map);
            if current.dim().1 >= 4 && current.dim().2 >= 4 {
                current = avg_pool_image(&current);
            }
        }
        Ok(maps)
    }
}

fn check_unit_range(frames: &[Array3<f64>]) -> Result<()> {
    for f in frames {
        for &v in f.iter() {
            if !v.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::Range {
                    what: "metric pixel value (expected [0,1])".into(),
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
    }
    Ok(())
}

fn check_same_shapes(frames: &[Array3<f64>]) -> Result<()> {
    let dim = frames[0].dim();
    if frames.iter().any(|f| f.dim() != dim) {
        return Err(Error::shape("video frames differ in shape"));
    }
    Ok(())
}

/// Temporal loss: for each interval, the mean normalized Frobenius distance
/// between frames that far apart; then the mean over intervals.
pub fn temporal_loss(frames: &[Array3<f64>], intervals: &[usize]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Protocol("no frame intervals given".into()));
    }
    let max_interval = *intervals.iter().max().expect("non-empty");
    if frames.len() <= max_interval {
        return Err(Error::Protocol(format!(
            "need more than {max_interval} frames for interval {max_interval}, got {}",
            frames.len()
        )));
    }
    if intervals.iter().any(|&d| d == 0) {
        return Err(Error::Protocol("frame interval 0 is meaningless".into()));
    }
    check_same_shapes(frames)?;
    check_unit_range(frames)?;
    let (c, h, w) = frames[0].dim();
    let norm = ((c * h * w) as f64).sqrt();
    let mut per_interval = Vec::with_capacity(intervals.len());
    for &delta in intervals {
        let mut acc = 0.0;
        let count = frames.len() - delta;
        for t in 0..count {
            let mut sq = 0.0;
            for (a, b) in frames[t + delta].iter().zip(frames[t].iter()) {
                let d = a - b;
                sq += d * d;
            }
            acc += sq.sqrt() / norm;
        }
        per_interval.push(acc / count as f64);
    }
    Ok(per_interval.iter().sum::<f64>() / per_interval.len() as f64)
}

/// Per-video perceptual diversity: mean distance over unordered frame pairs,
/// uniformly subsampled (without replacement) to `max_pairs` when needed.
pub fn video_lpips(
    frames: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Protocol(
            "perceptual diversity needs at least 2 frames".into(),
        ));
    }
    if max_pairs == 0 {
        return Err(Error::Protocol("max_pairs must be positive".into()));
    }
    check_same_shapes(frames)?;
    check_unit_range(frames)?;

    let feats = extract_all(frames, extractor)?;

    let n = frames.len();
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    if pairs.len() > max_pairs {
        let mut rng = stage_rng(seed, "vlpips-pairs");
        for i in 0..max_pairs {
            let j = i + (rng.random::<u64>() as usize) % (pairs.len() - i);
            pairs.swap(i, j);
        }
        pairs.truncate(max_pairs);
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| extractor.distance_maps(&feats[i], &feats[j]))
        .sum();
    Ok(total / pairs.len() as f64)
}

fn extract_all(
    frames: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Vec<Array3<f64>>>> {
    #[cfg(feature = "parallel")]
    {
        frames.par_iter().map(|f| extractor.features(f)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        frames.iter().map(|f| extractor.features(f)).collect()
    }
}

/// Protocol parameters for the consistency metric.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricProtocol {
    pub intervals: Vec<usize>,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for MetricProtocol {
    fn default() -> Self {
        Self {
            intervals: vec![1, 2, 4],
            max_pairs: 100,
            seed: 0,
        }
    }
}

/// One video's consistency numbers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub tl: f64,
    pub vlpips: f64,
    pub tc: f64,
}

/// TC = TL / vLPIPS, guarded by the diversity floor: a constant video is an
/// error, not a perfect score.
pub fn temporal_consistency(
    frames: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
    protocol: &MetricProtocol,
) -> Result<ConsistencyEntry> {
    let tl = temporal_loss(frames, &protocol.intervals)?;
    let vlpips = video_lpips(frames, extractor, protocol.max_pairs, protocol.seed)?;
    if vlpips < DIVERSITY_FLOOR {
        return Err(Error::DiversityTooLow {
            vlpips,
            floor: DIVERSITY_FLOOR,
        });
    }
    Ok(ConsistencyEntry {
        tl,
        vlpips,
        tc: tl / vlpips,
    })
}

fn mean_and_cov(features: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = features.dim();
    let mut mean = Array1::zeros(d);
    for row in features.rows() {
        mean += &row;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in features.rows() {
        let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    // Ridge for small-sample stability.
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mean, cov)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (`[n, d]`
/// rows). The matrix square root uses the symmetric form
/// `sqrt(sqrt(Sa) Sb sqrt(Sa))`; round-off negatives are clamped.
pub fn fid(features_a: &Array2<f64>, features_b: &Array2<f64>) -> Result<f64> {
    let (na, da) = features_a.dim();
    let (nb, db) = features_b.dim();
    if na < 2 || nb < 2 {
        return Err(Error::Protocol(format!(
            "need at least 2 samples per set for a covariance, got {na} and {nb}"
        )));
    }
    if da != db {
        return Err(Error::shape(format!(
            "feature dims differ: {da} vs {db}"
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(features_a);
    let (mu_b, cov_b) = mean_and_cov(features_b);

    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let sqrt_a = sqrtm_psd(&cov_a);
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let eig = inner.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();

    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Pooled features of an image set, stacked `[n, d]`.
pub fn pooled_features(
    images: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::Protocol("empty image set".into()));
    }
    let rows: Vec<Array1<f64>> = {
        #[cfg(feature = "parallel")]
        {
            images
                .par_iter()
                .map(|im| extractor.pooled(im))
                .collect::<Result<_>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            images
                .iter()
                .map(|im| extractor.pooled(im))
                .collect::<Result<_>>()?
        }
    };
    Ok(crate::nn::stack_rows(&rows))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExcludedVideo {
    pub index: usize,
    pub vlpips: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolBlock {
    pub intervals: Vec<usize>,
    pub max_pairs: usize,
    pub seed: u64,
    pub extractor: String,
    pub n_videos: usize,
    pub excluded: Vec<ExcludedVideo>,
}

/// The evaluation artifact: consistency over a video set plus a Fréchet
/// distance between translated and real image features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub tc_mean: f64,
    pub tc_per_video: Vec<f64>,
    pub tl: f64,
    pub vlpips: f64,
    pub fid: Option<f64>,
    pub protocol: ProtocolBlock,
}

/// Evaluate a set of videos (frames already in [0,1]) and, when both image
/// sets are non-empty, the Fréchet distance between them. Videos below the
/// diversity floor are excluded from the means and reported.
pub fn eval_report(
    videos: &[Vec<Array3<f64>>],
    real_images: &[Array3<f64>],
    translated_images: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
    protocol: &MetricProtocol,
) -> Result<MetricReport> {
    if videos.is_empty() {
        return Err(Error::Protocol("no videos to evaluate".into()));
    }
    let mut tc_per_video = Vec::new();
    let mut tls = Vec::new();
    let mut vls = Vec::new();
    let mut excluded = Vec::new();
    for (i, frames) in videos.iter().enumerate() {
        match temporal_consistency(frames, extractor, protocol) {
            Ok(entry) => {
                tc_per_video.push(entry.tc);
                tls.push(entry.tl);
                vls.push(entry.vlpips);
            }
            Err(Error::DiversityTooLow { vlpips, .. }) => {
                excluded.push(ExcludedVideo { index: i, vlpips });
            }
            Err(e) => return Err(e),
        }
    }
    if tc_per_video.is_empty() {
        return Err(Error::Protocol(
            "every video fell below the diversity floor".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fid_value = if real_images.is_empty() || translated_images.is_empty() {
        None
    } else {
        let fa = pooled_features(translated_images, extractor)?;
        let fb = pooled_features(real_images, extractor)?;
        Some(fid(&fa, &fb)?)
    };
    Ok(MetricReport {
        tc_mean: mean(&tc_per_video),
        tc_per_video,
        tl: mean(&tls),
        vlpips: mean(&vls),
        fid: fid_value,
        protocol: ProtocolBlock {
            intervals: protocol.intervals.clone(),
            max_pairs: protocol.max_pairs,
            seed: protocol.seed,
            extractor: extractor.id(),
            n_videos: videos.len(),
            excluded,
        },
    })
}
