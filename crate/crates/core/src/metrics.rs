//! Image-quality metrics: Fréchet distance on extracted features, PSNR and SSIM.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::preprocess_to;
use crate::networks::PerceptualExtractor;
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Metric(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b)?;
    let n = a.as_raw().len();
    if n == 0 {
        return Err(Error::Metric("empty image".into()));
    }
    let sse: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let ow = width - k + 1;
    let oh = height - k + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| w[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| w[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// computed per channel on the valid region and averaged.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b)?;
    let (width, height) = (a.width() as usize, a.height() as usize);
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let w = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.pixels().map(|p| p.0[c] as f64).collect();
        let pb: Vec<f64> = b.pixels().map(|p| p.0[c] as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, _, _) = filter_valid(&pa, width, height, &w);
        let (mu_b, _, _) = filter_valid(&pb, width, height, &w);
        let (aa, _, _) = filter_valid(&prod(&pa, &pa), width, height, &w);
        let (bb, _, _) = filter_valid(&prod(&pb, &pb), width, height, &w);
        let (ab, _, _) = filter_valid(&prod(&pa, &pb), width, height, &w);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Maps an image to a fixed-length feature vector for the Fréchet distance.
pub trait FeatureExtractor {
    /// Identifier recorded in reports; scores are comparable only under equal ids.
    fn id(&self) -> String;
    fn features(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Spatially averaged activations of the deepest perceptual layer.
pub struct PerceptualFeatures {
    extractor: PerceptualExtractor,
    size: usize,
}

impl PerceptualFeatures {
    pub fn new(extractor: PerceptualExtractor, size: usize) -> Self {
        Self { extractor, size }
    }
}

impl FeatureExtractor for PerceptualFeatures {
    fn id(&self) -> String {
        let cfg = self.extractor.config();
        let weights = match &cfg.weights {
            Some(p) => p.clone(),
            None => format!("seed{}", cfg.seed),
        };
        format!("perceptual-{:?}-{}-{}px", cfg.widths, weights, self.size)
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let dynamic = image::DynamicImage::ImageRgb8(image.clone());
        let x = preprocess_to(&dynamic, self.size, DType::F32, &Device::Cpu)?.batched()?;
        let deepest = self.extractor.layers().len() - 1;
        let map = self.extractor.features(&x, &[deepest])?.remove(0);
        let pooled = map.mean((2, 3))?.squeeze(0)?.to_dtype(DType::F64)?;
        Ok(pooled.to_vec1::<f64>()?)
    }
}

/// Cheap colour-layout descriptor: per-channel mean and deviation plus a 4x4
/// grid of channel means, all on the `[0, 1]` scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorLayoutFeatures;

impl FeatureExtractor for ColorLayoutFeatures {
    fn id(&self) -> String {
        "color-layout-4x4".into()
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = image.dimensions();
        if w < 4 || h < 4 {
            return Err(Error::Metric(format!("image {w}x{h} too small for a 4x4 grid")));
        }
        let mut out = Vec::with_capacity(54);
        let n = (w * h) as f64;
        for c in 0..3 {
            let vals: Vec<f64> = image.pixels().map(|p| p.0[c] as f64 / 255.0).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.push(mean);
            out.push(var.sqrt());
        }
        for gy in 0..4 {
            for gx in 0..4 {
                let (x0, x1) = (gx * w / 4, (gx + 1) * w / 4);
                let (y0, y1) = (gy * h / 4, (gy + 1) * h / 4);
                let count = ((x1 - x0) * (y1 - y0)) as f64;
                let mut acc = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x, y).0;
                        for c in 0..3 {
                            acc[c] += p[c] as f64 / 255.0;
                        }
                    }
                }
                out.extend(acc.iter().map(|a| a / count));
            }
        }
        Ok(out)
    }
}

/// Mean and unbiased covariance of a feature population.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Metric(format!(
                "need at least 2 feature vectors for a covariance, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Metric("feature vectors must be non-empty and of equal length".into()));
        }
        let n = features.len();
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Metric(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = &a.mean - &b.mean;
    let s1 = psd_sqrt(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between two image populations under `extractor`.
pub fn fid(generated: &[RgbImage], reference: &[RgbImage], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let feats = |imgs: &[RgbImage]| imgs.iter().map(|i| extractor.features(i)).collect::<Result<Vec<_>>>();
    let a = FeatureStats::from_features(&feats(generated)?)?;
    let b = FeatureStats::from_features(&feats(reference)?)?;
    frechet_distance(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub frames: usize,
    pub fid: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub extractor: String,
    pub subsets: BTreeMap<String, SubsetMetrics>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Metric(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if is_image(&path) {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Relative image paths grouped by their first directory component; images
/// directly under `root` form the subset `all`.
fn grouped_images(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let mut files = Vec::new();
    collect_images(root, root, &mut files)?;
    files.sort();
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for f in files {
        let subset = if f.components().count() > 1 {
            f.components().next().expect("non-empty").as_os_str().to_string_lossy().into_owned()
        } else {
            "all".to_string()
        };
        groups.entry(subset).or_default().push(f);
    }
    Ok(groups)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(crate::data::read_image(path)?.to_rgb8())
}

/// Scores translated frames against reference frames with matching relative paths.
pub fn evaluate(translated: &Path, reference: &Path, extractor: &dyn FeatureExtractor) -> Result<EvaluationReport> {
    let gen = grouped_images(translated)?;
    let refs = grouped_images(reference)?;
    if gen.is_empty() {
        return Err(Error::Metric(format!("no images under {}", translated.display())));
    }
    let mut subsets = BTreeMap::new();
    for (name, gen_files) in &gen {
        let ref_files = refs
            .get(name)
            .ok_or_else(|| Error::Metric(format!("subset `{name}` missing from the reference set")))?;
        if gen_files != ref_files {
            return Err(Error::Metric(format!(
                "subset `{name}`: {} translated frames vs {} reference frames with differing names",
                gen_files.len(),
                ref_files.len()
            )));
        }
        let mut g_imgs = Vec::with_capacity(gen_files.len());
        let mut r_imgs = Vec::with_capacity(gen_files.len());
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for rel in gen_files {
            let g = read_rgb(&translated.join(rel))?;
            let r = read_rgb(&reference.join(rel))?;
            psnr_sum += psnr(&g, &r)?;
            ssim_sum += ssim(&g, &r)?;
            g_imgs.push(g);
            r_imgs.push(r);
        }
        let n = gen_files.len();
        subsets.insert(
            name.clone(),
            SubsetMetrics {
                frames: n,
                fid: fid(&g_imgs, &r_imgs, extractor)?,
                psnr: psnr_sum / n as f64,
                ssim: ssim_sum / n as f64,
            },
        );
    }
    Ok(EvaluationReport {
        extractor: extractor.id(),
        subsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = noise(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]));
        let b = RgbImage::from_pixel(8, 8, Rgb([116, 116, 116]));
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-4);
        assert!((psnr(&a, &b).unwrap() - 24.0488).abs() < 1e-3);
    }

    #[test]
    fn psnr_rejects_size_mismatch() {
        assert!(psnr(&noise(1, 8, 8), &noise(1, 8, 9)).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = noise(2, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = noise(3, 16, 16);
        let b = noise(4, 16, 16);
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(s < 0.5 && s > -1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = noise(5, 10, 16);
        assert!(matches!(ssim(&a, &a), Err(Error::Metric(_))));
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        let a = RgbImage::from_pixel(12, 12, Rgb([50, 50, 50]));
        let b = RgbImage::from_pixel(12, 12, Rgb([90, 90, 90]));
        let expected = (2.0 * 50.0 * 90.0 + SSIM_C1) / (50.0f64 * 50.0 + 90.0 * 90.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn stats_reject_single_sample() {
        assert!(FeatureStats::from_features(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn frechet_of_identical_populations_is_zero() {
        let feats: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 % 7.0, 1.0]).collect();
        let s = FeatureStats::from_features(&feats).unwrap();
        assert!(frechet_distance(&s, &s).unwrap() < 1e-8);
    }

    #[test]
    fn frechet_of_shifted_population_is_squared_shift() {
        let feats: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 5) as f64, (i % 3) as f64]).collect();
        let shifted: Vec<Vec<f64>> = feats.iter().map(|f| vec![f[0] + 3.0, f[1] - 4.0]).collect();
        let a = FeatureStats::from_features(&feats).unwrap();
        let b = FeatureStats::from_features(&shifted).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-8);
    }

    #[test]
    fn color_layout_has_fixed_length() {
        let f = ColorLayoutFeatures.features(&noise(6, 16, 16)).unwrap();
        assert_eq!(f.len(), 54);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
