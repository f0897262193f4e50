//! Dataset discovery, frame preprocessing and unpaired triplet sampling.
//!
//! Expected layout on disk:
//!
//! ```text
//! <root>/<subset>/<split>/<domain>/frame_000000.png
//! <root>/<subset>/<split>/<domain>/<clip>/frame_000000.png
//! ```
//!
//! `split` is `train` or `test`, `domain` is `infrared` (X) or `visible` (Y).
//! A domain directory holding frames directly is one clip; subdirectories of
//! it are separate clips. Subsets may be nested one level, e.g.
//! `monitoring/sub-1/train/...`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, DynamicImage, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Side length frames are scaled to.
pub const FRAME_SIZE: usize = 256;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// Infrared.
    X,
    /// Visible.
    Y,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::X => "infrared",
            Domain::Y => "visible",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::X => "X",
            Domain::Y => "Y",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub clip_id: String,
    pub domain: Domain,
    /// Ordered by frame index, consecutive.
    pub frame_paths: Vec<PathBuf>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Subset {
    pub name: String,
    pub split: Split,
    pub domain_x_clips: Vec<VideoClip>,
    pub domain_y_clips: Vec<VideoClip>,
}

impl Subset {
    pub fn clips(&self, domain: Domain) -> &[VideoClip] {
        match domain {
            Domain::X => &self.domain_x_clips,
            Domain::Y => &self.domain_y_clips,
        }
    }

    pub fn frame_count(&self, domain: Domain) -> usize {
        self.clips(domain).iter().map(VideoClip::len).sum()
    }
}

/// A clip dropped during discovery because it cannot yield a triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedClip {
    pub clip_id: String,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub subsets: Vec<Subset>,
    pub excluded: Vec<ExcludedClip>,
}

impl DatasetManifest {
    /// Names of all subsets, in discovery order, without duplicates.
    pub fn subset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for s in &self.subsets {
            if !names.contains(&s.name) {
                names.push(s.name.clone());
            }
        }
        names
    }

    /// Clips of one domain and split, optionally restricted to one subset.
    pub fn clips(&self, domain: Domain, split: Split, subset: Option<&str>) -> Vec<&VideoClip> {
        self.subsets
            .iter()
            .filter(|s| s.split == split && subset.is_none_or(|name| s.name == name))
            .flat_map(|s| s.clips(domain).iter())
            .collect()
    }

    /// Restrict to a single subset. Errors when the name is unknown.
    pub fn select_subset(&self, name: &str) -> Result<DatasetManifest> {
        let subsets: Vec<Subset> =
            self.subsets.iter().filter(|s| s.name == name).cloned().collect();
        if subsets.is_empty() {
            return Err(Error::Config(format!(
                "unknown subset `{name}` (available: {})",
                self.subset_names().join(", ")
            )));
        }
        Ok(DatasetManifest {
            root: self.root.clone(),
            subsets,
            excluded: Vec::new(),
        })
    }

    pub fn summary(&self) -> ManifestSummary {
        let mut rows: BTreeMap<String, SubsetSummary> = BTreeMap::new();
        let order = self.subset_names();
        for s in &self.subsets {
            let row = rows.entry(s.name.clone()).or_insert_with(|| SubsetSummary {
                name: s.name.clone(),
                ..Default::default()
            });
            let counts = match s.split {
                Split::Train => &mut row.train,
                Split::Test => &mut row.test,
            };
            counts.infrared_frames += s.frame_count(Domain::X);
            counts.visible_frames += s.frame_count(Domain::Y);
            counts.infrared_clips += s.domain_x_clips.len();
            counts.visible_clips += s.domain_y_clips.len();
        }
        ManifestSummary {
            root: self.root.display().to_string(),
            subsets: order.iter().filter_map(|n| rows.remove(n)).collect(),
            excluded: self.excluded.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub infrared_clips: usize,
    pub infrared_frames: usize,
    pub visible_clips: usize,
    pub visible_frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SubsetSummary {
    pub name: String,
    pub train: SplitCounts,
    pub test: SplitCounts,
}

impl SubsetSummary {
    /// Per-domain frame total; `None` when the two domains disagree.
    pub fn total_frames(&self) -> Option<usize> {
        let ir = self.train.infrared_frames + self.test.infrared_frames;
        let vi = self.train.visible_frames + self.test.visible_frames;
        (ir == vi).then_some(ir)
    }
}

/// Human-readable export of a manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestSummary {
    pub root: String,
    pub subsets: Vec<SubsetSummary>,
    pub excluded: Vec<ExcludedClip>,
}

impl ManifestSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest summary serializes")
    }

    /// Fixed-width table, one row per subset. Frame counts are per domain;
    /// `ir/vi` is shown when the two domains differ.
    pub fn table(&self) -> String {
        fn cell(ir: usize, vi: usize) -> String {
            if ir == vi {
                ir.to_string()
            } else {
                format!("{ir}/{vi}")
            }
        }
        let mut out = format!(
            "{:<24} {:>12} {:>12} {:>12} {:>10}\n",
            "SUBSET", "TRAIN", "TEST", "TOTAL", "CLIPS"
        );
        for row in &self.subsets {
            let total = cell(
                row.train.infrared_frames + row.test.infrared_frames,
                row.train.visible_frames + row.test.visible_frames,
            );
            let clips = cell(
                row.train.infrared_clips + row.test.infrared_clips,
                row.train.visible_clips + row.test.visible_clips,
            );
            out.push_str(&format!(
                "{:<24} {:>12} {:>12} {:>12} {:>10}\n",
                row.name,
                cell(row.train.infrared_frames, row.train.visible_frames),
                cell(row.test.infrared_frames, row.test.visible_frames),
                total,
                clips
            ));
        }
        for ex in &self.excluded {
            out.push_str(&format!("excluded: {} ({} frames)\n", ex.clip_id, ex.frames));
        }
        out
    }
}

/// Discover every subset below `root`.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let mut subsets = Vec::new();
    let mut excluded = Vec::new();
    for (name, dir) in subset_dirs(root)? {
        let mut usable = 0usize;
        for split in [Split::Train, Split::Test] {
            let split_dir = dir.join(split.dir_name());
            if !split_dir.is_dir() {
                continue;
            }
            let mut subset = Subset {
                name: name.clone(),
                split,
                domain_x_clips: Vec::new(),
                domain_y_clips: Vec::new(),
            };
            for domain in [Domain::X, Domain::Y] {
                let domain_dir = split_dir.join(domain.dir_name());
                if !domain_dir.is_dir() {
                    continue;
                }
                let prefix = format!("{name}/{}/{}", split.dir_name(), domain.dir_name());
                for clip in discover_clips(&domain_dir, &prefix, domain)? {
                    if clip.len() < 3 {
                        log::warn!("excluding clip {} with {} frames", clip.clip_id, clip.len());
                        excluded.push(ExcludedClip {
                            clip_id: clip.clip_id,
                            frames: clip.frame_paths.len(),
                        });
                    } else {
                        usable += 1;
                        match domain {
                            Domain::X => subset.domain_x_clips.push(clip),
                            Domain::Y => subset.domain_y_clips.push(clip),
                        }
                    }
                }
            }
            subsets.push(subset);
        }
        if usable == 0 {
            return Err(Error::EmptySubset(name));
        }
    }
    if subsets.is_empty() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        subsets,
        excluded,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_split_container(dir: &Path) -> bool {
    [Split::Train, Split::Test]
        .iter()
        .any(|s| dir.join(s.dir_name()).is_dir())
}

fn subset_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = file_name(&entry);
        if is_split_container(&entry) {
            found.push((name, entry));
            continue;
        }
        for child in sorted_entries(&entry)? {
            if child.is_dir() && is_split_container(&child) {
                found.push((format!("{name}/{}", file_name(&child)), child));
            }
        }
    }
    Ok(found)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Trailing decimal digits of the file stem.
fn frame_index(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn discover_clips(dir: &Path, prefix: &str, domain: Domain) -> Result<Vec<VideoClip>> {
    let entries = sorted_entries(dir)?;
    let mut clips = Vec::new();
    let frames: Vec<PathBuf> = entries.iter().filter(|p| p.is_file() && is_image(p)).cloned().collect();
    if !frames.is_empty() {
        clips.extend(split_runs(frames, prefix, domain));
    }
    for sub in entries.iter().filter(|p| p.is_dir()) {
        let frames: Vec<PathBuf> = sorted_entries(sub)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if !frames.is_empty() {
            clips.extend(split_runs(frames, &format!("{prefix}/{}", file_name(sub)), domain));
        }
    }
    Ok(clips)
}

/// Orders frames by index and cuts the sequence wherever an index is skipped.
fn split_runs(frames: Vec<PathBuf>, clip_id: &str, domain: Domain) -> Vec<VideoClip> {
    let mut indexed: Vec<(u64, PathBuf)> = frames
        .into_iter()
        .filter_map(|p| match frame_index(&p) {
            Some(i) => Some((i, p)),
            None => {
                log::warn!("ignoring frame without index: {}", p.display());
                None
            }
        })
        .collect();
    indexed.sort();
    indexed.dedup_by_key(|(i, _)| *i);

    let mut runs: Vec<Vec<PathBuf>> = Vec::new();
    let mut last: Option<u64> = None;
    for (i, p) in indexed {
        match (last, runs.last_mut()) {
            (Some(prev), Some(run)) if i == prev + 1 => run.push(p),
            _ => runs.push(vec![p]),
        }
        last = Some(i);
    }
    let n = runs.len();
    runs.into_iter()
        .enumerate()
        .map(|(k, frame_paths)| VideoClip {
            clip_id: if n == 1 {
                clip_id.to_string()
            } else {
                format!("{clip_id}#{k}")
            },
            domain,
            frame_paths,
        })
        .collect()
}

/// One preprocessed frame: a `(3, H, W)` tensor with entries in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct FrameTensor(Tensor);

impl FrameTensor {
    /// Wraps a `(3, H, W)` tensor. Entries must lie in `[-1, 1]`.
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::Shape {
                expected: "(3, H, W)".into(),
                got: format!("{dims:?}"),
            });
        }
        let max = data.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(max <= 1.0) {
            return Err(Error::Shape {
                expected: "entries in [-1, 1]".into(),
                got: format!("max |entry| {max}"),
            });
        }
        Ok(Self(data))
    }

    /// Builds from a network output without the range scan.
    pub(crate) fn from_network(data: Tensor) -> Self {
        Self(data)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    /// `(1, 3, H, W)` view for network input.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.0.unsqueeze(0)?)
    }
}

/// Scales to `FRAME_SIZE`x`FRAME_SIZE` and maps `p` to `2 p / 255 - 1`.
pub fn preprocess(image: &DynamicImage) -> Result<FrameTensor> {
    preprocess_to(image, FRAME_SIZE, DType::F32, &Device::Cpu)
}

/// Bilinear resize to `size`x`size` followed by `[-1, 1]` normalization.
pub fn preprocess_to(
    image: &DynamicImage,
    size: usize,
    dtype: DType,
    device: &Device,
) -> Result<FrameTensor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Shape {
            expected: "image of at least 1x1".into(),
            got: format!("{}x{}", image.width(), image.height()),
        });
    }
    let rgb = image.to_rgb8();
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut values = vec![0f64; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            values[c * plane + i] = 2.0 * (px[c] as f64 / 255.0) - 1.0;
        }
    }
    let t = Tensor::from_vec(values, (3, size, size), device)?.to_dtype(dtype)?;
    Ok(FrameTensor(t))
}

pub fn read_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Maps `[-1, 1]` back to 8-bit with `round(255 (v + 1) / 2)`, halves rounded up.
pub fn postprocess(frame: &FrameTensor) -> Result<RgbImage> {
    let (h, w) = (frame.height(), frame.width());
    let values = frame
        .tensor()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let plane = h * w;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px[c] = quantize(values[c * plane + i]);
        }
    }
    Ok(img)
}

/// Half-up rounding of `255 (v + 1) / 2`, clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    let p = (255.0 * (v + 1.0) / 2.0 + 0.5).floor();
    p.clamp(0.0, 255.0) as u8
}

/// Frames `t, t+1, t+2` of one clip, not yet decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletWindow {
    pub source_clip: String,
    pub start_index: usize,
    pub paths: [PathBuf; 3],
}

#[derive(Debug, Clone)]
pub struct FrameTriplet {
    pub frames: [FrameTensor; 3],
    pub source_clip: String,
    pub start_index: usize,
}

/// All `T - 2` consecutive windows of a clip, in order.
pub fn triplets_of(clip: &VideoClip) -> Result<Vec<TripletWindow>> {
    if clip.len() < 3 {
        return Err(Error::ClipTooShort {
            clip: clip.clip_id.clone(),
            len: clip.len(),
        });
    }
    Ok(clip
        .frame_paths
        .windows(3)
        .enumerate()
        .map(|(t, w)| TripletWindow {
            source_clip: clip.clip_id.clone(),
            start_index: t,
            paths: [w[0].clone(), w[1].clone(), w[2].clone()],
        })
        .collect())
}

/// Decodes frames to tensors at a fixed size, dtype and device.
#[derive(Debug, Clone)]
pub struct FrameLoader {
    pub size: usize,
    pub dtype: DType,
    pub device: Device,
}

impl FrameLoader {
    pub fn new(size: usize, dtype: DType, device: Device) -> Self {
        Self {
            size,
            dtype,
            device,
        }
    }

    pub fn load(&self, path: &Path) -> Result<FrameTensor> {
        preprocess_to(&read_image(path)?, self.size, self.dtype, &self.device)
    }

    pub fn load_triplet(&self, window: &TripletWindow) -> Result<FrameTriplet> {
        Ok(FrameTriplet {
            frames: [
                self.load(&window.paths[0])?,
                self.load(&window.paths[1])?,
                self.load(&window.paths[2])?,
            ],
            source_clip: window.source_clip.clone(),
            start_index: window.start_index,
        })
    }
}

/// Uniform distribution over every (clip, start index) of one domain.
#[derive(Debug, Clone)]
pub struct TripletPool {
    clips: Vec<VideoClip>,
    /// Cumulative triplet counts; `offsets[i]` is the first global index of clip `i`.
    offsets: Vec<usize>,
    total: usize,
}

impl TripletPool {
    pub fn new(clips: Vec<VideoClip>, domain: Domain) -> Result<Self> {
        let clips: Vec<VideoClip> = clips.into_iter().filter(|c| c.len() >= 3).collect();
        if clips.is_empty() {
            return Err(Error::EmptyDomain(domain.to_string()));
        }
        let mut offsets = Vec::with_capacity(clips.len());
        let mut total = 0;
        for c in &clips {
            offsets.push(total);
            total += c.len() - 2;
        }
        Ok(Self {
            clips,
            offsets,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn window(&self, global: usize) -> TripletWindow {
        let ci = self.offsets.partition_point(|&o| o <= global) - 1;
        let clip = &self.clips[ci];
        let t = global - self.offsets[ci];
        TripletWindow {
            source_clip: clip.clip_id.clone(),
            start_index: t,
            paths: [
                clip.frame_paths[t].clone(),
                clip.frame_paths[t + 1].clone(),
                clip.frame_paths[t + 2].clone(),
            ],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TripletWindow {
        self.window(rng.random_range(0..self.total))
    }
}

/// Draws one triplet per domain per step, independently.
#[derive(Debug, Clone)]
pub struct UnpairedSampler {
    pub x: TripletPool,
    pub y: TripletPool,
}

impl UnpairedSampler {
    /// Training clips of both domains, optionally restricted to one subset.
    pub fn from_manifest(manifest: &DatasetManifest, subset: Option<&str>) -> Result<Self> {
        let take = |d| {
            manifest
                .clips(d, Split::Train, subset)
                .into_iter()
                .cloned()
                .collect::<Vec<_>>()
        };
        Ok(Self {
            x: TripletPool::new(take(Domain::X), Domain::X)?,
            y: TripletPool::new(take(Domain::Y), Domain::Y)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (TripletWindow, TripletWindow) {
        let x = self.x.sample(rng);
        let y = self.y.sample(rng);
        (x, y)
    }
}

/// Endless seeded stream of unpaired `(x, y)` windows.
pub struct UnpairedBatchIterator {
    sampler: UnpairedSampler,
    rng: ChaCha8Rng,
}

impl Iterator for UnpairedBatchIterator {
    type Item = (TripletWindow, TripletWindow);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.sampler.sample(&mut self.rng))
    }
}

pub fn unpaired_batch_iterator(manifest: &DatasetManifest, seed: u64) -> Result<UnpairedBatchIterator> {
    Ok(UnpairedBatchIterator {
        sampler: UnpairedSampler::from_manifest(manifest, None)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn touch_frames(dir: &Path, n: usize) {
        std::fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            std::fs::write(dir.join(format!("frame_{i:06}.png")), b"").unwrap();
        }
    }

    fn clip(n: usize) -> VideoClip {
        VideoClip {
            clip_id: format!("c{n}"),
            domain: Domain::X,
            frame_paths: (0..n).map(|i| PathBuf::from(format!("f{i:06}.png"))).collect(),
        }
    }

    #[test]
    fn uniform_images_hit_range_endpoints() {
        for (value, expected) in [(0u8, -1.0f64), (255, 1.0), (128, 2.0 * 128.0 / 255.0 - 1.0)] {
            let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(7, 5, Rgb([value; 3])));
            let f = preprocess(&img).unwrap();
            assert_eq!(f.tensor().dims(), &[3, 256, 256]);
            let v = f.tensor().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|x| (x - expected).abs() < 1e-6), "value {value}");
        }
        // 2 * 128 / 255 - 1 = 1/255
        assert!((2.0 * 128.0 / 255.0 - 1.0 - 0.003922f64).abs() < 1e-6);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(-5.0), 0);
        assert_eq!(quantize(5.0), 255);
    }

    #[test]
    fn postprocess_then_preprocess_within_one_level() {
        let t = Tensor::from_vec(
            (0..3 * 16 * 16).map(|i| ((i as f64) * 0.37).sin()).collect::<Vec<_>>(),
            (3, 16, 16),
            &Device::Cpu,
        )
        .unwrap();
        let f = FrameTensor::new(t.clone()).unwrap();
        let img = DynamicImage::ImageRgb8(postprocess(&f).unwrap());
        let back = preprocess_to(&img, 16, DType::F64, &Device::Cpu).unwrap();
        let diff = (back.tensor() - &t).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        // half a quantization step in [-1, 1] units is 1/255
        assert!(diff <= 1.0 / 255.0 + 1e-12, "{diff}");
    }

    #[test]
    fn frame_tensor_rejects_out_of_range() {
        let t = Tensor::full(1.5f64, (3, 2, 2), &Device::Cpu).unwrap();
        assert!(FrameTensor::new(t).is_err());
        let t = Tensor::zeros((2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(FrameTensor::new(t).is_err());
    }

    #[test]
    fn corrupt_file_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.png");
        std::fs::write(&p, b"not a png").unwrap();
        let err = read_image(&p).unwrap_err().to_string();
        assert!(err.contains("broken.png"), "{err}");
    }

    #[test]
    fn triplet_windows() {
        let w = triplets_of(&clip(3)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].start_index, 0);
        assert_eq!(triplets_of(&clip(10)).unwrap().len(), 8);
        assert!(matches!(triplets_of(&clip(2)), Err(Error::ClipTooShort { len: 2, .. })));
    }

    #[test]
    fn missing_or_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::DatasetNotFound(_))));
        assert!(matches!(
            load_manifest(dir.path().join("nope")),
            Err(Error::DatasetNotFound(_))
        ));
    }

    #[test]
    fn manifest_layout_and_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_frames(&root.join("traffic/train/infrared"), 5);
        touch_frames(&root.join("traffic/train/visible"), 5);
        touch_frames(&root.join("traffic/test/infrared/a"), 3);
        touch_frames(&root.join("traffic/test/infrared/b"), 2);
        touch_frames(&root.join("traffic/test/visible"), 3);
        touch_frames(&root.join("monitoring/sub-1/train/infrared"), 4);
        touch_frames(&root.join("monitoring/sub-1/train/visible"), 4);
        let m = load_manifest(root).unwrap();
        assert_eq!(m.subset_names(), vec!["monitoring/sub-1", "traffic"]);
        let s = m.summary();
        let traffic = &s.subsets[1];
        assert_eq!(traffic.train.infrared_frames, 5);
        assert_eq!(traffic.test.infrared_frames, 3);
        assert_eq!(traffic.test.infrared_clips, 1);
        assert_eq!(m.excluded.len(), 1);
        assert_eq!(m.excluded[0].clip_id, "traffic/test/infrared/b");
        assert!(s.table().contains("traffic"));
        assert!(s.to_toml().contains("infrared_frames = 5"));
    }

    #[test]
    fn gaps_split_clips() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("s/train/infrared");
        std::fs::create_dir_all(&d).unwrap();
        for i in [0, 1, 2, 3, 7, 8, 9] {
            std::fs::write(d.join(format!("frame_{i:06}.png")), b"").unwrap();
        }
        let m = load_manifest(dir.path()).unwrap();
        let clips = m.clips(Domain::X, Split::Train, None);
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].len(), 4);
        assert_eq!(clips[1].len(), 3);
    }

    #[test]
    fn subset_without_usable_clips_is_named() {
        let dir = tempfile::tempdir().unwrap();
        touch_frames(&dir.path().join("sub-9/train/infrared"), 2);
        match load_manifest(dir.path()) {
            Err(Error::EmptySubset(name)) => assert_eq!(name, "sub-9"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_windows_cover_every_start() {
        let pool = TripletPool::new(vec![clip(3), clip(6)], Domain::X).unwrap();
        assert_eq!(pool.len(), 5);
        let starts: Vec<(String, usize)> =
            (0..5).map(|i| pool.window(i)).map(|w| (w.source_clip, w.start_index)).collect();
        assert_eq!(starts[0], ("c3".into(), 0));
        assert_eq!(starts[1], ("c6".into(), 0));
        assert_eq!(starts[4], ("c6".into(), 3));
        assert!(TripletPool::new(vec![], Domain::Y).is_err());
    }
}
