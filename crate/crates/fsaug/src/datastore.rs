//! Dataset ingestion, synthetic dataset generation, and normalization.
//!
//! Datasets live on disk as a `manifest.json` plus one binary blob per class
//! (`FSDS` magic, version, image count, and a C·H·W consistency word, then
//! raw u8 images concatenated channel-major row-major). Images stay u8 until
//! episode assembly converts them to float once.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const BLOB_MAGIC: [u8; 4] = *b"FSDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Number of scalars in one image.
    pub fn volume(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Scalars per channel plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Pixel value domain of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDomain {
    /// Values in [0, 255], as loaded from u8 storage.
    Raw,
    /// Per-channel standardized values.
    Normalized,
}

/// A C×H×W block of pixels, stored channel-major row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub geometry: Geometry,
    pub domain: ValueDomain,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(geometry: Geometry, domain: ValueDomain, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            geometry.volume(),
            "image data length must equal C*H*W"
        );
        Self {
            geometry,
            domain,
            data,
        }
    }

    pub fn zeros(geometry: Geometry, domain: ValueDomain) -> Self {
        let len = geometry.volume();
        Self::new(geometry, domain, vec![0.0; len])
    }

    pub fn from_raw_bytes(geometry: Geometry, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), geometry.volume());
        Self {
            geometry,
            domain: ValueDomain::Raw,
            data: bytes.iter().map(|&b| b as f32).collect(),
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        c * self.geometry.plane() + y * self.geometry.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Round and clamp back to u8 storage. Only meaningful in the raw domain.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        debug_assert_eq!(self.domain, ValueDomain::Raw);
        self.data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Per-channel mean/std of x/255 values, computed over the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub id: String,
    pub split: Split,
    pub count: usize,
    /// count × C·H·W bytes, images concatenated.
    pub data: Vec<u8>,
}

impl ClassRecord {
    pub fn image_bytes(&self, volume: usize, index: usize) -> &[u8] {
        &self.data[index * volume..(index + 1) * volume]
    }
}

#[derive(Debug, Clone)]
pub struct FewShotDataset {
    pub geometry: Geometry,
    pub classes: Vec<ClassRecord>,
    pub stats: ChannelStats,
}

impl FewShotDataset {
    /// Indices into `classes` belonging to one split.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fetch one image as a raw-domain float tensor.
    pub fn image(&self, class_index: usize, image_index: usize) -> ImageTensor {
        let volume = self.geometry.volume();
        let bytes = self.classes[class_index].image_bytes(volume, image_index);
        ImageTensor::from_raw_bytes(self.geometry, bytes)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for class in &self.classes {
            if !seen.insert(class.id.clone()) {
                return Err(Error::SplitOverlap {
                    class: class.id.clone(),
                });
            }
            if class.data.len() != class.count * self.geometry.volume() {
                return Err(Error::CorruptBlob {
                    path: class.id.clone(),
                    reason: format!(
                        "payload length {} does not match count {} x volume {}",
                        class.data.len(),
                        class.count,
                        self.geometry.volume()
                    ),
                });
            }
        }
        Ok(())
    }

    fn compute_stats(geometry: Geometry, classes: &[ClassRecord]) -> ChannelStats {
        let plane = geometry.plane();
        let volume = geometry.volume();
        let mut sum = vec![0.0f64; geometry.channels];
        let mut sum_sq = vec![0.0f64; geometry.channels];
        let mut n = 0usize;
        for class in classes.iter().filter(|c| c.split == Split::Train) {
            for img in 0..class.count {
                let bytes = class.image_bytes(volume, img);
                for c in 0..geometry.channels {
                    for &b in &bytes[c * plane..(c + 1) * plane] {
                        let v = b as f64 / 255.0;
                        sum[c] += v;
                        sum_sq[c] += v * v;
                    }
                }
                n += 1;
            }
        }
        let samples = (n * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / samples).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / samples - m * m).max(0.0).sqrt())
            .collect();
        ChannelStats { mean, std }
    }
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    channels: usize,
    height: usize,
    width: usize,
    classes: Vec<ManifestClass>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClass {
    id: String,
    split: Split,
    file: String,
    count: usize,
}

pub fn load_dataset(root: &Path) -> Result<FewShotDataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("invalid json: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    if manifest.channels == 0 || manifest.height == 0 || manifest.width == 0 {
        return Err(Error::Manifest("zero dimension in geometry".into()));
    }
    let geometry = Geometry::new(manifest.channels, manifest.height, manifest.width);

    let mut classes = Vec::with_capacity(manifest.classes.len());
    for entry in &manifest.classes {
        let path = root.join(&entry.file);
        let blob = fs::read(&path).map_err(|e| Error::CorruptBlob {
            path: entry.file.clone(),
            reason: format!("cannot read: {e}"),
        })?;
        let data = parse_blob(&entry.file, &blob, geometry, entry.count)?;
        classes.push(ClassRecord {
            id: entry.id.clone(),
            split: entry.split,
            count: entry.count,
            data,
        });
    }

    let stats = FewShotDataset::compute_stats(geometry, &classes);
    let dataset = FewShotDataset {
        geometry,
        classes,
        stats,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn parse_blob(name: &str, blob: &[u8], geometry: Geometry, count: usize) -> Result<Vec<u8>> {
    let fail = |reason: String| Error::CorruptBlob {
        path: name.to_string(),
        reason,
    };
    if blob.len() < 16 {
        return Err(fail(format!("header truncated ({} bytes)", blob.len())));
    }
    if blob[0..4] != BLOB_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported blob version {version}")));
    }
    let blob_count = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
    if blob_count != count {
        return Err(fail(format!(
            "count {blob_count} disagrees with manifest count {count}"
        )));
    }
    let volume_word = u32::from_le_bytes(blob[12..16].try_into().unwrap()) as usize;
    if volume_word != geometry.volume() {
        return Err(Error::Geometry(format!(
            "blob `{name}` declares volume {volume_word}, manifest geometry implies {}",
            geometry.volume()
        )));
    }
    let payload = &blob[16..];
    if payload.len() != count * geometry.volume() {
        return Err(fail(format!(
            "payload length {} != count {} x volume {}",
            payload.len(),
            count,
            geometry.volume()
        )));
    }
    Ok(payload.to_vec())
}

pub fn write_dataset(dataset: &FewShotDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(dataset.classes.len());
    for class in &dataset.classes {
        let file = format!("{}.fsds", class.id);
        let mut blob = Vec::with_capacity(16 + class.data.len());
        blob.extend_from_slice(&BLOB_MAGIC);
        blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        blob.extend_from_slice(&(class.count as u32).to_le_bytes());
        blob.extend_from_slice(&(dataset.geometry.volume() as u32).to_le_bytes());
        blob.extend_from_slice(&class.data);
        fs::write(root.join(&file), blob)?;
        entries.push(ManifestClass {
            id: class.id.clone(),
            split: class.split,
            file,
            count: class.count,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        channels: dataset.geometry.channels,
        height: dataset.geometry.height,
        width: dataset.geometry.width,
        classes: entries,
    };
    let mut f = fs::File::create(root.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel `(x/255 - mean_c) / std_c`. Input must be raw-domain.
pub fn normalize(img: &ImageTensor, stats: &ChannelStats) -> Result<ImageTensor> {
    assert_eq!(img.domain, ValueDomain::Raw, "normalize expects raw input");
    let geometry = img.geometry;
    if stats.mean.len() != geometry.channels || stats.std.len() != geometry.channels {
        return Err(Error::Geometry(format!(
            "stats cover {} channels, image has {}",
            stats.mean.len(),
            geometry.channels
        )));
    }
    for (c, &s) in stats.std.iter().enumerate() {
        if s == 0.0 {
            return Err(Error::DegenerateStats { channel: c });
        }
    }
    let plane = geometry.plane();
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..geometry.channels {
        let mean = stats.mean[c] as f32;
        let std = stats.std[c] as f32;
        for &v in &img.data[c * plane..(c + 1) * plane] {
            data.push((v / 255.0 - mean) / std);
        }
    }
    Ok(ImageTensor::new(geometry, ValueDomain::Normalized, data))
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// One parametric pattern family per class (mod 3): oriented bars, off-center
/// blobs, or gapped rings. Per-image jitter plus pixel noise keeps classes
/// separable but not trivially so, and each class's distribution is closed
/// under horizontal flips (a mirror coin is tossed per image) while 90-degree
/// rotations move it, so task-level rotation mints genuinely new classes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FewShotDataset> {
    if spec.train_classes == 0 || spec.val_classes == 0 || spec.test_classes == 0 {
        return Err(Error::Config("synthetic spec: zero class count".into()));
    }
    if spec.images_per_class == 0 {
        return Err(Error::Config("synthetic spec: images_per_class is zero".into()));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("synthetic spec: zero image dimension".into()));
    }
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::Config(format!(
            "synthetic spec: unsupported channel count {} (expected 1 or 3)",
            spec.channels
        )));
    }

    let geometry = Geometry::new(spec.channels, spec.height, spec.width);
    let root = RngStream::root(spec.seed);
    let total = spec.train_classes + spec.val_classes + spec.test_classes;

    let mut classes = Vec::with_capacity(total);
    for class_index in 0..total {
        let split = if class_index < spec.train_classes {
            Split::Train
        } else if class_index < spec.train_classes + spec.val_classes {
            Split::Val
        } else {
            Split::Test
        };
        let prefix = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let class_rng = root.child("class", class_index as u64);
        let data = render_class(geometry, spec.images_per_class, class_index, class_rng);
        classes.push(ClassRecord {
            id: format!("{prefix}_{class_index:03}"),
            split,
            count: spec.images_per_class,
            data,
        });
    }

    let stats = FewShotDataset::compute_stats(geometry, &classes);
    let dataset = FewShotDataset {
        geometry,
        classes,
        stats,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Clone, Copy)]
enum PatternFamily {
    Bars,
    Blobs,
    Rings,
}

struct ClassPattern {
    family: PatternFamily,
    /// Pattern centroid as a fraction of (width, height).
    center: (f64, f64),
    /// Orientation in radians (bar direction / ring gap direction).
    angle: f64,
    /// Characteristic length as a fraction of the smaller image side.
    scale: f64,
    /// Foreground color per channel, in [0, 255].
    foreground: Vec<f64>,
    /// Background color per channel, in [0, 255].
    background: Vec<f64>,
}

fn render_class(
    geometry: Geometry,
    images: usize,
    class_index: usize,
    mut rng: RngStream,
) -> Vec<u8> {
    let family = match class_index % 3 {
        0 => PatternFamily::Bars,
        1 => PatternFamily::Blobs,
        _ => PatternFamily::Rings,
    };
    let mut color = |lo: f64, hi: f64| -> Vec<f64> {
        (0..geometry.channels)
            .map(|_| rng.random_range(lo..hi))
            .collect()
    };
    let foreground = color(140.0, 245.0);
    let background = color(10.0, 90.0);
    let pattern = ClassPattern {
        family,
        center: (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        scale: rng.random_range(0.18..0.38),
        foreground,
        background,
    };

    let volume = geometry.volume();
    let mut data = Vec::with_capacity(images * volume);
    for image_index in 0..images {
        let img_rng = rng.child("image", image_index as u64);
        data.extend(render_image(geometry, &pattern, img_rng));
    }
    data
}

fn render_image(geometry: Geometry, pattern: &ClassPattern, mut rng: RngStream) -> Vec<u8> {
    let w = geometry.width as f64;
    let h = geometry.height as f64;
    let side = w.min(h);

    let mirror = rng.random_range(0.0..1.0) < 0.5;
    let angle = pattern.angle + rng.random_range(-0.12..0.12);
    let cx = (pattern.center.0 + rng.random_range(-0.06..0.06)) * w;
    let cy = (pattern.center.1 + rng.random_range(-0.06..0.06)) * h;
    let scale = pattern.scale * side * rng.random_range(0.9..1.1);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise_scale = 14.0;

    let plane = geometry.plane();
    let mut out = vec![0u8; geometry.volume()];
    let mut noise = vec![0.0f32; geometry.volume()];
    for n in noise.iter_mut() {
        *n = rng.random_range(-1.0f32..1.0f32);
    }

    for y in 0..geometry.height {
        for x in 0..geometry.width {
            // Mirroring the sample coordinate makes each class distribution
            // closed under horizontal flips.
            let px = if mirror {
                w - 1.0 - x as f64
            } else {
                x as f64
            };
            let py = y as f64;
            let dx = px - cx;
            let dy = py - cy;
            let intensity = match pattern.family {
                PatternFamily::Bars => {
                    let along = dx * angle.cos() + dy * angle.sin();
                    let stripes = (std::f64::consts::TAU * along / scale + phase).cos();
                    let falloff = (-((dx * dx + dy * dy) / (2.0 * (1.6 * scale).powi(2)))).exp();
                    0.5 * (stripes + 1.0) * falloff
                }
                PatternFamily::Blobs => {
                    let r2 = dx * dx + dy * dy;
                    (-(r2 / (2.0 * (0.55 * scale).powi(2)))).exp()
                }
                PatternFamily::Rings => {
                    let r = (dx * dx + dy * dy).sqrt();
                    let band = (-(((r - scale) / (0.22 * scale)).powi(2))).exp();
                    let theta = dy.atan2(dx);
                    let mut delta = (theta - angle).rem_euclid(std::f64::consts::TAU);
                    if delta > std::f64::consts::PI {
                        delta = std::f64::consts::TAU - delta;
                    }
                    // Angular gap of ~60 degrees at the class angle.
                    if delta < 0.5 {
                        0.0
                    } else {
                        band
                    }
                }
            };
            for c in 0..geometry.channels {
                let base = pattern.background[c]
                    + intensity * (pattern.foreground[c] - pattern.background[c]);
                let value = base + noise_scale * noise[c * plane + y * geometry.width + x] as f64;
                out[c * plane + y * geometry.width + x] = value.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
