//! Synthetic AttrGrid data, manifests on disk, and identity-balanced batches.
//!
//! A [`DatasetManifest`] is the serializable description of a dataset (schema,
//! one record per image, the seed it was generated from). A [`Dataset`] pairs
//! a manifest with a pixel source: either files next to the manifest, read on
//! demand, or samples held in memory straight from the generator.

mod sampler;
pub mod schema;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::numerics::Tensor;

pub use sampler::pk_sample;
pub use schema::{AttributeGroup, AttributeSchema, DEFAULT_MASK_NAMES};
pub use synth::{generate_attrgrid, zone_for_attribute, AttrGridConfig, Zone};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// One image as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Image path relative to the manifest directory.
    pub image: String,
    pub identity: usize,
    pub camera: usize,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Ground-truth masks: one PGM holding the K binary maps stacked
    /// vertically, in mask-group order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub schema: AttributeSchema,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<AttrGridConfig>,
}

/// Decoded image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// C×H×W values in [0, 1].
    pub pixels: Vec<f32>,
    pub identity: usize,
    pub camera: usize,
    pub attr_labels: Vec<usize>,
    /// K×H×W binary ground-truth zones when available.
    pub gt_masks: Option<Vec<u8>>,
}

/// Stacked images with aligned label arrays.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    /// One label vector per sample, one entry per schema group.
    pub attr_labels: Vec<Vec<usize>>,
    /// Training-classifier targets; present only when every sample is in the
    /// train split.
    pub targets: Option<Vec<usize>>,
    /// Manifest indices of the samples.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    /// Labels of attribute group `g` across the batch.
    pub fn group_labels(&self, g: usize) -> Vec<usize> {
        self.attr_labels.iter().map(|l| l[g]).collect()
    }
}

#[derive(Debug, Clone)]
enum PixelSource {
    Files(PathBuf),
    Memory(Arc<Vec<ImageSample>>),
}

/// A validated manifest plus access to its pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    source: PixelSource,
    /// Sorted train identities; position is the classifier target.
    train_ids: Vec<usize>,
    train_by_id: BTreeMap<usize, Vec<usize>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.version != MANIFEST_VERSION {
            return Err(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            ));
        }
        self.schema.validate().map_err(|e| e.to_string())?;
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return Err("image dimensions must be positive".into());
        }
        let mut train = BTreeSet::new();
        let mut query = BTreeSet::new();
        let mut gallery = BTreeSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            self.schema
                .check_labels(&s.labels)
                .map_err(|e| format!("sample {i} ({}): {e}", s.image))?;
            match s.split {
                Split::Train => train.insert(s.identity),
                Split::Query => query.insert(s.identity),
                Split::Gallery => gallery.insert(s.identity),
            };
        }
        if train.is_empty() {
            return Err("manifest has no train samples".into());
        }
        if let Some(id) = train.iter().find(|id| query.contains(id) || gallery.contains(id)) {
            return Err(format!(
                "split violation: identity {id} appears in train and in query/gallery"
            ));
        }
        if let Some(id) = query.iter().find(|id| !gallery.contains(id)) {
            return Err(format!(
                "split violation: query identity {id} has no gallery samples"
            ));
        }
        Ok(())
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }
}

/// Reads and validates `manifest.json` (or the given file) and checks that
/// every referenced file exists. Pixels are decoded on demand.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&file, e.to_string()))?;
    manifest.validate().map_err(|r| Error::load(&file, r))?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for s in &manifest.samples {
        for rel in std::iter::once(&s.image).chain(s.masks.as_ref()) {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::load(&p, "referenced file does not exist"));
            }
        }
    }
    Ok(Dataset::new(manifest, PixelSource::Files(root)))
}

impl Dataset {
    fn new(manifest: DatasetManifest, source: PixelSource) -> Self {
        let mut train_by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in manifest.samples.iter().enumerate() {
            if s.split == Split::Train {
                train_by_id.entry(s.identity).or_default().push(i);
            }
        }
        Self {
            train_ids: train_by_id.keys().copied().collect(),
            train_by_id,
            manifest,
            source,
        }
    }

    pub(crate) fn in_memory(manifest: DatasetManifest, samples: Vec<ImageSample>) -> Self {
        Self::new(manifest, PixelSource::Memory(Arc::new(samples)))
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.manifest.schema
    }

    pub fn num_train_ids(&self) -> usize {
        self.train_ids.len()
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.train_ids
    }

    pub(crate) fn train_samples_of(&self, identity: usize) -> &[usize] {
        &self.train_by_id[&identity]
    }

    pub fn train_target(&self, identity: usize) -> Option<usize> {
        self.train_ids.binary_search(&identity).ok()
    }

    pub fn has_gt_masks(&self) -> bool {
        match &self.source {
            PixelSource::Memory(s) => s.iter().all(|x| x.gt_masks.is_some()),
            PixelSource::Files(_) => self.manifest.samples.iter().all(|s| s.masks.is_some()),
        }
    }

    /// Decodes every image into memory so later batches avoid file reads.
    pub fn preload(&mut self) -> Result<()> {
        if matches!(self.source, PixelSource::Memory(_)) {
            return Ok(());
        }
        let samples = (0..self.len())
            .map(|i| self.sample(i))
            .collect::<Result<Vec<_>>>()?;
        self.source = PixelSource::Memory(Arc::new(samples));
        Ok(())
    }

    pub fn sample(&self, i: usize) -> Result<ImageSample> {
        let rec = self
            .manifest
            .samples
            .get(i)
            .ok_or_else(|| input_err!("sample index {i} out of range ({} samples)", self.len()))?;
        match &self.source {
            PixelSource::Memory(samples) => Ok(samples[i].clone()),
            PixelSource::Files(root) => self.decode(root, rec),
        }
    }

    fn decode(&self, root: &Path, rec: &SampleRecord) -> Result<ImageSample> {
        let m = &self.manifest;
        let path = root.join(&rec.image);
        let r = read_raster(&path)?;
        if (r.height, r.width, r.channels) != (m.image_height, m.image_width, m.channels) {
            return Err(Error::load(
                &path,
                format!(
                    "image is {}x{}x{}, manifest says {}x{}x{}",
                    r.height, r.width, r.channels, m.image_height, m.image_width, m.channels
                ),
            ));
        }
        let gt_masks = match &rec.masks {
            None => None,
            Some(rel) => {
                let path = root.join(rel);
                let k = m.schema.num_mask_groups;
                let mr = read_raster(&path)?;
                if (mr.height, mr.width, mr.channels) != (k * m.image_height, m.image_width, 1) {
                    return Err(Error::load(
                        &path,
                        format!("mask file must stack {k} maps of {}x{}", m.image_height, m.image_width),
                    ));
                }
                Some(mr.bytes.iter().map(|&b| u8::from(b >= 128)).collect())
            }
        };
        Ok(ImageSample {
            pixels: raster_to_chw(&r),
            identity: rec.identity,
            camera: rec.camera,
            attr_labels: rec.labels.clone(),
            gt_masks,
        })
    }

    /// Stacks the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(input_err!("cannot build an empty batch"));
        }
        let m = &self.manifest;
        let per = m.channels * m.image_height * m.image_width;
        let mut data = Vec::with_capacity(per * indices.len());
        let mut batch = Batch {
            images: Tensor::scalar(0.0),
            identities: Vec::with_capacity(indices.len()),
            cameras: Vec::with_capacity(indices.len()),
            attr_labels: Vec::with_capacity(indices.len()),
            targets: Some(Vec::with_capacity(indices.len())),
            indices: indices.to_vec(),
        };
        for &i in indices {
            let s = self.sample(i)?;
            data.extend_from_slice(&s.pixels);
            batch.identities.push(s.identity);
            batch.cameras.push(s.camera);
            batch.attr_labels.push(s.attr_labels);
            let target = match m.samples[i].split {
                Split::Train => self.train_target(s.identity),
                _ => None,
            };
            batch.targets = match (batch.targets.take(), target) {
                (Some(mut t), Some(x)) => {
                    t.push(x);
                    Some(t)
                }
                _ => None,
            };
        }
        batch.images = Tensor::new(
            &[indices.len(), m.channels, m.image_height, m.image_width],
            data,
        )?;
        Ok(batch)
    }

    /// Writes the manifest, images and masks under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let m = &self.manifest;
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (i, rec) in m.samples.iter().enumerate() {
            let s = self.sample(i)?;
            write_raster(&dir.join(&rec.image), &chw_to_raster(&s.pixels, m))?;
            if let (Some(rel), Some(masks)) = (&rec.masks, &s.gt_masks) {
                let r = Raster {
                    width: m.image_width,
                    height: m.schema.num_mask_groups * m.image_height,
                    channels: 1,
                    bytes: masks.iter().map(|&b| if b > 0 { 255 } else { 0 }).collect(),
                };
                write_raster(&dir.join(rel), &r)?;
            }
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(m)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// 8-bit raster with interleaved channels, row-major.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

/// Reads a binary PPM (P6) or PGM (P5) file.
fn read_raster(path: &Path) -> Result<Raster> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::load(path, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        image::DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        other => {
            return Err(Error::load(
                path,
                format!("expected 8-bit RGB or grey, found {:?}", other.color()),
            ))
        }
    };
    Ok(Raster {
        width,
        height,
        channels,
        bytes,
    })
}

/// Writes P6 for three channels, P5 for one.
fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    let color = if r.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(
        path,
        &r.bytes,
        r.width as u32,
        r.height as u32,
        color,
        image::ImageFormat::Pnm,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Internal(format!("encoding {}: {other}", path.display())),
    })
}

fn raster_to_chw(r: &Raster) -> Vec<f32> {
    let plane = r.width * r.height;
    let mut out = vec![0.0; plane * r.channels];
    for (p, px) in r.bytes.chunks_exact(r.channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            out[c * plane + p] = f32::from(b) / 255.0;
        }
    }
    out
}

fn chw_to_raster(pixels: &[f32], m: &DatasetManifest) -> Raster {
    let plane = m.image_width * m.image_height;
    let mut bytes = Vec::with_capacity(pixels.len());
    for p in 0..plane {
        for c in 0..m.channels {
            bytes.push(quantize(pixels[c * plane + p]));
        }
    }
    Raster {
        width: m.image_width,
        height: m.image_height,
        channels: m.channels,
        bytes,
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let cfg = AttrGridConfig {
            train_identities: 4,
            test_identities: 2,
            samples_per_identity: 4,
            ..AttrGridConfig::default()
        };
        generate_attrgrid(&cfg, 11).unwrap()
    }

    #[test]
    fn generate_write_load_round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.write_to(dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.manifest, ds.manifest);
        for i in 0..ds.len() {
            assert_eq!(loaded.sample(i).unwrap(), ds.sample(i).unwrap());
        }
    }

    #[test]
    fn missing_image_is_named() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.write_to(dir.path()).unwrap();
        let victim = dir.path().join(&ds.manifest.samples[3].image);
        fs::remove_file(&victim).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&ds.manifest.samples[3].image), "{err}");
    }

    #[test]
    fn out_of_range_label_is_rejected_with_group_name() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let mut m = ds.manifest.clone();
        m.samples[0].labels[5] = 3;
        ds.write_to(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("shoes"), "{err}");
    }

    #[test]
    fn split_violation_is_rejected() {
        let mut m = small().manifest;
        let q = m.indices_of(Split::Query)[0];
        m.samples[q].identity = 0;
        assert!(m.validate().unwrap_err().contains("split violation"));
    }

    #[test]
    fn batch_targets_only_for_train() {
        let ds = small();
        let train = ds.manifest.indices_of(Split::Train);
        let b = ds.batch(&train[..3]).unwrap();
        assert_eq!(b.images.shape(), &[3, 3, 64, 32]);
        assert!(b.targets.is_some());
        let q = ds.manifest.indices_of(Split::Query);
        assert!(ds.batch(&q).unwrap().targets.is_none());
    }
}
