//! Segmentation datasets: directory loading, paired augmentation, batching
//! and a synthetic generator.
//!
//! On disk a split lives at `<root>/<split>/images_png/*.png` with masks at
//! `<root>/<split>/masks_png/*.png` sharing the file stem. Masks are
//! single-channel 8-bit class indices.

mod synth;
mod transform;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{palette, MAX_SYNTH_CLASSES, synth_generate, write_dataset};
pub use transform::{half_scale, random_crop_pair, reflect_index};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// One image with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `(3, H, W)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H·W` labels, row-major.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("image must be (3, H, W), got {shape:?}")));
        }
        if mask.len() != shape[1] * shape[2] {
            return Err(Error::shape(format!(
                "mask has {} labels for a {}x{} image",
                mask.len(),
                shape[1],
                shape[2]
            )));
        }
        Ok(SegSample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Checks every label is a class index or the ignore index.
    pub fn check_labels(&self, num_classes: usize, ignore_index: u8) -> Result<()> {
        match self.mask.iter().find(|&&l| l != ignore_index && l as usize >= num_classes) {
            Some(&bad) => Err(Error::Data(format!(
                "{}: label {bad} outside [0, {num_classes}) and not ignore index {ignore_index}",
                self.id
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub num_classes: usize,
    pub ignore_index: u8,
    pub half_scale: bool,
    pub crop: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            num_classes: 7,
            ignore_index: DEFAULT_IGNORE_INDEX,
            half_scale: false,
            crop: 321,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::invalid(format!("num_classes must be in 1..=255, got {}", self.num_classes)));
        }
        if (self.ignore_index as usize) < self.num_classes {
            return Err(Error::invalid(format!(
                "ignore_index {} collides with a class index",
                self.ignore_index
            )));
        }
        if self.crop == 0 {
            return Err(Error::invalid("crop must be positive"));
        }
        Ok(())
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.root.join(split)
    }
}

/// Which half of the training set a dataset (and its batches) came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    Full,
    TrainA,
    TrainB,
}

#[derive(Debug, Clone)]
enum Source {
    Files { image: PathBuf, mask: PathBuf },
    Memory(SegSample),
}

/// An ordered collection of samples, loaded from disk on access or held
/// in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<(String, Source)>,
    pub num_classes: usize,
    pub ignore_index: u8,
    pub subset: Subset,
}

impl Dataset {
    pub fn from_samples(samples: Vec<SegSample>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        for s in &samples {
            s.check_labels(num_classes, ignore_index)?;
        }
        Ok(Dataset {
            items: samples.into_iter().map(|s| (s.id.clone(), Source::Memory(s))).collect(),
            num_classes,
            ignore_index,
            subset: Subset::Full,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(id, _)| id.as_str())
    }

    pub fn get(&self, index: usize) -> Result<SegSample> {
        let (id, src) = self
            .items
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample {index} of {}", self.items.len())))?;
        let sample = match src {
            Source::Memory(s) => return Ok(s.clone()),
            Source::Files { image, mask } => read_pair(id, image, mask)?,
        };
        sample.check_labels(self.num_classes, self.ignore_index).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", src_mask_path(src).display())),
            other => other,
        })?;
        Ok(sample)
    }

    /// Loads every sample into memory.
    pub fn materialize(&self) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            samples.push(self.get(i)?);
        }
        let mut out = Dataset::from_samples(samples, self.num_classes, self.ignore_index)?;
        out.subset = self.subset;
        Ok(out)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], tag: Subset) -> Result<Dataset> {
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            items.push(
                self.items
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("sample {i} of {}", self.items.len())))?,
            );
        }
        Ok(Dataset {
            items,
            num_classes: self.num_classes,
            ignore_index: self.ignore_index,
            subset: tag,
        })
    }

    /// Applies `f` to every sample, producing an in-memory dataset.
    pub fn map(&self, mut f: impl FnMut(SegSample) -> Result<SegSample>) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            samples.push(f(self.get(i)?)?);
        }
        let mut out = Dataset::from_samples(samples, self.num_classes, self.ignore_index)?;
        out.subset = self.subset;
        Ok(out)
    }
}

fn src_mask_path(src: &Source) -> &Path {
    match src {
        Source::Files { mask, .. } => mask,
        Source::Memory(_) => Path::new("<memory>"),
    }
}

fn read_luma(path: &Path) -> Result<image::GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// A single-channel label PNG as `(height, width, labels)`.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let m = read_luma(path)?;
    Ok((m.height() as usize, m.width() as usize, m.into_raw()))
}

fn read_pair(id: &str, image_path: &Path, mask_path: &Path) -> Result<SegSample> {
    let img = image::open(image_path)
        .map_err(|source| Error::Image {
            path: image_path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let mask = read_luma(mask_path)?;
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Data(format!(
            "{id}: image is {:?} but mask is {:?}",
            img.dimensions(),
            mask.dimensions()
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    SegSample::new(id, Tensor::new(vec![3, h, w], data)?, mask.into_raw())
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Indexes `<root>/<split>`; samples are read lazily, ordered by stem.
pub fn load_dataset(config: &DatasetConfig, split: &str) -> Result<Dataset> {
    config.validate()?;
    let dir = config.split_dir(split);
    let image_dir = dir.join("images_png");
    let mask_dir = dir.join("masks_png");
    for d in [&image_dir, &mask_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("dataset directory {} does not exist", d.display())));
        }
    }
    let mut items = Vec::new();
    for (stem, image) in png_stems(&image_dir)? {
        let mask = mask_dir.join(format!("{stem}.png"));
        if !mask.is_file() {
            return Err(Error::Data(format!("image `{stem}` has no mask at {}", mask.display())));
        }
        items.push((stem, Source::Files { image, mask }));
    }
    Ok(Dataset {
        items,
        num_classes: config.num_classes,
        ignore_index: config.ignore_index,
        subset: Subset::Full,
    })
}

/// Loads a split and applies the configured half-scaling, in memory.
pub fn load_prepared(config: &DatasetConfig, split: &str) -> Result<Dataset> {
    let ds = load_dataset(config, split)?;
    if config.half_scale {
        ds.map(|s| half_scale(&s))
    } else {
        ds.materialize()
    }
}

/// Random halving into disjoint `(trainA, trainB)`; trainA takes the extra
/// sample when the count is odd.
pub fn split_train(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = dataset.len().div_ceil(2);
    let (mut a, mut b) = (idx[..half].to_vec(), idx[half..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((dataset.subset(&a, Subset::TrainA)?, dataset.subset(&b, Subset::TrainB)?))
}

/// A stacked mini-batch tagged with the subset it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(N, 3, H, W)`.
    pub images: Tensor<f32>,
    /// `N·H·W` labels.
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
    pub subset: Subset,
}

impl Batch {
    pub fn stack(samples: &[SegSample], subset: Subset) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::shape(format!(
                    "batch mixes {}x{} and {}x{} samples",
                    h,
                    w,
                    s.height(),
                    s.width()
                )));
            }
            data.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.mask);
        }
        Ok(Batch {
            images: Tensor::new(vec![samples.len(), 3, h, w], data)?,
            labels,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            subset,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
