//! Image datasets: the synthetic corpus, class-per-folder ingestion,
//! stratified splits, and image rotation.

mod rotate;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rotate::{rot90_batch, rotate_image, rotate_plane};
pub use synth::{generate_dataset, synth_image, Manifest, SynthSpec, BUMP_COUNTS, BUMP_RADII, CLASS_NAMES};

use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

/// Labeled image files; class ids are dense `0..class_names.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    entries: Vec<(PathBuf, usize)>,
    class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<(PathBuf, usize)>, class_names: Vec<String>) -> Self {
        debug_assert!(entries.iter().all(|(_, c)| *c < class_names.len()));
        DatasetIndex { entries, class_names }
    }

    pub fn entries(&self) -> &[(PathBuf, usize)] {
        &self.entries
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for (_, c) in &self.entries {
            counts[*c] += 1;
        }
        counts
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        .unwrap_or(false)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

/// Index `root/<CLASS>/*.{png,tif,tiff}`. Classes are numbered in
/// lexicographic folder order; files are listed in name order.
pub fn load_folder(root: &Path) -> Result<DatasetIndex> {
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("{}: class folder name is not UTF-8", dir.display())))?
            .to_string();
        let files: Vec<PathBuf> = sorted_dir(&dir)?.into_iter().filter(|p| is_image_file(p)).collect();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "{}: class folder holds no images",
                dir.display()
            )));
        }
        let id = class_names.len();
        class_names.push(name);
        entries.extend(files.into_iter().map(|p| (p, id)));
    }
    if class_names.is_empty() {
        return Err(Error::Config(format!("{}: no class folders found", root.display())));
    }
    Ok(DatasetIndex::new(entries, class_names))
}

/// Decode one image to a channels-first `[channels, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::Argument(format!("cannot decode to {c} channels"))),
    };
    let mut data = vec![0.0f32; channels * h * w];
    for (p, px) in interleaved.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + p] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], data)
}

/// 8-bit PNG bytes for a `[1|3, H, W]` image in `[0, 1]`.
pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Argument(format!("expected [C, H, W], got {:?}", img.shape())));
    };
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Argument(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let plane = h * w;
    let mut raw = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            raw.push((img.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut out))
        .write_image(&raw, w as u32, h as u32, color)
        .map_err(|e| Error::Argument(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

/// Decoded images with their labels, in index order.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_mean(&self) -> Vec<f32> {
        let Some(first) = self.images.first() else {
            return Vec::new();
        };
        let c = first.shape()[0];
        let mut sums = vec![0.0f64; c];
        let mut count = 0usize;
        for img in &self.images {
            let plane = img.numel() / c;
            for (ch, p) in img.data().chunks_exact(plane).enumerate() {
                sums[ch] += p.iter().map(|&v| v as f64).sum::<f64>();
            }
            count += plane;
        }
        sums.into_iter().map(|s| (s / count as f64) as f32).collect()
    }
}

pub fn load_images(index: &DatasetIndex, channels: usize) -> Result<LabeledSet> {
    let images = crate::par_map(index.entries(), |(p, _)| load_image(p, channels))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = images.first() {
        if let Some((i, _)) = images.iter().enumerate().find(|(_, im)| im.shape() != first.shape()) {
            return Err(Error::Dimension(format!(
                "{}: image is {:?} but {} is {:?}",
                index.entries()[i].0.display(),
                images[i].shape(),
                index.entries()[0].0.display(),
                first.shape()
            )));
        }
    }
    Ok(LabeledSet {
        images,
        labels: index.entries().iter().map(|(_, c)| *c).collect(),
        n_classes: index.n_classes(),
    })
}

/// Per-class shuffled split; each class sends `round(frac * count)` items to
/// the test side (kept within `1..count`).
pub fn stratified_split(index: &DatasetIndex, frac: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie in (0, 1), got {frac}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<&(PathBuf, usize)>> = BTreeMap::new();
    for e in index.entries() {
        by_class.entry(e.1).or_default().push(e);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut items) in by_class {
        if items.len() < 2 {
            return Err(Error::Split(format!(
                "class {} has {} item(s); at least 2 are needed",
                index.class_names()[class],
                items.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        items.shuffle(&mut rng);
        let n_test = ((frac * items.len() as f64).round() as usize).clamp(1, items.len() - 1);
        test.extend(items[..n_test].iter().map(|e| (*e).clone()));
        train.extend(items[n_test..].iter().map(|e| (*e).clone()));
    }
    let names = index.class_names().to_vec();
    Ok((DatasetIndex::new(train, names.clone()), DatasetIndex::new(test, names)))
}
