use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{encode_png, DatasetIndex};
use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

/// Class folder names, borrowed from the nine colorectal tissue categories.
/// Already in lexicographic order, so folder order and class ids agree.
pub const CLASS_NAMES: [&str; 9] = ["ADI", "BACK", "DEB", "LYM", "MUC", "MUS", "NORM", "STR", "TUM"];

/// Bumps per image for each class.
pub const BUMP_COUNTS: [usize; 9] = [2, 5, 9, 14, 20, 27, 35, 44, 54];
/// Bump radius (Gaussian sigma, px), cycling over classes.
pub const BUMP_RADII: [f64; 3] = [2.5, 4.0, 6.0];

const BACKGROUND: f64 = 0.5;
const AMPLITUDE: (f64, f64) = (0.25, 0.45);
const TINT: (f64, f64) = (0.7, 1.0);

/// Parameters of the synthetic rotation-invariant corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub img_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 9,
            img_size: 64,
            channels: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 1..={} classes, got {}",
                CLASS_NAMES.len(),
                self.n_classes
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.img_size < 16 {
            return Err(Error::Config(format!(
                "img_size must be at least 16, got {}",
                self.img_size
            )));
        }
        Ok(())
    }

    pub fn class_sign(class_id: usize) -> f64 {
        if class_id.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

fn stream_seed(seed: u64, class_id: usize, index: usize) -> u64 {
    // splitmix64 over the three coordinates
    let mut z = seed ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((index as u64) << 20);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One `[C, S, S]` image in `[0, 1]`: isotropic Gaussian bumps scattered
/// uniformly over a centered disc on a mid-gray background.
///
/// The disc keeps every bump inside the inscribed circle, so rotating about
/// the image center never cuts content and the class distribution is closed
/// under rotation.
pub fn synth_image(spec: &SynthSpec, class_id: usize, index: usize) -> Result<Tensor<f32>> {
    if class_id >= spec.n_classes {
        return Err(Error::Argument(format!(
            "class {class_id} out of range for {} classes",
            spec.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, class_id, index));
    let s = spec.img_size;
    let center = (s as f64 - 1.0) / 2.0;
    let radius = BUMP_RADII[class_id % BUMP_RADII.len()];
    let disc = (s as f64 / 2.0 - 1.0 - 2.0 * radius).max(1.0);
    let sign = SynthSpec::class_sign(class_id);

    let mut planes = vec![BACKGROUND; spec.channels * s * s];
    for _ in 0..BUMP_COUNTS[class_id] {
        let rho = disc * rng.gen::<f64>().sqrt();
        let theta = 2.0 * PI * rng.gen::<f64>();
        let (bx, by) = (center + rho * theta.cos(), center + rho * theta.sin());
        let amp = sign * rng.gen_range(AMPLITUDE.0..AMPLITUDE.1);
        let tint: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(TINT.0..TINT.1)).collect();
        let reach = (4.0 * radius).ceil() as isize;
        let (r0, c0) = (by.round() as isize, bx.round() as isize);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(s as isize - 1) {
            for c in (c0 - reach).max(0)..=(c0 + reach).min(s as isize - 1) {
                let d2 = (r as f64 - by).powi(2) + (c as f64 - bx).powi(2);
                let g = amp * (-d2 / (2.0 * radius * radius)).exp();
                for (ch, t) in tint.iter().enumerate() {
                    planes[(ch * s + r as usize) * s + c as usize] += g * t;
                }
            }
        }
    }
    Tensor::new(
        &[spec.channels, s, s],
        planes.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub n_per_class: usize,
    pub file_count: usize,
    /// SHA-256 over the concatenated bytes of every file, in index order.
    pub digest: String,
}

/// Write `out_dir/<CLASS>/<index>.png` for every class and return the index.
/// Also writes `manifest.json`.
pub fn generate_dataset(spec: &SynthSpec, n_per_class: usize, out_dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    let width = n_per_class.saturating_sub(1).to_string().len().max(5);
    let mut entries = Vec::with_capacity(spec.n_classes * n_per_class);
    let jobs: Vec<(usize, usize, PathBuf)> = (0..spec.n_classes)
        .flat_map(|c| {
            let dir = out_dir.join(CLASS_NAMES[c]);
            (0..n_per_class).map(move |i| (c, i, dir.join(format!("{i:0width$}.png"))))
        })
        .collect();
    for name in &CLASS_NAMES[..spec.n_classes] {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let encoded = crate::par_map(&jobs, |(c, i, _)| {
        synth_image(spec, *c, *i).and_then(|img| encode_png(&img))
    });
    let mut hasher = Sha256::new();
    for ((c, _, path), bytes) in jobs.iter().zip(encoded) {
        let bytes = bytes?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        hasher.update(&bytes);
        entries.push((path.clone(), *c));
    }
    let manifest = Manifest {
        spec: spec.clone(),
        n_per_class,
        file_count: entries.len(),
        digest: hex::encode(hasher.finalize()),
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(DatasetIndex::new(
        entries,
        CLASS_NAMES[..spec.n_classes].iter().map(|s| s.to_string()).collect(),
    ))
}
