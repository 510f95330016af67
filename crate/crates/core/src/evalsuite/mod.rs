//! Rotation-robustness evaluation: accuracy sweeps over input rotations,
//! token-grid equivariance of the embedding, paired significance tests and
//! the report files.

mod report;
mod stats;

pub use report::{emit_reports, write_radar_svg, write_token_summary_json, write_tokens_csv};
pub use stats::{ln_gamma, paired_t_test, regularized_incomplete_beta, student_t_two_tailed, TTestResult};

use serde::Serialize;

use crate::data::{rot90_batch, rotate_image, LabeledSet};
use crate::error::{Error, Result};
use crate::tensorkit::Tensor;
use crate::trainer::stack_batch;
use crate::vit::{rot90_token_permutation, ViTModel};

/// Images per inference batch.
pub const EVAL_BATCH: usize = 64;

pub trait Classifier: Sync {
    /// `[N, C, S, S]` to `[N, n_classes]`.
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

pub trait TokenEmbedder: Sync {
    /// `[N, C, S, S]` to `[N, g*g, D]`.
    fn tokens(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for ViTModel {
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(batch)
    }
}

impl TokenEmbedder for ViTModel {
    fn tokens(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.embed_tokens(batch)
    }
}

/// Row-wise argmax of `[N, C]` logits; ties go to the lowest class id.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per image, in input order.
pub fn predict<M: Classifier + ?Sized>(model: &M, images: &[Tensor<f32>]) -> Result<Vec<usize>> {
    let chunks: Vec<&[Tensor<f32>]> = images.chunks(EVAL_BATCH).collect();
    let per_chunk = crate::par_map(&chunks, |chunk| {
        let batch = stack_batch(&chunk.iter().collect::<Vec<_>>())?;
        Ok(argmax_rows(&model.logits(&batch)?))
    });
    let mut out = Vec::with_capacity(images.len());
    for p in per_chunk {
        out.extend(p?);
    }
    Ok(out)
}

fn count_correct<M: Classifier + ?Sized>(model: &M, images: &[Tensor<f32>], labels: &[usize]) -> Result<usize> {
    if images.is_empty() {
        return Err(Error::Argument("cannot score an empty set".into()));
    }
    Ok(predict(model, images)?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count())
}

pub fn accuracy<M: Classifier + ?Sized>(model: &M, set: &LabeledSet) -> Result<f64> {
    Ok(count_correct(model, &set.images, &set.labels)? as f64 / set.len() as f64)
}

/// Accuracy at every rotation angle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationReport {
    pub angles: Vec<i64>,
    pub per_angle_acc: Vec<f64>,
    pub n_correct: Vec<usize>,
    pub n_total: usize,
    /// Accuracy on the unrotated images.
    pub orig_acc: f64,
    pub mean: f64,
    /// Population deviation over the listed angles.
    pub std: f64,
}

impl RotationReport {
    pub fn from_counts(angles: Vec<i64>, n_correct: Vec<usize>, n_total: usize, orig_acc: f64) -> Self {
        let per_angle_acc: Vec<f64> = n_correct.iter().map(|&c| c as f64 / n_total as f64).collect();
        let (mean, std) = mean_std(&per_angle_acc);
        RotationReport {
            angles,
            per_angle_acc,
            n_correct,
            n_total,
            orig_acc,
            mean,
            std,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `0, 10, ..., 350`.
pub fn default_angles() -> Vec<i64> {
    (0..36).map(|i| i * 10).collect()
}

/// Rotate every image by each angle (filling uncovered pixels with `fill`,
/// one value per channel) and classify. Angles are independent jobs.
pub fn rotation_sweep<M: Classifier + ?Sized>(
    model: &M,
    set: &LabeledSet,
    angles: &[i64],
    fill: &[f32],
) -> Result<RotationReport> {
    if set.is_empty() {
        return Err(Error::Argument("cannot sweep an empty set".into()));
    }
    if angles.is_empty() {
        return Err(Error::Argument("no angles to sweep".into()));
    }
    let counts = crate::par_map(angles, |&angle| {
        let rotated = set
            .images
            .iter()
            .map(|img| rotate_image(img, angle as f64, fill))
            .collect::<Result<Vec<_>>>()?;
        count_correct(model, &rotated, &set.labels)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = set.len();
    let orig_acc = match angles.iter().position(|&a| a.rem_euclid(360) == 0) {
        Some(i) => counts[i] as f64 / n as f64,
        None => accuracy(model, set)?,
    };
    Ok(RotationReport::from_counts(angles.to_vec(), counts, n, orig_acc))
}

/// Per-token cosine statistics for one rotation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenSummary {
    pub rotation: u32,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub frac_ge_099: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEquivReport {
    /// Degrees, multiples of 90.
    pub rotations: Vec<u32>,
    pub n_images: usize,
    pub n_tokens: usize,
    /// One `[n_images * n_tokens]` row-major matrix per rotation.
    pub cosines: Vec<Vec<f64>>,
    pub summaries: Vec<TokenSummary>,
}

/// Cosine similarity; two zero vectors count as identical, one zero vector as orthogonal.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        // one square root keeps cos(a, a) exactly 1
        _ => (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn summarize_cosines(rotation: u32, cos: &[f64]) -> TokenSummary {
    let mut sorted = cos.to_vec();
    sorted.sort_by(f64::total_cmp);
    TokenSummary {
        rotation,
        median: median(&sorted),
        mean: cos.iter().sum::<f64>() / cos.len() as f64,
        min: sorted[0],
        frac_ge_099: cos.iter().filter(|&&c| c >= 0.99).count() as f64 / cos.len() as f64,
    }
}

/// Embed each image and its quarter-turned copies, undo the turn on the
/// token grid, and compare tokens by cosine similarity.
pub fn token_equivariance<M: TokenEmbedder + ?Sized>(
    model: &M,
    images: &[Tensor<f32>],
    rotations: &[u32],
) -> Result<TokenEquivReport> {
    if images.is_empty() {
        return Err(Error::Argument("no images to analyze".into()));
    }
    let mut turns = Vec::with_capacity(rotations.len());
    for &r in rotations {
        if r % 90 != 0 {
            return Err(Error::Argument(format!(
                "token analysis takes quarter turns only, got {r} degrees"
            )));
        }
        turns.push(((r / 90) % 4) as usize);
    }
    let batch = stack_batch(&images.iter().collect::<Vec<_>>())?;
    let base = model.tokens(&batch)?;
    let &[n, t, d] = base.shape() else {
        return Err(Error::Contract(format!(
            "tokens must be [N, T, D], got {:?}",
            base.shape()
        )));
    };
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return Err(Error::Contract(format!("{t} tokens do not form a square grid")));
    }
    let mut cosines = Vec::with_capacity(turns.len());
    let mut summaries = Vec::with_capacity(turns.len());
    for (&deg, &k) in rotations.iter().zip(&turns) {
        let rotated = if k == 0 {
            base.clone()
        } else {
            model.tokens(&rot90_batch(&batch, k)?)?
        };
        let perm = rot90_token_permutation(g, k)?;
        let cos: Vec<f64> = (0..n * t)
            .map(|j| {
                let (img, tok) = (j / t, j % t);
                cosine(
                    &base.data()[(img * t + tok) * d..][..d],
                    &rotated.data()[(img * t + perm[tok]) * d..][..d],
                )
            })
            .collect();
        summaries.push(summarize_cosines(deg, &cos));
        cosines.push(cos);
    }
    Ok(TokenEquivReport {
        rotations: rotations.to_vec(),
        n_images: n,
        n_tokens: t,
        cosines,
        summaries,
    })
}
