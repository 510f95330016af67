//! Browser bindings: kernel synthesis, image rotation and token-grid equivariance maps.

use equipatch::data::{rotate_image, synth_image, SynthSpec, CLASS_NAMES};
use equipatch::evalsuite::token_equivariance;
use equipatch::gmr::{build_basis, kernel_invariance_report, ring_spec, GmrConvLayer, DEFAULT_SIGMA_RATIO};
use equipatch::tensorkit::Tensor;
use equipatch::vit::{build_model, PatchEmbedConfig, StageKind, ViTConfig, ViTModel};
use equipatch::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const IMG_SIZE: usize = 64;
const CHANNELS: usize = 3;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

pub fn ring_kernel(k: usize, weights: &[f32]) -> Result<Vec<f32>> {
    let spec = ring_spec(k, DEFAULT_SIGMA_RATIO)?;
    if weights.len() != spec.n_rings() {
        return Err(Error::Argument(format!(
            "k={k} needs {} ring weights, got {}",
            spec.n_rings(),
            weights.len()
        )));
    }
    let basis = build_basis(&spec);
    let w = Tensor::new(&[1, 1, spec.n_rings()], weights.to_vec())?;
    let layer = GmrConvLayer::new(spec, w, Tensor::zeros(&[1]), 1, 0)?;
    Ok(layer.synthesize_kernels(&basis)?.into_vec())
}

/// `[rot90_dev, flip_dev, continuous_dev, max_abs]` of one `k x k` kernel.
pub fn kernel_symmetry(kernel: &[f32], k: usize) -> Result<Vec<f64>> {
    let t = Tensor::new(&[k, k], kernel.to_vec())?;
    let r = kernel_invariance_report(&t)?;
    Ok(vec![r.rot90_dev, r.flip_dev, r.continuous_dev, r.max_abs])
}

pub fn dense_kernel(k: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn sample_image(class_id: usize, index: usize, seed: u64) -> Result<Vec<f32>> {
    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    Ok(synth_image(&spec, class_id, index)?.into_vec())
}

fn as_image(image: &[f32]) -> Result<Tensor<f32>> {
    Tensor::new(&[CHANNELS, IMG_SIZE, IMG_SIZE], image.to_vec())
}

/// Rotate counter-clockwise about the center; uncovered pixels take the channel mean.
pub fn rotate(image: &[f32], angle_deg: f64) -> Result<Vec<f32>> {
    let img = as_image(image)?;
    let plane = IMG_SIZE * IMG_SIZE;
    let fill: Vec<f32> = image
        .chunks_exact(plane)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Ok(rotate_image(&img, angle_deg, &fill)?.into_vec())
}

/// Channels-first `[3, S, S]` in `[0, 1]` to RGBA bytes for a canvas.
pub fn rgba(image: &[f32], size: usize) -> Vec<u8> {
    let plane = size * size;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for ch in 0..CHANNELS {
            let v = image.get(ch * plane + i).copied().unwrap_or(0.0);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Randomly initialized embeddings of the two kinds the page compares.
pub struct Embedders {
    gmr: ViTModel,
    linear: ViTModel,
}

impl Embedders {
    pub fn new(seed: u64) -> Result<Self> {
        let mut gmr = ViTConfig::tiny(StageKind::Gmr);
        gmr.embed = PatchEmbedConfig::ablation("6-6-6", StageKind::Gmr, 32, gmr.embed_dim)?;
        Ok(Embedders {
            gmr: build_model(&gmr, seed)?,
            linear: build_model(&ViTConfig::tiny_linear(), seed)?,
        })
    }

    pub fn grid(&self) -> usize {
        self.gmr.config().grid().expect("validated at construction")
    }

    /// Cosine of every token with its counterpart after `turns` quarter turns, in grid order.
    pub fn cosines(&self, image: &[f32], turns: u32, gmr: bool) -> Result<Vec<f64>> {
        if turns > 3 {
            return Err(Error::Argument(format!("quarter turns must be 0..=3, got {turns}")));
        }
        let model = if gmr { &self.gmr } else { &self.linear };
        let report = token_equivariance(model, &[as_image(image)?], &[turns * 90])?;
        Ok(report.cosines.into_iter().next().unwrap_or_default())
    }
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[wasm_bindgen]
pub fn image_size() -> usize {
    IMG_SIZE
}

#[wasm_bindgen]
pub fn ring_count(k: usize) -> std::result::Result<usize, JsError> {
    Ok(ring_spec(k, DEFAULT_SIGMA_RATIO).map_err(js)?.n_rings())
}

#[wasm_bindgen(js_name = ringKernel)]
pub fn ring_kernel_js(k: usize, weights: &[f32]) -> std::result::Result<Vec<f32>, JsError> {
    ring_kernel(k, weights).map_err(js)
}

#[wasm_bindgen(js_name = denseKernel)]
pub fn dense_kernel_js(k: usize, seed: u32) -> Vec<f32> {
    dense_kernel(k, seed as u64)
}

#[wasm_bindgen(js_name = kernelSymmetry)]
pub fn kernel_symmetry_js(kernel: &[f32], k: usize) -> std::result::Result<Vec<f64>, JsError> {
    kernel_symmetry(kernel, k).map_err(js)
}

#[wasm_bindgen(js_name = sampleImage)]
pub fn sample_image_js(class_id: usize, index: usize, seed: u32) -> std::result::Result<Vec<f32>, JsError> {
    sample_image(class_id, index, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = rotateImage)]
pub fn rotate_js(image: &[f32], angle_deg: f64) -> std::result::Result<Vec<f32>, JsError> {
    rotate(image, angle_deg).map_err(js)
}

#[wasm_bindgen(js_name = toRgba)]
pub fn rgba_js(image: &[f32], size: usize) -> Vec<u8> {
    rgba(image, size)
}

#[wasm_bindgen(js_name = TokenProbe)]
pub struct TokenProbe(Embedders);

#[wasm_bindgen(js_class = TokenProbe)]
impl TokenProbe {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<TokenProbe, JsError> {
        Embedders::new(seed as u64).map(TokenProbe).map_err(js)
    }

    pub fn grid(&self) -> usize {
        self.0.grid()
    }

    pub fn cosines(&self, image: &[f32], turns: u32, gmr: bool) -> std::result::Result<Vec<f64>, JsError> {
        self.0.cosines(image, turns, gmr).map_err(js)
    }
}
