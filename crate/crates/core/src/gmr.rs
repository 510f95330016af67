//! Gaussian-ring convolution kernels.
//!
//! A kernel of size `k` is a learnable weighted sum of `ceil(k/2)` fixed basis
//! slices. Slice `i` holds a Gaussian of the distance to the grid center,
//! peaked at radius `radii[i]`, so every synthesized kernel is radially
//! symmetric: invariant under quarter turns and flips of the grid, and close
//! to invariant under arbitrary in-plane rotations.

use std::io::Write;
use std::path::Path;

use crate::data::rotate_plane;
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::tensorkit::{Element, Tape, Tensor, Var};

pub const DEFAULT_SIGMA_RATIO: f64 = 0.5;

/// Ring radii and widths for one kernel size.
#[derive(Clone, Debug, PartialEq)]
pub struct RingSpec {
    k: usize,
    sigma_ratio: f64,
    radii: Vec<f64>,
    sigma: Vec<f64>,
}

impl RingSpec {
    pub fn new(k: usize, sigma_ratio: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::Argument("kernel size must be at least 1".into()));
        }
        if !(sigma_ratio > 0.0 && sigma_ratio.is_finite()) {
            return Err(Error::Argument(format!(
                "sigma ratio must be positive, got {sigma_ratio}"
            )));
        }
        let n = k.div_ceil(2);
        let outer = (k as f64 - 1.0) / 2.0;
        // A lone ring sits at the center; give it a one-cell spacing for its width.
        let spacing = if n > 1 { outer / (n - 1) as f64 } else { 1.0 };
        Ok(RingSpec {
            k,
            sigma_ratio,
            radii: (0..n).map(|i| i as f64 * spacing).collect(),
            sigma: vec![sigma_ratio * spacing; n],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_rings(&self) -> usize {
        self.radii.len()
    }

    pub fn sigma_ratio(&self) -> f64 {
        self.sigma_ratio
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Distance from cell `(u, v)` to the grid center `((k-1)/2, (k-1)/2)`.
    pub fn distance(&self, u: usize, v: usize) -> f64 {
        let c = (self.k as f64 - 1.0) / 2.0;
        (u as f64 - c).hypot(v as f64 - c)
    }
}

pub fn ring_spec(k: usize, sigma_ratio: f64) -> Result<RingSpec> {
    RingSpec::new(k, sigma_ratio)
}

/// L1-normalized ring slices, `[n_rings, k, k]`, built in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct GmrBasis {
    spec: RingSpec,
    values: Vec<f64>,
}

impl GmrBasis {
    pub fn spec(&self) -> &RingSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, ring: usize) -> &[f64] {
        let kk = self.spec.k * self.spec.k;
        &self.values[ring * kk..(ring + 1) * kk]
    }

    /// The basis as an `[n_rings, k*k]` matrix.
    pub fn matrix<T: Element>(&self) -> Tensor<T> {
        let kk = self.spec.k * self.spec.k;
        Tensor::from_fn(&[self.spec.n_rings(), kk], |i| T::of(self.values[i]))
    }
}

pub fn build_basis(spec: &RingSpec) -> GmrBasis {
    let k = spec.k;
    let mut values = Vec::with_capacity(spec.n_rings() * k * k);
    for (&r, &s) in spec.radii.iter().zip(&spec.sigma) {
        let start = values.len();
        for u in 0..k {
            for v in 0..k {
                let d = spec.distance(u, v);
                values.push((-(d - r).powi(2) / (2.0 * s * s)).exp());
            }
        }
        let total: f64 = values[start..].iter().sum();
        for x in &mut values[start..] {
            *x /= total;
        }
    }
    GmrBasis {
        spec: spec.clone(),
        values,
    }
}

/// Differentiable kernel synthesis: `weights [c_out, c_in, n]` to `[c_out, c_in, k, k]`.
pub fn synthesize_on_tape<T: Element>(tape: &mut Tape<T>, ring_weights: Var, basis: &GmrBasis) -> Result<Var> {
    let shape = tape.shape(ring_weights).to_vec();
    let [c_out, c_in, n] = shape[..] else {
        return Err(Error::Dimension(format!(
            "ring weights must be [c_out, c_in, n_rings], got {shape:?}"
        )));
    };
    if n != basis.spec.n_rings() {
        return Err(Error::Contract(format!(
            "{n} ring weights per filter but the basis has {} rings",
            basis.spec.n_rings()
        )));
    }
    let k = basis.spec.k;
    let flat = tape.reshape(ring_weights, &[c_out * c_in, n])?;
    let b = tape.constant(basis.matrix());
    let kernels = tape.matmul(flat, b)?;
    tape.reshape(kernels, &[c_out, c_in, k, k])
}

/// Convolution with a Gaussian-ring kernel: synthesize, then reuse `conv2d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmrConvLayer<T: Element = f32> {
    pub spec: RingSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub ring_weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> GmrConvLayer<T> {
    pub fn new(spec: RingSpec, ring_weights: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let &[c_out, c_in, n] = ring_weights.shape() else {
            return Err(Error::Dimension(format!(
                "ring weights must be [c_out, c_in, n_rings], got {:?}",
                ring_weights.shape()
            )));
        };
        if n != spec.n_rings() || bias.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "weights {:?} / bias {:?} do not fit {} rings",
                ring_weights.shape(),
                bias.shape(),
                spec.n_rings()
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("stride must be positive".into()));
        }
        Ok(GmrConvLayer {
            spec,
            c_in,
            c_out,
            ring_weights,
            bias,
            stride,
            pad,
        })
    }

    fn check_basis(&self, basis: &GmrBasis) -> Result<()> {
        if basis.spec != self.spec {
            return Err(Error::Contract(format!(
                "basis built for k={} does not match layer spec k={}",
                basis.spec.k, self.spec.k
            )));
        }
        Ok(())
    }

    pub fn synthesize_kernels(&self, basis: &GmrBasis) -> Result<Tensor<T>> {
        self.check_basis(basis)?;
        let mut tape = Tape::new();
        let w = tape.constant(self.ring_weights.clone());
        let k = synthesize_on_tape(&mut tape, w, basis)?;
        Ok(tape.value(k).clone())
    }

    pub fn forward(&self, x: &Tensor<T>, basis: &GmrBasis) -> Result<Tensor<T>> {
        self.check_basis(basis)?;
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let w = tape.constant(self.ring_weights.clone());
        let b = tape.constant(self.bias.clone());
        let y = gmr_forward(&mut tape, x, w, b, basis, self.stride, self.pad)?;
        Ok(tape.value(y).clone())
    }

    pub fn param_count(&self) -> ParamCount {
        gmr_param_count(self.c_in, self.c_out, self.spec.k)
    }
}

/// Recorded GMR convolution; gradients reach `ring_weights` and `bias`.
pub fn gmr_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    ring_weights: Var,
    bias: Var,
    basis: &GmrBasis,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let kernels = synthesize_on_tape(tape, ring_weights, basis)?;
    tape.conv2d(x, kernels, bias, stride, pad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub params: usize,
    pub dense_equivalent: usize,
    pub ratio: f64,
}

pub fn gmr_param_count(c_in: usize, c_out: usize, k: usize) -> ParamCount {
    let n = k.div_ceil(2);
    let params = c_out * c_in * n + c_out;
    let dense_equivalent = c_out * c_in * k * k + c_out;
    ParamCount {
        params,
        dense_equivalent,
        ratio: dense_equivalent as f64 / params as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvarianceReport {
    /// Max |K - rot90(K)|.
    pub rot90_dev: f64,
    /// Max |K - hflip(K)|.
    pub flip_dev: f64,
    /// Max over 10..=80 degrees of |K - bilinear_rotate(K)|.
    pub continuous_dev: f64,
    /// Max |K|, for scaling the deviations.
    pub max_abs: f64,
}

/// Measure how far every `k x k` slice of `kernel` is from rotation/reflection invariance.
pub fn kernel_invariance_report<T: Element>(kernel: &Tensor<T>) -> Result<InvarianceReport> {
    let shape = kernel.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::Argument(format!("kernels must be square, got {shape:?}")));
    }
    let k = shape[shape.len() - 1];
    let data: Vec<f64> = kernel.data().iter().map(|v| v.f64()).collect();
    let mut report = InvarianceReport {
        rot90_dev: 0.0,
        flip_dev: 0.0,
        continuous_dev: 0.0,
        max_abs: data.iter().fold(0.0, |m, v| m.max(v.abs())),
    };
    for slice in data.chunks_exact(k * k) {
        for u in 0..k {
            for v in 0..k {
                let here = slice[u * k + v];
                // counter-clockwise quarter turn: out[u][v] = in[v][k-1-u]
                let rot = slice[v * k + (k - 1 - u)];
                let flip = slice[u * k + (k - 1 - v)];
                report.rot90_dev = report.rot90_dev.max((here - rot).abs());
                report.flip_dev = report.flip_dev.max((here - flip).abs());
            }
        }
        for angle in (10..=80).step_by(10) {
            let rotated = rotate_plane(slice, k, angle as f64, 0.0);
            let dev = slice
                .iter()
                .zip(&rotated)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            report.continuous_dev = report.continuous_dev.max(dev);
        }
    }
    Ok(report)
}

/// Write every `k x k` grid of `kernel` (`[..., k, k]`) as CSV rows
/// `index,row,v0,...,v{k-1}`, where `index` enumerates the leading axes.
pub fn write_grids_csv<T: Element>(kernel: &Tensor<T>, header_index: &str, path: &Path) -> Result<()> {
    let shape = kernel.shape();
    if shape.len() < 2 {
        return Err(Error::Argument("grids need at least two axes".into()));
    }
    let k = shape[shape.len() - 1];
    let mut out = String::new();
    out.push_str(header_index);
    out.push_str(",row");
    for v in 0..k {
        out.push_str(&format!(",v{v}"));
    }
    out.push('\n');
    for (g, grid) in kernel.data().chunks_exact(k * k).enumerate() {
        for (r, row) in grid.chunks_exact(k).enumerate() {
            out.push_str(&format!("{g},{r}"));
            for v in row {
                out.push(',');
                out.push_str(&sig9(v.f64() as f32 as f64));
            }
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
