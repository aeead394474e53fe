//! Modulated-cosine decoder.
//!
//! Each synthesis kernel is `w_c[l] = cos(2 pi g(f_c) l + rho_c) b_c[l]` where
//! `g(f) = f^2` (default) or `g(f) = f`. Only `f`, `rho` and `b` are trainable;
//! the kernels are rebuilt from them on every forward pass. Synthesis is a strided
//! transposed convolution: each frame of `A` weights the kernels and the resulting
//! length-`L` blocks are overlap-added every `S` samples.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};

use crate::encoder::{frame_matrix, overlap_add};
use crate::error::{Error, Result};

pub const MEL_LOW_HZ: f64 = 30.0;
pub const MEL_HIGH_HZ: f64 = 22050.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParameters {
    /// Sampling-rate-normalised carrier frequencies, length `C`.
    pub frequencies: Array1<f64>,
    /// Phases in radians, length `C`.
    pub phases: Array1<f64>,
    /// Modulators `b_c`, `C x L`.
    pub modulators: Array2<f64>,
    /// Use `f_c^2` inside the cosine.
    pub square_freq: bool,
    pub stride: usize,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `C` carrier frequencies equally spaced on the Mel scale between `f_lo` and `f_hi`,
/// divided by the sample rate.
pub fn mel_init_frequencies(components: usize, f_lo: f64, f_hi: f64, sample_rate: f64) -> Result<Array1<f64>> {
    if components < 2 {
        return Err(Error::InvalidConfig(format!(
            "Mel initialisation needs at least 2 components, got {components}"
        )));
    }
    if !(0.0 < f_lo && f_lo < f_hi) {
        return Err(Error::InvalidConfig(format!("bad Mel range {f_lo}..{f_hi} Hz")));
    }
    let (lo, hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let step = (hi - lo) / (components - 1) as f64;
    let top = f_hi / sample_rate;
    Ok(Array1::from_shape_fn(components, |c| {
        let hz = if c == 0 {
            f_lo
        } else if c == components - 1 {
            f_hi
        } else {
            mel_to_hz(lo + step * c as f64)
        };
        (hz / sample_rate).min(top)
    }))
}

impl DecoderParameters {
    /// `rho = 0`, `b = 1 / (C + L)`, Mel-spaced carriers.
    pub fn init(components: usize, kernel_len: usize, stride: usize, square_freq: bool) -> Result<Self> {
        if kernel_len == 0 || stride == 0 {
            return Err(Error::InvalidConfig("decoder dimensions must be positive".into()));
        }
        let frequencies = mel_init_frequencies(
            components,
            MEL_LOW_HZ,
            MEL_HIGH_HZ,
            f64::from(crate::dataset::SAMPLE_RATE),
        )?;
        Ok(DecoderParameters {
            frequencies,
            phases: Array1::zeros(components),
            modulators: Array2::from_elem(
                (components, kernel_len),
                1.0 / (components + kernel_len) as f64,
            ),
            square_freq,
            stride,
        })
    }

    pub fn components(&self) -> usize {
        self.frequencies.len()
    }

    pub fn kernel_len(&self) -> usize {
        self.modulators.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.components();
        if self.phases.len() != c || self.modulators.nrows() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c, self.kernel_len()],
                found: vec![self.phases.len(), self.modulators.nrows()],
            });
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("decoder stride must be positive".into()));
        }
        let all = self
            .frequencies
            .iter()
            .chain(self.phases.iter())
            .chain(self.modulators.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder parameters".into()));
        }
        Ok(())
    }

    /// The frequency actually used inside the cosine.
    pub fn effective_frequency(&self, c: usize) -> f64 {
        let f = self.frequencies[c];
        if self.square_freq {
            f * f
        } else {
            f
        }
    }

    /// Component indices ordered by ascending carrier frequency (ties keep index order).
    pub fn frequency_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.components()).collect();
        order.sort_by(|&a, &b| self.frequencies[a].total_cmp(&self.frequencies[b]));
        order
    }

    /// Reorders components; pair with the same permutation of the representation rows.
    pub fn permuted(&self, order: &[usize]) -> Self {
        DecoderParameters {
            frequencies: self.frequencies.select(Axis(0), order),
            phases: self.phases.select(Axis(0), order),
            modulators: self.modulators.select(Axis(0), order),
            square_freq: self.square_freq,
            stride: self.stride,
        }
    }
}

fn phase_argument(params: &DecoderParameters, c: usize, l: usize) -> f64 {
    2.0 * PI * params.effective_frequency(c) * l as f64 + params.phases[c]
}

/// Synthesis kernels `w`, `C x L`.
pub fn build_kernels(params: &DecoderParameters) -> Array2<f64> {
    Array2::from_shape_fn(params.modulators.raw_dim(), |(c, l)| {
        phase_argument(params, c, l).cos() * params.modulators[[c, l]]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGradients {
    pub frequencies: Array1<f64>,
    pub phases: Array1<f64>,
    pub modulators: Array2<f64>,
}

/// Chain rule from `dL/dw` to the cosine parameters.
pub fn kernel_grads(params: &DecoderParameters, grad_w: &Array2<f64>) -> DecoderGradients {
    let (c_count, len) = params.modulators.dim();
    let mut frequencies = Array1::zeros(c_count);
    let mut phases = Array1::zeros(c_count);
    let mut modulators = Array2::zeros((c_count, len));
    for c in 0..c_count {
        let f = params.frequencies[c];
        let dg_df = if params.square_freq { 2.0 * f } else { 1.0 };
        let mut d_rho = 0.0;
        let mut d_f = 0.0;
        for l in 0..len {
            let theta = phase_argument(params, c, l);
            let g = grad_w[[c, l]];
            modulators[[c, l]] = g * theta.cos();
            let d_theta = -g * theta.sin() * params.modulators[[c, l]];
            d_rho += d_theta;
            d_f += d_theta * 2.0 * PI * l as f64;
        }
        phases[c] = d_rho;
        frequencies[c] = d_f * dg_df;
    }
    DecoderGradients {
        frequencies,
        phases,
        modulators,
    }
}

/// Modulated components `X^ = w^T A`, `L x T`.
pub fn synthesis_matrix(activations: &Array2<f64>, kernels: &Array2<f64>) -> Result<Array2<f64>> {
    if activations.nrows() != kernels.nrows() {
        return Err(Error::ShapeMismatch {
            expected: vec![kernels.nrows(), activations.ncols()],
            found: vec![activations.nrows(), activations.ncols()],
        });
    }
    Ok(kernels.t().dot(activations))
}

/// Length of the untruncated overlap-add output, `(T - 1) S + L`.
pub fn full_length(frames: usize, stride: usize, kernel_len: usize) -> usize {
    if frames == 0 {
        0
    } else {
        (frames - 1) * stride + kernel_len
    }
}

/// Overlap-add synthesis truncated (or zero-extended) to `out_len` samples.
pub fn synthesize_with_kernels(
    activations: &Array2<f64>,
    kernels: &Array2<f64>,
    stride: usize,
    out_len: usize,
) -> Result<Vec<f64>> {
    let blocks = synthesis_matrix(activations, kernels)?;
    Ok(overlap_add(&blocks, stride, out_len))
}

/// Decodes `activations` (`C x T`) with freshly built kernels. `out_len = None`
/// keeps the full `(T - 1) S + L` samples.
pub fn synthesize(activations: &Array2<f64>, params: &DecoderParameters, out_len: Option<usize>) -> Result<Vec<f64>> {
    let kernels = build_kernels(params);
    let n = out_len.unwrap_or_else(|| full_length(activations.ncols(), params.stride, params.kernel_len()));
    synthesize_with_kernels(activations, &kernels, params.stride, n)
}

/// Gradients of `synthesize_with_kernels` with respect to (activations, kernels).
pub fn synthesize_grads(
    activations: &Array2<f64>,
    kernels: &Array2<f64>,
    stride: usize,
    grad_out: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    // dX^[l, t] = dx^[S t + l], zero past the output
    let mut grad_blocks = frame_matrix(grad_out, stride, kernels.ncols());
    let frames = activations.ncols();
    if grad_blocks.nrows() != frames {
        let mut resized = Array2::zeros((frames, kernels.ncols()));
        let keep = frames.min(grad_blocks.nrows());
        resized
            .slice_mut(ndarray::s![..keep, ..])
            .assign(&grad_blocks.slice(ndarray::s![..keep, ..]));
        grad_blocks = resized;
    }
    // X^ = w^T A  =>  dA = w dX^,  dw = A dX^^T   (grad_blocks is dX^^T, T x L)
    let grad_activations = kernels.dot(&grad_blocks.t());
    let grad_kernels = activations.dot(&grad_blocks);
    (grad_activations, grad_kernels)
}
