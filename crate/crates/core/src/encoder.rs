//! Two-layer convolutional encoder.
//!
//! The first layer is a strided cross-correlation of the signal with `C` kernels of
//! length `L`. The second layer is a unit-stride dilated convolution over the first
//! layer's output with `C` kernels of shape `L' x C`. The representation is the
//! rectified sum of both layers.

use ndarray::{s, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters {
    /// First-layer kernels, `C x L`.
    pub kernels: Array2<f64>,
    /// Second-layer kernels indexed `[c_out, l', c_in]`, `C x L' x C`.
    pub dilated_kernels: Array3<f64>,
    pub stride: usize,
    pub dilation: usize,
}

/// Output nonlinearity. `Identity` is a test hook that makes the encoder linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    /// `A`, `C x T`, non-negative under [`Activation::Relu`].
    pub activations: Array2<f64>,
    /// First-layer output `H~`.
    pub latent: Array2<f64>,
    /// Second-layer output `H`.
    pub dilated: Array2<f64>,
}

impl Representation {
    pub fn components(&self) -> usize {
        self.activations.nrows()
    }

    pub fn frames(&self) -> usize {
        self.activations.ncols()
    }
}

/// `ceil(n / stride)`.
pub fn num_frames(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

impl EncoderParameters {
    pub fn components(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernels.ncols()
    }

    pub fn dilated_len(&self) -> usize {
        self.dilated_kernels.len_of(Axis(1))
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.components();
        let (co, lp, ci) = self.dilated_kernels.dim();
        if co != c || ci != c || lp == 0 || self.kernel_len() == 0 || c == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![c, lp, c],
                found: vec![co, lp, ci],
            });
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidConfig("stride and dilation must be positive".into()));
        }
        if self.kernels.iter().chain(self.dilated_kernels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder kernels".into()));
        }
        Ok(())
    }
}

/// Draws every kernel entry i.i.d. from `U(-sqrt(3/C), sqrt(3/C))`.
pub fn init_encoder(
    components: usize,
    kernel_len: usize,
    dilated_len: usize,
    stride: usize,
    dilation: usize,
    seed: u64,
) -> Result<EncoderParameters> {
    if components == 0 || kernel_len == 0 || dilated_len == 0 || stride == 0 || dilation == 0 {
        return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
    }
    let bound = init_bound(components);
    let dist = Uniform::new(-bound, bound).expect("finite bounds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = Array2::from_shape_simple_fn((components, kernel_len), || dist.sample(&mut rng));
    let dilated_kernels = Array3::from_shape_simple_fn((components, dilated_len, components), || {
        dist.sample(&mut rng)
    });
    Ok(EncoderParameters {
        kernels,
        dilated_kernels,
        stride,
        dilation,
    })
}

pub fn init_bound(components: usize) -> f64 {
    (3.0 / components as f64).sqrt()
}

/// Strided windows of the right-zero-padded signal, `T x L`: `F[t, l] = x[S t + l]`.
pub fn frame_matrix(x: &[f64], stride: usize, kernel_len: usize) -> Array2<f64> {
    let frames = num_frames(x.len(), stride);
    let mut out = Array2::zeros((frames, kernel_len));
    for (t, mut row) in out.outer_iter_mut().enumerate() {
        let start = t * stride;
        let end = (start + kernel_len).min(x.len());
        if start < end {
            row.slice_mut(s![..end - start])
                .assign(&ArrayView1::from(&x[start..end]));
        }
    }
    out
}

/// `H~[c, t] = sum_l x[S t + l] k_c[l]`, `C x ceil(N/S)`.
pub fn conv1(x: &[f64], kernels: &Array2<f64>, stride: usize) -> Array2<f64> {
    let frames = frame_matrix(x, stride, kernels.ncols());
    kernels.dot(&frames.t())
}

/// Gradient of `conv1` with respect to the kernels.
pub fn conv1_kernel_grad(x: &[f64], grad_out: &Array2<f64>, stride: usize, kernel_len: usize) -> Array2<f64> {
    grad_out.dot(&frame_matrix(x, stride, kernel_len))
}

/// Gradient of `conv1` with respect to the signal (a strided transposed convolution).
pub fn conv1_input_grad(kernels: &Array2<f64>, grad_out: &Array2<f64>, stride: usize, n: usize) -> Vec<f64> {
    let cols = kernels.t().dot(grad_out);
    overlap_add(&cols, stride, n)
}

/// Places column `t` of `frames` (`L x T`) at offset `S t` and sums, keeping `n` samples.
pub fn overlap_add(frames: &Array2<f64>, stride: usize, n: usize) -> Vec<f64> {
    let (len, count) = frames.dim();
    let mut out = vec![0.0; n];
    for t in 0..count {
        let start = t * stride;
        if start >= n {
            break;
        }
        let end = (start + len).min(n);
        for (o, v) in out[start..end].iter_mut().zip(frames.column(t)) {
            *o += v;
        }
    }
    out
}

/// `H[c', t] = sum_c sum_l' H~[c, t + phi l'] K'[c', l', c]` with `H~` zero beyond its last frame.
pub fn dilated_conv(input: &Array2<f64>, kernels: &Array3<f64>, dilation: usize) -> Array2<f64> {
    let (c_out, taps, _) = kernels.dim();
    let frames = input.ncols();
    let mut out = Array2::zeros((c_out, frames));
    for tap in 0..taps {
        let shift = tap * dilation;
        if shift >= frames {
            break;
        }
        let k = kernels.index_axis(Axis(1), tap);
        let shifted = input.slice(s![.., shift..]);
        let mut dst = out.slice_mut(s![.., ..frames - shift]);
        ndarray::linalg::general_mat_mul(1.0, &k, &shifted, 1.0, &mut dst);
    }
    out
}

/// Gradients of `dilated_conv` with respect to (input, kernels).
pub fn dilated_conv_grads(
    input: &Array2<f64>,
    kernels: &Array3<f64>,
    dilation: usize,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array3<f64>) {
    let (_, taps, _) = kernels.dim();
    let frames = input.ncols();
    let mut grad_input = Array2::zeros(input.raw_dim());
    let mut grad_kernels = Array3::zeros(kernels.raw_dim());
    for tap in 0..taps {
        let shift = tap * dilation;
        if shift >= frames {
            break;
        }
        let g = grad_out.slice(s![.., ..frames - shift]);
        let shifted = input.slice(s![.., shift..]);
        grad_kernels
            .index_axis_mut(Axis(1), tap)
            .assign(&g.dot(&shifted.t()));
        let k = kernels.index_axis(Axis(1), tap);
        let mut dst = grad_input.slice_mut(s![.., shift..]);
        ndarray::linalg::general_mat_mul(1.0, &k.t(), &g, 1.0, &mut dst);
    }
    (grad_input, grad_kernels)
}

pub fn activate(pre: &Array2<f64>, activation: Activation) -> Array2<f64> {
    match activation {
        Activation::Relu => pre.mapv(|v| v.max(0.0)),
        Activation::Identity => pre.clone(),
    }
}

/// Full encoder forward pass; all intermediates are kept for back-propagation.
pub fn encode(x: &[f64], params: &EncoderParameters, activation: Activation) -> Representation {
    let latent = conv1(x, &params.kernels, params.stride);
    let dilated = dilated_conv(&latent, &params.dilated_kernels, params.dilation);
    let activations = activate(&(&dilated + &latent), activation);
    Representation {
        activations,
        latent,
        dilated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn brute_conv1(x: &[f64], k: &Array2<f64>, stride: usize) -> Array2<f64> {
        let t_count = x.len().div_ceil(stride);
        Array2::from_shape_fn((k.nrows(), t_count), |(c, t)| {
            (0..k.ncols())
                .map(|l| x.get(stride * t + l).copied().unwrap_or(0.0) * k[[c, l]])
                .sum()
        })
    }

    fn brute_dilated(h: &Array2<f64>, k: &Array3<f64>, phi: usize) -> Array2<f64> {
        let (co, taps, ci) = k.dim();
        let t_count = h.ncols();
        Array2::from_shape_fn((co, t_count), |(o, t)| {
            let mut acc = 0.0;
            for c in 0..ci {
                for l in 0..taps {
                    if t + phi * l < t_count {
                        acc += h[[c, t + phi * l]] * k[[o, l, c]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn init_bounds_and_determinism() {
        assert!((init_bound(800) - 0.061237).abs() < 1e-6);
        let a = init_encoder(4, 16, 3, 2, 2, 7).unwrap();
        let b = init_encoder(4, 16, 3, 2, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(4, 16, 3, 2, 2, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.dilated_kernels.dim(), (4, 3, 4));
        assert!(init_encoder(0, 16, 3, 2, 2, 7).is_err());
    }

    #[test]
    fn init_fills_the_uniform_range() {
        // C = 3 gives bounds of exactly +-1; 1e6 draws should reach both ends.
        let p = init_encoder(3, 1000, 1, 1, 1, 11).unwrap();
        let mut values: Vec<f64> = p.kernels.iter().copied().collect();
        let extra = init_encoder(3, 332_334, 1, 1, 1, 12).unwrap();
        values.extend(extra.kernels.iter().copied());
        assert!(values.len() >= 1_000_000);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(min > -1.0 && min < -0.99, "min {min}");
        assert!(max < 1.0 && max > 0.99, "max {max}");
    }

    #[test]
    fn conv1_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(conv1(&x, &array![[1.0, 1.0]], 2), array![[3.0, 7.0]]);
        let impulse = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let h = conv1(&x, &impulse, 1);
        assert_eq!(h.row(0).to_vec(), x.to_vec());
        assert_eq!(h.row(1).to_vec(), x.to_vec());
        assert!(conv1(&[0.0; 9], &impulse, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_is_ceiling() {
        let k = Array2::ones((2, 5));
        for n in 1..40 {
            for s in 1..7 {
                let x = vec![1.0; n];
                assert_eq!(conv1(&x, &k, s).ncols(), n.div_ceil(s));
            }
        }
    }

    #[test]
    fn toy_encode() {
        let params = EncoderParameters {
            kernels: array![[1.0]],
            dilated_kernels: Array3::ones((1, 1, 1)),
            stride: 1,
            dilation: 1,
        };
        let rep = encode(&[1.0, 2.0, 3.0, 4.0], &params, Activation::Relu);
        assert_eq!(rep.latent, array![[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(rep.dilated, array![[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(rep.activations, array![[2.0, 4.0, 6.0, 8.0]]);
    }

    #[test]
    fn zero_second_layer_is_rectified_first_layer() {
        let mut params = init_encoder(3, 6, 2, 2, 3, 1).unwrap();
        params.dilated_kernels.fill(0.0);
        let x: Vec<f64> = (0..17).map(|i| (i as f64 * 0.7).sin()).collect();
        let rep = encode(&x, &params, Activation::Relu);
        assert_eq!(rep.activations, rep.latent.mapv(|v| v.max(0.0)));
    }

    #[test]
    fn negative_preactivation_gives_zero() {
        let params = EncoderParameters {
            kernels: array![[-1.0]],
            dilated_kernels: Array3::from_elem((1, 2, 1), 0.5),
            stride: 1,
            dilation: 1,
        };
        let rep = encode(&[1.0, 2.0, 0.5], &params, Activation::Relu);
        assert!(rep.activations.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilated_matches_brute_force() {
        let p = init_encoder(3, 4, 3, 2, 2, 5).unwrap();
        let h = Array2::from_shape_fn((3, 7), |(c, t)| ((c * 7 + t) as f64).cos());
        let fast = dilated_conv(&h, &p.dilated_kernels, 2);
        let slow = brute_dilated(&h, &p.dilated_kernels, 2);
        assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-12));
        // dilation past the end
        let fast = dilated_conv(&h, &p.dilated_kernels, 5);
        let slow = brute_dilated(&h, &p.dilated_kernels, 5);
        assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn conv1_matches_brute_force(
            x in proptest::collection::vec(-1.0f64..1.0, 1..32),
            stride in 1usize..6,
            len in 1usize..9,
            seed in any::<u64>(),
        ) {
            let p = init_encoder(3, len, 1, stride, 1, seed).unwrap();
            let fast = conv1(&x, &p.kernels, stride);
            let slow = brute_conv1(&x, &p.kernels, stride);
            prop_assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn conv1_is_linear(
            x in proptest::collection::vec(-1.0f64..1.0, 24),
            y in proptest::collection::vec(-1.0f64..1.0, 24),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let p = init_encoder(4, 7, 1, 3, 1, 9).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = conv1(&mix, &p.kernels, 3);
            let rhs = conv1(&x, &p.kernels, 3) * a + conv1(&y, &p.kernels, 3) * b;
            let scale = rhs.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn activations_are_nonnegative(
            x in proptest::collection::vec(-1.0f64..1.0, 1..64),
            seed in any::<u64>(),
        ) {
            let p = init_encoder(3, 5, 2, 2, 2, seed).unwrap();
            let rep = encode(&x, &p, Activation::Relu);
            prop_assert!(rep.activations.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(rep.frames(), x.len().div_ceil(2));
        }

        #[test]
        fn nonnegative_path_reduces_to_strided_correlation(
            x in proptest::collection::vec(0.0f64..1.0, 1..32),
            stride in 1usize..5,
        ) {
            let mut p = init_encoder(2, 4, 2, stride, 1, 3).unwrap();
            p.kernels.mapv_inplace(f64::abs);
            p.dilated_kernels.fill(0.0);
            let rep = encode(&x, &p, Activation::Relu);
            let slow = brute_conv1(&x, &p.kernels, stride);
            for (a, b) in rep.activations.iter().zip(slow.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
