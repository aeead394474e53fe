//! Hamming-windowed STFT and its overlap-add inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub const WINDOW_LEN: usize = 2048;
pub const HOP: usize = 256;
pub const BINS: usize = WINDOW_LEN / 2 + 1;

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Forward and inverse transforms sharing one plan and window.
pub struct Stft {
    window: Vec<f64>,
    hop: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("window_len", &self.window.len())
            .field("hop", &self.hop)
            .finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Stft::new(WINDOW_LEN, HOP)
    }
}

impl Stft {
    pub fn new(window_len: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Stft {
            window: hamming(window_len),
            hop,
            forward: planner.plan_fft_forward(window_len),
            inverse: planner.plan_fft_inverse(window_len),
        }
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    pub fn frames(&self, n: usize) -> usize {
        n.div_ceil(self.hop)
    }

    /// One-sided spectrogram, `bins x ceil(n / hop)`; frame `t` starts at `t * hop`
    /// and the signal is zero-padded on the right.
    pub fn stft(&self, x: &[f64]) -> Array2<Complex64> {
        let n = self.window.len();
        let frames = self.frames(x.len());
        let mut out = Array2::zeros((self.bins(), frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = x.get(start + i).copied().unwrap_or(0.0);
                *b = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..self.bins() {
                out[[k, t]] = buf[k];
            }
        }
        out
    }

    /// Windowed overlap-add inverse normalised by the summed squared window.
    pub fn istft(&self, spec: &Array2<Complex64>, len: usize) -> Vec<f64> {
        let n = self.window.len();
        let bins = self.bins();
        let mut out = vec![0.0; len];
        let mut envelope = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..spec.ncols() {
            for k in 0..bins {
                buf[k] = spec[[k, t]];
            }
            for k in bins..n {
                buf[k] = spec[[n - k, t]].conj();
            }
            // DC and Nyquist of a real signal are real
            buf[0].im = 0.0;
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..n {
                let j = start + i;
                if j >= len {
                    break;
                }
                out[j] += buf[i].re / n as f64 * self.window[i];
                envelope[j] += self.window[i] * self.window[i];
            }
        }
        for (o, e) in out.iter_mut().zip(&envelope) {
            if *e > 1e-12 {
                *o /= e;
            }
        }
        out
    }
}

pub fn magnitude(spec: &Array2<Complex64>) -> Array2<f64> {
    spec.mapv(|c| c.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::si_sdr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_round_trips_to_silence() {
        let s = Stft::default();
        let spec = s.stft(&vec![0.0; 5000]);
        assert_eq!(spec.dim(), (BINS, 5000usize.div_ceil(HOP)));
        assert!(spec.iter().all(|c| c.norm() == 0.0));
        assert!(s.istft(&spec, 5000).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let s = Stft::default();
        let bin = 93;
        let x: Vec<f64> = (0..8192)
            .map(|i| (2.0 * PI * bin as f64 * i as f64 / WINDOW_LEN as f64).sin())
            .collect();
        let mag = magnitude(&s.stft(&x));
        let col = mag.column(4);
        let argmax = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, bin);
    }

    #[test]
    fn random_signal_round_trip_exceeds_40_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..44100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Stft::default();
        let y = s.istft(&s.stft(&x), x.len());
        let inner = WINDOW_LEN..x.len() - WINDOW_LEN;
        let v = si_sdr(&x[inner.clone()], &y[inner]).unwrap();
        assert!(v > 40.0, "{v}");
    }

    #[test]
    fn window_is_periodic_hamming() {
        let w = hamming(4);
        assert!((w[0] - 0.08).abs() < 1e-15);
        assert!((w[2] - 1.0).abs() < 1e-15);
    }
}
