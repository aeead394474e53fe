//! Audio ingestion, segmentation, silence filtering and the two corruption
//! processes that produce training pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::wav;

pub const SAMPLE_RATE: u32 = 44100;

/// Stabiliser inside the activity rule; same value as the additivity metric.
pub const ACTIVITY_EPS: f64 = 1e-24;
pub const ACTIVITY_THRESHOLD_DB: f64 = -10.0;

/// Mono time-domain signal at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>) -> Self {
        Signal {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Signal::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.samples
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

impl AsRef<[f64]> for Signal {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}

/// Reads a WAV file and averages its channels into one.
pub fn load_and_downmix(path: &Path) -> Result<Signal> {
    let data = wav::read_wav(path)?;
    if data.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE,
            found: data.sample_rate,
        });
    }
    Ok(Signal::new(data.downmix()))
}

/// Splits `x` into windows of `len` samples starting every `hop` samples.
/// The last window is zero-padded.
pub fn segment(x: &Signal, len: usize, hop: usize) -> Result<Vec<Signal>> {
    if len == 0 || hop == 0 {
        return Err(Error::InvalidConfig(format!(
            "segment length and hop must be positive (len = {len}, hop = {hop})"
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let n = x.len();
    Ok((0..n)
        .step_by(hop)
        .map(|start| {
            let end = (start + len).min(n);
            let mut seg = x.samples[start..end].to_vec();
            seg.resize(len, 0.0);
            Signal {
                samples: seg,
                sample_rate: x.sample_rate,
            }
        })
        .collect())
}

/// Energy of the segment in dB.
pub fn level_db(x: &[f64], eps: f64) -> f64 {
    let energy: f64 = x.iter().map(|v| v * v).sum();
    10.0 * (energy + eps).log10()
}

/// Voice-activity rule: a segment is kept iff `10 log10(|x|^2 + eps) >= threshold_db`.
pub fn is_active(x_v: &[f64], threshold_db: f64, eps: f64) -> bool {
    level_db(x_v, eps) >= threshold_db
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    /// Standard deviation of the additive Gaussian noise. Zero disables it.
    pub gaussian_std: f64,
    pub segment_len: usize,
    pub train_hop: usize,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            gaussian_std: 1e-4,
            segment_len: 44100,
            train_hop: 22050,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_std >= 0.0 && self.gaussian_std.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gaussian_std must be finite and non-negative, got {}",
                self.gaussian_std
            )));
        }
        if self.segment_len == 0 || self.train_hop == 0 || self.train_hop > self.segment_len {
            return Err(Error::InvalidConfig(format!(
                "need 0 < train_hop <= segment_len (hop = {}, len = {})",
                self.train_hop, self.segment_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Clean voice segment.
    pub voice: Vec<f64>,
    /// Voice plus i.i.d. Gaussian noise.
    pub noisy_voice: Vec<f64>,
    /// Voice plus an accompaniment segment, unclipped.
    pub mixture: Vec<f64>,
    pub voice_index: usize,
    pub accompaniment_index: usize,
}

/// Seed-deterministic stream of training pairs for one pass over the voice segments.
///
/// Voice and accompaniment orders are shuffled independently; `epoch` selects an
/// independent random stream so each pass sees a fresh pairing.
pub struct TrainingPairs<'a> {
    voice: &'a [Signal],
    accompaniment: &'a [Signal],
    voice_order: Vec<usize>,
    accompaniment_order: Vec<usize>,
    noise: Normal<f64>,
    gaussian_std: f64,
    rng: ChaCha8Rng,
    pos: usize,
}

/// Builds the pair stream. Fails when either list is empty or any segment has the wrong length.
pub fn make_training_pairs<'a>(
    voice: &'a [Signal],
    accompaniment: &'a [Signal],
    cfg: &CorruptionConfig,
    epoch: u64,
) -> Result<TrainingPairs<'a>> {
    cfg.validate()?;
    if voice.is_empty() || accompaniment.is_empty() {
        return Err(Error::EmptySignal);
    }
    if let Some(bad) = voice
        .iter()
        .chain(accompaniment)
        .find(|s| s.len() != cfg.segment_len)
    {
        return Err(Error::LengthMismatch(cfg.segment_len, bad.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch);
    let mut voice_order: Vec<usize> = (0..voice.len()).collect();
    let mut accompaniment_order: Vec<usize> = (0..accompaniment.len()).collect();
    voice_order.shuffle(&mut rng);
    accompaniment_order.shuffle(&mut rng);
    Ok(TrainingPairs {
        voice,
        accompaniment,
        voice_order,
        accompaniment_order,
        noise: Normal::new(0.0, 1.0).expect("unit normal"),
        gaussian_std: cfg.gaussian_std,
        rng,
        pos: 0,
    })
}

impl Iterator for TrainingPairs<'_> {
    type Item = TrainingPair;

    fn next(&mut self) -> Option<TrainingPair> {
        let vi = *self.voice_order.get(self.pos)?;
        let ai = self.accompaniment_order[self.pos % self.accompaniment_order.len()];
        self.pos += 1;
        let voice = self.voice[vi].samples.clone();
        let acc = &self.accompaniment[ai].samples;
        let mixture = voice.iter().zip(acc).map(|(v, a)| v + a).collect();
        let noisy_voice = if self.gaussian_std == 0.0 {
            voice.clone()
        } else {
            voice
                .iter()
                .map(|v| v + self.gaussian_std * self.noise.sample(&mut self.rng))
                .collect()
        };
        Some(TrainingPair {
            voice,
            noisy_voice,
            mixture,
            voice_index: vi,
            accompaniment_index: ai,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.voice_order.len() - self.pos;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for TrainingPairs<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(v: &[f64]) -> Signal {
        Signal::new(v.to_vec())
    }

    #[test]
    fn downmix_is_channel_mean() {
        let data = wav::WavData {
            sample_rate: 44100,
            channels: 2,
            interleaved: vec![0.5, -0.5, 0.25, 0.75],
        };
        assert_eq!(data.downmix(), vec![0.0, 0.5]);
    }

    #[test]
    fn load_rejects_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        wav::write_wav_f32(&path, &[0.1, 0.2], 48000).unwrap();
        assert!(matches!(
            load_and_downmix(&path),
            Err(Error::SampleRate { found: 48000, .. })
        ));
    }

    #[test]
    fn load_stereo_pcm16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        wav::write_wav_pcm16(&path, &[16384, -16384, -32768, -32768], 2, 44100).unwrap();
        let x = load_and_downmix(&path).unwrap();
        assert_eq!(x.samples, vec![0.0, -1.0]);
        assert_eq!(x.sample_rate, 44100);
    }

    #[test]
    fn segment_counts() {
        let x = Signal::zeros(44100);
        let segs = segment(&x, 44100, 22050).unwrap();
        assert_eq!(segs.len(), 2);

        let x = sig(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let segs = segment(&x, 10, 10).unwrap();
        assert_eq!(segs, vec![x.clone()]);

        let x = sig(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let segs = segment(&x, 4, 2).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[0].samples, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(segs[1].samples, vec![3.0, 4.0, 5.0, 0.0]);
        assert_eq!(segs[2].samples, vec![5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_half_segment_is_padded() {
        let x = Signal::new(vec![0.5; 44100]);
        let segs = segment(&x, 44100, 22050).unwrap();
        assert!(segs[1].samples[..22050].iter().all(|&v| v == 0.5));
        assert!(segs[1].samples[22050..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_errors() {
        assert!(matches!(segment(&Signal::zeros(0), 4, 2), Err(Error::EmptySignal)));
        assert!(segment(&Signal::zeros(4), 0, 2).is_err());
        assert!(segment(&Signal::zeros(4), 4, 0).is_err());
    }

    #[test]
    fn activity_rule() {
        assert!(!is_active(&[0.0; 100], ACTIVITY_THRESHOLD_DB, ACTIVITY_EPS));
        assert!(is_active(&[1.0, 0.0], ACTIVITY_THRESHOLD_DB, ACTIVITY_EPS));
        assert!(!is_active(&[0.3], ACTIVITY_THRESHOLD_DB, ACTIVITY_EPS));
    }

    #[test]
    fn activity_boundary_is_inclusive() {
        // 0.25^2 + 0.25^2 + ... chosen so the energy is exactly representable.
        let x = [0.25; 2];
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert_eq!(energy, 0.125);
        assert!(is_active(&x, 10.0 * 0.125f64.log10(), ACTIVITY_EPS));
        // |x|^2 = 0.1 lands on -10 dB.
        assert_eq!(10.0 * (0.1f64 + ACTIVITY_EPS).log10(), -10.0);
        assert!(level_db(&[0.1f64.sqrt()], ACTIVITY_EPS) >= -10.0 - 1e-12);
    }

    fn segments(n: usize, len: usize, offset: f64) -> Vec<Signal> {
        (0..n)
            .map(|i| Signal::new((0..len).map(|j| offset + (i * len + j) as f64 / 1024.0).collect()))
            .collect()
    }

    #[test]
    fn zero_noise_gives_clean_copy() {
        let voice = segments(3, 8, 0.0);
        let acc = segments(2, 8, 0.5);
        let cfg = CorruptionConfig {
            gaussian_std: 0.0,
            segment_len: 8,
            train_hop: 4,
            seed: 1,
        };
        for pair in make_training_pairs(&voice, &acc, &cfg, 0).unwrap() {
            assert_eq!(pair.noisy_voice, pair.voice);
        }
    }

    #[test]
    fn silent_accompaniment_is_identity() {
        let voice = segments(3, 8, 0.0);
        let acc = vec![Signal::zeros(8)];
        let cfg = CorruptionConfig {
            segment_len: 8,
            train_hop: 8,
            ..Default::default()
        };
        for pair in make_training_pairs(&voice, &acc, &cfg, 0).unwrap() {
            assert_eq!(pair.mixture, pair.voice);
        }
    }

    #[test]
    fn every_voice_segment_used_once_per_pass() {
        let voice = segments(5, 4, 0.0);
        let acc = segments(2, 4, 0.5);
        let cfg = CorruptionConfig {
            segment_len: 4,
            train_hop: 2,
            ..Default::default()
        };
        let mut seen: Vec<usize> = make_training_pairs(&voice, &acc, &cfg, 3)
            .unwrap()
            .map(|p| p.voice_index)
            .collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn pair_stream_is_seed_deterministic() {
        let voice = segments(4, 16, 0.0);
        let acc = segments(3, 16, 0.25);
        let cfg = CorruptionConfig {
            gaussian_std: 1e-2,
            segment_len: 16,
            train_hop: 8,
            seed: 42,
        };
        let a: Vec<_> = make_training_pairs(&voice, &acc, &cfg, 2).unwrap().collect();
        let b: Vec<_> = make_training_pairs(&voice, &acc, &cfg, 2).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = make_training_pairs(&voice, &acc, &cfg, 3).unwrap().collect();
        assert_ne!(a, c);
        let other = CorruptionConfig { seed: 43, ..cfg };
        let d: Vec<_> = make_training_pairs(&voice, &acc, &other, 2).unwrap().collect();
        assert_ne!(a, d);
    }

    #[test]
    fn pair_errors() {
        let voice = segments(2, 8, 0.0);
        let acc = segments(2, 6, 0.0);
        let cfg = CorruptionConfig {
            segment_len: 8,
            train_hop: 4,
            ..Default::default()
        };
        assert!(matches!(
            make_training_pairs(&voice, &acc, &cfg, 0),
            Err(Error::LengthMismatch(8, 6))
        ));
        assert!(matches!(
            make_training_pairs(&voice, &[], &cfg, 0),
            Err(Error::EmptySignal)
        ));
        let bad = CorruptionConfig {
            train_hop: 9,
            ..cfg.clone()
        };
        assert!(make_training_pairs(&voice, &voice, &bad, 0).is_err());
    }

    proptest! {
        #[test]
        fn mixture_minus_accompaniment_is_exact(
            v in proptest::collection::vec(-32768i32..32768, 16),
            a in proptest::collection::vec(-32768i32..32768, 16),
            seed in any::<u64>(),
        ) {
            // PCM16 grid values, as loaded from 16-bit stems.
            let voice = vec![Signal::new(v.iter().map(|&s| s as f64 / 32768.0).collect())];
            let acc = vec![Signal::new(a.iter().map(|&s| s as f64 / 32768.0).collect())];
            let cfg = CorruptionConfig { segment_len: 16, train_hop: 16, seed, ..Default::default() };
            for pair in make_training_pairs(&voice, &acc, &cfg, 0).unwrap() {
                for ((m, x), acc) in pair.mixture.iter().zip(&pair.voice).zip(&acc[0].samples) {
                    prop_assert_eq!((m - x).to_bits(), acc.to_bits());
                }
            }
        }

        #[test]
        fn hop_equal_len_concatenation_reproduces_input(
            x in proptest::collection::vec(-1.0f64..1.0, 1..200),
            len in 1usize..50,
        ) {
            let segs = segment(&Signal::new(x.clone()), len, len).unwrap();
            let joined: Vec<f64> = segs.iter().flat_map(|s| s.samples.iter().copied()).collect();
            prop_assert_eq!(&joined[..x.len()], &x[..]);
            prop_assert!(joined[x.len()..].iter().all(|&v| v == 0.0));
            prop_assert!(joined.len() - x.len() < len);
        }

        #[test]
        fn activity_is_monotone_in_energy(a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if is_active(&[lo.sqrt()], ACTIVITY_THRESHOLD_DB, ACTIVITY_EPS) {
                prop_assert!(is_active(&[hi.sqrt()], ACTIVITY_THRESHOLD_DB, ACTIVITY_EPS));
            }
        }
    }
}
