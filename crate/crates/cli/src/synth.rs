//! Synthetic paired stems standing in for a multitrack corpus.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use musrep::dataset::SAMPLE_RATE;
use musrep::wav::write_wav_f32;
use musrep::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub tracks: usize,
    pub seconds: f64,
    pub seed: u64,
    /// Keep voice below `BAND_SPLIT_HZ` and accompaniment above it.
    pub disjoint_bands: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tracks: 4,
            seconds: 6.0,
            seed: 0,
            disjoint_bands: false,
        }
    }
}

pub const BAND_SPLIT_HZ: f64 = 3000.0;

const SR: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct Stems {
    pub voice: Vec<f64>,
    pub accompaniment: Vec<f64>,
}

fn one_pole_lowpass(x: &mut [f64], cutoff_hz: f64) {
    let a = (-2.0 * PI * cutoff_hz / SR).exp();
    let mut y = 0.0;
    for s in x.iter_mut() {
        y = (1.0 - a) * *s + a * y;
        *s = y;
    }
}

fn one_pole_highpass(x: &mut [f64], cutoff_hz: f64) {
    let mut low = x.to_vec();
    one_pole_lowpass(&mut low, cutoff_hz);
    for (s, l) in x.iter_mut().zip(low) {
        *s -= l;
    }
}

/// Sung-note line: harmonic tones with vibrato and short breathy noise bursts at onsets.
fn voice(rng: &mut ChaCha8Rng, n: usize, disjoint: bool) -> Vec<f64> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; n];
    let mut start = 0usize;
    while start < n {
        let dur = (rng.random_range(0.25..0.6) * SR) as usize;
        let gap = (rng.random_range(0.0..0.04) * SR) as usize;
        let end = (start + dur).min(n);
        let f0 = rng.random_range(150.0..450.0);
        let harmonics = if disjoint {
            ((BAND_SPLIT_HZ * 0.8 / f0) as usize).clamp(1, 6)
        } else {
            6
        };
        let vib_rate = rng.random_range(4.5..6.5);
        let vib_depth = rng.random_range(0.005..0.02);
        let amp = rng.random_range(0.15..0.3);
        let mut phase = vec![0.0; harmonics];
        let len = end - start;
        let attack = (0.03 * SR) as usize;
        for i in 0..len {
            let t = i as f64 / SR;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            let env = (i as f64 / attack as f64).min(1.0) * ((len - i) as f64 / attack as f64).min(1.0);
            let mut s = 0.0;
            for (h, ph) in phase.iter_mut().enumerate() {
                let k = (h + 1) as f64;
                *ph += 2.0 * PI * f * k / SR;
                s += ph.sin() / k;
            }
            out[start + i] += amp * env * s;
        }
        if !disjoint {
            let burst = ((0.04 * SR) as usize).min(len);
            let mut b: Vec<f64> = (0..burst).map(|_| noise.sample(rng)).collect();
            one_pole_lowpass(&mut b, 4000.0);
            for (i, v) in b.iter().enumerate() {
                let env = 1.0 - i as f64 / burst as f64;
                out[start + i] += 0.05 * env * v;
            }
        }
        start = end + gap;
    }
    out
}

/// Drum-like noise hits on a beat grid plus a low bass line.
fn accompaniment(rng: &mut ChaCha8Rng, n: usize, disjoint: bool) -> Vec<f64> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; n];
    let beat = (rng.random_range(0.35..0.55) * SR) as usize;
    let mut t = 0;
    while t < n {
        let len = ((0.12 * SR) as usize).min(n - t);
        let decay = rng.random_range(20.0..45.0);
        let amp = rng.random_range(0.05..0.12);
        let mut hit: Vec<f64> = (0..len).map(|_| noise.sample(rng)).collect();
        if disjoint {
            for _ in 0..4 {
                one_pole_highpass(&mut hit, BAND_SPLIT_HZ * 2.0);
            }
        }
        for (i, v) in hit.iter().enumerate() {
            out[t + i] += amp * (-decay * i as f64 / SR).exp() * v;
        }
        t += beat;
    }
    let note = (rng.random_range(0.4..0.8) * SR) as usize;
    let mut phase = 0.0f64;
    let mut i = 0;
    while i < n {
        let f = if disjoint {
            rng.random_range(6000.0..9000.0)
        } else {
            rng.random_range(40.0..110.0)
        };
        let amp = rng.random_range(0.1..0.2);
        for j in i..(i + note).min(n) {
            phase += 2.0 * PI * f / SR;
            out[j] += amp * (phase.sin() + 0.3 * (2.0 * phase).sin());
        }
        i += note;
    }
    out
}

/// Generates one track per index; each track uses its own stream of the seeded generator.
pub fn generate(cfg: &SynthConfig) -> Vec<Stems> {
    let n = (cfg.seconds * SR).round() as usize;
    (0..cfg.tracks)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let voice = voice(&mut rng, n, cfg.disjoint_bands);
            let accompaniment = accompaniment(&mut rng, n, cfg.disjoint_bands);
            Stems { voice, accompaniment }
        })
        .collect()
}

pub fn track_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("track_{index:02}"))
}

/// Writes `track_XX/voice.wav` and `track_XX/accompaniment.wav` under `out`.
pub fn write_stems(out: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    if cfg.tracks == 0 || !(cfg.seconds > 0.0) {
        return Err(Error::InvalidConfig("need at least one track of positive length".into()));
    }
    let mut dirs = Vec::new();
    for (k, stems) in generate(cfg).iter().enumerate() {
        let dir = track_dir(out, k);
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_wav_f32(&dir.join("voice.wav"), &stems.voice, SAMPLE_RATE)?;
        write_wav_f32(&dir.join("accompaniment.wav"), &stems.accompaniment, SAMPLE_RATE)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
