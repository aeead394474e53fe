//! RIFF/WAVE input and output.
//!
//! Reads PCM16, PCM24 and IEEE float32 files with any channel count and writes
//! float32 mono. Integer PCM is scaled into [-1, 1) by `2^(bits - 1)`.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Interleaved audio as read from disk, before any down-mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct WavData {
    pub sample_rate: u32,
    pub channels: u16,
    /// Frame-major interleaved samples, already scaled to [-1, 1).
    pub interleaved: Vec<f64>,
}

impl WavData {
    pub fn frames(&self) -> usize {
        self.interleaved.len() / self.channels.max(1) as usize
    }

    /// Per-frame mean across channels.
    pub fn downmix(&self) -> Vec<f64> {
        let ch = self.channels.max(1) as usize;
        self.interleaved
            .chunks_exact(ch)
            .map(|frame| frame.iter().sum::<f64>() / ch as f64)
            .collect()
    }
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = f64::from(1u32 << (bits - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(wav_err)?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} with {bits} bits per sample"
            )))
        }
    };
    if let Some(bad) = interleaved.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} (sample {bad})",
            path.display()
        )));
    }
    Ok(WavData {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        interleaved,
    })
}

/// Writes a mono float32 file. Samples are stored as-is (no clipping).
pub fn write_wav_f32(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        writer.write_sample(s as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Writes interleaved 16-bit PCM. Used by tests and fixtures.
pub fn write_wav_pcm16(path: &Path, interleaved: &[i16], channels: u16, sample_rate: u32) -> Result<()> {
    write_int(path, interleaved.iter().map(|&v| i32::from(v)), channels, sample_rate, 16)
}

/// Writes interleaved 24-bit PCM from raw integer codes in [-2^23, 2^23).
pub fn write_wav_pcm24(path: &Path, interleaved: &[i32], channels: u16, sample_rate: u32) -> Result<()> {
    write_int(path, interleaved.iter().copied(), channels, sample_rate, 24)
}

fn write_int(
    path: &Path,
    samples: impl Iterator<Item = i32>,
    channels: u16,
    sample_rate: u32,
    bits: u16,
) -> Result<()> {
    let spec = WavSpec {
        channels,
        sample_rate,
        bits_per_sample: bits,
        sample_format: SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for s in samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
