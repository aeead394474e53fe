//! Separation and representation quality metrics, and the STFT baseline.

pub mod metrics;
pub mod stft;

use std::fmt::Write as _;

use ndarray::Array2;

use crate::dataset::{is_active, segment, Signal, ACTIVITY_EPS, ACTIVITY_THRESHOLD_DB};
use crate::error::{Error, Result};
use crate::model::Model;

pub use metrics::{additivity_of, binary_mask, si_sdr, w_do, Disjointness, Mask, SI_SDR_CAP_DB};
pub use stft::Stft;

/// A non-negative analysis front end paired with its resynthesis.
pub trait FrontEnd {
    fn name(&self) -> &str;

    /// `C x T` representation of `x`.
    fn represent(&self, x: &[f64]) -> Result<Array2<f64>>;

    /// Resynthesises `x` after applying `mask` to its representation.
    fn resynthesize_masked(&self, x: &[f64], mask: &Mask) -> Result<Vec<f64>>;

    fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl FrontEnd for Model {
    fn name(&self) -> &str {
        "learned"
    }

    fn represent(&self, x: &[f64]) -> Result<Array2<f64>> {
        Ok(self.encode(x).activations)
    }

    fn resynthesize_masked(&self, x: &[f64], mask: &Mask) -> Result<Vec<f64>> {
        let a = self.encode(x).activations;
        self.decode(&mask.apply(&a)?, x.len())
    }

    fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Model::reconstruct(self, x)
    }
}

/// Magnitude STFT; masked resynthesis keeps the phase of the input.
#[derive(Debug, Default)]
pub struct StftFrontEnd {
    pub stft: Stft,
}

impl FrontEnd for StftFrontEnd {
    fn name(&self) -> &str {
        "stft"
    }

    fn represent(&self, x: &[f64]) -> Result<Array2<f64>> {
        Ok(stft::magnitude(&self.stft.stft(x)))
    }

    fn resynthesize_masked(&self, x: &[f64], mask: &Mask) -> Result<Vec<f64>> {
        let spec = self.stft.stft(x);
        if spec.dim() != mask.dim() {
            return Err(Error::ShapeMismatch {
                expected: spec.shape().to_vec(),
                found: mask.values().shape().to_vec(),
            });
        }
        let masked = ndarray::Zip::from(&spec)
            .and(mask.values())
            .map_collect(|c, &g| c * g);
        Ok(self.stft.istft(&masked, x.len()))
    }

    fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.stft.istft(&self.stft.stft(x), x.len()))
    }
}

/// Voice estimate from masking the mixture with the oracle mask of the clean stems.
pub fn oracle_separate(front: &dyn FrontEnd, x_m: &[f64], x_v: &[f64], x_ac: &[f64]) -> Result<Vec<f64>> {
    let mask = binary_mask(&front.represent(x_v)?, &front.represent(x_ac)?)?;
    front.resynthesize_masked(x_m, &mask)
}

pub fn additivity(front: &dyn FrontEnd, x_m: &[f64], x_v: &[f64], x_ac: &[f64]) -> Result<f64> {
    if x_m.len() != x_v.len() || x_m.len() != x_ac.len() {
        return Err(Error::LengthMismatch(x_m.len(), x_v.len().min(x_ac.len())));
    }
    additivity_of(&front.represent(x_m)?, &front.represent(x_v)?, &front.represent(x_ac)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub name: String,
    pub voice: Signal,
    pub accompaniment: Signal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub segment_len: usize,
    pub activity_threshold_db: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            segment_len: 44100,
            activity_threshold_db: ACTIVITY_THRESHOLD_DB,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub track: String,
    pub segment: usize,
    /// Clean-voice reconstruction quality.
    pub si_sdr: f64,
    /// Oracle binary-mask separation quality.
    pub si_sdr_bm: f64,
    pub additivity: f64,
    /// NaN when the voice representation is all zero.
    pub wdo: f64,
    pub psr: f64,
    pub sir: f64,
}

pub const METRICS: [&str; 6] = ["si_sdr", "si_sdr_bm", "additivity", "wdo", "psr", "sir"];

impl EvalRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "si_sdr" => self.si_sdr,
            "si_sdr_bm" => self.si_sdr_bm,
            "additivity" => self.additivity,
            "wdo" => self.wdo,
            "psr" => self.psr,
            "sir" => self.sir,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    /// Rows with a finite value; the statistics use only these.
    pub count: usize,
}

/// Mean, median and population standard deviation of the finite values.
pub fn aggregate(values: impl IntoIterator<Item = f64>) -> Aggregate {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Aggregate {
            mean: f64::NAN,
            median: f64::NAN,
            std: f64::NAN,
            count: 0,
        };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Aggregate {
        mean,
        median,
        std,
        count: n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub front_end: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn aggregate(&self, metric: &str) -> Option<Aggregate> {
        METRICS
            .contains(&metric)
            .then(|| aggregate(self.rows.iter().filter_map(|r| r.metric(metric))))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("track,segment");
        for m in METRICS {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.track, r.segment);
            for m in METRICS {
                let _ = write!(s, ",{}", r.metric(m).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("front end: {}\nsegments: {}\n", self.front_end, self.rows.len());
        let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>12} {:>6}", "metric", "mean", "median", "std", "n");
        for m in METRICS {
            let a = self.aggregate(m).expect("known metric");
            let _ = writeln!(
                s,
                "{:<12} {:>12.4} {:>12.4} {:>12.4} {:>6}",
                m, a.mean, a.median, a.std, a.count
            );
        }
        s
    }
}

/// Scores every active non-overlapping segment of every track, in track then segment order.
pub fn evaluate(tracks: &[Track], front: &dyn FrontEnd, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for track in tracks {
        if track.voice.len() != track.accompaniment.len() {
            return Err(Error::LengthMismatch(track.voice.len(), track.accompaniment.len()));
        }
        let voice = segment(&track.voice, cfg.segment_len, cfg.segment_len)?;
        let acc = segment(&track.accompaniment, cfg.segment_len, cfg.segment_len)?;
        for (i, (v, ac)) in voice.iter().zip(&acc).enumerate() {
            let (v, ac) = (v.as_slice(), ac.as_slice());
            if !is_active(v, cfg.activity_threshold_db, ACTIVITY_EPS) {
                continue;
            }
            let m: Vec<f64> = v.iter().zip(ac).map(|(a, b)| a + b).collect();
            let a_v = front.represent(v)?;
            let a_ac = front.represent(ac)?;
            let a_m = front.represent(&m)?;
            let mask = binary_mask(&a_v, &a_ac)?;
            let separated = front.resynthesize_masked(&m, &mask)?;
            let d = w_do(&a_v, &a_ac).unwrap_or(Disjointness {
                wdo: f64::NAN,
                psr: f64::NAN,
                sir: f64::NAN,
            });
            rows.push(EvalRow {
                track: track.name.clone(),
                segment: i,
                si_sdr: si_sdr(v, &front.reconstruct(v)?)?,
                si_sdr_bm: si_sdr(v, &separated)?,
                additivity: additivity_of(&a_m, &a_v, &a_ac)?,
                wdo: d.wdo,
                psr: d.psr,
                sir: d.sir,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::NoActiveSegments);
    }
    Ok(EvalReport {
        front_end: front.name().to_string(),
        rows,
    })
}
