//! Reconstruction and representation objectives.
//!
//! Every loss comes with a hand-written gradient so the training tape can
//! back-propagate through it; see `training::tape`.

pub mod sinkhorn;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use sinkhorn::{
    normalize_simplex, pairwise_cost, saturation_fraction, sinkhorn_cost_with_plan, sinkhorn_loss,
    sinkhorn_plan, SinkhornOutput, TransportPlan,
};

/// Which representation objective is added to neg-SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Total variation (`L_A`).
    #[default]
    TotalVariation,
    /// Entropic Sinkhorn distance (`L_B`).
    Sinkhorn,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::TotalVariation => "tv",
            Objective::Sinkhorn => "sinkhorn",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" | "A" | "a" => Ok(Objective::TotalVariation),
            "sinkhorn" | "sk" | "B" | "b" => Ok(Objective::Sinkhorn),
            other => Err(Error::InvalidConfig(format!("unknown loss '{other}' (expected tv or sinkhorn)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the representation objective.
    pub omega: f64,
    /// Entropic regularisation strength; larger values sharpen the plan.
    pub lambda: f64,
    /// Exponent of the frame-to-frame Minkowski cost, 1 or 2.
    pub p: u32,
    pub max_iters: usize,
    pub tau: f64,
    /// neg-SNR never goes below this (perfect reconstruction).
    pub snr_floor_db: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega: 0.5,
            lambda: 0.5,
            p: 1,
            max_iters: 100,
            tau: 1e-6,
            snr_floor_db: -120.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidConfig(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !matches!(self.p, 1 | 2) {
            return Err(Error::InvalidConfig(format!("p must be 1 or 2, got {}", self.p)));
        }
        if !(self.tau > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig("tau must be > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }
}

fn sum_sq(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum()
}

/// `-10 log10(|x|^2 / |x - x^|^2)`, never below `floor_db`.
pub fn neg_snr(x: &[f64], xhat: &[f64], floor_db: f64) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::LengthMismatch(x.len(), xhat.len()));
    }
    let signal = sum_sq(x.iter().copied());
    if signal == 0.0 {
        return Err(Error::ZeroReference);
    }
    let residual = sum_sq(x.iter().zip(xhat).map(|(a, b)| a - b));
    if residual == 0.0 {
        return Ok(floor_db);
    }
    Ok((10.0 * (residual / signal).log10()).max(floor_db))
}

/// Gradient of [`neg_snr`] with respect to `xhat`; zero on the floor.
pub fn neg_snr_grad(x: &[f64], xhat: &[f64], floor_db: f64) -> Result<Vec<f64>> {
    let value = neg_snr(x, xhat, floor_db)?;
    let residual = sum_sq(x.iter().zip(xhat).map(|(a, b)| a - b));
    if value <= floor_db || residual == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    // d/dxhat 10 log10(|x - xhat|^2) = -20 (x - xhat) / (ln 10 |x - xhat|^2)
    let k = -20.0 / (std::f64::consts::LN_10 * residual);
    Ok(x.iter().zip(xhat).map(|(a, b)| k * (a - b)).collect())
}

/// Anisotropic total variation: mean absolute first difference along components
/// and along frames, normalised by `C T`.
pub fn tv_loss(a: &Array2<f64>) -> f64 {
    let (c, t) = a.dim();
    if c == 0 || t == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for ci in 1..c {
        for ti in 0..t {
            acc += (a[[ci, ti]] - a[[ci - 1, ti]]).abs();
        }
    }
    for ci in 0..c {
        for ti in 1..t {
            acc += (a[[ci, ti]] - a[[ci, ti - 1]]).abs();
        }
    }
    acc / (c * t) as f64
}

/// Subgradient of [`tv_loss`]; ties contribute zero.
pub fn tv_grad(a: &Array2<f64>) -> Array2<f64> {
    let (c, t) = a.dim();
    let mut g = Array2::zeros((c, t));
    if c == 0 || t == 0 {
        return g;
    }
    let scale = 1.0 / (c * t) as f64;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    for ci in 1..c {
        for ti in 0..t {
            let s = sign(a[[ci, ti]] - a[[ci - 1, ti]]) * scale;
            g[[ci, ti]] += s;
            g[[ci - 1, ti]] -= s;
        }
    }
    for ci in 0..c {
        for ti in 1..t {
            let s = sign(a[[ci, ti]] - a[[ci, ti - 1]]) * scale;
            g[[ci, ti]] += s;
            g[[ci, ti - 1]] -= s;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub neg_snr: f64,
    pub representation: f64,
    pub total: f64,
    /// Fraction of underflowed Gibbs-kernel entries (Sinkhorn objective only).
    pub saturation: Option<f64>,
}

/// `neg-SNR(x_v, x^_v) + omega * R(A_m)` where `R` is TV or the Sinkhorn distance.
pub fn total_loss(
    x_v: &[f64],
    xhat_v: &[f64],
    mixture_activations: &Array2<f64>,
    cfg: &LossConfig,
    objective: Objective,
) -> Result<LossBreakdown> {
    let snr = neg_snr(x_v, xhat_v, cfg.snr_floor_db)?;
    let (representation, saturation) = match objective {
        Objective::TotalVariation => (tv_loss(mixture_activations), None),
        Objective::Sinkhorn => {
            let out = sinkhorn_loss(mixture_activations, cfg)?;
            (out.loss, Some(out.plan.saturation))
        }
    };
    Ok(LossBreakdown {
        neg_snr: snr,
        representation,
        total: snr + cfg.omega * representation,
        saturation,
    })
}
