use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Upper bound returned for a zero residual.
pub const SI_SDR_CAP_DB: f64 = 120.0;
pub const ADDITIVITY_EPS: f64 = 1e-24;
pub const MASK_THRESHOLD: f64 = 0.5;

/// Scale-invariant SDR with `alpha = <est, ref> / |ref|^2`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch(reference.len(), estimate.len()));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let alpha = dot / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SDR_CAP_DB))
}

/// Binary time-frequency mask with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Array2<f64>);

impl Mask {
    pub fn ones(shape: (usize, usize)) -> Self {
        Mask(Array2::ones(shape))
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Mask(Array2::zeros(shape))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn apply(&self, a: &Array2<f64>) -> Result<Array2<f64>> {
        if a.dim() != self.0.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.0.shape().to_vec(),
                found: a.shape().to_vec(),
            });
        }
        Ok(a * &self.0)
    }
}

/// `G[c, t] = 1` iff `a_v[c, t] >= 0.5 a_ac[c, t]`.
pub fn binary_mask(a_v: &Array2<f64>, a_ac: &Array2<f64>) -> Result<Mask> {
    if a_v.dim() != a_ac.dim() {
        return Err(Error::ShapeMismatch {
            expected: a_v.shape().to_vec(),
            found: a_ac.shape().to_vec(),
        });
    }
    let mut g = Array2::zeros(a_v.dim());
    Zip::from(&mut g).and(a_v).and(a_ac).for_each(|g, &v, &ac| {
        *g = if v >= MASK_THRESHOLD * ac { 1.0 } else { 0.0 };
    });
    Ok(Mask(g))
}

fn l1(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

/// `1 - |A_m - A_v - A_ac|_1 / (|A_m|_1 + eps)`.
pub fn additivity_of(a_m: &Array2<f64>, a_v: &Array2<f64>, a_ac: &Array2<f64>) -> Result<f64> {
    for other in [a_v, a_ac] {
        if other.dim() != a_m.dim() {
            return Err(Error::ShapeMismatch {
                expected: a_m.shape().to_vec(),
                found: other.shape().to_vec(),
            });
        }
    }
    let residual = l1(&(a_m - a_v - a_ac));
    Ok(1.0 - residual / (l1(a_m) + ADDITIVITY_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disjointness {
    pub wdo: f64,
    pub psr: f64,
    /// Infinite when the mask removes all interference.
    pub sir: f64,
}

/// W-disjoint orthogonality of `y_j` against the interferer `y_jp`.
///
/// PSR and SIR use the squared entrywise L1 norm of the masked magnitudes.
pub fn w_do(y_j: &Array2<f64>, y_jp: &Array2<f64>) -> Result<Disjointness> {
    let mag_j = y_j.mapv(f64::abs);
    let mag_jp = y_jp.mapv(f64::abs);
    let mask = binary_mask(&mag_j, &mag_jp)?;
    let total = l1(&mag_j).powi(2);
    if total == 0.0 {
        return Err(Error::ZeroReference);
    }
    let kept = l1(&mask.apply(&mag_j)?).powi(2);
    let leaked = l1(&mask.apply(&mag_jp)?).powi(2);
    let psr = kept / total;
    if leaked == 0.0 {
        return Ok(Disjointness {
            wdo: psr,
            psr,
            sir: f64::INFINITY,
        });
    }
    let sir = kept / leaked;
    Ok(Disjointness {
        wdo: psr - psr / sir,
        psr,
        sir,
    })
}
