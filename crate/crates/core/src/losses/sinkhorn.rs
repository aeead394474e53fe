//! Entropic optimal transport between the time frames of a representation.
//!
//! Frames are first mapped towards the probability simplex, a Minkowski cost
//! matrix is built between every pair of frames, and a transport plan with
//! uniform marginals `1/T` is found by Sinkhorn-Knopp matrix scaling of the
//! Gibbs kernel `K = exp(-lambda M)`.

use ndarray::{Array1, Array2, Axis};

use super::LossConfig;
use crate::error::{Error, Result};

/// `A[c, t] / sum_c (A[c, t] + 1/C)`; each column then sums to `s / (s + 1)`.
pub fn normalize_simplex(a: &Array2<f64>) -> Array2<f64> {
    let denom = a.sum_axis(Axis(0)) + 1.0;
    a / &denom.insert_axis(Axis(0))
}

/// Back-propagates through [`normalize_simplex`].
pub fn normalize_simplex_grad(a: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let denom = a.sum_axis(Axis(0)) + 1.0;
    let normalized = a / &denom.view().insert_axis(Axis(0));
    // dA[c,t] = (g[c,t] - sum_c' g[c',t] Ao[c',t]) / (s_t + 1)
    let dot = (grad_out * &normalized).sum_axis(Axis(0));
    (grad_out - &dot.insert_axis(Axis(0))) / &denom.insert_axis(Axis(0))
}

/// `M[t, t'] = (sum_c |Ao[c, t] - Ao[c, t']|^p)^(1/p)`, `T x T`.
pub fn pairwise_cost(ao: &Array2<f64>, p: u32) -> Array2<f64> {
    let (c_count, t_count) = ao.dim();
    let mut m = Array2::zeros((t_count, t_count));
    for t in 0..t_count {
        for u in (t + 1)..t_count {
            let d = match p {
                1 => (0..c_count).map(|c| (ao[[c, t]] - ao[[c, u]]).abs()).sum::<f64>(),
                _ => (0..c_count)
                    .map(|c| {
                        let diff = ao[[c, t]] - ao[[c, u]];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt(),
            };
            m[[t, u]] = d;
            m[[u, t]] = d;
        }
    }
    m
}

/// Gradient of `<G, pairwise_cost(Ao)>` with respect to `Ao` for an arbitrary weight `G`.
pub fn pairwise_cost_grad(ao: &Array2<f64>, p: u32, weight: &Array2<f64>) -> Array2<f64> {
    let (c_count, t_count) = ao.dim();
    let mut g = Array2::zeros((c_count, t_count));
    let cost = if p == 2 { Some(pairwise_cost(ao, 2)) } else { None };
    for t in 0..t_count {
        for u in (t + 1)..t_count {
            let w = weight[[t, u]] + weight[[u, t]];
            if w == 0.0 {
                continue;
            }
            for c in 0..c_count {
                let diff = ao[[c, t]] - ao[[c, u]];
                let d = match &cost {
                    None => {
                        if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Some(m) => {
                        let dist = m[[t, u]];
                        if dist > 0.0 {
                            diff / dist
                        } else {
                            0.0
                        }
                    }
                };
                g[[c, t]] += w * d;
                g[[c, u]] -= w * d;
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    /// Gibbs kernel `exp(-lambda M)`.
    pub kernel: Array2<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Fraction of kernel entries that underflowed to exactly zero.
    pub saturation: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(Axis(0))
    }
}

/// Fraction of `exp(-lambda M)` entries that are exactly zero.
pub fn saturation_fraction(m: &Array2<f64>, lambda: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let zeros = m.iter().filter(|&&v| (-lambda * v).exp() == 0.0).count();
    zeros as f64 / m.len() as f64
}

/// Sinkhorn-Knopp scaling with row and column marginals `1/T`.
///
/// Iterates `v <- c / (K^T u)`, `u <- r / (K v)` and stops once the L1 distance
/// between the plan's column sums and `1/T` drops below `tau`.
pub fn sinkhorn_plan(m: &Array2<f64>, lambda: f64, max_iters: usize, tau: f64) -> Result<TransportPlan> {
    let (rows, cols) = m.dim();
    if rows != cols || rows == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![rows, rows],
            found: vec![rows, cols],
        });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be > 0, got {lambda}")));
    }
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("cost matrix (must be finite and non-negative)".into()));
    }
    let t = rows;
    let marginal = 1.0 / t as f64;
    let kernel = m.mapv(|v| (-lambda * v).exp());
    let zeros = kernel.iter().filter(|&&v| v == 0.0).count();
    let saturation = zeros as f64 / kernel.len() as f64;
    let saturated = |axis| Error::LambdaSaturation {
        lambda,
        axis,
        fraction: saturation,
    };
    if kernel.rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(saturated("row"));
    }
    if kernel.columns().into_iter().any(|c| c.iter().all(|&v| v == 0.0)) {
        return Err(saturated("column"));
    }

    let mut u = Array1::from_elem(t, marginal);
    let mut v = Array1::from_elem(t, marginal);
    let mut converged = false;
    let mut iterations_used = 0;
    for _ in 0..max_iters {
        iterations_used += 1;
        v = kernel.t().dot(&u).mapv(|s| marginal / s);
        u = kernel.dot(&v).mapv(|s| marginal / s);
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(saturated("scaling vector"));
        }
        let col = &kernel.t().dot(&u) * &v;
        let err: f64 = col.iter().map(|s| (s - marginal).abs()).sum();
        if err < tau {
            converged = true;
            break;
        }
    }
    let plan = &kernel * &u.view().insert_axis(Axis(1)) * &v.view().insert_axis(Axis(0));
    Ok(TransportPlan {
        plan,
        u,
        v,
        kernel,
        iterations_used,
        converged,
        saturation,
    })
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub loss: f64,
    pub normalized: Array2<f64>,
    pub cost: Array2<f64>,
    pub plan: TransportPlan,
}

/// `<P, M>` where `M` is the pairwise cost of the simplex-normalised representation
/// and `P` the transport plan computed from the same `M`.
pub fn sinkhorn_loss(a: &Array2<f64>, cfg: &LossConfig) -> Result<SinkhornOutput> {
    let normalized = normalize_simplex(a);
    let cost = pairwise_cost(&normalized, cfg.p);
    let plan = sinkhorn_plan(&cost, cfg.lambda, cfg.max_iters, cfg.tau)?;
    let loss = (&plan.plan * &cost).sum();
    if !loss.is_finite() {
        return Err(Error::NonFinite("Sinkhorn loss".into()));
    }
    Ok(SinkhornOutput {
        loss,
        normalized,
        cost,
        plan,
    })
}

/// `<P, psi(normalize(A))>` with the plan held fixed.
pub fn sinkhorn_cost_with_plan(a: &Array2<f64>, plan: &Array2<f64>, p: u32) -> f64 {
    (plan * &pairwise_cost(&normalize_simplex(a), p)).sum()
}

/// Gradient of [`sinkhorn_cost_with_plan`] with respect to `A` (plan detached).
pub fn sinkhorn_cost_grad(a: &Array2<f64>, plan: &Array2<f64>, p: u32) -> Array2<f64> {
    let normalized = normalize_simplex(a);
    let g_norm = pairwise_cost_grad(&normalized, p, plan);
    normalize_simplex_grad(a, &g_norm)
}
