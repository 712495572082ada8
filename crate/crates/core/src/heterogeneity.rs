//! Heterogeneity constants: closed forms for quadratics, and the
//! trajectory-based estimators that work for any [`FederatedObjective`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{min_eigenvalue, spectral_norm, ModelVector, RngStream};
use crate::problems::{FederatedObjective, LogisticFed, NoiseModel, QuadraticFed};

/// Relative tolerance for every spectral norm taken in this module.
pub const SPECTRAL_TOL: f64 = 1e-12;

/// Snapshots whose mean squared distance to the average falls below this are
/// skipped by the estimators.
pub const DEGENERATE_DIVERGENCE: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Estimated,
    /// Analytic upper bounds, used where no closed form exists (logistic).
    UpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub l_h: f64,
    pub l_g: f64,
    pub l_tilde: f64,
    pub zeta: f64,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub method: Method,
    pub rounds_averaged: usize,
}

fn norm(m: &crate::numkit::SymMatrix) -> f64 {
    spectral_norm(m, SPECTRAL_TOL).expect("instance matrices are finite")
}

/// `max_i ‖A_i − A‖₂`.
pub fn quad_lh_closed(fed: &QuadraticFed) -> f64 {
    fed.hessian_deviations()
        .iter()
        .map(norm)
        .fold(0.0, f64::max)
}

/// `max_i ‖A_i‖₂`.
pub fn quad_ltilde_closed(fed: &QuadraticFed) -> f64 {
    fed.workers().iter().map(|w| norm(&w.a)).fold(0.0, f64::max)
}

/// `‖A‖₂`.
pub fn quad_lg_closed(fed: &QuadraticFed) -> f64 {
    norm(fed.global_a())
}

/// `max_i ‖(A_i − A)x + b_i − b‖`.
pub fn quad_zeta_at(fed: &QuadraticFed, x: &ModelVector) -> Result<f64> {
    if x.dim() != fed.dim() {
        return Err(Error::DimensionMismatch {
            expected: fed.dim(),
            got: x.dim(),
        });
    }
    Ok(fed.zeta_at(x))
}

/// `max_{i,j} 1 − λ_j(A_i)/‖A_i‖₂`, in `[0, 2]`.
pub fn kappa(fed: &QuadraticFed) -> Result<f64> {
    let mut k = 0.0f64;
    for (i, w) in fed.workers().iter().enumerate() {
        let s = norm(&w.a);
        if s == 0.0 {
            return Err(Error::UndefinedKappa { worker: i });
        }
        let lmin = min_eigenvalue(&w.a, SPECTRAL_TOL)?;
        k = k.max((1.0 - lmin / s).clamp(0.0, 2.0));
    }
    Ok(k)
}

/// Which branch of the growth factors a κ value selects. `κ = 1` belongs to
/// the geometric branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaBranch {
    BelowOne,
    AtLeastOne,
}

pub fn kappa_branch(kappa: f64) -> KappaBranch {
    if kappa < 1.0 {
        KappaBranch::BelowOne
    } else {
        KappaBranch::AtLeastOne
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=2.0).contains(&kappa) {
        return Err(Error::InvalidInput(format!("kappa must lie in [0, 2], got {kappa}")));
    }
    Ok(())
}

/// `φ(κ, k)`: `k` below one, `(κ^{2k} − 1)/(κ² − 1)` otherwise.
///
/// The geometric branch is evaluated as `Σ_{j<k} κ^{2j}`, which equals the
/// quotient and is exact at `κ = 1`.
pub fn phi(kappa: f64, k: usize) -> Result<f64> {
    check_kappa(kappa)?;
    if k == 0 {
        return Err(Error::InvalidInput("phi needs k >= 1".into()));
    }
    if kappa < 1.0 {
        return Ok(k as f64);
    }
    let q = kappa * kappa;
    let mut term = 1.0;
    let mut sum = 0.0;
    for _ in 0..k {
        sum += term;
        term *= q;
    }
    Ok(sum)
}

/// `ϕ(κ)`: 1 below one, `κ` otherwise.
pub fn varphi(kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(if kappa < 1.0 { 1.0 } else { kappa })
}

/// Closed-form constants of a quadratic instance, with ζ evaluated at `x_ref`.
pub fn closed_form_report(fed: &QuadraticFed, x_ref: &ModelVector, sigma: f64) -> Result<HeterogeneityReport> {
    Ok(HeterogeneityReport {
        l_h: quad_lh_closed(fed),
        l_g: quad_lg_closed(fed),
        l_tilde: quad_ltilde_closed(fed),
        zeta: quad_zeta_at(fed, x_ref)?,
        sigma,
        kappa: kappa(fed).ok(),
        method: Method::ClosedForm,
        rounds_averaged: 0,
    })
}

/// Analytic smoothness bounds for logistic workers: the loss Hessian is
/// dominated by `¼·(1/n)Σ a aᵀ`, so `L̃ ≤ max_i ¼‖M_i‖₂` and `L_g` is at
/// most `¼` of the norm of the mean second moment.
pub fn logistic_reference_report(fed: &LogisticFed, x_ref: &ModelVector, sigma: f64) -> HeterogeneityReport {
    let moments: Vec<_> = (0..fed.workers.len()).map(|i| fed.second_moment(i)).collect();
    let l_tilde = moments.iter().map(|m| 0.25 * norm(m)).fold(0.0, f64::max);
    let refs: Vec<_> = moments.iter().collect();
    let mean = crate::numkit::SymMatrix::mean(&refs).expect("equal orders");
    HeterogeneityReport {
        // Jensen gives L_h ≤ L̃ for any smooth workers.
        l_h: l_tilde,
        l_g: 0.25 * norm(&mean),
        l_tilde,
        zeta: fed.zeta_at(x_ref),
        sigma,
        kappa: None,
        method: Method::UpperBound,
        rounds_averaged: 0,
    }
}

/// Global model together with the local models it is the average of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub x_bar: ModelVector,
    pub locals: Vec<ModelVector>,
}

impl Snapshot {
    /// `(1/N) Σ ‖x_i − x̄‖²`.
    pub fn divergence(&self) -> f64 {
        self.locals.iter().map(|x| x.dist_sq(&self.x_bar)).sum::<f64>() / self.locals.len() as f64
    }
}

/// `L_h² ≈ ‖∇f(x̄) − (1/N)Σ∇F_i(x_i)‖² / ((1/N)Σ‖x_i − x̄‖²)`, averaged over
/// snapshots; returns the square root of the mean ratio.
///
/// Returns the estimate and the number of snapshots that contributed.
pub fn estimate_lh<O: FederatedObjective + ?Sized>(obj: &O, snapshots: &[Snapshot]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for s in snapshots {
        if s.locals.len() != obj.n_workers() {
            return Err(Error::InvalidInput(format!(
                "snapshot has {} local models for {} workers",
                s.locals.len(),
                obj.n_workers()
            )));
        }
        let div = s.divergence();
        if div < DEGENERATE_DIVERGENCE {
            continue;
        }
        let gs: Vec<ModelVector> = s
            .locals
            .iter()
            .enumerate()
            .map(|(i, x)| obj.local_gradient(i, x))
            .collect();
        let avg = crate::numkit::fixed_order_mean(&gs)?;
        let num = obj.global_gradient(&s.x_bar).dist_sq(&avg);
        sum += num / div;
        used += 1;
    }
    if used == 0 {
        return Err(Error::EstimationFailed(
            "every snapshot had coincident local models".into(),
        ));
    }
    Ok(((sum / used as f64).sqrt(), used))
}

/// `‖∇f(x̄) − ∇f(ȳ)‖ / ‖x̄ − ȳ‖`.
pub fn estimate_lg<O: FederatedObjective + ?Sized>(obj: &O, x_bar: &ModelVector, y_bar: &ModelVector) -> Result<f64> {
    let dist = x_bar.dist_sq(y_bar).sqrt();
    if dist == 0.0 {
        return Err(Error::EstimationFailed("coincident points".into()));
    }
    Ok(obj.global_gradient(x_bar).dist_sq(&obj.global_gradient(y_bar)).sqrt() / dist)
}

/// `max_i ‖∇F_i(x̄) − ∇F_i(x_i)‖ / ‖x̄ − x_i‖` over workers with `x_i ≠ x̄`.
pub fn estimate_ltilde<O: FederatedObjective + ?Sized>(
    obj: &O,
    x_bar: &ModelVector,
    locals: &[ModelVector],
) -> Result<f64> {
    let mut best: Option<f64> = None;
    for (i, x) in locals.iter().enumerate() {
        let dist = x.dist_sq(x_bar).sqrt();
        if dist == 0.0 {
            continue;
        }
        let q = obj.local_gradient(i, x_bar).dist_sq(&obj.local_gradient(i, x)).sqrt() / dist;
        best = Some(best.map_or(q, |b: f64| b.max(q)));
    }
    best.ok_or_else(|| Error::EstimationFailed("every local model coincides with the average".into()))
}

/// `√(mean ‖g − ∇F_i(x)‖²)` over `draws` oracle samples.
pub fn estimate_sigma<O: FederatedObjective + ?Sized>(
    obj: &O,
    worker: usize,
    x: &ModelVector,
    noise: &NoiseModel,
    batch: usize,
    draws: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidInput("estimate_sigma needs at least one draw".into()));
    }
    let exact = obj.local_gradient(worker, x);
    let total: f64 = (0..draws)
        .map(|_| obj.stochastic_gradient(worker, x, noise, batch, stream).dist_sq(&exact))
        .sum();
    Ok((total / draws as f64).sqrt())
}
