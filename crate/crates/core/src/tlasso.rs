//! Single-view robust precision estimation under i.i.d. multivariate-t
//! samples (TLASSO): an EM loop alternating the latent-scale posterior with
//! a weighted-scatter GLASSO step.
//!
//! Used standalone as a baseline and, with a small iteration budget, to
//! warm-start the multi-view EM.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::Error;
use crate::glasso::{self, GlassoSettings};
use crate::tdist;
use crate::Result;

/// Final EM state of a TLASSO fit.
#[derive(Debug, Clone)]
pub struct TlassoState {
    pub mu: DVector<f64>,
    pub theta: DMatrix<f64>,
    /// Latent-scale weights from the final E-step (the ones the final
    /// M-step consumed).
    pub tau: DVector<f64>,
    /// Penalized observed-data log-likelihood after each M-step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// E-step: per-column posterior scale means `τ_i = (ν+p)/(ν+δ(x_i; μ, Θ))`.
pub fn tlasso_estep(
    x: &DMatrix<f64>,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    nu: f64,
) -> Result<DVector<f64>> {
    let p = x.nrows();
    if mu.len() != p || theta.nrows() != p || theta.ncols() != p {
        return Err(Error::Shape("μ/Θ do not match the data dimension".into()));
    }
    let n = x.ncols();
    let mut tau = DVector::zeros(n);
    for i in 0..n {
        let col = x.column(i).clone_owned();
        let delta = crate::types::mahalanobis_delta(&col, mu, theta)?;
        tau[i] = tdist::tau_posterior_mean(delta, nu, p);
    }
    Ok(tau)
}

fn weighted_mean(x: &DMatrix<f64>, tau: &DVector<f64>) -> DVector<f64> {
    let mut mu = DVector::zeros(x.nrows());
    let mut total = 0.0;
    for i in 0..x.ncols() {
        mu.axpy(tau[i], &x.column(i).clone_owned(), 1.0);
        total += tau[i];
    }
    mu / total
}

fn weighted_scatter(x: &DMatrix<f64>, mu: &DVector<f64>, tau: &DVector<f64>) -> DMatrix<f64> {
    let p = x.nrows();
    let n = x.ncols();
    let mut scatter = DMatrix::zeros(p, p);
    for i in 0..n {
        let d = x.column(i) - mu;
        scatter.ger(tau[i] / n as f64, &d, &d, 1.0);
    }
    crate::types::symmetrize(&scatter)
}

fn l1_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Penalized observed-data log-likelihood:
/// `Σ_i ln t_p(x_i | ν, μ, Θ⁻¹) − (n/2)·λ·‖Θ‖₁`.
///
/// The prior weight `(n/2)λ` is the one the M-step's GLASSO call (penalty λ
/// on the scatter normalized by `1/n`) actually maximizes, which is what
/// makes the trace an EM ascent certificate.
pub fn penalized_objective(
    x: &DMatrix<f64>,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    nu: f64,
    lambda: f64,
) -> Result<f64> {
    let chol = Cholesky::new(theta.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Θ in objective".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut loglik = 0.0;
    for i in 0..x.ncols() {
        let col = x.column(i).clone_owned();
        loglik += tdist::log_density_prec(&col, nu, mu, theta, logdet)?;
    }
    Ok(loglik - 0.5 * x.ncols() as f64 * lambda * l1_norm(theta))
}

/// Fits TLASSO by EM.
///
/// Alternates the E-step with closed-form (μ, Σ̂) updates and a GLASSO Θ
/// step, stopping when `max(‖Δμ‖_∞, ‖ΔΘ‖_max) < tol` or the iteration
/// budget runs out. Deterministic; the `_seed` parameter is part of the
/// estimator interface shared with the stochastic fitters.
pub fn tlasso_fit(
    x: &DMatrix<f64>,
    nu: f64,
    lambda: f64,
    max_em_iter: usize,
    tol: f64,
    _seed: u64,
) -> Result<TlassoState> {
    let (p, n) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    if !(lambda > 0.0) || !(nu > 0.0) {
        return Err(Error::InvalidParameter(
            "λ and ν must be strictly positive".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("data contains NaN or Inf".into()));
    }

    // Initialization: coordinate-wise median location, GLASSO on the
    // correlation matrix for Θ.
    let mut mu = column_median(x);
    let ones = DVector::from_element(n, 1.0);
    let cov0 = weighted_scatter(x, &x.column_mean(), &ones);
    let mut corr = cov0.clone();
    for i in 0..p {
        if !(cov0[(i, i)] > 1e-12) {
            return Err(Error::Degenerate(format!(
                "coordinate {i} has (near-)zero variance"
            )));
        }
    }
    for i in 0..p {
        for j in 0..p {
            corr[(i, j)] = cov0[(i, j)] / (cov0[(i, i)] * cov0[(j, j)]).sqrt();
        }
    }
    let glasso_settings = GlassoSettings::new(lambda).with_tol(1e-6);
    let (init, mut warm_state) = glasso::solve_warm(&corr, &glasso_settings, None)?;
    let mut theta = init.theta;

    let mut tau = DVector::from_element(n, 1.0);
    let mut trace = Vec::with_capacity(max_em_iter);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_em_iter {
        iterations += 1;
        tau = tlasso_estep(x, &mu, &theta, nu)?;
        let mu_new = weighted_mean(x, &tau);
        let scatter = weighted_scatter(x, &mu_new, &tau);
        for i in 0..p {
            if !(scatter[(i, i)] > 1e-12) {
                return Err(Error::Degenerate(format!(
                    "weighted scatter diagonal {i} collapsed; data is degenerate"
                )));
            }
        }
        let (est, warm) = glasso::solve_warm(&scatter, &glasso_settings, Some(warm_state))?;
        warm_state = warm;
        // Generalized-EM guard: keep the previous Θ if the solver output is
        // worse on its own objective (can happen near a fixed point when the
        // inner tolerance exceeds the remaining gap).
        let keep_old = glasso::objective(&theta, &scatter, lambda, true)?
            < glasso::objective(&est.theta, &scatter, lambda, true)?;
        let theta_new = if keep_old { theta.clone() } else { est.theta };

        let dmu = (&mu_new - &mu).amax();
        let dtheta = (&theta_new - &theta).abs().max();
        mu = mu_new;
        theta = theta_new;
        trace.push(penalized_objective(x, &mu, &theta, nu, lambda)?);
        if dmu.max(dtheta) < tol {
            converged = true;
            break;
        }
    }

    Ok(TlassoState {
        mu,
        theta,
        tau,
        objective_trace: trace,
        converged,
        iterations,
    })
}

fn column_median(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols();
    DVector::from_fn(x.nrows(), |i, _| {
        let mut row: Vec<f64> = x.row(i).iter().copied().collect();
        row.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if n % 2 == 1 {
            row[n / 2]
        } else {
            0.5 * (row[n / 2 - 1] + row[n / 2])
        }
    })
}
