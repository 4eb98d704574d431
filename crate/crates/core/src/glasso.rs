//! L1-penalized sparse precision estimation:
//!
//! ```text
//!   min_{Θ ≻ 0}  −ln det Θ + tr(S Θ) + λ‖Θ‖₁
//! ```
//!
//! solved by block coordinate descent on the covariance (the classic
//! row/column lasso sweep). Used standalone as a baseline and as the Θ
//! update inside the TLASSO and MVTLASSO M-steps; warm starts across a λ
//! grid or across EM iterations go through [`solve_warm`].

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::Error;
use crate::types::{is_symmetric, symmetrize, PrecisionEstimate};
use crate::Result;

/// Solver settings.
#[derive(Debug, Clone)]
pub struct GlassoSettings {
    /// L1 penalty, strictly positive.
    pub lambda: f64,
    /// Maximum number of full column sweeps.
    pub max_iter: usize,
    /// Convergence threshold on the max elementwise change of the working
    /// covariance per sweep.
    pub tol: f64,
    /// Whether the diagonal of Θ is penalized (‖Θ‖₁ over all entries).
    pub penalize_diagonal: bool,
}

impl GlassoSettings {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            max_iter: 200,
            tol: 1e-5,
            penalize_diagonal: true,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn without_diagonal_penalty(mut self) -> Self {
        self.penalize_diagonal = false;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "penalty must be strictly positive, got {}",
                self.lambda
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Warm-start state: the working covariance and per-column lasso
/// coefficients from a previous solve on the same (or a nearby) problem.
#[derive(Debug, Clone)]
pub struct GlassoWarm {
    w: DMatrix<f64>,
    betas: Vec<DVector<f64>>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn validate_scatter(s: &DMatrix<f64>) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape(format!(
            "scatter must be square, got {}×{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if !is_symmetric(s, 1e-8) {
        return Err(Error::InvalidParameter("scatter matrix is not symmetric".into()));
    }
    for i in 0..s.nrows() {
        if !(s[(i, i)] > 0.0) {
            return Err(Error::Degenerate(format!(
                "scatter diagonal entry {i} is {} (zero-variance input); regularize upstream",
                s[(i, i)]
            )));
        }
    }
    Ok(())
}

/// Solves the penalized problem for scatter `S`.
pub fn solve(s: &DMatrix<f64>, settings: &GlassoSettings) -> Result<PrecisionEstimate> {
    solve_warm(s, settings, None).map(|(est, _)| est)
}

/// Solves with an optional warm start, returning the state for reuse.
pub fn solve_warm(
    s: &DMatrix<f64>,
    settings: &GlassoSettings,
    warm: Option<GlassoWarm>,
) -> Result<(PrecisionEstimate, GlassoWarm)> {
    settings.validate()?;
    validate_scatter(s)?;
    let p = s.nrows();
    let lambda = settings.lambda;
    let diag_shift = if settings.penalize_diagonal { lambda } else { 0.0 };

    if p == 1 {
        let theta = DMatrix::from_element(1, 1, 1.0 / (s[(0, 0)] + diag_shift));
        let warm = GlassoWarm {
            w: DMatrix::from_element(1, 1, s[(0, 0)] + diag_shift),
            betas: vec![DVector::zeros(1)],
        };
        return Ok((PrecisionEstimate::from_theta(theta, lambda), warm));
    }

    // Working covariance; the diagonal is pinned to S_ii (+ λ) throughout.
    let (mut w, mut betas) = match warm {
        Some(state) if state.w.nrows() == p => (state.w, state.betas),
        _ => (s.clone(), vec![DVector::zeros(p); p]),
    };
    for i in 0..p {
        w[(i, i)] = s[(i, i)] + diag_shift;
    }

    let inner_tol = (settings.tol * 0.1).max(1e-12);
    let mut gap = f64::INFINITY;
    let mut converged = false;
    let mut u = DVector::zeros(p);

    for _sweep in 0..settings.max_iter {
        let mut max_dw: f64 = 0.0;
        for j in 0..p {
            let beta = &mut betas[j];
            beta[j] = 0.0;
            // u = W β over the off-j coordinates (β_j is pinned to zero).
            u.gemv(1.0, &w, beta, 0.0);
            // Lasso on the j-th column: min ½βᵀW₁₁β − βᵀs₁₂ + λ‖β‖₁.
            for _pass in 0..1000 {
                let mut max_db: f64 = 0.0;
                for k in 0..p {
                    if k == j {
                        continue;
                    }
                    let old = beta[k];
                    let partial = s[(j, k)] - (u[k] - w[(k, k)] * old);
                    let new = soft_threshold(partial, lambda) / w[(k, k)];
                    let db = new - old;
                    if db != 0.0 {
                        u.axpy(db, &w.column(k).clone_owned(), 1.0);
                        beta[k] = new;
                        max_db = max_db.max(db.abs());
                    }
                }
                if max_db < inner_tol {
                    break;
                }
            }
            // Write the refreshed column w₁₂ = W₁₁ β back symmetrically.
            for k in 0..p {
                if k == j {
                    continue;
                }
                let new_w = u[k];
                max_dw = max_dw.max((new_w - w[(k, j)]).abs());
                w[(k, j)] = new_w;
                w[(j, k)] = new_w;
            }
        }
        gap = max_dw;
        if max_dw < settings.tol {
            converged = true;
            break;
        }
    }

    let theta = recover_theta(&w, &betas)?;
    if !converged {
        return Err(Error::NoConvergence {
            iterations: settings.max_iter,
            gap,
            last: Box::new(theta),
        });
    }
    let est = PrecisionEstimate::from_theta(theta, lambda);
    Ok((est, GlassoWarm { w, betas }))
}

/// Recovers Θ from the converged covariance and lasso coefficients using the
/// block inverse identity: Θ_jj = 1/(w_jj − w₁₂ᵀβ), Θ₁₂ = −β Θ_jj.
fn recover_theta(w: &DMatrix<f64>, betas: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let p = w.nrows();
    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let beta = &betas[j];
        let mut cross = 0.0;
        for k in 0..p {
            if k != j {
                cross += w[(k, j)] * beta[k];
            }
        }
        let denom = w[(j, j)] - cross;
        if !(denom > 0.0) {
            return Err(Error::Numeric(format!(
                "non-positive partial variance {denom:.3e} recovering column {j}"
            )));
        }
        let tjj = 1.0 / denom;
        theta[(j, j)] = tjj;
        for k in 0..p {
            if k != j {
                theta[(k, j)] = -beta[k] * tjj;
            }
        }
    }
    Ok(symmetrize(&theta))
}

/// The penalized negative log-likelihood `−ln det Θ + tr(SΘ) + λ‖Θ‖₁`.
///
/// With `penalize_diagonal = false` the L1 term sums off-diagonal entries
/// only. Errors if Θ is not positive definite.
pub fn objective(
    theta: &DMatrix<f64>,
    s: &DMatrix<f64>,
    lambda: f64,
    penalize_diagonal: bool,
) -> Result<f64> {
    let chol = Cholesky::new(theta.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("objective iterate".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = (s * theta).trace();
    let mut l1 = 0.0;
    for i in 0..theta.nrows() {
        for j in 0..theta.ncols() {
            if i != j || penalize_diagonal {
                l1 += theta[(i, j)].abs();
            }
        }
    }
    Ok(-logdet + trace + lambda * l1)
}
