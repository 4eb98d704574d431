//! Multi-view EM estimation of a shared sparse precision matrix.
//!
//! Each view `X_d` is modeled as a noisy linear mixture of latent loadings:
//! the first `k_d` unmixed columns follow `t_p(ν, μ_d, Θ⁻¹)` with Θ shared
//! across views, the remaining columns are isotropic-t noise. [`fit`] runs
//! the full pipeline: rank preselection, per-view ICA pre-unmixing, a short
//! TLASSO warm start, then EM iterations alternating the latent-scale
//! E-step with closed-form moment updates, a GLASSO Θ step, and a
//! projected-gradient unmixing step on the factorization `W = Q·Λ`
//! (orthogonal × positive diagonal).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::Error;
use crate::glasso::{self, GlassoSettings};
use crate::ica;
use crate::rng::{mix, substream};
use crate::tdist;
use crate::types::{ExpressionView, ModelState, TauMatrix, ViewParams};
use crate::Result;

/// Signal-rank choice per view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankSelection {
    /// Permutation-based parallel analysis per view.
    Auto,
    /// Explicit `k_d` per view.
    Fixed(Vec<usize>),
}

/// Settings of the inner unmixing subproblem.
#[derive(Debug, Clone)]
pub struct WOptSettings {
    /// Gradient steps per M-step.
    pub max_iter: usize,
    /// Initial step size for the backtracking line search.
    pub step: f64,
    /// Relative objective-decrease threshold for early exit.
    pub tol: f64,
}

impl Default for WOptSettings {
    fn default() -> Self {
        Self {
            max_iter: 25,
            step: 0.02,
            tol: 1e-9,
        }
    }
}

/// Settings of the full fit.
#[derive(Debug, Clone)]
pub struct MvtlassoSettings {
    /// Degrees of freedom (fixed hyperparameter, never estimated).
    pub nu: f64,
    /// GLASSO penalty applied to the pooled weighted scatter.
    pub lambda: f64,
    pub k_per_view: RankSelection,
    pub max_em_iter: usize,
    /// Relative penalized log-likelihood change that counts as converged.
    pub em_tol: f64,
    pub w_opt: WOptSettings,
    pub seed: u64,
    /// TLASSO iterations used to initialize (μ_d, σ_d, Θ).
    pub warm_start_iters: usize,
    /// Treat the views as already unmixed: skip ICA and freeze `W_d = I`.
    /// The first `k_d` raw columns are then the signal estimates.
    pub fix_w_identity: bool,
    /// Permutations for automatic rank selection.
    pub rank_permutations: usize,
    /// Null-spectrum quantile for automatic rank selection.
    pub rank_quantile: f64,
}

impl MvtlassoSettings {
    pub fn new(lambda: f64, seed: u64) -> Self {
        Self {
            nu: 3.0,
            lambda,
            k_per_view: RankSelection::Auto,
            max_em_iter: 50,
            em_tol: 1e-5,
            w_opt: WOptSettings::default(),
            seed,
            warm_start_iters: 5,
            fix_w_identity: false,
            rank_permutations: 49,
            rank_quantile: 0.95,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter("λ must be positive".into()));
        }
        if !(self.nu > 2.0) {
            return Err(Error::InvalidParameter("ν must exceed 2".into()));
        }
        if !(self.em_tol > 0.0) {
            return Err(Error::InvalidParameter("em_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: ModelState,
    /// Latent-scale weights from the final E-step.
    pub tau: TauMatrix,
    /// Expected complete-data penalized log-likelihood after each M-step.
    pub q_trace: Vec<f64>,
    /// Penalized observed-data log-likelihood after each M-step.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Iteration indices (1-based) where the unmixing subproblem could not
    /// improve its objective and returned the previous iterate.
    pub w_warnings: Vec<usize>,
    /// Number of M-steps where the pooled scatter needed eigenvalue repair.
    pub sigma_repairs: usize,
}

/// Closed-form moment updates of one M-step.
#[derive(Debug, Clone)]
pub struct Moments {
    /// Per-view signal locations.
    pub mu: Vec<DVector<f64>>,
    /// Pooled weighted scatter (after symmetrization and, if needed,
    /// eigenvalue repair), normalized by `Σ_d k_d`.
    pub sigma_hat: DMatrix<f64>,
    /// Per-view noise scales; `None` when the view has no noise columns.
    pub sigma_noise: Vec<Option<f64>>,
    /// True when the scatter needed its eigenvalues clipped at 1e−10.
    pub repaired: bool,
}

/// Factored unmixing `V = Q·diag(λ)` with `Q` orthogonal and `λ > 0`.
#[derive(Debug, Clone)]
pub struct WFactors {
    pub q: DMatrix<f64>,
    pub scale: DVector<f64>,
}

impl WFactors {
    pub fn identity(n: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            scale: DVector::from_element(n, 1.0),
        }
    }

    /// The assembled matrix `Q·diag(λ)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = self.q.clone();
        for (j, s) in self.scale.iter().enumerate() {
            m.column_mut(j).scale_mut(*s);
        }
        m
    }

    /// `ln |det (QΛ)| = Σ ln λ_j`.
    pub fn log_abs_det(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

/// Result of one unmixing subproblem call.
#[derive(Debug, Clone)]
pub struct WUpdate {
    pub factors: WFactors,
    /// False when no descent step was accepted and the input was returned.
    pub improved: bool,
    pub objective: f64,
}

// ---------------------------------------------------------------------------
// E-step

/// Latent-scale posterior means for every view column.
///
/// For column `i` of view `d`: `Y = X_d W_d`, the reference is `(μ_d, Θ)`
/// for signal columns and `(0, I/σ_d²)` for noise columns, and
/// `τ = (ν+p)/(ν+δ)`.
pub fn estep(views: &[ExpressionView], model: &ModelState) -> Result<TauMatrix> {
    if views.len() != model.views.len() {
        return Err(Error::Shape(format!(
            "{} views but model has {} view parameter sets",
            views.len(),
            model.views.len()
        )));
    }
    let mut per_view = Vec::with_capacity(views.len());
    for (view, params) in views.iter().zip(&model.views) {
        let y = crate::types::unmix(view, params)?;
        per_view.push(estep_columns(
            &y,
            params.k,
            &params.mu,
            &model.theta,
            params.sigma,
            model.nu,
        )?);
    }
    TauMatrix::new(per_view)
}

fn estep_columns(
    y: &DMatrix<f64>,
    k: usize,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    sigma: f64,
    nu: f64,
) -> Result<DVector<f64>> {
    let p = y.nrows();
    let n = y.ncols();
    let mut tau = DVector::zeros(n);
    for i in 0..n {
        let col = y.column(i);
        let delta = if i < k {
            let d = col - mu;
            let q = (theta * &d).dot(&d);
            if q < -1e-10 {
                return Err(Error::Numeric(format!(
                    "negative Mahalanobis distance {q:.3e} in E-step"
                )));
            }
            q.max(0.0)
        } else {
            col.norm_squared() / (sigma * sigma)
        };
        tau[i] = tdist::tau_posterior_mean(delta, nu, p);
    }
    Ok(tau)
}

// ---------------------------------------------------------------------------
// M-step: moments

/// Closed-form updates of `{μ_d}`, the pooled scatter, and `{σ_d}` for
/// fixed τ and unmixed signals `Y_d`.
pub fn mstep_moments(
    y_all: &[DMatrix<f64>],
    ks: &[usize],
    tau: &TauMatrix,
) -> Result<Moments> {
    if y_all.len() != ks.len() || y_all.len() != tau.per_view.len() {
        return Err(Error::Shape("views, ranks, and τ must align".into()));
    }
    let p = y_all
        .first()
        .map(|y| y.nrows())
        .ok_or_else(|| Error::InvalidParameter("no views".into()))?;
    let total_k: usize = ks.iter().sum();
    if total_k == 0 {
        return Err(Error::InvalidParameter(
            "at least one signal column is required overall".into(),
        ));
    }

    let mut mus = Vec::with_capacity(y_all.len());
    for ((y, &k), t) in y_all.iter().zip(ks).zip(&tau.per_view) {
        if t.len() != y.ncols() {
            return Err(Error::Shape("τ length does not match view columns".into()));
        }
        let mut mu = DVector::zeros(p);
        let mut total = 0.0;
        for i in 0..k {
            mu.axpy(t[i], &y.column(i).clone_owned(), 1.0);
            total += t[i];
        }
        if !(total > 0.0) {
            return Err(Error::Numeric("non-positive τ mass on signal columns".into()));
        }
        mus.push(mu / total);
    }

    let mut scatter = DMatrix::zeros(p, p);
    for ((y, &k), (t, mu)) in y_all.iter().zip(ks).zip(tau.per_view.iter().zip(&mus)) {
        for i in 0..k {
            let d = y.column(i) - mu;
            scatter.ger(t[i] / total_k as f64, &d, &d, 1.0);
        }
    }
    scatter = crate::types::symmetrize(&scatter);
    let (sigma_hat, repaired) = psd_repair(scatter)?;

    let mut sigma_noise = Vec::with_capacity(y_all.len());
    for ((y, &k), t) in y_all.iter().zip(ks).zip(&tau.per_view) {
        let n = y.ncols();
        if n == k {
            sigma_noise.push(None);
            continue;
        }
        let mut acc = 0.0;
        for i in k..n {
            acc += t[i] * y.column(i).norm_squared();
        }
        let s2 = acc / (p * (n - k)) as f64;
        if !(s2 > 0.0) {
            return Err(Error::Degenerate(
                "noise columns have zero energy; σ update collapsed".into(),
            ));
        }
        sigma_noise.push(Some(s2.sqrt()));
    }

    Ok(Moments {
        mu: mus,
        sigma_hat,
        sigma_noise,
        repaired,
    })
}

/// Symmetrized eigenvalue repair: eigenvalues below −1e−10 are an error,
/// anything below 1e−10 is clipped up to 1e−10 (logged by the caller).
fn psd_repair(scatter: DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let eig = nalgebra::SymmetricEigen::new(scatter.clone());
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-10 {
        return Err(Error::Numeric(format!(
            "pooled scatter has eigenvalue {min_eig:.3e} below the repair band"
        )));
    }
    if min_eig >= 1e-10 {
        return Ok((scatter, false));
    }
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(1e-10)));
    let repaired = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
    Ok((crate::types::symmetrize(&repaired), true))
}

// ---------------------------------------------------------------------------
// M-step: Θ

/// Θ update: GLASSO on the pooled weighted scatter.
pub fn mstep_theta(sigma_hat: &DMatrix<f64>, lambda: f64) -> Result<crate::types::PrecisionEstimate> {
    glasso::solve(sigma_hat, &GlassoSettings::new(lambda).with_tol(1e-6))
}

// ---------------------------------------------------------------------------
// M-step: W

/// Objective of the unmixing subproblem for `V = QΛ` against pre-unmixed
/// data `xt`:
///
/// ```text
///   Σ_{i≤k} τ_i (y_i − μ)ᵀ Θ (y_i − μ)  +  (1/σ²) Σ_{i>k} τ_i ‖y_i‖²  −  ln|det V|
/// ```
///
/// with `Y = xt · V`.
pub fn w_objective(
    xt: &DMatrix<f64>,
    k: usize,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    sigma: f64,
    tau: &DVector<f64>,
    v: &DMatrix<f64>,
) -> f64 {
    let y = xt * v;
    let n = y.ncols();
    let mut acc = 0.0;
    for i in 0..k {
        let d = y.column(i) - mu;
        acc += tau[i] * (theta * &d).dot(&d);
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    for i in k..n {
        acc += tau[i] * inv_s2 * y.column(i).norm_squared();
    }
    acc - v.clone().lu().determinant().abs().ln()
}

/// Gradient of [`w_objective`] with respect to `V`.
fn w_gradient(
    xt: &DMatrix<f64>,
    k: usize,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    sigma: f64,
    tau: &DVector<f64>,
    factors: &WFactors,
) -> DMatrix<f64> {
    let v = factors.matrix();
    let y = xt * &v;
    let n = y.ncols();
    let p = y.nrows();
    // Columns of the data-term gradient before the Xtᵀ projection.
    let mut cols = DMatrix::zeros(p, n);
    for i in 0..k {
        let d = y.column(i) - mu;
        cols.set_column(i, &((theta * &d) * (2.0 * tau[i])));
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    for i in k..n {
        cols.set_column(i, &(y.column(i) * (2.0 * tau[i] * inv_s2)));
    }
    let mut grad = xt.transpose() * cols;
    // −∂ ln|det V|/∂V = −V^{-T} = −Q Λ^{-1}.
    for j in 0..n {
        let inv_l = 1.0 / factors.scale[j];
        for i in 0..n {
            grad[(i, j)] -= factors.q[(i, j)] * inv_l;
        }
    }
    grad
}

/// Orthogonal polar factor of `a` (U Vᵀ from its SVD).
fn polar_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => Ok(u * v_t),
        _ => Err(Error::Numeric("SVD failed in polar retraction".into())),
    }
}

/// One unmixing update: projected gradient descent on `(Q, Λ)` with polar
/// retraction for `Q`, clamped positive `Λ`, and a monotone backtracking
/// line search. Never returns an iterate with a larger objective than the
/// input; if no improving step exists the input is returned with
/// `improved = false`.
pub fn mstep_w(
    xt: &DMatrix<f64>,
    k: usize,
    mu: &DVector<f64>,
    theta: &DMatrix<f64>,
    sigma: f64,
    tau: &DVector<f64>,
    current: &WFactors,
    opt: &WOptSettings,
) -> Result<WUpdate> {
    let n = xt.ncols();
    let mut q = current.q.clone();
    let mut scale = current.scale.clone();
    let mut f = w_objective(xt, k, mu, theta, sigma, tau, &current.matrix());
    let mut improved = false;
    let mut step = opt.step;

    for _ in 0..opt.max_iter {
        let factors = WFactors {
            q: q.clone(),
            scale: scale.clone(),
        };
        let grad_v = w_gradient(xt, k, mu, theta, sigma, tau, &factors);
        // Chain rule through V = QΛ.
        let mut grad_q = grad_v.clone();
        for j in 0..n {
            grad_q.column_mut(j).scale_mut(scale[j]);
        }
        let grad_scale = DVector::from_fn(n, |j, _| q.column(j).dot(&grad_v.column(j)));

        let mut accepted = false;
        for _ in 0..40 {
            let q_cand = polar_factor(&(&q - &grad_q * step))?;
            let scale_cand = DVector::from_fn(n, |j, _| {
                (scale[j] - step * grad_scale[j]).clamp(1e-6, 1e6)
            });
            let cand = WFactors {
                q: q_cand.clone(),
                scale: scale_cand.clone(),
            };
            let f_cand = w_objective(xt, k, mu, theta, sigma, tau, &cand.matrix());
            if f_cand < f {
                let gain = f - f_cand;
                q = q_cand;
                scale = scale_cand;
                f = f_cand;
                improved = true;
                accepted = true;
                step *= 1.3;
                if gain < opt.tol * (1.0 + f.abs()) {
                    return Ok(WUpdate {
                        factors: WFactors { q, scale },
                        improved,
                        objective: f,
                    });
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(WUpdate {
        factors: WFactors { q, scale },
        improved,
        objective: f,
    })
}

// ---------------------------------------------------------------------------
// Penalized log-likelihood and Q function

fn l1_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Penalized observed-data log-likelihood:
///
/// ```text
///   Σ_d [ ln|det W_d| + Σ_i ln t_p(Y_{d,:,i} | ν, ρ_{d,i}, Φ_{d,i}) ]
///     − (Σ_d k_d / 2) · λ · ‖Θ‖₁
/// ```
///
/// The prior weight `(Σ k_d/2)·λ` matches what the Θ M-step (GLASSO with
/// penalty λ on the `1/Σk_d`-normalized scatter) maximizes, making the
/// trace of this quantity an EM ascent certificate.
pub fn penalized_loglik(views: &[ExpressionView], model: &ModelState) -> Result<f64> {
    if views.len() != model.views.len() {
        return Err(Error::Shape("views and model parameters must align".into()));
    }
    let chol = Cholesky::new(model.theta.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Θ in likelihood".into()))?;
    let theta_logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let p = model.p();
    let zero = DVector::zeros(p);
    let eye_over_s2: Vec<DMatrix<f64>> = model
        .views
        .iter()
        .map(|vp| DMatrix::identity(p, p) / (vp.sigma * vp.sigma))
        .collect();

    let mut total = 0.0;
    let mut total_k = 0usize;
    for (d, (view, params)) in views.iter().zip(&model.views).enumerate() {
        let y = crate::types::unmix(view, params)?;
        total += crate::types::log_abs_det(&params.w);
        for i in 0..y.ncols() {
            let col = y.column(i).clone_owned();
            total += if i < params.k {
                tdist::log_density_prec(&col, model.nu, &params.mu, &model.theta, theta_logdet)?
            } else {
                let noise_logdet = -2.0 * p as f64 * params.sigma.ln();
                tdist::log_density_prec(&col, model.nu, &zero, &eye_over_s2[d], noise_logdet)?
            };
        }
        total_k += params.k;
    }
    Ok(total - 0.5 * total_k as f64 * model.lambda * l1_norm(&model.theta))
}

/// Expected complete-data penalized log-likelihood (the Q function, up to
/// τ-only constants) for fixed latent-scale weights.
fn q_function(
    y_all: &[DMatrix<f64>],
    ks: &[usize],
    logdet_w: &[f64],
    mus: &[DVector<f64>],
    theta: &DMatrix<f64>,
    theta_logdet: f64,
    sigmas: &[f64],
    tau: &TauMatrix,
    lambda: f64,
) -> f64 {
    let p = theta.nrows() as f64;
    let total_k: usize = ks.iter().sum();
    let mut q = 0.0;
    for (((y, &k), (t, mu)), (&ld, &sigma)) in y_all
        .iter()
        .zip(ks)
        .zip(tau.per_view.iter().zip(mus))
        .zip(logdet_w.iter().zip(sigmas))
    {
        q += ld;
        let inv_s2 = 1.0 / (sigma * sigma);
        for i in 0..y.ncols() {
            if i < k {
                let d = y.column(i) - mu;
                q += 0.5 * theta_logdet - 0.5 * t[i] * (theta * &d).dot(&d);
            } else {
                q += -p * sigma.ln() - 0.5 * t[i] * inv_s2 * y.column(i).norm_squared();
            }
        }
    }
    q - 0.5 * total_k as f64 * lambda * l1_norm(theta)
}

// ---------------------------------------------------------------------------
// Rank selection

/// Signal-rank preselection by permutation parallel analysis.
///
/// Compares each singular value of the row-centered view against the given
/// quantile of the matching order statistic over `n_permutations` copies
/// with every row independently permuted; `k` is the number of leading
/// singular values exceeding their null quantile, clamped into
/// `[1, n_d − 1]`.
pub fn select_rank(
    view: &ExpressionView,
    n_permutations: usize,
    quantile: f64,
    seed: u64,
) -> Result<usize> {
    if n_permutations < 19 {
        return Err(Error::InvalidParameter(
            "need at least 19 permutations for a meaningful quantile".into(),
        ));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidParameter("quantile must be in (0, 1)".into()));
    }
    let mut centered = view.data.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let observed = singular_values(&centered);
    let n = view.n();

    let mut null: Vec<Vec<f64>> = vec![Vec::with_capacity(n_permutations); observed.len()];
    let mut work = centered.clone();
    for perm in 0..n_permutations {
        let mut rng = substream(mix(seed, perm as u64), 0);
        work.copy_from(&centered);
        for i in 0..work.nrows() {
            // Fisher–Yates within the row: breaks gene structure, keeps
            // marginals.
            for j in (1..n).rev() {
                let swap = rand::Rng::gen_range(&mut rng, 0..=j);
                let a = work[(i, j)];
                work[(i, j)] = work[(i, swap)];
                work[(i, swap)] = a;
            }
        }
        for (store, value) in null.iter_mut().zip(singular_values(&work)) {
            store.push(value);
        }
    }

    let mut k = 0;
    for (j, s) in observed.iter().enumerate() {
        let thr = quantile_nearest_rank(&mut null[j], quantile);
        if *s > thr {
            k += 1;
        } else {
            break;
        }
    }
    Ok(k.clamp(1, n.saturating_sub(1).max(1)))
}

/// Singular values (descending) via the eigenvalues of `XᵀX`.
fn singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    let gram = crate::types::symmetrize(&(x.transpose() * x));
    let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs
}

fn quantile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q * values.len() as f64).ceil() as usize)
        .saturating_sub(1)
        .min(values.len() - 1);
    values[idx]
}

// ---------------------------------------------------------------------------
// Full pipeline

struct ViewWork {
    /// Pre-unmixed data (ICA components, mixing-gauge rescaled), fixed for
    /// the whole EM run.
    xt: DMatrix<f64>,
    /// Unmixing from raw data to `xt` (identity in `fix_w_identity` mode).
    base_unmixing: DMatrix<f64>,
    base_logdet: f64,
    factors: WFactors,
    k: usize,
    mu: DVector<f64>,
    sigma: f64,
}

impl ViewWork {
    fn y(&self) -> DMatrix<f64> {
        &self.xt * self.factors.matrix()
    }

    fn logdet_w(&self) -> f64 {
        self.base_logdet + self.factors.log_abs_det()
    }

    fn total_w(&self) -> DMatrix<f64> {
        &self.base_unmixing * self.factors.matrix()
    }
}

/// Resolves signal ranks and pre-unmixes every view (ICA, gauge rescaling,
/// kurtosis ordering); shared by [`fit`] and the grid-anchoring helpers.
fn prepare_views(
    views: &[ExpressionView],
    settings: &MvtlassoSettings,
) -> Result<(Vec<ViewWork>, Vec<usize>)> {
    settings.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidParameter("need at least one view".into()));
    }
    let p = views[0].p();
    for v in views {
        if v.gene_ids != views[0].gene_ids {
            return Err(Error::InvalidParameter(format!(
                "gene axis of view '{}' does not match view '{}'; align views first",
                v.view_id, views[0].view_id
            )));
        }
    }

    let ks: Vec<usize> = match &settings.k_per_view {
        RankSelection::Fixed(ks) => {
            if ks.len() != views.len() {
                return Err(Error::InvalidParameter(format!(
                    "{} ranks for {} views",
                    ks.len(),
                    views.len()
                )));
            }
            for (k, v) in ks.iter().zip(views) {
                if *k < 1 || *k > v.n() {
                    return Err(Error::InvalidParameter(format!(
                        "k={k} outside 1..={} for view '{}'",
                        v.n(),
                        v.view_id
                    )));
                }
            }
            ks.clone()
        }
        RankSelection::Auto => {
            let mut ks = Vec::with_capacity(views.len());
            for (d, v) in views.iter().enumerate() {
                let k = select_rank(
                    v,
                    settings.rank_permutations,
                    settings.rank_quantile,
                    mix(settings.seed, (d as u64) << 4 | 1),
                )
                .map_err(|e| e.at_stage("rank selection", 0))?;
                ks.push(k);
            }
            ks
        }
    };

    let mut work: Vec<ViewWork> = Vec::with_capacity(views.len());
    for (d, (view, &k)) in views.iter().zip(&ks).enumerate() {
        let n = view.n();
        let (xt, base_unmixing) = if settings.fix_w_identity {
            (view.data.clone(), DMatrix::identity(n, n))
        } else {
            let res = ica::fastica(
                &view.data,
                mix(settings.seed, (d as u64) << 4 | 2),
                500,
                1e-6,
            )
            .map_err(|e| e.at_stage("ica", 0))?;
            let (xt, unmixing) = gauge_and_order(&view.data, res, k);
            (xt, unmixing)
        };
        let base_logdet = crate::types::log_abs_det(&base_unmixing);
        work.push(ViewWork {
            xt,
            base_unmixing,
            base_logdet,
            factors: WFactors::identity(n),
            k,
            mu: DVector::zeros(p),
            sigma: 1.0,
        });
    }
    Ok((work, ks))
}

/// Pooled unweighted scatter of the initial signal estimates (the matrix
/// the first Θ step would roughly see); used to anchor penalty grids.
pub fn init_scatter(
    views: &[ExpressionView],
    settings: &MvtlassoSettings,
) -> Result<DMatrix<f64>> {
    let (work, ks) = prepare_views(views, settings)?;
    let y_all: Vec<DMatrix<f64>> = work.iter().map(|w| w.y()).collect();
    let tau = TauMatrix::new(
        y_all
            .iter()
            .map(|y| DVector::from_element(y.ncols(), 1.0))
            .collect(),
    )?;
    let moments = mstep_moments(&y_all, &ks, &tau)?;
    Ok(moments.sigma_hat)
}

/// Fits the multi-view model.
///
/// Pipeline: rank selection (if `Auto`) → per-view ICA with
/// kurtosis-ordered signal/noise assignment (frozen for the run) → TLASSO
/// warm start for (μ_d, σ_d, Θ) → EM alternating
/// [`estep`] / [`mstep_moments`] / GLASSO / [`mstep_w`] until the relative
/// penalized log-likelihood change drops below `em_tol`. Deterministic for
/// a given seed.
pub fn fit(views: &[ExpressionView], settings: &MvtlassoSettings) -> Result<FitReport> {
    let (mut work, ks) = prepare_views(views, settings)?;
    let p = views[0].p();

    // --- TLASSO warm start on the pooled signal columns
    let total_k: usize = ks.iter().sum();
    if total_k == 0 {
        return Err(Error::InvalidParameter("no signal columns selected".into()));
    }
    let mut pooled = DMatrix::zeros(p, total_k);
    let mut offset = 0;
    for w in &work {
        pooled
            .columns_mut(offset, w.k)
            .copy_from(&w.xt.columns(0, w.k));
        offset += w.k;
    }
    let mut theta = if settings.warm_start_iters > 0 && total_k >= 2 {
        match crate::tlasso::tlasso_fit(
            &pooled,
            settings.nu,
            settings.lambda,
            settings.warm_start_iters,
            0.0,
            settings.seed,
        ) {
            Ok(state) => state.theta,
            // A degenerate warm start (e.g. a collapsed pooled scatter) is
            // not fatal; the EM starts from the identity instead.
            Err(Error::Degenerate(_)) => DMatrix::identity(p, p),
            Err(e) => return Err(e.at_stage("tlasso warm start", 0)),
        }
    } else {
        DMatrix::identity(p, p)
    };
    for w in work.iter_mut() {
        let y = w.y();
        let mut mu = DVector::zeros(p);
        for i in 0..w.k {
            mu.axpy(1.0 / w.k as f64, &y.column(i).clone_owned(), 1.0);
        }
        w.mu = mu;
        let r = y.ncols() - w.k;
        if r > 0 {
            let mut acc = 0.0;
            for i in w.k..y.ncols() {
                acc += y.column(i).norm_squared();
            }
            w.sigma = (acc / (p * r) as f64).sqrt().max(1e-8);
        }
    }

    // --- EM loop
    let glasso_settings = GlassoSettings::new(settings.lambda).with_tol(1e-6);
    let mut warm_state: Option<glasso::GlassoWarm> = None;
    let mut q_trace = Vec::new();
    let mut loglik_trace = Vec::new();
    let mut w_warnings = Vec::new();
    let mut sigma_repairs = 0usize;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_tau: Option<TauMatrix> = None;

    for t in 1..=settings.max_em_iter {
        iterations = t;

        // E-step on the current parameters.
        let theta_for_estep = theta.clone();
        let mut per_view_tau = Vec::with_capacity(work.len());
        for w in &work {
            per_view_tau.push(
                estep_columns(&w.y(), w.k, &w.mu, &theta_for_estep, w.sigma, settings.nu)
                    .map_err(|e| e.at_stage("estep", t))?,
            );
        }
        let tau = TauMatrix::new(per_view_tau).map_err(|e| e.at_stage("estep", t))?;

        // M-step 1: closed-form moments on the current Y.
        let y_all: Vec<DMatrix<f64>> = work.iter().map(|w| w.y()).collect();
        let moments =
            mstep_moments(&y_all, &ks, &tau).map_err(|e| e.at_stage("moments", t))?;
        if moments.repaired {
            sigma_repairs += 1;
            log::warn!("EM iteration {t}: pooled scatter eigenvalues clipped at 1e-10");
        }
        for (w, mu) in work.iter_mut().zip(&moments.mu) {
            w.mu = mu.clone();
        }
        for (w, s) in work.iter_mut().zip(&moments.sigma_noise) {
            if let Some(s) = s {
                w.sigma = *s;
            }
        }

        // M-step 2: Θ via GLASSO, with a generalized-EM guard that keeps
        // the previous Θ if the solver output is worse on its objective.
        let (est, warm) = glasso::solve_warm(&moments.sigma_hat, &glasso_settings, warm_state)
            .map_err(|e| e.at_stage("glasso", t))?;
        warm_state = Some(warm);
        let keep_old = glasso::objective(&theta, &moments.sigma_hat, settings.lambda, true)?
            < glasso::objective(&est.theta, &moments.sigma_hat, settings.lambda, true)?;
        if !keep_old {
            theta = est.theta;
        }

        // M-step 3: one unmixing update per view.
        if !settings.fix_w_identity {
            let mut any_stuck = false;
            for (d, w) in work.iter_mut().enumerate() {
                let update = mstep_w(
                    &w.xt,
                    w.k,
                    &w.mu,
                    &theta,
                    w.sigma,
                    &tau.per_view[d],
                    &w.factors,
                    &settings.w_opt,
                )
                .map_err(|e| e.at_stage("w update", t))?;
                if !update.improved {
                    any_stuck = true;
                }
                w.factors = update.factors;
            }
            if any_stuck {
                w_warnings.push(t);
            }
        }

        // Traces on the updated parameters.
        let chol = Cholesky::new(theta.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Θ after M-step".into()))
            .map_err(|e| e.at_stage("glasso", t))?;
        let theta_logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let y_new: Vec<DMatrix<f64>> = work.iter().map(|w| w.y()).collect();
        let logdets: Vec<f64> = work.iter().map(|w| w.logdet_w()).collect();
        let mus: Vec<DVector<f64>> = work.iter().map(|w| w.mu.clone()).collect();
        let sigmas: Vec<f64> = work.iter().map(|w| w.sigma).collect();
        let q = q_function(
            &y_new,
            &ks,
            &logdets,
            &mus,
            &theta,
            theta_logdet,
            &sigmas,
            &tau,
            settings.lambda,
        );
        q_trace.push(q);
        let loglik = loglik_internal(
            &y_new,
            &ks,
            &logdets,
            &mus,
            &theta,
            theta_logdet,
            &sigmas,
            settings.nu,
            settings.lambda,
        )?;
        let prev = loglik_trace.last().copied();
        loglik_trace.push(loglik);
        last_tau = Some(tau);

        if let Some(prev) = prev {
            if (loglik - prev).abs() / (1.0 + prev.abs()) < settings.em_tol {
                converged = true;
                break;
            }
        }
    }

    let view_params: Vec<ViewParams> = work
        .iter()
        .map(|w| ViewParams::new(w.total_w(), w.mu.clone(), w.sigma, w.k))
        .collect::<Result<_>>()?;
    let model = ModelState::new(view_params, theta, settings.nu, settings.lambda)?;
    let tau = last_tau.expect("at least one EM iteration runs");
    Ok(FitReport {
        model,
        tau,
        q_trace,
        loglik_trace,
        converged,
        iterations,
        w_warnings,
        sigma_repairs,
    })
}

fn loglik_internal(
    y_all: &[DMatrix<f64>],
    ks: &[usize],
    logdet_w: &[f64],
    mus: &[DVector<f64>],
    theta: &DMatrix<f64>,
    theta_logdet: f64,
    sigmas: &[f64],
    nu: f64,
    lambda: f64,
) -> Result<f64> {
    let p = theta.nrows();
    let zero = DVector::zeros(p);
    let total_k: usize = ks.iter().sum();
    let mut total = 0.0;
    for (((y, &k), (mu, &ld)), &sigma) in y_all
        .iter()
        .zip(ks)
        .zip(mus.iter().zip(logdet_w))
        .zip(sigmas)
    {
        total += ld;
        let noise_prec = DMatrix::identity(p, p) / (sigma * sigma);
        let noise_logdet = -2.0 * p as f64 * sigma.ln();
        for i in 0..y.ncols() {
            let col = y.column(i).clone_owned();
            total += if i < k {
                tdist::log_density_prec(&col, nu, mu, theta, theta_logdet)?
            } else {
                tdist::log_density_prec(&col, nu, &zero, &noise_prec, noise_logdet)?
            };
        }
    }
    Ok(total - 0.5 * total_k as f64 * lambda * l1_norm(theta))
}

/// Restores the data-implied scale of ICA components and orders them by a
/// robust kurtosis score so signal occupies the leading columns.
///
/// FastICA normalizes every component to unit Gram; the estimated mixing
/// row norms (relative to their √n expectation under the standard-normal
/// loading model) carry the scale back onto the components. This keeps the
/// whole EM trajectory covariant under rescalings of the signal part of the
/// data, which is what makes the penalty-matched support recovery of the
/// identifiability property hold.
fn gauge_and_order(x: &DMatrix<f64>, res: ica::IcaResult, _k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = res.unmixing.ncols();
    let mixing = res
        .unmixing
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let sqrt_n = (n as f64).sqrt();
    let mut unmixing = res.unmixing;
    for j in 0..n {
        let s = (mixing.row(j).norm() / sqrt_n).max(1e-12);
        unmixing.column_mut(j).scale_mut(s);
    }
    let xt = x * &unmixing;

    // Order columns by decreasing kurtosis score.
    let mut scores: Vec<(usize, f64)> = (0..n)
        .map(|j| (j, kurtosis_score(&xt.column(j).clone_owned())))
        .collect();
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut xt_ord = DMatrix::zeros(xt.nrows(), n);
    let mut un_ord = DMatrix::zeros(n, n);
    for (dst, (src, _)) in scores.iter().enumerate() {
        xt_ord.set_column(dst, &xt.column(*src));
        un_ord.set_column(dst, &unmixing.column(*src));
    }
    (xt_ord, un_ord)
}

/// Winsorized excess kurtosis: center at the median, clip at the 1st/99th
/// percentile, then m₄/m₂² − 3. Robust to a handful of extreme genes.
fn kurtosis_score(col: &DVector<f64>) -> f64 {
    let mut vals: Vec<f64> = col.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let median = if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    };
    let lo = vals[(n as f64 * 0.01).floor() as usize];
    let hi = vals[((n as f64 * 0.99).ceil() as usize).min(n - 1)];
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for v in &vals {
        let c = (v.clamp(lo, hi)) - median;
        m2 += c * c;
        m4 += c * c * c * c;
    }
    m2 /= n as f64;
    m4 /= n as f64;
    if m2 <= 0.0 {
        return f64::NEG_INFINITY;
    }
    m4 / (m2 * m2) - 3.0
}
