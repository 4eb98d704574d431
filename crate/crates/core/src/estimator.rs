//! Named edge estimators: a single dispatch point used by stability
//! selection, the benchmark harness, and the CLI.
//!
//! All estimators take aligned views, one penalty value, and a seed, and
//! return a [`PrecisionEstimate`]. The two GLASSO preprocessing baselines
//! live here: standardization (z-score each gene per view, pool, GLASSO)
//! and ICA (per-view unmixing, pool all components, GLASSO) — neither
//! truncates dimensions.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::glasso::{self, GlassoSettings};
use crate::mvtlasso::{self, MvtlassoSettings, RankSelection, WOptSettings};
use crate::rng::mix;
use crate::types::{ExpressionView, PrecisionEstimate};
use crate::Result;

/// TLASSO hyperparameters (penalty and seed are supplied per call).
#[derive(Debug, Clone)]
pub struct TlassoConfig {
    pub nu: f64,
    pub max_em_iter: usize,
    pub tol: f64,
}

impl Default for TlassoConfig {
    fn default() -> Self {
        Self {
            nu: 3.0,
            max_em_iter: 50,
            tol: 1e-4,
        }
    }
}

/// MVTLASSO hyperparameters (penalty and seed are supplied per call).
#[derive(Debug, Clone)]
pub struct MvtlassoConfig {
    pub nu: f64,
    pub k_per_view: RankSelection,
    pub max_em_iter: usize,
    pub em_tol: f64,
    pub warm_start_iters: usize,
    pub w_opt: WOptSettings,
    pub fix_w_identity: bool,
    pub rank_permutations: usize,
    pub rank_quantile: f64,
}

impl Default for MvtlassoConfig {
    fn default() -> Self {
        Self {
            nu: 3.0,
            k_per_view: RankSelection::Auto,
            max_em_iter: 50,
            em_tol: 1e-5,
            warm_start_iters: 5,
            w_opt: WOptSettings::default(),
            fix_w_identity: false,
            rank_permutations: 49,
            rank_quantile: 0.95,
        }
    }
}

/// A named estimator with its method-specific settings.
#[derive(Debug, Clone)]
pub enum Method {
    /// GLASSO on the empirical covariance of the pooled raw columns.
    Glasso,
    /// Per-view gene standardization, pooling, then GLASSO.
    GlassoStd,
    /// Per-view ICA unmixing, pooling of all components, then GLASSO.
    GlassoIca,
    /// Robust single-distribution EM on the pooled columns.
    Tlasso(TlassoConfig),
    /// The multi-view EM.
    Mvtlasso(MvtlassoConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Glasso => "glasso",
            Method::GlassoStd => "glasso-std",
            Method::GlassoIca => "glasso-ica",
            Method::Tlasso(_) => "tlasso",
            Method::Mvtlasso(_) => "mvtlasso",
        }
    }

    /// Parses a method name with default settings.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "glasso" => Ok(Method::Glasso),
            "glasso-std" => Ok(Method::GlassoStd),
            "glasso-ica" => Ok(Method::GlassoIca),
            "tlasso" => Ok(Method::Tlasso(TlassoConfig::default())),
            "mvtlasso" => Ok(Method::Mvtlasso(MvtlassoConfig::default())),
            other => Err(Error::InvalidParameter(format!(
                "unknown method '{other}'; valid: glasso, glasso-std, glasso-ica, tlasso, mvtlasso"
            ))),
        }
    }

    pub fn all_names() -> &'static [&'static str] {
        &["glasso", "glasso-std", "glasso-ica", "tlasso", "mvtlasso"]
    }
}

/// Fits the estimator at one penalty value.
pub fn fit_edges(
    method: &Method,
    views: &[ExpressionView],
    lambda: f64,
    seed: u64,
) -> Result<PrecisionEstimate> {
    if views.is_empty() {
        return Err(Error::InvalidParameter("no views given".into()));
    }
    match method {
        Method::Glasso => {
            let pooled = pool_columns(views, Pooling::Raw, seed)?;
            let scatter = empirical_cov(&pooled);
            glasso::solve(&scatter, &GlassoSettings::new(lambda))
        }
        Method::GlassoStd => {
            let pooled = pool_columns(views, Pooling::Standardized, seed)?;
            let scatter = empirical_cov(&pooled);
            glasso::solve(&scatter, &GlassoSettings::new(lambda))
        }
        Method::GlassoIca => {
            let pooled = pool_columns(views, Pooling::Ica, seed)?;
            let scatter = empirical_cov(&pooled);
            glasso::solve(&scatter, &GlassoSettings::new(lambda))
        }
        Method::Tlasso(cfg) => {
            let pooled = pool_columns(views, Pooling::Raw, seed)?;
            let state =
                crate::tlasso::tlasso_fit(&pooled, cfg.nu, lambda, cfg.max_em_iter, cfg.tol, seed)?;
            Ok(PrecisionEstimate::from_theta(state.theta, lambda))
        }
        Method::Mvtlasso(cfg) => {
            let settings = MvtlassoSettings {
                nu: cfg.nu,
                lambda,
                k_per_view: cfg.k_per_view.clone(),
                max_em_iter: cfg.max_em_iter,
                em_tol: cfg.em_tol,
                w_opt: cfg.w_opt.clone(),
                seed,
                warm_start_iters: cfg.warm_start_iters,
                fix_w_identity: cfg.fix_w_identity,
                rank_permutations: cfg.rank_permutations,
                rank_quantile: cfg.rank_quantile,
            };
            let report = mvtlasso::fit(views, &settings)?;
            Ok(PrecisionEstimate::from_theta(
                report.model.theta,
                lambda,
            ))
        }
    }
}

enum Pooling {
    Raw,
    Standardized,
    Ica,
}

/// Concatenates all views' columns (genes must already be aligned), after
/// the per-view preprocessing the pooling mode asks for.
fn pool_columns(views: &[ExpressionView], mode: Pooling, seed: u64) -> Result<DMatrix<f64>> {
    let p = views[0].p();
    for v in views {
        if v.gene_ids != views[0].gene_ids {
            return Err(Error::InvalidParameter(format!(
                "gene axis of view '{}' does not match; align views first",
                v.view_id
            )));
        }
    }
    let total_n: usize = views.iter().map(|v| v.n()).sum();
    let mut pooled = DMatrix::zeros(p, total_n);
    let mut offset = 0;
    for (d, v) in views.iter().enumerate() {
        let block = match mode {
            Pooling::Raw => v.data.clone(),
            Pooling::Standardized => standardize_genes(&v.data)?,
            Pooling::Ica => {
                crate::ica::fastica(&v.data, mix(seed, d as u64), 500, 1e-6)?.components
            }
        };
        pooled.columns_mut(offset, v.n()).copy_from(&block);
        offset += v.n();
    }
    Ok(pooled)
}

/// Z-scores each gene (row) across the samples of one view.
fn standardize_genes(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
        let sd = (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if !(sd > 1e-12) {
            return Err(Error::Degenerate(
                "gene with zero variance cannot be standardized".into(),
            ));
        }
        row.scale_mut(1.0 / sd);
    }
    Ok(out)
}

/// Empirical covariance of the columns about their mean.
pub(crate) fn empirical_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols();
    let mean = x.column_mean();
    let mut cov = DMatrix::zeros(x.nrows(), x.nrows());
    for j in 0..n {
        let d = x.column(j) - &mean;
        cov.ger(1.0 / n as f64, &d, &d, 1.0);
    }
    crate::types::symmetrize(&cov)
}

/// Largest off-diagonal magnitude of the scatter the method's GLASSO stage
/// sees — the smallest penalty yielding the empty graph, used to anchor
/// penalty grids.
pub fn lambda_max(method: &Method, views: &[ExpressionView], seed: u64) -> Result<f64> {
    let scatter = match method {
        Method::Glasso | Method::Tlasso(_) => {
            empirical_cov(&pool_columns(views, Pooling::Raw, seed)?)
        }
        Method::GlassoStd => empirical_cov(&pool_columns(views, Pooling::Standardized, seed)?),
        Method::GlassoIca => empirical_cov(&pool_columns(views, Pooling::Ica, seed)?),
        Method::Mvtlasso(cfg) => {
            // Scatter of the gauge-rescaled unmixed signal estimates: what
            // the first M-step's GLASSO call will roughly see.
            let settings = MvtlassoSettings {
                nu: cfg.nu,
                lambda: 1.0,
                k_per_view: cfg.k_per_view.clone(),
                max_em_iter: 1,
                em_tol: 1e-5,
                w_opt: cfg.w_opt.clone(),
                seed,
                warm_start_iters: 0,
                fix_w_identity: cfg.fix_w_identity,
                rank_permutations: cfg.rank_permutations,
                rank_quantile: cfg.rank_quantile,
            };
            mvtlasso::init_scatter(views, &settings)?
        }
    };
    let p = scatter.nrows();
    let mut max_off: f64 = 0.0;
    for i in 0..p {
        for j in (i + 1)..p {
            max_off = max_off.max(scatter[(i, j)].abs());
        }
    }
    if !(max_off > 0.0) {
        return Err(Error::Degenerate("scatter has no off-diagonal mass".into()));
    }
    Ok(max_off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_theta, gen_views, SynthSpec};

    fn small_problem() -> Vec<ExpressionView> {
        let spec = SynthSpec {
            edge_prob: 0.08,
            ..SynthSpec::new(12, 10, 6, 2, 3)
        };
        let (theta, _) = gen_theta(12, 0.08, 3).unwrap();
        gen_views(&spec, &theta).unwrap().0
    }

    #[test]
    fn method_names_round_trip() {
        for name in Method::all_names() {
            assert_eq!(Method::from_name(name).unwrap().name(), *name);
        }
        assert!(Method::from_name("nope").is_err());
    }

    #[test]
    fn glasso_baseline_matches_library_call() {
        let views = small_problem();
        let est = fit_edges(&Method::Glasso, &views, 0.2, 7).unwrap();
        let pooled = pool_columns(&views, Pooling::Raw, 7).unwrap();
        let direct = glasso::solve(&empirical_cov(&pooled), &GlassoSettings::new(0.2)).unwrap();
        assert_eq!(est.edges, direct.edges);
        assert!((est.theta - direct.theta).abs().max() < 1e-12);
    }

    #[test]
    fn standardized_pooling_gives_unit_gene_variance() {
        let views = small_problem();
        let pooled = pool_columns(&views[..1], Pooling::Standardized, 0).unwrap();
        let n = pooled.ncols() as f64;
        for row in pooled.row_iter() {
            let mean = row.mean();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 1e-10 && mean.abs() < 1e-12);
        }
    }

    #[test]
    fn all_methods_produce_estimates() {
        let views = small_problem();
        for name in Method::all_names() {
            let method = Method::from_name(name).unwrap();
            let method = match method {
                // keep the unit test quick
                Method::Mvtlasso(mut cfg) => {
                    cfg.max_em_iter = 3;
                    cfg.k_per_view = RankSelection::Fixed(vec![6, 6]);
                    Method::Mvtlasso(cfg)
                }
                m => m,
            };
            let est = fit_edges(&method, &views, 0.3, 11).unwrap();
            assert_eq!(est.p(), 12, "{name}");
        }
    }

    #[test]
    fn lambda_max_empties_the_graph() {
        let views = small_problem();
        for method in [Method::Glasso, Method::GlassoStd] {
            let lmax = lambda_max(&method, &views, 5).unwrap();
            let est = fit_edges(&method, &views, lmax * 1.001, 5).unwrap();
            assert!(est.edges.is_empty(), "{}", method.name());
        }
    }
}
