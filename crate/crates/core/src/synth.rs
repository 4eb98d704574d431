//! Synthetic data generation for benchmarks and tests.
//!
//! The generative protocol: a sparse precision matrix with ±1 off-diagonal
//! entries and diagonal `1 + degree` (strictly diagonally dominant, hence
//! PD), per-view signal loadings drawn column-wise from `t_p(ν, μ, Θ⁻¹)`,
//! isotropic-t noise loadings, and standard-normal sample loading matrices
//! with a full-row-rank guarantee.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Error;
use crate::rng::{mix, substream};
use crate::tdist::MvtParams;
use crate::types::{EdgeSet, ExpressionView};
use crate::Result;

/// Specification of one synthetic problem.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Number of genes.
    pub p: usize,
    /// Sample loadings per view.
    pub n: usize,
    /// Signal rank per view; noise rank is `n − k`.
    pub k: usize,
    /// Number of views `D`.
    pub views: usize,
    /// Degrees of freedom of the latent t-distributions.
    pub nu: f64,
    /// Probability of a −1 (and, independently, of a +1) off-diagonal entry.
    pub edge_prob: f64,
    pub seed: u64,
    /// Location of the signal loadings (defaults to zero).
    pub mu: DVector<f64>,
    /// Isotropic noise scale (defaults to one).
    pub sigma: f64,
}

impl SynthSpec {
    pub fn new(p: usize, n: usize, k: usize, views: usize, seed: u64) -> Self {
        Self {
            p,
            n,
            k,
            views,
            nu: 3.0,
            edge_prob: 0.01,
            seed,
            mu: DVector::zeros(p),
            sigma: 1.0,
        }
    }

    /// Noise rank `r = n − k`.
    pub fn r(&self) -> usize {
        self.n - self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidParameter("p must be at least 2".into()));
        }
        if self.k < 1 || self.k > self.n {
            return Err(Error::InvalidParameter(format!(
                "signal rank k={} outside 1..={}",
                self.k, self.n
            )));
        }
        if self.views == 0 {
            return Err(Error::InvalidParameter("need at least one view".into()));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "edge probability {} outside (0, 0.5)",
                self.edge_prob
            )));
        }
        if !(self.nu > 2.0) {
            return Err(Error::InvalidParameter(
                "degrees of freedom must exceed 2".into(),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter("noise scale must be positive".into()));
        }
        if self.mu.len() != self.p {
            return Err(Error::Shape("location vector must have length p".into()));
        }
        Ok(())
    }
}

/// Ground truth accompanying a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub theta: DMatrix<f64>,
    pub edges: EdgeSet,
    pub per_view: Vec<ViewTruth>,
}

/// True latent matrices of one view.
#[derive(Debug, Clone)]
pub struct ViewTruth {
    /// Signal loadings `p × k`.
    pub s: DMatrix<f64>,
    /// Noise loadings `p × r` (zero columns when `r = 0`).
    pub z: DMatrix<f64>,
    /// Signal mixing `k × n`.
    pub a: DMatrix<f64>,
    /// Noise mixing `r × n`.
    pub b: DMatrix<f64>,
}

/// Draws a sparse PD precision matrix and its ground-truth edge set.
///
/// Off-diagonal entries (upper triangle, mirrored) are −1, 0, +1 with
/// probabilities `edge_prob, 1 − 2·edge_prob, edge_prob`; each diagonal
/// entry is one plus the node degree, which makes the matrix strictly
/// diagonally dominant.
pub fn gen_theta(p: usize, edge_prob: f64, seed: u64) -> Result<(DMatrix<f64>, EdgeSet)> {
    if p < 2 {
        return Err(Error::InvalidParameter("p must be at least 2".into()));
    }
    if !(edge_prob >= 0.0 && edge_prob < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "edge probability {edge_prob} outside [0, 0.5)"
        )));
    }
    let mut rng = substream(seed, 0);
    let mut theta = DMatrix::zeros(p, p);
    let mut edges = EdgeSet::new();
    for i in 0..p {
        for j in (i + 1)..p {
            let u: f64 = rng.gen();
            let v = if u < edge_prob {
                -1.0
            } else if u < 2.0 * edge_prob {
                1.0
            } else {
                0.0
            };
            if v != 0.0 {
                theta[(i, j)] = v;
                theta[(j, i)] = v;
                edges.insert((i, j));
            }
        }
    }
    for i in 0..p {
        let degree = theta.row(i).iter().filter(|v| **v != 0.0).count();
        theta[(i, i)] = 1.0 + degree as f64;
    }
    Ok((theta, edges))
}

/// Generates all views plus full ground truth for a given precision matrix.
pub fn gen_views(spec: &SynthSpec, theta: &DMatrix<f64>) -> Result<(Vec<ExpressionView>, SynthTruth)> {
    spec.validate()?;
    if theta.nrows() != spec.p || theta.ncols() != spec.p {
        return Err(Error::Shape(format!(
            "precision matrix is {}×{}, expected {0}×{0} of size {}",
            theta.nrows(),
            theta.ncols(),
            spec.p
        )));
    }
    let dispersion = crate::types::sym_inverse(theta)
        .ok_or_else(|| Error::NotPositiveDefinite("ground-truth precision".into()))?;
    let signal_params = MvtParams::new(spec.nu, spec.mu.clone(), dispersion)?;
    let noise_params = MvtParams::new(
        spec.nu,
        DVector::zeros(spec.p),
        DMatrix::identity(spec.p, spec.p) * spec.sigma * spec.sigma,
    )?;
    let (k, r, n) = (spec.k, spec.r(), spec.n);

    let mut views = Vec::with_capacity(spec.views);
    let mut truths = Vec::with_capacity(spec.views);
    for d in 0..spec.views {
        let tag = |role: u64| mix(spec.seed, (d as u64) << 3 | role);
        let s = crate::tdist::sample(&signal_params, k, tag(0))?;
        let z = if r > 0 {
            crate::tdist::sample(&noise_params, r, tag(1))?
        } else {
            DMatrix::zeros(spec.p, 0)
        };
        let (a, b) = draw_mixing(k, r, n, tag(2))?;
        let mut x = &s * &a;
        if r > 0 {
            x += &z * &b;
        }
        let gene_ids = (0..spec.p).map(|i| format!("g{i}")).collect();
        let sample_ids = (0..n).map(|j| format!("v{d}_s{j}")).collect();
        views.push(ExpressionView::new(format!("v{d}"), gene_ids, sample_ids, x)?);
        truths.push(ViewTruth { s, z, a, b });
    }
    let edges = crate::types::edges_of(theta);
    Ok((
        views,
        SynthTruth {
            theta: theta.clone(),
            edges,
            per_view: truths,
        },
    ))
}

/// Draws standard-normal mixing matrices until the stacked `(Aᵀ|Bᵀ)ᵀ` is
/// well conditioned (condition number < 1e8). At most 10 redraws.
fn draw_mixing(k: usize, r: usize, n: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    for attempt in 0..10u64 {
        let mut rng = substream(seed, attempt);
        let stacked = DMatrix::from_fn(k + r, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let svd = stacked.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin > 0.0 && smax / smin < 1e8 {
            let a = stacked.rows(0, k).into_owned();
            let b = stacked.rows(k, r).into_owned();
            return Ok((a, b));
        }
    }
    Err(Error::Degenerate(
        "mixing matrix remained ill-conditioned after 10 redraws".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    #[test]
    fn zero_edge_probability_gives_identity() {
        let (theta, edges) = gen_theta(6, 0.0, 1).unwrap();
        assert_eq!(theta, DMatrix::identity(6, 6));
        assert!(edges.is_empty());
    }

    #[test]
    fn diagonal_is_one_plus_degree() {
        let (theta, _) = gen_theta(40, 0.05, 7).unwrap();
        for i in 0..40 {
            let degree = (0..40)
                .filter(|&j| j != i && theta[(i, j)] != 0.0)
                .count() as f64;
            assert_eq!(theta[(i, i)], 1.0 + degree);
        }
    }

    #[test]
    fn generated_precision_is_positive_definite() {
        for seed in 0..100 {
            let (theta, _) = gen_theta(60, 0.02, seed).unwrap();
            let min_eig = SymmetricEigen::new(theta).eigenvalues.min();
            assert!(min_eig > 0.0, "seed {seed}: min eigenvalue {min_eig}");
        }
    }

    #[test]
    fn truth_edges_match_support() {
        let (theta, edges) = gen_theta(30, 0.05, 3).unwrap();
        assert_eq!(edges, crate::types::edges_of(&theta));
    }

    #[test]
    fn edge_density_is_calibrated() {
        // Mean off-diagonal density ≈ 2·edge_prob; 3σ binomial band.
        let p = 200;
        let pairs_per_seed = p * (p - 1) / 2;
        let seeds = 200u64;
        let mut total_edges = 0usize;
        for seed in 0..seeds {
            let (_, edges) = gen_theta(p, 0.01, 1000 + seed).unwrap();
            total_edges += edges.len();
        }
        let trials = (pairs_per_seed as f64) * seeds as f64;
        let density = total_edges as f64 / trials;
        let expect = 0.02;
        let sigma = (expect * (1.0 - expect) / trials).sqrt();
        assert!(
            (density - expect).abs() < 3.0 * sigma,
            "density {density} vs {expect} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn noiseless_square_case_reconstructs_sources() {
        let mut spec = SynthSpec::new(12, 6, 6, 1, 5);
        spec.edge_prob = 0.05;
        let (theta, _) = gen_theta(12, spec.edge_prob, 5).unwrap();
        let (views, truth) = gen_views(&spec, &theta).unwrap();
        let a = truth.per_view[0].a.clone();
        let recovered = &views[0].data * a.try_inverse().unwrap();
        assert!((recovered - &truth.per_view[0].s).abs().max() < 1e-8);
    }

    #[test]
    fn shapes_and_finiteness_at_benchmark_scale() {
        let mut spec = SynthSpec::new(200, 100, 50, 2, 11);
        spec.edge_prob = 0.01;
        let (theta, _) = gen_theta(200, 0.01, 11).unwrap();
        let (views, truth) = gen_views(&spec, &theta).unwrap();
        assert_eq!(views.len(), 2);
        for (v, t) in views.iter().zip(&truth.per_view) {
            assert_eq!((v.p(), v.n()), (200, 100));
            assert_eq!(t.s.shape(), (200, 50));
            assert_eq!(t.z.shape(), (200, 50));
            assert_eq!(t.a.shape(), (50, 100));
            assert_eq!(t.b.shape(), (50, 100));
            assert!(v.data.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn signal_dispersion_matches_t_moment_formula() {
        // Oversampled check: empirical covariance of the signal loadings
        // approaches ν/(ν−2)·Θ⁻¹. Run at ν = 5 so fourth moments exist and
        // the sample covariance concentrates (at ν = 3 the estimator itself
        // is heavy-tailed), and at p = 20 since the Frobenius error floor
        // scales as sqrt(p / draws).
        let p = 20;
        let nu = 5.0;
        let (theta, _) = gen_theta(p, 0.05, 13).unwrap();
        let sigma = crate::types::sym_inverse(&theta).unwrap();
        let params = MvtParams::new(nu, DVector::zeros(p), sigma.clone()).unwrap();
        let draws = crate::tdist::sample(&params, 20_000, 17).unwrap();
        let m = draws.ncols();
        let mean = draws.column_mean();
        let mut cov = DMatrix::zeros(p, p);
        for j in 0..m {
            let d = draws.column(j) - &mean;
            cov.ger(1.0 / m as f64, &d, &d, 1.0);
        }
        let target = sigma * (nu / (nu - 2.0));
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.10, "relative Frobenius error {rel}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            edge_prob: 0.05,
            ..SynthSpec::new(15, 8, 5, 2, 21)
        };
        let (theta, _) = gen_theta(15, 0.05, 21).unwrap();
        let (views_a, _) = gen_views(&spec, &theta).unwrap();
        let (views_b, _) = gen_views(&spec, &theta).unwrap();
        for (a, b) in views_a.iter().zip(&views_b) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn invalid_rank_is_rejected() {
        let spec = SynthSpec::new(10, 5, 6, 1, 1);
        let (theta, _) = gen_theta(10, 0.01, 1).unwrap();
        assert!(gen_views(&spec, &theta).is_err());
    }
}
