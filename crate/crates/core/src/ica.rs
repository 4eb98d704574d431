//! Whitening and fixed-point ICA.
//!
//! A view `X` (`p` genes × `n` samples) is treated as `p` observations of an
//! `n`-dimensional mixture: each row is one draw of the latent loading vector
//! in the generative model, so the recovered source columns are the unmixed
//! loading estimates. Whitening brings the column Gram `XᵀX/p` to the
//! identity; the fixed-point iteration then searches an orthogonal rotation
//! maximizing non-Gaussianity under the log-cosh contrast with symmetric
//! (parallel) decorrelation.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Error;
use crate::rng::substream;
use crate::Result;

/// Relative eigenvalue threshold below which a direction counts as
/// numerically rank deficient.
const RANK_TOL_REL: f64 = 1e-10;

/// Result of [`whiten`].
#[derive(Debug, Clone)]
pub struct WhitenResult {
    /// Transformed matrix with identity column Gram (`XwᵀXw/p = I`).
    pub xw: DMatrix<f64>,
    /// The `n × n` map applied: `xw = (X − shift) · whitener`.
    pub whitener: DMatrix<f64>,
    /// Numerical rank of the column space.
    pub rank: usize,
    /// True when `rank < n`; the whitener is then eigenvalue-clamped to stay
    /// invertible and the Gram identity only holds on the retained subspace.
    pub reduced_rank: bool,
}

/// Result of [`fastica`].
#[derive(Debug, Clone)]
pub struct IcaResult {
    /// Estimated source columns (`p × n`), unit column Gram.
    pub components: DMatrix<f64>,
    /// `n × n` matrix with `components = X · unmixing`.
    pub unmixing: DMatrix<f64>,
    /// The whitening map used internally.
    pub whitener: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Whitens the column space of `X` so that `XwᵀXw/p = I` within 1e−8.
///
/// With `center` the column means (over genes) are removed first; without
/// it the second moment is whitened directly, keeping `xw = X · whitener`
/// an exactly linear map.
pub fn whiten(x: &DMatrix<f64>, center: bool) -> Result<WhitenResult> {
    let (p, n) = (x.nrows(), x.ncols());
    if n < 2 || p < 2 {
        return Err(Error::InvalidParameter(format!(
            "whitening needs at least a 2×2 matrix, got {p}×{n}"
        )));
    }
    let xc = if center {
        let mut xc = x.clone();
        for mut col in xc.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        xc
    } else {
        x.clone()
    };
    let gram = crate::types::symmetrize(&(xc.transpose() * &xc / p as f64));
    let eig = SymmetricEigen::new(gram);
    let max_eig = eig.eigenvalues.amax();
    if !(max_eig > 0.0) {
        return Err(Error::Degenerate("all columns are zero".into()));
    }
    let clamp = RANK_TOL_REL * max_eig;
    let rank = eig.eigenvalues.iter().filter(|&&v| v > clamp).count();
    if rank < 2 {
        return Err(Error::Degenerate(format!(
            "column space has numerical rank {rank} (< 2)"
        )));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(clamp).sqrt()));
    let whitener = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let xw = if center { &xc * &whitener } else { x * &whitener };
    Ok(WhitenResult {
        xw,
        whitener,
        rank,
        reduced_rank: rank < n,
    })
}

/// `(M Mᵀ)^{-1/2} M`: the closest matrix with orthonormal rows.
fn symmetric_decorrelation(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(crate::types::symmetrize(&(m * m.transpose())));
    let max_eig = eig.eigenvalues.amax();
    if !(max_eig > 0.0) {
        return Err(Error::Degenerate(
            "zero update matrix in decorrelation".into(),
        ));
    }
    let clamp = 1e-12 * max_eig;
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(clamp).sqrt()));
    Ok(&eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * m)
}

/// Fixed-point ICA with the log-cosh contrast (a = 1).
///
/// Whitens internally (without centering, so `components = X · unmixing`
/// holds exactly), runs the parallel fixed-point update with symmetric
/// decorrelation, and reports convergence instead of failing: on a
/// non-converged run the best iterate is returned with `converged = false`.
/// Component signs are canonicalized so each column's largest-magnitude
/// entry is positive. Deterministic for a given `seed`.
pub fn fastica(x: &DMatrix<f64>, seed: u64, max_iter: usize, tol: f64) -> Result<IcaResult> {
    let white = whiten(x, false)?;
    let (p, n) = (white.xw.nrows(), white.xw.ncols());
    let p_f = p as f64;

    let mut rng = substream(seed, 0);
    let init = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = symmetric_decorrelation(&init)?;

    let mut converged = false;
    let mut iterations = max_iter;
    for it in 0..max_iter {
        // u = Xw Wᵀ: projections of each observation onto current rows.
        let u = &white.xw * w.transpose();
        let g = u.map(f64::tanh);
        // Row c of the update: E[g(u_c) xᵀ] − E[g'(u_c)]·w_c.
        let mut update = g.transpose() * &white.xw / p_f;
        for c in 0..n {
            let gprime_mean = g.column(c).iter().map(|t| 1.0 - t * t).sum::<f64>() / p_f;
            for l in 0..n {
                update[(c, l)] -= gprime_mean * w[(c, l)];
            }
        }
        let w_new = symmetric_decorrelation(&update)?;
        let lim = (0..n)
            .map(|c| (w_new.row(c).dot(&w.row(c)).abs() - 1.0).abs())
            .fold(0.0f64, f64::max);
        w = w_new;
        if lim < tol {
            converged = true;
            iterations = it + 1;
            break;
        }
    }

    let mut unmixing = &white.whitener * w.transpose();
    let mut components = &white.xw * w.transpose();
    for c in 0..n {
        let col = components.column(c);
        let mut idx = 0;
        let mut best = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if components[(idx, c)] < 0.0 {
            components.column_mut(c).neg_mut();
            unmixing.column_mut(c).neg_mut();
        }
    }
    Ok(IcaResult {
        components,
        unmixing,
        whitener: white.whitener,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gram_error(m: &DMatrix<f64>) -> f64 {
        let p = m.nrows() as f64;
        let gram = m.transpose() * m / p;
        (gram - DMatrix::identity(m.ncols(), m.ncols())).abs().max()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma).powi(2);
            vb += (y - mb).powi(2);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    fn laplace(rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen_range(-0.5..0.5);
        -u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    #[test]
    fn whiten_gives_identity_gram() {
        let mut rng = crate::rng::substream(3, 0);
        let x = DMatrix::from_fn(100, 10, |_, _| rng.gen_range(-1.0..1.0));
        let res = whiten(&x, true).unwrap();
        assert!(gram_error(&res.xw) < 1e-8);
        assert!(!res.reduced_rank);
        assert_eq!(res.rank, 10);
    }

    #[test]
    fn whiten_idempotent_on_white_data() {
        // Orthonormal columns scaled to unit Gram are already white.
        let mut rng = crate::rng::substream(4, 0);
        let x = DMatrix::from_fn(50, 4, |_, _| rng.gen_range(-1.0..1.0));
        let q = x.qr().q() * (50f64).sqrt();
        let res = whiten(&q, false).unwrap();
        assert!(gram_error(&res.xw) < 1e-8);
        assert!((res.whitener.clone() - DMatrix::identity(4, 4)).abs().max() < 1e-6);
    }

    #[test]
    fn duplicate_direction_is_rank_deficient() {
        let mut rng = crate::rng::substream(5, 0);
        let c = DMatrix::from_fn(30, 1, |_, _| rng.gen_range(-1.0..1.0));
        let mut x = DMatrix::zeros(30, 2);
        x.set_column(0, &c.column(0));
        x.set_column(1, &(c.column(0) * 2.0));
        assert!(matches!(whiten(&x, false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reduced_rank_is_flagged_not_fatal() {
        let mut rng = crate::rng::substream(6, 0);
        let base = DMatrix::from_fn(40, 3, |_, _| rng.gen_range(-1.0..1.0));
        let mut x = DMatrix::zeros(40, 4);
        for j in 0..3 {
            x.set_column(j, &base.column(j));
        }
        let sum = base.column(0) + base.column(1);
        x.set_column(3, &sum.column(0));
        let res = whiten(&x, false).unwrap();
        assert!(res.reduced_rank);
        assert_eq!(res.rank, 3);
    }

    #[test]
    fn recovers_laplace_sources_up_to_sign_permutation() {
        let mut rng = crate::rng::substream(7, 0);
        let p = 2000;
        let s = DMatrix::from_fn(p, 2, |_, _| laplace(&mut rng));
        let mixing = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, -0.4, 1.2]);
        let x = &s * &mixing;
        let res = fastica(&x, 11, 500, 1e-6).unwrap();
        assert!(res.converged);
        // Each true source must correlate with a distinct component.
        let mut used = [false; 2];
        for j in 0..2 {
            let truth: Vec<f64> = s.column(j).iter().copied().collect();
            let (mut best, mut best_c) = (0.0, usize::MAX);
            for c in 0..2 {
                let est: Vec<f64> = res.components.column(c).iter().copied().collect();
                let r = pearson(&truth, &est).abs();
                if r > best {
                    best = r;
                    best_c = c;
                }
            }
            assert!(best > 0.95, "source {j} best |corr| {best}");
            assert!(!used[best_c], "two sources matched component {best_c}");
            used[best_c] = true;
        }
    }

    #[test]
    fn gaussian_sources_still_decorrelated() {
        let mut rng = crate::rng::substream(8, 0);
        let x = DMatrix::from_fn(500, 3, |_, _| rng.gen_range(-1.0..1.0f64)).map(|v| v * 2.0);
        let res = fastica(&x, 9, 50, 1e-6).unwrap();
        // Convergence is not promised on Gaussian data; the decorrelation
        // contract still is.
        assert!(gram_error(&res.components) < 1e-6);
    }

    #[test]
    fn unmixing_reproduces_components() {
        let mut rng = crate::rng::substream(9, 0);
        let x = DMatrix::from_fn(200, 5, |_, _| laplace(&mut rng));
        let res = fastica(&x, 13, 500, 1e-6).unwrap();
        let reproduced = &x * &res.unmixing;
        assert!((reproduced - &res.components).abs().max() < 1e-8);
        // unmixing must be invertible
        assert!(res.unmixing.clone().lu().is_invertible());
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = crate::rng::substream(10, 0);
        let x = DMatrix::from_fn(300, 3, |_, _| laplace(&mut rng));
        let a = fastica(&x, 21, 300, 1e-6).unwrap();
        let b = fastica(&x, 21, 300, 1e-6).unwrap();
        assert_eq!(a.components, b.components);
        assert_eq!(a.unmixing, b.unmixing);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn different_seeds_agree_up_to_signed_permutation() {
        let mut rng = crate::rng::substream(12, 0);
        let p = 3000;
        let s = DMatrix::from_fn(p, 3, |_, _| laplace(&mut rng));
        let mixing =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.1, 0.9, 0.4, -0.5, 0.2, 1.1]);
        let x = &s * &mixing;
        let a = fastica(&x, 1, 500, 1e-7).unwrap();
        let b = fastica(&x, 2, 500, 1e-7).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = a.components.column(c).iter().copied().collect();
            let best = (0..3)
                .map(|d| {
                    let other: Vec<f64> = b.components.column(d).iter().copied().collect();
                    pearson(&col, &other).abs()
                })
                .fold(0.0f64, f64::max);
            assert!(best > 0.9, "component {c} best cross-seed |corr| {best}");
        }
    }
}
