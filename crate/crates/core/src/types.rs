//! Domain types shared by every module, and the two primitive operations
//! (`unmix`, `mahalanobis_delta`) everything else is built from.
//!
//! All matrices are dense `f64`; a view's expression matrix is `p genes ×
//! n_d samples`. Types are immutable value objects after construction and
//! safe to share across threads.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Relative zero threshold for edge extraction: an off-diagonal Θ entry
/// counts as an edge iff |Θ_ij| > EDGE_TOL_REL · max_{i≠j}|Θ_ij|.
pub const EDGE_TOL_REL: f64 = 1e-6;

/// Undirected edge as an index pair with `i < j`.
pub type Edge = (usize, usize);

/// Deterministically ordered edge set.
pub type EdgeSet = BTreeSet<Edge>;

/// One observed expression matrix (`p` genes × `n` samples) with identifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpressionView {
    pub view_id: String,
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    /// Dense `p × n` matrix; rows follow `gene_ids`, columns `sample_ids`.
    pub data: DMatrix<f64>,
}

impl ExpressionView {
    /// Validates shapes, identifier counts, and entry finiteness.
    pub fn new(
        view_id: impl Into<String>,
        gene_ids: Vec<String>,
        sample_ids: Vec<String>,
        data: DMatrix<f64>,
    ) -> Result<Self> {
        let (p, n) = (data.nrows(), data.ncols());
        if p < 2 || n < 2 {
            return Err(Error::InvalidParameter(format!(
                "expression matrix must be at least 2×2, got {p}×{n}"
            )));
        }
        if gene_ids.len() != p {
            return Err(Error::Shape(format!(
                "{} gene ids for {} rows",
                gene_ids.len(),
                p
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} sample ids for {} columns",
                sample_ids.len(),
                n
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "expression matrix contains NaN or infinite entries".into(),
            ));
        }
        Ok(Self {
            view_id: view_id.into(),
            gene_ids,
            sample_ids,
            data,
        })
    }

    /// Builds a view with synthetic `g{i}` / `s{j}` identifiers.
    pub fn from_matrix(view_id: impl Into<String>, data: DMatrix<f64>) -> Result<Self> {
        let gene_ids = (0..data.nrows()).map(|i| format!("g{i}")).collect();
        let sample_ids = (0..data.ncols()).map(|j| format!("s{j}")).collect();
        Self::new(view_id, gene_ids, sample_ids, data)
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }
}

/// Reorders every view's gene axis to match the first view's `gene_ids`.
///
/// Alignment is by exact identifier match; a missing or extra gene in any
/// view is an error. Views already in order are passed through unchanged.
pub fn align_views(views: Vec<ExpressionView>) -> Result<Vec<ExpressionView>> {
    let mut iter = views.into_iter();
    let reference = match iter.next() {
        Some(v) => v,
        None => return Err(Error::InvalidParameter("no views given".into())),
    };
    let mut out = Vec::with_capacity(1 + iter.len());
    let ref_ids = reference.gene_ids.clone();
    out.push(reference);
    for view in iter {
        if view.gene_ids == ref_ids {
            out.push(view);
            continue;
        }
        if view.gene_ids.len() != ref_ids.len() {
            return Err(Error::Shape(format!(
                "view '{}' has {} genes, expected {}",
                view.view_id,
                view.gene_ids.len(),
                ref_ids.len()
            )));
        }
        let index: std::collections::HashMap<&str, usize> = view
            .gene_ids
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let mut data = DMatrix::zeros(view.p(), view.n());
        for (row, gene) in ref_ids.iter().enumerate() {
            let src = *index.get(gene.as_str()).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "gene '{}' missing from view '{}'",
                    gene, view.view_id
                ))
            })?;
            data.row_mut(row).copy_from(&view.data.row(src));
        }
        out.push(ExpressionView {
            view_id: view.view_id,
            gene_ids: ref_ids.clone(),
            sample_ids: view.sample_ids,
            data,
        })
    }
    Ok(out)
}

/// Per-view parameters of the mixture model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewParams {
    /// Unmixing matrix `n × n`: `Y = X · W`.
    pub w: DMatrix<f64>,
    /// Location of the signal loadings, length `p`.
    pub mu: DVector<f64>,
    /// Isotropic noise scale, `> 0`.
    pub sigma: f64,
    /// Signal rank: the first `k` columns of `Y` are signal estimates.
    pub k: usize,
}

impl ViewParams {
    pub fn new(w: DMatrix<f64>, mu: DVector<f64>, sigma: f64, k: usize) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(Error::Shape(format!(
                "unmixing matrix must be square, got {}×{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if k < 1 || k > n {
            return Err(Error::InvalidParameter(format!(
                "signal rank k={k} outside 1..={n}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise scale must be positive, got {sigma}"
            )));
        }
        if w.iter().any(|v| !v.is_finite()) || !w.clone().lu().is_invertible() {
            return Err(Error::Singular("unmixing matrix is not invertible".into()));
        }
        Ok(Self { w, mu, sigma, k })
    }

    /// Number of sample loadings in the view.
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Noise rank `r = n − k`.
    pub fn r(&self) -> usize {
        self.n() - self.k
    }
}

/// Full EM parameter state: per-view params plus the shared precision Θ,
/// its inverse (the dispersion), the degrees of freedom, and the penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub views: Vec<ViewParams>,
    /// Shared precision matrix Θ, symmetric positive definite.
    pub theta: DMatrix<f64>,
    /// Dispersion Σ = Θ⁻¹, kept consistent with `theta` on construction.
    pub dispersion: DMatrix<f64>,
    /// Degrees of freedom, `> 2`.
    pub nu: f64,
    /// L1 penalty used to estimate Θ.
    pub lambda: f64,
}

impl ModelState {
    /// Builds a state from Θ alone; the dispersion is computed as Θ⁻¹ so the
    /// consistency invariant holds by construction.
    pub fn new(views: Vec<ViewParams>, theta: DMatrix<f64>, nu: f64, lambda: f64) -> Result<Self> {
        let dispersion = sym_inverse(&theta)
            .ok_or_else(|| Error::NotPositiveDefinite("precision matrix Θ".into()))?;
        Self::from_parts(views, theta, dispersion, nu, lambda)
    }

    /// Builds a state from an explicit (Θ, Σ) pair, validating all invariants
    /// including `‖ΣΘ − I‖_max ≤ 1e−8`.
    pub fn from_parts(
        views: Vec<ViewParams>,
        theta: DMatrix<f64>,
        dispersion: DMatrix<f64>,
        nu: f64,
        lambda: f64,
    ) -> Result<Self> {
        if !(nu > 2.0) {
            return Err(Error::InvalidParameter(format!(
                "degrees of freedom must exceed 2, got {nu}"
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "penalty must be positive, got {lambda}"
            )));
        }
        let p = theta.nrows();
        if theta.ncols() != p || dispersion.nrows() != p || dispersion.ncols() != p {
            return Err(Error::Shape("Θ and Σ must be square of equal size".into()));
        }
        if !is_symmetric(&theta, 1e-8) {
            return Err(Error::InvalidParameter("Θ is not symmetric".into()));
        }
        if Cholesky::new(theta.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("precision matrix Θ".into()));
        }
        let residual = (&dispersion * &theta - DMatrix::identity(p, p)).abs().max();
        if residual > 1e-8 {
            return Err(Error::Numeric(format!(
                "ΣΘ deviates from identity by {residual:.3e} (limit 1e-8)"
            )));
        }
        for v in &views {
            if v.mu.len() != p {
                return Err(Error::Shape(format!(
                    "view location has length {}, expected {p}",
                    v.mu.len()
                )));
            }
        }
        Ok(Self {
            views,
            theta,
            dispersion,
            nu,
            lambda,
        })
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }
}

/// Latent scale expectations τ_{d,i}, one positive value per view column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauMatrix {
    pub per_view: Vec<DVector<f64>>,
}

impl TauMatrix {
    pub fn new(per_view: Vec<DVector<f64>>) -> Result<Self> {
        for (d, tau) in per_view.iter().enumerate() {
            if tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(Error::Numeric(format!(
                    "τ for view {d} contains non-positive or non-finite entries"
                )));
            }
        }
        Ok(Self { per_view })
    }
}

/// A precision estimate together with the undirected graph it induces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionEstimate {
    pub theta: DMatrix<f64>,
    /// Unordered gene pairs {i, j}, i < j, with |Θ_ij| above the relative
    /// zero threshold.
    pub edges: EdgeSet,
    pub lambda: f64,
}

impl PrecisionEstimate {
    /// Extracts the edge set from Θ using the [`EDGE_TOL_REL`] rule.
    pub fn from_theta(theta: DMatrix<f64>, lambda: f64) -> Self {
        let edges = edges_of(&theta);
        Self {
            theta,
            edges,
            lambda,
        }
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }
}

/// Edge set of a symmetric matrix under the relative zero threshold.
pub fn edges_of(theta: &DMatrix<f64>) -> EdgeSet {
    let p = theta.nrows();
    let mut max_off: f64 = 0.0;
    for i in 0..p {
        for j in (i + 1)..p {
            max_off = max_off.max(theta[(i, j)].abs());
        }
    }
    let tol = EDGE_TOL_REL * max_off;
    let mut edges = EdgeSet::new();
    for i in 0..p {
        for j in (i + 1)..p {
            if theta[(i, j)].abs() > tol && max_off > 0.0 {
                edges.insert((i, j));
            }
        }
    }
    edges
}

/// Edge-selection frequencies from stability selection at one penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionProbabilityMatrix {
    /// Symmetric `p × p` matrix of frequencies in [0, 1]; diagonal is zero.
    pub pi: DMatrix<f64>,
    pub lambda: f64,
    pub n_replicates: usize,
}

impl SelectionProbabilityMatrix {
    /// Edges whose selection probability strictly exceeds `threshold`.
    pub fn selected(&self, threshold: f64) -> EdgeSet {
        let p = self.pi.nrows();
        let mut edges = EdgeSet::new();
        for i in 0..p {
            for j in (i + 1)..p {
                if self.pi[(i, j)] > threshold {
                    edges.insert((i, j));
                }
            }
        }
        edges
    }
}

/// Applies the unmixing matrix: `Y = X · W`.
///
/// Columns `1..=k` of the result are signal estimates, the rest noise
/// estimates. Fails on non-conforming shapes or a singular `W`.
pub fn unmix(view: &ExpressionView, params: &ViewParams) -> Result<DMatrix<f64>> {
    if params.w.nrows() != view.n() {
        return Err(Error::Shape(format!(
            "view has {} samples but W is {}×{}",
            view.n(),
            params.w.nrows(),
            params.w.ncols()
        )));
    }
    check_invertible(&params.w)?;
    Ok(&view.data * &params.w)
}

/// Squared Mahalanobis distance `(y − ρ)ᵀ Φ⁻¹ (y − ρ)`.
///
/// `phi_inv` is the precision of the reference ellipsoid. A result below
/// `−1e−10` indicates a non-PD precision and is an error; tiny negative
/// round-off is clamped to zero.
pub fn mahalanobis_delta(
    y: &DVector<f64>,
    rho: &DVector<f64>,
    phi_inv: &DMatrix<f64>,
) -> Result<f64> {
    if y.len() != rho.len() || phi_inv.nrows() != y.len() || phi_inv.ncols() != y.len() {
        return Err(Error::Shape(format!(
            "vector length {} vs precision {}×{}",
            y.len(),
            phi_inv.nrows(),
            phi_inv.ncols()
        )));
    }
    let diff = y - rho;
    let delta = (phi_inv * &diff).dot(&diff);
    if delta < -1e-10 {
        return Err(Error::Numeric(format!(
            "negative Mahalanobis distance {delta:.3e}; precision not PSD"
        )));
    }
    Ok(delta.max(0.0))
}

// ---------------------------------------------------------------------------
// Crate-internal linear algebra helpers.

/// Max-norm symmetry test.
pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub(crate) fn sym_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(m.clone()).map(|c| c.inverse())
}

/// Exact symmetrization `(M + Mᵀ)/2`.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rejects matrices that are singular after row equilibration. Rows are
/// scaled to unit max-abs first so the determinant test is scale-free.
pub(crate) fn check_invertible(w: &DMatrix<f64>) -> Result<()> {
    let n = w.nrows();
    let mut scaled = w.clone();
    for i in 0..n {
        let row_max = w.row(i).amax();
        if row_max == 0.0 || !row_max.is_finite() {
            return Err(Error::Singular(format!("row {i} of W is zero")));
        }
        scaled.row_mut(i).scale_mut(1.0 / row_max);
    }
    let det = scaled.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::Singular(format!(
            "|det| = {:.3e} after row scaling",
            det.abs()
        )));
    }
    Ok(())
}

/// log |det W| via LU; assumes `W` invertible.
pub(crate) fn log_abs_det(w: &DMatrix<f64>) -> f64 {
    w.clone().lu().determinant().abs().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn view_from(data: DMatrix<f64>) -> ExpressionView {
        ExpressionView::from_matrix("v", data).unwrap()
    }

    fn params_with_w(w: DMatrix<f64>) -> ViewParams {
        let n = w.nrows();
        ViewParams::new(w, DVector::zeros(3), 1.0, n).unwrap()
    }

    #[test]
    fn unmix_identity() {
        let x = DMatrix::identity(3, 3);
        let y = unmix(&view_from(x.clone()), &params_with_w(DMatrix::identity(3, 3))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn unmix_scalar_scaling() {
        let mut rng = crate::rng::substream(11, 0);
        let x = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = unmix(
            &view_from(x.clone()),
            &params_with_w(DMatrix::identity(3, 3) * 2.0),
        )
        .unwrap();
        assert_relative_eq!(y, x * 2.0, epsilon = 1e-14);
    }

    #[test]
    fn unmix_hand_product() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let view = ExpressionView::from_matrix("v", x).unwrap();
        let params = ViewParams::new(w, DVector::zeros(2), 1.0, 2).unwrap();
        let y = unmix(&view, &params).unwrap();
        assert_eq!(y, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 4.0, 3.0]));
    }

    #[test]
    fn unmix_rejects_shape_mismatch() {
        let x = DMatrix::identity(3, 3);
        let w = DMatrix::identity(4, 4);
        let params = ViewParams::new(w, DVector::zeros(3), 1.0, 4).unwrap();
        assert!(matches!(
            unmix(&view_from(x), &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn singular_w_is_rejected() {
        // Second row a multiple of the first; row scaling must not mask it.
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1e8, 2e8]);
        assert!(matches!(check_invertible(&w), Err(Error::Singular(_))));
    }

    #[test]
    fn mahalanobis_zero_displacement() {
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let d = mahalanobis_delta(&y, &y.clone(), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn mahalanobis_unit_vector() {
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let rho = DVector::zeros(2);
        let d = mahalanobis_delta(&y, &rho, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(d, 1.0);
    }

    #[test]
    fn mahalanobis_hand_case() {
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let rho = DVector::zeros(2);
        let phi_inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert_relative_eq!(mahalanobis_delta(&y, &rho, &phi_inv).unwrap(), 5.0);
    }

    #[test]
    fn model_state_keeps_dispersion_consistent() {
        let theta = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let state = ModelState::new(vec![], theta.clone(), 3.0, 0.1).unwrap();
        let residual = (&state.dispersion * &theta - DMatrix::identity(2, 2))
            .abs()
            .max();
        assert!(residual <= 1e-8, "residual {residual}");
    }

    #[test]
    fn model_state_rejects_inconsistent_pair() {
        let theta = DMatrix::identity(2, 2) * 2.0;
        let wrong = DMatrix::identity(2, 2);
        assert!(ModelState::from_parts(vec![], theta, wrong, 3.0, 0.1).is_err());
    }

    #[test]
    fn model_state_rejects_small_nu() {
        let theta = DMatrix::identity(2, 2);
        assert!(ModelState::new(vec![], theta, 2.0, 0.1).is_err());
    }

    #[test]
    fn edges_respect_relative_threshold() {
        let mut theta = DMatrix::identity(3, 3);
        theta[(0, 1)] = 1.0;
        theta[(1, 0)] = 1.0;
        theta[(0, 2)] = 1e-9;
        theta[(2, 0)] = 1e-9;
        let est = PrecisionEstimate::from_theta(theta, 0.1);
        assert_eq!(est.edges, EdgeSet::from([(0, 1)]));
    }

    #[test]
    fn diagonal_theta_has_no_edges() {
        let est = PrecisionEstimate::from_theta(DMatrix::identity(4, 4), 0.1);
        assert!(est.edges.is_empty());
    }

    #[test]
    fn align_views_reorders_by_gene_id() {
        let a = ExpressionView::new(
            "a",
            vec!["g0".into(), "g1".into()],
            vec!["s0".into(), "s1".into()],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let b = ExpressionView::new(
            "b",
            vec!["g1".into(), "g0".into()],
            vec!["s0".into(), "s1".into()],
            DMatrix::from_row_slice(2, 2, &[30.0, 40.0, 10.0, 20.0]),
        )
        .unwrap();
        let aligned = align_views(vec![a, b]).unwrap();
        assert_eq!(aligned[1].gene_ids, vec!["g0".to_string(), "g1".into()]);
        assert_eq!(
            aligned[1].data,
            DMatrix::from_row_slice(2, 2, &[10.0, 20.0, 30.0, 40.0])
        );
    }

    #[test]
    fn align_views_rejects_mismatched_gene_sets() {
        let a = ExpressionView::new(
            "a",
            vec!["g0".into(), "g1".into()],
            vec!["s0".into(), "s1".into()],
            DMatrix::zeros(2, 2),
        );
        // zeros is fine for alignment purposes
        let a = a.unwrap();
        let b = ExpressionView::new(
            "b",
            vec!["g0".into(), "gX".into()],
            vec!["s0".into(), "s1".into()],
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert!(align_views(vec![a, b]).is_err());
    }

    proptest! {
        // unmix is linear in W.
        #[test]
        fn unmix_is_linear_in_w(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = crate::rng::substream(seed, 0);
            let x = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let w1 = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let w2 = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let combined = &w1 * alpha + &w2 * beta;
            let lhs = &x * &combined;
            let rhs = (&x * &w1) * alpha + (&x * &w2) * beta;
            prop_assert!((lhs - rhs).abs().max() < 1e-10);
        }

        // Mahalanobis distance is invariant under simultaneous rotation.
        #[test]
        fn mahalanobis_rotation_invariant(seed in 0u64..1000) {
            let mut rng = crate::rng::substream(seed, 1);
            let p = 4;
            let v = DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
            let a = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
            let phi_inv = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
            let q = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
            let rotated_v = &q * &v;
            let rotated_phi = &q * &phi_inv * q.transpose();
            let zero = DVector::zeros(p);
            let d0 = mahalanobis_delta(&v, &zero, &phi_inv).unwrap();
            let d1 = mahalanobis_delta(&rotated_v, &zero, &rotated_phi).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-8 * (1.0 + d0));
        }
    }
}
