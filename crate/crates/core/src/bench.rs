//! Benchmark orchestration: confusion counts against ground truth, penalty
//! sweeps averaged over seeds, and aligned method comparisons.
//!
//! Curves follow the synthetic protocol: per seed, one dataset is generated
//! and every method is swept over its penalty grid; true/false positive
//! rates are averaged per grid position across seeds, and the AUC is the
//! trapezoid over the averaged points extended with (0,0) and (1,1).

use rayon::prelude::*;

use crate::error::Error;
use crate::estimator::{self, Method};
use crate::rng::mix;
use crate::synth::{gen_theta, gen_views, SynthSpec};
use crate::types::{EdgeSet, ExpressionView};
use crate::Result;

/// Confusion counts over all unordered gene pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn tpr(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        if self.fp + self.tn == 0 {
            0.0
        } else {
            self.fp as f64 / (self.fp + self.tn) as f64
        }
    }
}

/// One averaged sweep point.
#[derive(Debug, Clone, Copy)]
pub struct RocPoint {
    pub lambda: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Averaged ROC curve of one method, points ordered by λ descending.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub method: String,
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_seeds: usize,
    /// (seed, λ) fits that failed and were dropped from the averages.
    pub dropped: usize,
}

/// Penalty grid policy for sweeps.
#[derive(Debug, Clone)]
pub enum LambdaGrid {
    /// Explicit values, used as-is for every seed.
    Given(Vec<f64>),
    /// Per seed and method: `points` log-spaced values spanning
    /// `[λ_max/span, λ_max]`, with λ_max the largest off-diagonal of the
    /// scatter the method's GLASSO stage sees.
    Auto { points: usize, span: f64 },
}

impl LambdaGrid {
    pub fn auto(points: usize) -> Self {
        LambdaGrid::Auto {
            points,
            span: 1000.0,
        }
    }

    fn resolve(&self, method: &Method, views: &[ExpressionView], seed: u64) -> Result<Vec<f64>> {
        match self {
            LambdaGrid::Given(values) => {
                if values.is_empty() {
                    return Err(Error::InvalidParameter("empty penalty grid".into()));
                }
                Ok(values.clone())
            }
            LambdaGrid::Auto { points, span } => {
                let lmax = estimator::lambda_max(method, views, seed)?;
                Ok(log_spaced(lmax / span, lmax, *points))
            }
        }
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive, descending.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && count >= 1);
    if count == 1 {
        return vec![hi];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (lhi - (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Confusion counts of an estimated edge set against the truth over the
/// `p(p−1)/2` unordered pairs.
pub fn confusion(est_edges: &EdgeSet, true_edges: &EdgeSet, p: usize) -> Result<Confusion> {
    for set in [est_edges, true_edges] {
        for (i, j) in set {
            if i >= j || *j >= p {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) is not an ordered pair below p={p}"
                )));
            }
        }
    }
    let tp = est_edges.intersection(true_edges).count();
    let fp = est_edges.len() - tp;
    let fn_ = true_edges.len() - tp;
    let total = p * (p - 1) / 2;
    let tn = total - tp - fp - fn_;
    Ok(Confusion { tp, fp, fn_, tn })
}

/// Trapezoid AUC over points extended with (0,0) and (1,1).
fn auc_of(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut auc = 0.0;
    for w in pts.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5;
    }
    auc.clamp(0.0, 1.0)
}

pub(crate) type EdgeFit = dyn Fn(&[ExpressionView], &crate::synth::SynthTruth, f64, u64) -> Result<EdgeSet>
    + Sync;

/// Core sweep shared by the public entry points and the calibration tests:
/// per seed, generate one dataset, resolve each fitter's grid, fit at every
/// penalty, and average rates per grid position.
pub(crate) fn sweep_core(
    spec: &SynthSpec,
    fitters: &[(String, &EdgeFit, &LambdaGrid)],
    seeds: &[u64],
    grid_method_hints: &[Option<Method>],
) -> Result<Vec<RocCurve>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("no seeds given".into()));
    }

    struct SeedOutcome {
        // per fitter, per grid index: (lambda, tpr, fpr) or dropped
        rates: Vec<Vec<Option<(f64, f64, f64)>>>,
    }

    let outcomes: Vec<Result<SeedOutcome>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut data_spec = spec.clone();
            data_spec.seed = mix(seed, 101);
            let (theta, _) = gen_theta(spec.p, spec.edge_prob, mix(seed, 7))?;
            let (views, truth) = gen_views(&data_spec, &theta)?;
            let mut rates = Vec::with_capacity(fitters.len());
            for (f_idx, (_, fitter, grid)) in fitters.iter().enumerate() {
                let grid_method = grid_method_hints
                    .get(f_idx)
                    .cloned()
                    .flatten()
                    .unwrap_or(Method::Glasso);
                let lambdas = grid.resolve(&grid_method, &views, mix(seed, 11))?;
                let mut per_lambda = Vec::with_capacity(lambdas.len());
                for (l_idx, &lambda) in lambdas.iter().enumerate() {
                    let fit_seed = mix(seed, 0x2000 + l_idx as u64);
                    match fitter(&views, &truth, lambda, fit_seed) {
                        Ok(edges) => {
                            let c = confusion(&edges, &truth.edges, spec.p)?;
                            per_lambda.push(Some((lambda, c.tpr(), c.fpr())));
                        }
                        Err(_) => per_lambda.push(None),
                    }
                }
                rates.push(per_lambda);
            }
            Ok(SeedOutcome { rates })
        })
        .collect();

    let mut curves = Vec::with_capacity(fitters.len());
    for (f_idx, (name, _, grid)) in fitters.iter().enumerate() {
        let n_grid = match grid {
            LambdaGrid::Given(v) => v.len(),
            LambdaGrid::Auto { points, .. } => *points,
        };
        let mut sums = vec![(0f64, 0f64, 0f64, 0usize); n_grid];
        let mut dropped = 0usize;
        for outcome in &outcomes {
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => return Err(Error::Numeric(format!("seed-level failure: {e}"))),
            };
            for (l_idx, entry) in outcome.rates[f_idx].iter().enumerate() {
                match entry {
                    Some((lambda, tpr, fpr)) => {
                        sums[l_idx].0 += lambda.ln();
                        sums[l_idx].1 += tpr;
                        sums[l_idx].2 += fpr;
                        sums[l_idx].3 += 1;
                    }
                    None => dropped += 1,
                }
            }
        }
        let total_fits = n_grid * seeds.len();
        if dropped * 10 > total_fits {
            return Err(Error::Numeric(format!(
                "method '{name}': {dropped}/{total_fits} fits failed; curve invalid"
            )));
        }
        let mut points: Vec<RocPoint> = sums
            .iter()
            .filter(|(_, _, _, count)| *count > 0)
            .map(|(llam, tpr, fpr, count)| RocPoint {
                lambda: (llam / *count as f64).exp(),
                tpr: tpr / *count as f64,
                fpr: fpr / *count as f64,
            })
            .collect();
        points.sort_by(|a, b| b.lambda.partial_cmp(&a.lambda).unwrap());
        let auc = auc_of(&points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>());
        curves.push(RocCurve {
            method: name.clone(),
            points,
            auc,
            n_seeds: seeds.len(),
            dropped,
        });
    }
    Ok(curves)
}

/// Sweeps one method over the grid, averaging rates across seeds.
pub fn roc_sweep(
    method: &Method,
    spec: &SynthSpec,
    grid: &LambdaGrid,
    seeds: &[u64],
) -> Result<RocCurve> {
    let curves = compare_methods(spec, std::slice::from_ref(method), grid, seeds)?;
    Ok(curves.into_iter().next().expect("one curve per method"))
}

/// Runs every method on identical per-seed datasets and returns aligned
/// curves (one per method, in input order).
pub fn compare_methods(
    spec: &SynthSpec,
    methods: &[Method],
    grid: &LambdaGrid,
    seeds: &[u64],
) -> Result<Vec<RocCurve>> {
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods given".into()));
    }
    let closures: Vec<Box<EdgeFitBox>> = methods
        .iter()
        .map(|m| {
            let m = m.clone();
            Box::new(
                move |views: &[ExpressionView],
                      _truth: &crate::synth::SynthTruth,
                      lambda: f64,
                      seed: u64| {
                    estimator::fit_edges(&m, views, lambda, seed).map(|est| est.edges)
                },
            ) as Box<EdgeFitBox>
        })
        .collect();
    let fitters: Vec<(String, &EdgeFit, &LambdaGrid)> = methods
        .iter()
        .zip(&closures)
        .map(|(m, f)| (m.name().to_string(), f.as_ref() as &EdgeFit, grid))
        .collect();
    let hints: Vec<Option<Method>> = methods.iter().cloned().map(Some).collect();
    sweep_core(spec, &fitters, seeds, &hints)
}

type EdgeFitBox =
    dyn Fn(&[ExpressionView], &crate::synth::SynthTruth, f64, u64) -> Result<EdgeSet> + Sync;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn confusion_exact_match() {
        let truth = EdgeSet::from([(0, 1), (2, 3)]);
        let c = confusion(&truth.clone(), &truth, 4).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 0, 0, 4));
    }

    #[test]
    fn confusion_empty_estimate() {
        let truth = EdgeSet::from([(0, 1), (2, 3)]);
        let c = confusion(&EdgeSet::new(), &truth, 4).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 0, 2, 4));
    }

    #[test]
    fn confusion_enumerated_case() {
        // p = 4: pairs {01,02,03,12,13,23}; truth {01,23}, est {01,02}.
        let truth = EdgeSet::from([(0, 1), (2, 3)]);
        let est = EdgeSet::from([(0, 1), (0, 2)]);
        let c = confusion(&est, &truth, 4).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 3));
    }

    #[test]
    fn confusion_rejects_self_loops() {
        let bad = EdgeSet::from([(1, 1)]);
        assert!(confusion(&bad, &EdgeSet::new(), 4).is_err());
    }

    #[test]
    fn log_spaced_grid_shape() {
        let grid = log_spaced(0.01, 10.0, 4);
        assert_eq!(grid.len(), 4);
        assert!((grid[0] - 10.0).abs() < 1e-12);
        assert!((grid[3] - 0.01).abs() < 1e-12);
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn oracle_estimator_has_unit_auc() {
        let spec = SynthSpec {
            edge_prob: 0.05,
            ..SynthSpec::new(15, 8, 4, 1, 0)
        };
        let oracle: &EdgeFit = &|_, truth, _, _| Ok(truth.edges.clone());
        let grid = LambdaGrid::Given(log_spaced(0.01, 1.0, 5));
        let curves = sweep_core(
            &spec,
            &[("oracle".into(), oracle, &grid)],
            &[1, 2, 3],
            &[None],
        )
        .unwrap();
        assert!((curves[0].auc - 1.0).abs() < 1e-12);
        for pt in &curves[0].points {
            assert_eq!((pt.fpr, pt.tpr), (0.0, 1.0));
        }
    }

    #[test]
    fn random_estimator_has_half_auc() {
        let spec = SynthSpec {
            edge_prob: 0.08,
            ..SynthSpec::new(20, 8, 4, 1, 0)
        };
        let random: &EdgeFit = &|views, truth, lambda, seed| {
            // Coin flips at a λ-dependent density so the curve spreads over
            // the unit square.
            let p = views[0].p();
            let density = (truth.edges.len() as f64 / (p * (p - 1) / 2) as f64)
                * (2.0 / lambda).min(20.0);
            let mut rng = substream(seed, 3);
            let mut edges = EdgeSet::new();
            for i in 0..p {
                for j in (i + 1)..p {
                    if rng.gen::<f64>() < density {
                        edges.insert((i, j));
                    }
                }
            }
            Ok(edges)
        };
        let grid = LambdaGrid::Given(log_spaced(0.1, 4.0, 12));
        let seeds: Vec<u64> = (0..50).collect();
        let curves = sweep_core(
            &spec,
            &[("random".into(), random, &grid)],
            &seeds,
            &[None],
        )
        .unwrap();
        assert!(
            (curves[0].auc - 0.5).abs() < 0.05,
            "random AUC {}",
            curves[0].auc
        );
    }

    #[test]
    fn glasso_sits_between_random_and_oracle() {
        let spec = SynthSpec {
            edge_prob: 0.05,
            ..SynthSpec::new(20, 16, 8, 1, 0)
        };
        let seeds: Vec<u64> = (0..5).collect();
        let curve = roc_sweep(&Method::Glasso, &spec, &LambdaGrid::auto(10), &seeds).unwrap();
        assert!(
            curve.auc > 0.55 && curve.auc < 1.0,
            "glasso AUC {}",
            curve.auc
        );
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let spec = SynthSpec {
            edge_prob: 0.05,
            ..SynthSpec::new(15, 10, 5, 1, 0)
        };
        let seeds = [3u64, 4];
        let a = roc_sweep(&Method::Glasso, &spec, &LambdaGrid::auto(6), &seeds).unwrap();
        let b = roc_sweep(&Method::Glasso, &spec, &LambdaGrid::auto(6), &seeds).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!((x.lambda, x.fpr, x.tpr), (y.lambda, y.fpr, y.tpr));
        }
        assert_eq!(a.auc, b.auc);
    }

    #[test]
    fn failing_fits_invalidate_the_curve() {
        let spec = SynthSpec {
            edge_prob: 0.05,
            ..SynthSpec::new(10, 6, 3, 1, 0)
        };
        let broken: &EdgeFit =
            &|_, _, _, _| Err(Error::Numeric("always fails".into()));
        let grid = LambdaGrid::Given(vec![0.1, 0.2]);
        let res = sweep_core(&spec, &[("broken".into(), broken, &grid)], &[1, 2], &[None]);
        assert!(res.is_err());
    }
}
