//! Support vector ordinal regression with explicit ordered thresholds.
//!
//! A sample of class `j` must project below `b_j - 1` (for `j < K`) and above
//! `b_{j-1} + 1` (for `j > 1`); violations are paid linearly. The coupled
//! regularizer `1/2 w^T (I + 2 lambda3 g g^T) w` is removed by the same
//! rank-1 substitution as in the classifier, the resulting problem is
//! solved by [`crate::hinge_qp`], and the thresholds are finally projected
//! onto the nondecreasing cone so the ordering holds exactly.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hinge_qp::{HingeQp, Quadratic};
use crate::kdlor::classify_by_thresholds;
use crate::kernels::{FeatureMap, Rank1Metric};
use crate::pav::isotonic;

#[derive(Debug, Clone, PartialEq)]
pub struct SvorSolution {
    /// `w_a` for linear solves, representer coefficients `beta` for kernel solves.
    pub weights: DVector<f64>,
    pub thresholds: Vec<f64>,
    /// `max(0, 1 + proj - b_j)` per sample; `None` for class `K`.
    pub slack_upper: Vec<Option<f64>>,
    /// `max(0, 1 - proj + b_{j-1})` per sample; `None` for class 1.
    pub slack_lower: Vec<Option<f64>>,
    /// `1/2 w^T M w + lambda2 * sum of slacks`.
    pub primal_objective: f64,
    pub iterations: usize,
}

/// Per-sample `(upper, lower)` hinge slacks of a projection.
pub fn slacks(projections: &[f64], classes: &[usize], thresholds: &[f64]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let k = thresholds.len() + 1;
    let upper = projections
        .iter()
        .zip(classes)
        .map(|(&p, &j)| (j < k).then(|| (1.0 + p - thresholds[j - 1]).max(0.0)))
        .collect();
    let lower = projections
        .iter()
        .zip(classes)
        .map(|(&p, &j)| (j > 1).then(|| (1.0 - p + thresholds[j - 2]).max(0.0)))
        .collect();
    (upper, lower)
}

/// Sum of all applicable slacks.
pub fn ordinal_hinge_total(projections: &[f64], classes: &[usize], thresholds: &[f64]) -> f64 {
    let (u, l) = slacks(projections, classes, thresholds);
    u.iter().chain(l.iter()).flatten().sum()
}

pub fn predict_ordinal_svor(w: &DVector<f64>, thresholds: &[f64], x: &DMatrix<f64>) -> Result<Vec<usize>> {
    if x.ncols() != w.len() {
        return Err(Error::DimMismatch {
            expected: w.len(),
            found: x.ncols(),
        });
    }
    let proj = x * w;
    Ok(classify_by_thresholds(proj.as_slice(), thresholds))
}

pub fn solve_svor_linear(d: &Dataset, lambda2: f64, coupling: &Rank1Metric, tol: f64) -> Result<SvorSolution> {
    if coupling.dim() != d.n_features() {
        return Err(Error::DimMismatch {
            expected: d.n_features(),
            found: coupling.dim(),
        });
    }
    solve_svor_features(d.features(), d.classes(), d.n_classes(), lambda2, coupling, tol)
}

/// Kernel form: `1/2 b^T K b + lambda2 sum slacks + lambda3 (a^T K b)^2` with
/// projections `(K b)_i`, solved exactly through the Gram feature map.
pub fn solve_svor_kernel(
    d: &Dataset,
    kmat: &DMatrix<f64>,
    lambda2: f64,
    alpha_coupling: &DVector<f64>,
    lambda3: f64,
    tol: f64,
) -> Result<SvorSolution> {
    let n = d.n_samples();
    if kmat.nrows() != n || kmat.ncols() != n || alpha_coupling.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "kernel svor needs an {n}x{n} Gram matrix and {n} coupling coefficients"
        )));
    }
    let map = FeatureMap::from_gram(kmat)?;
    let metric = Rank1Metric::new(&map.direction(alpha_coupling), lambda3);
    let sol = solve_svor_features(map.coords(), d.classes(), d.n_classes(), lambda2, &metric, tol)?;
    Ok(SvorSolution {
        weights: map.coefficients(&sol.weights),
        ..sol
    })
}

pub(crate) fn solve_svor_features(
    x: &DMatrix<f64>,
    classes: &[usize],
    n_classes: usize,
    lambda2: f64,
    coupling: &Rank1Metric,
    tol: f64,
) -> Result<SvorSolution> {
    if !(lambda2 > 0.0 && lambda2.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda2 must be positive, got {lambda2}")));
    }
    if n_classes < 2 {
        return Err(Error::TooSmall(format!("{n_classes} ordinal classes, need at least 2")));
    }
    let (n, dim) = x.shape();
    if classes.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", classes.len())));
    }
    let xt = coupling.apply_sqrt_rows(x, true);
    let nt = n_classes - 1;
    let nv = dim + nt;

    let mut rows: Vec<(usize, f64, usize)> = Vec::with_capacity(2 * n);
    for (i, &j) in classes.iter().enumerate() {
        if j == 0 || j > n_classes {
            return Err(Error::LabelOutOfRange { label: j, n_classes });
        }
        if j < n_classes {
            rows.push((i, -1.0, j - 1));
        }
        if j > 1 {
            rows.push((i, 1.0, j - 2));
        }
    }
    let mut a = DMatrix::<f64>::zeros(rows.len(), nv);
    for (r, &(i, sign, t)) in rows.iter().enumerate() {
        for c in 0..dim {
            a[(r, c)] = sign * xt[(i, c)];
        }
        a[(r, dim + t)] = -sign;
    }
    let mut b = DMatrix::<f64>::zeros(nt.saturating_sub(1), nv);
    for t in 1..nt {
        b[(t - 1, dim + t)] = 1.0;
        b[(t - 1, dim + t - 1)] = -1.0;
    }
    let mut h = DVector::<f64>::zeros(nv);
    h.rows_mut(0, dim).fill(1.0);

    let cost = DVector::from_element(rows.len(), lambda2);
    let qp = HingeQp {
        h: Quadratic::Diagonal(&h),
        linear: None,
        rank1: None,
        a: &a,
        b: &b,
        c: &cost,
    };
    let sol = qp.solve(tol.min(1e-9))?;
    let w_t = sol.theta.rows(0, dim).into_owned();
    let raw: Vec<f64> = sol.theta.rows(dim, nt).iter().copied().collect();
    let thresholds = isotonic(&raw, None);
    let w = coupling.apply_sqrt_vec(&w_t, true);

    let proj = x * &w;
    let (slack_upper, slack_lower) = slacks(proj.as_slice(), classes, &thresholds);
    let loss: f64 = slack_upper.iter().chain(slack_lower.iter()).flatten().sum();
    Ok(SvorSolution {
        primal_objective: 0.5 * coupling.quad_form(&w) + lambda2 * loss,
        weights: w,
        thresholds,
        slack_upper,
        slack_lower,
        iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelSpec};
    use rand::{Rng, SeedableRng};

    fn ds(x: &[f64], d: usize, classes: Vec<usize>, k: usize) -> Dataset {
        let n = classes.len();
        let genders = (0..n).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
        Dataset::new(DMatrix::from_row_slice(n, d, x), genders, classes, k).unwrap()
    }

    #[test]
    fn unit_margin_ladder() {
        let d = ds(&[0.0, 2.0, 4.0], 1, vec![1, 2, 3], 3);
        let sol = solve_svor_linear(&d, 1e3, &Rank1Metric::identity(1), 1e-10).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-6, "{:?}", sol.weights);
        assert!((sol.thresholds[0] - 1.0).abs() < 1e-6);
        assert!((sol.thresholds[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn ladder_matches_grid_search() {
        // brute force over (w, b1, b2) on the same three points, lambda2 = 0.3
        let lambda2 = 0.3;
        let d = ds(&[0.0, 2.0, 4.0], 1, vec![1, 2, 3], 3);
        let sol = solve_svor_linear(&d, lambda2, &Rank1Metric::identity(1), 1e-10).unwrap();
        let f = |w: f64, b1: f64, b2: f64| {
            let p = [0.0, 2.0 * w, 4.0 * w];
            0.5 * w * w + lambda2 * ordinal_hinge_total(&p, &[1, 2, 3], &[b1, b2])
        };
        let mut best = f64::INFINITY;
        for i in 0..=120 {
            let w = i as f64 * 0.01;
            for a in 0..=60 {
                let b1 = a as f64 * 0.05 - 1.0;
                for c in 0..=60 {
                    let b2 = c as f64 * 0.1 - 1.0;
                    if b1 <= b2 {
                        best = best.min(f(w, b1, b2));
                    }
                }
            }
        }
        assert!(sol.primal_objective <= best + 1e-9);
        assert!(sol.primal_objective >= best - 0.02);
    }

    #[test]
    fn boundary_classes_have_one_side() {
        let d = ds(&[0.0, 1.0, 2.0, 3.0], 1, vec![1, 1, 2, 2], 2);
        let sol = solve_svor_linear(&d, 1.0, &Rank1Metric::identity(1), 1e-10).unwrap();
        assert!(sol.slack_lower[0].is_none() && sol.slack_upper[0].is_some());
        assert!(sol.slack_upper[3].is_none() && sol.slack_lower[3].is_some());
    }

    #[test]
    fn contradictory_duplicate_pays_slack() {
        let d = ds(&[0.0, 1.0, 1.0, 2.0], 1, vec![1, 1, 2, 2], 2);
        let sol = solve_svor_linear(&d, 10.0, &Rank1Metric::identity(1), 1e-10).unwrap();
        let s1 = sol.slack_upper[1].unwrap();
        let s2 = sol.slack_lower[2].unwrap();
        assert!(s1 > 1e-6 || s2 > 1e-6);
        assert!(s1 + s2 >= 2.0 - 1e-8);
    }

    #[test]
    fn invariants_on_random_data() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..15 {
            let k = 4;
            let n = 12;
            let classes: Vec<usize> = (0..n).map(|i| i % k + 1).collect();
            let x = DMatrix::from_fn(n, 2, |i, j| {
                rng.random_range(-1.0..1.0) + if j == 0 { classes[i] as f64 * 0.5 } else { 0.0 }
            });
            let genders = (0..n).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
            let d = Dataset::new(x.clone(), genders, classes.clone(), k).unwrap();
            let g = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let m = Rank1Metric::new(&g, 3.0);
            let sol = solve_svor_linear(&d, 2.0, &m, 1e-10).unwrap();
            assert!(sol.thresholds.windows(2).all(|p| p[0] <= p[1]));
            // slacks equal the margin violations they pay for
            let proj = &x * &sol.weights;
            for i in 0..n {
                let j = classes[i];
                if let Some(s) = sol.slack_upper[i] {
                    assert!(s >= 0.0);
                    if s > 1e-6 {
                        assert!((s - (1.0 + proj[i] - sol.thresholds[j - 1])).abs() < 1e-6);
                    }
                }
            }
            // never worse than w = 0 with equally spaced thresholds
            let base_b: Vec<f64> = (0..k - 1).map(|t| 2.0 * t as f64).collect();
            let base = 2.0 * ordinal_hinge_total(&vec![0.0; n], &classes, &base_b);
            assert!(sol.primal_objective <= base + 1e-9);
        }
    }

    #[test]
    fn kernel_toy_ranks_are_monotone() {
        let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.5).collect();
        let d = ds(&x, 1, vec![1, 1, 1, 2, 2, 2, 3, 3, 3], 3);
        let k = gram(&KernelSpec::Rbf { gamma: 0.5 }, d.features(), d.features()).unwrap();
        let sol = solve_svor_kernel(&d, &k, 10.0, &DVector::zeros(9), 0.0, 1e-10).unwrap();
        let grid = DMatrix::from_fn(30, 1, |i, _| i as f64 * 0.14);
        let kg = gram(&KernelSpec::Rbf { gamma: 0.5 }, &grid, d.features()).unwrap();
        let proj = &kg * &sol.weights;
        let ranks = classify_by_thresholds(proj.as_slice(), &sol.thresholds);
        assert!(ranks.windows(2).all(|p| p[0] <= p[1]), "{ranks:?}");
    }

    #[test]
    fn linear_kernel_matches_linear_path() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let n = 24;
        let classes: Vec<usize> = (0..n).map(|i| i % 3 + 1).collect();
        let x = DMatrix::from_fn(n, 3, |i, j| {
            rng.random_range(-1.0..1.0) + if j == 1 { classes[i] as f64 } else { 0.0 }
        });
        let genders = (0..n).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
        let d = Dataset::new(x.clone(), genders, classes, 3).unwrap();
        let lin = solve_svor_linear(&d, 1.0, &Rank1Metric::identity(3), 1e-10).unwrap();
        let k = gram(&KernelSpec::Linear, &x, &x).unwrap();
        let ker = solve_svor_kernel(&d, &k, 1.0, &DVector::zeros(n), 0.0, 1e-10).unwrap();
        let test = DMatrix::from_fn(40, 3, |i, j| ((i * 5 + j) as f64).cos() * 3.0);
        let a = predict_ordinal_svor(&lin.weights, &lin.thresholds, &test).unwrap();
        let b = predict_ordinal_svor(&x.tr_mul(&ker.weights), &ker.thresholds, &test).unwrap();
        let agree = a.iter().zip(&b).filter(|(p, q)| p == q).count();
        assert!(agree >= 39, "{agree}/40");
        assert!((lin.primal_objective - ker.primal_objective).abs() < 1e-6 * lin.primal_objective);
    }
}
