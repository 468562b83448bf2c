//! Soft-margin binary SVM under the coupled regularizer
//! `1/2 w^T (I + 2 lambda3 v v^T) w + lambda1 * sum hinge`.
//!
//! The metric is removed by the substitution `w~ = M^{1/2} w`,
//! `x~ = M^{-1/2} x`, which leaves a standard soft-margin SVM. That problem
//! is solved in the dual by SMO (pairwise coordinate ascent with
//! second-order working set selection). The intercept is unpenalized.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{FeatureMap, Rank1Metric};

#[derive(Debug, Clone, PartialEq)]
pub struct SvmSolution {
    /// `w` for linear solves, representer coefficients `alpha` for kernel solves.
    pub weights: DVector<f64>,
    pub intercept: f64,
    /// `1/2 w^T M w + lambda1 * sum hinge` at the returned point.
    pub primal_objective: f64,
    /// Dual variables of the hinge constraints, in `[0, lambda1]`.
    pub dual_coef: DVector<f64>,
    pub iterations: usize,
}

/// `sum_i max(0, 1 - y_i (w^T x_i + b))`.
pub fn hinge_total(w: &DVector<f64>, b: f64, d: &Dataset) -> Result<f64> {
    if w.len() != d.n_features() {
        return Err(Error::DimMismatch {
            expected: d.n_features(),
            found: w.len(),
        });
    }
    Ok(hinge_sum(d.features(), d.genders(), w, b))
}

pub(crate) fn hinge_sum(x: &DMatrix<f64>, y: &[i8], w: &DVector<f64>, b: f64) -> f64 {
    let f = x * w;
    f.iter()
        .zip(y)
        .map(|(fi, &yi)| (1.0 - yi as f64 * (fi + b)).max(0.0))
        .sum()
}

/// Sign of each decision value; an exact zero maps to `+1`.
pub fn predict_binary(decisions: &[f64]) -> Vec<i8> {
    decisions
        .iter()
        .map(|&v| if v < 0.0 { -1 } else { 1 })
        .collect()
}

pub fn solve_svm_linear(
    d: &Dataset,
    lambda1: f64,
    coupling: &Rank1Metric,
    tol: f64,
) -> Result<SvmSolution> {
    if coupling.dim() != d.n_features() {
        return Err(Error::DimMismatch {
            expected: d.n_features(),
            found: coupling.dim(),
        });
    }
    solve_svm_features(d.features(), d.genders(), lambda1, coupling, tol)
}

/// Kernel form: `1/2 a^T K a + lambda1 sum hinge(y_i (K a)_i + b)` plus
/// `lambda3 (a^T K beta)^2`, solved exactly through the Gram feature map.
pub fn solve_svm_kernel(
    d: &Dataset,
    lambda1: f64,
    gram: &DMatrix<f64>,
    beta_coupling: &DVector<f64>,
    lambda3: f64,
    tol: f64,
) -> Result<SvmSolution> {
    let n = d.n_samples();
    if gram.nrows() != n || gram.ncols() != n || beta_coupling.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "kernel svm needs an {n}x{n} Gram matrix and {n} coupling coefficients"
        )));
    }
    let map = FeatureMap::from_gram(gram)?;
    solve_svm_mapped(&map, d.genders(), lambda1, beta_coupling, lambda3, tol)
}

pub(crate) fn solve_svm_mapped(
    map: &FeatureMap,
    y: &[i8],
    lambda1: f64,
    beta_coupling: &DVector<f64>,
    lambda3: f64,
    tol: f64,
) -> Result<SvmSolution> {
    let metric = Rank1Metric::new(&map.direction(beta_coupling), lambda3);
    let sol = solve_svm_features(map.coords(), y, lambda1, &metric, tol)?;
    Ok(SvmSolution {
        weights: map.coefficients(&sol.weights),
        ..sol
    })
}

pub(crate) fn solve_svm_features(
    x: &DMatrix<f64>,
    y: &[i8],
    lambda1: f64,
    coupling: &Rank1Metric,
    tol: f64,
) -> Result<SvmSolution> {
    if !(lambda1 > 0.0 && lambda1.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda1 must be positive, got {lambda1}")));
    }
    if y.len() != x.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            y.len(),
            x.nrows()
        )));
    }
    if !(y.contains(&1) && y.contains(&-1)) {
        return Err(Error::SingleGender);
    }
    let xt = coupling.apply_sqrt_rows(x, true);
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let max_iter = 10 * x.nrows() * 1000;
    let smo = Smo::new(&xt, &yf, lambda1).run(tol, max_iter)?;

    let w = coupling.apply_sqrt_vec(&smo.w_tilde, true);
    let f = x * &w;
    let b = best_intercept(f.as_slice(), &yf, smo.intercept);
    let objective = 0.5 * coupling.quad_form(&w) + lambda1 * hinge_sum(x, y, &w, b);
    Ok(SvmSolution {
        weights: w,
        intercept: b,
        primal_objective: objective,
        dual_coef: smo.alpha,
        iterations: smo.iterations,
    })
}

struct SmoResult {
    alpha: DVector<f64>,
    w_tilde: DVector<f64>,
    intercept: f64,
    iterations: usize,
}

/// Dual problem `min 1/2 a^T Q a - 1^T a`, `0 <= a <= C`, `y^T a = 0`, with
/// `Q_ij = y_i y_j x_i^T x_j`. The primal direction is kept explicitly so
/// gradients never drift.
struct Smo<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    c: f64,
    diag: Vec<f64>,
}

const TAU: f64 = 1e-12;

impl<'a> Smo<'a> {
    fn new(x: &'a DMatrix<f64>, y: &'a [f64], c: f64) -> Self {
        let diag = x.row_iter().map(|r| r.norm_squared()).collect();
        Smo { x, y, c, diag }
    }

    fn upper(&self, a: f64) -> bool {
        a >= self.c
    }

    fn lower(a: f64) -> bool {
        a <= 0.0
    }

    fn run(&self, tol: f64, max_iter: usize) -> Result<SmoResult> {
        let n = self.x.nrows();
        let y = self.y;
        let mut a = DVector::<f64>::zeros(n);
        let mut w = DVector::<f64>::zeros(self.x.ncols());
        let mut grad = vec![-1.0; n];

        for iter in 0..max_iter {
            // first index: maximal violation among I_up
            let mut gmax = f64::NEG_INFINITY;
            let mut i_sel = None;
            for t in 0..n {
                let v = -y[t] * grad[t];
                let in_up = if y[t] > 0.0 { !self.upper(a[t]) } else { !Self::lower(a[t]) };
                if in_up && v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
            let Some(i) = i_sel else {
                return Ok(self.finish(a, w, &grad, iter));
            };
            let xi = self.x.row(i);
            let ki: DVector<f64> = self.x * xi.transpose();

            // second index: best second-order gain among I_low
            let mut gmax2 = f64::NEG_INFINITY;
            let mut best = f64::INFINITY;
            let mut j_sel = None;
            for t in 0..n {
                let in_low = if y[t] > 0.0 { !Self::lower(a[t]) } else { !self.upper(a[t]) };
                if !in_low {
                    continue;
                }
                let v = y[t] * grad[t];
                if v >= gmax2 {
                    gmax2 = v;
                }
                let diff = gmax + v;
                if diff > 0.0 {
                    let quad = (self.diag[i] + self.diag[t] - 2.0 * ki[t]).max(TAU);
                    let gain = -diff * diff / quad;
                    if gain <= best {
                        best = gain;
                        j_sel = Some(t);
                    }
                }
            }
            if gmax + gmax2 < tol {
                return Ok(self.finish(a, w, &grad, iter));
            }
            let Some(j) = j_sel else {
                return Ok(self.finish(a, w, &grad, iter));
            };

            let (old_i, old_j) = (a[i], a[j]);
            let quad = (self.diag[i] + self.diag[j] - 2.0 * ki[j]).max(TAU);
            let c = self.c;
            if y[i] != y[j] {
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = a[i] - a[j];
                a[i] += delta;
                a[j] += delta;
                if diff > 0.0 {
                    if a[j] < 0.0 {
                        a[j] = 0.0;
                        a[i] = diff;
                    }
                } else if a[i] < 0.0 {
                    a[i] = 0.0;
                    a[j] = -diff;
                }
                if diff > 0.0 {
                    if a[i] > c {
                        a[i] = c;
                        a[j] = c - diff;
                    }
                } else if a[j] > c {
                    a[j] = c;
                    a[i] = c + diff;
                }
            } else {
                let delta = (grad[i] - grad[j]) / quad;
                let sum = a[i] + a[j];
                a[i] -= delta;
                a[j] += delta;
                if sum > c {
                    if a[i] > c {
                        a[i] = c;
                        a[j] = sum - c;
                    }
                } else if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = sum;
                }
                if sum > c {
                    if a[j] > c {
                        a[j] = c;
                        a[i] = sum - c;
                    }
                } else if a[i] < 0.0 {
                    a[i] = 0.0;
                    a[j] = sum;
                }
            }

            let di = (a[i] - old_i) * y[i];
            let dj = (a[j] - old_j) * y[j];
            w.axpy(di, &xi.transpose(), 1.0);
            w.axpy(dj, &self.x.row(j).transpose(), 1.0);
            let f = self.x * &w;
            for t in 0..n {
                grad[t] = y[t] * f[t] - 1.0;
            }
        }
        Err(Error::NoConvergence {
            iterations: max_iter,
        })
    }

    fn finish(&self, a: DVector<f64>, w: DVector<f64>, grad: &[f64], iterations: usize) -> SmoResult {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut n_free, mut sum_free) = (0usize, 0.0);
        for t in 0..a.len() {
            let yg = self.y[t] * grad[t];
            if self.upper(a[t]) {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if Self::lower(a[t]) {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                n_free += 1;
                sum_free += yg;
            }
        }
        let rho = if n_free > 0 {
            sum_free / n_free as f64
        } else {
            0.5 * (ub + lb)
        };
        SmoResult {
            alpha: a,
            w_tilde: w,
            intercept: if rho.is_finite() { -rho } else { 0.0 },
            iterations,
        }
    }
}

/// Exact minimizer over `b` of `sum max(0, 1 - y_i (f_i + b))`. When the
/// minimizer is an interval, the point closest to `hint` is returned.
pub(crate) fn best_intercept(f: &[f64], y: &[f64], hint: f64) -> f64 {
    // each term has its kink at b = y_i - f_i; positives contribute slope -1
    // to the left of their kink, negatives slope +1 to the right
    let mut kinks: Vec<(f64, bool)> = f
        .iter()
        .zip(y)
        .map(|(&fi, &yi)| (yi - fi, yi > 0.0))
        .collect();
    kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_above = kinks.iter().filter(|k| k.1).count() as i64;
    let mut neg_below = 0i64;
    let (mut lo, mut hi) = (None, None);
    let mut idx = 0;
    while idx < kinks.len() {
        let v = kinks[idx].0;
        let (mut pos_at, mut neg_at) = (0i64, 0i64);
        while idx < kinks.len() && kinks[idx].0 == v {
            if kinks[idx].1 {
                pos_at += 1;
            } else {
                neg_at += 1;
            }
            idx += 1;
        }
        let left = -pos_above + neg_below;
        let right = -(pos_above - pos_at) + neg_below + neg_at;
        if lo.is_none() && right >= 0 {
            lo = Some(v);
        }
        if left <= 0 {
            hi = Some(v);
        }
        pos_above -= pos_at;
        neg_below += neg_at;
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) if lo <= hi => {
            if hint.is_finite() {
                hint.clamp(lo, hi)
            } else {
                0.5 * (lo + hi)
            }
        }
        (Some(lo), _) => lo,
        (_, Some(hi)) => hi,
        _ => hint,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelSpec};

    fn two_point() -> Dataset {
        let x = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]);
        Dataset::new(x, vec![-1, 1], vec![1, 2], 2).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let d = two_point();
        let w = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(hinge_total(&w, 0.0, &d).unwrap(), 0.0);
        assert_eq!(hinge_total(&DVector::zeros(2), 0.0, &d).unwrap(), 2.0);
        let x = DMatrix::from_row_slice(1, 1, &[0.25]);
        let single = hinge_sum(&x, &[1], &DVector::from_vec(vec![1.0]), 0.0);
        assert!((single - 0.75).abs() < 1e-15);
    }

    #[test]
    fn predict_tie_goes_positive() {
        assert_eq!(predict_binary(&[0.7, -0.7, 0.0]), vec![1, -1, 1]);
    }

    #[test]
    fn two_point_unit_margin() {
        let d = two_point();
        let sol = solve_svm_linear(&d, 1e3, &Rank1Metric::identity(2), 1e-10).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-9, "{:?}", sol.weights);
        assert!(sol.weights[1].abs() < 1e-9);
        assert!(sol.intercept.abs() < 1e-9);
    }

    #[test]
    fn kernel_two_point_midpoint() {
        let d = two_point();
        let k = gram(&KernelSpec::Rbf { gamma: 0.5 }, d.features(), d.features()).unwrap();
        let sol = solve_svm_kernel(&d, 1e3, &k, &DVector::zeros(2), 0.0, 1e-10).unwrap();
        let f = &k * &sol.weights;
        let m0 = -(f[0] + sol.intercept);
        let m1 = f[1] + sol.intercept;
        assert!((m0 - 1.0).abs() < 1e-8 && (m1 - 1.0).abs() < 1e-8, "{m0} {m1}");
    }

    #[test]
    fn intercept_search_handles_flat_interval() {
        // both points satisfied for any b in [-0.5, 0.5]
        let f = [1.5, -1.5];
        let y = [1.0, -1.0];
        assert_eq!(best_intercept(&f, &y, 0.2), 0.2);
        assert_eq!(best_intercept(&f, &y, 3.0), 0.5);
    }

    #[test]
    fn never_worse_than_zero_point() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 12;
            let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let y: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
            let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let m = Rank1Metric::new(&v, 10.0);
            let sol = solve_svm_features(&x, &y, 2.0, &m, 1e-8).unwrap();
            assert!(sol.primal_objective <= 2.0 * n as f64 + 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_lambda1() {
        let d = two_point();
        assert!(matches!(
            solve_svm_linear(&d, 0.0, &Rank1Metric::identity(2), 1e-8),
            Err(Error::InvalidConfig(_))
        ));
    }
}
