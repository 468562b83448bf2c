//! Discriminant ordinal regression: find a projection with small
//! within-class scatter whose consecutive class means are separated by a
//! margin `rho`, under the coupling `lambda3 (w_g . w_a)^2`.
//!
//! Primal:
//!
//! ```text
//! min  w^T H w - lambda2 rho    s.t.  w^T (m_{k+1} - m_k) >= rho,  k = 1..K-1
//! H  = S_w + lambda3 g g^T + ridge I
//! ```
//!
//! Its dual lives on the simplex scaled by `lambda2`. With `A = S_w + ridge I
//! = L L^T`, `P = L^{-1} Delta` and `q = L^{-1} g`, the dual matrix
//! `Delta^T H^{-1} Delta` is assembled in a cancellation-free form so that
//! very large `lambda3` stays accurate.

use std::ops::AddAssign;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{FeatureMap, Rank1Metric};

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSummary {
    /// `(1/N) sum_k sum_{x in X_k} (x - m_k)(x - m_k)^T`.
    pub s_w: DMatrix<f64>,
    /// Row `k - 1` is the mean of class `k`.
    pub class_means: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl ScatterSummary {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.s_w.nrows()
    }

    /// `m_{k+1} - m_k` as columns.
    pub fn mean_differences(&self) -> DMatrix<f64> {
        let k = self.n_classes();
        DMatrix::from_fn(self.dim(), k - 1, |r, c| {
            self.class_means[(c + 1, r)] - self.class_means[(c, r)]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdlorSolution {
    /// `w_a` for linear solves, representer coefficients `beta` for kernel solves.
    pub weights: DVector<f64>,
    pub rho: f64,
    pub thresholds: Vec<f64>,
    /// Multipliers of the mean-ordering constraints; they sum to `lambda2`.
    pub dual_coef: DVector<f64>,
    /// `w^T H w - lambda2 rho`, ridge included.
    pub objective: f64,
    pub ridge: f64,
    pub iterations: usize,
}

pub fn scatter(d: &Dataset) -> Result<ScatterSummary> {
    scatter_parts(d.features(), d.classes(), d.n_classes())
}

pub(crate) fn scatter_parts(
    x: &DMatrix<f64>,
    classes: &[usize],
    n_classes: usize,
) -> Result<ScatterSummary> {
    let (n, dim) = x.shape();
    if classes.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", classes.len())));
    }
    let mut counts = vec![0usize; n_classes];
    let mut means = DMatrix::<f64>::zeros(n_classes, dim);
    for (i, &c) in classes.iter().enumerate() {
        if c == 0 || c > n_classes {
            return Err(Error::LabelOutOfRange {
                label: c,
                n_classes,
            });
        }
        counts[c - 1] += 1;
        for j in 0..dim {
            means[(c - 1, j)] += x[(i, j)];
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty + 1));
    }
    for (k, &cnt) in counts.iter().enumerate() {
        for j in 0..dim {
            means[(k, j)] /= cnt as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - means[(classes[i] - 1, j)]);
    let mut s_w = centered.tr_mul(&centered) / n as f64;
    s_w = (&s_w + s_w.transpose()) * 0.5;
    Ok(ScatterSummary {
        s_w,
        class_means: means,
        counts,
    })
}

/// `1e-6 * trace(S_w) / n_input_features`, or `1e-10` when the scatter vanishes.
pub fn default_ridge(trace_s_w: f64, n_input_features: usize) -> f64 {
    let r = 1e-6 * trace_s_w / n_input_features.max(1) as f64;
    if r > 0.0 {
        r
    } else {
        1e-10
    }
}

/// Mean-projection midpoints `w^T (m_k + m_{k+1}) / 2`.
pub fn derive_thresholds(w: &DVector<f64>, s: &ScatterSummary) -> Vec<f64> {
    let proj: Vec<f64> = (0..s.n_classes())
        .map(|k| s.class_means.row(k).transpose().dot(w))
        .collect();
    midpoints(&proj)
}

pub(crate) fn midpoints(projected_means: &[f64]) -> Vec<f64> {
    projected_means
        .windows(2)
        .map(|p| 0.5 * (p[0] + p[1]))
        .collect()
}

/// `1 + #{j : projection > thresholds[j]}` for each projection.
pub fn classify_by_thresholds(projections: &[f64], thresholds: &[f64]) -> Vec<usize> {
    projections
        .iter()
        .map(|&p| 1 + thresholds.iter().filter(|&&b| p > b).count())
        .collect()
}

pub fn predict_ordinal_kdlor(w: &DVector<f64>, thresholds: &[f64], x: &DMatrix<f64>) -> Result<Vec<usize>> {
    if x.ncols() != w.len() {
        return Err(Error::DimMismatch {
            expected: w.len(),
            found: x.ncols(),
        });
    }
    let proj = x * w;
    Ok(classify_by_thresholds(proj.as_slice(), thresholds))
}

/// Solves the primal above. The coupling enters as `lambda3 * v v^T` with
/// `v` and `lambda3` taken from `coupling`.
pub fn solve_kdlor_linear(
    s: &ScatterSummary,
    lambda2: f64,
    coupling: &Rank1Metric,
    scatter_ridge: f64,
    tol: f64,
) -> Result<KdlorSolution> {
    if !(scatter_ridge >= 0.0 && scatter_ridge.is_finite()) {
        return Err(Error::InvalidConfig(format!("scatter_ridge must be >= 0, got {scatter_ridge}")));
    }
    let ridge = DVector::from_element(s.dim(), scatter_ridge);
    let sol = solve_kdlor_weighted(s, lambda2, coupling, &ridge, tol)?;
    Ok(KdlorSolution {
        ridge: scatter_ridge,
        ..sol
    })
}

/// Same primal with the ridge `w^T diag(ridge) w`.
pub(crate) fn solve_kdlor_weighted(
    s: &ScatterSummary,
    lambda2: f64,
    coupling: &Rank1Metric,
    ridge: &DVector<f64>,
    tol: f64,
) -> Result<KdlorSolution> {
    let dim = s.dim();
    if ridge.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            found: ridge.len(),
        });
    }
    if coupling.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            found: coupling.dim(),
        });
    }
    if !(lambda2 > 0.0 && lambda2.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda2 must be positive, got {lambda2}")));
    }
    let delta = s.mean_differences();
    let mean_scale = 1.0 + s.class_means.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    for k in 0..delta.ncols() {
        if delta.column(k).norm() <= 1e-12 * mean_scale {
            return Err(Error::DegenerateMeans { class: k + 1 });
        }
    }

    let a = &s.s_w + DMatrix::from_diagonal(ridge);
    let chol = Cholesky::new(a.clone()).ok_or_else(|| {
        Error::DegenerateSolution("within-class scatter is singular; use a positive scatter_ridge".into())
    })?;
    let lambda3 = coupling.lambda3();
    let g = coupling.coupling_vector();
    let p = chol.l().solve_lower_triangular(&delta).expect("nonsingular factor");
    let q = chol.l().solve_lower_triangular(&g).expect("nonsingular factor");
    let q_norm_sq = q.norm_squared();
    let coupled = lambda3 > 0.0 && q_norm_sq > 0.0;

    let gram = if coupled {
        let q_hat = &q / q_norm_sq.sqrt();
        let ptq = p.tr_mul(&q);
        let p_perp = &p - &q_hat * q_hat.tr_mul(&p);
        p_perp.tr_mul(&p_perp) + &ptq * ptq.transpose() / (q_norm_sq * (1.0 + lambda3 * q_norm_sq))
    } else {
        p.tr_mul(&p)
    };
    let (pi, iterations) = simplex_qp(&gram, tol, 50_000)?;
    let alpha = &pi * lambda2;

    // w = 1/2 L^{-T} (I + lambda3 q q^T)^{-1} P alpha
    let mut z = &p * &alpha;
    if coupled {
        let q_hat = &q / q_norm_sq.sqrt();
        let par = q_hat.dot(&z);
        z -= &q_hat * (par * (1.0 - 1.0 / (1.0 + lambda3 * q_norm_sq)));
    }
    let w = chol.l().tr_solve_lower_triangular(&z).expect("nonsingular factor") * 0.5;

    let rho = (0..delta.ncols())
        .map(|k| delta.column(k).dot(&w))
        .fold(f64::INFINITY, f64::min);
    let gw = g.dot(&w);
    let objective = (&a * &w).dot(&w) + lambda3 * gw * gw - lambda2 * rho;
    let thresholds = derive_thresholds(&w, s);
    Ok(KdlorSolution {
        weights: w,
        rho,
        thresholds,
        dual_coef: alpha,
        objective,
        ridge: ridge.max(),
        iterations,
    })
}

/// Kernel form. The quadratic term is `(1/N) beta^T K (I - C) K beta` with
/// `C` the class-averaging matrix, the ridge is `ridge * |beta|^2` and
/// class means are `(1/N_k) K[:, X_k] 1`. Solved exactly in the Gram
/// feature space, where the ridge becomes `ridge / eigenvalue` per
/// coordinate. The default ridge is `1e-6 * trace(Q) / N` for the quadratic
/// matrix `Q` above.
pub fn solve_kdlor_kernel(
    d: &Dataset,
    kmat: &DMatrix<f64>,
    lambda2: f64,
    alpha_coupling: &DVector<f64>,
    lambda3: f64,
    scatter_ridge: Option<f64>,
    tol: f64,
) -> Result<KdlorSolution> {
    let n = d.n_samples();
    if kmat.nrows() != n || kmat.ncols() != n || alpha_coupling.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "kernel kdlor needs an {n}x{n} Gram matrix and {n} coupling coefficients"
        )));
    }
    let map = FeatureMap::from_gram(kmat)?;
    let s = scatter_parts(map.coords(), d.classes(), d.n_classes())?;
    let ridge = match scatter_ridge {
        Some(r) if !(r >= 0.0 && r.is_finite()) => {
            return Err(Error::InvalidConfig(format!("scatter_ridge must be >= 0, got {r}")));
        }
        Some(r) => r,
        None => default_ridge(kernel_scatter_trace(kmat, d.classes(), d.n_classes()), n),
    };
    let metric = Rank1Metric::new(&map.direction(alpha_coupling), lambda3);
    let weights = map.coefficient_norm_weights() * ridge;
    let sol = solve_kdlor_weighted(&s, lambda2, &metric, &weights, tol)?;
    Ok(KdlorSolution {
        weights: map.coefficients(&sol.weights),
        ridge,
        ..sol
    })
}

/// `trace((1/N) K (I - C) K)`, the trace of the kernel scatter matrix.
pub fn kernel_scatter_trace(kmat: &DMatrix<f64>, classes: &[usize], n_classes: usize) -> f64 {
    let n = classes.len();
    let mut sums = DMatrix::<f64>::zeros(n_classes, kmat.ncols());
    let mut counts = vec![0usize; n_classes];
    for (i, &c) in classes.iter().enumerate() {
        counts[c - 1] += 1;
        sums.row_mut(c - 1).add_assign(&kmat.row(i));
    }
    let mut total = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        let cnt = counts[c - 1] as f64;
        for j in 0..kmat.ncols() {
            let v = kmat[(i, j)] - sums[(c - 1, j)] / cnt;
            total += v * v;
        }
    }
    total / n as f64
}

fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

fn quad(g: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (g * x).dot(x)
}

/// Frank-Wolfe gap `x^T G x - min_i (G x)_i` of `min 1/2 x^T G x` on the simplex.
fn fw_gap(g: &DMatrix<f64>, x: &DVector<f64>) -> (f64, f64) {
    let gx = g * x;
    let val = gx.dot(x);
    (val - gx.min(), val)
}

/// Equality-constrained solve on the current support, then feasibility check.
fn polish(g: &DMatrix<f64>, x: &DVector<f64>) -> Option<DVector<f64>> {
    let max = x.max();
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 1e-9 * max).collect();
    let m = support.len();
    let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = g[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = kkt.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let mut out = DVector::zeros(x.len());
    for (a, &i) in support.iter().enumerate() {
        if sol[a].is_nan() || sol[a] < 0.0 {
            return None;
        }
        out[i] = sol[a];
    }
    let total = out.sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    Some(out / total)
}

/// Minimiser of `1/2 z^T G z` on the affine hull of `support` (`sum z = 1`).
fn affine_min(g: &DMatrix<f64>, support: &[usize], n: usize) -> Option<DVector<f64>> {
    let m = support.len();
    let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = g[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs[m] = 1.0;
    let svd = kkt.clone().svd(true, true);
    let mut sol = svd.solve(&rhs, 1e-14).ok()?;
    for _ in 0..2 {
        // iterative refinement
        let r = &rhs - &kkt * &sol;
        sol += svd.solve(&r, 1e-14).ok()?;
    }
    let mut z = DVector::zeros(n);
    for (a, &i) in support.iter().enumerate() {
        z[i] = sol[a];
    }
    Some(z)
}

/// Wolfe-style active-set method started from the best vertex. Each major
/// step minimises on the current face, walks back to feasibility when that
/// leaves the simplex and otherwise adds the most negative reduced gradient
/// to the support. Growing the support one improving vertex at a time keeps
/// every face nondegenerate, so the face solves stay well posed even when G
/// is rank deficient.
fn active_set(g: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = g.nrows();
    let start = (0..n).min_by(|&a, &b| g[(a, a)].total_cmp(&g[(b, b)]))?;
    let mut x = DVector::zeros(n);
    x[start] = 1.0;
    let scale = g.amax().max(f64::MIN_POSITIVE);
    let mut support = vec![start];
    for _ in 0..50 * (n + 1) {
        let z = affine_min(g, &support, n)?;
        if support.iter().all(|&i| z[i] > 0.0) {
            let total = z.sum();
            x = z / total;
            let gx = g * &x;
            let val = gx.dot(&x);
            let (j, &low) = gx
                .iter()
                .enumerate()
                .filter(|(i, _)| !support.contains(i))
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap_or((n, &f64::INFINITY));
            if j == n || low >= val - 1e-15 * scale {
                return Some(x);
            }
            support.push(j);
            continue;
        }
        // largest step toward z that keeps x feasible
        let mut t = 1.0_f64;
        for &i in &support {
            if z[i] <= 0.0 {
                t = t.min(x[i] / (x[i] - z[i]));
            }
        }
        x = &x + (&z - &x) * t;
        let cut = 1e-15 * x.max();
        support.retain(|&i| x[i] > cut);
        if support.is_empty() {
            return None;
        }
        for i in 0..n {
            if !support.contains(&i) {
                x[i] = 0.0;
            }
        }
        let total = x.sum();
        x /= total;
    }
    None
}

/// `argmin 1/2 x^T G x` over the unit simplex by restarted FISTA with
/// periodic support polishing. Stops on a relative Frank-Wolfe gap.
pub(crate) fn simplex_qp(g: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<(DVector<f64>, usize)> {
    let n = g.nrows();
    if n == 1 {
        return Ok((DVector::from_element(1, 1.0), 0));
    }
    let lmax = SymmetricEigen::new(g.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    if lmax <= 0.0 {
        return Ok((x, 0));
    }
    let floor = 1e-14 * lmax;
    let converged = |x: &DVector<f64>| {
        let (gap, val) = fw_gap(g, x);
        gap <= tol * val.max(0.0) + floor
    };
    let step = 1.0 / lmax;
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut fx = quad(g, &x);
    for it in 1..=max_iter {
        let grad = g * &y;
        let x_new = project_simplex(&(&y - grad * step));
        let f_new = quad(g, &x_new);
        if f_new > fx {
            // adaptive restart
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        x = x_new;
        fx = f_new;
        t = t_new;
        if it % 10 == 0 || it == 1 {
            if converged(&x) {
                return Ok((x, it));
            }
            if let Some(p) = polish(g, &x) {
                if quad(g, &p) <= fx && converged(&p) {
                    return Ok((p, it));
                }
            }
        }
    }
    if converged(&x) {
        return Ok((x, max_iter));
    }
    // Ill-conditioned instances can stall first-order steps; finish exactly.
    if let Some(p) = active_set(g) {
        if converged(&p) {
            return Ok((p, max_iter));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
    })
}
