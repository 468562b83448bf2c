//! Kernel functions, Gram matrices, class-wise centering and the rank-1
//! metric transforms that turn the coupled subproblems into standard ones.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Rbf { gamma } if gamma.is_finite() && gamma > 0.0 => Ok(()),
            KernelSpec::Rbf { gamma } => Err(Error::InvalidConfig(format!(
                "rbf gamma must be positive, got {gamma}"
            ))),
        }
    }

    #[inline]
    fn eval_rows(&self, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
        let d = a.ncols();
        match *self {
            KernelSpec::Linear => (0..d).map(|c| a[(i, c)] * b[(j, c)]).sum(),
            KernelSpec::Rbf { gamma } => {
                let dist2: f64 = (0..d)
                    .map(|c| {
                        let t = a[(i, c)] - b[(j, c)];
                        t * t
                    })
                    .sum();
                (-gamma * dist2).exp()
            }
        }
    }
}

/// `1 / (D * var(X))` over all entries of `x`; falls back to `1 / D` for
/// constant data.
pub fn default_rbf_gamma(x: &DMatrix<f64>) -> f64 {
    let d = x.ncols().max(1) as f64;
    let n = x.len() as f64;
    if n == 0.0 {
        return 1.0 / d;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d * var)
    } else {
        1.0 / d
    }
}

/// Pairwise kernel values between the rows of `a` and the rows of `b`.
pub fn gram(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    spec.validate()?;
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        spec.eval_rows(a, i, b, j)
    }))
}

fn check_labels(n: usize, labels: &[usize]) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a {n}x{n} Gram matrix",
            labels.len()
        )));
    }
    let k = labels.iter().copied().max().unwrap_or(0);
    if labels.contains(&0) {
        return Err(Error::LabelOutOfRange {
            label: 0,
            n_classes: k,
        });
    }
    Ok(k)
}

/// `(I - C) K`: every row replaced by its deviation from the mean row of its
/// class. `C` assigns each sample the average over its own class.
pub fn class_center_rows(k: &DMatrix<f64>, labels: &[usize]) -> Result<DMatrix<f64>> {
    let n_classes = check_labels(k.nrows(), labels)?;
    let mut sums = DMatrix::<f64>::zeros(n_classes, k.ncols());
    let mut counts = vec![0usize; n_classes];
    for (i, &c) in labels.iter().enumerate() {
        counts[c - 1] += 1;
        for j in 0..k.ncols() {
            sums[(c - 1, j)] += k[(i, j)];
        }
    }
    Ok(DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| {
        let c = labels[i] - 1;
        k[(i, j)] - sums[(c, j)] / counts[c] as f64
    }))
}

/// Gram matrix of feature vectors centered by their own class mean:
/// `(I - C) K (I - C)^T`.
pub fn class_center_gram(k: &DMatrix<f64>, labels: &[usize]) -> Result<DMatrix<f64>> {
    if k.nrows() != k.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Gram matrix must be square, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let rows = class_center_rows(k, labels)?;
    let both = class_center_rows(&rows.transpose(), labels)?;
    Ok(both.transpose())
}

/// The metric `M = I + 2 * lambda3 * v v^T`, stored as a unit direction `u`
/// and `|v|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Metric {
    direction: DVector<f64>,
    lambda3: f64,
    norm_sq: f64,
}

impl Rank1Metric {
    pub fn new(coupling: &DVector<f64>, lambda3: f64) -> Self {
        let norm = coupling.norm();
        if norm == 0.0 || lambda3 == 0.0 {
            let mut metric = Self::identity(coupling.len().max(1));
            metric.lambda3 = lambda3;
            if norm > 0.0 {
                metric.direction = coupling / norm;
                metric.norm_sq = norm * norm;
            }
            return metric;
        }
        Rank1Metric {
            direction: coupling / norm,
            lambda3,
            norm_sq: norm * norm,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut direction = DVector::zeros(dim);
        if dim > 0 {
            direction[0] = 1.0;
        }
        Rank1Metric {
            direction,
            lambda3: 0.0,
            norm_sq: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn direction(&self) -> &DVector<f64> {
        &self.direction
    }

    pub fn lambda3(&self) -> f64 {
        self.lambda3
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    /// The un-normalized coupling vector `v`.
    pub fn coupling_vector(&self) -> DVector<f64> {
        &self.direction * self.norm_sq.sqrt()
    }

    /// Eigenvalue of `M` along `u`.
    pub fn stretch(&self) -> f64 {
        1.0 + 2.0 * self.lambda3 * self.norm_sq
    }

    /// `w^T M w`.
    pub fn quad_form(&self, w: &DVector<f64>) -> f64 {
        let p = self.direction.dot(w);
        w.norm_squared() + 2.0 * self.lambda3 * self.norm_sq * p * p
    }

    /// `M^{1/2} x` (or `M^{-1/2} x`), split into the parts parallel and
    /// orthogonal to `u`.
    pub fn apply_sqrt_vec(&self, x: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut out = x.clone();
        self.transform_in_place(out.as_mut_slice(), inverse);
        out
    }

    /// Applies `M^{±1/2}` to every row of `x`.
    pub fn apply_sqrt_rows(&self, x: &DMatrix<f64>, inverse: bool) -> DMatrix<f64> {
        let d = x.ncols();
        let mut out = x.transpose();
        if d > 0 {
            for row in out.as_mut_slice().chunks_mut(d) {
                self.transform_in_place(row, inverse);
            }
        }
        out.transpose()
    }

    fn transform_in_place(&self, x: &mut [f64], inverse: bool) {
        let u = self.direction.as_slice();
        let p: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
        for (xi, ui) in x.iter_mut().zip(u) {
            *xi -= p * ui;
        }
        // one re-orthogonalization pass keeps the parallel part free of
        // cancellation residue before it is rescaled
        let r: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
        let scaled = p * self.factor(inverse) - r;
        for (xi, ui) in x.iter_mut().zip(u) {
            *xi += scaled * ui;
        }
    }

    fn factor(&self, inverse: bool) -> f64 {
        let s = self.stretch();
        if inverse {
            1.0 / s.sqrt()
        } else {
            s.sqrt()
        }
    }
}

/// Returns `X M^{1/2}` (or `X M^{-1/2}`) using the closed-form rank-1 square
/// roots; no factorization is performed.
pub fn metric_sqrt_apply(m: &Rank1Metric, x: &DMatrix<f64>, inverse: bool) -> Result<DMatrix<f64>> {
    if x.ncols() != m.dim() {
        return Err(Error::DimMismatch {
            expected: m.dim(),
            found: x.ncols(),
        });
    }
    Ok(m.apply_sqrt_rows(x, inverse))
}

/// Dot product with error-free product and sum transformations, accurate
/// to about one rounding of the result even under heavy cancellation.
pub fn dot_compensated(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0_f64;
    let mut err = 0.0_f64;
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let ep = x.mul_add(y, -p);
        let t = sum + p;
        let z = t - sum;
        let es = (sum - (t - z)) + (p - z);
        sum = t;
        err += ep + es;
    }
    sum + err
}

/// `K v` for a symmetric `K`, each entry by [`dot_compensated`].
pub fn gram_apply_compensated(k: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        k.ncols(),
        k.column_iter().map(|col| dot_compensated(col.as_slice(), v.as_slice())),
    )
}

/// `a^T K b` for a symmetric `K`.
pub fn gram_inner(k: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    dot_compensated(a.as_slice(), gram_apply_compensated(k, b).as_slice())
}

/// Exact finite-dimensional feature map of a Gram matrix: `K = F F^T` with
/// `F = V diag(sqrt(ev))` over the numerically positive eigenpairs.
///
/// A direction `w` in the span of the mapped samples corresponds to the
/// representer coefficients `V diag(ev^{-1/2}) w`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    coords: DMatrix<f64>,
    coef_basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl FeatureMap {
    const RELATIVE_CUTOFF: f64 = 1e-11;

    pub fn from_gram(k: &DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "Gram matrix must be square and nonempty, got {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        let sym = (k + k.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        if max_ev <= 0.0 {
            return Err(Error::DegenerateSolution("Gram matrix has no positive eigenvalue".into()));
        }
        let keep: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > max_ev * Self::RELATIVE_CUTOFF)
            .collect();
        let r = keep.len();
        let mut coords = DMatrix::zeros(n, r);
        let mut coef_basis = DMatrix::zeros(n, r);
        let mut eigenvalues = DVector::zeros(r);
        for (c, &idx) in keep.iter().enumerate() {
            let ev = eig.eigenvalues[idx];
            eigenvalues[c] = ev;
            let s = ev.sqrt();
            for i in 0..n {
                let v = eig.eigenvectors[(i, idx)];
                coords[(i, c)] = v * s;
                coef_basis[(i, c)] = v / s;
            }
        }
        Ok(FeatureMap {
            coords,
            coef_basis,
            eigenvalues,
        })
    }

    /// Mapped training samples, one row each.
    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn rank(&self) -> usize {
        self.coords.ncols()
    }

    /// Retained Gram eigenvalues, one per mapped coordinate.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Diagonal `d` with `w^T diag(d) w = |coefficients(w)|^2`.
    pub fn coefficient_norm_weights(&self) -> DVector<f64> {
        self.eigenvalues.map(|ev| 1.0 / ev)
    }

    /// Representer coefficients of a feature-space direction.
    pub fn coefficients(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.coef_basis * w
    }

    /// Feature-space direction `sum_i c_i phi(x_i)` in mapped coordinates.
    pub fn direction(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        self.coords.tr_mul(coefficients)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_matrix(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn compensated_dot_survives_cancellation() {
        let a = [1e16, 1.0, -1e16, 3.0];
        let b = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(dot_compensated(&a, &b), 4.0);
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_ne!(naive, 4.0);
    }

    #[test]
    fn gram_inner_matches_plain_product() {
        let x = rand_matrix(5, 6, 2);
        let k = gram(&KernelSpec::Rbf { gamma: 0.4 }, &x, &x).unwrap();
        let a = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let b = DVector::from_fn(6, |i, _| (i as f64).sin());
        let plain = a.dot(&(&k * &b));
        assert!((gram_inner(&k, &a, &b) - plain).abs() < 1e-12);
    }

    #[test]
    fn rbf_diagonal_is_one() {
        let a = rand_matrix(1, 5, 3);
        let k = gram(&KernelSpec::Rbf { gamma: 0.7 }, &a, &a).unwrap();
        for i in 0..5 {
            assert_eq!(k[(i, i)], 1.0);
        }
    }

    #[test]
    fn linear_dot_product() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let k = gram(&KernelSpec::Linear, &a, &b).unwrap();
        assert_eq!(k[(0, 0)], 11.0);
    }

    #[test]
    fn rbf_known_value() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[2f64.sqrt(), 0.0]);
        let k = gram(&KernelSpec::Rbf { gamma: 0.5 }, &a, &b).unwrap();
        assert!((k[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k[(0, 0)] - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn gram_dim_mismatch() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert_eq!(
            gram(&KernelSpec::Linear, &a, &b).unwrap_err(),
            Error::DimMismatch { expected: 2, found: 3 }
        );
    }

    #[test]
    fn centering_identical_pair_is_zero() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 1.0, 3.0]);
        let k = gram(&KernelSpec::Rbf { gamma: 0.3 }, &x, &x).unwrap();
        let kc = class_center_gram(&k, &[1, 1]).unwrap();
        assert!(kc.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn centering_singleton_classes_is_zero() {
        let x = rand_matrix(3, 3, 2);
        let k = gram(&KernelSpec::Linear, &x, &x).unwrap();
        let kc = class_center_gram(&k, &[1, 2, 3]).unwrap();
        assert!(kc.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn centering_matches_input_space_oracle() {
        let x = DMatrix::from_column_slice(4, 1, &[0.5, 2.0, -1.0, 3.5]);
        let labels = [1, 1, 2, 2];
        // Oracle: center raw features by class mean, then outer products.
        let means = [(0.5 + 2.0) / 2.0, (-1.0 + 3.5) / 2.0];
        let centered: Vec<f64> = (0..4).map(|i| x[(i, 0)] - means[labels[i] - 1]).collect();
        let k = gram(&KernelSpec::Linear, &x, &x).unwrap();
        let kc = class_center_gram(&k, &labels).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((kc[(i, j)] - centered[i] * centered[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_metric_leaves_rows_unchanged() {
        let x = rand_matrix(4, 6, 3);
        let m = Rank1Metric::new(&DVector::from_vec(vec![1.0, 2.0, 0.5]), 0.0);
        let y = metric_sqrt_apply(&m, &x, false).unwrap();
        assert!((y - &x).abs().max() < 1e-15);
    }

    #[test]
    fn diagonal_metric_case() {
        let m = Rank1Metric::new(&DVector::from_vec(vec![1.0, 0.0]), 0.5);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let y = metric_sqrt_apply(&m, &x, false).unwrap();
        assert!((y[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
        assert!((y[(0, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sqrt_matches_eigendecomposition_oracle() {
        let v = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        let lambda3 = 0.9;
        let m = Rank1Metric::new(&v, lambda3);
        let dense = DMatrix::identity(3, 3) + &v * v.transpose() * (2.0 * lambda3);
        let eig = SymmetricEigen::new(dense);
        let sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()))
            * eig.eigenvectors.transpose();
        let x = rand_matrix(9, 5, 3);
        let y = metric_sqrt_apply(&m, &x, false).unwrap();
        let yi = metric_sqrt_apply(&m, &x, true).unwrap();
        assert!((y - &x * &sqrt).abs().max() < 1e-10);
        assert!((yi - &x * &inv_sqrt).abs().max() < 1e-10);
    }

    #[test]
    fn feature_map_reproduces_gram() {
        let x = rand_matrix(5, 8, 3);
        for spec in [KernelSpec::Linear, KernelSpec::Rbf { gamma: 0.4 }] {
            let k = gram(&spec, &x, &x).unwrap();
            let fm = FeatureMap::from_gram(&k).unwrap();
            let back = fm.coords() * fm.coords().transpose();
            assert!((back - &k).abs().max() < 1e-9);
            let w = DVector::from_fn(fm.rank(), |i, _| (i as f64 * 0.37).sin());
            let coef = fm.coefficients(&w);
            assert!((fm.direction(&coef) - &w).abs().max() < 1e-8);
        }
        let k = gram(&KernelSpec::Linear, &x, &x).unwrap();
        assert_eq!(FeatureMap::from_gram(&k).unwrap().rank(), 3);
    }

    proptest! {
        #[test]
        fn inverse_round_trip(seed in 0u64..1000, lambda3 in 0.0f64..1e6, d in 1usize..5) {
            let x = rand_matrix(seed, 4, d);
            let v = rand_matrix(seed + 1, d, 1).column(0).into_owned();
            let m = Rank1Metric::new(&v, lambda3);
            let back = metric_sqrt_apply(&m, &metric_sqrt_apply(&m, &x, true).unwrap(), false).unwrap();
            prop_assert!((back - &x).abs().max() < 1e-8);
        }

        #[test]
        fn quad_form_is_squared_sqrt_norm(seed in 0u64..1000, lambda3 in 0.0f64..1e3, d in 1usize..5) {
            let v = rand_matrix(seed, d, 1).column(0).into_owned();
            let w = rand_matrix(seed + 7, d, 1).column(0).into_owned();
            let m = Rank1Metric::new(&v, lambda3);
            let lhs = m.quad_form(&w);
            let rhs = m.apply_sqrt_vec(&w, false).norm_squared();
            prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.max(1.0));
        }

        #[test]
        fn gram_symmetric_psd(seed in 0u64..1000, n in 1usize..20, d in 1usize..4, gamma in 0.01f64..3.0) {
            let x = rand_matrix(seed, n, d);
            for spec in [KernelSpec::Linear, KernelSpec::Rbf { gamma }] {
                let k = gram(&spec, &x, &x).unwrap();
                prop_assert!((&k - k.transpose()).abs().max() < 1e-12);
                let ev = SymmetricEigen::new(k).eigenvalues;
                prop_assert!(ev.iter().all(|&e| e > -1e-8));
            }
        }
    }
}
