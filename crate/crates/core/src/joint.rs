//! Joint models and the alternating trainer.
//!
//! The total objective is
//!
//! ```text
//! SVOR:  1/2 |w_g|^2 + l1 sum hinge_g + 1/2 |w_a|^2 + l2 sum slacks + l3 (w_g . w_a)^2
//! KDLOR: 1/2 |w_g|^2 + l1 sum hinge_g + w_a^T S_w w_a + ridge |w_a|^2 - l2 rho + l3 (w_g . w_a)^2
//! ```
//!
//! In kernel form the ridge acts on the coefficients: `ridge |beta|^2`.
//!
//! Each outer iteration solves the classifier with `w_a` fixed, then the
//! ordinal block with `w_g` fixed. The first iteration runs with the coupling
//! switched off, which reproduces the two single-task models. A block update
//! is kept only if it does not increase the total, so the recorded trace is
//! nonincreasing even when a subproblem is solved only to tolerance.
//!
//! When the coupling is strong, block updates can only rotate each direction
//! by a tiny amount and the alternation slows to a crawl before reaching a
//! stationary point. The trainer therefore finishes with polishing steps that
//! move all blocks at once: `w_g . w_a` is linearized at the current point,
//! the convex problem that results is solved exactly, and a backtracking
//! search on the true total keeps every accepted step descending.
//!
//! Kernel models run the same alternation on an exact feature map of the
//! training Gram matrix and are converted to representer coefficients at the
//! end.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{OrdinalMethod, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hinge_qp::{HingeQp, Quadratic};
use crate::kdlor::{
    classify_by_thresholds, default_ridge, derive_thresholds, kernel_scatter_trace, scatter_parts, solve_kdlor_weighted,
    ScatterSummary,
};
use crate::kernels::{dot_compensated, gram, gram_apply_compensated, gram_inner, FeatureMap, KernelSpec, Rank1Metric};
use crate::svm::{hinge_sum, predict_binary, solve_svm_features};
use crate::pav::isotonic;
use crate::svor::{ordinal_hinge_total, solve_svor_features};

#[derive(Debug, Clone, PartialEq)]
pub struct JointLinearModel {
    pub w_g: DVector<f64>,
    pub b_g: f64,
    pub w_a: DVector<f64>,
    pub thresholds: Vec<f64>,
    pub ordinal_method: OrdinalMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointKernelModel {
    pub alpha: DVector<f64>,
    pub b_g: f64,
    pub beta: DVector<f64>,
    pub thresholds: Vec<f64>,
    pub train_features: DMatrix<f64>,
    /// Ordinal labels of the training rows; the discriminant objective
    /// centers projections within these classes.
    pub train_classes: Vec<usize>,
    pub kernel: KernelSpec,
    pub ordinal_method: OrdinalMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JointModel {
    Linear(JointLinearModel),
    Kernel(JointKernelModel),
}

impl JointModel {
    pub fn ordinal_method(&self) -> OrdinalMethod {
        match self {
            JointModel::Linear(m) => m.ordinal_method,
            JointModel::Kernel(m) => m.ordinal_method,
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        match self {
            JointModel::Linear(m) => &m.thresholds,
            JointModel::Kernel(m) => &m.thresholds,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.thresholds().len() + 1
    }

    pub fn n_features(&self) -> usize {
        match self {
            JointModel::Linear(m) => m.w_g.len(),
            JointModel::Kernel(m) => m.train_features.ncols(),
        }
    }

    fn check_dim(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_features() {
            return Err(Error::DimMismatch {
                expected: self.n_features(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Rows of `x` mapped to the space the weights act on: the raw features
    /// for linear models, kernel values against the training rows otherwise.
    fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        match self {
            JointModel::Linear(_) => Ok(x.clone()),
            JointModel::Kernel(m) => gram(&m.kernel, x, &m.train_features),
        }
    }

    fn weights(&self) -> (&DVector<f64>, f64, &DVector<f64>) {
        match self {
            JointModel::Linear(m) => (&m.w_g, m.b_g, &m.w_a),
            JointModel::Kernel(m) => (&m.alpha, m.b_g, &m.beta),
        }
    }

    /// `w_g^T x + b_g` (or `alpha^T k(., x) + b_g`) per row.
    pub fn gender_decision(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let z = self.design(x)?;
        let (wg, bg, _) = self.weights();
        Ok((z * wg).iter().map(|v| v + bg).collect())
    }

    /// `w_a^T x` (or `beta^T k(., x)`) per row.
    pub fn ordinal_projection(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let z = self.design(x)?;
        let (_, _, wa) = self.weights();
        Ok((z * wa).iter().copied().collect())
    }

    pub fn predict_gender(&self, x: &DMatrix<f64>) -> Result<Vec<i8>> {
        Ok(predict_binary(&self.gender_decision(x)?))
    }

    /// Ordinal class `1 + #{j : projection > b_j}` per row.
    pub fn predict_class(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let p = self.ordinal_projection(x)?;
        Ok(classify_by_thresholds(&p, self.thresholds()))
    }

    /// Cosine between the two directions; under the Gram inner product for
    /// kernel models.
    pub fn cos_angle(&self) -> Result<f64> {
        match self {
            JointModel::Linear(m) => cos_angle(&m.w_g, &m.w_a),
            JointModel::Kernel(m) => {
                let k = gram(&m.kernel, &m.train_features, &m.train_features)?;
                gram_cos(&k, &m.alpha, &m.beta)
            }
        }
    }
}

fn gram_cos(k: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    let ab = gram_inner(k, a, b);
    let aa = gram_inner(k, a, a);
    let bb = gram_inner(k, b, b);
    if !(aa > 0.0 && bb > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// `<u, v> / (|u| |v|)`.
pub fn cos_angle(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((u.dot(v) / nu / nv).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointObjective {
    pub svm_part: f64,
    pub ordinal_part: f64,
    pub coupling_part: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub svm_objective: f64,
    pub ordinal_objective: f64,
    pub coupling_value: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective_trace: Vec<TraceEntry>,
    pub cos_angle: f64,
    pub converged: bool,
    /// Alternation rounds; polishing steps follow them in the trace.
    pub outer_iters_used: usize,
    pub polish_steps: usize,
    /// Effective configuration, including the resolved ridge.
    pub config: TrainConfig,
}

impl FitReport {
    /// Relative change of the total between consecutive trace entries.
    pub fn relative_changes(&self) -> Vec<f64> {
        self.objective_trace
            .windows(2)
            .map(|p| relative_change(p[0].total, p[1].total))
            .collect()
    }
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(cur.abs()).max(f64::MIN_POSITIVE)
}

/// Parameters as seen by the objective: weights act on the rows of `z`
/// and are regularized by `w^T q w`.
struct Geometry<'a> {
    z: &'a DMatrix<f64>,
    q: Option<&'a DMatrix<f64>>,
}

impl Geometry<'_> {
    fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match self.q {
            None => dot_compensated(a.as_slice(), b.as_slice()),
            Some(q) => gram_inner(q, a, b),
        }
    }
}

struct Params<'a> {
    w_g: &'a DVector<f64>,
    b_g: f64,
    w_a: &'a DVector<f64>,
    thresholds: &'a [f64],
}

fn class_means(values: &[f64], classes: &[usize], k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for (&v, &c) in values.iter().zip(classes) {
        sum[c - 1] += v;
        cnt[c - 1] += 1;
    }
    sum.iter().zip(&cnt).map(|(s, &n)| s / n as f64).collect()
}

fn objective_parts(
    geo: &Geometry,
    genders: &[i8],
    classes: &[usize],
    n_classes: usize,
    p: &Params,
    cfg: &TrainConfig,
    ridge: &DVector<f64>,
) -> JointObjective {
    let svm_part = 0.5 * geo.inner(p.w_g, p.w_g) + cfg.lambda1 * hinge_sum(geo.z, genders, p.w_g, p.b_g);
    let proj: Vec<f64> = (geo.z * p.w_a).iter().copied().collect();
    let ordinal_part = match cfg.ordinal_method {
        OrdinalMethod::Svor => {
            0.5 * geo.inner(p.w_a, p.w_a) + cfg.lambda2 * ordinal_hinge_total(&proj, classes, p.thresholds)
        }
        OrdinalMethod::Kdlor => {
            let means = class_means(&proj, classes, n_classes);
            let n = proj.len() as f64;
            let within: f64 = proj
                .iter()
                .zip(classes)
                .map(|(v, &c)| (v - means[c - 1]).powi(2))
                .sum::<f64>()
                / n;
            let rho = means.windows(2).map(|m| m[1] - m[0]).fold(f64::INFINITY, f64::min);
            within + p.w_a.component_mul(p.w_a).dot(ridge) - cfg.lambda2 * rho
        }
    };
    let c = geo.inner(p.w_g, p.w_a);
    let coupling_part = cfg.lambda3 * c * c;
    JointObjective {
        svm_part,
        ordinal_part,
        coupling_part,
        total: svm_part + ordinal_part + coupling_part,
    }
}

/// The ridge the trainer uses for `d` under `cfg` (zero for SVOR).
pub fn resolve_ridge(d: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if cfg.ordinal_method == OrdinalMethod::Svor {
        return Ok(0.0);
    }
    if let Some(r) = cfg.scatter_ridge {
        return Ok(r);
    }
    Ok(match &cfg.kernel {
        None => default_ridge(
            scatter_parts(d.features(), d.classes(), d.n_classes())?.s_w.trace(),
            d.n_features(),
        ),
        Some(spec) => {
            let k = gram(spec, d.features(), d.features())?;
            default_ridge(kernel_scatter_trace(&k, d.classes(), d.n_classes()), d.n_samples())
        }
    })
}

/// Total objective of `model` on dataset `d` (the training set for kernel
/// models, since the regularizers use the training Gram matrix).
pub fn evaluate_objective(model: &JointModel, d: &Dataset, cfg: &TrainConfig) -> Result<JointObjective> {
    if model.n_classes() != d.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, data has {}",
            model.n_classes(),
            d.n_classes()
        )));
    }
    let ridge = resolve_ridge(d, &TrainConfig {
        ordinal_method: model.ordinal_method(),
        ..cfg.clone()
    })?;
    let cfg = TrainConfig {
        ordinal_method: model.ordinal_method(),
        ..cfg.clone()
    };
    match model {
        JointModel::Linear(m) => {
            model.check_dim(d.features())?;
            let geo = Geometry {
                z: d.features(),
                q: None,
            };
            let p = Params {
                w_g: &m.w_g,
                b_g: m.b_g,
                w_a: &m.w_a,
                thresholds: &m.thresholds,
            };
            let ridge = DVector::from_element(p.w_a.len(), ridge);
            Ok(objective_parts(&geo, d.genders(), d.classes(), d.n_classes(), &p, &cfg, &ridge))
        }
        JointModel::Kernel(m) => {
            let z = model.design(d.features())?;
            let q = gram(&m.kernel, &m.train_features, &m.train_features)?;
            let geo = Geometry { z: &z, q: Some(&q) };
            let p = Params {
                w_g: &m.alpha,
                b_g: m.b_g,
                w_a: &m.beta,
                thresholds: &m.thresholds,
            };
            let ridge = DVector::from_element(p.w_a.len(), ridge);
            Ok(objective_parts(&geo, d.genders(), d.classes(), d.n_classes(), &p, &cfg, &ridge))
        }
    }
}

struct Alternation {
    w_g: DVector<f64>,
    b_g: f64,
    w_a: DVector<f64>,
    thresholds: Vec<f64>,
    trace: Vec<TraceEntry>,
    converged: bool,
    outer_iters: usize,
    polish_steps: usize,
}

const MAX_POLISH_STEPS: usize = 200;

struct Point {
    w_g: DVector<f64>,
    b_g: f64,
    w_a: DVector<f64>,
    thresholds: Vec<f64>,
}

/// Solves the joint problem with `w_g . w_a` replaced by its linearization
/// at `pt`. Returns the minimizer, the model value there (the model agrees
/// with the true total at `pt`) and the linearized coupling at the minimizer.
fn linearized_step(
    x: &DMatrix<f64>,
    genders: &[i8],
    classes: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
    step: &OrdinalStep,
    pt: &Point,
) -> Result<(Point, f64, f64)> {
    let (n, dim) = x.shape();
    let n_ord = match step {
        OrdinalStep::Kdlor(..) => 1,
        OrdinalStep::Svor => n_classes - 1,
    };
    let nv = 2 * dim + 1 + n_ord;
    let (ob, oa, ot) = (dim, dim + 1, 2 * dim + 1);

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut f = DVector::<f64>::zeros(nv);
    for j in 0..dim {
        h[(j, j)] = 1.0;
    }
    let mut hinge_rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(3 * n);
    for i in 0..n {
        let y = genders[i] as f64;
        let mut r = DVector::<f64>::zeros(nv);
        for j in 0..dim {
            r[j] = y * x[(i, j)];
        }
        r[ob] = y;
        hinge_rows.push((r, cfg.lambda1));
    }
    let mut order_rows: Vec<DVector<f64>> = Vec::new();
    match step {
        OrdinalStep::Svor => {
            for j in 0..dim {
                h[(oa + j, oa + j)] = 1.0;
            }
            for (i, &c) in classes.iter().enumerate() {
                let mut pairs = Vec::with_capacity(2);
                if c < n_classes {
                    pairs.push((-1.0, c - 1));
                }
                if c > 1 {
                    pairs.push((1.0, c - 2));
                }
                for (sign, t) in pairs {
                    let mut r = DVector::<f64>::zeros(nv);
                    for j in 0..dim {
                        r[oa + j] = sign * x[(i, j)];
                    }
                    r[ot + t] = -sign;
                    hinge_rows.push((r, cfg.lambda2));
                }
            }
            for t in 1..n_ord {
                let mut r = DVector::<f64>::zeros(nv);
                r[ot + t] = 1.0;
                r[ot + t - 1] = -1.0;
                order_rows.push(r);
            }
        }
        OrdinalStep::Kdlor(s, ridge) => {
            for i in 0..dim {
                for j in 0..dim {
                    h[(oa + i, oa + j)] = 2.0 * s.s_w[(i, j)];
                }
                h[(oa + i, oa + i)] += 2.0 * ridge[i];
            }
            f[ot] = -cfg.lambda2;
            let dm = s.mean_differences();
            for k in 0..dm.ncols() {
                let mut r = DVector::<f64>::zeros(nv);
                for j in 0..dim {
                    r[oa + j] = dm[(j, k)];
                }
                r[ot] = -1.0;
                order_rows.push(r);
            }
        }
    }
    // Lagrangian cross term mu (g - g_k)^T (a - a_k) plus the smallest
    // proximal shift tau that keeps the (g, a) block positive semidefinite
    let c0 = dot_compensated(pt.w_g.as_slice(), pt.w_a.as_slice());
    let mu = 2.0 * cfg.lambda3 * c0;
    let a_min = match step {
        OrdinalStep::Svor => 1.0,
        OrdinalStep::Kdlor(..) => h.view((oa, oa), (dim, dim)).into_owned().symmetric_eigenvalues().min(),
    };
    let need = 1.01 * mu * mu;
    let tau = if a_min >= need {
        0.0
    } else {
        let bq = 1.0 + a_min;
        let cq = a_min - need;
        0.5 * (-bq + (bq * bq - 4.0 * cq).sqrt())
    };
    for j in 0..dim {
        h[(j, oa + j)] += mu;
        h[(oa + j, j)] += mu;
        h[(j, j)] += tau;
        h[(oa + j, oa + j)] += tau;
        f[j] -= mu * pt.w_a[j] + tau * pt.w_g[j];
        f[oa + j] -= mu * pt.w_g[j] + tau * pt.w_a[j];
    }
    let a = DMatrix::from_fn(hinge_rows.len(), nv, |r, c| hinge_rows[r].0[c]);
    let cost = DVector::from_iterator(hinge_rows.len(), hinge_rows.iter().map(|r| r.1));
    let b = DMatrix::from_fn(order_rows.len(), nv, |r, c| order_rows[r][c]);
    let mut v = DVector::<f64>::zeros(nv);
    v.rows_mut(0, dim).copy_from(&pt.w_a);
    v.rows_mut(oa, dim).copy_from(&pt.w_g);

    let qp = HingeQp {
        h: Quadratic::Dense(&h),
        linear: Some(&f),
        rank1: Some((&v, 2.0 * cfg.lambda3, c0)),
        a: &a,
        b: &b,
        c: &cost,
    };
    let theta = qp.solve(1e-13)?.theta;

    let slack: f64 = (&a * &theta)
        .iter()
        .zip(cost.iter())
        .map(|(m, c)| c * (1.0 - m).max(0.0))
        .sum();
    let l = dot_compensated(v.as_slice(), theta.as_slice()) - c0;
    // constant that makes the model agree with the total at pt
    let offset = mu * c0 + 0.5 * tau * (pt.w_g.norm_squared() + pt.w_a.norm_squared());
    let model = 0.5 * theta.dot(&(&h * &theta)) + f.dot(&theta) + cfg.lambda3 * l * l + slack + offset;

    let w_g = theta.rows(0, dim).into_owned();
    let w_a = theta.rows(oa, dim).into_owned();
    let thresholds = match step {
        OrdinalStep::Kdlor(s, _) => derive_thresholds(&w_a, s),
        OrdinalStep::Svor => theta.rows(ot, n_ord).iter().copied().collect(),
    };
    Ok((
        Point {
            w_g,
            b_g: theta[ob],
            w_a,
            thresholds,
        },
        model,
        l,
    ))
}

/// Moves `(g, a)` along `(-a, -g)` until `g . a` equals `target`; a step
/// of this kind changes everything else only to second order.
fn restore_coupling(g: &mut DVector<f64>, a: &mut DVector<f64>, target: f64) {
    let c = dot_compensated(g.as_slice(), a.as_slice());
    let sq = g.norm_squared() + a.norm_squared();
    let disc = sq * sq - 4.0 * c * (c - target);
    if !(sq > 0.0 && disc >= 0.0) {
        return;
    }
    let t = 2.0 * (c - target) / (sq + disc.sqrt());
    let g0 = g.clone();
    g.axpy(-t, a, 1.0);
    a.axpy(-t, &g0, 1.0);
}

enum OrdinalStep {
    Kdlor(ScatterSummary, DVector<f64>),
    Svor,
}

fn alternate(
    x: &DMatrix<f64>,
    genders: &[i8],
    classes: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
    ridge: &DVector<f64>,
) -> Result<Alternation> {
    let dim = x.ncols();
    let step = match cfg.ordinal_method {
        OrdinalMethod::Kdlor => OrdinalStep::Kdlor(scatter_parts(x, classes, n_classes)?, ridge.clone()),
        OrdinalMethod::Svor => OrdinalStep::Svor,
    };
    let solve_ordinal = |w_g: &DVector<f64>, lambda3: f64| -> Result<(DVector<f64>, Vec<f64>)> {
        let metric = Rank1Metric::new(w_g, lambda3);
        match &step {
            OrdinalStep::Kdlor(s, r) => {
                let sol = solve_kdlor_weighted(s, cfg.lambda2, &metric, r, cfg.inner_tol)?;
                Ok((sol.weights, sol.thresholds))
            }
            OrdinalStep::Svor => {
                let sol = solve_svor_features(x, classes, n_classes, cfg.lambda2, &metric, cfg.inner_tol)?;
                Ok((sol.weights, sol.thresholds))
            }
        }
    };
    let geo = Geometry { z: x, q: None };
    let total = |w_g: &DVector<f64>, b_g: f64, w_a: &DVector<f64>, thr: &[f64]| {
        let p = Params {
            w_g,
            b_g,
            w_a,
            thresholds: thr,
        };
        objective_parts(&geo, genders, classes, n_classes, &p, cfg, ridge)
    };
    let entry = |iteration: usize, o: JointObjective| TraceEntry {
        iteration,
        svm_objective: o.svm_part,
        ordinal_objective: o.ordinal_part,
        coupling_value: o.coupling_part,
        total: o.total,
    };

    // decoupled start
    let svm = solve_svm_features(x, genders, cfg.lambda1, &Rank1Metric::identity(dim), cfg.inner_tol)?;
    let (mut w_g, mut b_g) = (svm.weights, svm.intercept);
    let (mut w_a, mut thr) = solve_ordinal(&w_g, 0.0)?;
    let mut cur = total(&w_g, b_g, &w_a, &thr);
    let mut trace = vec![entry(1, cur)];
    if cfg.lambda3 == 0.0 {
        return Ok(Alternation {
            w_g,
            b_g,
            w_a,
            thresholds: thr,
            trace,
            converged: true,
            outer_iters: 1,
            polish_steps: 0,
        });
    }

    let mut converged = false;
    for it in 2..=cfg.max_outer_iters {
        let prev = cur.total;
        let svm = solve_svm_features(
            x,
            genders,
            cfg.lambda1,
            &Rank1Metric::new(&w_a, cfg.lambda3),
            cfg.inner_tol,
        )?;
        let cand = total(&svm.weights, svm.intercept, &w_a, &thr);
        if cand.total <= cur.total {
            w_g = svm.weights;
            b_g = svm.intercept;
            cur = cand;
        }
        let (wa_new, thr_new) = solve_ordinal(&w_g, cfg.lambda3)?;
        let cand = total(&w_g, b_g, &wa_new, &thr_new);
        if cand.total <= cur.total {
            w_a = wa_new;
            thr = thr_new;
            cur = cand;
        }
        trace.push(entry(it, cur));
        if relative_change(prev, cur.total) < cfg.outer_tol {
            converged = true;
            break;
        }
    }
    let outer_iters = trace.len();

    let mut pt = Point {
        w_g,
        b_g,
        w_a,
        thresholds: thr,
    };
    let mut polish_steps = 0;
    for _ in 0..MAX_POLISH_STEPS {
        // when the coupling dwarfs everything else the joint problem can be
        // too badly conditioned for the interior-point solver; the
        // alternation result then stands as is
        let (target, model, coupling) = match linearized_step(x, genders, classes, n_classes, cfg, &step, &pt) {
            Ok(r) => r,
            Err(Error::NoConvergence { .. }) => break,
            Err(e) => return Err(e),
        };
        let predicted = cur.total - model;
        if predicted.is_nan() || predicted <= 1e-14 * (1.0 + cur.total.abs()) {
            break;
        }
        let c_k = dot_compensated(pt.w_g.as_slice(), pt.w_a.as_slice());
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mix = |a: &DVector<f64>, b: &DVector<f64>| a + (b - a) * s;
            let mut cand = Point {
                w_g: mix(&pt.w_g, &target.w_g),
                b_g: pt.b_g + s * (target.b_g - pt.b_g),
                w_a: mix(&pt.w_a, &target.w_a),
                thresholds: pt
                    .thresholds
                    .iter()
                    .zip(&target.thresholds)
                    .map(|(a, b)| a + s * (b - a))
                    .collect(),
            };
            restore_coupling(&mut cand.w_g, &mut cand.w_a, c_k + s * (coupling - c_k));
            let o = total(&cand.w_g, cand.b_g, &cand.w_a, &cand.thresholds);
            if o.total <= cur.total - 1e-4 * s * predicted {
                accepted = Some((cand, o));
                break;
            }
            s *= 0.5;
        }
        let Some((cand, o)) = accepted else { break };
        pt = cand;
        cur = o;
        polish_steps += 1;
        trace.push(entry(trace.len() + 1, cur));
    }
    Ok(Alternation {
        w_g: pt.w_g,
        b_g: pt.b_g,
        w_a: pt.w_a,
        thresholds: match cfg.ordinal_method {
            OrdinalMethod::Svor => isotonic(&pt.thresholds, None),
            OrdinalMethod::Kdlor => pt.thresholds,
        },
        trace,
        converged,
        outer_iters,
        polish_steps,
    })
}

/// Trains both tasks jointly. Linear when `cfg.kernel` is `None`, kernel
/// (representer) form otherwise.
pub fn train_joint(d: &Dataset, cfg: &TrainConfig) -> Result<(JointModel, FitReport)> {
    cfg.validate()?;
    if !(cfg.lambda1 > 0.0 && cfg.lambda2 > 0.0) {
        return Err(Error::InvalidConfig("lambda1 and lambda2 must be positive for training".into()));
    }
    let ridge = resolve_ridge(d, cfg)?;
    let mut effective = cfg.clone();
    if cfg.ordinal_method == OrdinalMethod::Kdlor {
        effective.scatter_ridge = Some(ridge);
    }

    let (model, alt) = match &cfg.kernel {
        None => {
            let weights = DVector::from_element(d.n_features(), ridge);
            let alt = alternate(d.features(), d.genders(), d.classes(), d.n_classes(), cfg, &weights)?;
            let model = JointModel::Linear(JointLinearModel {
                w_g: alt.w_g.clone(),
                b_g: alt.b_g,
                w_a: alt.w_a.clone(),
                thresholds: alt.thresholds.clone(),
                ordinal_method: cfg.ordinal_method,
            });
            (model, alt)
        }
        Some(spec) => {
            let k = gram(spec, d.features(), d.features())?;
            let map = FeatureMap::from_gram(&k)?;
            let weights = map.coefficient_norm_weights() * ridge;
            let alt = alternate(map.coords(), d.genders(), d.classes(), d.n_classes(), cfg, &weights)?;
            let mut alpha = map.coefficients(&alt.w_g);
            let beta = map.coefficients(&alt.w_a);
            let target = dot_compensated(alt.w_g.as_slice(), alt.w_a.as_slice());
            match_coupling(&k, &mut alpha, &beta, target);
            let model = JointModel::Kernel(JointKernelModel {
                alpha,
                b_g: alt.b_g,
                beta,
                thresholds: alt.thresholds.clone(),
                train_features: d.features().clone(),
                train_classes: d.classes().to_vec(),
                kernel: *spec,
                ordinal_method: cfg.ordinal_method,
            });
            (model, alt)
        }
    };
    if alt.w_a.norm() == 0.0 {
        return Err(Error::DegenerateSolution("ordinal direction is zero".into()));
    }
    let cos = match cos_angle(&alt.w_g, &alt.w_a) {
        Ok(c) => c,
        Err(Error::ZeroVector) => 0.0,
        Err(e) => return Err(e),
    };
    let report = FitReport {
        outer_iters_used: alt.outer_iters,
        polish_steps: alt.polish_steps,
        objective_trace: alt.trace,
        cos_angle: cos,
        converged: alt.converged,
        config: effective,
    };
    Ok((model, report))
}

/// Shifts `alpha` along `beta` until `alpha^T K beta` equals `target`.
/// Mapping back to coefficients rounds the coupling by far more than a
/// strongly coupled solution can tolerate; the shift moves the classifier
/// function by a negligible `t K beta`.
fn match_coupling(k: &DMatrix<f64>, alpha: &mut DVector<f64>, beta: &DVector<f64>, target: f64) {
    let bb = gram_inner(k, beta, beta);
    if bb.is_nan() || bb <= 0.0 {
        return;
    }
    for _ in 0..3 {
        let t = (gram_inner(k, alpha, beta) - target) / bb;
        if t == 0.0 {
            break;
        }
        alpha.axpy(-t, beta, 1.0);
    }
}

/// Smallest norm of a Lagrangian gradient of the total objective at
/// `model`, taken over all subgradient and multiplier choices consistent
/// with the point. Residuals are measured in the coordinates the model is
/// parameterized by: `(w_g, b_g, w_a, thresholds)` for linear models,
/// `(alpha, b_g, beta, thresholds)` for kernel models, with `rho` in place
/// of the thresholds for the discriminant regressor. Hinge terms whose
/// margin lies within `kink_tol` of the kink get a free multiplier.
pub fn stationarity_residual(model: &JointModel, d: &Dataset, cfg: &TrainConfig, kink_tol: f64) -> Result<f64> {
    let ridge = resolve_ridge(d, &TrainConfig {
        ordinal_method: model.ordinal_method(),
        ..cfg.clone()
    })?;
    let z = model.design(d.features())?;
    let q = match model {
        JointModel::Linear(_) => None,
        JointModel::Kernel(m) => Some(gram(&m.kernel, &m.train_features, &m.train_features)?),
    };
    let (w_g, b_g, w_a) = model.weights();
    let thr = model.thresholds();
    let n = d.n_samples();
    let p = w_g.len();
    let k = d.n_classes();
    let apply_q = |v: &DVector<f64>| match &q {
        None => v.clone(),
        Some(q) => gram_apply_compensated(q, v),
    };

    // layout: [w_g (p), b_g, w_a (p), thresholds (k-1) or rho (1)]
    let n_ord = match model.ordinal_method() {
        OrdinalMethod::Svor => k - 1,
        OrdinalMethod::Kdlor => 1,
    };
    let dim = 2 * p + 1 + n_ord;
    let (og, ob, oa, ot) = (0, p, p + 1, 2 * p + 1);
    let mut base = DVector::<f64>::zeros(dim);
    // each column is the gradient contribution of one multiplier; (lo, hi) bounds
    let mut cols: Vec<(DVector<f64>, f64, f64)> = Vec::new();

    let qg = apply_q(w_g);
    let qa = apply_q(w_a);
    let c = dot_compensated(w_g.as_slice(), qa.as_slice());
    base.rows_mut(og, p).copy_from(&(&qg + &qa * (2.0 * cfg.lambda3 * c)));
    base.rows_mut(oa, p).copy_from(&(&qg * (2.0 * cfg.lambda3 * c)));

    // classifier hinge: d/d(w_g, b) of l1 * max(0, 1 - y (z w_g + b))
    let fg = &z * w_g;
    for i in 0..n {
        let y = d.genders()[i] as f64;
        let margin = y * (fg[i] + b_g);
        let mut col = DVector::<f64>::zeros(dim);
        for j in 0..p {
            col[og + j] = -cfg.lambda1 * y * z[(i, j)];
        }
        col[ob] = -cfg.lambda1 * y;
        if margin < 1.0 - kink_tol {
            base += col;
        } else if margin <= 1.0 + kink_tol {
            cols.push((col, 0.0, 1.0));
        }
    }

    let fa = &z * w_a;
    match model.ordinal_method() {
        OrdinalMethod::Svor => {
            base.rows_mut(oa, p).add_assign(&qa);
            for i in 0..n {
                let j = d.classes()[i];
                // (sign s, threshold index t): slack max(0, 1 - s (f - b_t))
                let mut pairs = Vec::with_capacity(2);
                if j < k {
                    pairs.push((-1.0, j - 1));
                }
                if j > 1 {
                    pairs.push((1.0, j - 2));
                }
                for (s, t) in pairs {
                    let margin = s * (fa[i] - thr[t]);
                    let mut col = DVector::<f64>::zeros(dim);
                    for jj in 0..p {
                        col[oa + jj] = -cfg.lambda2 * s * z[(i, jj)];
                    }
                    col[ot + t] = cfg.lambda2 * s;
                    if margin < 1.0 - kink_tol {
                        base += col;
                    } else if margin <= 1.0 + kink_tol {
                        cols.push((col, 0.0, 1.0));
                    }
                }
            }
            // ordering b_t <= b_{t+1}; Lagrangian term -nu (b_{t+1} - b_t)
            for t in 0..thr.len().saturating_sub(1) {
                if thr[t + 1] - thr[t] <= kink_tol {
                    let mut col = DVector::<f64>::zeros(dim);
                    col[ot + t + 1] = -1.0;
                    col[ot + t] = 1.0;
                    cols.push((col, 0.0, f64::INFINITY));
                }
            }
        }
        OrdinalMethod::Kdlor => {
            // (1/N) |(I - C) z w_a|^2 + ridge |w_a|^2 - l2 rho
            let means = class_means(fa.as_slice(), d.classes(), k);
            let centered = DVector::from_fn(n, |i, _| fa[i] - means[d.classes()[i] - 1]);
            let g_scatter = z.tr_mul(&centered) * (2.0 / n as f64);
            base.rows_mut(oa, p).add_assign(&(g_scatter + w_a * (2.0 * ridge)));
            base[ot] = -cfg.lambda2;
            let mut zmeans = DMatrix::<f64>::zeros(k, p);
            let counts = d.class_counts();
            for i in 0..n {
                let c = d.classes()[i] - 1;
                for j in 0..p {
                    zmeans[(c, j)] += z[(i, j)] / counts[c] as f64;
                }
            }
            let rho = means.windows(2).map(|m| m[1] - m[0]).fold(f64::INFINITY, f64::min);
            let scale = 1.0 + rho.abs();
            // constraint w_a^T dm_t - rho >= 0; Lagrangian term -nu (w_a^T dm_t - rho)
            for t in 0..k - 1 {
                if means[t + 1] - means[t] - rho <= kink_tol * scale {
                    let mut col = DVector::<f64>::zeros(dim);
                    for j in 0..p {
                        col[oa + j] = -(zmeans[(t + 1, j)] - zmeans[(t, j)]);
                    }
                    col[ot] = 1.0;
                    cols.push((col, 0.0, f64::INFINITY));
                }
            }
        }
    }
    Ok(bounded_least_squares(&base, &cols))
}

/// `min |base + sum_j t_j col_j|` over `lo_j <= t_j <= hi_j` (finite `lo`),
/// by a bounded-variable active-set method with minimum-norm subproblem
/// solves, finished with a few coordinate-descent sweeps.
fn bounded_least_squares(base: &DVector<f64>, cols: &[(DVector<f64>, f64, f64)]) -> f64 {
    let m = cols.len();
    if m == 0 {
        return base.norm();
    }
    let a = DMatrix::from_columns(&cols.iter().map(|c| c.0.clone()).collect::<Vec<_>>());
    let lo: Vec<f64> = cols.iter().map(|c| c.1).collect();
    let hi: Vec<f64> = cols.iter().map(|c| c.2).collect();
    let scale = (1.0 + base.norm()) * a.amax().max(1.0);
    let tol = 1e-13 * scale;
    let mut t = DVector::from_vec(lo.clone());
    let mut free = vec![false; m];
    let mut blocked = vec![false; m];

    for _ in 0..(10 * m + 100) {
        let grad = a.tr_mul(&(base + &a * &t));
        let mut pick = None;
        let mut best = tol;
        for j in 0..m {
            if free[j] || blocked[j] {
                continue;
            }
            let gain = if t[j] <= lo[j] { -grad[j] } else { grad[j] };
            if gain > best {
                best = gain;
                pick = Some(j);
            }
        }
        let Some(enter) = pick else { break };
        free[enter] = true;
        let before = t.clone();
        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| free[j]).collect();
            if idx.is_empty() {
                break;
            }
            let mut rb = base.clone();
            for j in (0..m).filter(|&j| !free[j]) {
                rb.axpy(t[j], &a.column(j), 1.0);
            }
            let af = DMatrix::from_columns(&idx.iter().map(|&j| a.column(j).into_owned()).collect::<Vec<_>>());
            let Ok(z) = af.svd(true, true).solve(&(-rb), 1e-12) else {
                break;
            };
            let mut alpha = 1.0_f64;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] < lo[j] {
                    alpha = alpha.min((t[j] - lo[j]) / (t[j] - z[k]));
                } else if z[k] > hi[j] {
                    alpha = alpha.min((hi[j] - t[j]) / (z[k] - t[j]));
                }
            }
            let alpha = alpha.max(0.0);
            for (k, &j) in idx.iter().enumerate() {
                t[j] += alpha * (z[k] - t[j]);
            }
            if alpha >= 1.0 {
                break;
            }
            for &j in &idx {
                let eps = 1e-14 * (1.0 + t[j].abs());
                if t[j] <= lo[j] + eps {
                    t[j] = lo[j];
                    free[j] = false;
                } else if t[j] >= hi[j] - eps {
                    t[j] = hi[j];
                    free[j] = false;
                }
            }
        }
        if (&t - &before).amax() == 0.0 && !free[enter] {
            // rank deficiency can bounce the entering variable straight back
            blocked[enter] = true;
        } else {
            blocked.iter_mut().for_each(|b| *b = false);
        }
    }

    // coordinate-descent cleanup
    let ata = a.tr_mul(&a);
    let mut grad = a.tr_mul(&(base + &a * &t));
    for _ in 0..200 {
        let mut moved = 0.0_f64;
        for j in 0..m {
            let d = ata[(j, j)];
            if d <= 0.0 {
                continue;
            }
            let new = (t[j] - grad[j] / d).clamp(lo[j], hi[j]);
            let delta = new - t[j];
            if delta != 0.0 {
                t[j] = new;
                grad.axpy(delta, &ata.column(j), 1.0);
                moved = moved.max(delta.abs() * d.sqrt());
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    (base + &a * &t).norm()
}
