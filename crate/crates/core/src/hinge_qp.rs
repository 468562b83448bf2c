//! Primal-dual interior-point solver for hinge-loss quadratic programs
//!
//! ```text
//! min  1/2 theta^T H theta + f^T theta + rho/2 (v^T theta - v0)^2 + c^T xi
//! s.t. A theta + xi >= 1,   xi >= 0,   B theta >= 0
//! ```
//!
//! with Mehrotra predictor-corrector steps. The slack block is eliminated
//! analytically so each Newton step solves one `n x n` system.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::dot_compensated;

pub(crate) struct HingeQp<'a> {
    pub h: Quadratic<'a>,
    pub linear: Option<&'a DVector<f64>>,
    /// `(v, rho, v0)` of the rank-1 term.
    pub rank1: Option<(&'a DVector<f64>, f64, f64)>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    /// Per-row cost of the hinge slacks.
    pub c: &'a DVector<f64>,
}

pub(crate) enum Quadratic<'a> {
    Diagonal(&'a DVector<f64>),
    Dense(&'a DMatrix<f64>),
}

impl Quadratic<'_> {
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Quadratic::Diagonal(h) => h.component_mul(x),
            Quadratic::Dense(h) => *h * x,
        }
    }

    fn matrix(&self) -> DMatrix<f64> {
        match self {
            Quadratic::Diagonal(h) => DMatrix::from_diagonal(h),
            Quadratic::Dense(h) => (*h).clone(),
        }
    }
}

pub(crate) struct HingeQpSolution {
    pub theta: DVector<f64>,
    pub iterations: usize,
}

const MAX_ITER: usize = 200;
const STEP_FRACTION: f64 = 0.99;

fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(1.0, f64::min)
}

struct Direction {
    theta: DVector<f64>,
    xi: DVector<f64>,
    g: DVector<f64>,
    o: DVector<f64>,
    lam: DVector<f64>,
    mu: DVector<f64>,
    nu: DVector<f64>,
}

impl HingeQp<'_> {
    pub fn solve(&self, tol: f64) -> Result<HingeQpSolution> {
        let (m, n) = self.a.shape();
        let p = self.b.nrows();
        let c = self.c;
        let mut theta = DVector::<f64>::zeros(n);
        let mut xi = DVector::from_element(m, 1.0);
        let mut g = DVector::from_element(m, 1.0);
        let mut o = DVector::from_element(p, 1.0);
        let mut lam = c * 0.5;
        let mut mu = c * 0.5;
        let mut nu = DVector::from_element(p, 1.0);
        let count = (2 * m + p).max(1) as f64;
        let scale = 1.0 + c.amax() + self.linear.map_or(0.0, |f| f.amax());

        // best nearly optimal iterate, used if the residuals stall just
        // above the target
        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut stalled = 0;
        let mut iterations = MAX_ITER;
        for iter in 0..MAX_ITER {
            iterations = iter + 1;
            let at_lam = self.a.tr_mul(&lam);
            let bt_nu = self.b.tr_mul(&nu);
            let mut r_theta = self.h.apply(&theta) - at_lam - bt_nu;
            if let Some(f) = self.linear {
                r_theta += f;
            }
            let mut primal_obj = 0.5 * self.h.apply(&theta).dot(&theta) + c.dot(&xi);
            if let Some(f) = self.linear {
                primal_obj += f.dot(&theta);
            }
            if let Some((v, rho, v0)) = self.rank1 {
                let l = dot_compensated(v.as_slice(), theta.as_slice()) - v0;
                r_theta.axpy(rho * l, v, 1.0);
                primal_obj += 0.5 * rho * l * l;
            }
            let r_xi = c - &lam - &mu;
            let r_g = self.a * &theta + &xi - DVector::from_element(m, 1.0) - &g;
            let r_o = self.b * &theta - &o;
            let gap = lam.dot(&g) + mu.dot(&xi) + nu.dot(&o);
            let mu_avg = gap / count;

            let inf = |v: &DVector<f64>| v.amax();
            let feasible = inf(&r_theta) <= 1e-9 * scale
                && inf(&r_xi) <= 1e-9 * scale
                && inf(&r_g) <= 1e-9
                && (p == 0 || inf(&r_o) <= 1e-9);
            if inf(&r_g) <= 1e-9 && (p == 0 || inf(&r_o) <= 1e-9) && gap <= tol * (1.0 + primal_obj.abs()) {
                let merit = inf(&r_theta).max(inf(&r_xi)) / scale;
                if best.as_ref().is_none_or(|(m, _)| merit < *m) {
                    best = Some((merit, theta.clone()));
                    stalled = 0;
                } else {
                    stalled += 1;
                }
                if stalled >= 15 && best.as_ref().is_some_and(|(m, _)| *m <= 1e-6) {
                    break;
                }
            }
            if feasible && gap <= tol * (1.0 + primal_obj.abs()) {
                return Ok(HingeQpSolution {
                    theta,
                    iterations: iter,
                });
            }

            let d1 = lam.component_div(&g);
            let d2 = mu.component_div(&xi);
            let d3 = nu.component_div(&o);
            let d12 = &d1 + &d2;
            let d_lam = d1.component_mul(&d2).component_div(&d12);
            let mut newton = self.h.matrix();
            let mut wa = self.a.clone();
            for (r, mut row) in wa.row_iter_mut().enumerate() {
                row *= d_lam[r];
            }
            newton += self.a.tr_mul(&wa);
            if p > 0 {
                let mut wb = self.b.clone();
                for (r, mut row) in wb.row_iter_mut().enumerate() {
                    row *= d3[r];
                }
                newton += self.b.tr_mul(&wb);
            }
            let rank1 = self.rank1.map(|(v, rho, _)| (v, rho));
            let solver = factor(newton.clone(), rank1)?;
            let apply = |x: &DVector<f64>| {
                let mut y = &newton * x;
                if let Some((v, rho)) = rank1 {
                    y.axpy(rho * dot_compensated(v.as_slice(), x.as_slice()), v, 1.0);
                }
                y
            };

            let solve_dir = |rc1: &DVector<f64>, rc2: &DVector<f64>, rc3: &DVector<f64>| {
                let rc1_g = rc1.component_div(&g);
                let rc2_xi = rc2.component_div(&xi);
                let rc3_o = rc3.component_div(&o);
                let a_xi = (-&r_xi - &rc1_g - &rc2_xi - d1.component_mul(&r_g)).component_div(&d12);
                let b_lam = -&rc1_g - d1.component_mul(&(&r_g + &a_xi));
                let rhs = -&r_theta + self.a.tr_mul(&b_lam)
                    - self.b.tr_mul(&(&rc3_o + d3.component_mul(&r_o)));
                let mut d_theta = solver.solve(&rhs);
                // iterative refinement; the barrier terms make the system
                // badly scaled near the end
                for _ in 0..2 {
                    let res = &rhs - apply(&d_theta);
                    d_theta += solver.solve(&res);
                }
                let a_dt = self.a * &d_theta;
                let b_dt = self.b * &d_theta;
                let d_xi = &a_xi - d1.component_div(&d12).component_mul(&a_dt);
                let d_lam_v = &b_lam - d_lam.component_mul(&a_dt);
                let d_g = &a_dt + &d_xi + &r_g;
                let d_mu = -&rc2_xi - d2.component_mul(&d_xi);
                let d_o = &b_dt + &r_o;
                let d_nu = -&rc3_o - d3.component_mul(&d_o);
                Direction {
                    theta: d_theta,
                    xi: d_xi,
                    g: d_g,
                    o: d_o,
                    lam: d_lam_v,
                    mu: d_mu,
                    nu: d_nu,
                }
            };
            let step_of = |d: &Direction| {
                [
                    max_step(&xi, &d.xi),
                    max_step(&g, &d.g),
                    max_step(&o, &d.o),
                    max_step(&lam, &d.lam),
                    max_step(&mu, &d.mu),
                    max_step(&nu, &d.nu),
                ]
                .into_iter()
                .fold(1.0, f64::min)
            };

            // predictor
            let rc1 = lam.component_mul(&g);
            let rc2 = mu.component_mul(&xi);
            let rc3 = nu.component_mul(&o);
            let aff = solve_dir(&rc1, &rc2, &rc3);
            let a_aff = step_of(&aff);
            let gap_aff = (&lam + &aff.lam * a_aff).dot(&(&g + &aff.g * a_aff))
                + (&mu + &aff.mu * a_aff).dot(&(&xi + &aff.xi * a_aff))
                + (&nu + &aff.nu * a_aff).dot(&(&o + &aff.o * a_aff));
            let sigma = (gap_aff / gap).powi(3).clamp(0.0, 1.0);
            // never aim below the requested gap: hugging the boundary before
            // the residuals vanish ruins the conditioning of later steps
            let floor = 0.1 * tol * (1.0 + primal_obj.abs()) / count;
            let target = (sigma * mu_avg).max(floor);

            // corrector
            let rc1 = rc1 + aff.lam.component_mul(&aff.g) - DVector::from_element(m, target);
            let rc2 = rc2 + aff.mu.component_mul(&aff.xi) - DVector::from_element(m, target);
            let rc3 = rc3 + aff.nu.component_mul(&aff.o) - DVector::from_element(p, target);
            let dir = solve_dir(&rc1, &rc2, &rc3);
            let step = (STEP_FRACTION * step_of(&dir)).min(1.0);

            theta += &dir.theta * step;
            xi += &dir.xi * step;
            g += &dir.g * step;
            o += &dir.o * step;
            lam += &dir.lam * step;
            mu += &dir.mu * step;
            nu += &dir.nu * step;
        }
        match best {
            Some((merit, theta)) if merit <= 1e-6 => Ok(HingeQpSolution { theta, iterations }),
            _ => Err(Error::NoConvergence {
                iterations: MAX_ITER,
            }),
        }
    }
}

enum Base {
    Chol(Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Base {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Base::Chol(c) => c.solve(rhs),
            Base::Lu(lu) => lu.solve(rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
        }
    }
}

/// Factorization of `N + rho v v^T`; the rank-1 part is applied by
/// Sherman-Morrison so a huge `rho` never enters the factored matrix.
struct Factor {
    base: Base,
    rank1: Option<(DVector<f64>, f64, f64)>,
}

impl Factor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let x = self.base.solve(rhs);
        match &self.rank1 {
            None => x,
            Some((nv, vnv, rho)) => {
                let coef = rho * nv.dot(rhs) / (1.0 + rho * vnv);
                x - nv * coef
            }
        }
    }
}

fn factor(m: DMatrix<f64>, rank1: Option<(&DVector<f64>, f64)>) -> Result<Factor> {
    let base = factor_base(m)?;
    let rank1 = rank1.map(|(v, rho)| {
        let nv = base.solve(v);
        let vnv = v.dot(&nv);
        (nv, vnv, rho)
    });
    Ok(Factor { base, rank1 })
}

fn factor_base(mut m: DMatrix<f64>) -> Result<Base> {
    m = (&m + m.transpose()) * 0.5;
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(Base::Chol(c));
    }
    let bump = 1e-14 * m.diagonal().amax().max(1.0);
    for i in 0..m.nrows() {
        m[(i, i)] += bump;
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(Base::Chol(c));
    }
    let lu = m.lu();
    if lu.is_invertible() {
        Ok(Base::Lu(lu))
    } else {
        Err(Error::DegenerateSolution("singular interior-point system".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp<'a>(
        h: &'a DVector<f64>,
        a: &'a DMatrix<f64>,
        b: &'a DMatrix<f64>,
        c: &'a DVector<f64>,
    ) -> HingeQp<'a> {
        HingeQp {
            h: Quadratic::Diagonal(h),
            linear: None,
            rank1: None,
            a,
            b,
            c,
        }
    }

    #[test]
    fn rank1_and_linear_terms() {
        // min 1/2 |t|^2 - t_0 + 50 (t_0 + t_1 - 0)^2 + 100 max(0, 1 - t_1)
        let h = DVector::from_element(2, 1.0);
        let f = DVector::from_vec(vec![-1.0, 0.0]);
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let b = DMatrix::zeros(0, 2);
        let c = DVector::from_element(1, 100.0);
        let sol = HingeQp {
            h: Quadratic::Diagonal(&h),
            linear: Some(&f),
            rank1: Some((&v, 100.0, 0.0)),
            a: &a,
            b: &b,
            c: &c,
        }
        .solve(1e-12)
        .unwrap();
        // stationarity with t_1 = 1 on the kink: t_0 - 1 + 100 (t_0 + 1) = 0
        let t0 = -99.0 / 101.0;
        assert!((sol.theta[0] - t0).abs() < 1e-7, "{}", sol.theta);
        assert!((sol.theta[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn one_dimensional_hinge() {
        // min 1/2 t^2 + c * max(0, 1 - t): optimum t = min(1, c)
        for (c, expect) in [(0.25, 0.25), (3.0, 1.0)] {
            let h = DVector::from_element(1, 1.0);
            let a = DMatrix::from_element(1, 1, 1.0);
            let b = DMatrix::zeros(0, 1);
            let cost = DVector::from_element(1, c);
            let sol = qp(&h, &a, &b, &cost).solve(1e-12).unwrap();
            assert!((sol.theta[0] - expect).abs() < 1e-8, "{}", sol.theta[0]);
        }
    }

    #[test]
    fn ordering_constraint_binds() {
        // pull theta_0 up and theta_1 down; B forces theta_1 >= theta_0
        let h = DVector::from_element(2, 1.0);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let cost = DVector::from_element(2, 10.0);
        let sol = qp(&h, &a, &b, &cost).solve(1e-12).unwrap();
        assert!(sol.theta[1] - sol.theta[0] >= -1e-9);
        assert!((sol.theta[0] - sol.theta[1]).abs() < 1e-7);
    }
}
