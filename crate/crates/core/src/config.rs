use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// Which ordinal regressor is paired with the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrdinalMethod {
    /// Discriminant learning: small within-class scatter, ordered class means.
    Kdlor,
    /// Support vector ordinal regression with explicit ordered thresholds.
    Svor,
}

impl std::str::FromStr for OrdinalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kdlor" => Ok(OrdinalMethod::Kdlor),
            "svor" => Ok(OrdinalMethod::Svor),
            other => Err(Error::InvalidConfig(format!("unknown ordinal method {other:?}"))),
        }
    }
}

impl std::fmt::Display for OrdinalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrdinalMethod::Kdlor => write!(f, "kdlor"),
            OrdinalMethod::Svor => write!(f, "svor"),
        }
    }
}

/// Hyper-parameters and solver controls for joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hinge-loss weight of the binary classifier.
    pub lambda1: f64,
    /// Loss / margin weight of the ordinal regressor.
    pub lambda2: f64,
    /// Strength of the `(w_g . w_a)^2` coupling.
    pub lambda3: f64,
    /// `None` trains primal linear models; `Some` trains in representer form.
    pub kernel: Option<KernelSpec>,
    pub ordinal_method: OrdinalMethod,
    pub max_outer_iters: usize,
    /// Relative change of the total objective that stops the alternation.
    pub outer_tol: f64,
    /// Tolerance handed to each subproblem solver.
    pub inner_tol: f64,
    /// Ridge added to the discriminant quadratic form. `None` picks
    /// `1e-6 * trace(S_w) / D` from the training data.
    pub scatter_ridge: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1e6,
            kernel: None,
            ordinal_method: OrdinalMethod::Svor,
            max_outer_iters: 10,
            outer_tol: 1e-4,
            inner_tol: 1e-8,
            scatter_ridge: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_outer_iters < 1 {
            return Err(Error::InvalidConfig("max_outer_iters must be >= 1".into()));
        }
        if let Some(r) = self.scatter_ridge {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::InvalidConfig(format!("scatter_ridge must be >= 0, got {r}")));
            }
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        Ok(())
    }
}
