//! Synthetic benchmark with a known gender axis and a known age axis.
//!
//! Each sample is `s * gap/2 * g + k * step * a + noise`, where `s` is the
//! gender sign, `k` the ordinal class, `g = e_1` and `a` the unit vector in
//! the first coordinate plane at `axis_angle_deg` from `g`. Every coordinate
//! carries independent Gaussian noise.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Samples per (class, gender) cell.
    pub n_per_cell: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub axis_angle_deg: f64,
    pub gender_gap: f64,
    pub age_step: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_per_cell: 10,
            n_classes: 10,
            dim: 10,
            axis_angle_deg: 90.0,
            gender_gap: 2.0,
            age_step: 1.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.n_per_cell < 1 {
            return bad("n_per_cell must be >= 1".into());
        }
        if !(self.axis_angle_deg > 0.0 && self.axis_angle_deg <= 90.0) {
            return bad(format!("axis_angle_deg must be in (0, 90], got {}", self.axis_angle_deg));
        }
        if !(self.gender_gap > 0.0 && self.age_step > 0.0) {
            return bad("gender_gap and age_step must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Rows are ordered by class, then gender (-1 first), then draw.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let theta = spec.axis_angle_deg.to_radians();
    let (ca, sa) = (theta.cos(), theta.sin());
    let n = spec.n_classes * 2 * spec.n_per_cell;
    let mut x = DMatrix::<f64>::zeros(n, spec.dim);
    let mut genders = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    let mut row = 0;
    for k in 1..=spec.n_classes {
        for s in [-1i8, 1] {
            for _ in 0..spec.n_per_cell {
                let gpart = s as f64 * spec.gender_gap / 2.0;
                let apart = k as f64 * spec.age_step;
                for j in 0..spec.dim {
                    let base = match j {
                        0 => gpart + apart * ca,
                        1 => apart * sa,
                        _ => 0.0,
                    };
                    x[(row, j)] = base + noise.sample(&mut rng);
                }
                genders.push(s);
                classes.push(k);
                row += 1;
            }
        }
    }
    Dataset::new(x, genders, classes, spec.n_classes)
}
