//! Effective settings: command-line flag, then config file, then default.

use std::path::Path;

use orthojoint::eval::GridSpec;
use orthojoint::kernels::{default_rbf_gamma, KernelSpec};
use orthojoint::{Dataset, OrdinalMethod, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Keys accepted in a TOML config file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub kernel: Option<String>,
    pub gamma: Option<f64>,
    pub ordinal: Option<String>,
    pub seed: Option<u64>,
    pub per_class_train: Option<usize>,
    pub folds: Option<usize>,
    pub max_outer_iters: Option<usize>,
    pub outer_tol: Option<f64>,
    pub inner_tol: Option<f64>,
    pub scatter_ridge: Option<f64>,
    pub lambda1_grid: Option<Vec<f64>>,
    pub lambda2_grid: Option<Vec<f64>>,
    pub lambda3_grid: Option<Vec<f64>>,
    pub gender_col: Option<String>,
    pub age_col: Option<String>,
    pub n_per_cell: Option<usize>,
    pub n_classes: Option<usize>,
    pub dim: Option<usize>,
    pub axis_angle_deg: Option<f64>,
    pub gender_gap: Option<f64>,
    pub age_step: Option<f64>,
    pub noise_sigma: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::new("Config", format!("{}: {}", path.display(), e.message())))
    }
}

/// How the `--kernel` value maps onto a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    /// Primal linear model.
    Linear,
    /// Linear kernel in representer form.
    LinearGram,
    Rbf,
}

impl std::str::FromStr for KernelChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(KernelChoice::Linear),
            "linear-gram" => Ok(KernelChoice::LinearGram),
            "rbf" => Ok(KernelChoice::Rbf),
            other => Err(CliError::new("InvalidConfig", format!("unknown kernel {other:?}"))),
        }
    }
}

/// Training flags shared by `train` and `gridsearch`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// linear, linear-gram or rbf.
    #[arg(long)]
    pub kernel: Option<String>,
    /// RBF width; defaults to 1 / (D * variance of the training features).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// kdlor or svor.
    #[arg(long)]
    pub ordinal: Option<String>,
    #[arg(long)]
    pub max_outer_iters: Option<usize>,
    #[arg(long)]
    pub scatter_ridge: Option<f64>,
}

/// Resolves the training configuration. The default kernel width is
/// computed from `train`.
pub fn train_config(flags: &TrainFlags, file: &FileConfig, train: &Dataset) -> Result<TrainConfig, CliError> {
    let def = TrainConfig::default();
    let kernel: KernelChoice = flags
        .kernel
        .clone()
        .or_else(|| file.kernel.clone())
        .unwrap_or_else(|| "linear".into())
        .parse()?;
    let gamma = flags.gamma.or(file.gamma);
    if gamma.is_some() && kernel != KernelChoice::Rbf {
        return Err(CliError::new("InvalidConfig", "gamma only applies to the rbf kernel"));
    }
    let kernel = match kernel {
        KernelChoice::Linear => None,
        KernelChoice::LinearGram => Some(KernelSpec::Linear),
        KernelChoice::Rbf => Some(KernelSpec::Rbf {
            gamma: gamma.unwrap_or_else(|| default_rbf_gamma(train.features())),
        }),
    };
    let ordinal_method = match flags.ordinal.clone().or_else(|| file.ordinal.clone()) {
        Some(s) => s.parse::<OrdinalMethod>()?,
        None => def.ordinal_method,
    };
    let cfg = TrainConfig {
        lambda1: flags.lambda1.or(file.lambda1).unwrap_or(def.lambda1),
        lambda2: flags.lambda2.or(file.lambda2).unwrap_or(def.lambda2),
        lambda3: flags.lambda3.or(file.lambda3).unwrap_or(def.lambda3),
        kernel,
        ordinal_method,
        max_outer_iters: flags.max_outer_iters.or(file.max_outer_iters).unwrap_or(def.max_outer_iters),
        outer_tol: file.outer_tol.unwrap_or(def.outer_tol),
        inner_tol: file.inner_tol.unwrap_or(def.inner_tol),
        scatter_ridge: flags.scatter_ridge.or(file.scatter_ridge),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Comma-separated list of numbers.
pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::new("InvalidConfig", format!("cannot parse {t:?} as a number")))
        })
        .collect()
}

pub fn grid(l1: Option<&str>, l2: Option<&str>, l3: Option<&str>, file: &FileConfig, base: &TrainConfig) -> Result<GridSpec, CliError> {
    let pick = |flag: Option<&str>, from_file: &Option<Vec<f64>>, default: Vec<f64>| -> Result<Vec<f64>, CliError> {
        match flag {
            Some(s) => parse_list(s),
            None => Ok(from_file.clone().unwrap_or(default)),
        }
    };
    Ok(GridSpec {
        lambda1: pick(l1, &file.lambda1_grid, vec![base.lambda1])?,
        lambda2: pick(l2, &file.lambda2_grid, vec![base.lambda2])?,
        lambda3: pick(l3, &file.lambda3_grid, vec![1e0, 1e3, 1e6, 1e9])?,
    })
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub n_per_cell: Option<usize>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub axis_angle_deg: Option<f64>,
    #[arg(long)]
    pub gender_gap: Option<f64>,
    #[arg(long)]
    pub age_step: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

pub fn synth_spec(flags: &SynthFlags, seed: Option<u64>, file: &FileConfig) -> SyntheticSpec {
    let def = SyntheticSpec::default();
    SyntheticSpec {
        n_per_cell: flags.n_per_cell.or(file.n_per_cell).unwrap_or(def.n_per_cell),
        n_classes: flags.n_classes.or(file.n_classes).unwrap_or(def.n_classes),
        dim: flags.dim.or(file.dim).unwrap_or(def.dim),
        axis_angle_deg: flags.axis_angle_deg.or(file.axis_angle_deg).unwrap_or(def.axis_angle_deg),
        gender_gap: flags.gender_gap.or(file.gender_gap).unwrap_or(def.gender_gap),
        age_step: flags.age_step.or(file.age_step).unwrap_or(def.age_step),
        noise_sigma: flags.noise_sigma.or(file.noise_sigma).unwrap_or(def.noise_sigma),
        seed: seed.or(file.seed).unwrap_or(def.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use orthojoint::{generate_synthetic, SyntheticSpec};

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list("1, 1e3,0").unwrap(), vec![1.0, 1e3, 0.0]);
        assert!(parse_list("1,,2").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let d = generate_synthetic(&SyntheticSpec {
            n_per_cell: 2,
            n_classes: 3,
            dim: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let file: FileConfig = toml::from_str("lambda1 = 3.0\nlambda2 = 4.0\nkernel = \"rbf\"\ngamma = 0.5").unwrap();
        let flags = TrainFlags {
            lambda2: Some(7.0),
            ..TrainFlags::default()
        };
        let cfg = train_config(&flags, &file, &d).unwrap();
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.lambda3), (3.0, 7.0, 1e6));
        assert_eq!(cfg.kernel, Some(KernelSpec::Rbf { gamma: 0.5 }));
        let linear = TrainFlags {
            kernel: Some("linear".into()),
            ..TrainFlags::default()
        };
        assert!(train_config(&linear, &file, &d).is_err());
        let cfg = train_config(&TrainFlags::default(), &FileConfig::default(), &d).unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn grid_defaults_follow_base() {
        let base = TrainConfig {
            lambda1: 2.0,
            ..TrainConfig::default()
        };
        let g = grid(None, Some("1,2"), None, &FileConfig::default(), &base).unwrap();
        assert_eq!(g.lambda1, vec![2.0]);
        assert_eq!(g.lambda2, vec![1.0, 2.0]);
        assert_eq!(g.lambda3, vec![1e0, 1e3, 1e6, 1e9]);
    }
}
