//! Metrics, stratified splitting, cross-validation and the hyper-parameter
//! grid search.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::{Dataset, LabelMaps};
use crate::error::{Error, Result};
use crate::joint::{train_joint, JointModel};

/// Scores of a model on a labelled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub gender_accuracy: f64,
    /// Mean absolute age error in original age units.
    pub age_mae: f64,
    pub cos_angle: f64,
    /// `confusion[t][p]` counts rows of true class `t + 1` predicted as `p + 1`.
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[i8], truth: &[i8]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `(1/N) sum |pred_i - truth_i|`.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// Scores `model` on `d`; ages are read through the label maps of `d`.
pub fn evaluate(model: &JointModel, d: &Dataset) -> Result<EvalResult> {
    evaluate_labeled(model, d.features(), d.genders(), d.classes(), d.maps())
}

/// Scores `model` on rows that need not cover every class. `classes` are
/// indices into `maps`, which must describe the model's classes.
pub fn evaluate_labeled(
    model: &JointModel,
    x: &DMatrix<f64>,
    genders: &[i8],
    classes: &[usize],
    maps: &LabelMaps,
) -> Result<EvalResult> {
    let k = model.n_classes();
    if maps.ages.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "model has {k} ordinal classes, age map has {}",
            maps.ages.len()
        )));
    }
    check_lengths(genders.len(), x.nrows())?;
    check_lengths(classes.len(), x.nrows())?;
    if let Some(&c) = classes.iter().find(|&&c| c == 0 || c > k) {
        return Err(Error::LabelOutOfRange { label: c, n_classes: k });
    }
    let pred_genders = model.predict_gender(x)?;
    let pred_classes = model.predict_class(x)?;
    let pred_ages: Vec<f64> = pred_classes.iter().map(|&c| maps.age_of(c)).collect();
    let true_ages: Vec<f64> = classes.iter().map(|&c| maps.age_of(c)).collect();
    let mut confusion = vec![vec![0; k]; k];
    for (&t, &p) in classes.iter().zip(&pred_classes) {
        confusion[t - 1][p - 1] += 1;
    }
    Ok(EvalResult {
        gender_accuracy: accuracy(&pred_genders, genders)?,
        age_mae: mae(&pred_ages, &true_ages)?,
        cos_angle: model.cos_angle()?,
        confusion,
        n_samples: x.nrows(),
    })
}

/// Row indices grouped by (class, gender), in row order.
fn cells(d: &Dataset) -> BTreeMap<(usize, i8), Vec<usize>> {
    let mut out: BTreeMap<(usize, i8), Vec<usize>> = BTreeMap::new();
    for (i, (&k, &g)) in d.classes().iter().zip(d.genders()).enumerate() {
        out.entry((k, g)).or_default().push(i);
    }
    out
}

/// Index form of [`stratified_split`]: sorted train and test row indices.
pub fn stratified_split_indices(d: &Dataset, per_class_train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if per_class_train == 0 {
        return Err(Error::InvalidConfig("per_class_train must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((class, gender), mut rows) in cells(d) {
        if rows.len() <= per_class_train {
            return Err(Error::InsufficientSamples { class, gender });
        }
        rows.shuffle(&mut rng);
        train.extend_from_slice(&rows[..per_class_train]);
        test.extend_from_slice(&rows[per_class_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Draws `per_class_train` rows of every (class, gender) cell for training;
/// the rest is the test set. Both keep the original row order.
pub fn stratified_split(d: &Dataset, per_class_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = stratified_split_indices(d, per_class_train, seed)?;
    Ok((d.subset(&train)?, d.subset(&test)?))
}

/// Validation row indices of each fold. Every (class, gender) cell is
/// shuffled and dealt round-robin, continuing from the fold where the
/// previous cell stopped so fold sizes differ by at most one.
pub fn stratified_folds(d: &Dataset, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if d.n_samples() < folds {
        return Err(Error::TooSmall(format!("{} rows for {folds} folds", d.n_samples())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for (_, mut rows) in cells(d) {
        rows.shuffle(&mut rng);
        for r in rows {
            out[next].push(r);
            next = (next + 1) % folds;
        }
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// Candidate values for each weight. The grid is their Cartesian product,
/// enumerated with `lambda3` varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
}

impl GridSpec {
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &l1 in &self.lambda1 {
            for &l2 in &self.lambda2 {
                for &l3 in &self.lambda3 {
                    out.push((l1, l2, l3));
                }
            }
        }
        out
    }
}

/// One (configuration, fold) cell of the score table. Failed cells carry
/// the error and NaN scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub fold: usize,
    pub acc: f64,
    pub mae: f64,
    pub cos_angle: f64,
    pub error: Option<String>,
}

/// Mean fold scores of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mean_acc: f64,
    pub mean_mae: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TrainConfig,
    pub best_score: ConfigScore,
    pub summary: Vec<ConfigScore>,
    pub rows: Vec<ScoreRow>,
}

const TIE_TOL: f64 = 1e-12;

/// `true` if `a` is preferred over `b`: lower MAE, then higher accuracy,
/// then smaller `lambda3`.
fn better(a: &ConfigScore, b: &ConfigScore) -> bool {
    if (a.mean_mae - b.mean_mae).abs() > TIE_TOL {
        return a.mean_mae < b.mean_mae;
    }
    if (a.mean_acc - b.mean_acc).abs() > TIE_TOL {
        return a.mean_acc > b.mean_acc;
    }
    a.lambda3 < b.lambda3
}

fn score_fold(d: &Dataset, cfg: &TrainConfig, train: &[usize], valid: &[usize]) -> Result<(f64, f64, f64)> {
    let (model, _) = train_joint(&d.subset(train)?, cfg)?;
    let r = evaluate(&model, &d.subset(valid)?)?;
    Ok((r.gender_accuracy, r.age_mae, r.cos_angle))
}

/// K-fold cross-validated search over `grid`, every other setting taken
/// from `base`. Training failures mark their cell instead of aborting;
/// a configuration with any failed fold is never selected.
pub fn grid_search(d: &Dataset, base: &TrainConfig, grid: &GridSpec, folds: usize, seed: u64) -> Result<GridResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidConfig("empty hyper-parameter grid".into()));
    }
    for &(l1, l2, l3) in &points {
        TrainConfig {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            ..base.clone()
        }
        .validate()?;
    }
    let fold_rows = stratified_folds(d, folds, seed)?;
    let trains: Vec<Vec<usize>> = (0..folds)
        .map(|f| {
            let mut t: Vec<usize> = fold_rows.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, r)| r.iter().copied()).collect();
            t.sort_unstable();
            t
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..folds).map(move |f| (p, f))).collect();
    let rows: Vec<ScoreRow> = jobs
        .par_iter()
        .map(|&(p, f)| {
            let (l1, l2, l3) = points[p];
            let cfg = TrainConfig {
                lambda1: l1,
                lambda2: l2,
                lambda3: l3,
                ..base.clone()
            };
            let (acc, mae, cos_angle, error) = match score_fold(d, &cfg, &trains[f], &fold_rows[f]) {
                Ok((a, m, c)) => (a, m, c, None),
                Err(e) => (f64::NAN, f64::NAN, f64::NAN, Some(format!("{}: {e}", e.kind()))),
            };
            ScoreRow {
                lambda1: l1,
                lambda2: l2,
                lambda3: l3,
                fold: f,
                acc,
                mae,
                cos_angle,
                error,
            }
        })
        .collect();

    let summary: Vec<ConfigScore> = points
        .iter()
        .enumerate()
        .map(|(p, &(l1, l2, l3))| {
            let cell = &rows[p * folds..(p + 1) * folds];
            let failed = cell.iter().any(|r| r.error.is_some());
            let mean = |f: fn(&ScoreRow) -> f64| cell.iter().map(f).sum::<f64>() / folds as f64;
            ConfigScore {
                lambda1: l1,
                lambda2: l2,
                lambda3: l3,
                mean_acc: if failed { f64::NAN } else { mean(|r| r.acc) },
                mean_mae: if failed { f64::NAN } else { mean(|r| r.mae) },
                failed,
            }
        })
        .collect();
    let mut best: Option<&ConfigScore> = None;
    for s in summary.iter().filter(|s| !s.failed) {
        if best.is_none_or(|b| better(s, b)) {
            best = Some(s);
        }
    }
    let Some(best) = best.cloned() else {
        let first = rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::DegenerateSolution(format!("every grid point failed; first error: {first}")));
    };
    Ok(GridResult {
        best: TrainConfig {
            lambda1: best.lambda1,
            lambda2: best.lambda2,
            lambda3: best.lambda3,
            ..base.clone()
        },
        best_score: best,
        summary,
        rows,
    })
}

/// Score table as CSV with columns `lambda1,lambda2,lambda3,fold,acc,mae,cos_angle`.
/// Failed cells are written as NaN.
pub fn write_score_table<W: Write>(rows: &[ScoreRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda1", "lambda2", "lambda3", "fold", "acc", "mae", "cos_angle"])?;
    for r in rows {
        w.write_record([
            format!("{:e}", r.lambda1),
            format!("{:e}", r.lambda2),
            format!("{:e}", r.lambda3),
            r.fold.to_string(),
            format!("{:.16e}", r.acc),
            format!("{:.16e}", r.mae),
            format!("{:.16e}", r.cos_angle),
        ])?;
    }
    w.flush()?;
    Ok(())
}
