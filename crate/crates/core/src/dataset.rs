//! Training data: a feature matrix with a binary label and an ordinal label
//! per row.
//!
//! Ordinal classes are dense indices `1..=K`. Raw ages are mapped to indices
//! by the rank of their sorted unique values and the inverse map is kept in
//! [`LabelMaps`] so errors can be reported in original units.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mapping between dense label codes and the values they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMaps {
    /// `ages[k - 1]` is the original age of ordinal class `k`.
    pub ages: Vec<f64>,
    /// Raw value encoded as -1.
    pub gender_negative: String,
    /// Raw value encoded as +1.
    pub gender_positive: String,
}

impl LabelMaps {
    /// Identity maps: class `k` has age `k`, genders print as `-1` / `1`.
    pub fn identity(n_classes: usize) -> Self {
        LabelMaps {
            ages: (1..=n_classes).map(|k| k as f64).collect(),
            gender_negative: "-1".to_string(),
            gender_positive: "1".to_string(),
        }
    }

    pub fn age_of(&self, class: usize) -> f64 {
        self.ages[class - 1]
    }

    pub fn class_of_age(&self, age: f64) -> Option<usize> {
        self.ages.iter().position(|&a| a == age).map(|i| i + 1)
    }

    pub fn gender_name(&self, code: i8) -> &str {
        if code < 0 {
            &self.gender_negative
        } else {
            &self.gender_positive
        }
    }

    pub fn gender_code(&self, raw: &str) -> Option<i8> {
        if raw == self.gender_negative {
            Some(-1)
        } else if raw == self.gender_positive {
            Some(1)
        } else {
            None
        }
    }
}

/// Validated training set. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    genders: Vec<i8>,
    classes: Vec<usize>,
    n_classes: usize,
    maps: LabelMaps,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        genders: Vec<i8>,
        classes: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let maps = LabelMaps::identity(n_classes);
        Self::with_maps(features, genders, classes, n_classes, maps)
    }

    pub fn with_maps(
        features: DMatrix<f64>,
        genders: Vec<i8>,
        classes: Vec<usize>,
        n_classes: usize,
        maps: LabelMaps,
    ) -> Result<Self> {
        validate_parts(&features, &genders, &classes, n_classes)?;
        if maps.ages.len() != n_classes {
            return Err(Error::ShapeMismatch(format!(
                "age map has {} entries for {} classes",
                maps.ages.len(),
                n_classes
            )));
        }
        Ok(Dataset {
            features,
            genders,
            classes,
            n_classes,
            maps,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn genders(&self) -> &[i8] {
        &self.genders
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn maps(&self) -> &LabelMaps {
        &self.maps
    }

    /// Ages of every row in original units.
    pub fn ages(&self) -> Vec<f64> {
        self.classes.iter().map(|&k| self.maps.age_of(k)).collect()
    }

    /// Number of rows in each class, indexed by `class - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &k in &self.classes {
            counts[k - 1] += 1;
        }
        counts
    }

    /// Rows selected by `indices`, validated as a dataset of its own with the
    /// same class count and label maps.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, genders, classes) = self.select(indices);
        Dataset::with_maps(features, genders, classes, self.n_classes, self.maps.clone())
    }

    pub(crate) fn select(&self, indices: &[usize]) -> (DMatrix<f64>, Vec<i8>, Vec<usize>) {
        let features = self.features.select_rows(indices);
        let genders = indices.iter().map(|&i| self.genders[i]).collect();
        let classes = indices.iter().map(|&i| self.classes[i]).collect();
        (features, genders, classes)
    }
}

/// Checks every dataset invariant.
pub fn validate_dataset(d: &Dataset) -> Result<()> {
    validate_parts(&d.features, &d.genders, &d.classes, d.n_classes)
}

pub(crate) fn validate_parts(
    features: &DMatrix<f64>,
    genders: &[i8],
    classes: &[usize],
    n_classes: usize,
) -> Result<()> {
    let n = features.nrows();
    if genders.len() != n || classes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows, {} binary labels, {} ordinal labels",
            n,
            genders.len(),
            classes.len()
        )));
    }
    if n < 2 {
        return Err(Error::TooSmall(format!("{n} samples, need at least 2")));
    }
    if features.ncols() < 1 {
        return Err(Error::TooSmall("no feature columns".into()));
    }
    if n_classes < 2 {
        return Err(Error::TooSmall(format!(
            "{n_classes} ordinal classes, need at least 2"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("features contain non-finite values".into()));
    }
    if let Some(&g) = genders.iter().find(|&&g| g != 1 && g != -1) {
        return Err(Error::InvalidBinaryLabel(g as i64));
    }
    if let Some(&k) = classes.iter().find(|&&k| k == 0 || k > n_classes) {
        return Err(Error::LabelOutOfRange {
            label: k,
            n_classes,
        });
    }
    let mut seen = vec![false; n_classes];
    for &k in classes {
        seen[k - 1] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::EmptyClass(missing + 1));
    }
    let has_neg = genders.contains(&-1);
    let has_pos = genders.contains(&1);
    if !(has_neg && has_pos) {
        return Err(Error::SingleGender);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feats(n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |i, j| (i * d + j) as f64)
    }

    #[test]
    fn accepts_valid_four_sample_set() {
        let d = Dataset::new(feats(4, 2), vec![-1, 1, -1, 1], vec![1, 1, 2, 2], 2).unwrap();
        assert!(validate_dataset(&d).is_ok());
        assert_eq!(d.class_counts(), vec![2, 2]);
    }

    #[test]
    fn missing_top_class_is_reported() {
        let err = Dataset::new(feats(3, 1), vec![-1, 1, 1], vec![1, 1, 2], 3).unwrap_err();
        assert_eq!(err, Error::EmptyClass(3));
    }

    #[test]
    fn single_gender_is_reported() {
        let err = Dataset::new(feats(4, 1), vec![1; 4], vec![1, 1, 2, 2], 2).unwrap_err();
        assert_eq!(err, Error::SingleGender);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let err = Dataset::new(feats(4, 1), vec![1, -1, 1], vec![1, 1, 2, 2], 2).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn subset_keeps_maps() {
        let mut maps = LabelMaps::identity(2);
        maps.ages = vec![20.0, 30.0];
        let d = Dataset::with_maps(feats(4, 1), vec![-1, 1, -1, 1], vec![1, 1, 2, 2], 2, maps)
            .unwrap();
        let s = d.subset(&[0, 1, 2, 3]).unwrap();
        assert_eq!(s.ages(), vec![20.0, 20.0, 30.0, 30.0]);
    }

    #[derive(Debug, Clone, Copy)]
    enum Fault {
        None,
        DropClass,
        OneGender,
        ShortLabels,
    }

    proptest! {
        // A dataset that breaks exactly one invariant yields exactly that error.
        #[test]
        fn single_fault_maps_to_its_error(
            k in 2usize..6,
            per_class in 1usize..4,
            d in 1usize..4,
            fault_id in 0usize..4,
            drop in 0usize..6,
        ) {
            let fault = [Fault::None, Fault::DropClass, Fault::OneGender, Fault::ShortLabels][fault_id];
            let mut classes = Vec::new();
            for c in 1..=k {
                for _ in 0..per_class.max(2) {
                    classes.push(c);
                }
            }
            let dropped = drop % k + 1;
            if let Fault::DropClass = fault {
                classes.retain(|&c| c != dropped);
            }
            let n = classes.len();
            let mut genders: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
            if let Fault::OneGender = fault {
                genders.iter_mut().for_each(|g| *g = 1);
            }
            if let Fault::ShortLabels = fault {
                genders.pop();
            }
            let res = Dataset::new(feats(n, d), genders, classes, k);
            match fault {
                Fault::None => prop_assert!(res.is_ok()),
                Fault::DropClass => prop_assert_eq!(res.unwrap_err(), Error::EmptyClass(dropped)),
                Fault::OneGender => prop_assert_eq!(res.unwrap_err(), Error::SingleGender),
                Fault::ShortLabels => prop_assert!(matches!(res.unwrap_err(), Error::ShapeMismatch(_))),
            }
        }
    }
}
