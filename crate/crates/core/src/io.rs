//! CSV ingestion and export, and the persisted model format.
//!
//! CSV files are comma separated with a header row. Binary labels may be any
//! two distinct strings: if both parse as numbers the smaller one becomes -1,
//! otherwise the lexicographically smaller one does. Ages become ordinal
//! classes by the rank of their sorted unique values.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{OrdinalMethod, TrainConfig};
use crate::dataset::{Dataset, LabelMaps};
use crate::error::{Error, Result};
use crate::joint::{FitReport, JointKernelModel, JointLinearModel, JointModel};
use crate::kernels::KernelSpec;

/// Raw contents of a CSV file: header names and string cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(BufReader::new(file));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Indices of the feature columns: the named ones, or every column not
    /// listed in `exclude`.
    fn feature_columns(&self, names: Option<&[String]>, exclude: &[&str]) -> Result<Vec<usize>> {
        let cols = match names {
            Some(names) => names.iter().map(|n| self.column(n)).collect::<Result<Vec<_>>>()?,
            None => (0..self.header.len()).filter(|&j| !exclude.contains(&self.header[j].as_str())).collect(),
        };
        if cols.is_empty() {
            return Err(Error::TooSmall("no feature columns".into()));
        }
        Ok(cols)
    }

    /// 1-based data row numbers, so the header is row 0.
    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let raw = &self.rows[row][col];
        raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
            row: row + 1,
            col: self.header[col].clone(),
            value: raw.clone(),
        })
    }

    fn features(&self, cols: &[usize]) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(self.rows.len(), cols.len());
        for i in 0..self.rows.len() {
            for (j, &c) in cols.iter().enumerate() {
                x[(i, j)] = self.number(i, c)?;
            }
        }
        Ok(x)
    }

    fn ages(&self, col: usize) -> Result<Vec<f64>> {
        (0..self.rows.len()).map(|i| self.number(i, col)).collect()
    }
}

/// Orders two binary label values: numerically when both are numbers.
fn gender_order(values: &BTreeSet<String>) -> Result<(String, String)> {
    if values.len() != 2 {
        return Err(Error::NotBinary { found: values.len() });
    }
    let mut v: Vec<String> = values.iter().cloned().collect();
    if let (Ok(a), Ok(b)) = (v[0].parse::<f64>(), v[1].parse::<f64>()) {
        if b < a {
            v.swap(0, 1);
        }
    }
    let pos = v.pop().unwrap();
    Ok((v.pop().unwrap(), pos))
}

/// Reads a training set. `feature_cols = None` uses every column except the
/// two label columns.
pub fn load_csv(path: impl AsRef<Path>, feature_cols: Option<&[String]>, gender_col: &str, age_col: &str) -> Result<Dataset> {
    let t = read_table(path.as_ref())?;
    let gc = t.column(gender_col)?;
    let ac = t.column(age_col)?;
    let cols = t.feature_columns(feature_cols, &[gender_col, age_col])?;
    let x = t.features(&cols)?;
    let raw_ages = t.ages(ac)?;
    let values: BTreeSet<String> = t.rows.iter().map(|r| r[gc].clone()).collect();
    let (neg, pos) = gender_order(&values)?;
    let genders = t.rows.iter().map(|r| if r[gc] == neg { -1 } else { 1 }).collect();
    let mut ages = raw_ages.clone();
    ages.sort_by(f64::total_cmp);
    ages.dedup();
    let maps = LabelMaps {
        ages,
        gender_negative: neg,
        gender_positive: pos,
    };
    let classes = raw_ages.iter().map(|&a| maps.class_of_age(a).unwrap()).collect();
    let n_classes = maps.ages.len();
    Dataset::with_maps(x, genders, classes, n_classes, maps)
}

/// Labelled rows encoded with an existing model's maps. Unlike a
/// [`Dataset`] the rows need not cover every class or both labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRows {
    pub features: DMatrix<f64>,
    pub genders: Vec<i8>,
    pub classes: Vec<usize>,
}

pub fn load_labeled_csv(
    path: impl AsRef<Path>,
    feature_cols: Option<&[String]>,
    gender_col: &str,
    age_col: &str,
    maps: &LabelMaps,
) -> Result<LabeledRows> {
    let t = read_table(path.as_ref())?;
    let gc = t.column(gender_col)?;
    let ac = t.column(age_col)?;
    let cols = t.feature_columns(feature_cols, &[gender_col, age_col])?;
    let features = t.features(&cols)?;
    let genders = t
        .rows
        .iter()
        .map(|r| maps.gender_code(&r[gc]).ok_or_else(|| Error::UnknownLabel(r[gc].clone())))
        .collect::<Result<Vec<_>>>()?;
    let classes = t
        .ages(ac)?
        .into_iter()
        .map(|a| maps.class_of_age(a).ok_or_else(|| Error::UnknownLabel(format!("{a}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledRows {
        features,
        genders,
        classes,
    })
}

/// Feature matrix only; label columns, if present, are ignored.
pub fn load_features_csv(
    path: impl AsRef<Path>,
    feature_cols: Option<&[String]>,
    gender_col: &str,
    age_col: &str,
) -> Result<DMatrix<f64>> {
    let t = read_table(path.as_ref())?;
    let cols = t.feature_columns(feature_cols, &[gender_col, age_col])?;
    t.features(&cols)
}

/// 17 significant digits, enough to parse back bit-exactly.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header `f1..fD,gender,age`; labels are written through the maps.
pub fn write_dataset_csv<W: Write>(d: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=d.n_features()).map(|j| format!("f{j}")).collect();
    header.push("gender".into());
    header.push("age".into());
    w.write_record(&header)?;
    let x = d.features();
    for i in 0..d.n_samples() {
        let mut rec: Vec<String> = (0..d.n_features()).map(|j| num(x[(i, j)])).collect();
        rec.push(d.maps().gender_name(d.genders()[i]).to_string());
        rec.push(format!("{}", d.maps().age_of(d.classes()[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `row_id,gender_pred,age_pred`, labels in original units.
pub fn write_predictions_csv<W: Write>(genders: &[i8], classes: &[usize], maps: &LabelMaps, out: W) -> Result<()> {
    if genders.len() != classes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} binary and {} ordinal predictions",
            genders.len(),
            classes.len()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row_id", "gender_pred", "age_pred"])?;
    for (i, (&g, &k)) in genders.iter().zip(classes).enumerate() {
        w.write_record([i.to_string(), maps.gender_name(g).to_string(), format!("{}", maps.age_of(k))])?;
    }
    w.flush()?;
    Ok(())
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Linear,
    Kernel,
}

/// Numbers are stored as decimal strings with 17 significant digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParameters {
    /// `w_g` for linear models, `alpha` for kernel models.
    pub gender_weights: Vec<String>,
    pub gender_intercept: String,
    /// `w_a` for linear models, `beta` for kernel models.
    pub ordinal_weights: Vec<String>,
    pub thresholds: Vec<String>,
    /// Kernel models only: training rows, row-major.
    pub train_features: Option<Vec<Vec<String>>>,
    pub train_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMaps {
    pub ages: Vec<String>,
    pub gender_negative: String,
    pub gender_positive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub config: TrainConfig,
    pub seed: Option<u64>,
    /// Set when the model was trained on a stratified split of its input;
    /// with `seed` it identifies the held-out rows.
    #[serde(default)]
    pub per_class_train: Option<usize>,
    /// SHA-256 of the objective trace totals.
    pub trace_digest: String,
    pub cos_angle: f64,
    pub converged: bool,
    pub outer_iters_used: usize,
    pub polish_steps: usize,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub representation: Representation,
    pub ordinal_method: OrdinalMethod,
    pub kernel: Option<KernelSpec>,
    pub parameters: StoredParameters,
    pub maps: StoredMaps,
    pub metadata: TrainingMetadata,
}

/// Hex SHA-256 over the `{:.16e}` text of every trace entry.
pub fn trace_digest(report: &FitReport) -> String {
    let mut h = Sha256::new();
    for e in &report.objective_trace {
        h.update(
            format!(
                "{} {} {} {} {}\n",
                e.iteration,
                num(e.svm_objective),
                num(e.ordinal_objective),
                num(e.coupling_value),
                num(e.total)
            )
            .as_bytes(),
        );
    }
    hex::encode(h.finalize())
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Format(format!("{what}: cannot parse {s:?}")))
}

fn parse_vec(v: &[String], what: &str) -> Result<DVector<f64>> {
    let vals = v.iter().map(|s| parse_num(s, what)).collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(vals))
}

impl ModelFile {
    pub fn new(model: &JointModel, maps: &LabelMaps, report: &FitReport, seed: Option<u64>, n_train: usize) -> Self {
        let strs = |v: &DVector<f64>| v.iter().map(|&x| num(x)).collect::<Vec<_>>();
        let (representation, kernel, parameters) = match model {
            JointModel::Linear(m) => (
                Representation::Linear,
                None,
                StoredParameters {
                    gender_weights: strs(&m.w_g),
                    gender_intercept: num(m.b_g),
                    ordinal_weights: strs(&m.w_a),
                    thresholds: m.thresholds.iter().map(|&t| num(t)).collect(),
                    train_features: None,
                    train_classes: None,
                },
            ),
            JointModel::Kernel(m) => (
                Representation::Kernel,
                Some(m.kernel),
                StoredParameters {
                    gender_weights: strs(&m.alpha),
                    gender_intercept: num(m.b_g),
                    ordinal_weights: strs(&m.beta),
                    thresholds: m.thresholds.iter().map(|&t| num(t)).collect(),
                    train_features: Some(
                        m.train_features.row_iter().map(|r| r.iter().map(|&x| num(x)).collect()).collect(),
                    ),
                    train_classes: Some(m.train_classes.clone()),
                },
            ),
        };
        ModelFile {
            format_version: FORMAT_VERSION,
            representation,
            ordinal_method: model.ordinal_method(),
            kernel,
            parameters,
            maps: StoredMaps {
                ages: maps.ages.iter().map(|&a| num(a)).collect(),
                gender_negative: maps.gender_negative.clone(),
                gender_positive: maps.gender_positive.clone(),
            },
            metadata: TrainingMetadata {
                config: report.config.clone(),
                seed,
                per_class_train: None,
                trace_digest: trace_digest(report),
                cos_angle: report.cos_angle,
                converged: report.converged,
                outer_iters_used: report.outer_iters_used,
                polish_steps: report.polish_steps,
                n_train,
            },
        }
    }

    pub fn model(&self) -> Result<JointModel> {
        let p = &self.parameters;
        let w_g = parse_vec(&p.gender_weights, "gender_weights")?;
        let w_a = parse_vec(&p.ordinal_weights, "ordinal_weights")?;
        let b_g = parse_num(&p.gender_intercept, "gender_intercept")?;
        let thresholds = parse_vec(&p.thresholds, "thresholds")?.as_slice().to_vec();
        if w_g.len() != w_a.len() || w_g.is_empty() {
            return Err(Error::Format("weight vectors are empty or differ in length".into()));
        }
        if thresholds.is_empty() || thresholds.len() + 1 != self.maps.ages.len() {
            return Err(Error::Format("threshold count does not match the age map".into()));
        }
        Ok(match self.representation {
            Representation::Linear => JointModel::Linear(JointLinearModel {
                w_g,
                b_g,
                w_a,
                thresholds,
                ordinal_method: self.ordinal_method,
            }),
            Representation::Kernel => {
                let kernel = self.kernel.ok_or_else(|| Error::Format("kernel model without kernel spec".into()))?;
                let rows = p.train_features.as_ref().ok_or_else(|| Error::Format("kernel model without training rows".into()))?;
                let train_classes = p.train_classes.clone().ok_or_else(|| Error::Format("kernel model without training classes".into()))?;
                let n = w_g.len();
                let dim = rows.first().map_or(0, Vec::len);
                if rows.len() != n || train_classes.len() != n || dim == 0 || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Format("training rows do not match the coefficient count".into()));
                }
                let mut x = DMatrix::zeros(n, dim);
                for (i, r) in rows.iter().enumerate() {
                    for (j, s) in r.iter().enumerate() {
                        x[(i, j)] = parse_num(s, "train_features")?;
                    }
                }
                JointModel::Kernel(JointKernelModel {
                    alpha: w_g,
                    b_g,
                    beta: w_a,
                    thresholds,
                    train_features: x,
                    train_classes,
                    kernel,
                    ordinal_method: self.ordinal_method,
                })
            }
        })
    }

    pub fn label_maps(&self) -> Result<LabelMaps> {
        Ok(LabelMaps {
            ages: parse_vec(&self.maps.ages, "ages")?.as_slice().to_vec(),
            gender_negative: self.maps.gender_negative.clone(),
            gender_positive: self.maps.gender_positive.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("format_version").and_then(|x| x.as_u64()) {
            Some(ver) if ver == FORMAT_VERSION as u64 => {}
            Some(ver) => return Err(Error::Format(format!("format_version {ver}, expected {FORMAT_VERSION}"))),
            None => return Err(Error::Format("missing format_version".into())),
        }
        let mf: ModelFile = serde_json::from_value(v)?;
        mf.model()?;
        mf.label_maps()?;
        Ok(mf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::train_joint;
    use crate::synth::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y,sex,age\n1,2,M,30\n3,4,F,20\n5,6,M,20\n7,8,F,45\n");
        let d = load_csv(&p, None, "sex", "age").unwrap();
        assert_eq!(d.n_samples(), 4);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.genders(), &[1, -1, 1, -1]);
        assert_eq!(d.classes(), &[2, 1, 1, 3]);
        assert_eq!(d.maps().ages, vec![20.0, 30.0, 45.0]);
        assert_eq!(d.features()[(3, 1)], 8.0);
        let only_y = load_csv(&p, Some(&["y".to_string()]), "sex", "age").unwrap();
        assert_eq!(only_y.n_features(), 1);
    }

    #[test]
    fn numeric_gender_values_order_numerically() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "f1,gender,age\n1,10,1\n2,9,2\n");
        let d = load_csv(&p, None, "gender", "age").unwrap();
        assert_eq!(d.maps().gender_negative, "9");
        assert_eq!(d.genders(), &[1, -1]);
    }

    #[test]
    fn reports_bad_cells_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "f1,gender,age\n1,a,1\nzz,b,2\n");
        assert_eq!(
            load_csv(&p, None, "gender", "age").unwrap_err(),
            Error::Parse {
                row: 2,
                col: "f1".into(),
                value: "zz".into()
            }
        );
        assert_eq!(load_csv(&p, None, "sex", "age").unwrap_err(), Error::MissingColumn("sex".into()));
        let p = write(&dir, "b.csv", "f1,gender,age\n1,a,1\n2,b,2\n3,c,2\n");
        assert_eq!(load_csv(&p, None, "gender", "age").unwrap_err(), Error::NotBinary { found: 3 });
        let p = write(&dir, "c.csv", "f1,gender,age\n1,a,1\n2,b,2\n");
        let d = load_csv(&p, None, "gender", "age").unwrap();
        let q = write(&dir, "d.csv", "f1,gender,age\n1,a,1\n2,c,2\n");
        assert_eq!(
            load_labeled_csv(&q, None, "gender", "age", d.maps()).unwrap_err(),
            Error::UnknownLabel("c".into())
        );
        assert!(load_csv(dir.path().join("missing.csv"), None, "gender", "age").is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&d, &mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", std::str::from_utf8(&buf).unwrap());
        let back = load_csv(&p, None, "gender", "age").unwrap();
        assert_eq!(back.genders(), d.genders());
        assert_eq!(back.classes(), d.classes());
        assert!((back.features() - d.features()).amax() <= 1e-12);
        assert_eq!(back.features(), d.features());
    }

    #[test]
    fn predictions_layout() {
        let maps = LabelMaps {
            ages: vec![20.0, 30.5],
            gender_negative: "F".into(),
            gender_positive: "M".into(),
        };
        let mut buf = Vec::new();
        write_predictions_csv(&[1, -1], &[2, 1], &maps, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row_id,gender_pred,age_pred\n0,M,30.5\n1,F,20\n");
    }

    proptest! {
        #[test]
        fn decimal_text_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            prop_assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let d = generate_synthetic(&SyntheticSpec {
            n_per_cell: 4,
            n_classes: 3,
            dim: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for kernel in [None, Some(KernelSpec::Rbf { gamma: 0.4 })] {
            for method in [OrdinalMethod::Svor, OrdinalMethod::Kdlor] {
                let cfg = TrainConfig {
                    kernel,
                    ordinal_method: method,
                    ..TrainConfig::default()
                };
                let (model, rep) = train_joint(&d, &cfg).unwrap();
                let mf = ModelFile::new(&model, d.maps(), &rep, Some(7), d.n_samples());
                let back = ModelFile::from_json(&mf.to_json().unwrap()).unwrap();
                assert_eq!(back, mf);
                let m2 = back.model().unwrap();
                assert_eq!(m2, model);
                assert_eq!(m2.gender_decision(d.features()).unwrap(), model.gender_decision(d.features()).unwrap());
                assert_eq!(m2.predict_class(d.features()).unwrap(), model.predict_class(d.features()).unwrap());
                assert_eq!(back.label_maps().unwrap(), *d.maps());
                assert_eq!(back.metadata.trace_digest.len(), 64);
            }
        }
    }

    #[test]
    fn rejects_other_versions() {
        let d = generate_synthetic(&SyntheticSpec {
            n_per_cell: 2,
            n_classes: 3,
            dim: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (model, rep) = train_joint(&d, &TrainConfig::default()).unwrap();
        let mut mf = ModelFile::new(&model, d.maps(), &rep, None, d.n_samples());
        mf.format_version = 99;
        let err = ModelFile::from_json(&mf.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
        assert!(matches!(ModelFile::from_json("{}"), Err(Error::Format(_))));
        assert!(matches!(ModelFile::from_json("not json"), Err(Error::Format(_))));
    }
}
