//! Tabular covariates to wide-component features: standardized biomarkers,
//! gender, a natural-spline expansion of age, orthogonal polynomial coding of
//! education, and cross-product (interaction) columns.

mod contrast;
mod spline;

use serde::{Deserialize, Serialize};

pub use contrast::{orthogonal_poly_coding, orthogonal_poly_contrasts};
pub use spline::NaturalSpline;

use crate::error::{Error, Result};

/// Biomarker columns that are standardized and enter the wide model directly.
pub const BIOMARKER_COLUMNS: [&str; 5] = [
    "csf_abeta42",
    "csf_ttau",
    "csf_ptau181",
    "fdg_pet",
    "av45_pet",
];
pub const VOLUME_COLUMN: &str = "hippocampus_volume";
pub const GENDER_COLUMN: &str = "gender";
pub const AGE_SPLINE_PREFIX: &str = "age_ns";
pub const EDUCATION_PREFIX: &str = "education_poly";
/// Joins the two factor names of an interaction column.
pub const CROSS: char = '×';

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawClinicalRecord {
    pub subject_id: String,
    /// Years.
    pub age: f64,
    /// 0 or 1.
    pub gender: u8,
    /// Ordered level, 1-based.
    pub education: u32,
    pub csf_abeta42: f64,
    pub csf_ttau: f64,
    pub csf_ptau181: f64,
    pub fdg_pet: f64,
    pub av45_pet: f64,
    /// Fraction of intracranial volume.
    pub hippocampus_volume: Option<f64>,
}

impl RawClinicalRecord {
    pub fn biomarker(&self, column: &str) -> Option<f64> {
        match column {
            "csf_abeta42" => Some(self.csf_abeta42),
            "csf_ttau" => Some(self.csf_ttau),
            "csf_ptau181" => Some(self.csf_ptau181),
            "fdg_pet" => Some(self.fdg_pet),
            "av45_pet" => Some(self.av45_pet),
            VOLUME_COLUMN => self.hippocampus_volume,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| {
            Err(Error::InvalidArgument(format!(
                "subject {}: {what}",
                self.subject_id
            )))
        };
        if !(self.age.is_finite() && self.age > 0.0) {
            return bad(format!("age must be positive, got {}", self.age));
        }
        if self.gender > 1 {
            return bad(format!("gender must be 0 or 1, got {}", self.gender));
        }
        for col in BIOMARKER_COLUMNS {
            let v = self.biomarker(col).expect("biomarker column");
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{col} must be a non-negative number, got {v}"));
            }
        }
        if let Some(v) = self.hippocampus_volume {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{VOLUME_COLUMN} must lie in (0, 1), got {v}"));
            }
        }
        Ok(())
    }
}

/// Declared layout of the wide features; fixed before any data is seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSchema {
    pub education_levels: usize,
    pub include_volume: bool,
    pub spline_df: usize,
    /// Column-name pairs for the cross-product transform. `None` means every
    /// age-spline column crossed with gender.
    pub interactions: Option<Vec<(String, String)>>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema {
            education_levels: 5,
            include_volume: false,
            spline_df: 4,
            interactions: None,
        }
    }
}

impl FeatureSchema {
    pub fn continuous_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = BIOMARKER_COLUMNS.iter().map(|c| c.to_string()).collect();
        if self.include_volume {
            cols.push(VOLUME_COLUMN.into());
        }
        cols
    }

    pub fn spline_columns(&self) -> Vec<String> {
        (1..=self.spline_df)
            .map(|k| format!("{AGE_SPLINE_PREFIX}{k}"))
            .collect()
    }

    pub fn interaction_pairs(&self) -> Vec<(String, String)> {
        match &self.interactions {
            Some(pairs) => pairs.clone(),
            None => self
                .spline_columns()
                .into_iter()
                .map(|c| (c, GENDER_COLUMN.to_string()))
                .collect(),
        }
    }

    /// Columns of `x` before the cross-product transform.
    pub fn base_columns(&self) -> Vec<String> {
        let mut cols = self.continuous_columns();
        cols.push(GENDER_COLUMN.into());
        cols.extend(self.spline_columns());
        cols.extend((1..self.education_levels).map(|k| format!("{EDUCATION_PREFIX}{k}")));
        cols
    }

    pub fn width(&self) -> usize {
        self.base_columns().len() + self.interaction_pairs().len()
    }
}

/// Encoded covariates with aligned column names.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub column_names: Vec<String>,
}

impl FeatureVector {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.column_names
            .iter()
            .position(|c| c == column)
            .map(|i| self.values[i])
    }
}

/// Elementwise products of the named column pairs, named `"a×b"`.
pub fn cross_product_transform(
    x: &FeatureVector,
    interactions: &[(String, String)],
) -> Result<FeatureVector> {
    let index = |name: &str| {
        x.column_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let mut values = Vec::with_capacity(interactions.len());
    let mut column_names = Vec::with_capacity(interactions.len());
    for (a, b) in interactions {
        let (ia, ib) = (index(a)?, index(b)?);
        values.push(x.values[ia] * x.values[ib]);
        column_names.push(format!("{a}{CROSS}{b}"));
    }
    Ok(FeatureVector {
        values,
        column_names,
    })
}

/// Statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    spline: NaturalSpline,
    continuous_mean: Vec<f64>,
    continuous_scale: Vec<f64>,
    spline_mean: Vec<f64>,
    spline_scale: Vec<f64>,
    contrasts: Vec<Vec<f64>>,
    column_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    schema: FeatureSchema,
    state: Option<EncoderState>,
}

fn mean_and_scale(name: &str, values: impl Iterator<Item = f64> + Clone) -> Result<(f64, f64)> {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd.is_nan() || sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    Ok((mean, sd))
}

impl FeatureEncoder {
    pub fn new(schema: FeatureSchema) -> Self {
        FeatureEncoder {
            schema,
            state: None,
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    fn state(&self) -> Result<&EncoderState> {
        self.state.as_ref().ok_or(Error::NotFitted)
    }

    pub fn column_names(&self) -> Result<&[String]> {
        Ok(&self.state()?.column_names)
    }

    pub fn width(&self) -> usize {
        self.schema.width()
    }

    pub fn spline(&self) -> Result<&NaturalSpline> {
        Ok(&self.state()?.spline)
    }

    /// Raw-record columns the schema needs.
    pub fn required_columns(&self) -> Vec<String> {
        let mut cols = vec!["age".to_string(), GENDER_COLUMN.into(), "education".into()];
        cols.extend(self.schema.continuous_columns());
        cols
    }

    fn check_record(&self, r: &RawClinicalRecord) -> Result<()> {
        r.validate()?;
        if self.schema.include_volume && r.hippocampus_volume.is_none() {
            return Err(Error::Schema(format!(
                "subject {} has no {VOLUME_COLUMN}, which the feature schema requires",
                r.subject_id
            )));
        }
        if r.education < 1 || r.education as usize > self.schema.education_levels {
            return Err(Error::InvalidArgument(format!(
                "subject {}: education level {} outside 1..={}",
                r.subject_id, r.education, self.schema.education_levels
            )));
        }
        Ok(())
    }

    /// Fits knots, standardization and contrasts on the training split. An
    /// encoder can only be fitted once.
    pub fn fit(&mut self, train: &[RawClinicalRecord]) -> Result<()> {
        if self.state.is_some() {
            return Err(Error::InvalidArgument(
                "feature encoder is already fitted".into(),
            ));
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit encoder on an empty split".into(),
            ));
        }
        for r in train {
            self.check_record(r)?;
        }
        let mut continuous_mean = Vec::new();
        let mut continuous_scale = Vec::new();
        for col in self.schema.continuous_columns() {
            let (m, s) = mean_and_scale(
                &col,
                train.iter().map(|r| r.biomarker(&col).expect("checked")),
            )?;
            continuous_mean.push(m);
            continuous_scale.push(s);
        }
        let ages: Vec<f64> = train.iter().map(|r| r.age).collect();
        let spline =
            NaturalSpline::from_data(&ages, self.schema.spline_df).map_err(|e| match e {
                Error::InvalidArgument(_) => Error::ZeroVariance("age".into()),
                other => other,
            })?;
        let raw: Vec<Vec<f64>> = ages.iter().map(|&a| spline.evaluate(a)).collect();
        let mut spline_mean = Vec::new();
        let mut spline_scale = Vec::new();
        for (k, name) in self.schema.spline_columns().iter().enumerate() {
            let (m, s) = mean_and_scale(name, raw.iter().map(|b| b[k]))?;
            spline_mean.push(m);
            spline_scale.push(s);
        }
        let contrasts = orthogonal_poly_contrasts(self.schema.education_levels)?;
        let mut state = EncoderState {
            spline,
            continuous_mean,
            continuous_scale,
            spline_mean,
            spline_scale,
            contrasts,
            column_names: Vec::new(),
        };
        // resolve interaction names once so unknown columns fail at fit time
        let base = self.base_vector(&state, &train[0]);
        let crossed = cross_product_transform(&base, &self.schema.interaction_pairs())?;
        state.column_names = base
            .column_names
            .into_iter()
            .chain(crossed.column_names)
            .collect();
        self.state = Some(state);
        Ok(())
    }

    pub fn fit_transform(&mut self, train: &[RawClinicalRecord]) -> Result<Vec<FeatureVector>> {
        self.fit(train)?;
        train.iter().map(|r| self.transform(r)).collect()
    }

    fn base_vector(&self, s: &EncoderState, r: &RawClinicalRecord) -> FeatureVector {
        let mut values = Vec::with_capacity(self.schema.width());
        for (k, col) in self.schema.continuous_columns().iter().enumerate() {
            let v = r.biomarker(col).expect("checked");
            values.push((v - s.continuous_mean[k]) / s.continuous_scale[k]);
        }
        values.push(r.gender as f64);
        for (k, b) in s.spline.evaluate(r.age).into_iter().enumerate() {
            values.push((b - s.spline_mean[k]) / s.spline_scale[k]);
        }
        values.extend_from_slice(&s.contrasts[r.education as usize - 1]);
        FeatureVector {
            values,
            column_names: self.schema.base_columns(),
        }
    }

    /// Encodes one record with the training-split statistics.
    pub fn transform(&self, r: &RawClinicalRecord) -> Result<FeatureVector> {
        let s = self.state()?;
        self.check_record(r)?;
        let mut x = self.base_vector(s, r);
        let crossed = cross_product_transform(&x, &self.schema.interaction_pairs())?;
        x.values.extend(crossed.values);
        x.column_names = s.column_names.clone();
        Ok(x)
    }

    /// Row-major `n × width` matrix of encoded records.
    pub fn transform_matrix(&self, records: &[RawClinicalRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len() * self.width());
        for r in records {
            out.extend(self.transform(r)?.values);
        }
        Ok(out)
    }
}

/// Unstandardized natural-spline basis of `age` under a fitted encoder.
pub fn natural_spline_basis(age: f64, encoder: &FeatureEncoder) -> Result<Vec<f64>> {
    Ok(encoder.spline()?.evaluate(age))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(i: usize) -> RawClinicalRecord {
        let f = i as f64;
        RawClinicalRecord {
            subject_id: format!("s{i}"),
            age: 55.0 + (f * 7.3) % 35.0,
            gender: (i % 2) as u8,
            education: (i % 5) as u32 + 1,
            csf_abeta42: 800.0 + (f * 37.0) % 300.0,
            csf_ttau: 250.0 + (f * 13.0) % 90.0,
            csf_ptau181: 20.0 + (f * 3.0) % 11.0,
            fdg_pet: 1.2 + (f * 0.07) % 0.3,
            av45_pet: 1.1 + (f * 0.05) % 0.4,
            hippocampus_volume: Some(0.0025 + (f * 0.00003) % 0.0005),
        }
    }

    fn train() -> Vec<RawClinicalRecord> {
        (0..40).map(record).collect()
    }

    #[test]
    fn transform_before_fit_fails() {
        let enc = FeatureEncoder::new(FeatureSchema::default());
        assert!(matches!(enc.transform(&record(0)), Err(Error::NotFitted)));
        assert!(matches!(
            natural_spline_basis(60.0, &enc),
            Err(Error::NotFitted)
        ));
    }

    #[test]
    fn width_and_names() {
        let schema = FeatureSchema {
            include_volume: true,
            ..FeatureSchema::default()
        };
        let mut enc = FeatureEncoder::new(schema.clone());
        let rows = enc.fit_transform(&train()).unwrap();
        // 6 standardized + gender + 4 spline + 4 contrasts + 4 interactions
        assert_eq!(schema.width(), 6 + 1 + 4 + 4 + 4);
        assert_eq!(rows[0].values.len(), schema.width());
        let names = enc.column_names().unwrap();
        assert_eq!(names.last().unwrap(), "age_ns4×gender");
        let mut unique = names.to_vec();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn standardized_columns_have_zero_mean() {
        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        let data = train();
        let rows = enc.fit_transform(&data).unwrap();
        let names = enc.column_names().unwrap().to_vec();
        let standardized: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                BIOMARKER_COLUMNS.contains(&n.as_str())
                    || (n.starts_with(AGE_SPLINE_PREFIX) && !n.contains(CROSS))
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(standardized.len(), 9);
        for j in standardized {
            let mean: f64 = rows.iter().map(|r| r.values[j]).sum::<f64>() / rows.len() as f64;
            let var: f64 =
                rows.iter().map(|r| r.values[j].powi(2)).sum::<f64>() / rows.len() as f64;
            assert!(mean.abs() < 1e-10, "{}", names[j]);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn unseen_records_use_training_statistics() {
        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        enc.fit(&train()).unwrap();
        let mut r = record(3);
        let a = enc.transform(&r).unwrap();
        r.csf_ttau += 10.0;
        let b = enc.transform(&r).unwrap();
        let j = 1;
        let scale = enc.state().unwrap().continuous_scale[j];
        assert!((b.values[j] - a.values[j] - 10.0 / scale).abs() < 1e-12);
        // idempotent
        assert_eq!(enc.transform(&r).unwrap(), b);
    }

    #[test]
    fn gender_zero_zeroes_interactions() {
        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        enc.fit(&train()).unwrap();
        let mut r = record(4);
        r.gender = 0;
        let x = enc.transform(&r).unwrap();
        for (name, v) in x.column_names.iter().zip(&x.values) {
            if name.contains(CROSS) {
                assert_eq!(*v, 0.0, "{name}");
            }
        }
    }

    #[test]
    fn cross_product_examples() {
        let x = FeatureVector {
            values: vec![2.0, 3.0],
            column_names: vec!["a".into(), "b".into()],
        };
        let c = cross_product_transform(&x, &[("a".into(), "b".into())]).unwrap();
        assert_eq!(c.values, vec![6.0]);
        assert_eq!(c.column_names, vec!["a×b"]);
        assert!(cross_product_transform(&x, &[]).unwrap().values.is_empty());
        assert!(matches!(
            cross_product_transform(&x, &[("a".into(), "zzz".into())]),
            Err(Error::UnknownColumn(c)) if c == "zzz"
        ));
    }

    #[test]
    fn empty_interaction_list() {
        let schema = FeatureSchema {
            interactions: Some(vec![]),
            ..FeatureSchema::default()
        };
        let mut enc = FeatureEncoder::new(schema.clone());
        let rows = enc.fit_transform(&train()).unwrap();
        assert_eq!(rows[0].values.len(), schema.base_columns().len());
    }

    #[test]
    fn zero_variance_names_column() {
        let mut data = train();
        data.iter_mut().for_each(|r| r.fdg_pet = 1.0);
        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        match enc.fit(&data) {
            Err(Error::ZeroVariance(c)) => assert_eq!(c, "fdg_pet"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors() {
        let mut enc = FeatureEncoder::new(FeatureSchema {
            include_volume: true,
            ..FeatureSchema::default()
        });
        let mut data = train();
        data[2].hippocampus_volume = None;
        assert!(matches!(enc.fit(&data), Err(Error::Schema(_))));

        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        enc.fit(&train()).unwrap();
        assert!(enc.fit(&train()).is_err());
        let mut r = record(1);
        r.education = 9;
        assert!(enc.transform(&r).is_err());
        let mut r = record(1);
        r.csf_ttau = -1.0;
        assert!(enc.transform(&r).is_err());
    }

    #[test]
    fn encoder_serde_round_trip() {
        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        enc.fit(&train()).unwrap();
        let json = serde_json::to_string(&enc).unwrap();
        let back: FeatureEncoder = serde_json::from_str(&json).unwrap();
        assert_eq!(back, enc);
        assert_eq!(
            back.transform(&record(7)).unwrap(),
            enc.transform(&record(7)).unwrap()
        );
    }
}
