//! Cohort manifests (CSV) and point clouds (text, one `x y z` per line).
//!
//! Manifest columns, comma separated with a header row:
//!
//! | column | content |
//! |---|---|
//! | `subject_id` | unique, non-empty |
//! | `cloud_path` | point-cloud file, relative to the manifest directory |
//! | `y_months` | observed time, > 0 |
//! | `delta` | 1 = event observed, 0 = right censored |
//! | `age` | years |
//! | `gender` | 0 or 1 |
//! | `education` | ordered level, 1-based |
//! | `csf_abeta42`, `csf_ttau`, `csf_ptau181`, `fdg_pet`, `av45_pet` | biomarkers, >= 0 |
//! | `hippocampus_volume` | optional column; fraction of intracranial volume |
//!
//! Every cell must parse; rows are never skipped or imputed.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::SurvivalRecord;
use crate::pointnet::PointCloud;
use crate::preprocess::{RawClinicalRecord, BIOMARKER_COLUMNS, VOLUME_COLUMN};
use crate::synth::SyntheticSubject;

pub const OUTCOME_COLUMNS: [&str; 2] = ["y_months", "delta"];

/// Required columns in file order, outcome columns included.
pub fn manifest_columns(with_volume: bool) -> Vec<&'static str> {
    let mut cols = vec![
        "subject_id",
        "cloud_path",
        "y_months",
        "delta",
        "age",
        "gender",
        "education",
    ];
    cols.extend(BIOMARKER_COLUMNS);
    if with_volume {
        cols.push(VOLUME_COLUMN);
    }
    cols
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub raw: RawClinicalRecord,
    /// `None` only in manifests loaded without outcome columns.
    pub outcome: Option<SurvivalRecord>,
    /// As written in the manifest.
    pub cloud_path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub has_volume: bool,
}

impl CohortManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.cloud_path)
    }

    pub fn records(&self) -> Option<Vec<SurvivalRecord>> {
        self.rows.iter().map(|r| r.outcome.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcomes {
    Required,
    /// Outcome columns may be absent (prediction on new subjects); when
    /// present they are validated as usual.
    Optional,
}

/// Loads a manifest that must carry outcomes.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    load_manifest_with(path, Outcomes::Required)
}

pub fn load_manifest_with(path: &Path, outcomes: Outcomes) -> Result<CohortManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::data(path, "header", e.to_string()))?
        .clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, h) in header.iter().enumerate() {
        let known = manifest_columns(true).contains(&h);
        if !known {
            return Err(Error::data(path, "header", format!("unknown column '{h}'")));
        }
        if index.insert(h, i).is_some() {
            return Err(Error::data(
                path,
                "header",
                format!("duplicate column '{h}'"),
            ));
        }
    }
    let has_volume = index.contains_key(VOLUME_COLUMN);
    let has_outcomes = match (index.contains_key("y_months"), index.contains_key("delta")) {
        (true, true) => true,
        (false, false) if outcomes == Outcomes::Optional => false,
        _ => {
            let missing = OUTCOME_COLUMNS
                .iter()
                .find(|c| !index.contains_key(**c))
                .expect("one missing");
            return Err(Error::data(
                path,
                "header",
                format!("missing column '{missing}'"),
            ));
        }
    };
    for col in manifest_columns(false) {
        if !index.contains_key(col) && !OUTCOME_COLUMNS.contains(&col) {
            return Err(Error::data(
                path,
                "header",
                format!("missing column '{col}'"),
            ));
        }
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row_no = i + 1;
        let at = |col: &str| format!("row {row_no}, column {col}");
        let rec = rec.map_err(|e| Error::data(path, format!("row {row_no}"), e.to_string()))?;
        let cell = |col: &str| -> Result<&str> {
            let v = rec.get(index[col]).unwrap_or("");
            if v.is_empty() {
                return Err(Error::data(path, at(col), "missing value"));
            }
            Ok(v)
        };
        let real = |col: &str| -> Result<f64> {
            let v = cell(col)?;
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::data(
                    path,
                    at(col),
                    format!("'{v}' is not a finite number"),
                )),
            }
        };
        let binary = |col: &str| -> Result<u8> {
            match cell(col)? {
                "0" => Ok(0),
                "1" => Ok(1),
                v => Err(Error::data(path, at(col), format!("'{v}' must be 0 or 1"))),
            }
        };
        let subject_id = cell("subject_id")?.to_string();
        if !seen.insert(subject_id.clone()) {
            return Err(Error::data(
                path,
                at("subject_id"),
                format!("duplicate subject_id '{subject_id}'"),
            ));
        }
        let education = {
            let v = cell("education")?;
            v.parse::<u32>().ok().filter(|&e| e >= 1).ok_or_else(|| {
                Error::data(path, at("education"), format!("'{v}' is not a level >= 1"))
            })?
        };
        let raw = RawClinicalRecord {
            subject_id: subject_id.clone(),
            age: real("age")?,
            gender: binary("gender")?,
            education,
            csf_abeta42: real("csf_abeta42")?,
            csf_ttau: real("csf_ttau")?,
            csf_ptau181: real("csf_ptau181")?,
            fdg_pet: real("fdg_pet")?,
            av45_pet: real("av45_pet")?,
            hippocampus_volume: if has_volume {
                Some(real(VOLUME_COLUMN)?)
            } else {
                None
            },
        };
        raw.validate()
            .map_err(|e| Error::data(path, format!("row {row_no}"), e.to_string()))?;
        let outcome = if has_outcomes {
            let y = real("y_months")?;
            if y <= 0.0 {
                return Err(Error::data(
                    path,
                    at("y_months"),
                    format!("observed time must be > 0, got {y}"),
                ));
            }
            let delta = binary("delta")?;
            Some(SurvivalRecord::new(subject_id, y, delta == 1)?)
        } else {
            None
        };
        let cloud_path = cell("cloud_path")?.to_string();
        let resolved = base_dir.join(&cloud_path);
        if !resolved.is_file() {
            return Err(Error::data(
                path,
                at("cloud_path"),
                format!("point cloud file {} does not exist", resolved.display()),
            ));
        }
        rows.push(ManifestRow {
            raw,
            outcome,
            cloud_path,
        });
    }
    if rows.is_empty() {
        return Err(Error::data(path, "row 1", "manifest has no subjects"));
    }
    Ok(CohortManifest {
        base_dir,
        rows,
        has_volume,
    })
}

/// Writes `rows` with the column layout of [`manifest_columns`]. Outcomes are
/// required.
pub fn save_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let has_volume = rows
        .first()
        .is_some_and(|r| r.raw.hippocampus_volume.is_some());
    if rows
        .iter()
        .any(|r| r.raw.hippocampus_volume.is_some() != has_volume)
    {
        return Err(Error::InvalidArgument(
            "hippocampus_volume must be present in all rows or none".into(),
        ));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::data(path, "write", e.to_string());
    w.write_record(manifest_columns(has_volume))
        .map_err(csv_err)?;
    for r in rows {
        let o = r.outcome.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("subject {} has no outcome", r.raw.subject_id))
        })?;
        let mut fields = vec![
            r.raw.subject_id.clone(),
            r.cloud_path.clone(),
            o.time.to_string(),
            u8::from(o.event).to_string(),
            r.raw.age.to_string(),
            r.raw.gender.to_string(),
            r.raw.education.to_string(),
        ];
        for col in BIOMARKER_COLUMNS {
            fields.push(r.raw.biomarker(col).expect("biomarker").to_string());
        }
        if let Some(v) = r.raw.hippocampus_volume {
            fields.push(v.to_string());
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one `x y z` triple per non-empty line.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let loc = || format!("line {}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::data(
                path,
                loc(),
                format!("expected 3 columns, found {}", tokens.len()),
            ));
        }
        for t in tokens {
            match t.parse::<f64>() {
                Ok(v) if v.is_finite() => coords.push(v),
                _ => {
                    return Err(Error::data(
                        path,
                        loc(),
                        format!("'{t}' is not a finite number"),
                    ))
                }
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::data(
            path,
            "line 1",
            "point cloud file has no points",
        ));
    }
    PointCloud::new(coords)
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in cloud.rows() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a synthetic cohort under `dir`: `manifest.csv`, one cloud per
/// subject in `clouds/`, and `truth.csv` with the generating deformation and
/// log-hazard. Returns the manifest path.
pub fn save_synthetic_cohort(subjects: &[SyntheticSubject], dir: &Path) -> Result<PathBuf> {
    let cloud_dir = dir.join("clouds");
    fs::create_dir_all(&cloud_dir).map_err(|e| Error::io(&cloud_dir, e))?;
    let mut rows = Vec::with_capacity(subjects.len());
    let mut truth = String::from("subject_id,deformation,true_log_hazard\n");
    for s in subjects {
        let id = &s.raw.subject_id;
        let rel = format!("clouds/{id}.txt");
        save_cloud(&s.cloud, &dir.join(&rel))?;
        rows.push(ManifestRow {
            raw: s.raw.clone(),
            outcome: Some(s.record.clone()),
            cloud_path: rel,
        });
        truth.push_str(&format!("{id},{},{}\n", s.deformation, s.true_log_hazard));
    }
    let manifest = dir.join("manifest.csv");
    save_manifest(&rows, &manifest)?;
    let truth_path = dir.join("truth.csv");
    fs::write(&truth_path, truth).map_err(|e| Error::io(&truth_path, e))?;
    Ok(manifest)
}

/// Subsample without replacement (`K > target`), sample with replacement
/// (`K < target`), or return the cloud unchanged.
pub fn resample_cloud(cloud: &PointCloud, target: usize, seed: u64) -> Result<PointCloud> {
    let k = cloud.len();
    if target == 0 {
        return Err(Error::InvalidArgument("cannot resample to 0 points".into()));
    }
    if k == target {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = if k > target {
        index::sample(&mut rng, k, target).into_vec()
    } else {
        (0..target).map(|_| rng.random_range(0..k)).collect()
    };
    PointCloud::new(order.iter().flat_map(|&i| cloud.point(i)).collect())
}

/// A manifest with its clouds loaded, every cloud at `points` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub raw: Vec<RawClinicalRecord>,
    pub records: Vec<SurvivalRecord>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            raw: idx.iter().map(|&i| self.raw[i].clone()).collect(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            clouds: idx.iter().map(|&i| self.clouds[i].clone()).collect(),
        }
    }

    pub fn has_volume(&self) -> bool {
        self.raw.iter().all(|r| r.hippocampus_volume.is_some())
    }
}

/// Loads every cloud of a manifest with outcomes. Clouds with a different
/// point count are resampled to `points` with a seed derived from `seed` and
/// the row index; `None` keeps the first cloud's size and requires all to
/// match.
pub fn load_dataset(
    manifest: &CohortManifest,
    points: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let records = manifest
        .records()
        .ok_or_else(|| Error::InvalidArgument("manifest has no outcome columns".into()))?;
    let clouds = load_clouds(manifest, points, seed)?;
    Ok(Dataset {
        raw: manifest.rows.iter().map(|r| r.raw.clone()).collect(),
        records,
        clouds,
    })
}

pub fn load_clouds(
    manifest: &CohortManifest,
    points: Option<usize>,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let mut clouds = Vec::with_capacity(manifest.len());
    let mut target = points;
    for (i, row) in manifest.rows.iter().enumerate() {
        let path = manifest.resolve(row);
        let c = load_cloud(&path)?;
        let k = *target.get_or_insert(c.len());
        if c.len() == k {
            clouds.push(c);
        } else if points.is_some() {
            clouds.push(resample_cloud(
                &c,
                k,
                seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )?);
        } else {
            return Err(Error::data(
                &path,
                "line 1",
                format!("cloud has {} points but earlier clouds have {k}; set a point count to resample", c.len()),
            ));
        }
    }
    Ok(clouds)
}
