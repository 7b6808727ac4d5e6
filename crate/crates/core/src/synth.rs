//! Synthetic cohorts with known hazards: deformed-ellipsoid point clouds,
//! tabular covariates, exponential event times and uniform right censoring.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SurvivalRecord;
use crate::pointnet::PointCloud;
use crate::preprocess::{RawClinicalRecord, BIOMARKER_COLUMNS, VOLUME_COLUMN};

/// Geometry of the generated surfaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudShape {
    pub points: usize,
    pub semi_axes: [f64; 3],
    /// Direction of the bump centre on the unit sphere (normalized on use).
    pub anchor: [f64; 3],
    /// Angular Gaussian width of the bump, radians.
    pub bump_width: f64,
    /// Relative radial displacement at the anchor per unit deformation.
    pub bump_amplitude: f64,
}

impl Default for CloudShape {
    fn default() -> Self {
        CloudShape {
            points: 1024,
            semi_axes: [1.0, 0.7, 0.5],
            anchor: [1.0, 0.5, 0.3],
            bump_width: 0.5,
            bump_amplitude: 0.15,
        }
    }
}

impl CloudShape {
    fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::Config("points_per_cloud must be at least 1".into()));
        }
        if self.semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("semi-axes must be positive".into()));
        }
        if self.anchor.iter().map(|a| a * a).sum::<f64>() == 0.0 {
            return Err(Error::Config("bump anchor must be non-zero".into()));
        }
        if !(self.bump_width > 0.0 && self.bump_amplitude >= 0.0) {
            return Err(Error::Config(
                "bump width must be positive and amplitude non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Radial scale factor never drops below this.
    const MIN_SCALE: f64 = 0.1;

    /// Uncentered cloud: rejection sampling gives a uniform surface density,
    /// then points are pushed radially by the bump.
    fn sample(&self, deformation: f64, rng: &mut impl Rng) -> Vec<f64> {
        let [a, b, c] = self.semi_axes;
        let min_axis = a.min(b).min(c);
        let norm = self.anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
        let anchor = self.anchor.map(|v| v / norm);
        let mut out = Vec::with_capacity(3 * self.points);
        while out.len() < 3 * self.points {
            let u = unit_vector(rng);
            let accept =
                min_axis * ((u[0] / a).powi(2) + (u[1] / b).powi(2) + (u[2] / c).powi(2)).sqrt();
            if rng.random::<f64>() >= accept {
                continue;
            }
            let cos = (u[0] * anchor[0] + u[1] * anchor[1] + u[2] * anchor[2]).clamp(-1.0, 1.0);
            let theta = cos.acos();
            let g = (-theta * theta / (2.0 * self.bump_width * self.bump_width)).exp();
            let s = (1.0 + self.bump_amplitude * deformation * g).max(Self::MIN_SCALE);
            out.extend([a * u[0] * s, b * u[1] * s, c * u[2] * s]);
        }
        out
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn center(points: &mut [f64]) {
    let k = (points.len() / 3) as f64;
    for j in 0..3 {
        let mean = points.iter().skip(j).step_by(3).sum::<f64>() / k;
        points
            .iter_mut()
            .skip(j)
            .step_by(3)
            .for_each(|v| *v -= mean);
    }
}

/// Deformed-ellipsoid cloud, centered at the origin.
pub fn generate_cloud_with(shape: &CloudShape, deformation: f64, seed: u64) -> Result<PointCloud> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = shape.sample(deformation, &mut rng);
    center(&mut pts);
    PointCloud::new(pts)
}

/// [`generate_cloud_with`] on the default shape.
pub fn generate_cloud(deformation: f64, seed: u64) -> Result<PointCloud> {
    generate_cloud_with(&CloudShape::default(), deformation, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub points_per_cloud: usize,
    /// Log-hazard per unit deformation.
    pub shape_signal_strength: f64,
    /// Log-hazard ratios per standard deviation of the biomarkers, in the
    /// order csf_abeta42, csf_ttau, csf_ptau181, fdg_pet, av45_pet,
    /// hippocampus_volume. Missing entries are zero.
    pub tabular_coefficients: Vec<f64>,
    /// Events per month at zero log-hazard.
    pub baseline_hazard_rate: f64,
    /// Expected censored fraction; 0 disables censoring.
    pub censoring_rate_target: f64,
    pub rng_seed: u64,
    /// Standard deviation of the per-subject deformation.
    pub deformation_sd: f64,
    pub education_levels: u32,
    pub include_volume: bool,
    pub semi_axes: [f64; 3],
    pub bump_width: f64,
    pub bump_amplitude: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let shape = CloudShape::default();
        CohortSpec {
            n_subjects: 200,
            points_per_cloud: shape.points,
            shape_signal_strength: 1.0,
            tabular_coefficients: vec![-0.5, 0.5, 0.5],
            baseline_hazard_rate: 0.02,
            censoring_rate_target: 0.3,
            rng_seed: 0,
            deformation_sd: 1.0,
            education_levels: 5,
            include_volume: true,
            semi_axes: shape.semi_axes,
            bump_width: shape.bump_width,
            bump_amplitude: shape.bump_amplitude,
        }
    }
}

/// Location and scale of each simulated biomarker.
const BIOMARKER_SCALES: [(f64, f64); 6] = [
    (1000.0, 150.0),
    (300.0, 40.0),
    (28.0, 4.0),
    (1.25, 0.12),
    (1.2, 0.12),
    (0.0035, 0.0003),
];

/// Draws beyond this many standard deviations are redrawn so every raw value
/// stays in its valid range.
const Z_LIMIT: f64 = 6.0;

impl CohortSpec {
    pub fn shape(&self) -> CloudShape {
        CloudShape {
            points: self.points_per_cloud,
            semi_axes: self.semi_axes,
            bump_width: self.bump_width,
            bump_amplitude: self.bump_amplitude,
            ..CloudShape::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects < 2 {
            return bad(format!(
                "n_subjects must be at least 2, got {}",
                self.n_subjects
            ));
        }
        if !(self.baseline_hazard_rate.is_finite() && self.baseline_hazard_rate > 0.0) {
            return bad(format!(
                "baseline_hazard_rate must be positive, got {}",
                self.baseline_hazard_rate
            ));
        }
        if !(0.0..1.0).contains(&self.censoring_rate_target) {
            return bad(format!(
                "censoring_rate_target must lie in [0, 1), got {}",
                self.censoring_rate_target
            ));
        }
        let max_coefs = if self.include_volume { 6 } else { 5 };
        if self.tabular_coefficients.len() > max_coefs {
            return bad(format!(
                "at most {max_coefs} tabular coefficients, got {}",
                self.tabular_coefficients.len()
            ));
        }
        if self
            .tabular_coefficients
            .iter()
            .chain([&self.shape_signal_strength, &self.deformation_sd])
            .any(|v| !v.is_finite())
        {
            return bad("coefficients must be finite".into());
        }
        if self.deformation_sd < 0.0 {
            return bad("deformation_sd must be non-negative".into());
        }
        if self.education_levels < 2 {
            return bad("education_levels must be at least 2".into());
        }
        self.shape().validate()
    }

    /// Names of the raw columns carrying tabular signal, aligned with
    /// `tabular_coefficients`.
    pub fn signal_columns(&self) -> Vec<&'static str> {
        BIOMARKER_COLUMNS
            .iter()
            .copied()
            .chain([VOLUME_COLUMN])
            .take(self.tabular_coefficients.len())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub cloud: PointCloud,
    pub raw: RawClinicalRecord,
    pub deformation: f64,
    pub true_log_hazard: f64,
    pub record: SurvivalRecord,
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= Z_LIMIT {
            return z;
        }
    }
}

struct Draw {
    subject: SyntheticSubject,
    event_time: f64,
    censor_uniform: f64,
}

fn draw_subject(spec: &CohortSpec, shape: &CloudShape, index: usize) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);
    let z: Vec<f64> = (0..6).map(|_| truncated_normal(&mut rng)).collect();
    let raw_value = |j: usize| BIOMARKER_SCALES[j].0 + BIOMARKER_SCALES[j].1 * z[j];
    let deformation = spec.deformation_sd * truncated_normal(&mut rng);
    let subject_id = format!("S{:05}", index + 1);
    let raw = RawClinicalRecord {
        subject_id: subject_id.clone(),
        age: rng.random_range(55.0..90.0),
        gender: rng.random_range(0..2u8),
        education: rng.random_range(1..=spec.education_levels),
        csf_abeta42: raw_value(0),
        csf_ttau: raw_value(1),
        csf_ptau181: raw_value(2),
        fdg_pet: raw_value(3),
        av45_pet: raw_value(4),
        hippocampus_volume: spec.include_volume.then(|| raw_value(5)),
    };
    let true_log_hazard = spec
        .tabular_coefficients
        .iter()
        .zip(&z)
        .map(|(b, z)| b * z)
        .sum::<f64>()
        + spec.shape_signal_strength * deformation;
    let e: f64 = rng.sample(Exp1);
    let event_time = e / (spec.baseline_hazard_rate * true_log_hazard.exp());
    let censor_uniform: f64 = rng.sample(Open01);
    let cloud_seed: u64 = rng.random();
    let mut pts = shape.sample(deformation, &mut ChaCha8Rng::seed_from_u64(cloud_seed));
    center(&mut pts);
    let cloud = PointCloud::new(pts)?;
    let record = SurvivalRecord::new(subject_id, event_time.max(f64::MIN_POSITIVE), true)?;
    Ok(Draw {
        subject: SyntheticSubject {
            cloud,
            raw,
            deformation,
            true_log_hazard,
            record,
        },
        event_time,
        censor_uniform,
    })
}

/// Horizon `H` with `mean_i min(t_i / H, 1) = target`, the expected censored
/// fraction under `c ~ U(0, H)`.
pub fn calibrate_horizon(event_times: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) || event_times.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "censoring target {target} is not achievable"
        )));
    }
    let rate = |h: f64| {
        event_times.iter().map(|t| (t / h).min(1.0)).sum::<f64>() / event_times.len() as f64
    };
    let max_t = event_times.iter().cloned().fold(0.0, f64::max);
    // rate is 1 at the smallest time and decreases towards 0 as h grows
    let mut lo = event_times.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = max_t.max(lo);
    while rate(hi) > target {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "censoring target {target} is not achievable"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A cohort fully determined by `spec`. Subject `i` draws from stream `i` of
/// the seed, so subjects do not depend on each other.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SyntheticSubject>> {
    spec.validate()?;
    let shape = spec.shape();
    let draws: Vec<Draw> = (0..spec.n_subjects)
        .map(|i| draw_subject(spec, &shape, i))
        .collect::<Result<_>>()?;
    let horizon = if spec.censoring_rate_target > 0.0 {
        let times: Vec<f64> = draws.iter().map(|d| d.event_time).collect();
        Some(calibrate_horizon(&times, spec.censoring_rate_target)?)
    } else {
        None
    };
    draws
        .into_iter()
        .map(|d| {
            let mut s = d.subject;
            let (y, event) = match horizon {
                Some(h) => {
                    let c = d.censor_uniform * h;
                    (d.event_time.min(c), d.event_time <= c)
                }
                None => (d.event_time, true),
            };
            s.record = SurvivalRecord::new(s.record.subject_id, y.max(f64::MIN_POSITIVE), event)?;
            Ok(s)
        })
        .collect()
}
