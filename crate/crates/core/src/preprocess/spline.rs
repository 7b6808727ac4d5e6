use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGREE: usize = 3;

/// Natural cubic spline basis without intercept, built from cubic B-splines
/// projected onto the null space of the second-derivative-at-boundary
/// constraints. Beyond the boundary knots the basis continues linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplineKnots", into = "SplineKnots")]
pub struct NaturalSpline {
    lower: f64,
    upper: f64,
    interior: Vec<f64>,
    cache: Cache,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplineKnots {
    lower: f64,
    upper: f64,
    interior: Vec<f64>,
}

impl TryFrom<SplineKnots> for NaturalSpline {
    type Error = Error;

    fn try_from(k: SplineKnots) -> Result<Self> {
        NaturalSpline::new(k.lower, k.upper, k.interior)
    }
}

impl From<NaturalSpline> for SplineKnots {
    fn from(s: NaturalSpline) -> Self {
        SplineKnots {
            lower: s.lower,
            upper: s.upper,
            interior: s.interior,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Cache {
    knots: Vec<f64>,
    /// `(n_bsplines - 1) × df`, row-major.
    projection: Vec<f64>,
    df: usize,
    value_lo: Vec<f64>,
    slope_lo: Vec<f64>,
    value_hi: Vec<f64>,
    slope_hi: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(lower: f64, upper: f64, interior: Vec<f64>) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidArgument(format!(
                "spline boundary knots must satisfy lower < upper, got {lower}, {upper}"
            )));
        }
        let mut prev = lower;
        for &k in &interior {
            if !(k > prev && k < upper) {
                return Err(Error::InvalidArgument(format!(
                    "interior knots {interior:?} must be strictly increasing inside ({lower}, {upper})"
                )));
            }
            prev = k;
        }
        let cache = build_cache(lower, upper, &interior);
        Ok(NaturalSpline {
            lower,
            upper,
            interior,
            cache,
        })
    }

    /// Boundary knots at the data range, `df - 1` interior knots at the
    /// `j/df` sample quantiles.
    pub fn from_data(values: &[f64], df: usize) -> Result<Self> {
        if df == 0 {
            return Err(Error::InvalidArgument("spline needs df >= 1".into()));
        }
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "spline knots need finite data".into(),
            ));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let interior = (1..df)
            .map(|j| quantile(&sorted, j as f64 / df as f64))
            .collect();
        NaturalSpline::new(sorted[0], sorted[sorted.len() - 1], interior)
    }

    pub fn boundary_knots(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    pub fn df(&self) -> usize {
        self.interior.len() + 1
    }

    fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let c = self.cache();
        if x < self.lower {
            let dx = x - self.lower;
            c.value_lo
                .iter()
                .zip(&c.slope_lo)
                .map(|(v, s)| v + s * dx)
                .collect()
        } else if x > self.upper {
            let dx = x - self.upper;
            c.value_hi
                .iter()
                .zip(&c.slope_hi)
                .map(|(v, s)| v + s * dx)
                .collect()
        } else {
            project(c, &bspline_values(&c.knots, x, 0))
        }
    }
}

fn build_cache(lower: f64, upper: f64, interior: &[f64]) -> Cache {
    let mut knots = vec![lower; DEGREE + 1];
    knots.extend_from_slice(interior);
    knots.extend(std::iter::repeat_n(upper, DEGREE + 1));
    let n_b = knots.len() - DEGREE - 1;
    let df = n_b - 3;
    // second-derivative constraints at both boundaries, first B-spline
    // dropped (no intercept)
    let c_lo = bspline_values(&knots, lower, 2);
    let c_hi = bspline_values(&knots, upper, 2);
    let m = n_b - 1;
    let mut ct = vec![0.0; m * 2];
    for i in 0..m {
        ct[i * 2] = c_lo[i + 1];
        ct[i * 2 + 1] = c_hi[i + 1];
    }
    let q = householder_q(&ct, m, 2);
    let mut projection = vec![0.0; m * df];
    for i in 0..m {
        for j in 0..df {
            projection[i * df + j] = q[i * m + j + 2];
        }
    }
    let mut cache = Cache {
        knots,
        projection,
        df,
        value_lo: Vec::new(),
        slope_lo: Vec::new(),
        value_hi: Vec::new(),
        slope_hi: Vec::new(),
    };
    cache.value_lo = project(&cache, &bspline_values(&cache.knots, lower, 0));
    cache.slope_lo = project(&cache, &bspline_values(&cache.knots, lower, 1));
    cache.value_hi = project(&cache, &bspline_values(&cache.knots, upper, 0));
    cache.slope_hi = project(&cache, &bspline_values(&cache.knots, upper, 1));
    cache
}

fn project(c: &Cache, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.df];
    for (i, bi) in b.iter().skip(1).enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += bi * c.projection[i * c.df + j];
        }
    }
    out
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Values (or `deriv`-th derivatives) at `x` of all cubic B-splines on an
/// augmented knot vector; `x` must lie within the boundary knots.
fn bspline_values(knots: &[f64], x: f64, deriv: usize) -> Vec<f64> {
    basis(knots, DEGREE, x, deriv)
}

fn basis(t: &[f64], p: usize, x: f64, deriv: usize) -> Vec<f64> {
    let n = t.len() - p - 1;
    if deriv > 0 {
        let lower = basis(t, p - 1, x, deriv - 1);
        let pf = p as f64;
        return (0..n)
            .map(|i| {
                let a = ratio(lower[i], t[i + p] - t[i]);
                let b = ratio(lower[i + 1], t[i + p + 1] - t[i + 1]);
                pf * (a - b)
            })
            .collect();
    }
    // degree 0: half-open spans, except the last non-empty span is closed
    let last = t[t.len() - 1];
    let mut b: Vec<f64> = (0..t.len() - 1)
        .map(|i| {
            let inside = if x == last {
                t[i] < t[i + 1] && t[i + 1] == last
            } else {
                t[i] <= x && x < t[i + 1]
            };
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for d in 1..=p {
        let m = t.len() - d - 1;
        let next: Vec<f64> = (0..m)
            .map(|i| {
                ratio((x - t[i]) * b[i], t[i + d] - t[i])
                    + ratio((t[i + d + 1] - x) * b[i + 1], t[i + d + 1] - t[i + 1])
            })
            .collect();
        b = next;
    }
    b
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Full orthogonal factor `Q` (`m×m`, row-major) of the Householder QR of an
/// `m×k` matrix.
fn householder_q(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut r = a.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for col in 0..k {
        let norm = (col..m).map(|i| r[i * k + col].powi(2)).sum::<f64>().sqrt();
        let mut v = vec![0.0; m];
        for i in col..m {
            v[i] = r[i * k + col];
        }
        let alpha = if v[col] >= 0.0 { -norm } else { norm };
        v[col] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in 0..k {
                let dot: f64 = (col..m).map(|i| v[i] * r[i * k + j]).sum();
                for i in col..m {
                    r[i * k + j] -= 2.0 * v[i] * dot / vnorm2;
                }
            }
        }
        reflectors.push(v);
    }
    let mut q = vec![0.0; m * m];
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        for v in reflectors.iter().rev() {
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let dot: f64 = v.iter().zip(&e).map(|(a, b)| a * b).sum();
            for (ei, vi) in e.iter_mut().zip(v) {
                *ei -= 2.0 * vi * dot / vnorm2;
            }
        }
        for i in 0..m {
            q[i * m + j] = e[i];
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spline() -> NaturalSpline {
        NaturalSpline::new(50.0, 90.0, vec![60.0, 70.0, 80.0]).unwrap()
    }

    #[test]
    fn partition_of_unity() {
        let t = [0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0];
        for x in [0.0, 0.3, 1.0, 2.5, 3.0] {
            let s: f64 = bspline_values(&t, x, 0).iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "x={x}");
        }
    }

    #[test]
    fn satisfies_natural_boundary_conditions() {
        let s = spline();
        let c = s.cache();
        for x in [50.0, 90.0] {
            let d2 = project(c, &bspline_values(&c.knots, x, 2));
            assert!(d2.iter().all(|v| v.abs() < 1e-12), "{d2:?}");
        }
    }

    #[test]
    fn linear_beyond_boundaries() {
        let s = spline();
        let h = 0.5;
        for x in [30.0, 45.0, 95.0, 120.0] {
            let (a, b, c) = (s.evaluate(x - h), s.evaluate(x), s.evaluate(x + h));
            for j in 0..4 {
                assert!((a[j] - 2.0 * b[j] + c[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn continuous_at_boundaries() {
        let s = spline();
        for x in [50.0, 90.0] {
            let at = s.evaluate(x);
            for eps in [1e-9, -1e-9] {
                let near = s.evaluate(x + eps);
                for j in 0..4 {
                    assert!((at[j] - near[j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn second_derivative_continuous_at_knots() {
        let s = spline();
        let h = 1e-3;
        for x in [50.0, 60.0, 70.0, 80.0, 90.0] {
            let f = |z: f64| s.evaluate(z);
            let (m2, m1, c, p1, p2) = (f(x - 2.0 * h), f(x - h), f(x), f(x + h), f(x + 2.0 * h));
            for j in 0..4 {
                let left = (c[j] - 2.0 * m1[j] + m2[j]) / (h * h);
                let right = (p2[j] - 2.0 * p1[j] + c[j]) / (h * h);
                // one-sided differences carry an O(h) bias
                assert!(
                    (left - right).abs() < 1e-5,
                    "x={x} j={j}: {left} vs {right}"
                );
            }
        }
    }

    #[test]
    fn quartile_knots_from_data() {
        let data: Vec<f64> = (0..=8).map(|i| 50.0 + 5.0 * i as f64).collect();
        let s = NaturalSpline::from_data(&data, 4).unwrap();
        assert_eq!(s.boundary_knots(), (50.0, 90.0));
        assert_eq!(s.interior_knots(), &[60.0, 70.0, 80.0]);
        assert_eq!(s.df(), 4);
    }

    #[test]
    fn rejects_degenerate_knots() {
        assert!(NaturalSpline::new(1.0, 1.0, vec![]).is_err());
        assert!(NaturalSpline::new(0.0, 1.0, vec![0.5, 0.5]).is_err());
        assert!(NaturalSpline::from_data(&[3.0; 10], 4).is_err());
    }

    #[test]
    fn q_is_orthogonal() {
        let a = [1.0, 2.0, 3.0, -1.0, 0.5, 4.0, 2.0, 2.0];
        let q = householder_q(&a, 4, 2);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|r| q[r * 4 + i] * q[r * 4 + j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        // trailing columns are orthogonal to the columns of a
        for j in 2..4 {
            for c in 0..2 {
                let dot: f64 = (0..4).map(|r| q[r * 4 + j] * a[r * 2 + c]).sum();
                assert!(dot.abs() < 1e-12);
            }
        }
    }
}
