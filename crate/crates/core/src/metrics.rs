//! Shape deviation metrics between corresponded curves, reported in mm.
//!
//! * MaxED: largest pointwise Euclidean distance.
//! * METE: distance between the distal tips (index 0).
//! * MERS: mean pointwise Euclidean distance.
//!
//! Dataset aggregates are mean and sample standard deviation; the
//! per-segment profile averages the error at each index across samples,
//! index 0 being the distal tip.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::curve::Curve3D;
use crate::spline::{self, SplineError};
use crate::MM_PER_M;

/// Default number of corresponded points.
pub const DEFAULT_CORRESPONDENCE: usize = 20;

/// Index-paired points of two curves, distal first.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePairs {
    pub a: Vec<Vector3<f64>>,
    pub b: Vec<Vector3<f64>>,
}

impl CurvePairs {
    pub fn new(a: Vec<Vector3<f64>>, b: Vec<Vector3<f64>>) -> Self {
        assert_eq!(a.len(), b.len(), "paired lists must have equal length");
        assert!(!a.is_empty(), "paired lists must be nonempty");
        Self { a, b }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Pointwise distances in mm.
    pub fn errors_mm(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(p, q)| (p - q).norm() * MM_PER_M).collect()
    }
}

/// Resamples both curves to `n` equal-arc-length points and pairs them.
pub fn correspond(a: &Curve3D, b: &Curve3D, n: usize) -> Result<CurvePairs, SplineError> {
    let ra = spline::smooth_resample(a, 0.0, n)?;
    let rb = spline::smooth_resample(b, 0.0, n)?;
    Ok(CurvePairs::new(ra.into_points(), rb.into_points()))
}

pub fn max_ed(pairs: &CurvePairs) -> f64 {
    pairs.errors_mm().into_iter().fold(0.0, f64::max)
}

pub fn mete(pairs: &CurvePairs) -> f64 {
    (pairs.a[0] - pairs.b[0]).norm() * MM_PER_M
}

pub fn mers(pairs: &CurvePairs) -> f64 {
    mean(&pairs.errors_mm())
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let m = mean(values);
        let std = if values.len() > 1 {
            let ss = compensated_sum(values.iter().map(|v| (v - m) * (v - m)));
            (ss / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean: m, std }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Metrics of one curve pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub max_ed: f64,
    pub mete: f64,
    pub mers: f64,
    /// Error at each corresponded index, mm.
    pub point_errors: Vec<f64>,
}

impl SampleMetrics {
    pub fn from_pairs(pairs: &CurvePairs) -> Self {
        let point_errors = pairs.errors_mm();
        Self {
            max_ed: point_errors.iter().copied().fold(0.0, f64::max),
            mete: point_errors[0],
            mers: mean(&point_errors),
            point_errors,
        }
    }

    pub fn compare(estimate: &Curve3D, truth: &Curve3D, n: usize) -> Result<Self, SplineError> {
        Ok(Self::from_pairs(&correspond(estimate, truth, n)?))
    }
}

/// Mean error per index across samples. All samples must share one length.
pub fn segment_error_profile(samples: &[SampleMetrics]) -> Vec<f64> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let n = first.point_errors.len();
    (0..n)
        .map(|i| {
            let col: Vec<f64> = samples.iter().map(|s| s.point_errors[i]).collect();
            mean(&col)
        })
        .collect()
}

/// Writes a `segment,mean_error_mm` CSV.
pub fn write_profile_csv<W: Write>(profile: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "segment,mean_error_mm")?;
    for (i, e) in profile.iter().enumerate() {
        writeln!(out, "{i},{e}")?;
    }
    Ok(())
}

/// Aggregate row for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub samples: usize,
    pub failures: usize,
    pub max_ed: Summary,
    pub mete: Summary,
    pub mers: Summary,
    /// `(segment index from the distal end, mean error mm)`.
    pub per_segment_errors: Vec<(usize, f64)>,
}

impl MethodReport {
    pub fn aggregate(method: &str, samples: &[SampleMetrics], failures: usize) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<_>>();
        Self {
            method: method.to_owned(),
            samples: samples.len(),
            failures,
            max_ed: Summary::of(&col(|s| s.max_ed)),
            mete: Summary::of(&col(|s| s.mete)),
            mers: Summary::of(&col(|s| s.mers)),
            per_segment_errors: segment_error_profile(samples).into_iter().enumerate().collect(),
        }
    }
}

/// Per-sample metrics for each method plus aggregate rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeErrorReport {
    pub rows: Vec<MethodReport>,
    pub per_sample: Vec<SampleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    pub method: String,
    /// `None` when the method failed on this sample.
    pub metrics: Option<SampleMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ShapeErrorReport {
    pub fn row(&self, method: &str) -> Option<&MethodReport> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Plain-text table, one line per method.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>18} {:>18} {:>18}\n", "", "MaxED (mm)", "METE (mm)", "MERS (mm)");
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>18} {:>18} {:>18}\n",
                r.method,
                r.max_ed.to_string(),
                r.mete.to_string(),
                r.mers.to_string()
            );
        }
        s
    }

    /// Long-format profile CSV: `method,segment,mean_error_mm`.
    pub fn write_profile_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,segment,mean_error_mm")?;
        for r in &self.rows {
            for (i, e) in &r.per_segment_errors {
                writeln!(out, "{},{i},{e}", r.method)?;
            }
        }
        Ok(())
    }
}
