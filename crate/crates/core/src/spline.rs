//! Parametric cubic splines through 3D points and equal-arc-length
//! resampling.
//!
//! Each coordinate is a clamped cubic B-spline over the normalized chord
//! length parameter `t` in `[0, 1]`, with a knot at every data parameter.
//! With smoothing 0 the spline interpolates the data with natural end
//! conditions. With smoothing `S > 0` it minimises `∫|c''(t)|² dt` subject to
//! a total squared residual of at most `S` (all three coordinates pooled).

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{Curve3D, CurveError};

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("all input points coincide")]
    DegenerateInput,
    #[error("smoothing factor must be finite and nonnegative, got {0}")]
    InvalidSmoothing(f64),
    #[error("need at least 2 output points, got {0}")]
    TooFewPoints(usize),
    #[error("spline system is singular")]
    Singular,
    #[error(transparent)]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    knots: Vec<f64>,
    /// Control values per coordinate (x, y, z).
    coefficients: [Vec<f64>; 3],
    degree: usize,
    smoothing: f64,
    /// Chord-length parameters of the fitted data.
    params: Vec<f64>,
}

/// Index of the knot span containing `t`.
fn find_span(knots: &[f64], degree: usize, n_ctrl: usize, t: f64) -> usize {
    if t >= knots[n_ctrl] {
        return n_ctrl - 1;
    }
    if t <= knots[degree] {
        return degree;
    }
    let (mut lo, mut hi) = (degree, n_ctrl);
    let mut mid = (lo + hi) / 2;
    while t < knots[mid] || t >= knots[mid + 1] {
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
        mid = (lo + hi) / 2;
    }
    mid
}

/// Nonzero basis functions and their derivatives up to `nder` at `t`.
/// `out[k][j]` is the k-th derivative of basis `span - degree + j`.
fn basis_derivatives(knots: &[f64], degree: usize, span: usize, t: f64, nder: usize) -> Vec<Vec<f64>> {
    let p = degree;
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let nder = nder.min(p);
    let mut ders = vec![vec![0.0; p + 1]; nder + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let mut a = vec![vec![0.0; p + 1]; 2];
    for r in 0..=p {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=nder {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = p - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

/// Normalized cumulative chord lengths.
pub fn chord_parameters(points: &[Vector3<f64>]) -> Result<Vec<f64>, SplineError> {
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(SplineError::DegenerateInput);
    }
    let mut t: Vec<f64> = cum.iter().map(|c| c / total).collect();
    *t.last_mut().unwrap() = 1.0;
    Ok(t)
}

/// Dense evaluation count used for arc-length inversion.
pub fn dense_resolution(n: usize) -> usize {
    1000.max(50 * n)
}

impl SplineModel {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn coefficients(&self) -> &[Vec<f64>; 3] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn n_ctrl(&self) -> usize {
        self.coefficients[0].len()
    }

    /// Derivatives `0..=nder` of the curve at `t` (clamped to `[0, 1]`).
    pub fn derivatives(&self, t: f64, nder: usize) -> Vec<Vector3<f64>> {
        let t = t.clamp(0.0, 1.0);
        let span = find_span(&self.knots, self.degree, self.n_ctrl(), t);
        let basis = basis_derivatives(&self.knots, self.degree, span, t, nder);
        basis
            .iter()
            .map(|row| {
                let mut v = Vector3::zeros();
                for (j, b) in row.iter().enumerate() {
                    let i = span - self.degree + j;
                    v += Vector3::new(self.coefficients[0][i], self.coefficients[1][i], self.coefficients[2][i]) * *b;
                }
                v
            })
            .chain(std::iter::repeat(Vector3::zeros()))
            .take(nder + 1)
            .collect()
    }

    pub fn evaluate(&self, t: f64) -> Vector3<f64> {
        self.derivatives(t, 0)[0]
    }

    pub fn tangent(&self, t: f64) -> Vector3<f64> {
        self.derivatives(t, 1)[1]
    }

    /// Arc length by adaptive Simpson quadrature of `|c'(t)|` over each
    /// knot span.
    pub fn arc_length(&self) -> f64 {
        let speed = |t: f64| self.tangent(t).norm();
        let mut spans: Vec<f64> = self.knots.clone();
        spans.dedup();
        spans
            .windows(2)
            .map(|w| adaptive_simpson(&speed, w[0], w[1], 1e-11, 40))
            .sum()
    }

    /// Points at `m + 1` uniform parameters and their cumulative chord length.
    pub fn dense_polyline(&self, m: usize) -> (Vec<f64>, Vec<Vector3<f64>>, Vec<f64>) {
        let ts: Vec<f64> = (0..=m).map(|i| i as f64 / m as f64).collect();
        let pts: Vec<Vector3<f64>> = ts.iter().map(|&t| self.evaluate(t)).collect();
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
        }
        (ts, pts, cum)
    }

    /// `n` points at equal arc length, endpoints included.
    pub fn resample_equal_arclength(&self, n: usize) -> Result<Curve3D, SplineError> {
        self.resample_with_resolution(n, dense_resolution(n))
    }

    /// As [`Self::resample_equal_arclength`] with an explicit dense
    /// evaluation count.
    pub fn resample_with_resolution(&self, n: usize, dense: usize) -> Result<Curve3D, SplineError> {
        if n < 2 {
            return Err(SplineError::TooFewPoints(n));
        }
        let (ts, _, cum) = self.dense_polyline(dense);
        let total = *cum.last().unwrap();
        let mut out = Vec::with_capacity(n);
        let mut j = 0;
        for k in 0..n {
            let t = if k == 0 {
                0.0
            } else if k == n - 1 {
                1.0
            } else {
                let s = total * k as f64 / (n - 1) as f64;
                while j + 2 < cum.len() && cum[j + 1] < s {
                    j += 1;
                }
                let f = (s - cum[j]) / (cum[j + 1] - cum[j]);
                ts[j] + f * (ts[j + 1] - ts[j])
            };
            out.push(self.evaluate(t));
        }
        Ok(Curve3D::new(out)?)
    }

    /// Squared residual at the fitted data, summed over coordinates.
    pub fn residual_sum_of_squares(&self, curve: &Curve3D) -> f64 {
        self.params
            .iter()
            .zip(curve.points())
            .map(|(&t, p)| (self.evaluate(t) - p).norm_squared())
            .sum()
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// Fits the spline described in the module docs. Two or three points use a
/// single polynomial piece of degree `n - 1` that interpolates them.
pub fn fit_spline(curve: &Curve3D, smoothing: f64) -> Result<SplineModel, SplineError> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(SplineError::InvalidSmoothing(smoothing));
    }
    let pts = curve.points();
    let params = chord_parameters(pts)?;
    let m = pts.len();
    if m < 4 {
        return fit_polynomial(pts, params, smoothing);
    }
    let degree = 3;
    let mut knots = vec![0.0; degree + 1];
    knots.extend_from_slice(&params[1..m - 1]);
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    let n_ctrl = m + 2;
    let design = design_matrix(&knots, degree, n_ctrl, &params);

    let coefficients = if smoothing == 0.0 {
        interpolate(&knots, degree, &design, pts)?
    } else {
        smooth(&knots, degree, &design, pts, smoothing)?
    };
    Ok(SplineModel { knots, coefficients, degree, smoothing, params })
}

fn design_matrix(knots: &[f64], degree: usize, n_ctrl: usize, params: &[f64]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(params.len(), n_ctrl);
    for (i, &t) in params.iter().enumerate() {
        let span = find_span(knots, degree, n_ctrl, t);
        let basis = basis_derivatives(knots, degree, span, t, 0);
        for (j, v) in basis[0].iter().enumerate() {
            b[(i, span - degree + j)] = *v;
        }
    }
    b
}

fn column(pts: &[Vector3<f64>], axis: usize) -> DVector<f64> {
    DVector::from_iterator(pts.len(), pts.iter().map(|p| p[axis]))
}

fn interpolate(knots: &[f64], degree: usize, design: &DMatrix<f64>, pts: &[Vector3<f64>]) -> Result<[Vec<f64>; 3], SplineError> {
    let (m, n_ctrl) = design.shape();
    let mut a = DMatrix::zeros(n_ctrl, n_ctrl);
    a.view_mut((0, 0), (m, n_ctrl)).copy_from(design);
    // natural end conditions c''(0) = c''(1) = 0
    for (row, t) in [(m, 0.0), (m + 1, 1.0)] {
        let span = find_span(knots, degree, n_ctrl, t);
        let d = basis_derivatives(knots, degree, span, t, 2);
        let scale = d[2].iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        for (j, v) in d[2].iter().enumerate() {
            a[(row, span - degree + j)] = v / scale;
        }
    }
    let lu = a.lu();
    let mut out: [Vec<f64>; 3] = Default::default();
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut rhs = DVector::zeros(n_ctrl);
        rhs.rows_mut(0, m).copy_from(&column(pts, axis));
        let sol = lu.solve(&rhs).ok_or(SplineError::Singular)?;
        *slot = sol.iter().copied().collect();
    }
    Ok(out)
}

/// Gram matrix of second derivatives, `∫ B_i'' B_j'' dt`.
fn roughness_matrix(knots: &[f64], degree: usize, n_ctrl: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(n_ctrl, n_ctrl);
    let g = 0.5 / 3f64.sqrt();
    for span in degree..n_ctrl {
        let (a, b) = (knots[span], knots[span + 1]);
        if b <= a {
            continue;
        }
        let h = b - a;
        // two-point Gauss is exact: B'' is linear on a span
        for x in [0.5 - g, 0.5 + g] {
            let t = a + x * h;
            let d = basis_derivatives(knots, degree, span, t, 2);
            for i in 0..=degree {
                for j in 0..=degree {
                    omega[(span - degree + i, span - degree + j)] += 0.5 * h * d[2][i] * d[2][j];
                }
            }
        }
    }
    omega
}

fn smooth(
    knots: &[f64],
    degree: usize,
    design: &DMatrix<f64>,
    pts: &[Vector3<f64>],
    target: f64,
) -> Result<[Vec<f64>; 3], SplineError> {
    let n_ctrl = design.ncols();
    let omega = roughness_matrix(knots, degree, n_ctrl);
    let btb = design.transpose() * design;
    let ys: Vec<DVector<f64>> = (0..3).map(|a| column(pts, a)).collect();
    let bty: Vec<DVector<f64>> = ys.iter().map(|y| design.transpose() * y).collect();
    let scale = btb.trace() / omega.trace();

    let solve = |log_lambda: f64| -> Option<([Vec<f64>; 3], f64)> {
        let lambda = scale * 10f64.powf(log_lambda);
        let chol = (&btb + &omega * lambda).cholesky()?;
        let mut rss = 0.0;
        let mut out: [Vec<f64>; 3] = Default::default();
        for axis in 0..3 {
            let c = chol.solve(&bty[axis]);
            rss += (design * &c - &ys[axis]).norm_squared();
            out[axis] = c.iter().copied().collect();
        }
        Some((out, rss))
    };

    let (mut lo, mut hi) = (-10.0, 10.0);
    let stiff = solve(hi).ok_or(SplineError::Singular)?;
    if stiff.1 <= target {
        return Ok(stiff.0);
    }
    let loose = match solve(lo) {
        Some(fit) if fit.1 <= target => fit,
        _ => return interpolate(knots, degree, design, pts),
    };
    let mut best = loose.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        match solve(mid) {
            Some((c, rss)) if rss <= target => {
                best = c;
                lo = mid;
            }
            _ => hi = mid,
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(best)
}

fn fit_polynomial(pts: &[Vector3<f64>], params: Vec<f64>, smoothing: f64) -> Result<SplineModel, SplineError> {
    let m = pts.len();
    let degree = m - 1;
    let mut knots = vec![0.0; m];
    knots.extend(std::iter::repeat_n(1.0, m));
    let design = design_matrix(&knots, degree, m, &params);
    let lu = design.lu();
    let mut coefficients: [Vec<f64>; 3] = Default::default();
    for (axis, slot) in coefficients.iter_mut().enumerate() {
        let sol = lu.solve(&column(pts, axis)).ok_or(SplineError::Singular)?;
        *slot = sol.iter().copied().collect();
    }
    Ok(SplineModel { knots, coefficients, degree, smoothing, params })
}

/// Fits with `smoothing` and resamples to `n` equal-arc-length points.
pub fn smooth_resample(curve: &Curve3D, smoothing: f64, n: usize) -> Result<Curve3D, SplineError> {
    fit_spline(curve, smoothing)?.resample_equal_arclength(n)
}
