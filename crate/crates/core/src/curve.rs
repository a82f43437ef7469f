//! Ordered 3D point sequences (distal tip first) and their CSV form.

use std::io::{Read, Write};

use nalgebra::Vector3;
use thiserror::Error;

/// Minimum separation between consecutive points, in metres.
pub const MIN_POINT_GAP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("a curve needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("points {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected csv header {0:?}, expected x_m,y_m,z_m")]
    BadHeader(Vec<String>),
}

/// A guidewire shape: points in metres, index 0 at the distal tip.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve3D {
    points: Vec<Vector3<f64>>,
}

impl Curve3D {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, CurveError> {
        if points.len() < 2 {
            return Err(CurveError::TooFewPoints(points.len()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(CurveError::NonFinite(i));
            }
        }
        for i in 1..points.len() {
            if (points[i] - points[i - 1]).norm() <= MIN_POINT_GAP {
                return Err(CurveError::CoincidentPoints(i - 1, i));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tip(&self) -> Vector3<f64> {
        self.points[0]
    }

    /// Length of the polyline through the points.
    pub fn polyline_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Distances between consecutive points.
    pub fn gaps(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).collect()
    }

    /// Flattened `[x0, y0, z0, x1, ...]` scaled by `scale`.
    pub fn to_flat(&self, scale: f64) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|p| [p.x * scale, p.y * scale, p.z * scale])
            .collect()
    }

    pub fn from_flat(values: &[f64], scale: f64) -> Result<Self, CurveError> {
        let pts = values
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] / scale, c[1] / scale, c[2] / scale))
            .collect();
        Self::new(pts)
    }

    /// Writes `x_m,y_m,z_m` CSV, one point per row, distal first.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CurveError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x_m", "y_m", "z_m"])?;
        for p in &self.points {
            w.write_record([p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CurveError> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != ["x_m", "y_m", "z_m"] {
            return Err(CurveError::BadHeader(header));
        }
        let mut pts = Vec::new();
        for rec in r.deserialize::<(f64, f64, f64)>() {
            let (x, y, z) = rec?;
            pts.push(Vector3::new(x, y, z));
        }
        Self::new(pts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_and_coincident() {
        assert!(matches!(
            Curve3D::new(vec![Vector3::zeros()]),
            Err(CurveError::TooFewPoints(1))
        ));
        assert!(matches!(
            Curve3D::new(vec![Vector3::zeros(), Vector3::zeros()]),
            Err(CurveError::CoincidentPoints(0, 1))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let c = Curve3D::new(vec![
            Vector3::new(0.1, -0.2, 1.0 / 3.0),
            Vector3::new(1e-7, 2.5, -0.003),
        ])
        .unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"x_m,y_m,z_m\n"));
        let back = Curve3D::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_header_is_reported() {
        let err = Curve3D::read_csv("x,y,z\n0,0,0\n1,1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CurveError::BadHeader(_)));
    }
}
