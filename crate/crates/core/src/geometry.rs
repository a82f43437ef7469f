//! Pinhole cameras and two-view linear triangulation.
//!
//! World units are metres. A camera maps a world point `X` to the homogeneous
//! pixel `x = K [R | t] X`, where `K` holds the focal lengths, skew and
//! principal point. Pixel `(u, v)` has `u` along image columns and `v` along
//! image rows, with pixel centres at integer coordinates.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, RowVector4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{Curve3D, CurveError};

/// Tolerance on `R^T R = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;
/// Smallest `|w|` accepted when dehomogenizing.
pub const DEHOMOGENIZE_EPS: f64 = 1e-12;
/// Relative gap below which the two smallest singular values of the DLT
/// system are treated as equal (no unique solution).
pub const DEGENERACY_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (error {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid homogeneous point: all components are zero")]
    ZeroPoint,
    #[error("projection has |w| = {0:.3e}; point lies on the camera plane")]
    DegenerateProjection(f64),
    #[error("image point has |w| = {0:.3e} and cannot be normalized")]
    PointAtInfinity(f64),
    #[error("degenerate two-view geometry (singular values {0:.3e} and {1:.3e})")]
    DegenerateGeometry(f64, f64),
    #[error("triangulated point has |W| = {0:.3e}")]
    DehomogenizationFailure(f64),
    #[error("point lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at point {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<GeometryError>,
    },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("camera file: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub skew: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation in metres.
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let err = ortho.max(det);
        if !(err <= ROTATION_TOL) {
            return Err(GeometryError::InvalidRotation(err));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `center` looking along `forward`, with image rows running
    /// along `down`. `down` is orthogonalised against `forward`.
    pub fn looking(center: Vector3<f64>, forward: Vector3<f64>, down: Vector3<f64>) -> Result<Self, GeometryError> {
        let z = forward.normalize();
        let y = (down - z * z.dot(&down)).normalize();
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, -(rotation * center))
    }

    /// `[R | t]`.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// A homogeneous world point `[X, Y, Z, W]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint3(pub Vector4<f64>);

impl HomogeneousPoint3 {
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self, GeometryError> {
        let v = Vector4::new(x, y, z, w);
        if v.iter().all(|c| *c == 0.0) {
            return Err(GeometryError::ZeroPoint);
        }
        Ok(Self(v))
    }

    pub fn from_euclidean(p: &Vector3<f64>) -> Self {
        Self(p.push(1.0))
    }

    pub fn to_euclidean(&self) -> Result<Vector3<f64>, GeometryError> {
        let w = self.0.w;
        if w.abs() < DEHOMOGENIZE_EPS {
            return Err(GeometryError::DehomogenizationFailure(w.abs()));
        }
        Ok(self.0.xyz() / w)
    }
}

/// A homogeneous image point `[u, v, w]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint2(pub Vector3<f64>);

impl HomogeneousPoint2 {
    pub fn new(u: f64, v: f64, w: f64) -> Result<Self, GeometryError> {
        let p = Vector3::new(u, v, w);
        if p.iter().all(|c| *c == 0.0) {
            return Err(GeometryError::ZeroPoint);
        }
        Ok(Self(p))
    }

    pub fn from_pixel(px: &Vector2<f64>) -> Self {
        Self(px.push(1.0))
    }

    /// Pixel coordinates `(u/w, v/w)`.
    pub fn to_pixel(&self) -> Result<Vector2<f64>, GeometryError> {
        let w = self.0.z;
        if w.abs() < DEHOMOGENIZE_EPS {
            return Err(GeometryError::DegenerateProjection(w.abs()));
        }
        Ok(self.0.xy() / w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

impl CameraModel {
    pub fn new(
        intrinsics: CameraIntrinsics,
        extrinsics: CameraExtrinsics,
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let (w, h) = image_size;
        let k = &intrinsics;
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if w == 0 || h == 0 {
            return bad(format!("image size {w}x{h}"));
        }
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", k.fx, k.fy));
        }
        if !k.skew.is_finite() {
            return bad("skew is not finite".into());
        }
        if !(0.0..=w as f64).contains(&k.cx) || !(0.0..=h as f64).contains(&k.cy) {
            return bad(format!("principal point ({}, {}) outside {w}x{h}", k.cx, k.cy));
        }
        CameraExtrinsics::new(extrinsics.rotation, extrinsics.translation)?;
        Ok(Self { intrinsics, extrinsics, image_size })
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        self.intrinsics.matrix() * self.extrinsics.matrix()
    }

    pub fn project(&self, x: &HomogeneousPoint3) -> HomogeneousPoint2 {
        HomogeneousPoint2(self.projection_matrix() * x.0)
    }

    /// Pixel coordinates of a Euclidean world point.
    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.project(&HomogeneousPoint3::from_euclidean(p)).to_pixel()
    }

    /// Depth of `p` along the optical axis.
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        let e = &self.extrinsics;
        (e.rotation * p + e.translation).z
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        let e = &self.extrinsics;
        -(e.rotation.transpose() * e.translation)
    }

    /// World size of one pixel at `depth`, using the mean focal length.
    pub fn pixel_footprint(&self, depth: f64) -> f64 {
        2.0 * depth / (self.intrinsics.fx + self.intrinsics.fy)
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>, margin: f64) -> bool {
        let (w, h) = self.image_size;
        px.x >= margin && px.y >= margin && px.x <= w as f64 - 1.0 - margin && px.y <= h as f64 - 1.0 - margin
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    intrinsics: CameraIntrinsics,
    /// Row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    image_size: [u32; 2],
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = GeometryError;

    fn try_from(r: CameraRecord) -> Result<Self, Self::Error> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        let ext = CameraExtrinsics::new(rot, Vector3::from(r.translation))?;
        CameraModel::new(r.intrinsics, ext, (r.image_size[0], r.image_size[1]))
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let r = &c.extrinsics.rotation;
        let t = &c.extrinsics.translation;
        CameraRecord {
            intrinsics: c.intrinsics,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.x, t.y, t.z],
            image_size: [c.image_size.0, c.image_size.1],
        }
    }
}

/// Which of the two orthogonal views an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Top,
    Side,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Top => "top",
            View::Side => "side",
        }
    }
}

impl std::str::FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top" => Ok(View::Top),
            "side" => Ok(View::Side),
            other => Err(format!("unknown view {other:?} (expected top or side)")),
        }
    }
}

/// The orthogonal top/side camera pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub top: CameraModel,
    pub side: CameraModel,
}

/// Parameters of the default orthogonal rig.
pub mod rig_defaults {
    pub const FOCAL_PX: f64 = 175.0;
    pub const PRINCIPAL_PX: f64 = 40.0;
    pub const IMAGE_PX: u32 = 80;
    pub const DISTANCE_M: f64 = 0.3;
}

impl CameraRig {
    /// Top view looks along -Z, side view along -X; both cameras sit
    /// 0.3 m from the world origin with identical intrinsics.
    pub fn default_orthogonal() -> Self {
        use rig_defaults::*;
        let k = CameraIntrinsics { fx: FOCAL_PX, fy: FOCAL_PX, skew: 0.0, cx: PRINCIPAL_PX, cy: PRINCIPAL_PX };
        let size = (IMAGE_PX, IMAGE_PX);
        let top = CameraExtrinsics::looking(
            Vector3::new(0.0, 0.0, DISTANCE_M),
            -Vector3::z(),
            -Vector3::y(),
        )
        .expect("valid top pose");
        let side = CameraExtrinsics::looking(
            Vector3::new(DISTANCE_M, 0.0, 0.0),
            -Vector3::x(),
            -Vector3::z(),
        )
        .expect("valid side pose");
        Self {
            top: CameraModel::new(k, top, size).expect("valid top camera"),
            side: CameraModel::new(k, side, size).expect("valid side camera"),
        }
    }

    pub fn camera(&self, view: View) -> &CameraModel {
        match view {
            View::Top => &self.top,
            View::Side => &self.side,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, GeometryError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// The 4x4 DLT system for one correspondence.
///
/// Each view contributes `u P[2] - P[0]` and `v P[2] - P[1]`; the third
/// cross-product row is a linear combination of these and is dropped.
pub fn dlt_system(
    p1: &Matrix3x4<f64>,
    p2: &Matrix3x4<f64>,
    x1: &HomogeneousPoint2,
    x2: &HomogeneousPoint2,
) -> Result<Matrix4<f64>, GeometryError> {
    let normalize = |x: &HomogeneousPoint2| {
        let w = x.0.z;
        if w.abs() < DEHOMOGENIZE_EPS {
            Err(GeometryError::PointAtInfinity(w.abs()))
        } else {
            Ok((x.0.x / w, x.0.y / w))
        }
    };
    let (u1, v1) = normalize(x1)?;
    let (u2, v2) = normalize(x2)?;
    let rows: [RowVector4<f64>; 4] = [
        p1.row(2) * u1 - p1.row(0),
        p1.row(2) * v1 - p1.row(1),
        p2.row(2) * u2 - p2.row(0),
        p2.row(2) * v2 - p2.row(1),
    ];
    Ok(Matrix4::from_rows(&rows))
}

/// Null-space solution of a DLT system.
#[derive(Debug, Clone, Copy)]
pub struct DltSolution {
    /// Unit-norm minimiser of `|A X|`.
    pub homogeneous: Vector4<f64>,
    /// Singular values of `A`, descending.
    pub singular_values: Vector4<f64>,
}

/// Right singular vector of the smallest singular value of `a`.
pub fn solve_dlt(a: &Matrix4<f64>) -> Result<DltSolution, GeometryError> {
    let svd = a.svd_unordered(false, true);
    let v_t = svd.v_t.expect("V^T requested");
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = Vector4::from_fn(|i, _| svd.singular_values[order[i]]);
    if sv[2] - sv[3] <= DEGENERACY_REL_TOL * sv[0] {
        return Err(GeometryError::DegenerateGeometry(sv[2], sv[3]));
    }
    let x = v_t.row(order[3]).transpose();
    Ok(DltSolution { homogeneous: x / x.norm(), singular_values: sv })
}

/// Linear triangulation of one point seen by two cameras.
pub fn triangulate_point(
    p1: &Matrix3x4<f64>,
    p2: &Matrix3x4<f64>,
    x1: &HomogeneousPoint2,
    x2: &HomogeneousPoint2,
) -> Result<Vector3<f64>, GeometryError> {
    let a = dlt_system(p1, p2, x1, x2)?;
    let sol = solve_dlt(&a)?;
    HomogeneousPoint3(sol.homogeneous).to_euclidean()
}

/// Triangulates index-corresponded pixel lists (distal first).
pub fn triangulate_polyline(
    cam1: &CameraModel,
    cam2: &CameraModel,
    pts1: &[Vector2<f64>],
    pts2: &[Vector2<f64>],
) -> Result<Curve3D, GeometryError> {
    if pts1.len() != pts2.len() {
        return Err(GeometryError::LengthMismatch(pts1.len(), pts2.len()));
    }
    let p1 = cam1.projection_matrix();
    let p2 = cam2.projection_matrix();
    let points = pts1
        .iter()
        .zip(pts2)
        .enumerate()
        .map(|(index, (a, b))| {
            triangulate_point(&p1, &p2, &HomogeneousPoint2::from_pixel(a), &HomogeneousPoint2::from_pixel(b))
                .map_err(|e| GeometryError::AtIndex { index, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Curve3D::new(points)?)
}
