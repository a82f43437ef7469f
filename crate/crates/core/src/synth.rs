//! Seeded synthetic guidewire datasets.
//!
//! Each sample is a random smooth 3D curve discretised into `n` bodies at a
//! fixed spacing, rendered as stroked binary masks in the top and side
//! views of a [`CameraRig`]. Sample `i` draws from its own ChaCha stream
//! (`seed`, stream `i`), so samples can be generated in any order or in
//! parallel and still come out identical.
//!
//! On-disk layout, all paths relative to the dataset root:
//!
//! ```text
//! manifest.json          DatasetManifest, written last
//! cameras.json           the camera rig
//! sample_00000/top.pgm   top-view mask (P5)
//! sample_00000/side.pgm  side-view mask (P5)
//! sample_00000/gt.csv    ground-truth bodies, x_m,y_m,z_m, distal first
//! sample_00000/meta.json SampleMeta (tip projections, seed, stream)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{Curve3D, CurveError};
use crate::geometry::{CameraModel, CameraRig, GeometryError, View};
use crate::pgm::{self, PgmError};
use crate::skeleton::BinaryMask;
use crate::spline::{self, SplineError};

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_ATTEMPTS: usize = 10_000;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAMERAS_FILE: &str = "cameras.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no admissible curve after {0} attempts; configuration is infeasible")]
    RejectionExhausted(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("body {index} projects outside the image")]
    OutOfFrustum { index: usize },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<SynthError>,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

impl SynthError {
    fn at(index: usize) -> impl FnOnce(SynthError) -> SynthError {
        move |e| SynthError::Sample { index, source: Box::new(e) }
    }
}

/// Shape and placement constraints for random curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    /// Lower corner of the workspace box (m).
    pub workspace_min: [f64; 3],
    /// Upper corner of the workspace box (m).
    pub workspace_max: [f64; 3],
    /// Admissible length of the generating curve (m).
    pub length_range: [f64; 2],
    /// Upper bound on curvature along the generating curve (1/m).
    pub max_curvature: f64,
    /// Number of bodies in the ground truth.
    pub bodies: usize,
    /// Distance between consecutive bodies (m).
    pub spacing: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            workspace_min: [-0.06; 3],
            workspace_max: [0.06; 3],
            length_range: [0.04, 0.10],
            max_curvature: 60.0,
            bodies: 20,
            spacing: 0.002,
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if (0..3).any(|i| !(self.workspace_max[i] > self.workspace_min[i])) {
            return bad("workspace box is empty".into());
        }
        let [lo, hi] = self.length_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("length range [{lo}, {hi}]"));
        }
        if self.bodies < 2 {
            return bad(format!("need at least 2 bodies, got {}", self.bodies));
        }
        if !(self.spacing > 0.0) {
            return bad(format!("spacing {}", self.spacing));
        }
        if !(self.max_curvature > 0.0) {
            return bad(format!("curvature bound {}", self.max_curvature));
        }
        let wire = (self.bodies - 1) as f64 * self.spacing;
        if wire > hi {
            return bad(format!("{} bodies at {} m need {wire} m of curve, longer than {hi} m", self.bodies, self.spacing));
        }
        Ok(())
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.workspace_min[i] && p[i] <= self.workspace_max[i])
    }
}

/// Everything needed to produce one sample besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub curve: CurveConfig,
    /// Stroke radius of the rendered wire (px).
    pub stroke_radius_px: f64,
    /// Bodies must project at least this far inside the image (px).
    pub frustum_margin_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { curve: CurveConfig::default(), stroke_radius_px: 1.5, frustum_margin_px: 3.0 }
    }
}

/// Cubic Bézier segment.
#[derive(Debug, Clone, Copy)]
struct Bezier([Vector3<f64>; 4]);

impl Bezier {
    fn point(&self, t: f64) -> Vector3<f64> {
        let s = 1.0 - t;
        let p = &self.0;
        p[0] * (s * s * s) + p[1] * (3.0 * s * s * t) + p[2] * (3.0 * s * t * t) + p[3] * (t * t * t)
    }

    fn d1(&self, t: f64) -> Vector3<f64> {
        let s = 1.0 - t;
        let p = &self.0;
        (p[1] - p[0]) * (3.0 * s * s) + (p[2] - p[1]) * (6.0 * s * t) + (p[3] - p[2]) * (3.0 * t * t)
    }

    fn d2(&self, t: f64) -> Vector3<f64> {
        let p = &self.0;
        (p[2] - p[1] * 2.0 + p[0]) * (6.0 * (1.0 - t)) + (p[3] - p[2] * 2.0 + p[1]) * (6.0 * t)
    }

    fn curvature(&self, t: f64) -> f64 {
        let d1 = self.d1(t);
        let speed = d1.norm();
        if speed < 1e-12 {
            return f64::INFINITY;
        }
        d1.cross(&self.d2(t)).norm() / (speed * speed * speed)
    }

    fn polyline(&self, m: usize) -> Vec<Vector3<f64>> {
        (0..=m).map(|i| self.point(i as f64 / m as f64)).collect()
    }
}

const BEZIER_SAMPLES: usize = 2000;

/// Bodies along `poly` from its start, each exactly `spacing` (chord) from
/// the previous one. `None` if the polyline runs out first.
fn chain_bodies(poly: &[Vector3<f64>], bodies: usize, spacing: f64) -> Option<Vec<Vector3<f64>>> {
    let mut out = vec![poly[0]];
    let mut seg = 0;
    while out.len() < bodies {
        let anchor = *out.last().unwrap();
        // first polyline vertex beyond the sphere of radius `spacing`
        while seg + 1 < poly.len() && (poly[seg + 1] - anchor).norm() < spacing {
            seg += 1;
        }
        if seg + 1 >= poly.len() {
            return None;
        }
        // intersect segment [seg, seg+1] with the sphere
        let (a, b) = (poly[seg], poly[seg + 1]);
        let d = b - a;
        let f = a - anchor;
        let qa = d.dot(&d);
        let qb = 2.0 * f.dot(&d);
        let qc = f.dot(&f) - spacing * spacing;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let t = ((-qb + disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0);
        out.push(a + d * t);
    }
    Some(out)
}

/// RNG for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a random admissible curve.
///
/// Control points of a cubic Bézier are drawn uniformly in the workspace;
/// candidates are rejected unless their length lies in the configured range,
/// their curvature stays under the bound and every body projects inside both
/// views of `rig` (when given). Bodies are chained from the first control
/// point, which becomes the distal tip.
pub fn generate_curve<R: Rng>(rng: &mut R, config: &SynthConfig, rig: Option<&CameraRig>) -> Result<Curve3D, SynthError> {
    let cc = &config.curve;
    cc.validate()?;
    let uniform = |rng: &mut R| {
        Vector3::from_fn(|i, _| rng.gen_range(cc.workspace_min[i]..=cc.workspace_max[i]))
    };
    for _ in 0..MAX_ATTEMPTS {
        let bez = Bezier([uniform(rng), uniform(rng), uniform(rng), uniform(rng)]);
        let poly = bez.polyline(BEZIER_SAMPLES);
        let length: f64 = poly.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        if length < cc.length_range[0] || length > cc.length_range[1] {
            continue;
        }
        if (0..=BEZIER_SAMPLES / 4).any(|i| bez.curvature(i as f64 / (BEZIER_SAMPLES / 4) as f64) > cc.max_curvature) {
            continue;
        }
        let Some(bodies) = chain_bodies(&poly, cc.bodies, cc.spacing) else {
            continue;
        };
        if !bodies.iter().all(|p| cc.contains(p)) {
            continue;
        }
        if let Some(rig) = rig {
            if !in_frustum(&bodies, &rig.top, config.frustum_margin_px) || !in_frustum(&bodies, &rig.side, config.frustum_margin_px) {
                continue;
            }
        }
        return Ok(Curve3D::new(bodies)?);
    }
    Err(SynthError::RejectionExhausted(MAX_ATTEMPTS))
}

fn in_frustum(points: &[Vector3<f64>], cam: &CameraModel, margin: f64) -> bool {
    points.iter().all(|p| {
        cam.depth(p) > 0.0 && cam.project_point(p).is_ok_and(|px| cam.contains_pixel(&px, margin))
    })
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + d * t)).norm()
}

/// A rendered view: the mask and the projected distal tip.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub mask: BinaryMask,
    pub tip: Vector2<f64>,
}

/// Strokes the projection of `curve` into a mask of the camera's size.
///
/// The curve is spline-resampled to ten times its body count and each
/// projected segment is drawn as a capsule of radius `radius_px`.
pub fn render_mask(curve: &Curve3D, cam: &CameraModel, radius_px: f64) -> Result<RenderedView, SynthError> {
    let (w, h) = (cam.image_size.0 as usize, cam.image_size.1 as usize);
    let project = |index: usize, p: &Vector3<f64>| -> Result<Vector2<f64>, SynthError> {
        if cam.depth(p) <= 0.0 {
            return Err(SynthError::OutOfFrustum { index });
        }
        let px = cam.project_point(p).map_err(|_| SynthError::OutOfFrustum { index })?;
        if !cam.contains_pixel(&px, 0.0) {
            return Err(SynthError::OutOfFrustum { index });
        }
        Ok(px)
    };
    for (i, p) in curve.points().iter().enumerate() {
        project(i, p)?;
    }
    let dense = spline::smooth_resample(curve, 0.0, 10 * curve.len())?;
    let px: Vec<Vector2<f64>> = dense
        .points()
        .iter()
        .map(|p| cam.project_point(p))
        .collect::<Result<_, _>>()?;
    let mut mask = BinaryMask::new(w, h);
    for seg in px.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let c0 = (a.x.min(b.x) - radius_px).floor().max(0.0) as usize;
        let c1 = (a.x.max(b.x) + radius_px).ceil().min(w as f64 - 1.0) as usize;
        let r0 = (a.y.min(b.y) - radius_px).floor().max(0.0) as usize;
        let r1 = (a.y.max(b.y) + radius_px).ceil().min(h as f64 - 1.0) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                if segment_distance(&Vector2::new(c as f64, r as f64), &a, &b) <= radius_px {
                    mask.set(r, c, true);
                }
            }
        }
    }
    Ok(RenderedView { mask, tip: project(0, &curve.points()[0])? })
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidewireSample {
    pub id: usize,
    pub top_mask: BinaryMask,
    pub side_mask: BinaryMask,
    pub cameras: CameraRig,
    pub ground_truth: Curve3D,
    pub tip_top: Vector2<f64>,
    pub tip_side: Vector2<f64>,
}

impl GuidewireSample {
    pub fn mask(&self, view: View) -> &BinaryMask {
        match view {
            View::Top => &self.top_mask,
            View::Side => &self.side_mask,
        }
    }

    pub fn tip(&self, view: View) -> Vector2<f64> {
        match view {
            View::Top => self.tip_top,
            View::Side => self.tip_side,
        }
    }
}

/// Generates sample `index` of the dataset seeded with `seed`.
pub fn generate_sample(seed: u64, index: usize, config: &SynthConfig, rig: &CameraRig) -> Result<GuidewireSample, SynthError> {
    let mut rng = sample_rng(seed, index as u64);
    let curve = generate_curve(&mut rng, config, Some(rig))?;
    let top = render_mask(&curve, &rig.top, config.stroke_radius_px)?;
    let side = render_mask(&curve, &rig.side, config.stroke_radius_px)?;
    Ok(GuidewireSample {
        id: index,
        top_mask: top.mask,
        side_mask: side.mask,
        cameras: *rig,
        ground_truth: curve,
        tip_top: top.tip,
        tip_side: side.tip,
    })
}

/// Generates `count` samples in memory, in index order.
pub fn generate_samples(seed: u64, count: usize, config: &SynthConfig, rig: &CameraRig) -> Result<Vec<GuidewireSample>, SynthError> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(seed, i, config, rig).map_err(SynthError::at(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub bodies: usize,
    pub spacing_m: f64,
    /// Camera rig file, relative to the dataset root.
    pub cameras: String,
    pub generator: SynthConfig,
    /// Sample directories, relative to the dataset root.
    pub samples: Vec<String>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Per-sample metadata stored next to the masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub seed: u64,
    pub stream: u64,
    /// Projected distal tip in the top view, `[u, v]` px.
    pub tip_top: [f64; 2],
    /// Projected distal tip in the side view, `[u, v]` px.
    pub tip_side: [f64; 2],
    pub bodies: usize,
    pub spacing_m: f64,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

fn write_sample(root: &Path, seed: u64, sample: &GuidewireSample, config: &SynthConfig) -> Result<(), SynthError> {
    let dir = root.join(sample_dir_name(sample.id));
    fs::create_dir_all(&dir)?;
    pgm::write(&dir.join("top.pgm"), &sample.top_mask)?;
    pgm::write(&dir.join("side.pgm"), &sample.side_mask)?;
    let mut gt = Vec::new();
    sample.ground_truth.write_csv(&mut gt)?;
    fs::write(dir.join("gt.csv"), gt)?;
    let meta = SampleMeta {
        id: sample.id,
        seed,
        stream: sample.id as u64,
        tip_top: [sample.tip_top.x, sample.tip_top.y],
        tip_side: [sample.tip_side.x, sample.tip_side.y],
        bodies: config.curve.bodies,
        spacing_m: config.curve.spacing,
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// Writes `count` samples under `out_dir` and then the manifest.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    config: &SynthConfig,
    rig: &CameraRig,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    config.curve.validate()?;
    fs::create_dir_all(out_dir)?;
    rig.save(&out_dir.join(CAMERAS_FILE))?;
    (0..count).into_par_iter().try_for_each(|i| {
        generate_sample(seed, i, config, rig)
            .and_then(|s| write_sample(out_dir, seed, &s, config))
            .map_err(SynthError::at(i))
    })?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        count,
        seed,
        bodies: config.curve.bodies,
        spacing_m: config.curve.spacing,
        cameras: CAMERAS_FILE.into(),
        generator: config.clone(),
        samples: (0..count).map(sample_dir_name).collect(),
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(manifest)
}

/// A dataset loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rig: CameraRig,
    pub samples: Vec<GuidewireSample>,
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Parse { path: path.to_path_buf(), message: e.to_string() }
}

impl Dataset {
    /// Reads and validates every sample listed in the manifest.
    pub fn load(root: &Path) -> Result<Self, SynthError> {
        let manifest_path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| parse_err(&manifest_path, e))?;
        let manifest = DatasetManifest::from_json(&text).map_err(|e| parse_err(&manifest_path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(parse_err(&manifest_path, format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.samples.len() != manifest.count {
            return Err(parse_err(
                &manifest_path,
                format!("count {} but {} samples listed", manifest.count, manifest.samples.len()),
            ));
        }
        let rig_path = root.join(&manifest.cameras);
        let rig = CameraRig::load(&rig_path).map_err(|e| parse_err(&rig_path, e))?;
        let samples = manifest
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, name)| Self::load_sample(&root.join(name), i, &rig, &manifest).map_err(SynthError::at(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { manifest, rig, samples })
    }

    fn load_sample(dir: &Path, index: usize, rig: &CameraRig, manifest: &DatasetManifest) -> Result<GuidewireSample, SynthError> {
        let top_path = dir.join("top.pgm");
        let side_path = dir.join("side.pgm");
        let gt_path = dir.join("gt.csv");
        let meta_path = dir.join("meta.json");
        let top = pgm::read(&top_path).map_err(|e| parse_err(&top_path, e))?;
        let side = pgm::read(&side_path).map_err(|e| parse_err(&side_path, e))?;
        let gt_file = fs::File::open(&gt_path).map_err(|e| parse_err(&gt_path, e))?;
        let gt = Curve3D::read_csv(gt_file).map_err(|e| parse_err(&gt_path, e))?;
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| parse_err(&meta_path, e))?;
        let meta: SampleMeta = serde_json::from_str(&meta_text).map_err(|e| parse_err(&meta_path, e))?;
        if gt.len() != manifest.bodies {
            return Err(parse_err(&gt_path, format!("{} bodies, manifest says {}", gt.len(), manifest.bodies)));
        }
        Ok(GuidewireSample {
            id: index,
            top_mask: top,
            side_mask: side,
            cameras: *rig,
            ground_truth: gt,
            tip_top: Vector2::from(meta.tip_top),
            tip_side: Vector2::from(meta.tip_side),
        })
    }
}
