//! End-to-end flows: two-view reconstruction and dataset evaluation.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::Curve3D;
use crate::fgrn::{mask_to_image, FgrnModel, TrainingExample};
use crate::geometry::{self, CameraModel, CameraRig, View};
use crate::metrics::{MethodReport, SampleMetrics, SampleRow, ShapeErrorReport};
use crate::skeleton::{self, BinaryMask, DistalRule};
use crate::spline;
use crate::synth::GuidewireSample;
use crate::MM_PER_M;

/// Report row names, in report order.
pub const RECONSTRUCTION_ROW: &str = "Reconstruction";
pub const FGRN_ROW: &str = "3D-FGRN";

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self { stage, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    /// Points sampled per view and bodies in the output curve.
    pub bodies: usize,
    /// Spline smoothing factor (m²); 0 interpolates.
    pub smoothing: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self { bodies: 20, smoothing: 0.0 }
    }
}

/// Thins `mask`, keeps its largest component, extracts the longest
/// backbone, orients it tip-first and samples `n` points.
pub fn extract_backbone(mask: &BinaryMask, rule: DistalRule, n: usize) -> Result<Vec<Vector2<f64>>, skeleton::SkeletonError> {
    let skel = skeleton::thin(mask).largest_component();
    let path = skeleton::longest_path(&skel)?;
    let path = skeleton::orient_distal_first(&path, rule);
    skeleton::sample_backbone(&path, n)
}

/// Output of [`reconstruct`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Equal-arc-length resampled curve, distal first.
    pub curve: Curve3D,
    pub top_points: Vec<Vector2<f64>>,
    pub side_points: Vec<Vector2<f64>>,
    /// `curve` reprojected into each view.
    pub reprojected_top: Vec<Vector2<f64>>,
    pub reprojected_side: Vec<Vector2<f64>>,
}

fn reproject(curve: &Curve3D, cam: &CameraModel) -> Result<Vec<Vector2<f64>>, geometry::GeometryError> {
    curve.points().iter().map(|p| cam.project_point(p)).collect()
}

/// Skeletonize both views, sample, triangulate, fit and resample.
pub fn reconstruct(
    top: &BinaryMask,
    side: &BinaryMask,
    rig: &CameraRig,
    top_rule: DistalRule,
    side_rule: DistalRule,
    config: &ReconstructConfig,
) -> Result<Reconstruction, PipelineError> {
    let n = config.bodies;
    let top_points = extract_backbone(top, top_rule, n).map_err(|e| PipelineError::new("skeleton (top)", e))?;
    let side_points = extract_backbone(side, side_rule, n).map_err(|e| PipelineError::new("skeleton (side)", e))?;
    let raw = geometry::triangulate_polyline(&rig.top, &rig.side, &top_points, &side_points)
        .map_err(|e| PipelineError::new("triangulation", e))?;
    let curve = spline::smooth_resample(&raw, config.smoothing, n).map_err(|e| PipelineError::new("spline", e))?;
    let reprojected_top = reproject(&curve, &rig.top).map_err(|e| PipelineError::new("reprojection", e))?;
    let reprojected_side = reproject(&curve, &rig.side).map_err(|e| PipelineError::new("reprojection", e))?;
    Ok(Reconstruction { curve, top_points, side_points, reprojected_top, reprojected_side })
}

/// Distal rule for a view without a tip hint.
pub fn border_rule(cam: &CameraModel) -> DistalRule {
    DistalRule::AwayFromBorder { width: cam.image_size.0 as usize, height: cam.image_size.1 as usize }
}

/// Reconstructs a synthetic sample using its recorded tip projections.
pub fn reconstruct_sample(sample: &GuidewireSample, config: &ReconstructConfig) -> Result<Reconstruction, PipelineError> {
    reconstruct(
        &sample.top_mask,
        &sample.side_mask,
        &sample.cameras,
        DistalRule::NearestTo(sample.tip(View::Top)),
        DistalRule::NearestTo(sample.tip(View::Side)),
        config,
    )
}

/// Anything that maps a sample to a predicted shape.
pub trait ShapePredictor: Sync {
    fn predict(&self, sample: &GuidewireSample) -> Result<Curve3D, PipelineError>;
}

/// Returns the ground truth; useful as a perfect reference.
pub struct GroundTruthPredictor;

impl ShapePredictor for GroundTruthPredictor {
    fn predict(&self, sample: &GuidewireSample) -> Result<Curve3D, PipelineError> {
        Ok(sample.ground_truth.clone())
    }
}

/// Triangulation pipeline as a predictor.
pub struct TriangulationPredictor(pub ReconstructConfig);

impl ShapePredictor for TriangulationPredictor {
    fn predict(&self, sample: &GuidewireSample) -> Result<Curve3D, PipelineError> {
        reconstruct_sample(sample, &self.0).map(|r| r.curve)
    }
}

/// Learned monoplane predictor reading one view.
pub struct FgrnPredictor<'a> {
    pub model: &'a FgrnModel,
    pub view: View,
}

impl ShapePredictor for FgrnPredictor<'_> {
    fn predict(&self, sample: &GuidewireSample) -> Result<Curve3D, PipelineError> {
        self.model.predict_curve(sample.mask(self.view)).map_err(|e| PipelineError::new("prediction", e))
    }
}

/// Where training targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Output of the two-view reconstruction.
    Triangulated,
    GroundTruth,
}

pub struct TrainingSet {
    pub examples: Vec<TrainingExample>,
    /// Sample id behind each example.
    pub sample_ids: Vec<usize>,
    /// Samples whose target could not be built, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Pairs each sample's mask in `view` with an `n`-body target in mm.
pub fn training_set(samples: &[&GuidewireSample], view: View, source: TargetSource, config: &ReconstructConfig) -> TrainingSet {
    let built: Vec<Result<TrainingExample, PipelineError>> = samples
        .par_iter()
        .map(|s| {
            let target = match source {
                TargetSource::Triangulated => reconstruct_sample(s, config)?.curve,
                TargetSource::GroundTruth => spline::smooth_resample(&s.ground_truth, 0.0, config.bodies)
                    .map_err(|e| PipelineError::new("spline", e))?,
            };
            Ok(TrainingExample { image: mask_to_image(s.mask(view)), target: target.to_flat(MM_PER_M) })
        })
        .collect();
    let mut set = TrainingSet { examples: Vec::new(), sample_ids: Vec::new(), skipped: Vec::new() };
    for (s, r) in samples.iter().zip(built) {
        match r {
            Ok(e) => {
                set.examples.push(e);
                set.sample_ids.push(s.id);
            }
            Err(e) => set.skipped.push((s.id, e.to_string())),
        }
    }
    set
}

fn score(
    method: &str,
    predictor: &dyn ShapePredictor,
    samples: &[&GuidewireSample],
    n: usize,
) -> (MethodReport, Vec<SampleRow>) {
    let rows: Vec<SampleRow> = samples
        .par_iter()
        .map(|s| {
            let result = predictor
                .predict(s)
                .and_then(|c| SampleMetrics::compare(&c, &s.ground_truth, n).map_err(|e| PipelineError::new("metrics", e)));
            match result {
                Ok(m) => SampleRow { sample: s.id, method: method.into(), metrics: Some(m), error: None },
                Err(e) => SampleRow { sample: s.id, method: method.into(), metrics: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let ok: Vec<SampleMetrics> = rows.iter().filter_map(|r| r.metrics.clone()).collect();
    let failures = rows.len() - ok.len();
    (MethodReport::aggregate(method, &ok, failures), rows)
}

/// Scores the triangulation pipeline and, if given, a learned predictor
/// against ground truth. Rows come out as `Reconstruction`, then `3D-FGRN`.
pub fn evaluate(
    samples: &[&GuidewireSample],
    config: &ReconstructConfig,
    model: Option<&dyn ShapePredictor>,
    correspondence: usize,
) -> ShapeErrorReport {
    let (recon, mut per_sample) = score(RECONSTRUCTION_ROW, &TriangulationPredictor(*config), samples, correspondence);
    let mut rows = vec![recon];
    if let Some(m) = model {
        let (r, s) = score(FGRN_ROW, m, samples, correspondence);
        rows.push(r);
        per_sample.extend(s);
    }
    ShapeErrorReport { rows, per_sample }
}
