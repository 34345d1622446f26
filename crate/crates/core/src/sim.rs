//! Synthetic dynamic scenes with ground truth, oracle detections and the
//! depth-aware keypoint filter.
//!
//! A scene is a cloud of static landmarks plus up to two rigidly moving
//! clusters: one "known" cluster that an oracle detector reports as a
//! bounding box with a foreground depth (a person-like target), and one
//! "unknown" cluster that never appears in any detection (a carried box or
//! balloon). The camera orbits the workspace on a circular or linear path,
//! always looking at the workspace center.
//!
//! Rendering is a pure function of `(scene, frame)`: per-frame RNG streams
//! are derived from the scene seed, so frames can be rendered concurrently
//! and byte-identically.

use std::io::Write;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{project_with_depth, CameraIntrinsics, MapPoint, Observation, SE3Pose};
use crate::{invalid, Result};

/// Measurement standard deviation attached to every rendered observation,
/// in pixels. Residual whitening divides by this, so the kernel scale can
/// stay at 1.
pub const OBSERVATION_SIGMA: f64 = 1.0;

/// Radius of the known-dynamic cluster (meters). Kept small enough that the
/// cluster's depth extent stays below the default filter margin, which the
/// filter-soundness guarantee relies on.
pub const KNOWN_CLUSTER_RADIUS: f64 = 0.1;

/// Radius of the unknown-dynamic cluster (meters).
pub const UNKNOWN_CLUSTER_RADIUS: f64 = 0.35;

/// Minimum clearance between static points and the known cluster's path
/// (meters), so background depths stay separated from the foreground.
const STATIC_CLEARANCE: f64 = 1.0;

/// Padding added around detected cluster pixels when forming a box.
const BOX_PIXEL_PADDING: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Static,
    KnownDynamic,
    UnknownDynamic,
}

impl PointLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointLabel::Static => "static",
            PointLabel::KnownDynamic => "known_dynamic",
            PointLabel::UnknownDynamic => "unknown_dynamic",
        }
    }
}

/// Rigid constant-velocity motion active over a frame interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel {
    /// Meters per frame.
    pub velocity: Vector3<f64>,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl MotionModel {
    pub fn stationary() -> Self {
        Self { velocity: Vector3::zeros(), start_frame: 0, end_frame: 0 }
    }

    pub fn new(velocity: Vector3<f64>, start_frame: usize, end_frame: usize) -> Self {
        Self { velocity, start_frame, end_frame }
    }

    pub fn is_stationary(&self) -> bool {
        self.velocity == Vector3::zeros() || self.end_frame <= self.start_frame
    }

    /// Accumulated displacement at `frame`: zero before the interval,
    /// linear inside it, frozen at the total after it.
    pub fn displacement_at(&self, frame: usize) -> Vector3<f64> {
        let t = frame.clamp(self.start_frame, self.end_frame) - self.start_frame;
        self.velocity * t as f64
    }

    pub fn total_displacement(&self) -> Vector3<f64> {
        self.displacement_at(self.end_frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryShape {
    Circular,
    Linear,
}

/// Everything needed to generate and render a scene deterministically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub n_static: usize,
    pub n_known_dynamic: usize,
    pub n_unknown_dynamic: usize,
    /// Gaussian noise added to rendered pixels.
    pub pixel_noise_sigma: f64,
    /// Gaussian noise added to emitted depths (meters).
    pub depth_noise_sigma: f64,
    /// Probability that a visible known-dynamic cluster is reported.
    pub detection_recall: f64,
    pub known_motion: MotionModel,
    pub unknown_motion: MotionModel,
    pub trajectory: TrajectoryShape,
    /// Camera orbit radius (meters).
    pub radius: f64,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_static: 120,
            n_known_dynamic: 30,
            n_unknown_dynamic: 100,
            pixel_noise_sigma: 0.5,
            depth_noise_sigma: 0.05,
            detection_recall: 1.0,
            known_motion: MotionModel::new(Vector3::new(0.010, 0.0, 0.004), 30, 150),
            unknown_motion: MotionModel::new(Vector3::new(0.012, 0.009, 0.0), 40, 120),
            trajectory: TrajectoryShape::Circular,
            radius: 6.0,
            frames: 200,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_static + self.n_known_dynamic + self.n_unknown_dynamic == 0 {
            return Err(invalid("scene must contain at least one point"));
        }
        if self.pixel_noise_sigma < 0.0 || self.depth_noise_sigma < 0.0 {
            return Err(invalid("noise sigmas must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.detection_recall) {
            return Err(invalid(format!(
                "detection_recall must be in [0, 1], got {}",
                self.detection_recall
            )));
        }
        if self.frames == 0 {
            return Err(invalid("trajectory needs at least one frame"));
        }
        if self.radius <= 0.0 {
            return Err(invalid("camera radius must be positive"));
        }
        Ok(())
    }

    /// Same scene content with a different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One scene point together with its label and motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub point: MapPoint,
    pub label: PointLabel,
    pub motion: MotionModel,
}

/// A generated scene: labeled points, ground-truth camera trajectory and
/// camera intrinsics.
#[derive(Debug, Clone)]
pub struct SimScene {
    pub points: Vec<ScenePoint>,
    pub gt_trajectory: Vec<SE3Pose>,
    pub intrinsics: CameraIntrinsics,
    pub config: SceneConfig,
}

impl SimScene {
    pub fn frames(&self) -> usize {
        self.gt_trajectory.len()
    }

    /// World position of point index `idx` at `frame`.
    pub fn position_at(&self, idx: usize, frame: usize) -> Vector3<f64> {
        let sp = &self.points[idx];
        sp.point.position + sp.motion.displacement_at(frame)
    }

    pub fn label_of(&self, point_id: u64) -> Option<PointLabel> {
        self.points.iter().find(|p| p.point.id == point_id).map(|p| p.label)
    }

    /// Initial (frame 0) landmark positions, e.g. to seed a map.
    pub fn initial_map(&self) -> Vec<MapPoint> {
        self.points.iter().map(|p| p.point).collect()
    }
}

/// Axis-aligned oracle detection with the median depth of the detected
/// object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub frame_id: usize,
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
    pub foreground_depth: f64,
}

impl DetectionBox {
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= self.min.x && pixel.x <= self.max.x && pixel.y >= self.min.y && pixel.y <= self.max.y
    }
}

/// Rendered measurements for one frame. `depths` is aligned with
/// `observations`.
#[derive(Debug, Clone)]
pub struct FrameObservations {
    pub frame_id: usize,
    pub observations: Vec<Observation>,
    pub depths: Vec<f64>,
    pub boxes: Vec<DetectionBox>,
}

fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("static intrinsics")
}

/// World-to-camera pose looking from `eye` toward `target`, image x to the
/// camera's right, image y down.
fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> SE3Pose {
    let forward = (target - eye).normalize();
    let world_up = Vector3::new(0.0, 0.0, 1.0);
    let mut right = forward.cross(&world_up);
    if right.norm() < 1e-9 {
        right = forward.cross(&Vector3::new(0.0, 1.0, 0.0));
    }
    let right = right.normalize();
    let down = forward.cross(&right).normalize();
    let r_wc = Matrix3::from_columns(&[right, down, forward]);
    let r_cw = r_wc.transpose();
    SE3Pose::new(r_cw, -(r_cw * eye))
}

fn camera_center(config: &SceneConfig, frame: usize) -> Vector3<f64> {
    let n = config.frames.max(2) as f64;
    let t = frame as f64 / (n - 1.0);
    match config.trajectory {
        TrajectoryShape::Circular => {
            let angle = 2.0 * std::f64::consts::PI * t;
            let height = 0.8 * (2.0 * std::f64::consts::PI * 2.0 * t).sin();
            Vector3::new(config.radius * angle.cos(), config.radius * angle.sin(), height)
        }
        TrajectoryShape::Linear => {
            let y = -2.0 + 4.0 * t;
            Vector3::new(config.radius, y, 0.5 + 0.3 * (2.0 * std::f64::consts::PI * t).sin())
        }
    }
}

fn point_to_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let denom = ab.norm_squared();
    if denom < 1e-18 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / denom).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn sample_in_ball(rng: &mut ChaCha8Rng, center: Vector3<f64>, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return center + v * radius;
        }
    }
}

/// Builds the labeled point cloud and ground-truth trajectory for `config`.
/// Deterministic in the seed.
pub fn generate_scene(config: &SceneConfig) -> Result<SimScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let known_center = Vector3::new(1.6, 1.2, 0.0);
    let unknown_center = Vector3::new(-1.4, 1.0, 0.3);
    let known_path_end = known_center + config.known_motion.total_displacement();

    let mut points = Vec::with_capacity(config.n_static + config.n_known_dynamic + config.n_unknown_dynamic);
    let mut next_id = 0u64;

    for _ in 0..config.n_static {
        // Keep static structure away from the known cluster's whole path so
        // a detection box never swallows background at foreground depth.
        let position = loop {
            let candidate = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.2..1.2),
            );
            if point_to_segment_distance(&candidate, &known_center, &known_path_end) >= STATIC_CLEARANCE {
                break candidate;
            }
        };
        points.push(ScenePoint {
            point: MapPoint::new(next_id, position),
            label: PointLabel::Static,
            motion: MotionModel::stationary(),
        });
        next_id += 1;
    }
    for _ in 0..config.n_known_dynamic {
        let position = sample_in_ball(&mut rng, known_center, KNOWN_CLUSTER_RADIUS);
        points.push(ScenePoint {
            point: MapPoint::new(next_id, position),
            label: PointLabel::KnownDynamic,
            motion: config.known_motion,
        });
        next_id += 1;
    }
    for _ in 0..config.n_unknown_dynamic {
        let position = sample_in_ball(&mut rng, unknown_center, UNKNOWN_CLUSTER_RADIUS);
        points.push(ScenePoint {
            point: MapPoint::new(next_id, position),
            label: PointLabel::UnknownDynamic,
            motion: config.unknown_motion,
        });
        next_id += 1;
    }

    let gt_trajectory = (0..config.frames)
        .map(|k| look_at(camera_center(config, k), Vector3::zeros()))
        .collect();

    Ok(SimScene { points, gt_trajectory, intrinsics: default_intrinsics(), config: *config })
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    // splitmix-style stream separation per frame
    let stream = (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x1234_5678);
    ChaCha8Rng::seed_from_u64(seed ^ stream)
}

/// Renders one frame: moves dynamic points to their positions at `frame`,
/// projects through the ground-truth pose, adds pixel and depth noise, and
/// emits an oracle detection for the known cluster with probability
/// `detection_recall`.
pub fn render_frame(scene: &SimScene, frame: usize) -> Result<FrameObservations> {
    if frame >= scene.frames() {
        return Err(invalid(format!(
            "frame {frame} outside trajectory of {} frames",
            scene.frames()
        )));
    }
    let pose = &scene.gt_trajectory[frame];
    let mut rng = frame_rng(scene.config.seed, frame);
    let pixel_noise = Normal::new(0.0, scene.config.pixel_noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let depth_noise = Normal::new(0.0, scene.config.depth_noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

    let mut observations = Vec::new();
    let mut depths = Vec::new();
    let mut known_pixels: Vec<Vector2<f64>> = Vec::new();
    let mut known_depths: Vec<f64> = Vec::new();

    for (idx, sp) in scene.points.iter().enumerate() {
        let world = scene.position_at(idx, frame);
        let Some((true_pixel, true_depth)) = project_with_depth(pose, &world, &scene.intrinsics) else {
            continue;
        };
        if !scene.intrinsics.contains(&true_pixel) {
            continue;
        }
        let noisy_pixel = if scene.config.pixel_noise_sigma > 0.0 {
            true_pixel + Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng))
        } else {
            true_pixel
        };
        if !scene.intrinsics.contains(&noisy_pixel) {
            continue;
        }
        let noisy_depth = if scene.config.depth_noise_sigma > 0.0 {
            true_depth + depth_noise.sample(&mut rng)
        } else {
            true_depth
        };
        observations.push(
            Observation::new(sp.point.id, frame, noisy_pixel, OBSERVATION_SIGMA)
                .expect("constant sigma is valid"),
        );
        depths.push(noisy_depth);
        if sp.label == PointLabel::KnownDynamic {
            known_pixels.push(noisy_pixel);
            known_depths.push(noisy_depth);
        }
    }

    let mut boxes = Vec::new();
    if !known_pixels.is_empty() && rng.random_range(0.0..1.0) < scene.config.detection_recall {
        let pad = 3.0 * scene.config.pixel_noise_sigma + BOX_PIXEL_PADDING;
        let min_x = known_pixels.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - pad;
        let max_x = known_pixels.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + pad;
        let min_y = known_pixels.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - pad;
        let max_y = known_pixels.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + pad;
        boxes.push(DetectionBox {
            frame_id: frame,
            min: Vector2::new(min_x.max(0.0), min_y.max(0.0)),
            max: Vector2::new(
                max_x.min(scene.intrinsics.width as f64),
                max_y.min(scene.intrinsics.height as f64),
            ),
            foreground_depth: median(&mut known_depths.clone()),
        });
    }

    Ok(FrameObservations { frame_id: frame, observations, depths, boxes })
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Depth-aware keypoint filtering. Observations outside all boxes pass
/// through untouched; an observation inside a box survives only when its
/// depth is inconsistent with the box foreground (background visible
/// through the detection), and is discarded otherwise.
pub fn semantic_filter(frame: &FrameObservations, depth_margin: f64) -> FrameObservations {
    assert!(depth_margin > 0.0, "depth margin must be positive");
    let mut observations = Vec::with_capacity(frame.observations.len());
    let mut depths = Vec::with_capacity(frame.depths.len());
    for (obs, &depth) in frame.observations.iter().zip(&frame.depths) {
        let foreground = frame.boxes.iter().any(|b| {
            b.contains(&obs.pixel) && (depth - b.foreground_depth).abs() <= depth_margin
        });
        if !foreground {
            observations.push(*obs);
            depths.push(depth);
        }
    }
    FrameObservations {
        frame_id: frame.frame_id,
        observations,
        depths,
        boxes: frame.boxes.clone(),
    }
}

/// Writes observations as a text table, one
/// `frame_id point_id u v depth label` row per line.
pub fn write_observation_dump<W: Write>(
    mut w: W,
    scene: &SimScene,
    frames: &[FrameObservations],
) -> std::io::Result<()> {
    writeln!(w, "# frame_id point_id u v depth label")?;
    for frame in frames {
        for (obs, depth) in frame.observations.iter().zip(&frame.depths) {
            let label = scene
                .label_of(obs.point_id)
                .map(|l| l.as_str())
                .unwrap_or("unknown");
            writeln!(
                w,
                "{} {} {:.9} {:.9} {:.9} {}",
                frame.frame_id, obs.point_id, obs.pixel.x, obs.pixel.y, depth, label
            )?;
        }
    }
    Ok(())
}
