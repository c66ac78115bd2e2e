//! Synthetic labeled LiDAR streams: a flat ground, a single sphere, and a
//! street with buildings, parked cars and one moving object.
//!
//! Class ids: 0 ground, 1 building, 2 car, 3 dynamic.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{frame_file_name, write_boxes, write_poses, write_xyzl, BoxAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{Frame, Obb, Point3, Pose, Vec3};
use crate::instance::{CarShape, SyntheticShapeFamily};

pub const GROUND: u32 = 0;
pub const BUILDING: u32 = 1;
pub const CAR: u32 = 2;
pub const DYNAMIC: u32 = 3;

pub const FRAME_DIR: &str = "frames";
pub const POSE_FILE: &str = "poses.txt";
pub const BOX_FILE: &str = "boxes.txt";
pub const GT_FILE: &str = "gt_points.xyzl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Plane,
    Street,
    Sphere,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Scenario::Plane),
            "street" => Ok(Scenario::Street),
            "sphere" => Ok(Scenario::Sphere),
            other => Err(Error::param(format!(
                "unknown scenario `{other}` (expected plane, street or sphere)"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Plane => "plane",
            Scenario::Street => "street",
            Scenario::Sphere => "sphere",
        })
    }
}

/// Scan pattern: `rows` elevation rings times `cols` azimuth steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPattern {
    pub rows: usize,
    pub cols: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub max_range: f64,
}

impl ScanPattern {
    fn directions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let t = if self.rows == 1 {
                0.5
            } else {
                r as f64 / (self.rows - 1) as f64
            };
            let el = (self.min_elevation_deg + t * (self.max_elevation_deg - self.min_elevation_deg)).to_radians();
            for c in 0..self.cols {
                let az = std::f64::consts::TAU * c as f64 / self.cols as f64;
                out.push(Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scenario: Scenario,
    pub n_frames: usize,
    pub seed: u64,
    pub scan: ScanPattern,
    /// Density multiplier (per axis) of the ground-truth scan.
    pub gt_density: usize,
}

impl SynthConfig {
    pub fn new(scenario: Scenario, n_frames: usize, seed: u64) -> Self {
        let scan = match scenario {
            Scenario::Sphere => ScanPattern {
                rows: 48,
                cols: 96,
                min_elevation_deg: -30.0,
                max_elevation_deg: 30.0,
                max_range: 6.0,
            },
            _ => ScanPattern {
                rows: 32,
                cols: 360,
                min_elevation_deg: -30.0,
                max_elevation_deg: 10.0,
                max_range: 20.0,
            },
        };
        Self {
            scenario,
            n_frames,
            seed,
            scan,
            gt_density: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// Horizontal plane `z = height`, hit from above only.
    Ground { height: f64 },
    Block { lo: Point3, hi: Point3 },
    Ball { center: Point3, radius: f64 },
    Car { obb: Obb, shape: CarShape },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Primitive {
    shape: Shape,
    label: u32,
    /// Per-frame displacement for moving objects.
    velocity: Option<Vec3>,
}

/// Analytic scene plus sensor trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scenario: Scenario,
    primitives: Vec<Primitive>,
    pub poses: Vec<Pose>,
    /// Half-width of the cube that contains every possible return.
    pub extent: f64,
}

fn slab(origin: &Point3, dir: &Vec3, lo: &Point3, hi: &Point3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut u, mut v) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        if u > v {
            std::mem::swap(&mut u, &mut v);
        }
        t0 = t0.max(u);
        t1 = t1.min(v);
    }
    (t0 <= t1 && t1 > 0.0).then_some((t0.max(0.0), t1))
}

impl Shape {
    fn translated(&self, d: &Vec3) -> Shape {
        match *self {
            Shape::Ball { center, radius } => Shape::Ball {
                center: center + d,
                radius,
            },
            Shape::Block { lo, hi } => Shape::Block { lo: lo + d, hi: hi + d },
            other => other,
        }
    }

    fn intersect(&self, origin: &Point3, dir: &Vec3) -> Option<f64> {
        match self {
            Shape::Ground { height } => {
                (dir.z < -1e-12 && origin.z > *height).then(|| (height - origin.z) / dir.z)
            }
            Shape::Block { lo, hi } => slab(origin, dir, lo, hi).map(|(t0, _)| t0),
            Shape::Ball { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then_some(t)
            }
            Shape::Car { obb, shape } => {
                let inv = obb.pose.inverse();
                let e = obb.extents();
                let o = inv.transform_point(origin);
                let d = inv.transform_vector(dir);
                let h = obb.half_extents;
                let (t0, t1) = slab(&o, &d, &Point3::from(-h), &Point3::from(h))?;
                // Lower bound on world distance: the normalized SDF scaled by
                // the smallest extent.
                let scale = e.min();
                let mut t = t0;
                for _ in 0..200 {
                    let q = o + d * t;
                    let u = Point3::new(q.x / e.x, q.y / e.y, q.z / e.z);
                    let s = shape.sdf(&u) * scale;
                    if s < 1e-5 {
                        return Some(t);
                    }
                    t += s;
                    if t > t1 {
                        return None;
                    }
                }
                None
            }
        }
    }
}

impl SyntheticScene {
    pub fn build(scenario: Scenario, n_frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::new();
        let ground = Primitive {
            shape: Shape::Ground { height: 0.0 },
            label: GROUND,
            velocity: None,
        };
        let spacing = 2.0;
        let x0 = -spacing * (n_frames.saturating_sub(1)) as f64 / 2.0;
        let line = |height: f64| -> Vec<Pose> {
            (0..n_frames)
                .map(|i| Pose::from_translation(Vec3::new(x0 + spacing * i as f64, 0.0, height)))
                .collect()
        };
        match scenario {
            Scenario::Plane => {
                primitives.push(ground);
                let poses = line(1.7);
                let extent = poses.last().map_or(0.0, |p| p.translation.x.abs()) + 22.0;
                Self {
                    scenario,
                    primitives,
                    poses,
                    extent,
                }
            }
            Scenario::Sphere => {
                primitives.push(Primitive {
                    shape: Shape::Ball {
                        center: Point3::origin(),
                        radius: 1.0,
                    },
                    label: 0,
                    velocity: None,
                });
                let poses = (0..n_frames)
                    .map(|i| {
                        let a = std::f64::consts::TAU * i as f64 / n_frames.max(1) as f64;
                        let r = 3.0;
                        Pose::from_yaw(0.0, Vec3::new(r * a.cos(), r * a.sin(), 0.5 * (a * 2.0).sin()))
                    })
                    .collect();
                Self {
                    scenario,
                    primitives,
                    poses,
                    extent: 1.5,
                }
            }
            Scenario::Street => {
                primitives.push(ground);
                let poses = line(1.7);
                let reach = x0.abs() + 22.0;
                for side in [-1.0, 1.0] {
                    let mut x = -reach;
                    while x < reach {
                        let len = rng.random_range(6.0..12.0);
                        let front = rng.random_range(8.0..10.0);
                        let depth = rng.random_range(4.0..6.0);
                        let height = rng.random_range(5.0..10.0);
                        let x1 = (x + len).min(reach);
                        let (ylo, yhi) = if side > 0.0 {
                            (front, front + depth)
                        } else {
                            (-front - depth, -front)
                        };
                        primitives.push(Primitive {
                            shape: Shape::Block {
                                lo: Point3::new(x, ylo, 0.0),
                                hi: Point3::new(x1, yhi, height),
                            },
                            label: BUILDING,
                            velocity: None,
                        });
                        x = x1 + rng.random_range(1.0..3.0);
                    }
                }
                let family = SyntheticShapeFamily::new(seed);
                let mut index = 0;
                for side in [-1.0, 1.0] {
                    let mut x = -reach + rng.random_range(2.0..6.0);
                    while x < reach - 3.0 {
                        let e = Vec3::new(
                            rng.random_range(3.9..4.5),
                            rng.random_range(1.7..1.9),
                            rng.random_range(1.4..1.6),
                        );
                        let yaw = if side > 0.0 { 0.0 } else { std::f64::consts::PI }
                            + rng.random_range(-0.08..0.08);
                        let center = Point3::new(x + e.x / 2.0, side * rng.random_range(3.3..3.8), e.z / 2.0);
                        let obb = Obb::from_annotation(center, e, yaw, CAR).expect("positive extents");
                        primitives.push(Primitive {
                            shape: Shape::Car {
                                obb,
                                shape: family.shape(index),
                            },
                            label: CAR,
                            velocity: None,
                        });
                        index += 1;
                        x += e.x + rng.random_range(1.5..6.0);
                    }
                }
                primitives.push(Primitive {
                    shape: Shape::Ball {
                        center: Point3::new(x0 - 2.0, -1.2, 1.0),
                        radius: 0.5,
                    },
                    label: DYNAMIC,
                    velocity: Some(Vec3::new(2.8, 0.0, 0.0)),
                });
                Self {
                    scenario,
                    primitives,
                    poses,
                    extent: reach + 2.0,
                }
            }
        }
    }

    /// Nearest hit along a ray at time `frame`; moving objects are skipped
    /// when `frame` is `None`.
    pub fn raycast(&self, origin: &Point3, dir: &Vec3, max_range: f64, frame: Option<usize>) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for p in &self.primitives {
            let shape = match (p.velocity, frame) {
                (Some(_), None) => continue,
                (Some(v), Some(f)) => p.shape.translated(&(v * f as f64)),
                (None, _) => p.shape,
            };
            if let Some(t) = shape.intersect(origin, dir) {
                if t <= max_range && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, p.label));
                }
            }
        }
        best
    }

    /// World-frame returns from pose `i`.
    fn scan_world(&self, i: usize, pattern: &ScanPattern, dynamic: bool) -> (Vec<Point3>, Vec<u32>) {
        let pose = &self.poses[i];
        let origin = Point3::from(pose.translation);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for d in pattern.directions() {
            let dir = pose.transform_vector(&d);
            if let Some((t, label)) = self.raycast(&origin, &dir, pattern.max_range, dynamic.then_some(i)) {
                points.push(origin + dir * t);
                labels.push(label);
            }
        }
        (points, labels)
    }

    /// Scan `i` in the sensor frame.
    pub fn frame(&self, i: usize, pattern: &ScanPattern) -> Result<Frame> {
        let (world, labels) = self.scan_world(i, pattern, true);
        let inv = self.poses[i].inverse();
        let local = world.iter().map(|p| inv.transform_point(p)).collect();
        Frame::new(i as u64, local, labels, self.poses[i])
    }

    /// Dense static-only returns from every pose, in world coordinates.
    pub fn ground_truth(&self, pattern: &ScanPattern, density: usize) -> (Vec<Point3>, Vec<u32>) {
        let dense = ScanPattern {
            rows: pattern.rows * density,
            cols: pattern.cols * density,
            ..*pattern
        };
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.poses.len() {
            let (p, l) = self.scan_world(i, &dense, false);
            points.extend(p);
            labels.extend(l);
        }
        (points, labels)
    }

    /// Car boxes within sensor range of pose `i`, in that sensor's frame.
    pub fn boxes(&self, i: usize, max_range: f64) -> Vec<BoxAnnotation> {
        let pose = &self.poses[i];
        let inv = pose.inverse();
        let sensor_yaw = pose.rotation[(1, 0)].atan2(pose.rotation[(0, 0)]);
        self.primitives
            .iter()
            .filter_map(|p| match p.shape {
                Shape::Car { obb, .. } => Some(obb),
                _ => None,
            })
            .filter(|obb| (obb.pose.translation - pose.translation).norm() <= max_range)
            .map(|obb| {
                let center = inv.transform_point(&Point3::from(obb.pose.translation));
                let world_yaw = obb.pose.rotation[(1, 0)].atan2(obb.pose.rotation[(0, 0)]);
                let yaw = world_yaw - sensor_yaw;
                BoxAnnotation {
                    frame: i as u64,
                    obb: Obb::from_annotation(center, obb.extents(), yaw, obb.class_id).expect("valid box"),
                    yaw,
                }
            })
            .collect()
    }

    /// Exact car shape for the box nearest to `center` (world frame).
    pub fn car_near(&self, center: &Point3) -> Option<(Obb, CarShape)> {
        self.primitives
            .iter()
            .filter_map(|p| match p.shape {
                Shape::Car { obb, shape } => Some((obb, shape)),
                _ => None,
            })
            .min_by(|a, b| {
                let da = (Point3::from(a.0.pose.translation) - center).norm();
                let db = (Point3::from(b.0.pose.translation) - center).norm();
                da.total_cmp(&db)
            })
    }
}

/// Mapping config matched to a scenario's extent and classes.
pub fn scenario_config(scene: &SyntheticScene, seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        ..Default::default()
    };
    let g = scene.extent.ceil();
    c.scene.g_min = -g;
    c.scene.g_max = g;
    match scene.scenario {
        Scenario::Street => {
            c.scene.classes = 3;
            c.scene.dynamic_classes.insert(DYNAMIC);
            c.sampling.instance_classes.insert(CAR);
        }
        Scenario::Plane | Scenario::Sphere => c.scene.classes = 1,
    }
    c
}

/// Summary of what `write_dataset` produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub scenario: Scenario,
    pub frames: usize,
    pub points: usize,
    pub gt_points: usize,
    pub boxes: usize,
    /// Points per class over all frames, indexed by class id.
    pub label_histogram: Vec<usize>,
}

/// Writes frames, poses, boxes, dense ground truth and a matching config.
pub fn write_dataset(out_dir: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    if config.n_frames == 0 {
        return Err(Error::param("n_frames must be >= 1"));
    }
    let scene = SyntheticScene::build(config.scenario, config.n_frames, config.seed);
    let frame_dir = out_dir.join(FRAME_DIR);
    fs::create_dir_all(&frame_dir)?;
    let mut histogram = vec![0usize; 4];
    let mut points = 0;
    let mut boxes = Vec::new();
    for i in 0..config.n_frames {
        let frame = scene.frame(i, &config.scan)?;
        for &l in &frame.labels {
            histogram[l as usize] += 1;
        }
        points += frame.len();
        write_xyzl(&frame_dir.join(frame_file_name(i as u64)), &frame.points, &frame.labels)?;
        boxes.extend(scene.boxes(i, config.scan.max_range));
    }
    write_poses(&out_dir.join(POSE_FILE), &scene.poses)?;
    write_boxes(&out_dir.join(BOX_FILE), &boxes)?;
    let (gt, gt_labels) = scene.ground_truth(&config.scan, config.gt_density);
    write_xyzl(&out_dir.join(GT_FILE), &gt, &gt_labels)?;

    let mut run = scenario_config(&scene, config.seed);
    run.paths.frames = Some(frame_dir);
    run.paths.poses = Some(out_dir.join(POSE_FILE));
    run.paths.boxes = Some(out_dir.join(BOX_FILE));
    fs::write(out_dir.join(CONFIG_FILE), run.to_toml())?;

    while histogram.len() > 1 && histogram[histogram.len() - 1] == 0 {
        histogram.pop();
    }
    Ok(SynthSummary {
        scenario: config.scenario,
        frames: config.n_frames,
        points,
        gt_points: gt.len(),
        boxes: boxes.len(),
        label_histogram: histogram,
    })
}
