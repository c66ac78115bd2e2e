//! Coordinate types, rigid poses, scene bounds and the maps between world,
//! unit-cube and instance-box frames.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::KdTree;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-6;

/// Rigid transform `q = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose and checks that the rotation is proper and orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    /// Row-major 3x4 `[R | t]`, as stored in pose files.
    pub fn from_row_major(values: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let t = Vec3::new(values[3], values[7], values[11]);
        Self::new(r, t)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::param("pose has non-finite entries"));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::param(format!("rotation determinant {det} is not 1")));
        }
        let gram = self.rotation.transpose() * self.rotation;
        if (gram - Matrix3::identity()).abs().max() > ORTHO_TOL {
            return Err(Error::param("rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// One sensor scan. Points are in the sensor frame; `pose` maps them to world.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: u64,
    pub points: Vec<Point3>,
    pub labels: Vec<u32>,
    pub pose: Pose,
}

impl Frame {
    pub fn new(index: u64, points: Vec<Point3>, labels: Vec<u32>, pose: Pose) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::param(format!(
                "frame {index}: {} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::EmptyFrame);
        }
        if let Some(p) = points.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::param(format!("frame {index}: non-finite point {p:?}")));
        }
        Ok(Self {
            index,
            points,
            labels,
            pose,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Whole-scene coordinate range, applied identically on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub g_min: f64,
    pub g_max: f64,
}

impl SceneBounds {
    pub fn new(g_min: f64, g_max: f64) -> Result<Self> {
        if !(g_min.is_finite() && g_max.is_finite() && g_max > g_min) {
            return Err(Error::param(format!(
                "scene bounds need g_max > g_min, got [{g_min}, {g_max}]"
            )));
        }
        Ok(Self { g_min, g_max })
    }

    pub fn range(&self) -> f64 {
        self.g_max - self.g_min
    }

    /// World metres per normalized unit.
    pub fn scale(&self) -> f64 {
        self.range() / 2.0
    }

    #[inline]
    pub fn normalize_scalar(&self, v: f64) -> f64 {
        ((v - self.g_min) / (self.g_max - self.g_min) - 0.5) * 2.0
    }

    #[inline]
    pub fn denormalize_scalar(&self, u: f64) -> f64 {
        (u / 2.0 + 0.5) * (self.g_max - self.g_min) + self.g_min
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.iter().all(|&v| v >= self.g_min && v <= self.g_max)
    }
}

/// Affine map from world coordinates into `[-1, 1]^3`.
pub fn normalize_to_unit_cube(p: &Point3, bounds: &SceneBounds) -> Result<Point3> {
    for (axis, &v) in p.iter().enumerate() {
        if !(v >= bounds.g_min && v <= bounds.g_max) {
            return Err(Error::OutOfBounds {
                axis,
                value: v,
                min: bounds.g_min,
                max: bounds.g_max,
            });
        }
    }
    Ok(p.map(|v| bounds.normalize_scalar(v)))
}

pub fn denormalize_from_unit_cube(u: &Point3, bounds: &SceneBounds) -> Point3 {
    u.map(|v| bounds.denormalize_scalar(v))
}

pub fn frame_to_world(frame: &Frame) -> Vec<Point3> {
    frame
        .points
        .iter()
        .map(|p| frame.pose.transform_point(p))
        .collect()
}

/// Drops every point whose label is in `dynamic_classes`.
pub fn filter_dynamic(frame: &Frame, dynamic_classes: &BTreeSet<u32>) -> Result<Frame> {
    if dynamic_classes.is_empty() {
        return Ok(frame.clone());
    }
    let (points, labels): (Vec<_>, Vec<_>) = frame
        .points
        .iter()
        .zip(&frame.labels)
        .filter(|(_, l)| !dynamic_classes.contains(l))
        .map(|(p, l)| (*p, *l))
        .unzip();
    if points.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(Frame {
        index: frame.index,
        points,
        labels,
        pose: frame.pose,
    })
}

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 16;

/// PCA normals over the `k` nearest neighbours (the point itself included),
/// oriented towards `sensor_origin`.
pub fn estimate_normals(points: &[Point3], k: usize, sensor_origin: &Point3) -> Result<Vec<Vec3>> {
    if k < 3 {
        return Err(Error::param(format!("normal estimation needs k >= 3, got {k}")));
    }
    if points.len() < k {
        return Err(Error::param(format!(
            "normal estimation needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let tree = KdTree::build(points);
    let normals = points
        .iter()
        .map(|p| {
            let neighbors = tree.knn(p, k);
            let n = neighbors.len() as f64;
            let centroid = neighbors
                .iter()
                .fold(Vec3::zeros(), |acc, &(i, _)| acc + points[i].coords)
                / n;
            let mut cov = Matrix3::zeros();
            for &(i, _) in &neighbors {
                let d = points[i].coords - centroid;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov / n);
            let (min_idx, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("3x3 matrix has eigenvalues");
            let mut normal: Vec3 = eig.eigenvectors.column(min_idx).into_owned();
            let norm = normal.norm();
            normal = if norm > 0.0 { normal / norm } else { Vec3::z() };
            if normal.dot(&(sensor_origin - p)) < 0.0 {
                normal = -normal;
            }
            normal
        })
        .collect();
    Ok(normals)
}

/// Oriented bounding box. `pose` maps box-centred coordinates to the frame
/// the box was annotated in (`T_LB`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub pose: Pose,
    pub half_extents: Vec3,
    pub class_id: u32,
}

impl Obb {
    pub fn new(pose: Pose, half_extents: Vec3, class_id: u32) -> Result<Self> {
        if !half_extents.iter().all(|&h| h > 0.0 && h.is_finite()) {
            return Err(Error::param(format!(
                "box half-extents must be positive, got {half_extents:?}"
            )));
        }
        pose.validate()?;
        Ok(Self {
            pose,
            half_extents,
            class_id,
        })
    }

    /// From an annotation line: centre, full extents and yaw about +z.
    pub fn from_annotation(center: Point3, extents: Vec3, yaw: f64, class_id: u32) -> Result<Self> {
        Self::new(Pose::from_yaw(yaw, center.coords), extents / 2.0, class_id)
    }

    pub fn extents(&self) -> Vec3 {
        self.half_extents * 2.0
    }

    pub fn contains_local(&self, q: &Point3) -> bool {
        // Tolerance so that box corners survive a round trip through the pose.
        (0..3).all(|a| q[a].abs() <= self.half_extents[a] * (1.0 + 1e-9))
    }

    pub fn corners(&self) -> [Point3; 8] {
        let h = self.half_extents;
        let mut out = [Point3::origin(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = |bit: usize| if i & (1 << bit) != 0 { 1.0 } else { -1.0 };
            *c = self
                .pose
                .transform_point(&Point3::new(s(0) * h.x, s(1) * h.y, s(2) * h.z));
        }
        out
    }
}

/// Moves points into the box frame, keeps those inside the closed box and
/// scales each axis by the box extent so the box becomes `[-0.5, 0.5]^3`.
pub fn crop_and_normalize_instance(points: &[Point3], obb: &Obb) -> Result<Vec<Point3>> {
    let inv = obb.pose.inverse();
    let extents = obb.extents();
    let out: Vec<Point3> = points
        .iter()
        .map(|p| inv.transform_point(p))
        .filter(|q| obb.contains_local(q))
        .map(|q| q.coords.component_div(&extents).map(|v| v.clamp(-0.5, 0.5)).into())
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyInstance);
    }
    Ok(out)
}

/// Inverse of [`crop_and_normalize_instance`] for a single point.
pub fn denormalize_instance_point(u: &Point3, obb: &Obb) -> Point3 {
    let e = obb.extents();
    obb.pose
        .transform_point(&Point3::new(u.x * e.x, u.y * e.y, u.z * e.z))
}

/// Component-wise bounding box of a point set.
pub fn aabb(points: &[Point3]) -> Option<(Point3, Point3)> {
    let first = points.first()?;
    Some(points.iter().fold((*first, *first), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    }))
}
