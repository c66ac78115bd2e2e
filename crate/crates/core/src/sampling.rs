//! Keyframe replay and the point samplers that build training batches.
//!
//! On-surface points come from stored keyframes (a fixed fraction from past
//! keyframes, the rest from the latest one) with a per-batch quota of
//! instance-labeled points. Off-surface points mix three sources: uniform in
//! the whole cube, uniform in the box seen so far, and Gaussian jitter around
//! surface points.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{aabb, normalize_to_unit_cube, Point3, SceneBounds, Vec3};

/// Guards the floor in the count split against products like `0.35 * 1000`
/// landing just under an integer.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_n: f64,
    /// Reference batch size the instance quota is defined against.
    pub n_g: usize,
    /// Instance-labeled points per `n_g` on-surface samples.
    pub n_o: usize,
    /// Per-axis variance of the near-surface offset (normalized units).
    pub sigma_h: f64,
    pub keyframe_stride: u64,
    pub replay_fraction: f64,
    pub instance_classes: BTreeSet<u32>,
    /// Optional cap on the total number of points kept across keyframes.
    pub buffer_cap: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            lambda_g: 0.55,
            lambda_l: 0.35,
            lambda_n: 0.1,
            n_g: 140_000,
            n_o: 6000,
            sigma_h: 0.0003,
            keyframe_stride: 3,
            replay_fraction: 0.75,
            instance_classes: BTreeSet::new(),
            buffer_cap: None,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_g, self.lambda_l, self.lambda_n];
        if l.iter().any(|&v| !(v >= 0.0)) || (l.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!(
                "sampling proportions must be nonnegative and sum to 1, got {l:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::param("replay_fraction must lie in [0, 1]"));
        }
        if self.keyframe_stride == 0 {
            return Err(Error::param("keyframe_stride must be >= 1"));
        }
        if self.n_g == 0 {
            return Err(Error::param("n_g must be >= 1"));
        }
        if !(self.sigma_h >= 0.0 && self.sigma_h.is_finite()) {
            return Err(Error::param("sigma_h must be a finite variance >= 0"));
        }
        Ok(())
    }

    /// Instance-labeled samples required in a batch of `n`.
    pub fn instance_quota(&self, n: usize) -> usize {
        (self.n_o as f64 * n as f64 / self.n_g as f64 - COUNT_EPS).ceil().max(0.0) as usize
    }

    /// `(global, local, near)` counts for `n` off-surface samples.
    pub fn off_surface_counts(&self, n: usize) -> (usize, usize, usize) {
        let nf = n as f64;
        let n_l = (self.lambda_l * nf + COUNT_EPS).floor() as usize;
        let n_n = (self.lambda_n * nf + COUNT_EPS).floor() as usize;
        let n_l = n_l.min(n);
        let n_n = n_n.min(n - n_l);
        (n - n_l - n_n, n_l, n_n)
    }
}

/// A stored keyframe in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub index: u64,
    pub points: Vec<Point3>,
    pub labels: Vec<u32>,
    pub normals: Vec<Vec3>,
    /// World-space extrema of the frame.
    pub world_min: Point3,
    pub world_max: Point3,
}

impl Keyframe {
    pub fn from_world(
        index: u64,
        world_points: &[Point3],
        labels: Vec<u32>,
        normals: Vec<Vec3>,
        scene: &SceneBounds,
    ) -> Result<Self> {
        if world_points.len() != labels.len() || labels.len() != normals.len() {
            return Err(Error::param("keyframe points, labels and normals differ in length"));
        }
        let (world_min, world_max) = aabb(world_points).ok_or(Error::EmptyFrame)?;
        let points = world_points
            .iter()
            .map(|p| normalize_to_unit_cube(p, scene))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            index,
            points,
            labels,
            normals,
            world_min,
            world_max,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn decimate(&mut self, keep: usize) {
        let n = self.len();
        if keep >= n {
            return;
        }
        let keep = keep.max(1);
        let picks: Vec<usize> = (0..keep).map(|i| i * n / keep).collect();
        self.points = picks.iter().map(|&i| self.points[i]).collect();
        self.labels = picks.iter().map(|&i| self.labels[i]).collect();
        self.normals = picks.iter().map(|&i| self.normals[i]).collect();
    }
}

/// Running world-space box of everything admitted so far.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalBounds {
    extent: Option<(Point3, Point3)>,
}

impl LocalBounds {
    pub fn expand(&mut self, lo: &Point3, hi: &Point3) {
        self.extent = Some(match self.extent {
            None => (*lo, *hi),
            Some((a, b)) => (a.inf(lo), b.sup(hi)),
        });
    }

    pub fn is_initialized(&self) -> bool {
        self.extent.is_some()
    }

    /// `(L_min, L_max)` in world metres.
    pub fn world(&self) -> Option<(Point3, Point3)> {
        self.extent
    }

    /// `(b_l, b_u)` in normalized units, clamped to the unit cube.
    pub fn normalized(&self, scene: &SceneBounds) -> Result<(Point3, Point3)> {
        let (lo, hi) = self
            .extent
            .ok_or_else(|| Error::state("local bounds are not initialized"))?;
        let f = |v: f64| scene.normalize_scalar(v).clamp(-1.0, 1.0);
        Ok((lo.map(f), hi.map(f)))
    }
}

/// One on-surface draw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceSample {
    pub points: Vec<Point3>,
    pub labels: Vec<u32>,
    pub normals: Vec<Vec3>,
    /// How many leading entries came from past keyframes.
    pub from_past: usize,
}

#[derive(Debug, Clone)]
pub struct KeyframeBuffer {
    config: SamplingConfig,
    scene: SceneBounds,
    keyframes: Vec<Keyframe>,
    bounds: LocalBounds,
}

type Slot = (usize, usize);

impl KeyframeBuffer {
    pub fn new(config: SamplingConfig, scene: SceneBounds) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            scene,
            keyframes: Vec::new(),
            bounds: LocalBounds::default(),
        })
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    pub fn scene(&self) -> &SceneBounds {
        &self.scene
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn bounds(&self) -> &LocalBounds {
        &self.bounds
    }

    pub fn total_points(&self) -> usize {
        self.keyframes.iter().map(Keyframe::len).sum()
    }

    pub fn is_keyframe(&self, frame_index: u64) -> bool {
        frame_index % self.config.keyframe_stride == 0
    }

    /// Stores `keyframe` if its index is on the stride; returns whether it was.
    pub fn admit_frame(&mut self, keyframe: Keyframe) -> bool {
        if !self.is_keyframe(keyframe.index) {
            return false;
        }
        self.bounds.expand(&keyframe.world_min, &keyframe.world_max);
        self.keyframes.push(keyframe);
        if let Some(cap) = self.config.buffer_cap {
            if self.total_points() > cap {
                let keep = cap / self.keyframes.len();
                for k in &mut self.keyframes {
                    k.decimate(keep);
                }
            }
        }
        true
    }

    fn is_instance(&self, (k, i): Slot) -> bool {
        self.config
            .instance_classes
            .contains(&self.keyframes[k].labels[i])
    }

    /// Uniform draw over the union of keyframes `range`.
    fn draw_uniform<R: Rng + ?Sized>(
        &self,
        range: std::ops::Range<usize>,
        n: usize,
        rng: &mut R,
    ) -> Vec<Slot> {
        let mut cumulative = Vec::with_capacity(range.len());
        let mut total = 0;
        for k in range.clone() {
            total += self.keyframes[k].len();
            cumulative.push(total);
        }
        if total == 0 {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let r = rng.random_range(0..total);
                let j = cumulative.partition_point(|&c| c <= r);
                let before = if j == 0 { 0 } else { cumulative[j - 1] };
                (range.start + j, r - before)
            })
            .collect()
    }

    /// `n` on-surface samples: `⌊replay_fraction·n⌋` from past keyframes and
    /// the rest from the latest, then topped up with instance-labeled points
    /// until the quota (or every available instance point) is covered.
    pub fn sample_on_surface<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<SurfaceSample> {
        let latest = self
            .keyframes
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::state("keyframe buffer is empty"))?;
        let n_past = if latest == 0 {
            0
        } else {
            (self.config.replay_fraction * n as f64 + COUNT_EPS).floor() as usize
        };
        let mut parts = [
            self.draw_uniform(0..latest, n_past, rng),
            self.draw_uniform(latest..latest + 1, n - n_past, rng),
        ];

        let quota = self.config.instance_quota(n);
        let have = parts.iter().flatten().filter(|&&s| self.is_instance(s)).count();
        if have < quota {
            self.fill_instance_quota(&mut parts, quota - have, latest, rng);
        }

        let mut out = SurfaceSample {
            from_past: parts[0].len(),
            ..Default::default()
        };
        for (k, i) in parts.into_iter().flatten() {
            let kf = &self.keyframes[k];
            out.points.push(kf.points[i]);
            out.labels.push(kf.labels[i]);
            out.normals.push(kf.normals[i]);
        }
        Ok(out)
    }

    /// Replaces non-instance slots with instance points, keeping every
    /// replacement inside the partition (past or latest) it came from. Points
    /// not yet in the batch go first; after that, draws are with replacement.
    fn fill_instance_quota<R: Rng + ?Sized>(
        &self,
        parts: &mut [Vec<Slot>; 2],
        mut deficit: usize,
        latest: usize,
        rng: &mut R,
    ) {
        let mut instances: Vec<Slot> = Vec::new();
        for (k, kf) in self.keyframes.iter().enumerate() {
            for i in 0..kf.len() {
                if self.is_instance((k, i)) {
                    instances.push((k, i));
                }
            }
        }
        if instances.is_empty() {
            return;
        }
        let mut free: [Vec<usize>; 2] = [0, 1].map(|p| {
            let mut v: Vec<usize> = (0..parts[p].len())
                .filter(|&j| !self.is_instance(parts[p][j]))
                .collect();
            v.shuffle(rng);
            v
        });
        let seen: BTreeSet<Slot> = parts.iter().flatten().copied().collect();
        let mut unseen: Vec<Slot> = instances.iter().copied().filter(|s| !seen.contains(s)).collect();
        unseen.shuffle(rng);

        let place = |slot: Slot, parts: &mut [Vec<Slot>; 2], free: &mut [Vec<usize>; 2]| {
            let p = usize::from(slot.0 == latest);
            match free[p].pop() {
                Some(j) => {
                    parts[p][j] = slot;
                    true
                }
                None => false,
            }
        };
        for slot in unseen {
            if deficit == 0 {
                return;
            }
            if place(slot, parts, &mut free) {
                deficit -= 1;
            }
        }
        let by_part: [Vec<Slot>; 2] =
            [0, 1].map(|p| instances.iter().copied().filter(|s| usize::from(s.0 == latest) == p).collect());
        while deficit > 0 {
            let open: Vec<usize> = (0..2)
                .filter(|&p| !free[p].is_empty() && !by_part[p].is_empty())
                .collect();
            let total: usize = open.iter().map(|&p| by_part[p].len()).sum();
            if total == 0 {
                return;
            }
            let mut r = rng.random_range(0..total);
            for &p in &open {
                if r < by_part[p].len() {
                    place(by_part[p][r], parts, &mut free);
                    deficit -= 1;
                    break;
                }
                r -= by_part[p].len();
            }
        }
    }
}

/// Uniform samples in `[-1, 1]^3`.
pub fn sample_global<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point3> {
    sample_box(&Point3::new(-1.0, -1.0, -1.0), &Point3::new(1.0, 1.0, 1.0), n, rng)
}

/// Uniform samples in the normalized local box `[b_l, b_u]`.
pub fn sample_local<R: Rng + ?Sized>(
    bounds: &LocalBounds,
    scene: &SceneBounds,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    let (lo, hi) = bounds.normalized(scene)?;
    Ok(sample_box(&lo, &hi, n, rng))
}

fn sample_box<R: Rng + ?Sized>(lo: &Point3, hi: &Point3, n: usize, rng: &mut R) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            )
        })
        .collect()
}

/// `⌊n/2⌋` base points drawn with replacement, each emitted as the pair
/// `p + h`, `p - h` with `h ~ N(0, sigma_h I)`.
pub fn sample_near_surface<R: Rng + ?Sized>(
    surface: &[Point3],
    n: usize,
    sigma_h: f64,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    if surface.is_empty() {
        return Err(Error::state("near-surface sampling needs surface points"));
    }
    let normal = Normal::new(0.0, sigma_h.max(0.0).sqrt())
        .map_err(|e| Error::param(format!("sigma_h: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let p = surface[rng.random_range(0..surface.len())];
        let h = Vec3::new(
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        );
        out.push(p + h);
        out.push(p - h);
    }
    Ok(out)
}

/// Three-layer off-surface draw, shuffled.
pub fn sample_off_surface<R: Rng + ?Sized>(
    config: &SamplingConfig,
    bounds: &LocalBounds,
    scene: &SceneBounds,
    surface: &[Point3],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    let (n_g, n_l, n_n) = config.off_surface_counts(n);
    let mut out = sample_global(n_g, rng);
    if n_l > 0 {
        out.extend(sample_local(bounds, scene, n_l, rng)?);
    }
    if n_n > 0 {
        let mut near = sample_near_surface(surface, 2 * n_n.div_ceil(2), config.sigma_h, rng)?;
        near.truncate(n_n);
        out.extend(near);
    }
    out.shuffle(rng);
    Ok(out)
}
