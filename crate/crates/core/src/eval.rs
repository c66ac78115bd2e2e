//! Reconstruction and segmentation metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::mesh::Mesh;
use crate::spatial::{HashGrid, KdTree};

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh_surface<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<Vec<Point3>> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::param("mesh has zero surface area"));
    }
    Ok((0..n)
        .map(|_| {
            let r = rng.random_range(0.0..total);
            let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let su = u.sqrt();
            Point3::from(a.coords * (1.0 - su) + b.coords * (su * (1.0 - v)) + c.coords * (su * v))
        })
        .collect())
}

fn nearest_sq(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    let tree = KdTree::build(to);
    from.par_iter()
        .map(|p| tree.nearest(p).expect("non-empty target").1)
        .collect()
}

fn check_nonempty(a: &[Point3], b: &[Point3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("metric needs two non-empty point sets"));
    }
    Ok(())
}

/// Both Chamfer variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    /// `½ (mean_a min ‖a−b‖² + mean_b min ‖b−a‖²)`.
    pub squared: f64,
    /// Same with unsquared distances.
    pub unsquared: f64,
}

pub fn chamfer_both(a: &[Point3], b: &[Point3]) -> Result<Chamfer> {
    check_nonempty(a, b)?;
    let ab = nearest_sq(a, b);
    let ba = nearest_sq(b, a);
    let mean = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|&d| f(d)).sum::<f64>() / v.len() as f64;
    let id = |d: f64| d;
    Ok(Chamfer {
        squared: 0.5 * (mean(&ab, id) + mean(&ba, id)),
        unsquared: 0.5 * (mean(&ab, f64::sqrt) + mean(&ba, f64::sqrt)),
    })
}

/// Squared Chamfer distance.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    chamfer_both(a, b).map(|c| c.squared)
}

fn fraction_within(from: &[Point3], to: &[Point3], tau: f64) -> f64 {
    let grid = HashGrid::build(to, tau);
    let hits: usize = from
        .par_iter()
        .map(|p| usize::from(grid.any_within(p, tau)))
        .sum();
    hits as f64 / from.len() as f64
}

/// `(precision, recall)`: fraction of `rec` within `tau` of `gt`, and of `gt`
/// within `tau` of `rec`.
pub fn precision_recall(rec: &[Point3], gt: &[Point3], tau: f64) -> Result<(f64, f64)> {
    check_nonempty(rec, gt)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("threshold must be positive, got {tau}")));
    }
    Ok((fraction_within(rec, gt, tau), fraction_within(gt, rec, tau)))
}

/// Harmonic mean of precision and recall.
pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class IoU for classes present in `gt`, and their mean.
pub fn class_iou(pred: &[u32], gt: &[u32], classes: usize) -> Result<(f64, BTreeMap<u32, f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::param(format!(
            "label lengths differ: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&l) = pred.iter().chain(gt).find(|&&l| l as usize >= classes) {
        return Err(Error::param(format!("label {l} outside 0..{classes}")));
    }
    let mut inter = vec![0usize; classes];
    let mut pred_n = vec![0usize; classes];
    let mut gt_n = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        pred_n[p as usize] += 1;
        gt_n[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per: BTreeMap<u32, f64> = (0..classes)
        .filter(|&c| gt_n[c] > 0)
        .map(|c| {
            let union = pred_n[c] + gt_n[c] - inter[c];
            (c as u32, inter[c] as f64 / union as f64)
        })
        .collect();
    if per.is_empty() {
        return Err(Error::param("no ground-truth labels"));
    }
    let mean = per.values().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

pub fn miou(pred: &[u32], gt: &[u32], classes: usize) -> Result<f64> {
    class_iou(pred, gt, classes).map(|r| r.0)
}

/// Labeled points inside the closed box `[lo, hi]`.
pub fn crop_labeled(points: &[Point3], labels: &[u32], lo: &Point3, hi: &Point3) -> (Vec<Point3>, Vec<u32>) {
    points
        .iter()
        .zip(labels)
        .filter(|(p, _)| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]))
        .map(|(p, &l)| (*p, l))
        .unzip()
}

/// At most `n` items, taken at an even stride.
pub fn even_subsample<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let stride = items.len().div_ceil(n).max(1);
    items.iter().step_by(stride).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd: f64,
    pub cd_unsquared: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub miou: Option<f64>,
    pub class_iou: Option<BTreeMap<u32, f64>>,
    pub reconstruction_samples: usize,
    pub ground_truth_samples: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn geometric(rec: &[Point3], gt: &[Point3], tau: f64, seed: u64) -> Result<Self> {
        let cd = chamfer_both(rec, gt)?;
        let (precision, recall) = precision_recall(rec, gt, tau)?;
        Ok(Self {
            cd: cd.squared,
            cd_unsquared: cd.unsquared,
            precision,
            recall,
            fscore: fscore(precision, recall),
            threshold: tau,
            miou: None,
            class_iou: None,
            reconstruction_samples: rec.len(),
            ground_truth_samples: gt.len(),
            seed,
        })
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14}{:>12}\n{:<14}{:>12.6}\n{:<14}{:>12.6}\n{:<14}{:>12.4}\n{:<14}{:>12.4}\n{:<14}{:>12.4}\n{:<14}{:>12}\n",
            "metric", "value",
            "cd (m^2)", self.cd,
            "cd (m)", self.cd_unsquared,
            "precision", self.precision,
            "recall", self.recall,
            "fscore", self.fscore,
            "threshold", self.threshold,
        );
        if let Some(m) = self.miou {
            s += &format!("{:<14}{:>12.4}\n", "miou", m);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn cropping_and_subsampling() {
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let labels: Vec<u32> = (0..10).collect();
        let (p, l) = crop_labeled(&pts, &labels, &Point3::new(2.0, -1.0, -1.0), &Point3::new(5.0, 1.0, 1.0));
        assert_eq!(l, vec![2, 3, 4, 5]);
        assert_eq!(p.len(), 4);
        assert_eq!(even_subsample(&labels, 4), vec![0, 3, 6, 9]);
        assert_eq!(even_subsample(&labels, 20).len(), 10);
        assert!(even_subsample(&labels, 0).is_empty());
    }

    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::spatial::brute_force_nearest;

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
        let m = |x: &[Point3], y: &[Point3]| {
            x.iter().map(|p| brute_force_nearest(y, p).unwrap().1).sum::<f64>() / x.len() as f64
        };
        0.5 * (m(a, b) + m(b, a))
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(50, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let one = chamfer(&[Point3::origin()], &[Point3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(one, 1.0);
        assert!(chamfer(&[], &a).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let (a, b) = (cloud(1000, 2), cloud(1000, 3));
        assert_abs_diff_eq!(chamfer(&a, &b).unwrap(), brute_chamfer(&a, &b), epsilon = 1e-9);
    }

    #[test]
    fn precision_recall_examples() {
        let a = cloud(300, 4);
        assert_eq!(precision_recall(&a, &a, 0.1).unwrap(), (1.0, 1.0));
        let shifted: Vec<Point3> = a.iter().map(|p| p + Vector3::new(0.0, 0.0, 10.0)).collect();
        assert_eq!(precision_recall(&shifted, &a, 0.5).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&a, &a, 0.0).is_err());

        // Half the reconstruction sits on gt, half 1 m away; gt has an extra
        // far cluster.
        let gt: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).chain((0..5).map(|i| Point3::new(i as f64, 50.0, 0.0))).collect();
        let rec: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).chain((0..10).map(|i| Point3::new(i as f64, 0.0, 1.0))).collect();
        let (p, r) = precision_recall(&rec, &gt, 0.5).unwrap();
        let brute = |x: &[Point3], y: &[Point3]| {
            x.iter().filter(|q| brute_force_nearest(y, q).unwrap().1.sqrt() <= 0.5).count() as f64 / x.len() as f64
        };
        assert_eq!(p, 0.5);
        assert_eq!(p, brute(&rec, &gt));
        assert_eq!(r, brute(&gt, &rec));
        assert_abs_diff_eq!(r, 10.0 / 15.0);
    }

    #[test]
    fn fscore_examples() {
        assert_abs_diff_eq!(fscore(0.9681, 0.7090), 0.8186, epsilon = 5e-4);
        assert_abs_diff_eq!(fscore(0.1316, 0.1317), 0.1316, epsilon = 5e-4);
        assert_abs_diff_eq!(fscore(0.2231, 0.3069), 0.2584, epsilon = 5e-4);
        assert_abs_diff_eq!(fscore(0.2157, 0.0655), 0.1005, epsilon = 5e-4);
        assert_eq!(fscore(0.0, 0.0), 0.0);
        assert_abs_diff_eq!(fscore(0.37, 0.37), 0.37, epsilon = 1e-15);
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
        // Confusion rows = gt, cols = pred: (90, 10; 20, 80).
        let mut gt = vec![0u32; 100];
        gt.extend(vec![1u32; 100]);
        let mut pred = vec![0u32; 90];
        pred.extend(vec![1u32; 10]);
        pred.extend(vec![0u32; 20]);
        pred.extend(vec![1u32; 80]);
        let expect = (90.0 / 120.0 + 80.0 / 110.0) / 2.0;
        assert_abs_diff_eq!(miou(&pred, &gt, 2).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.7386, epsilon = 1e-4);
        assert!(miou(&[0], &[0, 1], 2).is_err());
    }

    fn two_triangles() -> Mesh {
        // Areas 9:1.
        Mesh {
            vertices: vec![
                Point3::origin(),
                Point3::new(3.0, 0.0, 0.0),
                Point3::new(0.0, 3.0, 0.0),
                Point3::new(10.0, 0.0, 0.0),
                Point3::new(11.0, 0.0, 0.0),
                Point3::new(10.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            ..Default::default()
        }
    }

    #[test]
    fn area_weighted_sampling() {
        let mesh = two_triangles();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let pts = sample_mesh_surface(&mesh, n, &mut rng).unwrap();
        let big = pts.iter().filter(|p| p.x < 5.0).count() as f64;
        let (p, nf) = (0.9, n as f64);
        let sd = (nf * p * (1.0 - p)).sqrt();
        assert!((big - nf * p).abs() <= 3.0 * sd, "{big}");
        for q in &pts {
            let inside_big = q.x >= 0.0 && q.y >= 0.0 && q.x + q.y <= 3.0 + 1e-12;
            let inside_small = q.x >= 10.0 && q.y >= 0.0 && (q.x - 10.0) + q.y <= 1.0 + 1e-12;
            assert!(inside_big || inside_small);
        }
        assert!(sample_mesh_surface(&mesh, 0, &mut rng).unwrap().is_empty());
        let flat = Mesh {
            vertices: vec![Point3::origin(); 3],
            triangles: vec![[0, 1, 2]],
            ..Default::default()
        };
        assert!(sample_mesh_surface(&flat, 5, &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn chamfer_symmetric_and_rigid_invariant(seed in any::<u64>(), ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0, tx in -5.0f64..5.0) {
            let (a, b) = (cloud(60, seed), cloud(45, seed ^ 1));
            prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
            let rot = Rotation3::from_euler_angles(ax, ay, az);
            let t = Vector3::new(tx, -tx, 0.5);
            let move_all = |v: &[Point3]| v.iter().map(|p| rot * p + t).collect::<Vec<_>>();
            let (ra, rb) = (move_all(&a), move_all(&b));
            prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&ra, &rb).unwrap()).abs() < 1e-9);
            let pr = precision_recall(&a, &b, 0.2).unwrap();
            let rpr = precision_recall(&ra, &rb, 0.2).unwrap();
            // Rounding can flip a pair lying exactly on the threshold.
            prop_assert!((pr.0 - rpr.0).abs() <= 1.0 / 60.0 && (pr.1 - rpr.1).abs() <= 1.0 / 45.0);
        }

        #[test]
        fn fscore_bounded_by_mean(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = fscore(p, r);
            prop_assert!(f <= ((p + r) / 2.0).min(1.0) + 1e-15);
            if (p - r).abs() > 1e-6 {
                prop_assert!(f < (p + r) / 2.0);
            }
        }
    }
}
