//! Nearest-neighbour structures: a static k-d tree and a uniform hash grid.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::geometry::Point3;

/// Static, balanced k-d tree over a borrowed point slice. Nodes are stored
/// implicitly: the median of each index range is the node.
pub struct KdTree<'a> {
    points: &'a [Point3],
    index: Vec<usize>,
    axis: Vec<u8>,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.idx.cmp(&other.idx))
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point3]) -> Self {
        let mut index: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        Self::build_range(points, &mut index, &mut axis, 0);
        Self {
            points,
            index,
            axis,
        }
    }

    fn build_range(points: &[Point3], index: &mut [usize], axis: &mut [u8], offset: usize) {
        let n = index.len();
        if n <= 1 {
            return;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in index.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let split = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = n / 2;
        index.select_nth_unstable_by(mid, |&a, &b| {
            points[a][split].total_cmp(&points[b][split]).then(a.cmp(&b))
        });
        axis[offset + mid] = split as u8;
        let (left, right) = index.split_at_mut(mid);
        Self::build_range(points, left, axis, offset);
        Self::build_range(points, &mut right[1..], axis, offset + mid + 1);
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Index of and squared distance to the nearest point.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        let mut best = Candidate {
            dist2: f64::INFINITY,
            idx: usize::MAX,
        };
        self.nearest_range(q, 0, self.index.len(), &mut best);
        (best.idx != usize::MAX).then_some((best.idx, best.dist2))
    }

    fn nearest_range(&self, q: &Point3, lo: usize, hi: usize, best: &mut Candidate) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.index[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        let cand = Candidate { dist2: d2, idx };
        if cand < *best {
            *best = cand;
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_range(q, near.0, near.1, best);
        if diff * diff <= best.dist2 {
            self.nearest_range(q, far.0, far.1, best);
        }
    }

    /// The `k` nearest points, closest first.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.knn_range(q, k, 0, self.index.len(), &mut heap);
        }
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.idx, c.dist2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_range(&self, q: &Point3, k: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.index[mid];
        let p = &self.points[idx];
        let cand = Candidate {
            dist2: (p - q).norm_squared(),
            idx,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if heap.peek().is_some_and(|w| cand < *w) {
            heap.pop();
            heap.push(cand);
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_range(q, k, near.0, near.1, heap);
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().map_or(f64::INFINITY, |c| c.dist2)
        };
        if diff * diff <= worst {
            self.knn_range(q, k, far.0, far.1, heap);
        }
    }
}

type CellKey = (i64, i64, i64);

/// Uniform hash grid bucketing point indices by cell.
pub struct HashGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
}

impl<'a> HashGrid<'a> {
    pub fn build(points: &'a [Point3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "hash grid cell size must be positive");
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i as u32);
        }
        Self {
            points,
            cell,
            cells,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Nearest point among the 3x3x3 cells around `q`. Exact whenever the
    /// true nearest neighbour lies within one cell size of `q`.
    pub fn nearest_in_neighborhood(&self, q: &Point3) -> Option<(usize, f64)> {
        let (cx, cy, cz) = key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i as usize] - q).norm_squared();
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && (i as usize) < bi),
                        };
                        if better {
                            best = Some((i as usize, d2));
                        }
                    }
                }
            }
        }
        best
    }

    /// Exact nearest neighbour: the neighbourhood answer when it is provably
    /// nearest, otherwise a brute-force scan.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if let Some(hit) = self.nearest_in_neighborhood(q) {
            if hit.1 <= self.cell * self.cell {
                return Some(hit);
            }
        }
        brute_force_nearest(self.points, q)
    }

    /// Whether any point lies within `radius` of `q`; requires `radius <= cell`.
    pub fn any_within(&self, q: &Point3, radius: f64) -> bool {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        let r2 = radius * radius;
        let (cx, cy, cz) = key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        if bucket
                            .iter()
                            .any(|&i| (self.points[i as usize] - q).norm_squared() <= r2)
                        {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn key(p: &Point3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

pub fn brute_force_nearest(points: &[Point3], q: &Point3) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - q).norm_squared()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}
