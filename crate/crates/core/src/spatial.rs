//! Uniform-grid bucket index for exact k-nearest-neighbor queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::imagery::PixelPos;

/// Below this many points queries scan the whole set.
pub const BRUTE_FORCE_BELOW: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<PixelPos>,
    grid: Option<Grid>,
}

#[derive(Debug, Clone)]
struct Grid {
    origin: PixelPos,
    cell: f64,
    nx: usize,
    ny: usize,
    /// CSR offsets into `order`, one slot per cell plus a terminator.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl PointIndex {
    pub fn new(points: &[PixelPos]) -> Self {
        let grid = (points.len() >= BRUTE_FORCE_BELOW).then(|| Grid::build(points));
        Self {
            points: points.to_vec(),
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PixelPos] {
        &self.points
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn knn(&self, query: PixelPos, k: usize) -> Vec<Neighbor> {
        match &self.grid {
            Some(grid) => grid.knn(&self.points, query, k),
            None => knn_brute_force(&self.points, query, k),
        }
    }
}

/// Exhaustive k-nearest-neighbor scan.
pub fn knn_brute_force(points: &[PixelPos], query: PixelPos, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            dist2: p.dist2(query),
            index,
        })
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all
}

impl Grid {
    fn build(points: &[PixelPos]) -> Self {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        let span_x = (max_x - min_x).max(1e-9);
        let span_y = (max_y - min_y).max(1e-9);
        // About two points per cell on a uniform cloud.
        let cell = ((span_x * span_y * 2.0) / points.len() as f64)
            .sqrt()
            .max(span_x.max(span_y) / 4096.0);
        let nx = ((span_x / cell).floor() as usize + 1).max(1);
        let ny = ((span_y / cell).floor() as usize + 1).max(1);
        let origin = PixelPos::new(min_x, min_y);
        let cell_of = |p: &PixelPos| {
            let cx = (((p.x - origin.x) / cell) as usize).min(nx - 1);
            let cy = (((p.y - origin.y) / cell) as usize).min(ny - 1);
            cy * nx + cx
        };
        let mut counts = vec![0usize; nx * ny + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            origin,
            cell,
            nx,
            ny,
            starts,
            order,
        }
    }

    fn knn(&self, points: &[PixelPos], query: PixelPos, k: usize) -> Vec<Neighbor> {
        let k = k.min(points.len());
        if k == 0 {
            return Vec::new();
        }
        let qx = ((query.x - self.origin.x) / self.cell).floor() as i64;
        let qy = ((query.y - self.origin.y) / self.cell).floor() as i64;
        let (nx, ny) = (self.nx as i64, self.ny as i64);
        // Rings beyond this radius contain no grid cell.
        let max_ring = [qx, nx - 1 - qx, qy, ny - 1 - qy]
            .iter()
            .map(|d| d.abs())
            .max()
            .unwrap()
            + 1;
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        let visit = |cx: i64, cy: i64, heap: &mut BinaryHeap<Neighbor>| {
            if cx < 0 || cy < 0 || cx >= nx || cy >= ny {
                return;
            }
            let c = (cy * nx + cx) as usize;
            for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                let cand = Neighbor {
                    dist2: points[i].dist2(query),
                    index: i,
                };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(cand);
                }
            }
        };
        for r in 0..=max_ring {
            if r == 0 {
                visit(qx, qy, &mut heap);
            } else {
                for cx in qx - r..=qx + r {
                    visit(cx, qy - r, &mut heap);
                    visit(cx, qy + r, &mut heap);
                }
                for cy in qy - r + 1..qy + r {
                    visit(qx - r, cy, &mut heap);
                    visit(qx + r, cy, &mut heap);
                }
            }
            // Every cell in ring r + 1 is at least r cells away from the query.
            if heap.len() == k {
                let reach = r as f64 * self.cell;
                if heap.peek().unwrap().dist2 < reach * reach {
                    break;
                }
            }
        }
        heap.into_sorted_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [256usize, 300, 1000, 4000] {
            // Clustered cloud so that many cells are empty.
            let points: Vec<PixelPos> = (0..n)
                .map(|i| {
                    let (cx, cy) = if i % 3 == 0 { (10.0, 10.0) } else { (200.0, 80.0) };
                    PixelPos::new(cx + rng.gen_range(-30.0..30.0), cy + rng.gen_range(-5.0..5.0))
                })
                .collect();
            let index = PointIndex::new(&points);
            assert!(index.grid.is_some());
            for _ in 0..200 {
                let q = PixelPos::new(rng.gen_range(-100.0..400.0), rng.gen_range(-100.0..200.0));
                for k in [1usize, 2, 10, 37] {
                    assert_eq!(index.knn(q, k), knn_brute_force(&points, q, k));
                }
            }
        }
    }

    #[test]
    fn ties_break_by_index() {
        let mut points = vec![PixelPos::new(1.0, 0.0); 300];
        points.push(PixelPos::new(0.0, 0.0));
        let index = PointIndex::new(&points);
        let nn = index.knn(PixelPos::new(1.0, 0.0), 3);
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
