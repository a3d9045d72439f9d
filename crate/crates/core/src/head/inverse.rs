//! Pointwise inverse skinning: map a posed-space point back to canonical
//! space by blending inverted vertex transforms over its nearest posed
//! vertices, then removing pose and expression blendshape offsets.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::head::lbs::{self, Affine};
use crate::head::{CanonicalConfig, HeadModel, PoseExpr};

/// Distance regularizer in the inverse-distance weights.
const KNN_EPS: f64 = 1e-8;

/// Vertex count above which queries use the grid index instead of a scan.
const GRID_THRESHOLD: usize = 256;

/// Nearest-neighbor index over a fixed point cloud. Brute force for small
/// clouds, uniform grid buckets for large ones. Ties break by index.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    points: Vec<Vector3<f64>>,
    grid: Option<Grid>,
}

#[derive(Debug, Clone)]
struct Grid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// Point indices per cell, cells flattened x-fastest.
    buckets: Vec<Vec<u32>>,
}

impl KnnIndex {
    pub fn new(points: Vec<Vector3<f64>>) -> KnnIndex {
        let grid = (points.len() > GRID_THRESHOLD).then(|| Grid::build(&points));
        KnnIndex { points, grid }
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Indices and distances of the `k` nearest points, sorted by
    /// `(distance, index)`.
    pub fn nearest(&self, x: Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        match &self.grid {
            None => {
                let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
                for (i, p) in self.points.iter().enumerate() {
                    let d = (p - x).norm();
                    if best.len() < k || d < best[k - 1].1 {
                        let pos = best
                            .partition_point(|&(bi, bd)| bd < d || (bd == d && bi < i));
                        best.insert(pos, (i, d));
                        best.truncate(k);
                    }
                }
                best
            }
            Some(grid) => grid.nearest(&self.points, x, k),
        }
    }
}

impl Grid {
    fn build(points: &[Vector3<f64>]) -> Grid {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let target_cells = (points.len() as f64).cbrt().ceil() as usize;
        let cell = (extent.max() / target_cells as f64).max(1e-9);
        let dims = [
            (extent.x / cell).floor() as usize + 1,
            (extent.y / cell).floor() as usize + 1,
            (extent.z / cell).floor() as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, p) in points.iter().enumerate() {
            let c = Grid::cell_of(lo, cell, dims, *p);
            buckets[c].push(i as u32);
        }
        Grid {
            origin: lo,
            cell,
            dims,
            buckets,
        }
    }

    fn cell_of(origin: Vector3<f64>, cell: f64, dims: [usize; 3], p: Vector3<f64>) -> usize {
        let ix = (((p.x - origin.x) / cell) as usize).min(dims[0] - 1);
        let iy = (((p.y - origin.y) / cell) as usize).min(dims[1] - 1);
        let iz = (((p.z - origin.z) / cell) as usize).min(dims[2] - 1);
        (iz * dims[1] + iy) * dims[0] + ix
    }

    fn nearest(&self, points: &[Vector3<f64>], x: Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let cx = ((x.x - self.origin.x) / self.cell).floor() as i64;
        let cy = ((x.y - self.origin.y) / self.cell).floor() as i64;
        let cz = ((x.z - self.origin.z) / self.cell).floor() as i64;
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let max_ring = self.dims.iter().max().unwrap() + 1;
        for ring in 0..=max_ring as i64 {
            // Points in ring r are at least (r-1) * cell away; stop once the
            // kth distance beats every unvisited ring.
            if best.len() == k && (ring - 1) as f64 * self.cell > best[k - 1].1 {
                break;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let (ix, iy, iz) = (cx + dx, cy + dy, cz + dz);
                        if ix < 0
                            || iy < 0
                            || iz < 0
                            || ix >= self.dims[0] as i64
                            || iy >= self.dims[1] as i64
                            || iz >= self.dims[2] as i64
                        {
                            continue;
                        }
                        let bucket =
                            &self.buckets[(iz as usize * self.dims[1] + iy as usize) * self.dims[0] + ix as usize];
                        for &i in bucket {
                            let i = i as usize;
                            let d = (points[i] - x).norm();
                            if best.len() < k || d < best[k - 1].1 {
                                let pos = best
                                    .partition_point(|&(bi, bd)| bd < d || (bd == d && bi < i));
                                best.insert(pos, (i, d));
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Normalized inverse-distance weights over the `k` nearest points:
/// `w_i = (1 / (d_i + eps)) / sum_j (1 / (d_j + eps))`.
pub fn knn_weights(index: &KnnIndex, x: Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
    let mut nn = index.nearest(x, k);
    let mut total = 0.0;
    for (_, d) in nn.iter_mut() {
        *d = 1.0 / (*d + KNN_EPS);
        total += *d;
    }
    for (_, w) in nn.iter_mut() {
        *w /= total;
    }
    nn
}

/// Everything needed to invert one frame's skinning, precomputed per frame.
#[derive(Debug, Clone)]
pub struct PosedFrame {
    /// Posed vertex positions (forward skinning with the average shape).
    pub knn: KnnIndex,
    /// Per-vertex inverted blended transforms `(sum_k W M_k)^{-1}`.
    pub inv_blend: Vec<Affine>,
    /// Per-vertex `-(B_P + B_E)` offsets.
    pub neg_offsets: Vec<Vector3<f64>>,
    /// Neighbor count used for blending.
    pub k: usize,
}

impl PosedFrame {
    /// Build the inverse-skinning data for pose `theta` and expression `psi`.
    /// The shape is pinned to `canon.beta_avg`; a frame's own beta is ignored
    /// by design, since the canonical template carries the average shape.
    pub fn new(
        model: &HeadModel,
        canon: &CanonicalConfig,
        theta: &[f64],
        psi: &[f64],
        k: usize,
    ) -> Result<PosedFrame> {
        let pe = PoseExpr {
            beta: canon.beta_avg.clone(),
            theta: theta.to_vec(),
            psi: psi.to_vec(),
        };
        let posed = lbs::lbs_forward(model, &pe)?;
        let transforms = lbs::joint_transforms(model, &pe.beta, &pe.theta);
        let mut inv_blend = Vec::with_capacity(model.n_verts());
        for (v, p) in posed.iter().enumerate() {
            let blended = lbs::blended_transform(model, &transforms, v);
            let inv = blended.inverse().ok_or(Error::SingularTransform {
                point: [p.x, p.y, p.z],
            })?;
            inv_blend.push(inv);
        }
        let neg_offsets = lbs::pose_expr_offsets(model, &pe)
            .into_iter()
            .map(|o| -o)
            .collect();
        Ok(PosedFrame {
            knn: KnnIndex::new(posed),
            inv_blend,
            neg_offsets,
            k,
        })
    }

    /// Map a posed-space point to canonical space:
    /// `x' = [avg_i w_i M_i^{-1}] x + avg_i w_i (-(B_P + B_E)_i)`.
    pub fn inverse_lbs(&self, x: Vector3<f64>) -> Vector3<f64> {
        let nn = knn_weights(&self.knn, x, self.k);
        let mut m = Affine::zero();
        let mut offset = Vector3::zeros();
        for &(i, w) in &nn {
            m = m.add(&self.inv_blend[i].scaled(w));
            offset += self.neg_offsets[i] * w;
        }
        m.apply(x) + offset
    }
}
