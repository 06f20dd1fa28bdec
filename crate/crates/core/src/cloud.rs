//! Multi-view depth fusion into a base-frame point cloud with per-point
//! normals, and planar (XY) nearest-neighbour snapping of scan targets.
//!
//! Depth adjustment: a target `T` keeps its `(X, Y)` and takes `Z` and the
//! surface normal from `P = argmin_a ‖(X_a, Y_a) − (X_T, Y_T)‖`.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{PinholeCamera, Pixel, RigidTransform};
use crate::{Error, Result, Vec3};

pub const MAX_DEPTH: f64 = 10.0;
/// Snaps farther than this from the target in XY are flagged.
pub const FAR_FROM_SURFACE: f64 = 0.020;
pub const MIN_PLANAR_CELL: f64 = 0.005;

/// Per-pixel camera-frame depth in meters, row-major. `0` or NaN is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidDepthMap(format!(
                "{} values for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    /// Valid depth at integer pixel, if any.
    pub fn valid_at(&self, u: u32, v: u32) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let d = self.get(u, v);
        is_valid_depth(d).then_some(d)
    }

    /// Depth at the pixel nearest to a subpixel location.
    pub fn nearest(&self, pix: &Pixel) -> Option<f64> {
        if !pix.is_finite() {
            return None;
        }
        let (u, v) = (pix.u.round(), pix.v.round());
        if u < 0.0 || v < 0.0 {
            return None;
        }
        self.valid_at(u as u32, v as u32)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| is_valid_depth(**d)).count()
    }
}

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0 && d <= MAX_DEPTH
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseOptions {
    /// Voxel edge for centroid downsampling; 0 keeps every pixel.
    pub voxel: f64,
    /// Neighbours used for the PCA normal.
    pub k: usize,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self {
            voxel: 0.005,
            k: 30,
        }
    }
}

/// Result of a planar nearest-neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarNeighbor {
    pub index: usize,
    pub point: Vec3,
    pub normal: Vec3,
    pub planar_distance: f64,
}

/// A target snapped onto the fused surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSnap {
    pub position: Vec3,
    pub normal: Vec3,
    pub planar_distance: f64,
    pub far_from_surface: bool,
}

/// Base-frame cloud with unit normals and an XY grid index.
#[derive(Debug, Clone)]
pub struct FusedCloud {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    index: PlanarIndex,
}

impl FusedCloud {
    /// Builds a cloud from points and normals; normals are renormalized.
    pub fn from_parts(points: Vec<Vec3>, normals: Vec<Vec3>, planar_cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.len() != normals.len() {
            return Err(Error::InvalidInput(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        let normals = normals
            .into_iter()
            .map(|n| n.try_normalize(1e-12).ok_or(Error::ZeroVector))
            .collect::<Result<Vec<_>>>()?;
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite cloud point".into()));
        }
        let index = PlanarIndex::build(&points, planar_cell.max(MIN_PLANAR_CELL));
        Ok(Self {
            points,
            normals,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.z), hi.max(p.z))
            })
    }

    /// Rigidly moves points and normals and rebuilds the planar index.
    pub fn transformed(&self, t: &RigidTransform) -> Result<Self> {
        let points = self.points.iter().map(|p| t.apply(p)).collect();
        let normals = self.normals.iter().map(|n| t.apply_vector(n)).collect();
        Self::from_parts(points, normals, self.index.cell)
    }

    pub fn planar_nearest(&self, x: f64, y: f64) -> Result<PlanarNeighbor> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let (index, d2) = self.index.nearest(&self.points, x, y);
        Ok(PlanarNeighbor {
            index,
            point: self.points[index],
            normal: self.normals[index],
            planar_distance: d2.sqrt(),
        })
    }

    /// Replaces the target's depth and normal with those of its planar
    /// nearest neighbour; X and Y are kept.
    pub fn adjust_target(&self, target: &Vec3) -> Result<SurfaceSnap> {
        let nn = self.planar_nearest(target.x, target.y)?;
        Ok(SurfaceSnap {
            position: Vector3::new(target.x, target.y, nn.point.z),
            normal: nn.normal,
            planar_distance: nn.planar_distance,
            far_from_surface: nn.planar_distance > FAR_FROM_SURFACE,
        })
    }
}

/// Exhaustive planar nearest neighbour with the same tie-break as the index:
/// smallest squared distance, then smallest index.
pub fn planar_nearest_linear(points: &[Vec3], x: f64, y: f64) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, planar_d2(p, x, y)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

#[inline]
fn planar_d2(p: &Vec3, x: f64, y: f64) -> f64 {
    let dx = p.x - x;
    let dy = p.y - y;
    dx * dx + dy * dy
}

/// Dense 2D grid over the cloud's XY bounding box, CSR layout.
#[derive(Debug, Clone)]
struct PlanarIndex {
    cell: f64,
    min_x: f64,
    min_y: f64,
    nx: i64,
    ny: i64,
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl PlanarIndex {
    fn build(points: &[Vec3], cell: f64) -> Self {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        let nx = ((max_x - min_x) / cell).floor() as i64 + 1;
        let ny = ((max_y - min_y) / cell).floor() as i64 + 1;
        let mut idx = Self {
            cell,
            min_x,
            min_y,
            nx,
            ny,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let (i, j) = idx.cell_of(p.x, p.y);
                (j.clamp(0, ny - 1) * nx + i.clamp(0, nx - 1)) as usize
            })
            .collect();
        let (starts, items) = csr(&keys, (nx * ny) as usize);
        idx.starts = starts;
        idx.items = items;
        idx
    }

    fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.min_x) / self.cell).floor() as i64,
            ((y - self.min_y) / self.cell).floor() as i64,
        )
    }

    fn bucket(&self, i: i64, j: i64) -> &[u32] {
        let c = (j * self.nx + i) as usize;
        &self.items[self.starts[c] as usize..self.starts[c + 1] as usize]
    }

    fn nearest(&self, points: &[Vec3], x: f64, y: f64) -> (usize, f64) {
        let (qi, qj) = self.cell_of(x, y);
        // Chebyshev ring distance from the query cell to the grid rectangle
        let gap = |q: i64, n: i64| if q < 0 { -q } else if q >= n { q - n + 1 } else { 0 };
        let r_start = gap(qi, self.nx).max(gap(qj, self.ny));
        let r_end = [qi, self.nx - 1 - qi, qj, self.ny - 1 - qj]
            .iter()
            .map(|d| d.abs())
            .max()
            .unwrap()
            + 1;

        let mut best = (usize::MAX, f64::INFINITY);
        let visit = |i: i64, j: i64, best: &mut (usize, f64)| {
            if i < 0 || j < 0 || i >= self.nx || j >= self.ny {
                return;
            }
            for &k in self.bucket(i, j) {
                let d2 = planar_d2(&points[k as usize], x, y);
                if d2 < best.1 || (d2 == best.1 && (k as usize) < best.0) {
                    *best = (k as usize, d2);
                }
            }
        };
        for r in r_start..=r_end {
            if r == 0 {
                visit(qi, qj, &mut best);
            } else {
                for i in qi - r..=qi + r {
                    visit(i, qj - r, &mut best);
                    visit(i, qj + r, &mut best);
                }
                for j in qj - r + 1..qj + r {
                    visit(qi - r, j, &mut best);
                    visit(qi + r, j, &mut best);
                }
            }
            // anything in ring r + 1 is at least r cells away
            let bound = r as f64 * self.cell;
            if best.0 != usize::MAX && best.1 < bound * bound {
                break;
            }
        }
        best
    }
}

fn csr(keys: &[usize], ncells: usize) -> (Vec<u32>, Vec<u32>) {
    let mut starts = vec![0u32; ncells + 1];
    for &k in keys {
        starts[k + 1] += 1;
    }
    for c in 0..ncells {
        starts[c + 1] += starts[c];
    }
    let mut fill = starts.clone();
    let mut items = vec![0u32; keys.len()];
    for (p, &k) in keys.iter().enumerate() {
        items[fill[k] as usize] = p as u32;
        fill[k] += 1;
    }
    (starts, items)
}

/// Dense 3D grid for k-nearest-neighbour queries during normal estimation.
struct Grid3 {
    cell: f64,
    min: Vec3,
    dims: [i64; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl Grid3 {
    fn build(points: &[Vec3], cell: f64) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = (max - min) / cell;
        let dims = [
            ext.x.floor() as i64 + 1,
            ext.y.floor() as i64 + 1,
            ext.z.floor() as i64 + 1,
        ];
        let mut g = Self {
            cell,
            min,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let keys: Vec<usize> = points
            .iter()
            .map(|p| g.linear(g.cell_of(p)) as usize)
            .collect();
        let (starts, items) = csr(&keys, (dims[0] * dims[1] * dims[2]) as usize);
        g.starts = starts;
        g.items = items;
        g
    }

    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        let c = (p - self.min) / self.cell;
        [
            (c.x.floor() as i64).clamp(0, self.dims[0] - 1),
            (c.y.floor() as i64).clamp(0, self.dims[1] - 1),
            (c.z.floor() as i64).clamp(0, self.dims[2] - 1),
        ]
    }

    fn linear(&self, c: [i64; 3]) -> i64 {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// The `k` nearest points to `points[query]` (including itself), as
    /// indices sorted by (distance, index).
    fn knn(&self, points: &[Vec3], query: usize, k: usize, out: &mut Vec<(f64, u32)>) {
        out.clear();
        let q = points[query];
        let qc = self.cell_of(&q);
        let max_r = self.dims.iter().max().copied().unwrap();
        for r in 0..=max_r {
            for dz in -r..=r {
                for dy in -r..=r {
                    let on_face = dz.abs() == r || dy.abs() == r;
                    let mut dx = -r;
                    while dx <= r {
                        let c = [qc[0] + dx, qc[1] + dy, qc[2] + dz];
                        let step = if on_face || dx == r { 1 } else { 2 * r };
                        dx += step.max(1);
                        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a]) {
                            continue;
                        }
                        let l = self.linear(c) as usize;
                        for &i in &self.items[self.starts[l] as usize..self.starts[l + 1] as usize]
                        {
                            let d2 = (points[i as usize] - q).norm_squared();
                            if out.len() < k {
                                insert_sorted(out, (d2, i));
                            } else if (d2, i) < *out.last().unwrap() {
                                out.pop();
                                insert_sorted(out, (d2, i));
                            }
                        }
                    }
                }
            }
            let bound = r as f64 * self.cell;
            if out.len() == k && out.last().unwrap().0 < bound * bound {
                break;
            }
        }
    }
}

fn insert_sorted(v: &mut Vec<(f64, u32)>, item: (f64, u32)) {
    let pos = v.partition_point(|e| *e < item);
    v.insert(pos, item);
}

/// Unit normal of the least-squares plane through `pts`.
pub fn pca_normal<'a>(pts: impl Iterator<Item = &'a Vec3> + Clone) -> Option<Vec3> {
    let n = pts.clone().count();
    if n < 3 {
        return None;
    }
    let mean = pts.clone().fold(Vec3::zeros(), |acc, p| acc + p) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    eig.eigenvectors.column(imin).into_owned().try_normalize(1e-12)
}

/// Fuses registered depth views into one cloud.
///
/// Pixels are deprojected in view order then row-major order; with
/// `voxel > 0` points are replaced by per-voxel centroids in first-seen
/// order. Normals come from PCA over the `k` nearest 3D neighbours and are
/// oriented toward the centroid of the camera centers.
pub fn fuse(views: &[(&PinholeCamera, &DepthMap)], opts: &FuseOptions) -> Result<FusedCloud> {
    if views.is_empty() {
        return Err(Error::InvalidInput("no views to fuse".into()));
    }
    if !(opts.voxel >= 0.0) || !opts.voxel.is_finite() {
        return Err(Error::InvalidInput(format!("voxel {} must be >= 0", opts.voxel)));
    }
    if opts.k < 3 {
        return Err(Error::InvalidInput(format!("k = {} < 3", opts.k)));
    }
    for (i, (cam, depth)) in views.iter().enumerate() {
        if cam.width() != depth.width() || cam.height() != depth.height() {
            return Err(Error::InvalidDepthMap(format!(
                "view {i}: depth {}x{} vs camera {}x{}",
                depth.width(),
                depth.height(),
                cam.width(),
                cam.height()
            )));
        }
    }

    let mut raw = Vec::new();
    for (cam, depth) in views {
        let rows: Vec<Vec<Vec3>> = (0..depth.height())
            .into_par_iter()
            .map(|v| {
                (0..depth.width())
                    .filter_map(|u| {
                        let d = depth.valid_at(u, v)?;
                        cam.deproject(&Pixel::new(u as f64, v as f64), d).ok()
                    })
                    .collect()
            })
            .collect();
        raw.extend(rows.into_iter().flatten());
    }
    if raw.is_empty() {
        return Err(Error::EmptyCloud);
    }

    let points = if opts.voxel > 0.0 {
        voxel_downsample(&raw, opts.voxel)
    } else {
        raw
    };

    let cam_centroid = views
        .iter()
        .fold(Vec3::zeros(), |acc, (c, _)| acc + c.center())
        / views.len() as f64;
    let normals = estimate_normals(&points, opts.k, opts.voxel, &cam_centroid);
    FusedCloud::from_parts(points, normals, opts.voxel)
}

fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    let mut slot_of: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut acc: Vec<(Vec3, u32)> = Vec::new();
    for p in points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let slot = *slot_of.entry(key).or_insert_with(|| {
            acc.push((Vec3::zeros(), 0));
            acc.len() - 1
        });
        acc[slot].0 += p;
        acc[slot].1 += 1;
    }
    acc.into_iter().map(|(s, n)| s / n as f64).collect()
}

fn estimate_normals(points: &[Vec3], k: usize, voxel: f64, toward: &Vec3) -> Vec<Vec3> {
    let grid = Grid3::build(points, 2.0 * voxel.max(0.002));
    let k = k.min(points.len());
    (0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            grid.knn(points, i, k, buf);
            let view = toward - points[i];
            let n = pca_normal(buf.iter().map(|(_, j)| &points[*j as usize]))
                .or_else(|| view.try_normalize(1e-12))
                .unwrap_or_else(Vector3::z);
            if n.dot(&view) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect()
}
