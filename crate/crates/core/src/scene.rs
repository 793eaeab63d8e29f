//! Scene reconstruction from RGB-D frames: point clouds, the dominant
//! support plane, occupancy voxel grids and robot-versus-scene contacts.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{unproject, RgbdFrame, RigidTransform};
use crate::kinematics::{forward_kinematics, JointState, KinematicChain, KinematicsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("frame has no valid depth")]
    EmptyFrame,
    #[error("no plane found (best support {best} < {required} inliers)")]
    NoPlaneFound { best: usize, required: usize },
    #[error("grid of {requested} voxels exceeds cap of {cap}")]
    GridTooLarge { requested: u128, cap: u128 },
    #[error("invalid voxel grid parameters: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Parallel to `points` when present.
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| t.apply(p)).collect(), colors: self.colors.clone() }
    }

    pub fn bounds(&self) -> Option<Aabb> {
        let first = self.points.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Aabb { min: lo, max: hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudOptions {
    /// Use every `stride`-th pixel in both directions.
    pub stride: u32,
}

impl Default for CloudOptions {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

/// One world-frame point per valid depth pixel, optionally skipping pixels
/// for which `exclude(x, y)` is true (hand masks).
pub fn build_point_cloud_masked(
    frame: &RgbdFrame,
    opts: &CloudOptions,
    exclude: Option<&[u8]>,
) -> Result<PointCloud, SceneError> {
    let stride = opts.stride.max(1);
    let k = &frame.intrinsics;
    let w = frame.width();
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for y in (0..frame.height()).step_by(stride as usize) {
        for x in (0..w).step_by(stride as usize) {
            let idx = y as usize * w as usize + x as usize;
            if exclude.is_some_and(|m| m[idx] != 0) {
                continue;
            }
            let d = frame.depth.depth[idx];
            if !d.is_finite() {
                continue;
            }
            let Ok(p) = unproject(x as f64, y as f64, d as f64, k) else { continue };
            points.push(frame.camera_pose.apply(&p));
            colors.push([frame.color[3 * idx], frame.color[3 * idx + 1], frame.color[3 * idx + 2]]);
        }
    }
    if points.is_empty() {
        return Err(SceneError::EmptyFrame);
    }
    Ok(PointCloud { points, colors: Some(colors) })
}

pub fn build_point_cloud(frame: &RgbdFrame, opts: &CloudOptions) -> Result<PointCloud, SceneError> {
    build_point_cloud_masked(frame, opts, None)
}

/// Plane {p : normal·p = offset}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_count: usize,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * self.signed_distance(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneOptions {
    pub iterations: usize,
    pub inlier_dist: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Normal is flipped to face this point. Without one, the normal is
    /// oriented to have a non-negative world z component.
    pub viewpoint: Option<Vector3<f64>>,
}

impl Default for PlaneOptions {
    fn default() -> Self {
        Self { iterations: 256, inlier_dist: 0.01, min_inliers: 100, seed: 0, viewpoint: None }
    }
}

fn count_inliers(points: &[Vector3<f64>], normal: &Vector3<f64>, offset: f64, dist: f64) -> usize {
    points.iter().filter(|p| (normal.dot(p) - offset).abs() <= dist).count()
}

fn least_squares_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(imin).normalize();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((normal, normal.dot(&centroid)))
}

/// RANSAC over 3-point hypotheses, then a least-squares refit on the inliers
/// of the best hypothesis. Deterministic for a fixed seed.
pub fn detect_dominant_plane(cloud: &PointCloud, opts: &PlaneOptions) -> Result<Plane, SceneError> {
    let pts = &cloud.points;
    let required = opts.min_inliers.max(3);
    if pts.len() < 3 {
        return Err(SceneError::NoPlaneFound { best: 0, required });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vector3<f64>, f64, usize)> = None;
    for _ in 0..opts.iterations.max(1) {
        let i = rng.random_range(0..pts.len());
        let j = rng.random_range(0..pts.len());
        let k = rng.random_range(0..pts.len());
        if i == j || j == k || i == k {
            continue;
        }
        let n = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
        let len = n.norm();
        if len < 1e-12 {
            continue;
        }
        let n = n / len;
        let d = n.dot(&pts[i]);
        let count = count_inliers(pts, &n, d, opts.inlier_dist);
        if best.is_none_or(|b| count > b.2) {
            best = Some((n, d, count));
        }
    }
    // Tiny clouds: RANSAC may never draw three distinct indices.
    if best.is_none() && pts.len() == 3 {
        let n = (pts[1] - pts[0]).cross(&(pts[2] - pts[0]));
        if n.norm() > 1e-12 {
            let n = n.normalize();
            best = Some((n, n.dot(&pts[0]), 3));
        }
    }
    let Some((n0, d0, _)) = best else {
        return Err(SceneError::NoPlaneFound { best: 0, required });
    };
    let inliers: Vec<Vector3<f64>> =
        pts.iter().filter(|p| (n0.dot(p) - d0).abs() <= opts.inlier_dist).copied().collect();
    let (mut normal, mut offset) = if inliers.len() >= 3 {
        least_squares_plane(&inliers).unwrap_or((n0, d0))
    } else {
        (n0, d0)
    };
    let inlier_count = count_inliers(pts, &normal, offset, opts.inlier_dist);
    if inlier_count < required {
        return Err(SceneError::NoPlaneFound { best: inlier_count, required });
    }
    let flip = match opts.viewpoint {
        Some(v) => normal.dot(&v) - offset < 0.0,
        None => normal.z < 0.0,
    };
    if flip {
        normal = -normal;
        offset = -offset;
    }
    Ok(Plane { normal, offset, inlier_count })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn translated(&self, v: &Vector3<f64>) -> Aabb {
        Aabb { min: self.min + v, max: self.max + v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelOptions {
    pub resolution: f64,
    pub occupancy_min_points: u32,
    /// Maximum number of voxels allowed before allocation.
    pub max_voxels: u64,
}

impl Default for VoxelOptions {
    fn default() -> Self {
        Self { resolution: 0.01, occupancy_min_points: 1, max_voxels: 512 * 512 * 512 }
    }
}

/// Dense occupancy grid. Linear index is `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vector3<f64>,
    pub resolution: f64,
    pub dims: [u32; 3],
    occupancy: Vec<u64>,
    /// Mean color per voxel, parallel to the linear index. Only meaningful
    /// where occupied.
    pub color: Option<Vec<[u8; 3]>>,
}

impl VoxelGrid {
    pub fn empty(origin: Vector3<f64>, resolution: f64, dims: [u32; 3]) -> Result<Self, SceneError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(SceneError::InvalidGrid("resolution must be positive".into()));
        }
        if dims.contains(&0) {
            return Err(SceneError::InvalidGrid("dims must be >= 1".into()));
        }
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        Ok(Self { origin, resolution, dims, occupancy: vec![0; n.div_ceil(64)], color: None })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    #[inline]
    pub fn linear_index(&self, idx: [u32; 3]) -> usize {
        idx[0] as usize + self.dims[0] as usize * (idx[1] as usize + self.dims[1] as usize * idx[2] as usize)
    }

    pub fn unlinear(&self, i: usize) -> [u32; 3] {
        let nx = self.dims[0] as usize;
        let ny = self.dims[1] as usize;
        [(i % nx) as u32, ((i / nx) % ny) as u32, (i / (nx * ny)) as u32]
    }

    #[inline]
    pub fn is_occupied_linear(&self, i: usize) -> bool {
        self.occupancy[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn is_occupied(&self, idx: [u32; 3]) -> bool {
        self.is_occupied_linear(self.linear_index(idx))
    }

    pub fn set_occupied(&mut self, idx: [u32; 3], occupied: bool) {
        let i = self.linear_index(idx);
        if occupied {
            self.occupancy[i / 64] |= 1 << (i % 64);
        } else {
            self.occupancy[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Linear indices of occupied voxels in increasing order.
    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupancy.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
        })
    }

    /// Raw 64-bit occupancy words (bit i of word i/64 is voxel i).
    pub fn occupancy_words(&self) -> &[u64] {
        &self.occupancy
    }

    pub fn from_words(
        origin: Vector3<f64>,
        resolution: f64,
        dims: [u32; 3],
        occupancy: Vec<u64>,
        color: Option<Vec<[u8; 3]>>,
    ) -> Result<Self, SceneError> {
        let mut g = Self::empty(origin, resolution, dims)?;
        if occupancy.len() != g.occupancy.len() {
            return Err(SceneError::InvalidGrid("occupancy length mismatch".into()));
        }
        if color.as_ref().is_some_and(|c| c.len() != g.voxel_count()) {
            return Err(SceneError::InvalidGrid("color length mismatch".into()));
        }
        g.occupancy = occupancy;
        g.color = color;
        Ok(g)
    }

    pub fn voxel_center(&self, idx: [u32; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.resolution,
            self.origin.y + (idx[1] as f64 + 0.5) * self.resolution,
            self.origin.z + (idx[2] as f64 + 0.5) * self.resolution,
        )
    }

    /// Enclosing voxel of a point, if inside the grid.
    pub fn index_of(&self, p: &Vector3<f64>) -> Option<[u32; 3]> {
        let mut out = [0u32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.resolution).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as u32;
        }
        Some(out)
    }

    pub fn half_diagonal(&self) -> f64 {
        self.resolution * 3f64.sqrt() / 2.0
    }

    pub fn bounds(&self) -> Aabb {
        let ext = Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution;
        Aabb { min: self.origin, max: self.origin + ext }
    }
}

/// Rasterizes a cloud into `bounds` at `opts.resolution`. Points outside the
/// bounds are ignored; a voxel is occupied once it holds
/// `occupancy_min_points` points.
pub fn voxelize(cloud: &PointCloud, bounds: &Aabb, opts: &VoxelOptions) -> Result<VoxelGrid, SceneError> {
    let res = opts.resolution;
    if !(res > 0.0 && res.is_finite()) {
        return Err(SceneError::InvalidGrid("resolution must be positive".into()));
    }
    let ext = bounds.max - bounds.min;
    if !(ext.iter().all(|e| e.is_finite() && *e > 0.0)) {
        return Err(SceneError::InvalidGrid("bounds are degenerate".into()));
    }
    let mut dims = [0u32; 3];
    let mut requested: u128 = 1;
    for a in 0..3 {
        let d = (ext[a] / res - 1e-9).ceil().max(1.0);
        if d > u32::MAX as f64 {
            return Err(SceneError::GridTooLarge { requested: u128::MAX, cap: opts.max_voxels as u128 });
        }
        dims[a] = d as u32;
        requested *= dims[a] as u128;
    }
    if requested > opts.max_voxels as u128 {
        return Err(SceneError::GridTooLarge { requested, cap: opts.max_voxels as u128 });
    }
    let mut grid = VoxelGrid::empty(bounds.min, res, dims)?;
    let n = grid.voxel_count();
    let mut counts = vec![0u32; n];
    let mut sums: Option<Vec<[u32; 3]>> = cloud.colors.as_ref().map(|_| vec![[0u32; 3]; n]);
    for (pi, p) in cloud.points.iter().enumerate() {
        if !bounds.contains(p) {
            continue;
        }
        let Some(idx) = grid.index_of(p) else { continue };
        let li = grid.linear_index(idx);
        counts[li] += 1;
        if let (Some(s), Some(c)) = (sums.as_mut(), cloud.colors.as_ref()) {
            for ch in 0..3 {
                s[li][ch] += c[pi][ch] as u32;
            }
        }
    }
    let min_points = opts.occupancy_min_points.max(1);
    let mut colors = sums.as_ref().map(|_| vec![[0u8; 3]; n]);
    for (li, &c) in counts.iter().enumerate() {
        if c >= min_points {
            grid.occupancy[li / 64] |= 1 << (li % 64);
            if let (Some(out), Some(s)) = (colors.as_mut(), sums.as_ref()) {
                for ch in 0..3 {
                    out[li][ch] = ((s[li][ch] + c / 2) / c) as u8;
                }
            }
        }
    }
    grid.color = colors;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub link_index: usize,
    pub sphere_index: usize,
    /// Linear voxel index.
    pub voxel_index: usize,
    pub penetration_depth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactReport {
    pub contacts: Vec<Contact>,
}

impl ContactReport {
    pub fn is_collision_free(&self) -> bool {
        self.contacts.is_empty()
    }
}

/// World-frame collision spheres of the arm at `q`: (link, sphere, center, radius).
pub fn world_spheres(
    chain: &KinematicChain,
    q: &JointState,
) -> Result<Vec<(usize, usize, Vector3<f64>, f64)>, KinematicsError> {
    let fk = forward_kinematics(chain, q, false)?;
    let mut out = Vec::new();
    for (li, (link, pose)) in chain.links.iter().zip(&fk.link_poses).enumerate() {
        for (si, s) in link.collision_spheres.iter().enumerate() {
            out.push((li, si, pose.apply(&s.center), s.radius));
        }
    }
    Ok(out)
}

/// Sphere-versus-voxel contacts. A pair touches when the center distance is
/// below radius + voxel half-diagonal; penetration is that threshold minus
/// the distance. Contacts are ordered by (link, sphere, voxel).
pub fn collide(chain: &KinematicChain, q: &JointState, grid: &VoxelGrid) -> Result<ContactReport, SceneError> {
    let spheres = world_spheres(chain, q)?;
    let mut contacts = Vec::new();
    if grid.occupied_count() == 0 {
        return Ok(ContactReport { contacts });
    }
    let hd = grid.half_diagonal();
    for (li, si, c, r) in spheres {
        let reach = r + hd;
        // Voxel centers within `reach` of c lie in this index box.
        let mut lo = [0u32; 3];
        let mut hi = [0u32; 3];
        let mut empty = false;
        for a in 0..3 {
            let fl = ((c[a] - reach - grid.origin[a]) / grid.resolution - 0.5).floor();
            let fh = ((c[a] + reach - grid.origin[a]) / grid.resolution - 0.5).ceil();
            let l = fl.max(0.0);
            let h = fh.min(grid.dims[a] as f64 - 1.0);
            if !(l <= h) {
                empty = true;
                break;
            }
            lo[a] = l as u32;
            hi[a] = h as u32;
        }
        if empty {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let li_vox = grid.linear_index([x, y, z]);
                    if !grid.is_occupied_linear(li_vox) {
                        continue;
                    }
                    let d = (grid.voxel_center([x, y, z]) - c).norm();
                    if d < reach {
                        contacts.push(Contact {
                            link_index: li,
                            sphere_index: si,
                            voxel_index: li_vox,
                            penetration_depth: reach - d,
                        });
                    }
                }
            }
        }
    }
    contacts.sort_by_key(|c| (c.link_index, c.sphere_index, c.voxel_index));
    Ok(ContactReport { contacts })
}

/// Collision-model grid over a scene cloud: its bounding box padded by a
/// voxel, at `opts.resolution`.
pub fn scene_grid(cloud: &PointCloud, opts: &VoxelOptions) -> Result<VoxelGrid, SceneError> {
    let b = cloud.bounds().ok_or(SceneError::EmptyFrame)?;
    let pad = Vector3::repeat(opts.resolution);
    voxelize(cloud, &Aabb::new(b.min - pad, b.max + pad), opts)
}
