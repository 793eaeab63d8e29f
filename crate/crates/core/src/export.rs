//! Training-data export: discretized voxel/action pairs, composited image
//! sequences with the arm rendered in, the binary voxel payload and the
//! dataset directory writer.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::demo::{Demonstration, KeyFrame};
use crate::geom::{CameraIntrinsics, DepthFrame, RgbdFrame, RigidTransform};
use crate::handtrack::GripperState;
use crate::kinematics::{JointState, KinematicChain, KinematicsError};
use crate::scene::{build_point_cloud_masked, voxelize, Aabb, CloudOptions, SceneError, VoxelGrid, VoxelOptions};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("pose at {translation:?} is outside the workspace")]
    OutOfWorkspace { translation: [f64; 3] },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame {frame} has a hand but no mask")]
    MissingMask { frame: usize },
    #[error("frame {frame} needs a background plate")]
    MissingPlate { frame: usize },
    #[error("no frames to export from")]
    NoFrames,
    #[error("invalid export options: {0}")]
    InvalidOptions(String),
    #[error("invalid voxel payload: {0}")]
    InvalidPayload(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image encoding: {0}")]
    Image(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

/// Regular grid geometry without occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: Vector3<f64>,
    pub resolution: f64,
    pub dims: [u32; 3],
}

impl GridGeometry {
    /// Same dims rule as [`voxelize`].
    pub fn from_bounds(bounds: &Aabb, resolution: f64) -> Result<Self, ExportError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(ExportError::InvalidOptions("resolution must be positive".into()));
        }
        let ext = bounds.max - bounds.min;
        let mut dims = [0u32; 3];
        for a in 0..3 {
            if !(ext[a] > 0.0 && ext[a].is_finite()) {
                return Err(ExportError::InvalidOptions("bounds are degenerate".into()));
            }
            dims[a] = (ext[a] / resolution - 1e-9).ceil().max(1.0) as u32;
        }
        Ok(Self { origin: bounds.min, resolution, dims })
    }

    pub fn of(grid: &VoxelGrid) -> Self {
        Self { origin: grid.origin, resolution: grid.resolution, dims: grid.dims }
    }

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

    pub fn voxel_center(&self, idx: [u32; 3]) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.origin[a] + (idx[a] as f64 + 0.5) * self.resolution)
    }
}

/// Intrinsic x-y-z Euler angles in degrees: R = Rx(a)·Ry(b)·Rz(c), with
/// a, c in (-180, 180] and b in [-90, 90].
pub fn euler_xyz_deg(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let r = q.to_rotation_matrix();
    let m = r.matrix();
    let sb = m[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    let cb = (1.0 - sb * sb).sqrt();
    let (a, c) = if cb > 1e-9 {
        ((-m[(1, 2)]).atan2(m[(2, 2)]), (-m[(0, 1)]).atan2(m[(0, 0)]))
    } else if sb > 0.0 {
        (m[(1, 0)].atan2(m[(1, 1)]), 0.0)
    } else {
        ((-m[(1, 0)]).atan2(m[(1, 1)]), 0.0)
    };
    [a.to_degrees(), b.to_degrees(), c.to_degrees()]
}

pub fn rotation_from_euler_xyz_deg(e: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), e[0].to_radians())
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), e[1].to_radians())
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), e[2].to_radians())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerActAction {
    pub trans_index: [u32; 3],
    pub rot_bins: [u32; 3],
    /// 1 = open.
    pub gripper: u8,
}

fn bins_per_axis(rot_bin_deg: f64) -> Result<u32, ExportError> {
    let n = 360.0 / rot_bin_deg;
    if !(rot_bin_deg > 0.0) || (n - n.round()).abs() > 1e-9 {
        return Err(ExportError::InvalidOptions(format!("rotation bin {rot_bin_deg} does not divide 360")));
    }
    Ok(n.round() as u32)
}

/// Voxel index of the translation, nearest rotation bin per Euler axis
/// (wrapping), and the gripper label.
pub fn discretize_action(
    tcp: &RigidTransform,
    gripper: GripperState,
    geom: &GridGeometry,
    rot_bin_deg: f64,
) -> Result<PerActAction, ExportError> {
    let n = bins_per_axis(rot_bin_deg)? as i64;
    let trans_index = geom.index_of(&tcp.translation).ok_or(ExportError::OutOfWorkspace {
        translation: [tcp.translation.x, tcp.translation.y, tcp.translation.z],
    })?;
    let e = euler_xyz_deg(&tcp.rotation);
    let rot_bins = e.map(|d| ((d / rot_bin_deg).round() as i64).rem_euclid(n) as u32);
    Ok(PerActAction { trans_index, rot_bins, gripper: gripper.as_label() })
}

/// Inverse of [`discretize_action`]: voxel center, bin-center rotation.
pub fn undiscretize_action(a: &PerActAction, geom: &GridGeometry, rot_bin_deg: f64) -> (RigidTransform, GripperState) {
    let e = a.rot_bins.map(|b| {
        let d = b as f64 * rot_bin_deg;
        if d > 180.0 {
            d - 360.0
        } else {
            d
        }
    });
    let g = if a.gripper == 1 { GripperState::Open } else { GripperState::Closed };
    (RigidTransform::new(rotation_from_euler_xyz_deg(e), geom.voxel_center(a.trans_index)), g)
}

/// Per-pixel robot layer: RGBA plus camera-z depth (NaN where empty).
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub width: u32,
    pub height: u32,
    pub rgba: Vec<u8>,
    pub depth: Vec<f32>,
}

impl Overlay {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, rgba: vec![0; 4 * n], depth: vec![f32::NAN; n] }
    }

    pub fn covered_pixels(&self) -> usize {
        self.rgba.chunks_exact(4).filter(|p| p[3] > 0).count()
    }
}

const LINK_COLORS: [[u8; 3]; 8] = [
    [230, 230, 230],
    [250, 140, 40],
    [230, 230, 230],
    [250, 140, 40],
    [230, 230, 230],
    [250, 140, 40],
    [70, 70, 80],
    [40, 40, 45],
];

/// Spheres nearer than this to the camera plane are not drawn.
pub const NEAR_PLANE: f64 = 0.01;

/// Rasterizes camera-frame spheres with a z-buffer; a pixel is written only
/// where the sphere surface is nearer than `scene_depth` (NaN = nothing).
pub fn render_spheres(
    spheres: &[(Vector3<f64>, f64, [u8; 3])],
    k: &CameraIntrinsics,
    scene_depth: &DepthFrame,
) -> Overlay {
    let (w, h) = (k.width, k.height);
    let mut out = Overlay::empty(w, h);
    for (c, r, color) in spheres {
        let (c, r) = (*c, *r);
        if c.z - r <= NEAR_PLANE || !c.iter().all(|v| v.is_finite()) {
            continue;
        }
        // Pixel bounding box: extremes of u = fx X/Z over the enclosing box corners.
        let mut umin = f64::INFINITY;
        let mut umax = f64::NEG_INFINITY;
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for z in [c.z - r, c.z + r] {
            for s in [-r, r] {
                let u = k.cx + k.fx * (c.x + s) / z;
                let v = k.cy + k.fy * (c.y + s) / z;
                umin = umin.min(u);
                umax = umax.max(u);
                vmin = vmin.min(v);
                vmax = vmax.max(v);
            }
        }
        if umax < 0.0 || vmax < 0.0 || umin > (w - 1) as f64 || vmin > (h - 1) as f64 {
            continue;
        }
        let x0 = umin.floor().max(0.0) as u32;
        let x1 = (umax.ceil() as u32).min(w - 1);
        let y0 = vmin.floor().max(0.0) as u32;
        let y1 = (vmax.ceil() as u32).min(h - 1);
        let cc = c.norm_squared() - r * r;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let a = d.norm_squared();
                let b = -2.0 * d.dot(&c);
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    continue;
                }
                // Ray parameter equals camera z because d.z = 1.
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= NEAR_PLANE {
                    continue;
                }
                let i = y as usize * w as usize + x as usize;
                let scene = scene_depth.depth[i];
                let scene = if scene.is_finite() { scene as f64 } else { f64::INFINITY };
                let zbuf = out.depth[i];
                if t < scene && !(zbuf.is_finite() && (zbuf as f64) <= t) {
                    out.depth[i] = t as f32;
                    out.rgba[4 * i..4 * i + 4].copy_from_slice(&[color[0], color[1], color[2], 255]);
                }
            }
        }
    }
    out
}

/// Renders the arm's collision spheres into a camera at `camera_pose`
/// (camera-to-world), respecting scene occlusion.
pub fn render_robot(
    chain: &KinematicChain,
    q: &JointState,
    camera_pose: &RigidTransform,
    k: &CameraIntrinsics,
    scene_depth: &DepthFrame,
) -> Result<Overlay, ExportError> {
    if scene_depth.width != k.width || scene_depth.height != k.height {
        return Err(ExportError::DimensionMismatch("scene depth vs intrinsics".into()));
    }
    let world_to_cam = camera_pose.inverse();
    let spheres: Vec<_> = crate::scene::world_spheres(chain, q)?
        .into_iter()
        .map(|(link, _, c, r)| (world_to_cam.apply(&c), r, LINK_COLORS[link % LINK_COLORS.len()]))
        .collect();
    Ok(render_spheres(&spheres, k, scene_depth))
}

/// Per-frame binary mask, nonzero = hand pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct HandMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl HandMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; width as usize * height as usize] }
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&m| m != 0)
    }
}

/// Mask pixels take the plate, then the overlay is blended on top with
/// `(a*o + (255-a)*b + 127) / 255` per channel.
pub fn composite_frame(
    color: &[u8],
    width: u32,
    height: u32,
    mask: &HandMask,
    plate: Option<&[u8]>,
    overlay: &Overlay,
) -> Result<Vec<u8>, ExportError> {
    let n = width as usize * height as usize;
    if color.len() != 3 * n {
        return Err(ExportError::DimensionMismatch("color buffer".into()));
    }
    if mask.width != width || mask.height != height || mask.data.len() != n {
        return Err(ExportError::DimensionMismatch("mask".into()));
    }
    if overlay.width != width || overlay.height != height {
        return Err(ExportError::DimensionMismatch("overlay".into()));
    }
    if plate.is_some_and(|p| p.len() != 3 * n) {
        return Err(ExportError::DimensionMismatch("background plate".into()));
    }
    if plate.is_none() && mask.any() {
        return Err(ExportError::MissingPlate { frame: 0 });
    }
    let mut out = color.to_vec();
    for i in 0..n {
        if mask.data[i] != 0 {
            let p = plate.expect("checked above");
            out[3 * i..3 * i + 3].copy_from_slice(&p[3 * i..3 * i + 3]);
        }
        let a = overlay.rgba[4 * i + 3] as u32;
        if a > 0 {
            for ch in 0..3 {
                let o = overlay.rgba[4 * i + ch] as u32;
                let b = out[3 * i + ch] as u32;
                out[3 * i + ch] = ((a * o + (255 - a) * b + 127) / 255) as u8;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerActOptions {
    /// Workspace in the robot base frame.
    pub bounds: Aabb,
    pub resolution: f64,
    pub rot_bin_deg: f64,
    pub cloud_stride: u32,
    pub occupancy_min_points: u32,
}

impl Default for PerActOptions {
    fn default() -> Self {
        Self {
            bounds: Aabb::new(Vector3::new(-0.25, -0.5, -0.02), Vector3::new(0.75, 0.5, 0.98)),
            resolution: 0.01,
            rot_bin_deg: 5.0,
            cloud_stride: 1,
            occupancy_min_points: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerActSample {
    pub keyframe_index: usize,
    pub frame_index: usize,
    pub voxel_obs: VoxelGrid,
    pub language_goal: String,
    pub action: PerActAction,
}

/// Index of the frame whose timestamp is nearest `t` (earliest on ties).
pub fn nearest_frame(times: &[f64], t: f64) -> Option<usize> {
    (0..times.len()).min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
}

/// Mask lookup for image export; a hand without a mask is an error.
fn mask_for(
    i: usize,
    frame: &RgbdFrame,
    masks: Option<&[HandMask]>,
    hand_present: &[bool],
) -> Result<HandMask, ExportError> {
    match masks.and_then(|m| m.get(i)) {
        Some(m) => Ok(m.clone()),
        None if hand_present.get(i).copied().unwrap_or(false) => Err(ExportError::MissingMask { frame: i }),
        None => Ok(HandMask::empty(frame.width(), frame.height())),
    }
}

/// One sample per consecutive keyframe pair: observation from the frame
/// nearest keyframe i (hand pixels removed when masks exist, base frame),
/// action from keyframe i+1.
pub fn export_peract(
    demo: &Demonstration,
    frames: &[RgbdFrame],
    masks: Option<&[HandMask]>,
    opts: &PerActOptions,
) -> Result<Vec<PerActSample>, ExportError> {
    if demo.keyframes.len() < 2 {
        return Ok(Vec::new());
    }
    if frames.is_empty() {
        return Err(ExportError::NoFrames);
    }
    let geom = GridGeometry::from_bounds(&opts.bounds, opts.resolution)?;
    bins_per_axis(opts.rot_bin_deg)?;
    let base_inv = demo.base_pose.inverse();
    let times: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let vopts = VoxelOptions {
        resolution: opts.resolution,
        occupancy_min_points: opts.occupancy_min_points,
        ..VoxelOptions::default()
    };
    demo.keyframes
        .windows(2)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, pair)| {
            let fi = nearest_frame(&times, pair[0].t).expect("frames non-empty");
            let frame = &frames[fi];
            let mask = masks.and_then(|m| m.get(fi)).map(|m| m.data.as_slice());
            let cloud = match build_point_cloud_masked(frame, &CloudOptions { stride: opts.cloud_stride }, mask) {
                Ok(c) => c.transformed(&base_inv),
                Err(SceneError::EmptyFrame) => Default::default(),
                Err(e) => return Err(e.into()),
            };
            let mut grid = voxelize(&cloud, &opts.bounds, &vopts)?;
            if grid.color.is_none() {
                grid.color = Some(vec![[0; 3]; grid.voxel_count()]);
            }
            let next = &pair[1];
            let action = discretize_action(&base_inv.compose(&next.tcp), next.gripper, &geom, opts.rot_bin_deg)?;
            Ok(PerActSample {
                keyframe_index: i,
                frame_index: fi,
                voxel_obs: grid,
                language_goal: demo.language_goal.clone(),
                action,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseAction {
    /// TCP in the robot base frame.
    pub tcp: RigidTransform,
    pub gripper: GripperState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBcSample {
    pub frame_index: usize,
    pub width: u32,
    pub height: u32,
    pub image: Vec<u8>,
    pub action: PoseAction,
    /// Position of the target keyframe in the keyframe list.
    pub keyframe: usize,
}

/// Frame indices selected by `stride`: 0, stride, 2*stride, ... so
/// ceil(n / stride) frames.
pub fn strided(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride.max(1)).collect()
}

/// Keyframe targeted from trajectory sample `s`: the first keyframe after
/// it, or the final keyframe.
pub fn next_keyframe(keyframes: &[KeyFrame], s: usize) -> usize {
    keyframes.iter().position(|k| k.index > s).unwrap_or(keyframes.len().saturating_sub(1))
}

/// Composited frames (hand replaced by the plate, arm rendered at the
/// time-aligned trajectory sample) paired with next-keyframe actions.
/// `chain` must carry the demonstration's base pose.
#[allow(clippy::too_many_arguments)]
pub fn export_imagebc(
    chain: &KinematicChain,
    demo: &Demonstration,
    frames: &[RgbdFrame],
    masks: Option<&[HandMask]>,
    hand_present: &[bool],
    plate: Option<&[u8]>,
    stride: usize,
) -> Result<Vec<ImageBcSample>, ExportError> {
    if demo.keyframes.is_empty() || demo.trajectory.is_empty() {
        return Ok(Vec::new());
    }
    let times: Vec<f64> = demo.trajectory.samples.iter().map(|s| s.t).collect();
    let base_inv = demo.base_pose.inverse();
    strided(frames.len(), stride)
        .into_par_iter()
        .map(|fi| {
            let frame = &frames[fi];
            let mask = mask_for(fi, frame, masks, hand_present)?;
            let si = nearest_frame(&times, frame.timestamp).expect("trajectory non-empty");
            let overlay = render_robot(chain, &demo.trajectory.samples[si].q, &frame.camera_pose, &frame.intrinsics, &frame.depth)?;
            let image = composite_frame(&frame.color, frame.width(), frame.height(), &mask, plate, &overlay)
                .map_err(|e| match e {
                    ExportError::MissingPlate { .. } => ExportError::MissingPlate { frame: fi },
                    e => e,
                })?;
            let k = next_keyframe(&demo.keyframes, si);
            let kf = &demo.keyframes[k];
            Ok(ImageBcSample {
                frame_index: fi,
                width: frame.width(),
                height: frame.height(),
                image,
                action: PoseAction { tcp: base_inv.compose(&kf.tcp), gripper: kf.gripper },
                keyframe: k,
            })
        })
        .collect()
}

pub const VOXEL_MAGIC: &[u8; 4] = b"ARVX";
pub const VOXEL_VERSION: u16 = 1;
const FLAG_COLOR: u16 = 1;

/// Binary voxel payload, little-endian: magic, u16 version, u16 flags,
/// 3 x u32 dims, 3 x f64 origin, f64 resolution, LSB-first occupancy
/// bitset of ceil(n/8) bytes, then (if flag bit 0) RGB for each occupied
/// voxel in increasing linear order.
pub fn encode_voxels(grid: &VoxelGrid) -> Vec<u8> {
    let n = grid.voxel_count();
    let mut out = Vec::with_capacity(48 + n.div_ceil(8) + 3 * grid.occupied_count());
    out.extend_from_slice(VOXEL_MAGIC);
    out.extend_from_slice(&VOXEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(if grid.color.is_some() { FLAG_COLOR } else { 0 }).to_le_bytes());
    for d in grid.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for a in 0..3 {
        out.extend_from_slice(&grid.origin[a].to_le_bytes());
    }
    out.extend_from_slice(&grid.resolution.to_le_bytes());
    let bytes: Vec<u8> = grid.occupancy_words().iter().flat_map(|w| w.to_le_bytes()).collect();
    out.extend_from_slice(&bytes[..n.div_ceil(8)]);
    if let Some(colors) = &grid.color {
        for i in grid.occupied_indices() {
            out.extend_from_slice(&colors[i]);
        }
    }
    out
}

pub fn decode_voxels(data: &[u8]) -> Result<VoxelGrid, ExportError> {
    let bad = |m: &str| ExportError::InvalidPayload(m.to_string());
    let mut pos = 0usize;
    let mut take = |len: usize| -> Result<&[u8], ExportError> {
        let s = data.get(pos..pos + len).ok_or_else(|| bad("truncated"))?;
        pos += len;
        Ok(s)
    };
    if take(4)? != VOXEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VOXEL_VERSION {
        return Err(bad("unsupported version"));
    }
    let flags = u16::from_le_bytes(take(2)?.try_into().unwrap());
    let mut dims = [0u32; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(4)?.try_into().unwrap());
    }
    let mut origin = Vector3::zeros();
    for a in 0..3 {
        origin[a] = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let resolution = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let n = dims.iter().map(|&d| d as u128).product::<u128>();
    if n == 0 || n > (data.len() as u128) * 8 {
        return Err(bad("dims inconsistent with payload size"));
    }
    let n = n as usize;
    let bits = take(n.div_ceil(8))?;
    let mut words = vec![0u64; n.div_ceil(64)];
    for (i, b) in bits.iter().enumerate() {
        words[i / 8] |= (*b as u64) << (8 * (i % 8));
    }
    if n % 64 != 0 && words[n / 64] >> (n % 64) != 0 {
        return Err(bad("padding bits set"));
    }
    let mut grid = VoxelGrid::from_words(origin, resolution, dims, words, None)?;
    if flags & FLAG_COLOR != 0 {
        let occ: Vec<usize> = grid.occupied_indices().collect();
        let raw = take(3 * occ.len())?;
        let mut colors = vec![[0u8; 3]; n];
        for (k, &i) in occ.iter().enumerate() {
            colors[i] = [raw[3 * k], raw[3 * k + 1], raw[3 * k + 2]];
        }
        grid.color = Some(colors);
    }
    if pos != data.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(grid)
}

pub fn encode_png(rgb: &[u8], width: u32, height: u32) -> Result<Vec<u8>, ExportError> {
    let img = image::RgbImage::from_raw(width, height, rgb.to_vec())
        .ok_or_else(|| ExportError::DimensionMismatch("png buffer".into()))?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| ExportError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn sha256_hex(data: &[u8]) -> String {
    let d = Sha256::digest(data);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerActEntry {
    pub file: String,
    pub sha256: String,
    pub keyframe_index: usize,
    pub frame_index: usize,
    pub action: PerActAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBcEntry {
    pub file: String,
    pub sha256: String,
    pub frame_index: usize,
    pub keyframe: usize,
    pub action: PoseAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub language_goal: String,
    pub scene_ref: String,
    pub keyframe_count: usize,
    pub trajectory_samples: usize,
    pub demonstration_sha256: String,
    pub peract: Option<PerActManifest>,
    pub imagebc: Option<ImageBcManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerActManifest {
    pub options: PerActOptions,
    pub samples: Vec<PerActEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBcManifest {
    pub stride: usize,
    pub samples: Vec<ImageBcEntry>,
}

fn write_file(path: &Path, data: &[u8]) -> Result<(), ExportError> {
    fs::write(path, data).map_err(io_err(path))
}

/// Writes `manifest.json`, `demonstration.json`, `peract/NNNNNN.vox` and
/// `imagebc/NNNNNN.png` under `dir`. Earlier sample directories in `dir`
/// are replaced. Output contains no wall-clock data.
pub fn write_dataset(
    dir: &Path,
    demo: &Demonstration,
    peract: Option<(&PerActOptions, &[PerActSample])>,
    imagebc: Option<(usize, &[ImageBcSample])>,
) -> Result<DatasetManifest, ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for sub in ["peract", "imagebc"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(io_err(&p))?;
        }
    }
    let demo_json = serde_json::to_vec_pretty(demo).expect("demonstration serializes");
    write_file(&dir.join("demonstration.json"), &demo_json)?;

    let peract = match peract {
        None => None,
        Some((opts, samples)) => {
            let sub = dir.join("peract");
            fs::create_dir_all(&sub).map_err(io_err(&sub))?;
            let mut entries = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let name = format!("peract/{i:06}.vox");
                let data = encode_voxels(&s.voxel_obs);
                write_file(&dir.join(&name), &data)?;
                entries.push(PerActEntry {
                    file: name,
                    sha256: sha256_hex(&data),
                    keyframe_index: s.keyframe_index,
                    frame_index: s.frame_index,
                    action: s.action,
                });
            }
            Some(PerActManifest { options: *opts, samples: entries })
        }
    };
    let imagebc = match imagebc {
        None => None,
        Some((stride, samples)) => {
            let sub = dir.join("imagebc");
            fs::create_dir_all(&sub).map_err(io_err(&sub))?;
            let encoded: Vec<Vec<u8>> =
                samples.par_iter().map(|s| encode_png(&s.image, s.width, s.height)).collect::<Result<_, _>>()?;
            let mut entries = Vec::with_capacity(samples.len());
            for (i, (s, png)) in samples.iter().zip(encoded).enumerate() {
                let name = format!("imagebc/{i:06}.png");
                write_file(&dir.join(&name), &png)?;
                entries.push(ImageBcEntry {
                    file: name,
                    sha256: sha256_hex(&png),
                    frame_index: s.frame_index,
                    keyframe: s.keyframe,
                    action: s.action,
                });
            }
            Some(ImageBcManifest { stride, samples: entries })
        }
    };
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        language_goal: demo.language_goal.clone(),
        scene_ref: demo.scene_ref.clone(),
        keyframe_count: demo.keyframes.len(),
        trajectory_samples: demo.trajectory.len(),
        demonstration_sha256: sha256_hex(&demo_json),
        peract,
        imagebc,
    };
    write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circ_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(360.0);
        d.min(360.0 - d)
    }

    fn workspace() -> GridGeometry {
        GridGeometry::from_bounds(&PerActOptions::default().bounds, 0.01).unwrap()
    }

    #[test]
    fn center_of_voxel_maps_to_itself() {
        let g = workspace();
        let t = RigidTransform::new(UnitQuaternion::identity(), g.voxel_center([10, 20, 30]));
        let a = discretize_action(&t, GripperState::Open, &g, 5.0).unwrap();
        assert_eq!(a.trans_index, [10, 20, 30]);
        assert_eq!(a.rot_bins, [0, 0, 0]);
        assert_eq!(a.gripper, 1);
    }

    #[test]
    fn seven_degrees_about_x() {
        let g = workspace();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 7f64.to_radians());
        let t = RigidTransform::new(rot, g.voxel_center([0, 0, 0]));
        let a = discretize_action(&t, GripperState::Closed, &g, 5.0).unwrap();
        assert_eq!(a.rot_bins, [1, 0, 0]);
        assert_eq!(a.gripper, 0);
    }

    #[test]
    fn negative_angles_wrap() {
        let g = workspace();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), (-10f64).to_radians());
        let a = discretize_action(&RigidTransform::new(rot, g.voxel_center([1, 1, 1])), GripperState::Open, &g, 5.0).unwrap();
        assert_eq!(a.rot_bins, [0, 0, 70]);
    }

    #[test]
    fn outside_workspace() {
        let g = workspace();
        let t = RigidTransform::from_translation(5.0, 0.0, 0.0);
        assert!(matches!(discretize_action(&t, GripperState::Open, &g, 5.0), Err(ExportError::OutOfWorkspace { .. })));
        assert!(matches!(
            discretize_action(&RigidTransform::identity(), GripperState::Open, &g, 7.0),
            Err(ExportError::InvalidOptions(_))
        ));
    }

    #[test]
    fn euler_matches_composed_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let e = [rng.random_range(-179.0..179.0), rng.random_range(-89.0..89.0), rng.random_range(-179.0..179.0)];
            let r = Rotation3::from_axis_angle(&Vector3::x_axis(), f64::to_radians(e[0]))
                * Rotation3::from_axis_angle(&Vector3::y_axis(), f64::to_radians(e[1]))
                * Rotation3::from_axis_angle(&Vector3::z_axis(), f64::to_radians(e[2]));
            let got = euler_xyz_deg(&UnitQuaternion::from_rotation_matrix(&r));
            for a in 0..3 {
                assert!((got[a] - e[a]).abs() < 1e-7, "{got:?} vs {e:?}");
            }
        }
        // Gimbal lock still reconstructs the rotation.
        let q = rotation_from_euler_xyz_deg([30.0, 90.0, 0.0]);
        assert!(rotation_from_euler_xyz_deg(euler_xyz_deg(&q)).angle_to(&q) < 1e-9);
        let q = rotation_from_euler_xyz_deg([30.0, -90.0, 0.0]);
        assert!(rotation_from_euler_xyz_deg(euler_xyz_deg(&q)).angle_to(&q) < 1e-9);
    }

    #[test]
    fn round_trip_bounds_on_random_poses() {
        let g = workspace();
        let b = PerActOptions::default().bounds;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let p = Vector3::from_fn(|a, _| rng.random_range(b.min[a]..b.max[a]));
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let t = RigidTransform::new(q, p);
            let a = discretize_action(&t, GripperState::Open, &g, 5.0).unwrap();
            let (back, gr) = undiscretize_action(&a, &g, 5.0);
            assert_eq!(gr, GripperState::Open);
            for ax in 0..3 {
                assert!((back.translation[ax] - p[ax]).abs() <= 0.005 + 1e-12);
            }
            let e0 = euler_xyz_deg(&q);
            let e1 = a.rot_bins.map(|b| b as f64 * 5.0);
            for ax in 0..3 {
                assert!(circ_diff(e0[ax], e1[ax]) <= 2.5 + 1e-9);
            }
        }
    }

    #[test]
    fn sphere_projects_to_disk() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let scene = DepthFrame::filled(640, 480, f32::NAN, 0.0);
        let r = 0.05;
        let ov = render_spheres(&[(Vector3::new(0.0, 0.0, 1.0), r, [255, 0, 0])], &k, &scene);
        // Analytic silhouette radius fx * r / sqrt(1 - r^2) (sphere at unit distance).
        let rad = 500.0 * r / (1.0 - r * r).sqrt();
        for y in 0..480u32 {
            for x in 0..640u32 {
                let d = ((x as f64 - 320.0).powi(2) + (y as f64 - 240.0).powi(2)).sqrt();
                let covered = ov.rgba[4 * (y as usize * 640 + x as usize) + 3] == 255;
                if d < rad - 0.5 {
                    assert!(covered, "({x},{y}) should be covered");
                }
                if d > rad + 0.5 {
                    assert!(!covered, "({x},{y}) should be empty");
                }
            }
        }
        let center = ov.depth[240 * 640 + 320];
        assert!((center as f64 - (1.0 - r)).abs() < 1e-6);
    }

    #[test]
    fn occluded_or_behind_sphere_is_empty() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let wall = DepthFrame::filled(640, 480, 0.5, 0.0);
        let ov = render_spheres(&[(Vector3::new(0.0, 0.0, 1.0), 0.1, [255, 0, 0])], &k, &wall);
        assert_eq!(ov.covered_pixels(), 0);
        let open = DepthFrame::filled(640, 480, f32::NAN, 0.0);
        let ov = render_spheres(&[(Vector3::new(0.0, 0.0, -1.0), 0.1, [255, 0, 0])], &k, &open);
        assert_eq!(ov.covered_pixels(), 0);
    }

    #[test]
    fn occlusion_is_per_pixel() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        // Left half of the image has a wall at 0.9 m, right half is open.
        let depth: Vec<f32> = (0..64 * 48).map(|i| if i % 64 < 32 { 0.9 } else { 0.0 }).collect();
        let scene = DepthFrame::new(64, 48, depth, 0.0).unwrap();
        let ov = render_spheres(&[(Vector3::new(0.0, 0.0, 1.0), 0.08, [9, 9, 9])], &k, &scene);
        assert!(ov.covered_pixels() > 0);
        for i in 0..64 * 48 {
            if ov.rgba[4 * i + 3] > 0 {
                let s = scene.depth[i];
                assert!(!s.is_finite() || (ov.depth[i] as f64) < s as f64);
            }
        }
    }

    #[test]
    fn nearer_sphere_wins() {
        let k = CameraIntrinsics::new(100.0, 100.0, 10.0, 10.0, 21, 21).unwrap();
        let scene = DepthFrame::filled(21, 21, f32::NAN, 0.0);
        let ov = render_spheres(
            &[(Vector3::new(0.0, 0.0, 2.0), 0.1, [1, 1, 1]), (Vector3::new(0.0, 0.0, 1.0), 0.05, [2, 2, 2])],
            &k,
            &scene,
        );
        assert_eq!(ov.rgba[4 * (10 * 21 + 10)], 2);
    }

    fn rgb(n: usize, v: u8) -> Vec<u8> {
        vec![v; 3 * n]
    }

    #[test]
    fn composite_identity_cases() {
        let color: Vec<u8> = (0..12).collect();
        let plate = rgb(4, 200);
        let none = Overlay::empty(2, 2);
        let out = composite_frame(&color, 2, 2, &HandMask::empty(2, 2), Some(&plate), &none).unwrap();
        assert_eq!(out, color);
        let full = HandMask { width: 2, height: 2, data: vec![1; 4] };
        assert_eq!(composite_frame(&color, 2, 2, &full, Some(&plate), &none).unwrap(), plate);
        assert!(matches!(
            composite_frame(&color, 2, 2, &HandMask::empty(3, 2), Some(&plate), &none),
            Err(ExportError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn composite_two_by_two_by_hand() {
        // Pixels: 0 plain, 1 masked, 2 opaque overlay, 3 half overlay over mask.
        let color = vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120];
        let plate = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 11, 12, 13];
        let mask = HandMask { width: 2, height: 2, data: vec![0, 1, 0, 1] };
        let mut ov = Overlay::empty(2, 2);
        ov.rgba[8..12].copy_from_slice(&[255, 0, 0, 255]);
        ov.rgba[12..16].copy_from_slice(&[200, 100, 0, 128]);
        let out = composite_frame(&color, 2, 2, &mask, Some(&plate), &ov).unwrap();
        // Pixel 3: (128*o + 127*b + 127) / 255 with b from the plate.
        let blend = |o: u32, b: u32| ((128 * o + 127 * b + 127) / 255) as u8;
        assert_eq!(out, vec![10, 20, 30, 4, 5, 6, 255, 0, 0, blend(200, 11), blend(100, 12), blend(0, 13)]);
    }

    #[test]
    fn masked_frame_without_plate() {
        let mask = HandMask { width: 1, height: 1, data: vec![1] };
        assert!(matches!(
            composite_frame(&[1, 2, 3], 1, 1, &mask, None, &Overlay::empty(1, 1)),
            Err(ExportError::MissingPlate { .. })
        ));
    }

    #[test]
    fn stride_uses_ceil() {
        assert_eq!(strided(95, 10).len(), 10);
        assert_eq!(strided(95, 1).len(), 95);
        assert_eq!(strided(100, 4).len(), 25);
    }

    #[test]
    fn voxel_payload_layout() {
        let mut g = VoxelGrid::empty(Vector3::new(1.0, 2.0, 3.0), 0.5, [3, 2, 2]).unwrap();
        g.set_occupied([0, 0, 0], true);
        g.set_occupied([2, 1, 1], true);
        let bytes = encode_voxels(&g);
        assert_eq!(&bytes[0..4], b"ARVX");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 0);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[44..52].try_into().unwrap()), 0.5);
        // 12 voxels -> 2 bytes; voxel 0 and voxel 11 set.
        assert_eq!(&bytes[52..], &[0b0000_0001, 0b0000_1000]);
        assert_eq!(decode_voxels(&bytes).unwrap(), g);
        assert!(decode_voxels(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[53] |= 0x80;
        assert!(decode_voxels(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn voxel_payload_round_trip(
            dims in prop::array::uniform3(1u32..9),
            bits in prop::collection::vec(prop::bool::ANY, 512),
            color in prop::bool::ANY,
            seed in 0u64..1000,
        ) {
            let mut g = VoxelGrid::empty(Vector3::new(-0.5, 0.25, 1.0), 0.01, dims).unwrap();
            let n = g.voxel_count();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..n {
                if bits[i % bits.len()] {
                    g.set_occupied(g.unlinear(i), true);
                }
            }
            if color {
                let mut c = vec![[0u8; 3]; n];
                for i in g.occupied_indices().collect::<Vec<_>>() {
                    c[i] = [rng.random(), rng.random(), rng.random()];
                }
                g.color = Some(c);
            }
            let bytes = encode_voxels(&g);
            let back = decode_voxels(&bytes).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert!(encode_voxels(&back) == bytes);
        }
    }

    #[test]
    fn png_is_deterministic() {
        let px: Vec<u8> = (0..300).map(|i| (i * 7 % 256) as u8).collect();
        let a = encode_png(&px, 10, 10).unwrap();
        assert_eq!(a, encode_png(&px, 10, 10).unwrap());
        let back = image::load_from_memory(&a).unwrap().to_rgb8();
        assert_eq!(back.into_raw(), px);
    }
}
