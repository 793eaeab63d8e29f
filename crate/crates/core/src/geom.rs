//! Rigid transforms, the pinhole camera model and RGB-D frames.
//!
//! Conventions used everywhere in the crate: right-handed frames, camera
//! looks along +z with +x right and +y down, lengths in meters, angles in
//! radians. Invalid depth is stored as NaN (0 is accepted at ingest and
//! normalized).

use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

/// Proper rigid motion: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: renormalize(rotation), translation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::new(x, y, z) }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds from a (w, x, y, z) quaternion, normalizing it. Fails on a zero
    /// or non-finite quaternion.
    pub fn from_wxyz(wxyz: [f64; 4], translation: [f64; 3]) -> Option<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 || translation.iter().any(|t| !t.is_finite()) {
            return None;
        }
        Some(Self {
            rotation: UnitQuaternion::new_normalize(q),
            translation: Vector3::from(translation),
        })
    }

    /// Rotation given by an orthonormal matrix (columns are the rotated axes).
    pub fn from_matrix_parts(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        self.to_isometry().to_homogeneous()
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.rotation, iso.translation.vector)
    }

    /// `self ∘ other`: maps p to self(other(p)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform { rotation: renormalize(inv), translation: -(inv * self.translation) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Geodesic distance between the two rotations, radians in [0, π].
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRepr {
    /// (w, x, y, z)
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformRepr { rotation: self.wxyz(), translation: self.translation.into() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(d)?;
        let q = Quaternion::new(repr.rotation[0], repr.rotation[1], repr.rotation[2], repr.rotation[3]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(serde::de::Error::custom(format!(
                "rotation quaternion must be unit length, got norm {}",
                q.norm()
            )));
        }
        RigidTransform::from_wxyz(repr.rotation, repr.translation)
            .ok_or_else(|| serde::de::Error::custom("non-finite transform"))
    }
}

/// Pinhole intrinsics. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let bad = |m: &str| Err(GeomError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Same camera at a different image size.
    pub fn scaled(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height }
    }
}

/// Pixel plus depth to a camera-frame point.
pub fn unproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>, GeomError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(GeomError::InvalidDepth(depth));
    }
    if !k.contains(u, v) {
        return Err(GeomError::OutOfBounds { u, v, width: k.width, height: k.height });
    }
    Ok(Vector3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth))
}

/// Camera-frame point to pixel coordinates. The result may fall outside the
/// image; callers clip.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64), GeomError> {
    if !(p.z > 0.0) {
        return Err(GeomError::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Row-major depth image in meters. Invalid pixels are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub timestamp: f64,
}

impl DepthFrame {
    /// Takes ownership of raw depth, mapping 0 (and negatives) to NaN.
    pub fn new(width: u32, height: u32, mut depth: Vec<f32>, timestamp: f64) -> Result<Self, GeomError> {
        if depth.len() != width as usize * height as usize {
            return Err(GeomError::InvalidFrame(format!(
                "depth has {} values, expected {}x{}",
                depth.len(),
                width,
                height
            )));
        }
        for d in depth.iter_mut() {
            if !(d.is_finite() && *d > 0.0) {
                *d = f32::NAN;
            }
        }
        Ok(Self { width, height, depth, timestamp })
    }

    pub fn filled(width: u32, height: u32, value: f32, timestamp: f64) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize], timestamp)
            .expect("sizes agree by construction")
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.depth[y as usize * self.width as usize + x as usize]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Registered color + depth with the camera pose (camera-to-world).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub color: Vec<u8>,
    pub depth: DepthFrame,
    pub camera_pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub timestamp: f64,
}

impl RgbdFrame {
    pub fn new(
        color: Vec<u8>,
        depth: DepthFrame,
        camera_pose: RigidTransform,
        intrinsics: CameraIntrinsics,
        timestamp: f64,
    ) -> Result<Self, GeomError> {
        intrinsics.validate()?;
        if depth.width != intrinsics.width || depth.height != intrinsics.height {
            return Err(GeomError::InvalidFrame(format!(
                "depth is {}x{} but intrinsics say {}x{}",
                depth.width, depth.height, intrinsics.width, intrinsics.height
            )));
        }
        if color.len() != 3 * depth.width as usize * depth.height as usize {
            return Err(GeomError::InvalidFrame(format!(
                "color has {} bytes, expected {}",
                color.len(),
                3 * depth.width as usize * depth.height as usize
            )));
        }
        Ok(Self { color, depth, camera_pose, intrinsics, timestamp })
    }

    pub fn width(&self) -> u32 {
        self.depth.width
    }

    pub fn height(&self) -> u32 {
        self.depth.height
    }

    /// World-frame point at a pixel with valid depth.
    pub fn world_point(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeomError> {
        let p = unproject(u, v, depth, &self.intrinsics)?;
        Ok(self.camera_pose.apply(&p))
    }
}

/// Nearest-neighbour resample of a depth map to a new size. Used at ingest
/// when the depth sensor resolution differs from the color stream.
pub fn resample_depth(src: &DepthFrame, width: u32, height: u32) -> DepthFrame {
    let mut out = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * src.height as f64 / height as f64).floor() as u32;
        let sy = sy.min(src.height - 1);
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * src.width as f64 / width as f64).floor() as u32;
            out.push(src.at(sx.min(src.width - 1), sy));
        }
    }
    DepthFrame { width, height, depth: out, timestamp: src.timestamp }
}

pub fn point3(v: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*v)
}
