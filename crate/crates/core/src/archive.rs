//! Session archives: a directory with `manifest.json`, per-frame RGB PNGs,
//! raw little-endian f32 depth files, optional hand masks and background
//! plate, the 2-D hand keypoint stream and optional ground truth.
//!
//! ```text
//! manifest.json
//! frames/000000.png   frames/000000.depth
//! masks/000000.png    (optional, per frame)
//! plate.png           (optional)
//! hand_keypoints.json
//! truth.json          (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::{encode_png, sha256_hex, HandMask};
use crate::geom::{CameraIntrinsics, DepthFrame, RgbdFrame, RigidTransform};
use crate::handtrack::{HandKeypoints2D, LANDMARK_COUNT};
use crate::kinematics::JointState;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive not found: {0}")]
    NotFound(PathBuf),
    #[error("archive corrupt{}: {reason}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    Corrupt { frame: Option<usize>, reason: String },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn corrupt(frame: Option<usize>, reason: impl Into<String>) -> ArchiveError {
    ArchiveError::Corrupt { frame, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub timestamp: f64,
    /// Camera-to-world.
    pub camera_pose: RigidTransform,
    pub hand_present: bool,
    pub color: FileRef,
    pub depth: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub nominal_rate: f64,
    pub frame_count: usize,
    pub frames: Vec<FrameEntry>,
    pub hand_keypoints: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub frame: usize,
    pub timestamp: f64,
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

/// Generator ground truth for synthetic sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub base_pose: RigidTransform,
    /// Hand-to-TCP offset used to place the hand.
    pub offset: RigidTransform,
    pub joint_path: Vec<JointState>,
    pub apertures: Vec<f64>,
    /// Frame indices where the hand's gripper state changes.
    pub gripper_changes: Vec<usize>,
    /// Frame indices at the centre of each stationary hold.
    pub hold_centers: Vec<usize>,
}

/// In-memory archive contents for writing.
#[derive(Debug, Clone)]
pub struct ArchiveContents {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub nominal_rate: f64,
    pub frames: Vec<RgbdFrame>,
    pub hand_present: Vec<bool>,
    pub masks: Option<Vec<HandMask>>,
    pub plate: Option<Vec<u8>>,
    pub keypoints: Vec<KeypointRecord>,
    pub truth: Option<Truth>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io { path: path.to_path_buf(), source }
}

fn put(dir: &Path, name: &str, data: &[u8]) -> Result<FileRef, ArchiveError> {
    let p = dir.join(name);
    fs::write(&p, data).map_err(io(&p))?;
    Ok(FileRef { file: name.to_string(), sha256: sha256_hex(data) })
}

fn png(rgb: &[u8], w: u32, h: u32) -> Result<Vec<u8>, ArchiveError> {
    encode_png(rgb, w, h).map_err(|e| corrupt(None, e.to_string()))
}

fn mask_png(mask: &HandMask) -> Result<Vec<u8>, ArchiveError> {
    let img = image::GrayImage::from_raw(mask.width, mask.height, mask.data.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect())
        .ok_or_else(|| corrupt(None, "mask buffer size"))?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| corrupt(None, e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn depth_bytes(d: &DepthFrame) -> Vec<u8> {
    d.depth.iter().flat_map(|v| if v.is_finite() { v.to_le_bytes() } else { 0f32.to_le_bytes() }).collect()
}

/// Writes an archive into `dir` (created if needed).
pub fn write_archive(dir: &Path, c: &ArchiveContents) -> Result<ArchiveManifest, ArchiveError> {
    for sub in ["", "frames", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io(&p))?;
    }
    let (w, h) = (c.intrinsics.width, c.intrinsics.height);
    let mut entries = Vec::with_capacity(c.frames.len());
    for (i, f) in c.frames.iter().enumerate() {
        let color = put(dir, &format!("frames/{i:06}.png"), &png(&f.color, w, h)?)?;
        let depth = put(dir, &format!("frames/{i:06}.depth"), &depth_bytes(&f.depth))?;
        let mask = match c.masks.as_ref().and_then(|m| m.get(i)) {
            Some(m) => Some(put(dir, &format!("masks/{i:06}.png"), &mask_png(m)?)?),
            None => None,
        };
        entries.push(FrameEntry {
            index: i,
            timestamp: f.timestamp,
            camera_pose: f.camera_pose,
            hand_present: c.hand_present.get(i).copied().unwrap_or(false),
            color,
            depth,
            mask,
        });
    }
    let kp = put(dir, "hand_keypoints.json", &serde_json::to_vec_pretty(&c.keypoints).expect("keypoints serialize"))?;
    let plate = match &c.plate {
        Some(p) => Some(put(dir, "plate.png", &png(p, w, h)?)?),
        None => None,
    };
    let truth = match &c.truth {
        Some(t) => Some(put(dir, "truth.json", &serde_json::to_vec_pretty(t).expect("truth serializes"))?),
        None => None,
    };
    let manifest = ArchiveManifest {
        format_version: ARCHIVE_VERSION,
        name: c.name.clone(),
        intrinsics: c.intrinsics,
        nominal_rate: c.nominal_rate,
        frame_count: entries.len(),
        frames: entries,
        hand_keypoints: kp,
        plate,
        truth,
    };
    put(dir, "manifest.json", &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub frame_count: usize,
    pub errors: Vec<String>,
}

/// Opened archive; payloads are read lazily.
#[derive(Debug, Clone)]
pub struct SessionArchive {
    pub root: PathBuf,
    pub manifest: ArchiveManifest,
}

impl SessionArchive {
    /// Reads and schema-checks the manifest without touching payloads.
    pub fn open(root: &Path) -> Result<Self, ArchiveError> {
        let mpath = root.join("manifest.json");
        if !root.is_dir() || !mpath.is_file() {
            return Err(ArchiveError::NotFound(root.to_path_buf()));
        }
        let text = fs::read(&mpath).map_err(io(&mpath))?;
        let manifest: ArchiveManifest =
            serde_json::from_slice(&text).map_err(|e| corrupt(None, format!("manifest: {e}")))?;
        if manifest.format_version != ARCHIVE_VERSION {
            return Err(corrupt(None, format!("unsupported format version {}", manifest.format_version)));
        }
        manifest.intrinsics.validate().map_err(|e| corrupt(None, e.to_string()))?;
        if manifest.frame_count != manifest.frames.len() {
            return Err(corrupt(None, "frame_count does not match frame list"));
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    fn read(&self, r: &FileRef, frame: Option<usize>) -> Result<Vec<u8>, ArchiveError> {
        if r.file.contains("..") || Path::new(&r.file).is_absolute() {
            return Err(corrupt(frame, format!("illegal path {}", r.file)));
        }
        let p = self.root.join(&r.file);
        fs::read(&p).map_err(|e| corrupt(frame, format!("{}: {e}", r.file)))
    }

    fn read_checked(&self, r: &FileRef, frame: Option<usize>) -> Result<Vec<u8>, ArchiveError> {
        let data = self.read(r, frame)?;
        if sha256_hex(&data) != r.sha256 {
            return Err(corrupt(frame, format!("checksum mismatch for {}", r.file)));
        }
        Ok(data)
    }

    fn decode_rgb(&self, data: &[u8], frame: Option<usize>) -> Result<Vec<u8>, ArchiveError> {
        let img = image::load_from_memory(data).map_err(|e| corrupt(frame, format!("image: {e}")))?.to_rgb8();
        let k = &self.manifest.intrinsics;
        if img.width() != k.width || img.height() != k.height {
            return Err(corrupt(frame, format!("image is {}x{}, expected {}x{}", img.width(), img.height(), k.width, k.height)));
        }
        Ok(img.into_raw())
    }

    pub fn load_frame(&self, i: usize) -> Result<RgbdFrame, ArchiveError> {
        let e = self.manifest.frames.get(i).ok_or_else(|| corrupt(Some(i), "no such frame"))?;
        let k = self.manifest.intrinsics;
        let color = self.decode_rgb(&self.read_checked(&e.color, Some(i))?, Some(i))?;
        let raw = self.read_checked(&e.depth, Some(i))?;
        let n = k.width as usize * k.height as usize;
        if raw.len() != 4 * n {
            return Err(corrupt(Some(i), format!("depth has {} bytes, expected {}", raw.len(), 4 * n)));
        }
        let depth: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let depth = DepthFrame::new(k.width, k.height, depth, e.timestamp).map_err(|err| corrupt(Some(i), err.to_string()))?;
        RgbdFrame::new(color, depth, e.camera_pose, k, e.timestamp).map_err(|err| corrupt(Some(i), err.to_string()))
    }

    pub fn load_frames(&self) -> Result<Vec<RgbdFrame>, ArchiveError> {
        (0..self.len()).map(|i| self.load_frame(i)).collect()
    }

    pub fn has_masks(&self) -> bool {
        self.manifest.frames.iter().any(|f| f.mask.is_some())
    }

    pub fn load_mask(&self, i: usize) -> Result<Option<HandMask>, ArchiveError> {
        let e = self.manifest.frames.get(i).ok_or_else(|| corrupt(Some(i), "no such frame"))?;
        let Some(r) = &e.mask else { return Ok(None) };
        let data = self.read_checked(r, Some(i))?;
        let img = image::load_from_memory(&data).map_err(|err| corrupt(Some(i), format!("mask: {err}")))?.to_luma8();
        let k = &self.manifest.intrinsics;
        if img.width() != k.width || img.height() != k.height {
            return Err(corrupt(Some(i), "mask dimensions differ from frame"));
        }
        Ok(Some(HandMask { width: img.width(), height: img.height(), data: img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect() }))
    }

    /// All masks if every frame has one.
    pub fn load_masks(&self) -> Result<Option<Vec<HandMask>>, ArchiveError> {
        if self.manifest.frames.iter().any(|f| f.mask.is_none()) {
            return Ok(None);
        }
        (0..self.len()).map(|i| Ok(self.load_mask(i)?.expect("checked"))).collect::<Result<Vec<_>, _>>().map(Some)
    }

    pub fn load_plate(&self) -> Result<Option<Vec<u8>>, ArchiveError> {
        match &self.manifest.plate {
            None => Ok(None),
            Some(r) => Ok(Some(self.decode_rgb(&self.read_checked(r, None)?, None)?)),
        }
    }

    pub fn hand_present(&self) -> Vec<bool> {
        self.manifest.frames.iter().map(|f| f.hand_present).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.manifest.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Keypoint records, validated against the frame list.
    pub fn keypoints(&self) -> Result<Vec<(usize, HandKeypoints2D)>, ArchiveError> {
        let data = self.read_checked(&self.manifest.hand_keypoints, None)?;
        let recs: Vec<KeypointRecord> =
            serde_json::from_slice(&data).map_err(|e| corrupt(None, format!("hand_keypoints: {e}")))?;
        let mut out = Vec::with_capacity(recs.len());
        let mut last: Option<usize> = None;
        for r in recs {
            let f = self.manifest.frames.get(r.frame).ok_or_else(|| corrupt(Some(r.frame), "keypoints reference a missing frame"))?;
            if last.is_some_and(|l| r.frame <= l) {
                return Err(corrupt(Some(r.frame), "keypoint records out of order"));
            }
            last = Some(r.frame);
            if (f.timestamp - r.timestamp).abs() > 1e-9 {
                return Err(corrupt(Some(r.frame), "keypoint timestamp differs from frame"));
            }
            if r.points.len() != LANDMARK_COUNT {
                return Err(corrupt(Some(r.frame), format!("{} landmarks, expected {LANDMARK_COUNT}", r.points.len())));
            }
            let kp = HandKeypoints2D::new(r.points, r.confidence, r.timestamp).map_err(|e| corrupt(Some(r.frame), e.to_string()))?;
            out.push((r.frame, kp));
        }
        Ok(out)
    }

    pub fn truth(&self) -> Result<Option<Truth>, ArchiveError> {
        match &self.manifest.truth {
            None => Ok(None),
            Some(r) => {
                let data = self.read_checked(r, None)?;
                serde_json::from_slice(&data).map(Some).map_err(|e| corrupt(None, format!("truth: {e}")))
            }
        }
    }

    /// Full check: checksums, decodability, dimensions, monotone
    /// timestamps and keypoint consistency. Stops at the first failing frame.
    pub fn validate_payloads(&self) -> Result<(), ArchiveError> {
        let frames = &self.manifest.frames;
        for (i, f) in frames.iter().enumerate() {
            if f.index != i {
                return Err(corrupt(Some(i), format!("index field is {}", f.index)));
            }
            if !f.timestamp.is_finite() {
                return Err(corrupt(Some(i), "timestamp is not finite"));
            }
            if i > 0 && f.timestamp <= frames[i - 1].timestamp {
                return Err(corrupt(Some(i), "timestamps are not strictly increasing"));
            }
            if !f.camera_pose.is_finite() {
                return Err(corrupt(Some(i), "camera pose is not finite"));
            }
        }
        for i in 0..frames.len() {
            self.load_frame(i)?;
            self.load_mask(i)?;
        }
        self.load_plate()?;
        self.keypoints()?;
        self.truth()?;
        Ok(())
    }
}

/// Opens and fully validates an archive.
pub fn validate(root: &Path) -> ValidationReport {
    let res = SessionArchive::open(root).and_then(|a| a.validate_payloads().map(|_| a.len()));
    match res {
        Ok(n) => ValidationReport { ok: true, frame_count: n, errors: vec![] },
        Err(e) => ValidationReport { ok: false, frame_count: 0, errors: vec![e.to_string()] },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ArchiveManifest {
        let k = CameraIntrinsics::new(4.0, 4.0, 1.5, 1.5, 4, 4).unwrap();
        let frames: Vec<RgbdFrame> = (0..3)
            .map(|i| {
                let t = i as f64 / 30.0;
                let d = DepthFrame::new(4, 4, (0..16).map(|j| 1.0 + j as f32 * 0.01).collect(), t).unwrap();
                RgbdFrame::new((0..48).map(|j| (j * 5 + i) as u8).collect(), d, RigidTransform::identity(), k, t).unwrap()
            })
            .collect();
        let keypoints = (0..3)
            .map(|i| KeypointRecord {
                frame: i,
                timestamp: i as f64 / 30.0,
                points: vec![[1.0, 1.0]; LANDMARK_COUNT],
                confidence: vec![0.9; LANDMARK_COUNT],
            })
            .collect();
        let masks = (0..3).map(|_| HandMask { width: 4, height: 4, data: (0..16).map(|j| (j % 3 == 0) as u8).collect() }).collect();
        write_archive(
            dir,
            &ArchiveContents {
                name: "tiny".into(),
                intrinsics: k,
                nominal_rate: 30.0,
                frames,
                hand_present: vec![true; 3],
                masks: Some(masks),
                plate: Some(vec![7; 48]),
                keypoints,
                truth: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let r = validate(dir.path());
        assert!(r.ok, "{:?}", r.errors);
        assert_eq!(r.frame_count, 3);
        let a = SessionArchive::open(dir.path()).unwrap();
        let f = a.load_frame(2).unwrap();
        assert_eq!(f.color[0], 2);
        assert_eq!(f.depth.depth[15], 1.15);
        let m = a.load_mask(1).unwrap().unwrap();
        assert_eq!(m.data[3], 1);
        assert_eq!(m.data[4], 0);
        assert_eq!(a.load_plate().unwrap().unwrap(), vec![7; 48]);
        assert_eq!(a.keypoints().unwrap().len(), 3);
    }

    #[test]
    fn missing_archive() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(SessionArchive::open(&dir.path().join("nope")), Err(ArchiveError::NotFound(_))));
    }

    #[test]
    fn corrupted_checksum_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let p = dir.path().join("frames/000001.depth");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        let r = validate(dir.path());
        assert!(!r.ok);
        assert!(r.errors[0].contains("frame 1"), "{:?}", r.errors);
    }

    #[test]
    fn out_of_order_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(dir.path());
        m.frames[2].timestamp = 0.0;
        fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&m).unwrap()).unwrap();
        let r = validate(dir.path());
        assert!(!r.ok);
        assert!(r.errors[0].contains("frame 2"));
    }

    #[test]
    fn truncated_manifest_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(SessionArchive::open(dir.path()), Err(ArchiveError::Corrupt { .. })));
        let extra = text.replacen("\"name\"", "\"surprise\": 1, \"name\"", 1);
        fs::write(&p, extra).unwrap();
        assert!(matches!(SessionArchive::open(dir.path()), Err(ArchiveError::Corrupt { .. })));
    }

    #[test]
    fn truncated_depth_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(dir.path());
        let p = dir.path().join("frames/000000.depth");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..32]).unwrap();
        m.frames[0].depth.sha256 = sha256_hex(&bytes[..32]);
        fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&m).unwrap()).unwrap();
        let r = validate(dir.path());
        assert!(!r.ok);
        assert!(r.errors[0].contains("frame 0") && r.errors[0].contains("bytes"));
    }
}
