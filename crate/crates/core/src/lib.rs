//! Demonstration-collection engine for a simulated 7-DoF arm.
//!
//! Recorded RGB-D sessions with 2-D hand keypoints go in; retargeted arm
//! trajectories, keyframes and behavior-cloning datasets come out.
//!
//! Module map:
//!
//! - [`geom`]: rigid transforms, the pinhole camera and RGB-D frame types.
//! - [`kinematics`]: kinematic chain description, FK, Jacobian, DLS IK.
//! - [`scene`]: point clouds, RANSAC support plane, voxel grids, collisions.
//! - [`handtrack`]: keypoint lifting, palm frame, gripper hysteresis, smoothing.
//! - [`demo`]: keypoint sessions, segment planning, hand mirroring, keyframes.
//! - [`export`]: action discretization, robot rendering, compositing, datasets.
//! - [`archive`]: the on-disk session archive and its validation.
//! - [`synthetic`]: scripted tabletop sessions with exact ground truth.
//! - [`pipeline`]: batch processing, replay rendering and throughput benchmarks.

pub mod archive;
pub mod demo;
pub mod export;
pub mod geom;
pub mod handtrack;
pub mod kinematics;
pub mod pipeline;
pub mod scene;
pub mod synthetic;

pub use geom::{CameraIntrinsics, DepthFrame, RgbdFrame, RigidTransform};
pub use kinematics::{JointState, KinematicChain};
