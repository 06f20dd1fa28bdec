//! Vision geometry for autonomous ultrasound scan-target localization.
//!
//! The pipeline takes two calibrated RGB-D views of a subject lying on a
//! stretcher, 2D body keypoints (both shoulders and the right hip) and the
//! two depth maps, and produces 6D probe poses `(X, Y, Z, RX, RY, RZ)` in the
//! robot base frame:
//!
//! 1. [`handeye`] solves the camera-to-base transform of each camera.
//! 2. [`geom`] triangulates keypoints from the two views.
//! 3. [`cloud`] fuses the depth maps into a base-frame cloud with normals and
//!    snaps targets onto the surface by planar nearest neighbour.
//! 4. [`target_model`] regresses scan targets from keypoints, fits the ratio
//!    parameters and assembles probe orientations.
//! 5. [`synth`] and [`eval`] provide oracle scenes and the leave-one-out
//!    evaluation harness.
//!
//! All quantities are SI (meters, radians) internally; reports use mm/deg.

pub mod cloud;
pub mod error;
pub mod eval;
pub mod geom;
pub mod handeye;
pub mod io;
pub mod synth;
pub mod target_model;

pub use cloud::{DepthMap, FusedCloud, FuseOptions, PlanarNeighbor, SurfaceSnap};
pub use error::{Error, Result};
pub use geom::{angle_between, triangulate, AngleAxis, PinholeCamera, Pixel, RigidTransform};
pub use handeye::{MotionPair, PosePairSample};
pub use synth::{NoiseSpec, SyntheticScene, TorsoSpec};
pub use target_model::{
    Joint, KeypointObservation, Keypoints3D, PoseKind, ReferenceAxes, ScanTargetPose, TargetId,
    TargetModelParams,
};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
