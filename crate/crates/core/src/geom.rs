//! Rigid transforms, rotation representations, the pinhole camera model and
//! two-view triangulation.
//!
//! Conventions: camera frame is x right, y down, z along the optical axis.
//! A camera's `pose` maps camera-frame coordinates into the base frame.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4, SVD};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

const ORTHO_TOL: f64 = 1e-9;
const LOAD_ORTHO_TOL: f64 = 1e-6;

/// Rotation plus translation; maps `p` to `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized pose: row-major rotation and translation in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRepr {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl TryFrom<PoseRepr> for RigidTransform {
    type Error = Error;

    fn try_from(p: PoseRepr) -> Result<Self> {
        let r = Matrix3::from_row_slice(&p.rotation);
        let t = Vector3::from_column_slice(&p.translation);
        if !is_rotation(&r, LOAD_ORTHO_TOL) {
            return Err(Error::InvalidTransform(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        // Files carry printed decimals; restore exact orthonormality.
        Ok(Self {
            rotation: project_to_so3(&r),
            translation: t,
        })
    }
}

impl From<RigidTransform> for PoseRepr {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        PoseRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Matrix3::identity()).norm() < tol
        && (r.determinant() - 1.0).abs() < tol
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let mut d = Matrix3::identity();
        d[(imin, imin)] = -1.0;
        r = u * d * v_t;
    }
    r
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !is_rotation(&rotation, ORTHO_TOL) {
            return Err(Error::InvalidTransform(format!(
                "|R^T R - I| = {:.3e}, det = {:.12}",
                (rotation.transpose() * rotation - Matrix3::identity()).norm(),
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn from_angle_axis(aa: AngleAxis, translation: Vector3<f64>) -> Self {
        Self {
            rotation: aa.to_matrix(),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        AngleAxis::from_matrix(&self.rotation).angle()
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Rotation vector: unit axis scaled by the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleAxis(pub Vector3<f64>);

impl AngleAxis {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        // Quaternion extraction stays well conditioned at angles near π.
        let q = UnitQuaternion::from_matrix(r);
        Self(q.scaled_axis())
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Rotation3::new(self.0).into_inner()
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Ideal pinhole camera with its pose in the base frame.
///
/// Serializes as the calibration file object
/// `{fx, fy, cx, cy, width, height, pose}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct PinholeCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    pose: RigidTransform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRepr {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: RigidTransform,
}

impl TryFrom<CameraRepr> for PinholeCamera {
    type Error = Error;

    fn try_from(c: CameraRepr) -> Result<Self> {
        PinholeCamera::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.pose)
    }
}

impl From<PinholeCamera> for CameraRepr {
    fn from(c: PinholeCamera) -> Self {
        CameraRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            pose: c.pose,
        }
    }
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pose(&self) -> &RigidTransform {
        &self.pose
    }

    pub fn with_pose(&self, pose: RigidTransform) -> Self {
        Self {
            pose,
            ..self.clone()
        }
    }

    /// Camera center in the base frame.
    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }

    pub fn contains(&self, pix: &Pixel) -> bool {
        pix.is_finite()
            && pix.u >= 0.0
            && pix.v >= 0.0
            && pix.u <= (self.width - 1) as f64
            && pix.v <= (self.height - 1) as f64
    }

    /// Projects a base-frame point to pixel coordinates.
    pub fn project(&self, point: &Vec3) -> Result<Pixel> {
        let pc = self.to_camera(point);
        if pc.z <= 1e-9 {
            return Err(Error::NonPositiveDepth(pc.z));
        }
        Ok(Pixel {
            u: self.fx * pc.x / pc.z + self.cx,
            v: self.fy * pc.y / pc.z + self.cy,
        })
    }

    /// Lifts a pixel at camera-frame depth `depth` (meters) to the base frame.
    pub fn deproject(&self, pix: &Pixel, depth: f64) -> Result<Vec3> {
        if depth <= 0.0 || !depth.is_finite() {
            return Err(Error::NonPositiveDepth(depth));
        }
        let pc = Vector3::new(
            (pix.u - self.cx) * depth / self.fx,
            (pix.v - self.cy) * depth / self.fy,
            depth,
        );
        Ok(self.pose.apply(&pc))
    }

    /// Base-frame direction of the viewing ray through `pix` (z-component 1
    /// in the camera frame, not normalized).
    pub fn ray_direction(&self, pix: &Pixel) -> Vec3 {
        let dc = Vector3::new((pix.u - self.cx) / self.fx, (pix.v - self.cy) / self.fy, 1.0);
        self.pose.rotation * dc
    }
}

/// Linear (DLT) two-view triangulation.
///
/// Stacks the two cross-product constraints per view into a 4x4 homogeneous
/// system and takes the right singular vector of the smallest singular value.
pub fn triangulate(
    cam1: &PinholeCamera,
    cam2: &PinholeCamera,
    pix1: &Pixel,
    pix2: &Pixel,
) -> Result<Vec3> {
    if !pix1.is_finite() || !pix2.is_finite() {
        return Err(Error::InvalidInput("non-finite pixel".into()));
    }
    let baseline = (cam1.center() - cam2.center()).norm();
    if baseline < 1e-6 {
        return Err(Error::DegenerateGeometry(format!(
            "baseline {baseline:.3e} m below 1e-6 m"
        )));
    }
    let d1 = cam1.ray_direction(pix1).normalize();
    let d2 = cam2.ray_direction(pix2).normalize();
    if d1.cross(&d2).norm() < 1e-9 {
        return Err(Error::DegenerateGeometry("viewing rays are parallel".into()));
    }

    let mut a = Matrix4::<f64>::zeros();
    for (k, (cam, pix)) in [(cam1, pix1), (cam2, pix2)].into_iter().enumerate() {
        let p = projection_matrix(cam);
        let r0 = p.row(2) * pix.u - p.row(0);
        let r1 = p.row(2) * pix.v - p.row(1);
        a.set_row(2 * k, &(r0 / r0.norm()));
        a.set_row(2 * k + 1, &(r1 / r1.norm()));
    }

    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .unwrap();
    let h: Vector4<f64> = v_t.row(imin).transpose();
    if h.w.abs() < 1e-12 * h.norm() {
        return Err(Error::DegenerateGeometry("point at infinity".into()));
    }
    Ok(Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

/// `K [R | t]` mapping homogeneous base-frame points to homogeneous pixels.
pub fn projection_matrix(cam: &PinholeCamera) -> nalgebra::Matrix3x4<f64> {
    let world_to_cam = cam.pose.inverse();
    let mut rt = nalgebra::Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&world_to_cam.rotation);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&world_to_cam.translation);
    cam.intrinsics() * rt
}

/// Angle in degrees between two nonzero vectors.
pub fn angle_between(a: &Vec3, b: &Vec3) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroVector);
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Rotation whose +z axis points from `eye` toward `target`, with +x as close
/// as possible to `x_hint`. Useful for building camera poses.
pub fn look_at(eye: &Vec3, target: &Vec3, x_hint: &Vec3) -> Result<RigidTransform> {
    let z = (target - eye)
        .try_normalize(1e-12)
        .ok_or(Error::ZeroVector)?;
    let x = (x_hint - z * x_hint.dot(&z))
        .try_normalize(1e-9)
        .ok_or_else(|| Error::DegenerateGeometry("x hint parallel to viewing axis".into()))?;
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    RigidTransform::new(r, *eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cam_identity() -> PinholeCamera {
        PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480, RigidTransform::identity())
            .unwrap()
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-3.0..3.0f64),
            prop::array::uniform3(-2.0..2.0f64),
        )
            .prop_map(|(r, t)| {
                RigidTransform::from_angle_axis(
                    AngleAxis::new(r[0], r[1], r[2]),
                    Vector3::new(t[0], t[1], t[2]),
                )
            })
    }

    fn arb_point() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-5.0..5.0f64).prop_map(|p| Vector3::new(p[0], p[1], p[2]))
    }

    fn same_rotation(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = RigidTransform::from_angle_axis(
            AngleAxis::new(0.3, -0.2, 1.1),
            Vector3::new(0.4, 1.0, -2.0),
        );
        let ti = t.compose(&RigidTransform::identity());
        assert!((ti.to_matrix() - t.to_matrix()).norm() < 1e-15);
        let id = t.compose(&t.inverse());
        assert!((id.to_matrix() - Matrix4::identity()).norm() < 1e-9);
    }

    #[test]
    fn new_rejects_non_orthonormal() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 1e-6;
        assert!(matches!(
            RigidTransform::new(r, Vector3::zeros()),
            Err(Error::InvalidTransform(_))
        ));
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(refl, Vector3::zeros()).is_err());
    }

    #[test]
    fn project_examples() {
        let cam = cam_identity();
        let p = cam.project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(p.u, 370.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 240.0, epsilon = 1e-12);
        for z in [0.01, 1.0, 7.5] {
            let p = cam.project(&Vector3::new(0.0, 0.0, z)).unwrap();
            assert_eq!((p.u, p.v), (320.0, 240.0));
        }
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn deproject_examples() {
        let cam = cam_identity();
        let p = cam.deproject(&Pixel::new(320.0, 240.0), 1.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        assert!(matches!(
            cam.deproject(&Pixel::new(1.0, 1.0), 0.0),
            Err(Error::NonPositiveDepth(_))
        ));

        // Hand evaluation of R * ((u-cx) z / fx, (v-cy) z / fy, z) + t.
        let pose = RigidTransform::from_angle_axis(
            AngleAxis::new(0.2, -0.7, 0.4),
            Vector3::new(0.5, -0.25, 1.5),
        );
        let cam = PinholeCamera::new(610.0, 605.0, 318.0, 243.0, 640, 480, pose).unwrap();
        let (u, v, z) = (100.0_f64, 400.0_f64, 0.8_f64);
        let xc = (u - 318.0) * z / 610.0;
        let yc = (v - 243.0) * z / 605.0;
        let r = pose.rotation();
        let t = pose.translation();
        let expect = Vector3::new(
            r[(0, 0)] * xc + r[(0, 1)] * yc + r[(0, 2)] * z + t[0],
            r[(1, 0)] * xc + r[(1, 1)] * yc + r[(1, 2)] * z + t[1],
            r[(2, 0)] * xc + r[(2, 1)] * yc + r[(2, 2)] * z + t[2],
        );
        let got = cam.deproject(&Pixel::new(u, v), z).unwrap();
        assert!((got - expect).norm() < 1e-12);
        let back = cam.project(&got).unwrap();
        assert!((back.u - u).abs() < 1e-9 && (back.v - v).abs() < 1e-9);
    }

    #[test]
    fn triangulate_zero_baseline() {
        let cam = cam_identity();
        let err = triangulate(&cam, &cam, &Pixel::new(300.0, 200.0), &Pixel::new(310.0, 200.0));
        assert!(matches!(err, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn triangulate_parallel_rays() {
        let c1 = cam_identity();
        let c2 = c1.with_pose(RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.5)));
        // both rays run along the shared optical axis
        let err = triangulate(&c1, &c2, &Pixel::new(320.0, 240.0), &Pixel::new(320.0, 240.0));
        assert!(matches!(err, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn angle_between_examples() {
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(angle_between(&x, &x).unwrap(), 0.0);
        assert_relative_eq!(
            angle_between(&x, &Vector3::new(0.0, 1.0, 0.0)).unwrap(),
            90.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            angle_between(&x, &Vector3::new(1.0, 1.0, 0.0)).unwrap(),
            45.0,
            epsilon = 1e-9
        );
        assert!(matches!(
            angle_between(&x, &Vector3::zeros()),
            Err(Error::ZeroVector)
        ));
        assert_eq!(angle_between(&x, &(x * 1e-3)).unwrap(), 0.0);
        assert_eq!(angle_between(&x, &-x).unwrap(), 180.0);
    }

    #[test]
    fn angle_axis_at_pi() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let aa = AngleAxis::from_matrix(&r);
        assert_relative_eq!(aa.angle(), PI, epsilon = 1e-12);
        assert!(same_rotation(&aa.to_matrix(), &r, 1e-12));
    }

    #[test]
    fn pose_json_roundtrip_validates() {
        let t = RigidTransform::from_angle_axis(AngleAxis::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert!((back.to_matrix() - t.to_matrix()).norm() < 1e-12);
        let bad = r#"{"rotation":[1,0,0,0,1,0,0,0,2],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<RigidTransform>(bad).is_err());
        let bad_cam = r#"{"fx":500,"fy":500,"cx":700,"cy":240,"width":640,"height":480,
            "pose":{"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]}}"#;
        assert!(serde_json::from_str::<PinholeCamera>(bad_cam).is_err());
    }

    proptest! {
        #[test]
        fn se3_group_laws(a in arb_transform(), b in arb_transform(), c in arb_transform(), p in arb_point()) {
            let ab_c = a.compose(&b).compose(&c);
            let a_bc = a.compose(&b.compose(&c));
            prop_assert!((ab_c.to_matrix() - a_bc.to_matrix()).norm() < 1e-9);
            prop_assert!((a.compose(&a.inverse()).to_matrix() - Matrix4::identity()).norm() < 1e-9);
            prop_assert!((a.inverse().compose(&a).to_matrix() - Matrix4::identity()).norm() < 1e-9);
            let seq = a.apply(&b.apply(&p));
            prop_assert!((a.compose(&b).apply(&p) - seq).norm() < 1e-12 * (1.0 + seq.norm()) * 10.0);
            let r = a.compose(&b);
            prop_assert!((r.rotation().transpose() * r.rotation() - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.rotation().determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn angle_axis_roundtrip(r in prop::array::uniform3(-3.0..3.0f64)) {
            let aa = AngleAxis::new(r[0], r[1], r[2]);
            let m = aa.to_matrix();
            let back = AngleAxis::from_matrix(&m);
            prop_assert!(same_rotation(&back.to_matrix(), &m, 1e-9));
        }

        #[test]
        fn project_deproject_roundtrip(pose in arb_transform(), pc in prop::array::uniform3(-1.0..1.0f64), z in 1e-3..5.0f64) {
            let cam = PinholeCamera::new(600.0, 590.0, 330.0, 250.0, 640, 480, pose).unwrap();
            let p = pose.apply(&Vector3::new(pc[0] * z, pc[1] * z, z));
            let pix = cam.project(&p).unwrap();
            let back = cam.deproject(&pix, z).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
            let again = cam.project(&back).unwrap();
            prop_assert!((again.u - pix.u).abs() < 1e-9 && (again.v - pix.v).abs() < 1e-9);
        }

        #[test]
        fn angle_between_symmetric_scale_invariant(a in arb_point(), b in arb_point(), s in 0.01..100.0f64, t in 0.01..100.0f64) {
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let ab = angle_between(&a, &b).unwrap();
            prop_assert!((ab - angle_between(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((ab - angle_between(&(a * s), &(b * t)).unwrap()).abs() < 1e-6);
            prop_assert!((0.0..=180.0).contains(&ab));
        }
    }
}
