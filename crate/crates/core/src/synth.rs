//! Synthetic oracle scenes: a parametric torso lying along the base Y-axis,
//! keypoints on its surface, ground-truth targets from known ratios,
//! analytically ray-cast depth maps and configurable noise.
//!
//! The torso surface is the graph
//! `z(x) = h + c·sqrt(1 − (x/a)²)` for `|x| ≤ a`, and the table plane
//! `z = h` beyond. Depth maps only cover a margin around the torso
//! footprint; pixels outside it are invalid (0).

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::DepthMap;
use crate::geom::{look_at, AngleAxis, PinholeCamera, Pixel, RigidTransform};
use crate::handeye::PosePairSample;
use crate::target_model::{
    regress_target, JointObservation, KeypointObservation, Keypoints3D, PoseKind, ReferenceAxes,
    TargetId, TargetModelParams, ViewKeypoints,
};
use crate::{Error, Result, Vec3};

/// Footprint margin around the torso that the depth maps cover (m).
pub const TABLE_MARGIN: f64 = 0.05;
/// Minimum share of surface samples that must project inside both images.
pub const MIN_VISIBLE_SHARE: f64 = 0.9;
/// Pixel displacement of a wrongly assigned hip.
pub const HIP_DISPLACEMENT_PX: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TorsoSpec {
    /// Half-width `a` (m).
    pub half_width: f64,
    /// Thickness `c` above the table (m).
    pub thickness: f64,
    /// Length `L` along +Y (m).
    pub length: f64,
    /// Distance between the shoulder keypoints (m).
    pub shoulder_span: f64,
    /// Y of the shoulder line (m).
    pub shoulder_offset: f64,
    /// Distance from the shoulder line to the hip along Y (m).
    pub hip_offset: f64,
    /// Table height `h` (m).
    pub base_height: f64,
}

impl Default for TorsoSpec {
    fn default() -> Self {
        Self {
            half_width: 0.20,
            thickness: 0.10,
            length: 0.65,
            shoulder_span: 0.32,
            shoulder_offset: 0.06,
            hip_offset: 0.45,
            base_height: 0.0,
        }
    }
}

impl TorsoSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.half_width,
            self.thickness,
            self.length,
            self.shoulder_span,
            self.shoulder_offset,
            self.hip_offset,
            self.base_height,
        ];
        if fields.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidTorso("non-finite field".into()));
        }
        if self.half_width <= 0.0 || self.thickness <= 0.0 || self.length <= 0.0 || self.shoulder_span <= 0.0 {
            return Err(Error::InvalidTorso(
                "half_width, thickness, length and shoulder_span must be positive".into(),
            ));
        }
        if self.shoulder_span >= 2.0 * self.half_width {
            return Err(Error::InvalidTorso(format!(
                "shoulder span {} must be below the torso width {}",
                self.shoulder_span,
                2.0 * self.half_width
            )));
        }
        if self.shoulder_offset < 0.0
            || self.hip_offset <= 0.0
            || self.shoulder_offset + self.hip_offset > self.length
        {
            return Err(Error::InvalidTorso(
                "shoulder and hip must lie within the torso length".into(),
            ));
        }
        Ok(())
    }

    /// Surface height at lateral position `x`.
    pub fn surface_z(&self, x: f64) -> f64 {
        let q = x / self.half_width;
        self.base_height + self.thickness * (1.0 - q * q).max(0.0).sqrt()
    }

    pub fn surface_point(&self, x: f64, y: f64) -> Vec3 {
        Vector3::new(x, y, self.surface_z(x))
    }

    /// Outward unit normal of the surface at lateral position `x`.
    pub fn surface_normal(&self, x: f64) -> Vec3 {
        if x.abs() >= self.half_width {
            return Vector3::z();
        }
        let (a, c) = (self.half_width, self.thickness);
        let dz = self.surface_z(x) - self.base_height;
        Vector3::new(x / (a * a), 0.0, dz / (c * c)).normalize()
    }

    /// Whether `(x, y)` is inside the rendered footprint.
    fn in_footprint(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_width + TABLE_MARGIN && y >= -TABLE_MARGIN && y <= self.length + TABLE_MARGIN
    }

    /// First surface hit along `o + t d`, `t > 0`.
    pub fn ray_cast(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let (a, c, h) = (self.half_width, self.thickness, self.base_height);
        let oz = o.z - h;
        // elliptic cylinder x²/a² + z²/c² = 1, upper half
        let qa = d.x * d.x / (a * a) + d.z * d.z / (c * c);
        let qb = o.x * d.x / (a * a) + oz * d.z / (c * c);
        let qc = o.x * o.x / (a * a) + oz * oz / (c * c) - 1.0;
        let disc = qb * qb - qa * qc;
        if qa > 0.0 && disc >= 0.0 {
            // numerically stable roots of qa t² + 2 qb t + qc
            let s = disc.sqrt();
            let q = -(qb + s.copysign(qb));
            let (r1, r2) = if q != 0.0 { (q / qa, qc / q) } else { (0.0, 0.0) };
            let (t0, t1) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            for t in [t0, t1] {
                if t > 0.0 && oz + t * d.z >= 0.0 {
                    return Some(t);
                }
            }
        }
        if d.z != 0.0 {
            let t = -oz / d.z;
            if t > 0.0 && (o.x + t * d.x).abs() >= a {
                return Some(t);
            }
        }
        None
    }

    /// Analytically ray-cast depth map (camera-frame z) for `cam`.
    pub fn render_depth(&self, cam: &PinholeCamera) -> DepthMap {
        let (w, h) = (cam.width(), cam.height());
        let o = cam.center();
        let data: Vec<f64> = (0..h)
            .into_par_iter()
            .flat_map_iter(|v| {
                (0..w).map(move |u| {
                    let d = cam.ray_direction(&Pixel::new(u as f64, v as f64));
                    match self.ray_cast(&o, &d) {
                        Some(t) => {
                            let p = o + d * t;
                            if self.in_footprint(p.x, p.y) {
                                t
                            } else {
                                0.0
                            }
                        }
                        None => 0.0,
                    }
                })
            })
            .collect();
        DepthMap::new(w, h, data).expect("dimensions match")
    }

    /// Ground-truth 3D keypoints on the surface for `kind`.
    pub fn keypoints(&self, kind: PoseKind) -> Keypoints3D {
        let s = self.shoulder_span;
        let ys = self.shoulder_offset;
        let hip = self.surface_point(-0.45 * s, ys + self.hip_offset);
        match kind {
            PoseKind::Front => Keypoints3D {
                right_shoulder: self.surface_point(-0.5 * s, ys),
                left_shoulder: self.surface_point(0.5 * s, ys),
                right_hip: Some(hip),
            },
            // raised arm: shoulder keypoints move inward and toward the head
            PoseKind::Side => Keypoints3D {
                right_shoulder: self.surface_point(-0.4 * s, (ys - 0.03).max(0.0)),
                left_shoulder: self.surface_point(0.4 * s, (ys - 0.03).max(0.0)),
                right_hip: Some(hip),
            },
        }
    }
}

/// Per-field `[min, max]` intervals for cohort sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TorsoRange {
    pub half_width: [f64; 2],
    pub thickness: [f64; 2],
    pub length: [f64; 2],
    pub shoulder_span: [f64; 2],
    pub shoulder_offset: [f64; 2],
    pub hip_offset: [f64; 2],
    pub base_height: [f64; 2],
}

impl Default for TorsoRange {
    fn default() -> Self {
        Self {
            half_width: [0.18, 0.22],
            thickness: [0.09, 0.12],
            length: [0.60, 0.70],
            shoulder_span: [0.28, 0.34],
            shoulder_offset: [0.04, 0.08],
            hip_offset: [0.40, 0.50],
            base_height: [0.0, 0.0],
        }
    }
}

impl TorsoRange {
    pub fn fixed(t: &TorsoSpec) -> Self {
        Self {
            half_width: [t.half_width; 2],
            thickness: [t.thickness; 2],
            length: [t.length; 2],
            shoulder_span: [t.shoulder_span; 2],
            shoulder_offset: [t.shoulder_offset; 2],
            hip_offset: [t.hip_offset; 2],
            base_height: [t.base_height; 2],
        }
    }

    fn fields(&self) -> [(&'static str, [f64; 2]); 7] {
        [
            ("half_width", self.half_width),
            ("thickness", self.thickness),
            ("length", self.length),
            ("shoulder_span", self.shoulder_span),
            ("shoulder_offset", self.shoulder_offset),
            ("hip_offset", self.hip_offset),
            ("base_height", self.base_height),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.fields() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidRange(format!("{name}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TorsoSpec {
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        TorsoSpec {
            half_width: draw(self.half_width),
            thickness: draw(self.thickness),
            length: draw(self.length),
            shoulder_span: draw(self.shoulder_span),
            shoulder_offset: draw(self.shoulder_offset),
            hip_offset: draw(self.hip_offset),
            base_height: draw(self.base_height),
        }
    }
}

/// Two converging cameras above the torso, separated along the body axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    pub baseline: f64,
    /// Camera height above the table (m).
    pub height_above_table: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            fx: 615.0,
            fy: 615.0,
            width: 640,
            height: 480,
            baseline: 0.3,
            height_above_table: 1.0,
        }
    }
}

impl RigSpec {
    /// Cameras for `torso`; image u runs along +Y (body axis).
    pub fn cameras(&self, torso: &TorsoSpec) -> Result<[PinholeCamera; 2]> {
        let look = Vector3::new(0.0, 0.5 * torso.length, torso.base_height + 0.5 * torso.thickness);
        let z = torso.base_height + self.height_above_table;
        let mk = |dy: f64| -> Result<PinholeCamera> {
            let eye = Vector3::new(0.0, look.y + dy, z);
            let pose = look_at(&eye, &look, &Vector3::y())?;
            PinholeCamera::new(
                self.fx,
                self.fy,
                0.5 * (self.width as f64 - 1.0),
                0.5 * (self.height as f64 - 1.0),
                self.width,
                self.height,
                pose,
            )
        };
        Ok([mk(-0.5 * self.baseline)?, mk(0.5 * self.baseline)?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Keypoint and target-pixel σ per coordinate (px).
    pub keypoint_px: f64,
    /// Depth σ (m).
    pub depth_m: f64,
    /// Probability that the right hip is faulty.
    pub p_fault: f64,
    /// Share of faults that drop the hip; the rest displace it by 50 px.
    pub fault_drop_share: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            keypoint_px: 0.0,
            depth_m: 0.0,
            p_fault: 0.0,
            fault_drop_share: 0.5,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.keypoint_px >= 0.0
            && self.depth_m >= 0.0
            && (0.0..=1.0).contains(&self.p_fault)
            && (0.0..=1.0).contains(&self.fault_drop_share)
            && self.keypoint_px.is_finite()
            && self.depth_m.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid noise spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HipFault {
    #[default]
    None,
    Dropped,
    Displaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetTruth {
    pub target: TargetId,
    pub position: Vec3,
    pub normal: Vec3,
    /// Noiseless projections into both views.
    pub pixels: [Pixel; 2],
    /// Pixels as annotated, with keypoint noise.
    pub observed_pixels: [Pixel; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub pose_kind: PoseKind,
    pub torso: TorsoSpec,
    pub cameras: [PinholeCamera; 2],
    pub depth: [DepthMap; 2],
    pub observation: KeypointObservation,
    pub keypoints: Keypoints3D,
    pub targets: Vec<TargetTruth>,
    pub ratios: TargetModelParams,
    pub noise: NoiseSpec,
    pub hip_fault: HipFault,
}

impl SyntheticScene {
    pub fn target(&self, id: TargetId) -> Option<&TargetTruth> {
        self.targets.iter().find(|t| t.target == id)
    }
}

fn visible_share(torso: &TorsoSpec, cam: &PinholeCamera) -> f64 {
    let n = 21;
    let mut inside = 0;
    for i in 0..n {
        for j in 0..n {
            let x = -torso.half_width + 2.0 * torso.half_width * i as f64 / (n - 1) as f64;
            let y = torso.length * j as f64 / (n - 1) as f64;
            if let Ok(p) = cam.project(&torso.surface_point(x, y)) {
                if cam.contains(&p) {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (n * n) as f64
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

fn jitter(p: Pixel, noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Pixel {
    match noise {
        Some(n) => Pixel::new(p.u + n.sample(rng), p.v + n.sample(rng)),
        None => p,
    }
}

/// Generates one scene. A pure function of its arguments; all randomness
/// comes from `noise.seed`.
pub fn generate_scene(
    id: &str,
    torso: &TorsoSpec,
    ratios: &TargetModelParams,
    cameras: &[PinholeCamera; 2],
    noise: &NoiseSpec,
    kind: PoseKind,
) -> Result<SyntheticScene> {
    torso.validate()?;
    noise.validate()?;
    for cam in cameras {
        let share = visible_share(torso, cam);
        if share < MIN_VISIBLE_SHARE {
            return Err(Error::CameraMissesTorso(share));
        }
    }

    let keypoints = torso.keypoints(kind);
    let axes = ReferenceAxes::default();
    let targets_3d = kind
        .targets()
        .iter()
        .map(|&id| {
            let planar = regress_target(id, &keypoints, ratios, &axes)?;
            if planar.x.abs() > torso.half_width || planar.y < 0.0 || planar.y > torso.length {
                return Err(Error::InvalidTorso(format!(
                    "target {id} at ({:.3}, {:.3}) falls off the torso",
                    planar.x, planar.y
                )));
            }
            Ok((id, torso.surface_point(planar.x, planar.y), torso.surface_normal(planar.x)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut depth = [torso.render_depth(&cameras[0]), torso.render_depth(&cameras[1])];

    // noise, applied last in a fixed order: depths, keypoints, targets, faults
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    if let Some(n) = gaussian(noise.depth_m) {
        for map in depth.iter_mut() {
            for d in map.data_mut() {
                if *d > 0.0 {
                    *d = (*d + n.sample(&mut rng)).max(0.0);
                }
            }
        }
    }
    let px_noise = gaussian(noise.keypoint_px);
    let mut views = [0usize, 1].map(|_| ViewKeypoints {
        left_shoulder: JointObservation::invalid(),
        right_shoulder: JointObservation::invalid(),
        right_hip: JointObservation::invalid(),
    });
    for (vi, view) in views.iter_mut().enumerate() {
        let cam = &cameras[vi];
        view.left_shoulder =
            JointObservation::valid(jitter(cam.project(&keypoints.left_shoulder)?, px_noise.as_ref(), &mut rng));
        view.right_shoulder =
            JointObservation::valid(jitter(cam.project(&keypoints.right_shoulder)?, px_noise.as_ref(), &mut rng));
        let hip = keypoints.right_hip.expect("generated hip");
        view.right_hip = JointObservation::valid(jitter(cam.project(&hip)?, px_noise.as_ref(), &mut rng));
    }

    let mut targets = Vec::with_capacity(targets_3d.len());
    for (id, position, normal) in targets_3d {
        let pixels = [cameras[0].project(&position)?, cameras[1].project(&position)?];
        let observed_pixels = [
            jitter(pixels[0], px_noise.as_ref(), &mut rng),
            jitter(pixels[1], px_noise.as_ref(), &mut rng),
        ];
        targets.push(TargetTruth {
            target: id,
            position,
            normal,
            pixels,
            observed_pixels,
        });
    }

    let mut hip_fault = HipFault::None;
    if noise.p_fault > 0.0 && rng.random_bool(noise.p_fault) {
        if rng.random_bool(noise.fault_drop_share) {
            hip_fault = HipFault::Dropped;
            for view in views.iter_mut() {
                view.right_hip = JointObservation::invalid();
            }
        } else {
            hip_fault = HipFault::Displaced;
            for view in views.iter_mut() {
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                view.right_hip.u += HIP_DISPLACEMENT_PX * ang.cos();
                view.right_hip.v += HIP_DISPLACEMENT_PX * ang.sin();
            }
        }
    }

    let mut observation = KeypointObservation { views };
    observation.clip_to_images([&cameras[0], &cameras[1]]);

    Ok(SyntheticScene {
        id: id.to_string(),
        pose_kind: kind,
        torso: *torso,
        cameras: cameras.clone(),
        depth,
        observation,
        keypoints,
        targets,
        ratios: *ratios,
        noise: *noise,
        hip_fault,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    /// Number of subjects; each yields one scene per pose kind.
    pub subjects: usize,
    pub torso: TorsoRange,
    pub ratios: TargetModelParams,
    pub rig: RigSpec,
    /// `seed` here is the master seed; per-scene seeds are derived from it.
    pub noise: NoiseSpec,
    pub poses: Vec<PoseKind>,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 30,
            torso: TorsoRange::default(),
            ratios: TargetModelParams::default(),
            rig: RigSpec::default(),
            noise: NoiseSpec::default(),
            poses: vec![PoseKind::Front, PoseKind::Side],
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of subject `subject` under `master`.
pub fn derive_seed(master: u64, subject: usize, stream: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(subject as u64)) ^ stream)
}

pub fn scene_id(subject: usize, kind: PoseKind) -> String {
    format!("s{subject:03}_{kind}")
}

/// Generates `subjects × poses` scenes, ordered by subject then pose.
/// Output does not depend on the rayon thread count.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SyntheticScene>> {
    if spec.subjects == 0 {
        return Err(Error::InvalidRange("subjects must be at least 1".into()));
    }
    if spec.poses.is_empty() {
        return Err(Error::InvalidRange("no pose kinds requested".into()));
    }
    spec.torso.validate()?;
    spec.noise.validate()?;

    let jobs: Vec<(usize, usize)> = (0..spec.subjects)
        .flat_map(|s| (0..spec.poses.len()).map(move |p| (s, p)))
        .collect();
    let scenes: Vec<Result<SyntheticScene>> = jobs
        .par_iter()
        .map(|&(subject, pi)| {
            let kind = spec.poses[pi];
            let mut torso_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.noise.seed, subject, 0));
            let torso = spec.torso.sample(&mut torso_rng);
            let cameras = spec.rig.cameras(&torso)?;
            let stream = match kind {
                PoseKind::Front => 1,
                PoseKind::Side => 2,
            };
            let noise = NoiseSpec {
                seed: derive_seed(spec.noise.seed, subject, stream),
                ..spec.noise
            };
            generate_scene(&scene_id(subject, kind), &torso, &spec.ratios, &cameras, &noise, kind)
        })
        .collect();
    scenes.into_iter().collect()
}

/// Hand-eye noise: per-component σ of a rotation vector (degrees) and of
/// the translation (m), applied to the tag observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandEyeNoise {
    pub rotation_deg: f64,
    pub translation_m: f64,
}

/// Random gripper poses `G_i` and tag observations `C_i = X⁻¹ G_i Y` for a
/// camera at `x` (camera in base) and a tag at `y` (tag in gripper).
pub fn handeye_samples(
    x: &RigidTransform,
    y: &RigidTransform,
    n: usize,
    noise: &HandEyeNoise,
    rng: &mut impl Rng,
) -> Vec<PosePairSample> {
    let rot = gaussian(noise.rotation_deg.to_radians());
    let trans = gaussian(noise.translation_m);
    let x_inv = x.inverse();
    (0..n)
        .map(|_| {
            let aa = AngleAxis::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let g = RigidTransform::from_angle_axis(
                aa,
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.2..0.8),
                ),
            );
            let mut c = x_inv.compose(&g).compose(y);
            if let Some(r) = &rot {
                let d = AngleAxis::new(r.sample(rng), r.sample(rng), r.sample(rng));
                let m: Matrix3<f64> = d.to_matrix() * c.rotation();
                c = RigidTransform::new(m, *c.translation()).expect("rotation stays orthonormal");
            }
            if let Some(t) = &trans {
                let dt = Vector3::new(t.sample(rng), t.sample(rng), t.sample(rng));
                c = RigidTransform::new(*c.rotation(), c.translation() + dt).expect("valid");
            }
            PosePairSample {
                gripper_in_base: g,
                tag_in_camera: c,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::triangulate;
    use crate::target_model::{fit_front, FitDataset, FitSample, Joint};
    use approx::assert_relative_eq;

    fn default_scene(kind: PoseKind, noise: NoiseSpec) -> SyntheticScene {
        let torso = TorsoSpec::default();
        let cams = RigSpec::default().cameras(&torso).unwrap();
        generate_scene("t", &torso, &TargetModelParams::default(), &cams, &noise, kind).unwrap()
    }

    #[test]
    fn ray_cast_matches_surface() {
        let torso = TorsoSpec::default();
        let cams = RigSpec::default().cameras(&torso).unwrap();
        let depth = torso.render_depth(&cams[0]);
        let mut checked = 0;
        for v in (0..480).step_by(7) {
            for u in (0..640).step_by(7) {
                let d = depth.get(u, v);
                if d <= 0.0 {
                    continue;
                }
                let p = cams[0].deproject(&Pixel::new(u as f64, v as f64), d).unwrap();
                assert!((p.z - torso.surface_z(p.x)).abs() < 1e-9, "{p:?}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn ray_cast_known_hit() {
        let torso = TorsoSpec::default();
        let t = torso
            .ray_cast(&Vector3::new(0.0, 0.2, 1.0), &Vector3::new(0.0, 0.0, -1.0))
            .unwrap();
        assert_relative_eq!(t, 1.0 - torso.thickness, epsilon = 1e-12);
        let t = torso
            .ray_cast(&Vector3::new(0.3, 0.2, 1.0), &Vector3::new(0.0, 0.0, -1.0))
            .unwrap();
        assert_relative_eq!(t, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn surface_normal_is_gradient() {
        let torso = TorsoSpec::default();
        for x in [-0.19, -0.1, 0.0, 0.05, 0.15] {
            let h = 1e-6;
            let slope = (torso.surface_z(x + h) - torso.surface_z(x - h)) / (2.0 * h);
            let expect = Vector3::new(-slope, 0.0, 1.0).normalize();
            assert!((torso.surface_normal(x) - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn noiseless_keypoints_triangulate_exactly() {
        for kind in [PoseKind::Front, PoseKind::Side] {
            let s = default_scene(kind, NoiseSpec::default());
            for j in Joint::ALL {
                let truth = match j {
                    Joint::LeftShoulder => s.keypoints.left_shoulder,
                    Joint::RightShoulder => s.keypoints.right_shoulder,
                    Joint::RightHip => s.keypoints.right_hip.unwrap(),
                };
                let p = triangulate(
                    &s.cameras[0],
                    &s.cameras[1],
                    &s.observation.pixel(0, j).unwrap(),
                    &s.observation.pixel(1, j).unwrap(),
                )
                .unwrap();
                assert!((p - truth).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn targets_lie_on_surface() {
        for kind in [PoseKind::Front, PoseKind::Side] {
            let s = default_scene(kind, NoiseSpec::default());
            assert_eq!(s.targets.len(), kind.targets().len());
            for t in &s.targets {
                assert!((t.position.z - s.torso.surface_z(t.position.x)).abs() < 1e-9);
                assert_eq!(t.pixels, t.observed_pixels);
            }
        }
    }

    #[test]
    fn hip_fault_always_drops() {
        let noise = NoiseSpec {
            p_fault: 1.0,
            fault_drop_share: 1.0,
            ..NoiseSpec::default()
        };
        let s = default_scene(PoseKind::Side, noise);
        assert_eq!(s.hip_fault, HipFault::Dropped);
        assert!(s.observation.pixel(0, Joint::RightHip).is_none());
        assert!(s.observation.pixel(1, Joint::RightHip).is_none());
    }

    #[test]
    fn displaced_hip_moves_50px() {
        let noise = NoiseSpec {
            p_fault: 1.0,
            fault_drop_share: 0.0,
            ..NoiseSpec::default()
        };
        let clean = default_scene(PoseKind::Side, NoiseSpec::default());
        let s = default_scene(PoseKind::Side, noise);
        assert_eq!(s.hip_fault, HipFault::Displaced);
        for v in 0..2 {
            let a = clean.observation.pixel(v, Joint::RightHip).unwrap();
            let b = s.observation.pixel(v, Joint::RightHip).unwrap();
            assert_relative_eq!(a.distance(&b), HIP_DISPLACEMENT_PX, epsilon = 1e-9);
        }
    }

    #[test]
    fn camera_missing_torso() {
        let torso = TorsoSpec::default();
        let mut cams = RigSpec::default().cameras(&torso).unwrap();
        let away = look_at(
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(5.0, 0.0, 1.0),
            &Vector3::y(),
        )
        .unwrap();
        cams[1] = cams[1].with_pose(away);
        let r = generate_scene(
            "x",
            &torso,
            &TargetModelParams::default(),
            &cams,
            &NoiseSpec::default(),
            PoseKind::Front,
        );
        assert!(matches!(r, Err(Error::CameraMissesTorso(_))));
    }

    #[test]
    fn fixed_range_gives_fixed_scene() {
        let torso = TorsoSpec::default();
        let spec = CohortSpec {
            subjects: 1,
            torso: TorsoRange::fixed(&torso),
            poses: vec![PoseKind::Front],
            ..CohortSpec::default()
        };
        let scenes = generate_cohort(&spec).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].torso, torso);
        assert_eq!(scenes[0].id, "s000_front");
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut spec = CohortSpec::default();
        spec.torso.thickness = [0.2, 0.1];
        assert!(matches!(generate_cohort(&spec), Err(Error::InvalidRange(_))));
        let spec = CohortSpec {
            subjects: 0,
            ..CohortSpec::default()
        };
        assert!(matches!(generate_cohort(&spec), Err(Error::InvalidRange(_))));
    }

    #[test]
    fn cohort_is_deterministic_and_thread_independent() {
        let spec = CohortSpec {
            subjects: 4,
            noise: NoiseSpec {
                keypoint_px: 1.0,
                depth_m: 0.002,
                p_fault: 0.3,
                seed: 42,
                ..NoiseSpec::default()
            },
            ..CohortSpec::default()
        };
        let a = generate_cohort(&spec).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| generate_cohort(&spec).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert_ne!(a[0].torso, a[2].torso);
    }

    #[test]
    fn noiseless_cohort_front_fit_recovers_ratios() {
        let spec = CohortSpec {
            subjects: 8,
            poses: vec![PoseKind::Front],
            ..CohortSpec::default()
        };
        let scenes = generate_cohort(&spec).unwrap();
        for id in [TargetId::T1, TargetId::T2] {
            let data = FitDataset {
                samples: scenes
                    .iter()
                    .map(|s| FitSample {
                        scene_id: s.id.clone(),
                        keypoints: s.keypoints,
                        target: s.target(id).unwrap().position,
                    })
                    .collect(),
            };
            let fit = fit_front(&data, &ReferenceAxes::default()).unwrap();
            let (r1, r2) = spec.ratios.get(id);
            assert!((fit.r1 - r1).abs() < 1e-9 && (fit.r2 - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn handeye_samples_satisfy_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = RigidTransform::from_angle_axis(AngleAxis::new(0.1, -0.4, 2.0), Vector3::new(0.3, 0.1, 1.2));
        let y = RigidTransform::from_angle_axis(AngleAxis::new(0.5, 0.2, 0.0), Vector3::new(0.0, 0.02, 0.05));
        for s in handeye_samples(&x, &y, 5, &HandEyeNoise::default(), &mut rng) {
            let lhs = s.gripper_in_base.compose(&y).to_matrix();
            let rhs = x.compose(&s.tag_in_camera).to_matrix();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
