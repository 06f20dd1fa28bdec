//! Eye-to-hand calibration: the fixed camera-to-base transform `X` from
//! gripper poses and observed calibration-tag poses.
//!
//! With `G_i` the gripper pose in the base frame, `C_i` the tag pose in the
//! camera frame and `Y` the (unknown, fixed) tag pose in the gripper frame,
//! every sample satisfies `G_i Y = X C_i`. Eliminating `Y` between samples
//! `i` and `j` gives `A X = X B` with `A = G_j G_i⁻¹` and `B = C_j C_i⁻¹`,
//! which is solved with the Park–Martin closed form.

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{project_to_so3, AngleAxis, RigidTransform};
use crate::{Error, Result};

/// Motions whose gripper rotation is below this angle are discarded.
pub const MIN_MOTION_ANGLE: f64 = 1e-3;
/// Rotation axes closer than this angle count as parallel.
pub const PARALLEL_AXIS_ANGLE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosePairSample {
    pub gripper_in_base: RigidTransform,
    pub tag_in_camera: RigidTransform,
}

/// Relative gripper motion `a` and the matching relative tag motion `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPair {
    pub a: RigidTransform,
    pub b: RigidTransform,
}

impl MotionPair {
    fn from_samples(first: &PosePairSample, second: &PosePairSample) -> Self {
        MotionPair {
            a: second
                .gripper_in_base
                .compose(&first.gripper_in_base.inverse()),
            b: second.tag_in_camera.compose(&first.tag_in_camera.inverse()),
        }
    }

    /// `‖A X − X B‖_F` on the homogeneous 4x4 matrices.
    pub fn residual(&self, x: &RigidTransform) -> f64 {
        (self.a.compose(x).to_matrix() - x.compose(&self.b).to_matrix()).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairingStrategy {
    /// Samples `(i, i + 1)`.
    #[default]
    Consecutive,
    /// Every `(i, j)` with `i < j`.
    AllPairs,
}

pub fn build_motion_pairs(
    samples: &[PosePairSample],
    strategy: PairingStrategy,
) -> Result<Vec<MotionPair>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let candidates: Vec<(usize, usize)> = match strategy {
        PairingStrategy::Consecutive => (0..samples.len() - 1).map(|i| (i, i + 1)).collect(),
        PairingStrategy::AllPairs => (0..samples.len())
            .flat_map(|i| (i + 1..samples.len()).map(move |j| (i, j)))
            .collect(),
    };

    let mut pairs = Vec::with_capacity(candidates.len());
    for (i, j) in candidates {
        let pair = MotionPair::from_samples(&samples[i], &samples[j]);
        let angle = pair.a.rotation_angle();
        if angle < MIN_MOTION_ANGLE {
            debug!("dropping motion ({i}, {j}): rotation {angle:.2e} rad");
            continue;
        }
        pairs.push(pair);
    }
    check_motion_diversity(&pairs)?;
    Ok(pairs)
}

fn check_motion_diversity(pairs: &[MotionPair]) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientMotion(format!(
            "{} usable motion pair(s), need at least 2",
            pairs.len()
        )));
    }
    let axes: Vec<Vector3<f64>> = pairs
        .iter()
        .filter_map(|p| AngleAxis::from_matrix(p.a.rotation()).0.try_normalize(1e-15))
        .collect();
    let min_sin = PARALLEL_AXIS_ANGLE.sin();
    let diverse = axes
        .iter()
        .enumerate()
        .any(|(i, a)| axes[i + 1..].iter().any(|b| a.cross(b).norm() > min_sin));
    if !diverse {
        return Err(Error::InsufficientMotion(
            "all rotation axes are parallel".into(),
        ));
    }
    Ok(())
}

/// Park–Martin solution of `A_i X = X B_i`.
pub fn solve_park_martin(pairs: &[MotionPair]) -> Result<RigidTransform> {
    check_motion_diversity(pairs)?;

    // Rotation: α_i = R_X β_i for the log-vectors of R_A and R_B.
    let mut m = Matrix3::<f64>::zeros();
    for p in pairs {
        let alpha = AngleAxis::from_matrix(p.a.rotation()).0;
        let beta = AngleAxis::from_matrix(p.b.rotation()).0;
        m += beta * alpha.transpose();
    }
    let mtm = m.transpose() * m;
    let eig = SymmetricEigen::new(mtm);
    let mut lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    lambdas.sort_by(|a, b| a.total_cmp(b));
    let (lmin, lmid, lmax) = (lambdas[0], lambdas[1], lambdas[2]);
    if !(lmax > 0.0) || lmid <= 1e-10 * lmax {
        return Err(Error::InsufficientMotion(format!(
            "rotation system rank < 2 (eigenvalues {lmin:.3e}, {lmid:.3e}, {lmax:.3e})"
        )));
    }
    let rx = if lmin > 1e-10 * lmax {
        // (MᵀM)^{-1/2} Mᵀ
        let inv_sqrt = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let w = eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * m.transpose();
        project_to_so3(&w)
    } else {
        // Two independent axes only: the polar factor of Mᵀ with the
        // determinant fixed is still the unique rotation.
        debug!("rank-2 rotation system, using SVD polar factor");
        project_to_so3(&m.transpose())
    };

    // Translation: (R_A − I) t_X = R_X t_B − t_A, stacked.
    let n = pairs.len();
    let mut c = DMatrix::<f64>::zeros(3 * n, 3);
    let mut d = DVector::<f64>::zeros(3 * n);
    for (k, p) in pairs.iter().enumerate() {
        let lhs = p.a.rotation() - Matrix3::identity();
        let rhs = rx * p.b.translation() - p.a.translation();
        c.view_mut((3 * k, 0), (3, 3)).copy_from(&lhs);
        d.rows_mut(3 * k, 3).copy_from(&rhs);
    }
    let svd = c.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-9 * smax {
        return Err(Error::InsufficientMotion(format!(
            "translation system rank-deficient (σ_min/σ_max = {:.3e})",
            smin / smax
        )));
    }
    let t = svd
        .solve(&d, 1e-12 * smax)
        .map_err(|e| Error::InsufficientMotion(e.to_string()))?;
    RigidTransform::new(rx, Vector3::new(t[0], t[1], t[2]))
}

pub fn mean_residual(pairs: &[MotionPair], x: &RigidTransform) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.residual(x)).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub camera_in_base: RigidTransform,
    pub pairs_used: usize,
    pub mean_residual: f64,
}

/// Builds motion pairs and solves for the camera pose in the base frame.
pub fn calibrate(samples: &[PosePairSample], strategy: PairingStrategy) -> Result<Calibration> {
    let pairs = build_motion_pairs(samples, strategy)?;
    let x = solve_park_martin(&pairs)?;
    Ok(Calibration {
        camera_in_base: x,
        pairs_used: pairs.len(),
        mean_residual: mean_residual(&pairs, &x),
    })
}
