//! Leave-one-out evaluation, success-rate tables, summary statistics and the
//! two-view vs single-view back-projection comparison.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{fuse, FuseOptions, FusedCloud};
use crate::geom::{angle_between, triangulate};
use crate::synth::SyntheticScene;
use crate::target_model::{
    fit_front, fit_side, localize_keypoints, triangulate_keypoints, FitDataset, FitSample,
    Keypoints3D, PoseKind, ReferenceAxes, SgdConfig, TargetId, TargetModelParams,
};
use crate::{Error, Result};

/// Thresholds 5, 10, …, 40 mm.
pub fn default_thresholds() -> Vec<f64> {
    (1..=8).map(|i| 5.0 * i as f64).collect()
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list, in mm.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidInput(format!("bad threshold spec {s:?}"));
    let out: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + step * i as f64).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(bad());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fuse: FuseOptions,
    pub sgd: SgdConfig,
    pub axes: ReferenceAxes,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fuse: FuseOptions::default(),
            sgd: SgdConfig::default(),
            axes: ReferenceAxes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub scene_id: String,
    pub target: TargetId,
    /// 3D distance to the ground-truth target; `None` when faulty.
    pub position_error_mm: Option<f64>,
    pub normal_error_deg: Option<f64>,
    pub r1: f64,
    pub r2: f64,
    pub training_size: usize,
    pub failure: Option<String>,
}

impl FoldResult {
    pub fn is_faulty(&self) -> bool {
        self.position_error_mm.is_none()
    }
}

/// A scene with its cloud fused and its keypoints triangulated once.
pub struct PreparedScene<'a> {
    pub scene: &'a SyntheticScene,
    pub keypoints: std::result::Result<Keypoints3D, String>,
    pub cloud: FusedCloud,
}

pub fn prepare_scenes<'a>(
    scenes: &[&'a SyntheticScene],
    fuse_opts: &FuseOptions,
) -> Result<Vec<PreparedScene<'a>>> {
    scenes
        .par_iter()
        .map(|&scene| {
            let cams = [&scene.cameras[0], &scene.cameras[1]];
            let cloud = fuse(
                &[(cams[0], &scene.depth[0]), (cams[1], &scene.depth[1])],
                fuse_opts,
            )?;
            let keypoints =
                triangulate_keypoints(cams, &scene.observation, scene.pose_kind).map_err(|e| e.to_string());
            Ok(PreparedScene {
                scene,
                keypoints,
                cloud,
            })
        })
        .collect()
}

/// Scenes of the pose kind that carries `target`, in input order.
pub fn scenes_for(scenes: &[SyntheticScene], target: TargetId) -> Vec<&SyntheticScene> {
    scenes
        .iter()
        .filter(|s| s.pose_kind == target.pose_kind() && s.target(target).is_some())
        .collect()
}

fn fit(data: &FitDataset, target: TargetId, cfg: &EvalConfig) -> Result<(f64, f64)> {
    let r = match target.pose_kind() {
        PoseKind::Front => fit_front(data, &cfg.axes)?,
        PoseKind::Side => fit_side(data, &cfg.axes, &cfg.sgd)?,
    };
    Ok((r.r1, r.r2))
}

fn training_set(prepared: &[PreparedScene<'_>], held_out: usize, target: TargetId) -> FitDataset {
    let samples = prepared
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != held_out)
        .filter_map(|(_, p)| {
            let kp = p.keypoints.as_ref().ok()?;
            if target.pose_kind() == PoseKind::Side && kp.right_hip.is_none() {
                return None;
            }
            Some(FitSample {
                scene_id: p.scene.id.clone(),
                keypoints: *kp,
                target: p.scene.target(target)?.position,
            })
        })
        .collect();
    FitDataset { samples }
}

/// Leave-one-out over prepared scenes: fit on all others, localize the
/// held-out one. Folds run in parallel; results are in input order.
pub fn loocv_prepared(
    prepared: &[PreparedScene<'_>],
    target: TargetId,
    cfg: &EvalConfig,
) -> Result<Vec<FoldResult>> {
    if prepared.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "leave-one-out needs at least 2 scenes, got {}",
            prepared.len()
        )));
    }
    (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            let held = &prepared[i];
            let data = training_set(prepared, i, target);
            if data.contains_scene(&held.scene.id) {
                return Err(Error::InvalidInput(format!(
                    "held-out scene {} leaked into its training set",
                    held.scene.id
                )));
            }
            if data.samples.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "no usable training scenes for fold {}",
                    held.scene.id
                )));
            }
            let (r1, r2) = fit(&data, target, cfg)?;
            let mut params = TargetModelParams::default();
            params.set(target, r1, r2);
            let truth = held.scene.target(target).ok_or_else(|| {
                Error::InvalidInput(format!("scene {} has no target {target}", held.scene.id))
            })?;

            let outcome = held.keypoints.clone().and_then(|kp| {
                localize_keypoints(&kp, &held.cloud, &params, &cfg.axes, target.pose_kind())
                    .map_err(|e| e.to_string())
            });
            let mut fold = FoldResult {
                scene_id: held.scene.id.clone(),
                target,
                position_error_mm: None,
                normal_error_deg: None,
                r1,
                r2,
                training_size: data.samples.len(),
                failure: None,
            };
            match outcome {
                Ok(found) => {
                    let t = found
                        .iter()
                        .find(|t| t.target == target)
                        .expect("localize returns every target of the pose");
                    fold.position_error_mm = Some((t.pose.position() - truth.position).norm() * 1e3);
                    fold.normal_error_deg = Some(angle_between(&t.normal, &truth.normal)?);
                }
                Err(msg) => {
                    warn!("fold {}: target {target} faulty: {msg}", held.scene.id);
                    fold.failure = Some(msg);
                }
            }
            Ok(fold)
        })
        .collect()
}

/// Leave-one-out over the scenes carrying `target`.
pub fn loocv(scenes: &[SyntheticScene], target: TargetId, cfg: &EvalConfig) -> Result<Vec<FoldResult>> {
    let subset = scenes_for(scenes, target);
    if subset.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "leave-one-out needs at least 2 scenes with target {target}, got {}",
            subset.len()
        )));
    }
    let prepared = prepare_scenes(&subset, &cfg.fuse)?;
    let folds = loocv_prepared(&prepared, target, cfg)?;
    info!(
        "target {target}: {} folds, {} faulty",
        folds.len(),
        folds.iter().filter(|f| f.is_faulty()).count()
    );
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuccessTable {
    pub thresholds_mm: Vec<f64>,
    /// Per target: success rate at each threshold.
    pub rates: BTreeMap<TargetId, Vec<f64>>,
}

/// Success = valid output with error ≤ threshold. Faulty folds stay in the
/// denominator and never count as successes.
pub fn success_table(folds: &[FoldResult], thresholds_mm: &[f64]) -> SuccessTable {
    let mut by_target: BTreeMap<TargetId, Vec<&FoldResult>> = BTreeMap::new();
    for f in folds {
        by_target.entry(f.target).or_default().push(f);
    }
    let rates = by_target
        .into_iter()
        .map(|(t, fs)| {
            let n = fs.len() as f64;
            let row = thresholds_mm
                .iter()
                .map(|&th| {
                    fs.iter()
                        .filter(|f| f.position_error_mm.is_some_and(|e| e <= th))
                        .count() as f64
                        / n
                })
                .collect();
            (t, row)
        })
        .collect();
    SuccessTable {
        thresholds_mm: thresholds_mm.to_vec(),
        rates,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and sample standard deviation (n − 1; 0 for one value).
/// Values are summed in sorted order so the result ignores input order.
pub fn mean_std(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
        sq.sort_by(f64::total_cmp);
        (sq.iter().sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Stat { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub position_mm: Stat,
    pub orientation_deg: Stat,
    pub valid_folds: usize,
    pub faulty_folds: usize,
}

/// Pools all targets; faulty folds are excluded from both statistics.
pub fn summarize(folds: &[FoldResult]) -> Result<Summary> {
    let valid: Vec<&FoldResult> = folds.iter().filter(|f| !f.is_faulty()).collect();
    let pos: Vec<f64> = valid.iter().filter_map(|f| f.position_error_mm).collect();
    let ori: Vec<f64> = valid.iter().filter_map(|f| f.normal_error_deg).collect();
    match (mean_std(&pos), mean_std(&ori)) {
        (Some(position_mm), Some(orientation_deg)) => Ok(Summary {
            position_mm,
            orientation_deg,
            valid_folds: valid.len(),
            faulty_folds: folds.len() - valid.len(),
        }),
        _ => Err(Error::NoValidFolds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackprojectionResult {
    pub target: TargetId,
    /// Two-view estimate projected into view `k`.
    pub two_view_px: [f64; 2],
    /// Estimate from camera `k`'s own depth map, projected into view `k`.
    pub single_view_px: [f64; 2],
    /// Estimate from camera `k`'s depth map, projected into the other view.
    pub single_view_cross_px: [f64; 2],
}

/// Compares two-view triangulation against single-view deprojection for
/// one target, both followed by depth adjustment on the fused cloud. The
/// estimates start from the annotated pixels and are scored against the
/// noiseless projections of the true target.
pub fn backprojection_comparison(
    scene: &SyntheticScene,
    cloud: &FusedCloud,
    target: TargetId,
) -> Result<BackprojectionResult> {
    let truth = scene
        .target(target)
        .ok_or_else(|| Error::InvalidInput(format!("scene {} has no target {target}", scene.id)))?;
    let cams = &scene.cameras;
    for (k, p) in truth.observed_pixels.iter().enumerate() {
        if !cams[k].contains(p) {
            return Err(Error::MissingPixel(k));
        }
    }
    let error_in = |estimate: &crate::Vec3, k: usize| -> Result<f64> {
        Ok(cams[k].project(estimate)?.distance(&truth.pixels[k]))
    };

    let obs = &truth.observed_pixels;
    let two = cloud
        .adjust_target(&triangulate(&cams[0], &cams[1], &obs[0], &obs[1])?)?
        .position;
    let mut out = BackprojectionResult {
        target,
        two_view_px: [error_in(&two, 0)?, error_in(&two, 1)?],
        single_view_px: [0.0; 2],
        single_view_cross_px: [0.0; 2],
    };
    for k in 0..2 {
        let d = scene.depth[k].nearest(&obs[k]).ok_or(Error::MissingPixel(k))?;
        let single = cloud.adjust_target(&cams[k].deproject(&obs[k], d)?)?.position;
        out.single_view_px[k] = error_in(&single, k)?;
        out.single_view_cross_px[k] = error_in(&single, 1 - k)?;
    }
    Ok(out)
}

/// Back-projection comparison over prepared scenes, in input order.
pub fn backprojection_study(
    prepared: &[PreparedScene<'_>],
    target: TargetId,
) -> Result<Vec<(String, BackprojectionResult)>> {
    prepared
        .par_iter()
        .map(|p| Ok((p.scene.id.clone(), backprojection_comparison(p.scene, &p.cloud, target)?)))
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub target: TargetId,
    pub folds: usize,
    pub summary: Option<Summary>,
    pub success: SuccessTable,
    pub backprojection_median_px: Option<BackprojectionMedians>,
    pub sgd_seed: u64,
    pub scene_seeds: BTreeMap<String, u64>,
}

/// Per-view medians over scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackprojectionMedians {
    pub two_view: [f64; 2],
    pub single_view: [f64; 2],
}

pub fn backprojection_medians(rows: &[(String, BackprojectionResult)]) -> Option<BackprojectionMedians> {
    let col = |f: &dyn Fn(&BackprojectionResult) -> f64| median(&rows.iter().map(|r| f(&r.1)).collect::<Vec<_>>());
    Some(BackprojectionMedians {
        two_view: [col(&|b| b.two_view_px[0])?, col(&|b| b.two_view_px[1])?],
        single_view: [col(&|b| b.single_view_px[0])?, col(&|b| b.single_view_px[1])?],
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes folds.csv, success_table.csv, backprojection.csv and
/// summary.json into `dir`.
pub fn write_reports(
    dir: &Path,
    folds: &[FoldResult],
    backprojection: &[(String, BackprojectionResult)],
    summary: &ReportSummary,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("folds.csv"))?;
    w.write_record([
        "scene_id",
        "target",
        "faulty",
        "position_error_mm",
        "normal_error_deg",
        "r1",
        "r2",
        "training_size",
        "failure",
    ])?;
    for f in folds {
        w.write_record([
            f.scene_id.clone(),
            f.target.to_string(),
            f.is_faulty().to_string(),
            fmt_opt(f.position_error_mm),
            fmt_opt(f.normal_error_deg),
            format!("{:.9}", f.r1),
            format!("{:.9}", f.r2),
            f.training_size.to_string(),
            f.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let table = &summary.success;
    let mut w = csv::Writer::from_path(dir.join("success_table.csv"))?;
    let mut header = vec!["target".to_string()];
    header.extend(table.thresholds_mm.iter().map(|t| format!("{t}mm")));
    w.write_record(&header)?;
    for (t, row) in &table.rates {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|r| format!("{r:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("backprojection.csv"))?;
    w.write_record([
        "scene_id",
        "target",
        "view",
        "two_view_px",
        "single_view_px",
        "single_view_from_other_px",
    ])?;
    for (id, b) in backprojection {
        for k in 0..2 {
            w.write_record([
                id.clone(),
                b.target.to_string(),
                k.to_string(),
                format!("{:.6}", b.two_view_px[k]),
                format!("{:.6}", b.single_view_px[k]),
                format!("{:.6}", b.single_view_cross_px[1 - k]),
            ])?;
        }
    }
    w.flush()?;

    let json = serde_json::to_string_pretty(summary)?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}
