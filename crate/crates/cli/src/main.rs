//! `scanloc`: calibration, synthesis, fusion, fitting, localization and
//! evaluation from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use scanloc_core::cloud::{fuse, FuseOptions};
use scanloc_core::eval::{
    backprojection_medians, backprojection_study, default_thresholds, loocv_prepared,
    parse_thresholds, prepare_scenes, scenes_for, success_table, summarize, write_reports,
    EvalConfig, ReportSummary,
};
use scanloc_core::handeye::{calibrate, PairingStrategy, PosePairSample};
use scanloc_core::io::{read_cloud, read_json, read_scene, read_scenes, write_cloud, write_json, write_scene, ParamsFile};
use scanloc_core::synth::{generate_cohort, CohortSpec};
use scanloc_core::target_model::{
    fit_front, fit_side, localize, triangulate_keypoints, FitDataset, FitSample, LocalizedTarget,
    PoseKind, ReferenceAxes, SgdConfig, TargetId, TargetModelParams,
};
use scanloc_core::{PinholeCamera, RigidTransform, SyntheticScene};

#[derive(Parser, Debug)]
#[command(name = "scanloc", version, about = "Two-view scan-target localization")]
struct Cli {
    /// Worker threads for scene generation, fusion and folds.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,

    /// JSON run configuration (fusion, SGD, reference axes, thresholds).
    #[arg(long, global = true)]
    run_config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the camera pose in the robot base frame from tag observations.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Intrinsics {fx, fy, cx, cy, width, height}; adds a ready camera entry.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Use every sample pair instead of consecutive ones.
        #[arg(long)]
        all_pairs: bool,
    },
    /// Generate a synthetic cohort of scenes.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse the two depth maps of a scene into a cloud with normals.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fuse: FuseArgs,
    },
    /// Fit the regression ratios of one target.
    Fit {
        /// Directory of scenes with ground-truth targets.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_target)]
        target: TargetId,
        #[arg(long)]
        out: PathBuf,
        /// Existing params file whose other targets are carried over.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Localize the scan targets of one scene.
    Localize {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        pose: PoseKind,
        #[arg(long)]
        out: PathBuf,
        /// Pre-fused cloud; fused from the scene when absent.
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[command(flatten)]
        fuse: FuseArgs,
    },
    /// Leave-one-out evaluation with reports.
    Evaluate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_parser = parse_target)]
        target: TargetId,
        /// `start:stop:step` or a comma list, in mm.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fuse: FuseArgs,
    },
}

#[derive(Args, Debug, Default)]
struct FuseArgs {
    /// Voxel edge in meters (0 keeps every pixel).
    #[arg(long)]
    voxel: Option<f64>,
    /// Neighbours for the PCA normals.
    #[arg(long)]
    k: Option<usize>,
}

fn parse_target(s: &str) -> std::result::Result<TargetId, String> {
    let n: u8 = s.parse().map_err(|_| format!("target must be 1, 2 or 4, got {s:?}"))?;
    TargetId::try_from(n).map_err(|e| e.to_string())
}

/// Settings shared by the subcommands; every field is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    fuse: FuseOptions,
    sgd: SgdConfig,
    reference_axes: ReferenceAxes,
    thresholds_mm: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fuse: FuseOptions::default(),
            sgd: SgdConfig::default(),
            reference_axes: ReferenceAxes::default(),
            thresholds_mm: default_thresholds(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => read_json(p).with_context(|| format!("run config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if cfg.thresholds_mm.is_empty() || cfg.thresholds_mm.iter().any(|t| !t.is_finite() || *t < 0.0) {
            bail!("run config: thresholds_mm must be non-negative and non-empty");
        }
        Ok(cfg)
    }

    fn apply(&mut self, f: &FuseArgs) {
        if let Some(v) = f.voxel {
            self.fuse.voxel = v;
        }
        if let Some(k) = f.k {
            self.fuse.k = k;
        }
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fuse: self.fuse,
            sgd: self.sgd,
            axes: self.reference_axes,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize)]
struct CalibrationFile {
    camera_in_base: RigidTransform,
    pairs_used: usize,
    mean_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    camera: Option<PinholeCamera>,
}

#[derive(Debug, Serialize)]
struct PosesFile<'a> {
    scene_id: &'a str,
    pose_kind: PoseKind,
    targets: Vec<LocalizedTarget>,
}

fn log_json<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => info!("{what}: {s}"),
        Err(e) => info!("{what}: <unserializable: {e}>"),
    }
}

fn fuse_scene(scene: &SyntheticScene, opts: &FuseOptions) -> Result<scanloc_core::FusedCloud> {
    let [c0, c1] = &scene.cameras;
    let [d0, d1] = &scene.depth;
    Ok(fuse(&[(c0, d0), (c1, d1)], opts)?)
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build_global()
        .context("thread pool")?;
    let mut cfg = RunConfig::load(cli.run_config.as_deref())?;
    info!("jobs: {}", cli.jobs);

    match cli.command {
        Command::Calibrate {
            samples,
            out,
            intrinsics,
            all_pairs,
        } => {
            let data: Vec<PosePairSample> =
                read_json(&samples).with_context(|| format!("samples {}", samples.display()))?;
            let strategy = if all_pairs {
                PairingStrategy::AllPairs
            } else {
                PairingStrategy::Consecutive
            };
            info!("calibrate: {} samples, pairing {strategy:?}", data.len());
            let cal = calibrate(&data, strategy)?;
            let camera = match intrinsics {
                Some(p) => {
                    let k: Intrinsics = read_json(&p).with_context(|| format!("intrinsics {}", p.display()))?;
                    Some(PinholeCamera::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height, cal.camera_in_base)?)
                }
                None => None,
            };
            info!("calibrate: {} pairs, mean residual {:.3e}", cal.pairs_used, cal.mean_residual);
            write_json(
                &out,
                &CalibrationFile {
                    camera_in_base: cal.camera_in_base,
                    pairs_used: cal.pairs_used,
                    mean_residual: cal.mean_residual,
                    camera,
                },
            )?;
        }

        Command::Synth { config, out } => {
            let spec: CohortSpec = read_json(&config).with_context(|| format!("synth config {}", config.display()))?;
            log_json("synth config", &spec);
            info!("master seed: {}", spec.noise.seed);
            let scenes = generate_cohort(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for s in &scenes {
                write_scene(&out, s)?;
                info!("scene {}: seed {}", s.id, s.noise.seed);
            }
            write_json(&out.join("synth_config.json"), &spec)?;
            info!("wrote {} scenes to {}", scenes.len(), out.display());
        }

        Command::Fuse { scene, out, fuse } => {
            cfg.apply(&fuse);
            log_json("fuse options", &cfg.fuse);
            let s = read_scene(&scene)?;
            let cloud = fuse_scene(&s, &cfg.fuse)?;
            write_cloud(&out, &cloud)?;
            info!("scene {}: {} points", s.id, cloud.len());
        }

        Command::Fit {
            dataset,
            target,
            out,
            init,
        } => {
            log_json("sgd", &cfg.sgd);
            log_json("reference axes", &cfg.reference_axes);
            let scenes = read_scenes(&dataset)?;
            let mut samples = Vec::new();
            for s in scenes_for(&scenes, target) {
                let truth = s.target(target).expect("scenes_for keeps scenes with the target");
                match triangulate_keypoints([&s.cameras[0], &s.cameras[1]], &s.observation, s.pose_kind) {
                    Ok(kp) if target.pose_kind() == PoseKind::Front || kp.right_hip.is_some() => {
                        samples.push(FitSample {
                            scene_id: s.id.clone(),
                            keypoints: kp,
                            target: truth.position,
                        })
                    }
                    Ok(_) => log::warn!("scene {}: no hip, skipped", s.id),
                    Err(e) => log::warn!("scene {}: skipped: {e}", s.id),
                }
            }
            if samples.is_empty() {
                bail!("no usable scenes with target {target} in {}", dataset.display());
            }
            let data = FitDataset { samples };
            let r = match target.pose_kind() {
                PoseKind::Front => fit_front(&data, &cfg.reference_axes)?,
                PoseKind::Side => fit_side(&data, &cfg.reference_axes, &cfg.sgd)?,
            };
            if r.out_of_range {
                log::warn!("target {target}: fitted ratios ({}, {}) outside (-1, 1)", r.r1, r.r2);
            }
            info!(
                "target {target}: r1 {:.6}, r2 {:.6}, mean planar residual {:.3} mm over {} scenes",
                r.r1,
                r.r2,
                r.mean_planar_residual * 1e3,
                data.samples.len()
            );
            let mut params = match &init {
                Some(p) => read_json::<ParamsFile>(p)
                    .with_context(|| format!("params {}", p.display()))?
                    .params(),
                None => TargetModelParams::default(),
            };
            params.set(target, r.r1, r.r2);
            write_json(&out, &ParamsFile::new(params, cfg.reference_axes))?;
        }

        Command::Localize {
            scene,
            params,
            pose,
            out,
            cloud,
            fuse,
        } => {
            cfg.apply(&fuse);
            let pf: ParamsFile = read_json(&params).with_context(|| format!("params {}", params.display()))?;
            log_json("params", &pf);
            let s = read_scene(&scene)?;
            let cloud = match cloud {
                Some(p) => read_cloud(&p, cfg.fuse.voxel)?,
                None => {
                    log_json("fuse options", &cfg.fuse);
                    fuse_scene(&s, &cfg.fuse)?
                }
            };
            let targets = localize(
                [&s.cameras[0], &s.cameras[1]],
                &s.observation,
                &cloud,
                &pf.params(),
                &pf.reference_axes,
                pose,
            )?;
            for t in &targets {
                let p = t.pose.position();
                info!("target {}: ({:.4}, {:.4}, {:.4}) m", t.target, p.x, p.y, p.z);
            }
            write_json(
                &out,
                &PosesFile {
                    scene_id: &s.id,
                    pose_kind: pose,
                    targets,
                },
            )?;
        }

        Command::Evaluate {
            scenes,
            target,
            thresholds,
            out,
            fuse,
        } => {
            cfg.apply(&fuse);
            if let Some(t) = thresholds {
                cfg.thresholds_mm = parse_thresholds(&t)?;
            }
            log_json("run config", &cfg);
            let all = read_scenes(&scenes)?;
            let subset = scenes_for(&all, target);
            if subset.len() < 2 {
                bail!(
                    "need at least 2 scenes with target {target} in {}, found {}",
                    scenes.display(),
                    subset.len()
                );
            }
            let ecfg = cfg.eval_config();
            let prepared = prepare_scenes(&subset, &ecfg.fuse)?;
            let folds = loocv_prepared(&prepared, target, &ecfg)?;
            let bp = backprojection_study(&prepared, target)?;
            let report = ReportSummary {
                target,
                folds: folds.len(),
                summary: summarize(&folds).ok(),
                success: success_table(&folds, &cfg.thresholds_mm),
                backprojection_median_px: backprojection_medians(&bp),
                sgd_seed: cfg.sgd.seed,
                scene_seeds: subset.iter().map(|s| (s.id.clone(), s.noise.seed)).collect(),
            };
            match &report.summary {
                Some(s) => info!(
                    "target {target}: position {:.2} ± {:.2} mm, normal {:.2} ± {:.2} deg, {} faulty of {}",
                    s.position_mm.mean,
                    s.position_mm.std,
                    s.orientation_deg.mean,
                    s.orientation_deg.std,
                    s.faulty_folds,
                    folds.len()
                ),
                None => log::warn!("target {target}: every fold faulty"),
            }
            write_reports(&out, &folds, &bp, &report)?;
            info!("reports written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", anyhow!(e));
            ExitCode::from(1)
        }
    }
}
