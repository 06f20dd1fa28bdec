//! File formats: JSON documents, PFM depth maps, the binary cloud format and
//! on-disk scene directories.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cloud::{DepthMap, FusedCloud};
use crate::geom::PinholeCamera;
use crate::synth::{HipFault, NoiseSpec, SyntheticScene, TargetTruth, TorsoSpec};
use crate::target_model::{
    FrontParams, KeypointObservation, Keypoints3D, PoseKind, ReferenceAxes, SideRatios,
    TargetModelParams,
};
use crate::{Error, Result, Vec3};

pub const CLOUD_MAGIC: &[u8; 8] = b"SCNCLD01";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes a little-endian single-channel PFM (`Pf`, scale −1, rows stored
/// bottom to top).
pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    let (w, h) = (map.width() as usize, map.height() as usize);
    let mut buf = Vec::with_capacity(32 + 4 * w * h);
    write!(buf, "Pf\n{w} {h}\n-1.0\n")?;
    for v in (0..h).rev() {
        for &d in &map.data()[v * w..(v + 1) * w] {
            buf.extend_from_slice(&(d as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
        if tok.len() > 64 {
            return Err(Error::Format("PFM header token too long".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("PFM header is not ASCII".into()))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if header_token(&mut r)? != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let w: u32 = header_token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let h: u32 = header_token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = header_token(&mut r)?.parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    let little = scale < 0.0;
    let (wu, hu) = (w as usize, h as usize);
    let mut raw = vec![0u8; 4 * wu * hu];
    r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let mut data = vec![0.0; wu * hu];
    for (i, c) in raw.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let f = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / wu, i % wu);
        data[(hu - 1 - row) * wu + col] = f as f64;
    }
    DepthMap::new(w, h, data)
}

/// Binary cloud: 8-byte magic, u64 LE count, then `count` f32 LE point
/// triplets followed by `count` normal triplets.
pub fn write_cloud(path: &Path, cloud: &FusedCloud) -> Result<()> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(16 + 24 * n);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in cloud.points().iter().chain(cloud.normals()) {
        for c in v.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cloud(path: &Path, planar_cell: f64) -> Result<FusedCloud> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CLOUD_MAGIC {
        return Err(bad("not a cloud file"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n.checked_mul(24).ok_or_else(|| bad("count overflow"))? {
        return Err(bad("size does not match count"));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let vecs: Vec<Vec3> = vals.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let (points, normals) = vecs.split_at(n);
    FusedCloud::from_parts(points.to_vec(), normals.to_vec(), planar_cell)
}

/// Parameter file: fitted ratios plus the reference axes used to fit them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub front: FrontParams,
    pub side: SideRatios,
    #[serde(default)]
    pub reference_axes: ReferenceAxes,
}

impl ParamsFile {
    pub fn new(params: TargetModelParams, reference_axes: ReferenceAxes) -> Self {
        Self {
            front: params.front,
            side: params.side,
            reference_axes,
        }
    }

    pub fn params(&self) -> TargetModelParams {
        TargetModelParams {
            front: self.front,
            side: self.side,
        }
    }
}

/// `scene.json`: everything in a scene except the depth maps, which are
/// referenced relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub pose_kind: PoseKind,
    pub cameras: [PinholeCamera; 2],
    pub depth_files: [String; 2],
    pub observation: KeypointObservation,
    pub ground_truth: GroundTruth,
    pub torso: TorsoSpec,
    pub ratios: TargetModelParams,
    pub noise: NoiseSpec,
    pub hip_fault: HipFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub keypoints: Keypoints3D,
    pub targets: Vec<TargetTruth>,
}

/// Writes `<root>/<id>/scene.json`, `depth0.pfm` and `depth1.pfm`; returns
/// the scene.json path.
pub fn write_scene(root: &Path, scene: &SyntheticScene) -> Result<PathBuf> {
    let dir = root.join(&scene.id);
    fs::create_dir_all(&dir)?;
    let depth_files = ["depth0.pfm".to_string(), "depth1.pfm".to_string()];
    for (name, map) in depth_files.iter().zip(&scene.depth) {
        write_pfm(&dir.join(name), map)?;
    }
    let record = SceneRecord {
        id: scene.id.clone(),
        pose_kind: scene.pose_kind,
        cameras: scene.cameras.clone(),
        depth_files,
        observation: scene.observation,
        ground_truth: GroundTruth {
            keypoints: scene.keypoints,
            targets: scene.targets.clone(),
        },
        torso: scene.torso,
        ratios: scene.ratios,
        noise: scene.noise,
        hip_fault: scene.hip_fault,
    };
    let path = dir.join("scene.json");
    write_json(&path, &record)?;
    Ok(path)
}

pub fn read_scene(path: &Path) -> Result<SyntheticScene> {
    let record: SceneRecord = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let d0 = read_pfm(&dir.join(&record.depth_files[0]))?;
    let d1 = read_pfm(&dir.join(&record.depth_files[1]))?;
    for (k, (cam, d)) in record.cameras.iter().zip([&d0, &d1]).enumerate() {
        if cam.width() != d.width() || cam.height() != d.height() {
            return Err(Error::InvalidDepthMap(format!(
                "{}: depth {k} is {}x{}, camera is {}x{}",
                path.display(),
                d.width(),
                d.height(),
                cam.width(),
                cam.height()
            )));
        }
    }
    record
        .observation
        .check_bounds([&record.cameras[0], &record.cameras[1]])?;
    Ok(SyntheticScene {
        id: record.id,
        pose_kind: record.pose_kind,
        torso: record.torso,
        cameras: record.cameras,
        depth: [d0, d1],
        observation: record.observation,
        keypoints: record.ground_truth.keypoints,
        targets: record.ground_truth.targets,
        ratios: record.ratios,
        noise: record.noise,
        hip_fault: record.hip_fault,
    })
}

/// Every `<root>/*/scene.json`, sorted by directory name.
pub fn scene_paths(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let p = entry?.path().join("scene.json");
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no scene directories under {}",
            root.display()
        )));
    }
    Ok(out)
}

pub fn read_scenes(root: &Path) -> Result<Vec<SyntheticScene>> {
    scene_paths(root)?.iter().map(|p| read_scene(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{fuse, FuseOptions};
    use crate::synth::{generate_scene, RigSpec};

    #[test]
    fn pfm_round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let map = DepthMap::new(4, 3, data).unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &map).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // first stored row is the bottom image row
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 2.0);
        assert_eq!(read_pfm(&p).unwrap(), map);
    }

    #[test]
    fn pfm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
        fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
    }

    #[test]
    fn scene_and_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let torso = TorsoSpec::default();
        let cams = RigSpec::default().cameras(&torso).unwrap();
        let scene = generate_scene(
            "s000_front",
            &torso,
            &TargetModelParams::default(),
            &cams,
            &NoiseSpec::default(),
            PoseKind::Front,
        )
        .unwrap();
        let path = write_scene(dir.path(), &scene).unwrap();
        assert_eq!(scene_paths(dir.path()).unwrap(), vec![path.clone()]);
        let back = read_scene(&path).unwrap();
        assert_eq!(back.observation, scene.observation);
        assert_eq!(back.targets, scene.targets);
        for k in 0..2 {
            for (a, b) in back.depth[k].data().iter().zip(scene.depth[k].data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }

        let cloud = fuse(
            &[(&back.cameras[0], &back.depth[0]), (&back.cameras[1], &back.depth[1])],
            &FuseOptions::default(),
        )
        .unwrap();
        let cp = dir.path().join("cloud.bin");
        write_cloud(&cp, &cloud).unwrap();
        assert_eq!(fs::metadata(&cp).unwrap().len() as usize, 16 + 24 * cloud.len());
        let c2 = read_cloud(&cp, 0.005).unwrap();
        assert_eq!(c2.len(), cloud.len());
        assert!((c2.points()[7] - cloud.points()[7]).norm() < 1e-6);
    }

    #[test]
    fn params_file_schema() {
        let f = ParamsFile::new(TargetModelParams::default(), ReferenceAxes::default());
        let v = serde_json::to_value(f).unwrap();
        assert!(v["front"]["2"]["r_f2"].is_number());
        assert!(v["reference_axes"]["body_axis"].is_array());
        let back: ParamsFile = serde_json::from_value(v).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<ParamsFile>(r#"{"front":{},"side":{},"x":1}"#).is_err());
    }
}
