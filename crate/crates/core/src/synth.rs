//! Synthetic single-person dataset. Each record draws body parameters and a
//! weak-perspective camera from a per-record seed, runs the body model, and
//! rasterizes the fine mesh to a grayscale image by depth-weighted disc
//! splatting. Records are fully self-checking: the loader re-derives every
//! stored quantity and refuses inconsistent files.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{
    build_default_body, forward, BodyParams, BodyPreset, RestBody, PARAM_DIM, POSE_DIM, SHAPE_DIM,
};
use crate::container::TensorArchive;
use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::topology::{build_topology, downsample, regress_joints, Topology, KEYPOINT_COUNT};

pub const SHAPE_RANGE: f64 = 2.0;
pub const CAMERA_SCALE_RANGE: (f64, f64) = (0.7, 1.3);
pub const CAMERA_SHIFT_RANGE: f64 = 0.2;
const OCCUPANCY_THRESHOLD: f64 = 0.01;
const DEPTH_DIM: f64 = 0.7;

pub const RECORDS_FILE: &str = "records.mlt1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Tier> {
        match s {
            "easy" => Ok(Tier::Easy),
            "medium" => Ok(Tier::Medium),
            "hard" => Ok(Tier::Hard),
            other => Err(Error::config(format!(
                "unknown tier {other}, expected easy|medium|hard"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }

    /// Per-component axis-angle bound in radians.
    pub fn pose_bound(&self) -> f64 {
        match self {
            Tier::Easy => 0.3,
            Tier::Medium => 0.8,
            Tier::Hard => 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub preset: BodyPreset,
    pub coarse_count: usize,
    pub resolution: usize,
    pub count: usize,
    pub tier: Tier,
    pub global_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("dataset count must be positive"));
        }
        if self.resolution < 8 {
            return Err(Error::config("resolution must be at least 8"));
        }
        if self.coarse_count == 0 {
            return Err(Error::config("coarse_count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub image: Array3<f64>,
    pub camera: [f64; 3],
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub topology_sha256: String,
    pub records: Vec<SynthRecord>,
}

/// Stable per-record seed: sha256 over the little-endian global seed and
/// record index, truncated to the first eight bytes.
pub fn record_seed(global_seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn sample_pose<R: Rng>(rng: &mut R, tier: Tier) -> [f64; POSE_DIM] {
    let bound = tier.pose_bound();
    let mut pose = [0.0; POSE_DIM];
    for p in pose.iter_mut() {
        *p = rng.gen_range(-bound..bound);
    }
    if tier == Tier::Hard {
        // free rotation about the vertical axis of the root joint
        pose[1] = rng.gen_range(-PI..PI);
    }
    pose
}

pub fn sample_shape<R: Rng>(rng: &mut R) -> [f64; SHAPE_DIM] {
    let mut shape = [0.0; SHAPE_DIM];
    for s in shape.iter_mut() {
        *s = rng.gen_range(-SHAPE_RANGE..SHAPE_RANGE);
    }
    shape
}

pub fn sample_camera<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(CAMERA_SCALE_RANGE.0..CAMERA_SCALE_RANGE.1),
        rng.gen_range(-CAMERA_SHIFT_RANGE..CAMERA_SHIFT_RANGE),
        rng.gen_range(-CAMERA_SHIFT_RANGE..CAMERA_SHIFT_RANGE),
    ]
}

pub fn project_points(points: &Array2<f64>, camera: &[f64; 3]) -> Array2<f64> {
    let mut out = Array2::zeros((points.nrows(), 2));
    for i in 0..points.nrows() {
        out[[i, 0]] = camera[0] * points[[i, 0]] + camera[1];
        out[[i, 1]] = camera[0] * points[[i, 1]] + camera[2];
    }
    out
}

/// Depth-weighted disc splatting. Each vertex paints a small disc whose
/// brightness falls off with normalized depth and with distance from the
/// disc center; overlapping discs resolve by max.
pub fn render_mesh(vertices: &Array2<f64>, camera: &[f64; 3], resolution: usize) -> Array2<f64> {
    let res = resolution;
    let mut img = Array2::zeros((res, res));
    let m = vertices.nrows();
    if m == 0 {
        return img;
    }
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..m {
        zmin = zmin.min(vertices[[i, 2]]);
        zmax = zmax.max(vertices[[i, 2]]);
    }
    let span = (zmax - zmin).max(1e-12);
    let radius = res as f64 / 56.0;
    let half = (res - 1) as f64 * 0.5;
    for i in 0..m {
        let px = camera[0] * vertices[[i, 0]] + camera[1];
        let py = camera[0] * vertices[[i, 1]] + camera[2];
        let u = (px + 1.0) * half;
        let v = (1.0 - py) * half;
        let depth_t = (vertices[[i, 2]] - zmin) / span;
        let bright = 1.0 - DEPTH_DIM * depth_t;
        let r_ceil = radius.ceil() as i64;
        let (cu, cv) = (u.round() as i64, v.round() as i64);
        for dy in -r_ceil..=r_ceil {
            for dx in -r_ceil..=r_ceil {
                let (x, y) = (cu + dx, cv + dy);
                if x < 0 || y < 0 || x >= res as i64 || y >= res as i64 {
                    continue;
                }
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                if d2 > radius * radius {
                    continue;
                }
                let val = bright * (1.0 - d2 / (radius * radius));
                let cell = &mut img[[y as usize, x as usize]];
                if val > *cell {
                    *cell = val;
                }
            }
        }
    }
    img
}

/// Fraction of pixels above the splat threshold.
pub fn occupancy(image: &Array2<f64>) -> f64 {
    let lit = image.iter().filter(|&&v| v > OCCUPANCY_THRESHOLD).count();
    lit as f64 / image.len() as f64
}

pub fn make_record(
    body: &RestBody,
    topo: &Topology,
    tier: Tier,
    resolution: usize,
    seed: u64,
) -> Result<SynthRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pose = sample_pose(&mut rng, tier);
    let shape = sample_shape(&mut rng);
    let camera = sample_camera(&mut rng);
    let mut flat = [0.0; PARAM_DIM];
    flat[..POSE_DIM].copy_from_slice(&pose);
    flat[POSE_DIM..].copy_from_slice(&shape);
    let theta = BodyParams::from_flat(&flat)?;
    let (fine, _) = forward(body, &theta)?;
    let coarse = downsample(&fine, topo)?;
    let joints3d = regress_joints(&coarse, topo)?;
    let joints2d = project_points(&joints3d, &camera);
    let flat_img = render_mesh(&fine, &camera, resolution);
    let mut image = Array3::zeros((1, resolution, resolution));
    image.index_axis_mut(ndarray::Axis(0), 0).assign(&flat_img);
    Ok(SynthRecord {
        image,
        camera,
        gt: GroundTruth {
            joints3d,
            coarse_vertices: coarse,
            fine_vertices: fine,
            joints2d,
            theta: Some(theta),
        },
    })
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let body = build_default_body(spec.preset);
    let topo = build_topology(&body, spec.coarse_count)?;
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let seed = record_seed(spec.global_seed, i as u64);
        records.push(make_record(&body, &topo, spec.tier, spec.resolution, seed)?);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        topology_sha256: topo.content_hash(),
        records,
    })
}

// manifest fields are declared alphabetically so the serialized key order is
// sorted without a custom serializer
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    coarse_count: usize,
    count: usize,
    fine_count: usize,
    global_seed: u64,
    preset: String,
    records_sha256: String,
    resolution: usize,
    tier: String,
    topology_sha256: String,
}

fn stack_records(ds: &SynthDataset) -> Result<TensorArchive> {
    let n = ds.records.len();
    let r = ds.spec.resolution;
    let m_f = ds.records[0].gt.fine_vertices.nrows();
    let m_c = ds.records[0].gt.coarse_vertices.nrows();
    let mut images = ArrayD::zeros(IxDyn(&[n, 1, r, r]));
    let mut thetas = ArrayD::zeros(IxDyn(&[n, PARAM_DIM]));
    let mut cameras = ArrayD::zeros(IxDyn(&[n, 3]));
    let mut joints3d = ArrayD::zeros(IxDyn(&[n, KEYPOINT_COUNT, 3]));
    let mut joints2d = ArrayD::zeros(IxDyn(&[n, KEYPOINT_COUNT, 2]));
    let mut coarse = ArrayD::zeros(IxDyn(&[n, m_c, 3]));
    let mut fine = ArrayD::zeros(IxDyn(&[n, m_f, 3]));
    for (i, rec) in ds.records.iter().enumerate() {
        let theta = rec
            .gt
            .theta
            .as_ref()
            .ok_or_else(|| Error::contract("synthetic record without theta"))?;
        for (k, v) in theta.to_flat().iter().enumerate() {
            thetas[[i, k]] = *v;
        }
        for c in 0..3 {
            cameras[[i, c]] = rec.camera[c];
        }
        for y in 0..r {
            for x in 0..r {
                images[[i, 0, y, x]] = rec.image[[0, y, x]];
            }
        }
        for j in 0..KEYPOINT_COUNT {
            for c in 0..3 {
                joints3d[[i, j, c]] = rec.gt.joints3d[[j, c]];
            }
            for c in 0..2 {
                joints2d[[i, j, c]] = rec.gt.joints2d[[j, c]];
            }
        }
        for vtx in 0..m_c {
            for c in 0..3 {
                coarse[[i, vtx, c]] = rec.gt.coarse_vertices[[vtx, c]];
            }
        }
        for vtx in 0..m_f {
            for c in 0..3 {
                fine[[i, vtx, c]] = rec.gt.fine_vertices[[vtx, c]];
            }
        }
    }
    let mut archive = TensorArchive::new();
    archive.insert("images", images)?;
    archive.insert("thetas", thetas)?;
    archive.insert("cameras", cameras)?;
    archive.insert("joints3d", joints3d)?;
    archive.insert("joints2d", joints2d)?;
    archive.insert("coarse_vertices", coarse)?;
    archive.insert("fine_vertices", fine)?;
    Ok(archive)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    if ds.records.is_empty() {
        return Err(Error::contract("refusing to save an empty dataset"));
    }
    std::fs::create_dir_all(dir)?;
    let archive = stack_records(ds)?;
    let mut bytes = Vec::new();
    archive.write_to(&mut bytes)?;
    std::fs::write(dir.join(RECORDS_FILE), &bytes)?;
    let manifest = Manifest {
        coarse_count: ds.spec.coarse_count,
        count: ds.spec.count,
        fine_count: ds.records[0].gt.fine_vertices.nrows(),
        global_seed: ds.spec.global_seed,
        preset: ds.spec.preset.as_str().to_string(),
        records_sha256: sha256_hex(&bytes),
        resolution: ds.spec.resolution,
        tier: ds.spec.tier.as_str().to_string(),
        topology_sha256: ds.topology_sha256.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Load a dataset directory and verify it end to end: file hash, topology
/// hash, and every derived quantity against a fresh recomputation.
pub fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::missing(format!("{}", manifest_path.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(Error::from)?;
    let bytes = std::fs::read(dir.join(RECORDS_FILE))?;
    if sha256_hex(&bytes) != manifest.records_sha256 {
        return Err(Error::format("records file does not match manifest hash"));
    }
    let spec = SynthSpec {
        preset: BodyPreset::parse(&manifest.preset)?,
        coarse_count: manifest.coarse_count,
        resolution: manifest.resolution,
        count: manifest.count,
        tier: Tier::parse(&manifest.tier)?,
        global_seed: manifest.global_seed,
    };
    spec.validate()?;
    let body = build_default_body(spec.preset);
    let topo = build_topology(&body, spec.coarse_count)?;
    if topo.content_hash() != manifest.topology_sha256 {
        return Err(Error::format("topology hash does not match manifest"));
    }
    if body.vertex_count() != manifest.fine_count {
        return Err(Error::format("fine vertex count does not match manifest"));
    }

    let archive = TensorArchive::read_from(&mut bytes.as_slice())?;
    let images = archive.get("images")?;
    let thetas = archive.get("thetas")?;
    let cameras = archive.get("cameras")?;
    let joints3d = archive.get("joints3d")?;
    let joints2d = archive.get("joints2d")?;
    let coarse = archive.get("coarse_vertices")?;
    let fine = archive.get("fine_vertices")?;
    let n = manifest.count;
    let r = manifest.resolution;
    if images.shape() != [n, 1, r, r]
        || thetas.shape() != [n, PARAM_DIM]
        || cameras.shape() != [n, 3]
        || joints3d.shape() != [n, KEYPOINT_COUNT, 3]
        || joints2d.shape() != [n, KEYPOINT_COUNT, 2]
        || coarse.shape() != [n, manifest.coarse_count, 3]
        || fine.shape() != [n, manifest.fine_count, 3]
    {
        return Err(Error::format("tensor shapes do not match manifest"));
    }

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let flat: Vec<f64> = (0..PARAM_DIM).map(|k| thetas[[i, k]]).collect();
        let theta = BodyParams::from_flat(&flat)?;
        let camera = [cameras[[i, 0]], cameras[[i, 1]], cameras[[i, 2]]];
        let stored_fine =
            Array2::from_shape_fn((manifest.fine_count, 3), |(v, c)| fine[[i, v, c]]);
        let stored_coarse =
            Array2::from_shape_fn((manifest.coarse_count, 3), |(v, c)| coarse[[i, v, c]]);
        let stored_j3 = Array2::from_shape_fn((KEYPOINT_COUNT, 3), |(j, c)| joints3d[[i, j, c]]);
        let stored_j2 = Array2::from_shape_fn((KEYPOINT_COUNT, 2), |(j, c)| joints2d[[i, j, c]]);
        let stored_img = Array2::from_shape_fn((r, r), |(y, x)| images[[i, 0, y, x]]);

        let (derived_fine, _) = forward(&body, &theta)?;
        let derived_coarse = downsample(&derived_fine, &topo)?;
        let derived_j3 = regress_joints(&derived_coarse, &topo)?;
        let derived_j2 = project_points(&derived_j3, &camera);
        let derived_img = render_mesh(&derived_fine, &camera, r);
        for (what, gap) in [
            ("fine_vertices", max_abs_diff(&stored_fine, &derived_fine)),
            ("coarse_vertices", max_abs_diff(&stored_coarse, &derived_coarse)),
            ("joints3d", max_abs_diff(&stored_j3, &derived_j3)),
            ("joints2d", max_abs_diff(&stored_j2, &derived_j2)),
            ("image", max_abs_diff(&stored_img, &derived_img)),
        ] {
            if gap > 1e-9 {
                return Err(Error::format(format!(
                    "record {i}: stored {what} deviates from recomputation by {gap}"
                )));
            }
        }
        let mut image = Array3::zeros((1, r, r));
        image.index_axis_mut(ndarray::Axis(0), 0).assign(&stored_img);
        records.push(SynthRecord {
            image,
            camera,
            gt: GroundTruth {
                joints3d: stored_j3,
                coarse_vertices: stored_coarse,
                fine_vertices: stored_fine,
                joints2d: stored_j2,
                theta: Some(theta),
            },
        });
    }
    Ok(SynthDataset {
        spec,
        topology_sha256: manifest.topology_sha256,
        records,
    })
}
