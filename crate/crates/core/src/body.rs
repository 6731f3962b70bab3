//! Parametric body model: a procedurally generated humanoid with the usual
//! pose/shape -> vertices interface (72 axis-angle + 10 shape coefficients,
//! 24-joint kinematic tree, linear blend skinning).
//!
//! The mesh is sampled from capsules along the bones of a fixed skeleton, so
//! the repository carries no licensed assets. Two presets exist: `desk`
//! (M_f = 798) for fast experiments and `paper-shape` (M_f = 6890) matching
//! the vertex count the architecture was described against.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::rodrigues_rowmajor;

pub const JOINT_COUNT: usize = 24;
pub const POSE_DIM: usize = 72;
pub const SHAPE_DIM: usize = 10;
pub const PARAM_DIM: usize = POSE_DIM + SHAPE_DIM;

/// Parent of each joint; root = -1. Parents always precede children.
pub const PARENTS: [i32; JOINT_COUNT] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

/// Rest skeleton (pelvis at the origin, y up, left = +x), before the global
/// rescale to 1.7 units of height.
const REST_RAW: [[f64; 3]; JOINT_COUNT] = [
    [0.0, 0.0, 0.0],       // 0 pelvis
    [0.088, -0.06, 0.0],   // 1 left hip
    [-0.088, -0.06, 0.0],  // 2 right hip
    [0.0, 0.115, 0.0],     // 3 spine1
    [0.098, -0.48, 0.0],   // 4 left knee
    [-0.098, -0.48, 0.0],  // 5 right knee
    [0.0, 0.235, 0.0],     // 6 spine2
    [0.105, -0.87, 0.0],   // 7 left ankle
    [-0.105, -0.87, 0.0],  // 8 right ankle
    [0.0, 0.33, 0.0],      // 9 spine3
    [0.11, -0.925, 0.115], // 10 left foot
    [-0.11, -0.925, 0.115],// 11 right foot
    [0.0, 0.46, 0.0],      // 12 neck
    [0.055, 0.42, 0.0],    // 13 left collar
    [-0.055, 0.42, 0.0],   // 14 right collar
    [0.0, 0.565, 0.0],     // 15 head
    [0.17, 0.44, 0.0],     // 16 left shoulder
    [-0.17, 0.44, 0.0],    // 17 right shoulder
    [0.43, 0.44, 0.0],     // 18 left elbow
    [-0.43, 0.44, 0.0],    // 19 right elbow
    [0.67, 0.44, 0.0],     // 20 left wrist
    [-0.67, 0.44, 0.0],    // 21 right wrist
    [0.76, 0.44, 0.0],     // 22 left hand
    [-0.76, 0.44, 0.0],    // 23 right hand
];

const TARGET_HEIGHT: f64 = 1.7;

/// Pose and shape parameters, 82 values total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pose: Vec<f64>,
    shape: Vec<f64>,
}

impl BodyParams {
    pub fn new(pose: Vec<f64>, shape: Vec<f64>) -> Result<Self> {
        if pose.len() != POSE_DIM {
            return Err(Error::contract(format!(
                "pose must have {} values, got {}",
                POSE_DIM,
                pose.len()
            )));
        }
        if shape.len() != SHAPE_DIM {
            return Err(Error::contract(format!(
                "shape must have {} values, got {}",
                SHAPE_DIM,
                shape.len()
            )));
        }
        if pose.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("body params must be finite".to_string()));
        }
        Ok(BodyParams { pose, shape })
    }

    pub fn zeros() -> Self {
        BodyParams {
            pose: vec![0.0; POSE_DIM],
            shape: vec![0.0; SHAPE_DIM],
        }
    }

    /// 82 values: pose then shape.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != PARAM_DIM {
            return Err(Error::contract(format!(
                "theta must have {} values, got {}",
                PARAM_DIM,
                flat.len()
            )));
        }
        BodyParams::new(flat[..POSE_DIM].to_vec(), flat[POSE_DIM..].to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.pose.clone();
        out.extend_from_slice(&self.shape);
        out
    }

    pub fn pose(&self) -> &[f64] {
        &self.pose
    }

    pub fn shape(&self) -> &[f64] {
        &self.shape
    }
}

/// Immutable rest-state body: template mesh, blendshapes, skinning data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestBody {
    /// (m, 3) canonical T-pose vertices.
    pub template_vertices: Array2<f64>,
    /// (m, 3, 10) displacement fields per shape coefficient.
    pub shape_basis: Array3<f64>,
    /// (m, 24) nonnegative rows summing to 1.
    pub skinning_weights: Array2<f64>,
    /// 24 parent indices, root = -1.
    pub kinematic_tree: Vec<i32>,
    /// (24, 3) rest joint positions.
    pub rest_joints: Array2<f64>,
    /// Triangles over the fine mesh.
    pub fine_faces: Vec<[usize; 3]>,
}

impl RestBody {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.vertex_count();
        if self.template_vertices.ncols() != 3 {
            return Err(Error::contract("template_vertices must be (m,3)"));
        }
        if self.shape_basis.dim() != (m, 3, SHAPE_DIM) {
            return Err(Error::contract("shape_basis must be (m,3,10)"));
        }
        if self.skinning_weights.dim() != (m, JOINT_COUNT) {
            return Err(Error::contract("skinning_weights must be (m,24)"));
        }
        if self.kinematic_tree.len() != JOINT_COUNT {
            return Err(Error::contract("kinematic_tree must have 24 entries"));
        }
        if self.rest_joints.dim() != (JOINT_COUNT, 3) {
            return Err(Error::contract("rest_joints must be (24,3)"));
        }
        let roots = self.kinematic_tree.iter().filter(|&&p| p < 0).count();
        if roots != 1 || self.kinematic_tree[0] != -1 {
            return Err(Error::contract("tree must have exactly one root at index 0"));
        }
        for (j, &p) in self.kinematic_tree.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::contract(format!(
                    "parent of joint {j} must precede it, got {p}"
                )));
            }
        }
        for (i, row) in self.skinning_weights.rows().into_iter().enumerate() {
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::contract(format!("negative skinning weight, row {i}")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "skinning row {i} sums to {s}, expected 1"
                )));
            }
        }
        for (fi, f) in self.fine_faces.iter().enumerate() {
            if f.iter().any(|&v| v >= m) {
                return Err(Error::contract(format!("face {fi} indexes out of range")));
            }
        }
        if self
            .template_vertices
            .iter()
            .chain(self.rest_joints.iter())
            .chain(self.shape_basis.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::numeric("body tensors must be finite"));
        }
        Ok(())
    }

    /// Shape displacement field B * beta, an (m,3) array.
    pub fn shape_displacement(&self, shape: &[f64]) -> Result<Array2<f64>> {
        if shape.len() != SHAPE_DIM {
            return Err(Error::contract(format!(
                "shape must have {} values, got {}",
                SHAPE_DIM,
                shape.len()
            )));
        }
        let m = self.vertex_count();
        let mut out = Array2::zeros((m, 3));
        for k in 0..SHAPE_DIM {
            let b = shape[k];
            if b == 0.0 {
                continue;
            }
            for i in 0..m {
                for c in 0..3 {
                    out[[i, c]] += b * self.shape_basis[[i, c, k]];
                }
            }
        }
        Ok(out)
    }

    /// Flat (m*3, 10) view of the shape basis for matrix-style use.
    pub fn shape_basis_flat(&self) -> Array2<f64> {
        let m = self.vertex_count();
        let mut out = Array2::zeros((m * 3, SHAPE_DIM));
        for i in 0..m {
            for c in 0..3 {
                for k in 0..SHAPE_DIM {
                    out[[i * 3 + c, k]] = self.shape_basis[[i, c, k]];
                }
            }
        }
        out
    }
}

/// Axis-angle to rotation matrix (row-major 3x3 as nested arrays).
pub fn rodrigues(axis_angle: [f64; 3]) -> [[f64; 3]; 3] {
    let r = rodrigues_rowmajor(axis_angle);
    [
        [r[0], r[1], r[2]],
        [r[3], r[4], r[5]],
        [r[6], r[7], r[8]],
    ]
}

fn mat_vec(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Pose and shape the body: returns (fine_vertices (m,3), model_joints (24,3)).
///
/// Skinning translations use the recurrence `s_j = s_p + Rw_p*rest_j -
/// Rw_j*rest_j`, which cancels exactly at the identity pose so that zero
/// parameters reproduce the template bit-for-bit.
pub fn forward(body: &RestBody, params: &BodyParams) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = body.vertex_count();
    if body.skinning_weights.dim() != (m, JOINT_COUNT)
        || body.rest_joints.dim() != (JOINT_COUNT, 3)
        || body.kinematic_tree.len() != JOINT_COUNT
    {
        return Err(Error::contract(
            "body tensors inconsistent; dimension mismatch between body and params",
        ));
    }

    let shaped = {
        let disp = body.shape_displacement(params.shape())?;
        &body.template_vertices + &disp
    };

    // world rotations and skinning translations per joint
    let mut world_r = [[[0.0f64; 3]; 3]; JOINT_COUNT];
    let mut skin_t = [[0.0f64; 3]; JOINT_COUNT];
    let mut joints = Array2::zeros((JOINT_COUNT, 3));
    for j in 0..JOINT_COUNT {
        let p = body.kinematic_tree[j];
        let local = rodrigues([
            params.pose()[3 * j],
            params.pose()[3 * j + 1],
            params.pose()[3 * j + 2],
        ]);
        let rest_j = [
            body.rest_joints[[j, 0]],
            body.rest_joints[[j, 1]],
            body.rest_joints[[j, 2]],
        ];
        if p < 0 {
            world_r[j] = local;
            let rj_rot = mat_vec(&world_r[j], rest_j);
            for c in 0..3 {
                skin_t[j][c] = rest_j[c] - rj_rot[c];
            }
        } else {
            let p = p as usize;
            world_r[j] = mat_mul(&world_r[p], &local);
            let via_parent = mat_vec(&world_r[p], rest_j);
            let via_self = mat_vec(&world_r[j], rest_j);
            for c in 0..3 {
                skin_t[j][c] = skin_t[p][c] + via_parent[c] - via_self[c];
            }
        }
        let posed_j = mat_vec(&world_r[j], rest_j);
        for c in 0..3 {
            joints[[j, c]] = skin_t[j][c] + posed_j[c];
        }
    }

    let mut fine = Array2::zeros((m, 3));
    for i in 0..m {
        let p = [shaped[[i, 0]], shaped[[i, 1]], shaped[[i, 2]]];
        let mut blend_r = [[0.0f64; 3]; 3];
        let mut blend_t = [0.0f64; 3];
        for j in 0..JOINT_COUNT {
            let w = body.skinning_weights[[i, j]];
            if w == 0.0 {
                continue;
            }
            for a in 0..3 {
                for b in 0..3 {
                    blend_r[a][b] += w * world_r[j][a][b];
                }
                blend_t[a] += w * skin_t[j][a];
            }
        }
        let rp = mat_vec(&blend_r, p);
        for c in 0..3 {
            fine[[i, c]] = rp[c] + blend_t[c];
        }
    }
    Ok((fine, joints))
}

/// Body-size preset for the procedural generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyPreset {
    Desk,
    PaperShape,
}

impl BodyPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(BodyPreset::Desk),
            "paper-shape" => Ok(BodyPreset::PaperShape),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BodyPreset::Desk => "desk",
            BodyPreset::PaperShape => "paper-shape",
        }
    }
}

fn bone_radius(child: usize) -> f64 {
    match child {
        1 | 2 => 0.085,   // pelvis wings
        3 => 0.105,       // lower torso
        4 | 5 => 0.072,   // thighs
        6 => 0.11,        // mid torso
        7 | 8 => 0.052,   // calves
        9 => 0.112,       // chest
        10 | 11 => 0.038, // feet
        12 => 0.045,      // neck
        13 | 14 => 0.05,  // collars
        15 => 0.08,       // head
        16 | 17 => 0.05,  // shoulders
        18 | 19 => 0.044, // upper arms
        20 | 21 => 0.036, // forearms
        22 | 23 => 0.03,  // hands
        _ => unreachable!("no bone ends at joint {child}"),
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn smoothstep01(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct BoneGeom {
    parent: usize,
    child: usize,
    radius: f64,
    start: [f64; 3], // extended beyond the parent joint
    dir: [f64; 3],
    ext_len: f64,
    raw_len: f64,
}

/// Build the procedural humanoid for a preset. Deterministic: same preset,
/// bitwise-identical body.
pub fn build_default_body(preset: BodyPreset) -> RestBody {
    let (segs, total_rings, min_rings) = match preset {
        BodyPreset::Desk => (6usize, 133usize, 3usize),
        BodyPreset::PaperShape => (10usize, 689usize, 4usize),
    };

    let bones: Vec<BoneGeom> = (1..JOINT_COUNT)
        .map(|j| {
            let p = PARENTS[j] as usize;
            let r = bone_radius(j);
            let a = REST_RAW[p];
            let b = REST_RAW[j];
            let diff = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let raw_len = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            let dir = normalize3(diff);
            let cap = 0.6 * r;
            let start = [a[0] - cap * dir[0], a[1] - cap * dir[1], a[2] - cap * dir[2]];
            BoneGeom {
                parent: p,
                child: j,
                radius: r,
                start,
                dir,
                ext_len: raw_len + 2.0 * cap,
                raw_len,
            }
        })
        .collect();

    // ring budget: minimum per bone, remainder by largest fraction of
    // (extended length + diameter) weight
    let nb = bones.len();
    let mut rings = vec![min_rings; nb];
    let remaining = total_rings - min_rings * nb;
    let weights: Vec<f64> = bones.iter().map(|b| b.ext_len + 2.0 * b.radius).collect();
    let wsum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| remaining as f64 * w / wsum)
        .collect();
    let mut assigned = 0usize;
    for (i, q) in quotas.iter().enumerate() {
        let extra = q.floor() as usize;
        rings[i] += extra;
        assigned += extra;
    }
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(remaining - assigned) {
        rings[i] += 1;
    }
    debug_assert_eq!(rings.iter().sum::<usize>(), total_rings);

    let m = total_rings * segs;
    let mut vertices = Array2::zeros((m, 3));
    let mut radial = Array2::zeros((m, 3));
    let mut weights_out = Array2::zeros((m, JOINT_COUNT));
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut vi = 0usize;

    for (bi, bone) in bones.iter().enumerate() {
        let n = rings[bi];
        let base = vi;
        // ring frame perpendicular to the bone axis
        let up = if bone.dir[2].abs() < 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        let u = normalize3(cross3(bone.dir, up));
        let v = cross3(bone.dir, u);
        for k in 0..n {
            let t = k as f64 / (n - 1) as f64;
            let axial = t * bone.ext_len;
            let center = [
                bone.start[0] + axial * bone.dir[0],
                bone.start[1] + axial * bone.dir[1],
                bone.start[2] + axial * bone.dir[2],
            ];
            let rho = bone.radius * (0.55 + 0.45 * (std::f64::consts::PI * t).sin());
            // blend ownership toward the child joint near the far end
            let along = ((axial - 0.6 * bone.radius) / bone.raw_len).clamp(0.0, 1.0);
            let w_child = 0.5 * smoothstep01((along - 0.6) / 0.4);
            let w_parent = 1.0 - w_child;
            for s in 0..segs {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segs as f64;
                let rdir = [
                    phi.cos() * u[0] + phi.sin() * v[0],
                    phi.cos() * u[1] + phi.sin() * v[1],
                    phi.cos() * u[2] + phi.sin() * v[2],
                ];
                for c in 0..3 {
                    vertices[[vi, c]] = center[c] + rho * rdir[c];
                    radial[[vi, c]] = rdir[c];
                }
                weights_out[[vi, bone.parent]] = w_parent;
                weights_out[[vi, bone.child]] = w_child;
                vi += 1;
            }
        }
        for k in 0..n - 1 {
            for s in 0..segs {
                let s2 = (s + 1) % segs;
                let a = base + k * segs + s;
                let b = base + k * segs + s2;
                let c = base + (k + 1) * segs + s;
                let d = base + (k + 1) * segs + s2;
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
    }
    debug_assert_eq!(vi, m);

    // shape blendshapes from construction data
    let joint_weight = |i: usize, set: &[usize]| -> f64 {
        set.iter().map(|&j| weights_out[[i, j]]).sum()
    };
    let torso: &[usize] = &[0, 3, 6, 9, 13, 14];
    let spine: &[usize] = &[0, 3, 6, 9];
    let limbs: &[usize] = &[1, 2, 4, 5, 7, 8, 10, 11, 16, 17, 18, 19, 20, 21, 22, 23];
    let legs: &[usize] = &[1, 2, 4, 5, 7, 8, 10, 11];
    let arms: &[usize] = &[16, 17, 18, 19, 20, 21, 22, 23];
    let head_set: &[usize] = &[12, 15];
    let shoulder_set: &[usize] = &[13, 14, 16, 17];
    let hip_y = REST_RAW[1][1];
    let shoulder_x = REST_RAW[16][0];
    let head_pos = REST_RAW[15];

    let mut basis = Array3::zeros((m, 3, SHAPE_DIM));
    for i in 0..m {
        let p = [vertices[[i, 0]], vertices[[i, 1]], vertices[[i, 2]]];
        let rd = [radial[[i, 0]], radial[[i, 1]], radial[[i, 2]]];
        let side = (p[0] / 0.05).tanh();
        let wt = joint_weight(i, torso);
        let wsp = joint_weight(i, spine);
        let wl = joint_weight(i, limbs);
        let wleg = joint_weight(i, legs);
        let warm = joint_weight(i, arms);
        let wh = joint_weight(i, head_set);
        let ws = joint_weight(i, shoulder_set);
        let comps: [[f64; 3]; SHAPE_DIM] = [
            [0.06 * p[0], 0.06 * p[1], 0.06 * p[2]],
            [0.0, 0.08 * p[1], 0.0],
            [0.05 * p[0], 0.0, 0.05 * p[2]],
            [wt * 0.05 * p[0], 0.0, wt * 0.05 * p[2]],
            [wl * 0.05 * rd[0], wl * 0.05 * rd[1], wl * 0.05 * rd[2]],
            [0.0, wleg * 0.1 * (p[1] - hip_y), 0.0],
            [warm * 0.1 * (p[0] - side * shoulder_x), 0.0, 0.0],
            [
                wh * 0.08 * (p[0] - head_pos[0]),
                wh * 0.08 * (p[1] - head_pos[1]),
                wh * 0.08 * (p[2] - head_pos[2]),
            ],
            [ws * 0.05 * side, 0.0, 0.0],
            [0.0, 0.0, wsp * 0.05 * rd[2].max(0.0)],
        ];
        for (k, comp) in comps.iter().enumerate() {
            for c in 0..3 {
                basis[[i, c, k]] = comp[c];
            }
        }
    }

    // uniform rescale so the bounding-box height is exactly the target
    let ymin = vertices.column(1).iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = vertices
        .column(1)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = TARGET_HEIGHT / (ymax - ymin);
    vertices.mapv_inplace(|x| x * scale);
    basis.mapv_inplace(|x| x * scale);
    let mut rest_joints = Array2::zeros((JOINT_COUNT, 3));
    for j in 0..JOINT_COUNT {
        for c in 0..3 {
            rest_joints[[j, c]] = REST_RAW[j][c] * scale;
        }
    }

    let body = RestBody {
        template_vertices: vertices,
        shape_basis: basis,
        skinning_weights: weights_out,
        kinematic_tree: PARENTS.to_vec(),
        rest_joints,
        fine_faces: faces,
    };
    body.validate().expect("generated body must satisfy invariants");
    body
}
