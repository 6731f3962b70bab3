//! Fixed linear operators over the mesh: the fine-to-coarse sampling matrix D
//! and the joint regressor G mapping coarse vertices to a 14-keypoint
//! skeleton. Both are built procedurally from the rest body so no external
//! asset files are needed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::RestBody;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

pub const KEYPOINT_COUNT: usize = 14;

pub const KEYPOINT_NAMES: [&str; KEYPOINT_COUNT] = [
    "right_ankle",
    "right_knee",
    "right_hip",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_wrist",
    "right_elbow",
    "right_shoulder",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "neck",
    "head",
];

/// Body-model joint backing each keypoint, in schema order.
pub const KEYPOINT_MODEL_JOINTS: [usize; KEYPOINT_COUNT] =
    [8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12, 15];

/// Keypoint naming plus the symmetry/rooting structure metrics rely on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSchema {
    pub names: Vec<String>,
    pub left_right_pairs: Vec<(usize, usize)>,
    pub root_indices: (usize, usize),
}

impl JointSchema {
    pub fn standard() -> Self {
        JointSchema {
            names: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            left_right_pairs: vec![(0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9)],
            root_indices: (2, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub fine_faces: Vec<[usize; 3]>,
    pub coarse_faces: Vec<[usize; 3]>,
    /// M_c x M_f, row-stochastic.
    pub downsample: SparseMatrix,
    /// 14 x M_c, rows sum to 1.
    pub joint_regressor: Array2<f64>,
    pub joint_schema: JointSchema,
}

impl Topology {
    pub fn coarse_count(&self) -> usize {
        self.downsample.rows
    }

    pub fn fine_count(&self) -> usize {
        self.downsample.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_regressor.dim() != (KEYPOINT_COUNT, self.coarse_count()) {
            return Err(Error::contract("joint_regressor must be 14 x M_c"));
        }
        if self.joint_schema.names.len() != KEYPOINT_COUNT {
            return Err(Error::contract("schema must have 14 names"));
        }
        for s in self.downsample.row_sums() {
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("D row sums to {s}")));
            }
        }
        if self.downsample.values.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("D entries must be nonnegative"));
        }
        for row in self.joint_regressor.rows() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("G row sums to {s}")));
            }
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::contract("G entries must be nonnegative"));
            }
        }
        for f in &self.fine_faces {
            if f.iter().any(|&v| v >= self.fine_count()) {
                return Err(Error::contract("fine face index out of range"));
            }
        }
        for f in &self.coarse_faces {
            if f.iter().any(|&v| v >= self.coarse_count()) {
                return Err(Error::contract("coarse face index out of range"));
            }
        }
        Ok(())
    }

    /// Hex digest over every field, for determinism checks and manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let push_usize = |h: &mut Sha256, v: usize| h.update((v as u64).to_le_bytes());
        for faces in [&self.fine_faces, &self.coarse_faces] {
            push_usize(&mut h, faces.len());
            for f in faces.iter() {
                for &v in f {
                    push_usize(&mut h, v);
                }
            }
        }
        push_usize(&mut h, self.downsample.rows);
        push_usize(&mut h, self.downsample.cols);
        for &v in &self.downsample.row_ptr {
            push_usize(&mut h, v);
        }
        for &v in &self.downsample.col_idx {
            push_usize(&mut h, v);
        }
        for &v in &self.downsample.values {
            h.update(v.to_le_bytes());
        }
        for &v in &self.joint_regressor {
            h.update(v.to_le_bytes());
        }
        for n in &self.joint_schema.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }
}

/// D * fine_vertices.
pub fn downsample(fine_vertices: &Array2<f64>, topo: &Topology) -> Result<Array2<f64>> {
    if fine_vertices.dim() != (topo.fine_count(), 3) {
        return Err(Error::contract(format!(
            "fine vertices must be ({}, 3), got {:?}",
            topo.fine_count(),
            fine_vertices.dim()
        )));
    }
    Ok(topo.downsample.apply(fine_vertices))
}

/// G * coarse_vertices.
pub fn regress_joints(coarse_vertices: &Array2<f64>, topo: &Topology) -> Result<Array2<f64>> {
    if coarse_vertices.dim() != (topo.coarse_count(), 3) {
        return Err(Error::contract(format!(
            "coarse vertices must be ({}, 3), got {:?}",
            topo.coarse_count(),
            coarse_vertices.dim()
        )));
    }
    Ok(topo.joint_regressor.dot(coarse_vertices))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Farthest-point sampling over rest vertices. Starts at index 0; each step
/// keeps the vertex farthest from the kept set, lowest index on ties.
fn farthest_point_sample(vertices: &Array2<f64>, count: usize) -> Vec<usize> {
    let m = vertices.nrows();
    let v = |i: usize| [vertices[[i, 0]], vertices[[i, 1]], vertices[[i, 2]]];
    let mut kept = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; m];
    kept.push(0usize);
    loop {
        let last = v(*kept.last().unwrap());
        for i in 0..m {
            let d = dist2(&v(i), &last);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
        if kept.len() == count {
            break;
        }
        let mut best = 0usize;
        let mut best_d = -1.0;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        kept.push(best);
    }
    kept
}

/// Build D, G, and the coarse faces for a given coarse vertex budget.
pub fn build_topology(body: &RestBody, coarse_count: usize) -> Result<Topology> {
    let m_f = body.vertex_count();
    if coarse_count == 0 || coarse_count >= m_f {
        return Err(Error::contract(format!(
            "coarse_count must be in 1..{m_f}, got {coarse_count}"
        )));
    }
    let kept = farthest_point_sample(&body.template_vertices, coarse_count);

    // assign every fine vertex to its nearest kept vertex (lowest cell on ties)
    let v = |i: usize| {
        [
            body.template_vertices[[i, 0]],
            body.template_vertices[[i, 1]],
            body.template_vertices[[i, 2]],
        ]
    };
    let mut cell_of = vec![0usize; m_f];
    for i in 0..m_f {
        let p = v(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, &k) in kept.iter().enumerate() {
            let d = dist2(&p, &v(k));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        cell_of[i] = best;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); coarse_count];
    for (i, &c) in cell_of.iter().enumerate() {
        members[c].push(i);
    }
    let rows: Vec<Vec<(usize, f64)>> = members
        .iter()
        .map(|cell| {
            let w = 1.0 / cell.len() as f64;
            cell.iter().map(|&i| (i, w)).collect()
        })
        .collect();
    let downsample_m = SparseMatrix::from_rows(m_f, &rows);

    // G from cell-averaged skinning weights
    let wbar = downsample_m.apply(&body.skinning_weights);
    let mut regressor = Array2::zeros((KEYPOINT_COUNT, coarse_count));
    for (k, &joint) in KEYPOINT_MODEL_JOINTS.iter().enumerate() {
        let col = wbar.column(joint);
        let max = col.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::numeric(format!(
                "no coarse vertex carries weight for keypoint {k}"
            )));
        }
        let thresh = 0.4 * max;
        let mut sum = 0.0;
        for &w in col.iter() {
            if w >= thresh {
                sum += w;
            }
        }
        for (c, &w) in col.iter().enumerate() {
            if w >= thresh {
                regressor[[k, c]] = w / sum;
            }
        }
    }

    // coarse faces: collapse fine faces through the cell map
    let mut seen = std::collections::HashSet::new();
    let mut coarse_faces = Vec::new();
    for f in &body.fine_faces {
        let t = [cell_of[f[0]], cell_of[f[1]], cell_of[f[2]]];
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        // canonical rotation (smallest vertex first, orientation preserved)
        let s = (0..3).min_by_key(|&i| t[i]).unwrap();
        let canon = [t[s], t[(s + 1) % 3], t[(s + 2) % 3]];
        if seen.insert(canon) {
            coarse_faces.push(canon);
        }
    }

    let topo = Topology {
        fine_faces: body.fine_faces.clone(),
        coarse_faces,
        downsample: downsample_m,
        joint_regressor: regressor,
        joint_schema: JointSchema::standard(),
    };
    topo.validate()?;
    Ok(topo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{build_default_body, BodyPreset};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn desk_topo() -> (crate::body::RestBody, Topology) {
        let body = build_default_body(BodyPreset::Desk);
        let topo = build_topology(&body, 48).unwrap();
        (body, topo)
    }

    #[test]
    fn rows_are_stochastic() {
        let (_, topo) = desk_topo();
        topo.validate().unwrap();
        assert_eq!(topo.coarse_count(), 48);
        assert_eq!(topo.fine_count(), 798);
    }

    #[test]
    fn constant_mesh_stays_constant() {
        let (body, topo) = desk_topo();
        let c = [0.7, -1.3, 2.9];
        let mut fine = Array2::zeros((body.vertex_count(), 3));
        for i in 0..body.vertex_count() {
            for k in 0..3 {
                fine[[i, k]] = c[k];
            }
        }
        let coarse = downsample(&fine, &topo).unwrap();
        for i in 0..topo.coarse_count() {
            for k in 0..3 {
                assert!((coarse[[i, k]] - c[k]).abs() < 1e-12);
            }
        }
        let joints = regress_joints(&coarse, &topo).unwrap();
        assert_eq!(joints.dim(), (14, 3));
        for i in 0..14 {
            for k in 0..3 {
                assert!((joints[[i, k]] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_matches_dense_oracle() {
        let (body, topo) = desk_topo();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut fine = Array2::zeros((body.vertex_count(), 3));
        fine.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let got = downsample(&fine, &topo).unwrap();
        let dense = topo.downsample.to_dense();
        let want = dense.dot(&fine);
        let max = got
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn one_hot_regressor_row_selects_vertex() {
        let (_, mut topo) = desk_topo();
        let m_c = topo.coarse_count();
        let target = 17usize;
        for c in 0..m_c {
            topo.joint_regressor[[3, c]] = if c == target { 1.0 } else { 0.0 };
        }
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut coarse = Array2::zeros((m_c, 3));
        coarse.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let joints = regress_joints(&coarse, &topo).unwrap();
        for k in 0..3 {
            assert_eq!(joints[[3, k]], coarse[[target, k]]);
        }
    }

    #[test]
    fn near_identity_budget_works() {
        let body = build_default_body(BodyPreset::Desk);
        let m_f = body.vertex_count();
        let topo = build_topology(&body, m_f - 1).unwrap();
        assert_eq!(topo.coarse_count(), m_f - 1);
        topo.validate().unwrap();
    }

    #[test]
    fn out_of_range_budget_rejected() {
        let body = build_default_body(BodyPreset::Desk);
        assert!(build_topology(&body, body.vertex_count()).is_err());
        assert!(build_topology(&body, 0).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let body = build_default_body(BodyPreset::Desk);
        let a = build_topology(&body, 48).unwrap();
        let b = build_topology(&body, 48).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a, b);
    }

    #[test]
    fn paper_shape_budget_431() {
        let body = build_default_body(BodyPreset::PaperShape);
        let topo = build_topology(&body, 431).unwrap();
        assert_eq!(topo.downsample.rows, 431);
        assert_eq!(topo.downsample.cols, 6890);
        assert_eq!(topo.joint_regressor.dim(), (14, 431));
    }

    #[test]
    fn downsample_is_linear() {
        let (body, topo) = desk_topo();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let m = body.vertex_count();
        let mut v1 = Array2::zeros((m, 3));
        let mut v2 = Array2::zeros((m, 3));
        v1.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        v2.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let (a, b) = (0.37, -1.42);
        let combo = v1.mapv(|x| a * x) + v2.mapv(|x| b * x);
        let left = downsample(&combo, &topo).unwrap();
        let d1 = downsample(&v1, &topo).unwrap();
        let d2 = downsample(&v2, &topo).unwrap();
        let right = d1.mapv(|x| a * x) + d2.mapv(|x| b * x);
        let max = left
            .iter()
            .zip(right.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn joint_regression_shifts_with_translation() {
        let (body, topo) = desk_topo();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let m = body.vertex_count();
        let mut fine = Array2::zeros((m, 3));
        fine.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let t = [0.25, -0.6, 1.1];
        let mut shifted = fine.clone();
        for i in 0..m {
            for k in 0..3 {
                shifted[[i, k]] += t[k];
            }
        }
        let j0 = regress_joints(&downsample(&fine, &topo).unwrap(), &topo).unwrap();
        let j1 = regress_joints(&downsample(&shifted, &topo).unwrap(), &topo).unwrap();
        for i in 0..14 {
            for k in 0..3 {
                assert!((j1[[i, k]] - (j0[[i, k]] + t[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (_, topo) = desk_topo();
        let wrong = Array2::zeros((10, 3));
        assert!(downsample(&wrong, &topo).is_err());
        assert!(regress_joints(&wrong, &topo).is_err());
    }

    #[test]
    fn schema_order_is_fixed() {
        let s = JointSchema::standard();
        assert_eq!(s.names[0], "right_ankle");
        assert_eq!(s.names[3], "left_hip");
        assert_eq!(s.names[12], "neck");
        assert_eq!(s.names[13], "head");
        assert_eq!(s.root_indices, (2, 3));
        for &(l, r) in &s.left_right_pairs {
            assert!(s.names[l].starts_with("right_") || l < r);
        }
    }
}
