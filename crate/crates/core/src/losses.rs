//! Training objective (five weighted L1 terms) and the standard evaluation
//! metrics: MPJPE, PA-MPJPE, MPVE. Everything here operates on plain arrays;
//! the differentiable counterpart is assembled on the tape by the model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::body::BodyParams;
use crate::error::{Error, Result};
use crate::template::TemplateOutput;
use crate::topology::{downsample, regress_joints, JointSchema, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub alpha_temp: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            alpha_temp: 0.33,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("alpha_temp", self.alpha_temp),
            ("beta", self.beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Supervision targets for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub joints3d: Array2<f64>,
    pub coarse_vertices: Array2<f64>,
    pub fine_vertices: Array2<f64>,
    pub joints2d: Array2<f64>,
    pub theta: Option<BodyParams>,
}

/// Network outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fine_vertices: Array2<f64>,
    pub coarse_vertices: Array2<f64>,
    pub joints3d: Array2<f64>,
    pub joints2d: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_j: f64,
    pub l_j_reg: f64,
    pub l_v_temp: f64,
    pub l_j_proj: f64,
    pub total: f64,
}

fn l1_mean(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::contract(format!("{what}: empty arrays")));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

/// The five-term objective. `l_v` sums the coarse and fine mean terms;
/// `l_j_reg` re-regresses joints from the predicted coarse mesh.
pub fn total_loss(
    pred: &Prediction,
    template: &TemplateOutput,
    gt: &GroundTruth,
    topo: &Topology,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let l_v = l1_mean(&pred.coarse_vertices, &gt.coarse_vertices, "l_v coarse")?
        + l1_mean(&pred.fine_vertices, &gt.fine_vertices, "l_v fine")?;
    let l_j = l1_mean(&pred.joints3d, &gt.joints3d, "l_j")?;
    let regressed = regress_joints(&pred.coarse_vertices, topo)?;
    let l_j_reg = l1_mean(&regressed, &gt.joints3d, "l_j_reg")?;
    let l_v_temp = l1_mean(&template.template_coarse, &gt.coarse_vertices, "l_v_temp")?;
    let l_j_proj = l1_mean(&pred.joints2d, &gt.joints2d, "l_j_proj")?;
    let total = w.alpha * (l_v + l_j + l_j_reg) + w.alpha_temp * l_v_temp + w.beta * l_j_proj;
    Ok(LossBreakdown {
        l_v,
        l_j,
        l_j_reg,
        l_v_temp,
        l_j_proj,
        total,
    })
}

fn check_joints(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() || pred.ncols() != 3 {
        return Err(Error::contract(format!(
            "joint sets must share a (k,3) shape, got {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

fn root_centered(joints: &Array2<f64>, schema: &JointSchema) -> Array2<f64> {
    let (r0, r1) = schema.root_indices;
    let root = [
        0.5 * (joints[[r0, 0]] + joints[[r1, 0]]),
        0.5 * (joints[[r0, 1]] + joints[[r1, 1]]),
        0.5 * (joints[[r0, 2]] + joints[[r1, 2]]),
    ];
    let mut out = joints.clone();
    for i in 0..out.nrows() {
        for c in 0..3 {
            out[[i, c]] -= root[c];
        }
    }
    out
}

fn mean_joint_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let k = a.nrows();
    (0..k)
        .map(|i| {
            (0..3)
                .map(|c| (a[[i, c]] - b[[i, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / k as f64
}

/// Mean per-joint error after translating both sets so the hip midpoint sits
/// at the origin.
pub fn mpjpe(pred: &Array2<f64>, gt: &Array2<f64>, schema: &JointSchema) -> Result<f64> {
    check_joints(pred, gt)?;
    if pred.nrows() != schema.names.len() {
        return Err(Error::contract("joint count does not match schema"));
    }
    let p = root_centered(pred, schema);
    let g = root_centered(gt, schema);
    Ok(mean_joint_distance(&p, &g))
}

/// Mean per-joint error with no alignment at all.
pub fn mpjpe_unaligned(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_joints(pred, gt)?;
    Ok(mean_joint_distance(pred, gt))
}

/// Optimal similarity transform (scale, proper rotation, translation) mapping
/// `from` onto `to`, least-squares sense.
fn umeyama(from: &Array2<f64>, to: &Array2<f64>) -> Result<(f64, [[f64; 3]; 3], [f64; 3])> {
    let k = from.nrows() as f64;
    let mean = |m: &Array2<f64>| -> [f64; 3] {
        let mut mu = [0.0; 3];
        for row in m.rows() {
            for c in 0..3 {
                mu[c] += row[c];
            }
        }
        mu.map(|v| v / k)
    };
    let mu_f = mean(from);
    let mu_t = mean(to);
    let mut cov = [[0.0f64; 3]; 3];
    let mut var_f = 0.0f64;
    for i in 0..from.nrows() {
        let fc = [
            from[[i, 0]] - mu_f[0],
            from[[i, 1]] - mu_f[1],
            from[[i, 2]] - mu_f[2],
        ];
        let tc = [
            to[[i, 0]] - mu_t[0],
            to[[i, 1]] - mu_t[1],
            to[[i, 2]] - mu_t[2],
        ];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += tc[a] * fc[b];
            }
            var_f += fc[a] * fc[a];
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    var_f /= k;
    if var_f < 1e-12 {
        return Err(Error::numeric(
            "alignment undefined: source joints are coincident",
        ));
    }
    let cov_m = nalgebra::Matrix3::from_fn(|r, c| cov[r][c]);
    let svd = cov_m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numeric("svd failed"))?;
    let vt = svd.v_t.ok_or_else(|| Error::numeric("svd failed"))?;
    let sv = svd.singular_values;
    if sv[1] < 1e-12 {
        return Err(Error::numeric(
            "alignment undefined: joint configuration is collinear",
        ));
    }
    let sign = if (u.determinant() * vt.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, sign));
    let r = u * d * vt;
    let trace_ds = sv[0] + sv[1] + sign * sv[2];
    let scale = trace_ds / var_f;
    let mut rot = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            rot[a][b] = r[(a, b)];
        }
    }
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        t[a] = mu_t[a] - scale * (rot[a][0] * mu_f[0] + rot[a][1] * mu_f[1] + rot[a][2] * mu_f[2]);
    }
    Ok((scale, rot, t))
}

/// Mean per-joint error after the optimal similarity alignment of `pred`
/// onto `gt` (reflections excluded).
pub fn pa_mpjpe(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_joints(pred, gt)?;
    if pred.nrows() < 3 {
        return Err(Error::contract("need at least 3 joints for alignment"));
    }
    let (s, r, t) = umeyama(pred, gt)?;
    let mut aligned = Array2::zeros(pred.raw_dim());
    for i in 0..pred.nrows() {
        for a in 0..3 {
            aligned[[i, a]] = s
                * (r[a][0] * pred[[i, 0]] + r[a][1] * pred[[i, 1]] + r[a][2] * pred[[i, 2]])
                + t[a];
        }
    }
    Ok(mean_joint_distance(&aligned, gt))
}

/// Mean per-vertex error after root-aligning both meshes by the hip midpoint
/// of their regressed joints.
pub fn mpve(
    pred_fine: &Array2<f64>,
    gt_fine: &Array2<f64>,
    topo: &Topology,
    schema: &JointSchema,
) -> Result<f64> {
    if pred_fine.dim() != gt_fine.dim() {
        return Err(Error::contract(format!(
            "mesh shape mismatch {:?} vs {:?}",
            pred_fine.dim(),
            gt_fine.dim()
        )));
    }
    let root_of = |v: &Array2<f64>| -> Result<[f64; 3]> {
        let joints = regress_joints(&downsample(v, topo)?, topo)?;
        let (r0, r1) = schema.root_indices;
        Ok([
            0.5 * (joints[[r0, 0]] + joints[[r1, 0]]),
            0.5 * (joints[[r0, 1]] + joints[[r1, 1]]),
            0.5 * (joints[[r0, 2]] + joints[[r1, 2]]),
        ])
    };
    let rp = root_of(pred_fine)?;
    let rg = root_of(gt_fine)?;
    let m = pred_fine.nrows();
    let sum: f64 = (0..m)
        .map(|i| {
            (0..3)
                .map(|c| ((pred_fine[[i, c]] - rp[c]) - (gt_fine[[i, c]] - rg[c])).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(sum / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{build_default_body, BodyPreset, BodyParams};
    use crate::template::build_template;
    use crate::topology::{build_topology, KEYPOINT_COUNT};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fixture() -> (crate::body::RestBody, Topology) {
        let body = build_default_body(BodyPreset::Desk);
        let topo = build_topology(&body, 48).unwrap();
        (body, topo)
    }

    fn perfect_case(
        body: &crate::body::RestBody,
        topo: &Topology,
    ) -> (Prediction, TemplateOutput, GroundTruth) {
        let theta = BodyParams::zeros();
        let template = build_template(&theta, body, topo).unwrap();
        let joints2d = Array2::zeros((KEYPOINT_COUNT, 2));
        let gt = GroundTruth {
            joints3d: template.template_joints.clone(),
            coarse_vertices: template.template_coarse.clone(),
            fine_vertices: template.template_fine.clone(),
            joints2d: joints2d.clone(),
            theta: Some(theta),
        };
        let pred = Prediction {
            fine_vertices: gt.fine_vertices.clone(),
            coarse_vertices: gt.coarse_vertices.clone(),
            joints3d: gt.joints3d.clone(),
            joints2d,
        };
        (pred, template, gt)
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let (body, topo) = fixture();
        let (pred, template, gt) = perfect_case(&body, &topo);
        let b = total_loss(&pred, &template, &gt, &topo, &LossWeights::default()).unwrap();
        assert_eq!(b.l_v, 0.0);
        assert_eq!(b.l_j, 0.0);
        assert_eq!(b.l_j_reg, 0.0);
        assert_eq!(b.l_v_temp, 0.0);
        assert_eq!(b.l_j_proj, 0.0);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn zero_weights_zero_total() {
        let (body, topo) = fixture();
        let (mut pred, template, gt) = perfect_case(&body, &topo);
        pred.joints3d[[4, 1]] += 3.0;
        pred.coarse_vertices[[10, 0]] -= 1.0;
        let w = LossWeights {
            alpha: 0.0,
            alpha_temp: 0.0,
            beta: 0.0,
        };
        let b = total_loss(&pred, &template, &gt, &topo, &w).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.l_j > 0.0);
    }

    #[test]
    fn single_joint_offset_mean() {
        let (body, topo) = fixture();
        let (mut pred, template, gt) = perfect_case(&body, &topo);
        pred.joints3d[[5, 0]] += 0.3;
        let w = LossWeights {
            alpha: 1.0,
            alpha_temp: 0.0,
            beta: 0.0,
        };
        let b = total_loss(&pred, &template, &gt, &topo, &w).unwrap();
        let want = 0.3 / 42.0;
        assert!((b.l_j - want).abs() < 1e-15, "l_j = {}", b.l_j);
        assert_eq!(b.l_v, 0.0);
        assert_eq!(b.l_j_reg, 0.0);
        assert!((b.total - want).abs() < 1e-15);
    }

    #[test]
    fn breakdown_identity_holds_for_random_inputs() {
        let (_body, topo) = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let (m_c, m_f) = (topo.coarse_count(), topo.fine_count());
        for _ in 0..1000 {
            let mut rand2 = |r: usize, c: usize| {
                let mut a = Array2::zeros((r, c));
                a.mapv_inplace(|_| rng.gen_range(-1.5..1.5));
                a
            };
            let pred = Prediction {
                fine_vertices: rand2(m_f, 3),
                coarse_vertices: rand2(m_c, 3),
                joints3d: rand2(KEYPOINT_COUNT, 3),
                joints2d: rand2(KEYPOINT_COUNT, 2),
            };
            let gt = GroundTruth {
                joints3d: rand2(KEYPOINT_COUNT, 3),
                coarse_vertices: rand2(m_c, 3),
                fine_vertices: rand2(m_f, 3),
                joints2d: rand2(KEYPOINT_COUNT, 2),
                theta: None,
            };
            let template = TemplateOutput {
                theta: BodyParams::zeros(),
                template_fine: rand2(m_f, 3),
                template_coarse: rand2(m_c, 3),
                template_joints: rand2(KEYPOINT_COUNT, 3),
            };
            let w = LossWeights {
                alpha: rng.gen_range(0.0..2.0),
                alpha_temp: rng.gen_range(0.0..2.0),
                beta: rng.gen_range(0.0..2.0),
            };
            let b = total_loss(&pred, &template, &gt, &topo, &w).unwrap();
            let recon =
                w.alpha * (b.l_v + b.l_j + b.l_j_reg) + w.alpha_temp * b.l_v_temp + w.beta * b.l_j_proj;
            assert!((b.total - recon).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let (body, topo) = fixture();
        let (pred, template, gt) = perfect_case(&body, &topo);
        let w = LossWeights {
            alpha: -0.1,
            alpha_temp: 0.33,
            beta: 1.0,
        };
        assert!(total_loss(&pred, &template, &gt, &topo, &w).is_err());
    }

    fn sample_joints(seed: u64) -> Array2<f64> {
        // asymmetric, non-degenerate 14-joint cloud
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut j = Array2::zeros((KEYPOINT_COUNT, 3));
        j.mapv_inplace(|_| rng.gen_range(-0.8..0.8));
        j
    }

    #[test]
    fn mpjpe_ignores_global_translation() {
        let schema = JointSchema::standard();
        let gt = sample_joints(31);
        let mut pred = gt.clone();
        for i in 0..KEYPOINT_COUNT {
            pred[[i, 0]] += 0.7;
            pred[[i, 1]] -= 1.2;
            pred[[i, 2]] += 0.05;
        }
        assert!(mpjpe(&pred, &gt, &schema).unwrap() < 1e-12);
        assert_eq!(mpjpe(&gt, &gt, &schema).unwrap(), 0.0);
    }

    #[test]
    fn mpjpe_rotation_matches_direct_computation() {
        let schema = JointSchema::standard();
        let gt = sample_joints(32);
        let r = crate::body::rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let (r0, r1) = schema.root_indices;
        let root = [
            0.5 * (gt[[r0, 0]] + gt[[r1, 0]]),
            0.5 * (gt[[r0, 1]] + gt[[r1, 1]]),
            0.5 * (gt[[r0, 2]] + gt[[r1, 2]]),
        ];
        let mut pred = gt.clone();
        for i in 0..KEYPOINT_COUNT {
            let v = [gt[[i, 0]] - root[0], gt[[i, 1]] - root[1], gt[[i, 2]] - root[2]];
            for a in 0..3 {
                pred[[i, a]] = root[a] + r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2];
            }
        }
        let got = mpjpe(&pred, &gt, &schema).unwrap();
        // rotation about the root: expected error is mean |(R - I) (j - root)|
        let want: f64 = (0..KEYPOINT_COUNT)
            .map(|i| {
                let v = [gt[[i, 0]] - root[0], gt[[i, 1]] - root[1], gt[[i, 2]] - root[2]];
                let rv = [
                    r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
                    r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
                    r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
                ];
                ((rv[0] - v[0]).powi(2) + (rv[1] - v[1]).powi(2) + (rv[2] - v[2]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / KEYPOINT_COUNT as f64;
        assert!(got > 0.1);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pa_mpjpe_invariant_under_similarity() {
        let gt = sample_joints(33);
        let r = crate::body::rodrigues([0.4, -0.9, 0.3]);
        let s = 1.7;
        let t = [0.2, -0.5, 0.9];
        let mut pred = Array2::zeros((KEYPOINT_COUNT, 3));
        for i in 0..KEYPOINT_COUNT {
            for a in 0..3 {
                pred[[i, a]] = s
                    * (r[a][0] * gt[[i, 0]] + r[a][1] * gt[[i, 1]] + r[a][2] * gt[[i, 2]])
                    + t[a];
            }
        }
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn pa_mpjpe_mirror_matches_rotation_search() {
        let gt = sample_joints(34);
        let mut pred = gt.clone();
        for i in 0..KEYPOINT_COUNT {
            pred[[i, 0]] = -pred[[i, 0]];
        }
        let got = pa_mpjpe(&pred, &gt).unwrap();
        assert!(got > 1e-3, "mirror of an asymmetric cloud must not align");

        // randomized rotation search with closed-form scale/translation per
        // candidate: one million proper rotations, annealed around the best
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let k = KEYPOINT_COUNT as f64;
        let mean = |m: &Array2<f64>| -> [f64; 3] {
            let mut mu = [0.0; 3];
            for row in m.rows() {
                for c in 0..3 {
                    mu[c] += row[c];
                }
            }
            mu.map(|v| v / k)
        };
        let mu_p = mean(&pred);
        let mu_g = mean(&gt);
        let pc: Vec<[f64; 3]> = (0..KEYPOINT_COUNT)
            .map(|i| [pred[[i, 0]] - mu_p[0], pred[[i, 1]] - mu_p[1], pred[[i, 2]] - mu_p[2]])
            .collect();
        let gc: Vec<[f64; 3]> = (0..KEYPOINT_COUNT)
            .map(|i| [gt[[i, 0]] - mu_g[0], gt[[i, 1]] - mu_g[1], gt[[i, 2]] - mu_g[2]])
            .collect();
        let var_p: f64 = pc.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sum();
        // returns (least-squares objective, reported mean distance); the
        // search minimizes the former because the alignment is defined by it
        let eval_rot = |r: &[[f64; 3]; 3]| -> (f64, f64) {
            let mut dot = 0.0;
            for (p, g) in pc.iter().zip(gc.iter()) {
                for a in 0..3 {
                    dot += g[a] * (r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2]);
                }
            }
            // scale must stay positive: negative s times a rotation is a
            // reflection, which the similarity class excludes
            let s = (dot / var_p).max(0.0);
            let mut sq = 0.0;
            let mut sum = 0.0;
            for (p, g) in pc.iter().zip(gc.iter()) {
                let mut d2 = 0.0;
                for a in 0..3 {
                    let rp = r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2];
                    d2 += (s * rp - g[a]).powi(2);
                }
                sq += d2;
                sum += d2.sqrt();
            }
            (sq, sum / k)
        };
        let compose = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| -> [[f64; 3]; 3] {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
                }
            }
            out
        };
        let mut best_sq = f64::INFINITY;
        let mut best_dist = f64::INFINITY;
        let mut best_r = [[0.0; 3]; 3];
        for stage in 0..5 {
            let per_stage = 200_000;
            let spread = match stage {
                0 => std::f64::consts::PI,
                1 => 0.5,
                2 => 0.05,
                3 => 0.005,
                _ => 0.0005,
            };
            for _ in 0..per_stage {
                let axis_angle = [
                    rng.gen_range(-spread..spread),
                    rng.gen_range(-spread..spread),
                    rng.gen_range(-spread..spread),
                ];
                let cand = if stage == 0 {
                    crate::body::rodrigues(axis_angle)
                } else {
                    compose(&crate::body::rodrigues(axis_angle), &best_r)
                };
                let (sq, dist) = eval_rot(&cand);
                if sq < best_sq {
                    best_sq = sq;
                    best_dist = dist;
                    best_r = cand;
                }
            }
        }
        assert!(
            (got - best_dist).abs() < 1e-3,
            "closed form {got} vs searched {best_dist}"
        );
    }

    #[test]
    fn pa_mpjpe_bounded_by_perturbation() {
        let gt = sample_joints(36);
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let eps = 0.01;
        let mut pred = gt.clone();
        for i in 0..KEYPOINT_COUNT {
            let mut d = [0.0f64; 3];
            for v in d.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            for (a, v) in d.iter().enumerate() {
                pred[[i, a]] += eps * v / n;
            }
        }
        let got = pa_mpjpe(&pred, &gt).unwrap();
        assert!(got <= eps + 1e-12);
    }

    #[test]
    fn pa_mpjpe_never_exceeds_unaligned_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(38);
        for trial in 0..50 {
            let gt = sample_joints(100 + trial);
            let mut pred = gt.clone();
            pred.mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
            let pa = pa_mpjpe(&pred, &gt).unwrap();
            let plain = mpjpe_unaligned(&pred, &gt).unwrap();
            assert!(pa <= plain + 1e-9, "trial {trial}: {pa} vs {plain}");
        }
    }

    #[test]
    fn pa_mpjpe_rejects_degenerate_inputs() {
        let gt = sample_joints(39);
        let coincident = Array2::from_elem((KEYPOINT_COUNT, 3), 0.25);
        assert!(pa_mpjpe(&coincident, &gt).is_err());
        let mut collinear = Array2::zeros((KEYPOINT_COUNT, 3));
        for i in 0..KEYPOINT_COUNT {
            collinear[[i, 0]] = i as f64;
        }
        assert!(pa_mpjpe(&collinear, &gt).is_err());
        let small = Array2::zeros((2, 3));
        assert!(pa_mpjpe(&small, &small).is_err());
    }

    #[test]
    fn metrics_shift_invariant_jointly() {
        let schema = JointSchema::standard();
        let gt = sample_joints(40);
        let mut pred = gt.clone();
        pred.mapv_inplace(|v| v + 0.013);
        let base_m = mpjpe(&pred, &gt, &schema).unwrap();
        let base_pa = pa_mpjpe(&pred, &gt).unwrap();
        let shift = [0.4, -0.7, 1.3];
        let mut pred_s = pred.clone();
        let mut gt_s = gt.clone();
        for i in 0..KEYPOINT_COUNT {
            for c in 0..3 {
                pred_s[[i, c]] += shift[c];
                gt_s[[i, c]] += shift[c];
            }
        }
        assert!((mpjpe(&pred_s, &gt_s, &schema).unwrap() - base_m).abs() < 1e-12);
        assert!((pa_mpjpe(&pred_s, &gt_s).unwrap() - base_pa).abs() < 1e-9);
    }

    #[test]
    fn mpve_translation_and_displacement() {
        let (body, topo) = fixture();
        let schema = JointSchema::standard();
        let gt = body.template_vertices.clone();
        assert_eq!(mpve(&gt, &gt, &topo, &schema).unwrap(), 0.0);

        let mut shifted = gt.clone();
        for i in 0..shifted.nrows() {
            shifted[[i, 0]] += 0.5;
            shifted[[i, 1]] -= 0.2;
            shifted[[i, 2]] += 0.9;
        }
        assert!(mpve(&shifted, &gt, &topo, &schema).unwrap() < 1e-12);

        // displace one vertex that carries no weight in the hip rows of G*D
        let dense_d = topo.downsample.to_dense();
        let gd = topo.joint_regressor.dot(&dense_d);
        let (r0, r1) = schema.root_indices;
        let free = (0..gt.nrows())
            .find(|&v| gd[[r0, v]] == 0.0 && gd[[r1, v]] == 0.0)
            .expect("some vertex outside the hip support");
        let d = 0.37;
        let mut pred = gt.clone();
        pred[[free, 2]] += d;
        let got = mpve(&pred, &gt, &topo, &schema).unwrap();
        let want = d / gt.nrows() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
