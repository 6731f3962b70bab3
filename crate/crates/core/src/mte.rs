//! Multi-Layer Transformer Encoder: an input projection, three pre-norm
//! self-attention blocks whose hidden width shrinks block to block, a shared
//! per-token coordinate head, the learnable coarse-to-fine upsampler, and the
//! weak-perspective camera head.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{fan_in_init, normal_init, zeros, BoundParams, ParamStore};
use crate::sparse::SparseMatrix;
use crate::topology::KEYPOINT_COUNT;

pub const BLOCK_COUNT: usize = 3;
const MLP_RATIO: usize = 4;
const CAMERA_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub block_widths: [usize; BLOCK_COUNT],
    pub heads_per_block: usize,
    pub layers_per_block: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            block_widths: [256, 128, 64],
            heads_per_block: 4,
            layers_per_block: 4,
        }
    }
}

impl EncoderConfig {
    pub fn paper_lineage() -> Self {
        EncoderConfig {
            block_widths: [1024, 256, 64],
            heads_per_block: 4,
            layers_per_block: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads_per_block == 0 || self.layers_per_block == 0 {
            return Err(Error::config("encoder needs at least one head and layer"));
        }
        for pair in self.block_widths.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::config(format!(
                    "block widths must strictly decrease, got {:?}",
                    self.block_widths
                )));
            }
        }
        for &w in &self.block_widths {
            if w == 0 || w % self.heads_per_block != 0 {
                return Err(Error::config(format!(
                    "width {w} not divisible by {} heads",
                    self.heads_per_block
                )));
            }
        }
        Ok(())
    }
}

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

fn register_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    out: usize,
    inp: usize,
) -> Result<()> {
    let (w, b) = linear_names(prefix);
    store.register(&w, fan_in_init(rng, out, inp))?;
    store.register(&b, zeros(&[out]))
}

fn register_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), ndarray::ArrayD::ones(ndarray::IxDyn(&[width])))?;
    store.register(&format!("{prefix}.beta"), zeros(&[width]))
}

/// Register every MTE parameter. `token_width` is C+3; `downsample` seeds the
/// upsampler init.
pub fn register_params<R: Rng>(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    token_width: usize,
    downsample: &SparseMatrix,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    register_linear(store, rng, "mte.input_proj", cfg.block_widths[0], token_width)?;
    for b in 0..BLOCK_COUNT {
        let w = cfg.block_widths[b];
        for l in 0..cfg.layers_per_block {
            let p = format!("mte.block{b}.layer{l}");
            register_layer_norm(store, &format!("{p}.ln1"), w)?;
            for part in ["wq", "wk", "wv", "wo"] {
                register_linear(store, rng, &format!("{p}.attn.{part}"), w, w)?;
            }
            register_layer_norm(store, &format!("{p}.ln2"), w)?;
            register_linear(store, rng, &format!("{p}.mlp.fc1"), MLP_RATIO * w, w)?;
            register_linear(store, rng, &format!("{p}.mlp.fc2"), w, MLP_RATIO * w)?;
        }
        if b + 1 < BLOCK_COUNT {
            register_linear(
                store,
                rng,
                &format!("mte.reduce{b}"),
                cfg.block_widths[b + 1],
                w,
            )?;
        }
    }
    // Output heads start near zero so training begins at the scale of the
    // targets (coords ~0, camera ~identity) instead of whatever magnitude the
    // raw token stream happens to carry. Not exactly zero: a faint head keeps
    // gradient flowing into the encoder from the first step.
    let head_std = 3e-3;
    let w_last = cfg.block_widths[BLOCK_COUNT - 1];
    let (hw, hb) = linear_names("mte.coord_head");
    store.register(&hw, normal_init(rng, &[3, w_last], head_std))?;
    store.register(&hb, zeros(&[3]))?;
    register_linear(store, rng, "mte.camera.fc1", CAMERA_HIDDEN, w_last)?;
    let (cw, cb) = linear_names("mte.camera.fc2");
    store.register(&cw, normal_init(rng, &[3, CAMERA_HIDDEN], head_std))?;
    let mut cam_bias = Array1::zeros(3);
    cam_bias[0] = 1.0;
    store.register(&cb, cam_bias.into_dyn())?;

    // upsampler: rows of D transposed, renormalized to sum 1, zero bias
    let (m_c, m_f) = (downsample.rows, downsample.cols);
    let mut up = Array2::zeros((m_f, m_c));
    for r in 0..m_c {
        for k in downsample.row_ptr[r]..downsample.row_ptr[r + 1] {
            up[[downsample.col_idx[k], r]] = downsample.values[k];
        }
    }
    for mut row in up.rows_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    store.register("mte.upsample.weight", up.into_dyn())?;
    store.register("mte.upsample.bias", zeros(&[m_f, 3]))?;
    Ok(())
}

fn linear(g: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let (wn, bn) = linear_names(prefix);
    let w = params.var(&wn)?;
    let b = params.var(&bn)?;
    let wt = g.transpose(w);
    let prod = g.matmul(x, wt);
    Ok(g.add_row(prod, b))
}

fn layer_norm(g: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let gamma = params.var(&format!("{prefix}.gamma"))?;
    let beta = params.var(&format!("{prefix}.beta"))?;
    let n = g.layer_norm_rows(x);
    let scaled = g.mul_row(n, gamma);
    Ok(g.add_row(scaled, beta))
}

/// Multi-head self-attention with externally supplied projections.
pub(crate) fn attention(
    g: &mut Graph,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let width = g.value2(x).ncols();
    let dh = width / heads;
    let q = linear(g, x, params, &format!("{prefix}.wq"))?;
    let k = linear(g, x, params, &format!("{prefix}.wk"))?;
    let v = linear(g, x, params, &format!("{prefix}.wv"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged: Option<Var> = None;
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled);
        let oh = g.matmul(attn, vh);
        merged = Some(match merged {
            None => oh,
            Some(m) => g.concat_cols(m, oh),
        });
    }
    linear(g, merged.unwrap(), params, &format!("{prefix}.wo"))
}

fn encoder_layer(
    g: &mut Graph,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let n1 = layer_norm(g, x, params, &format!("{prefix}.ln1"))?;
    let a = attention(g, n1, params, &format!("{prefix}.attn"), heads)?;
    let x = g.add(x, a);
    let n2 = layer_norm(g, x, params, &format!("{prefix}.ln2"))?;
    let h = linear(g, n2, params, &format!("{prefix}.mlp.fc1"))?;
    let h = g.gelu(h);
    let m = linear(g, h, params, &format!("{prefix}.mlp.fc2"))?;
    Ok(g.add(x, m))
}

/// Encoder outputs: per-token coordinates split into joints and vertices,
/// plus the final token states for the camera head.
pub struct EncodeOutput {
    pub joints3d: Var,
    pub coarse_vertices: Var,
    pub final_tokens: Var,
}

/// Run the three-block encoder over the query tokens (T, C+3).
pub fn encode(
    g: &mut Graph,
    tokens: Var,
    params: &BoundParams,
    cfg: &EncoderConfig,
) -> Result<EncodeOutput> {
    cfg.validate()?;
    let t = g.value2(tokens).nrows();
    if t <= KEYPOINT_COUNT {
        return Err(Error::contract(format!(
            "need more than {KEYPOINT_COUNT} tokens, got {t}"
        )));
    }
    let mut x = linear(g, tokens, params, "mte.input_proj")?;
    for b in 0..BLOCK_COUNT {
        for l in 0..cfg.layers_per_block {
            x = encoder_layer(
                g,
                x,
                params,
                &format!("mte.block{b}.layer{l}"),
                cfg.heads_per_block,
            )?;
        }
        if b + 1 < BLOCK_COUNT {
            x = linear(g, x, params, &format!("mte.reduce{b}"))?;
        }
    }
    let coords = linear(g, x, params, "mte.coord_head")?;
    let joints3d = g.slice_rows(coords, 0, KEYPOINT_COUNT);
    let coarse_vertices = g.slice_rows(coords, KEYPOINT_COUNT, t - KEYPOINT_COUNT);
    Ok(EncodeOutput {
        joints3d,
        coarse_vertices,
        final_tokens: x,
    })
}

/// Learnable linear upsampling (M_c,3) -> (M_f,3), same map per channel.
pub fn upsample_mesh(g: &mut Graph, coarse: Var, params: &BoundParams) -> Result<Var> {
    let w = params.var("mte.upsample.weight")?;
    let b = params.var("mte.upsample.bias")?;
    if g.value2(coarse).ncols() != 3 {
        return Err(Error::contract("coarse vertices must be (m,3)"));
    }
    let prod = g.matmul(w, coarse);
    Ok(g.add(prod, b))
}

/// Camera from the mean of final token states; joints projected by it.
pub fn camera_and_project(
    g: &mut Graph,
    joints3d: Var,
    final_tokens: Var,
    params: &BoundParams,
) -> Result<(Var, Var)> {
    let pooled = g.mean_rows(final_tokens);
    let (w1n, b1n) = linear_names("mte.camera.fc1");
    let (w2n, b2n) = linear_names("mte.camera.fc2");
    let w1 = params.var(&w1n)?;
    let b1 = params.var(&b1n)?;
    let w2 = params.var(&w2n)?;
    let b2 = params.var(&b2n)?;
    let h = g.affine_vec(w1, pooled, b1);
    let h = g.gelu(h);
    let camera = g.affine_vec(w2, h, b2);
    let joints2d = g.weak_perspective(joints3d, camera);
    Ok((camera, joints2d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{build_default_body, BodyPreset};
    use crate::topology::build_topology;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            block_widths: [8, 6, 4],
            heads_per_block: 2,
            layers_per_block: 1,
        }
    }

    fn desk_sparse() -> SparseMatrix {
        let body = build_default_body(BodyPreset::Desk);
        build_topology(&body, 48).unwrap().downsample
    }

    fn build_store(cfg: &EncoderConfig, token_width: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        register_params(&mut store, cfg, token_width, &desk_sparse(), &mut rng).unwrap();
        store
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::paper_lineage().validate().is_ok());
        let bad = EncoderConfig {
            block_widths: [64, 64, 32],
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let indivisible = EncoderConfig {
            block_widths: [10, 6, 4],
            heads_per_block: 4,
            layers_per_block: 1,
        };
        assert!(indivisible.validate().is_err());
    }

    #[test]
    fn attention_matches_hand_rolled_oracle() {
        // identity projections, one head, 3 tokens of width 4
        let mut store = ParamStore::new();
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        for part in ["wq", "wk", "wv", "wo"] {
            store
                .register(&format!("toy.attn.{part}.weight"), eye.clone().into_dyn())
                .unwrap();
            store
                .register(&format!("toy.attn.{part}.bias"), zeros(&[4]))
                .unwrap();
        }
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut x = Array2::zeros((3, 4));
        x.mapv_inplace(|_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::new();
        let xv = g.constant2(x.clone());
        let bound = BoundParams::mount_frozen(&mut g, &store);
        let out = attention(&mut g, xv, &bound, "toy.attn", 1).unwrap();
        let got = g.value2(out).to_owned();

        // oracle: softmax(x x^T / 2) x with explicit loops
        let mut scores = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..4 {
                    dot += x[[i, k]] * x[[j, k]];
                }
                scores[i][j] = dot / 2.0;
            }
        }
        let mut want: Array2<f64> = Array2::zeros((3, 4));
        for i in 0..3 {
            let max = scores[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores[i].iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                let a = exps[j] / sum;
                for k in 0..4 {
                    want[[i, k]] += a * x[[j, k]];
                }
            }
        }
        let max = got
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-9, "attention oracle divergence {max}");
    }

    #[test]
    fn encode_shapes_desk() {
        let cfg = tiny_cfg();
        let store = build_store(&cfg, 19, 14);
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let mut tokens = Array2::zeros((62, 19));
        tokens.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let tv = g.constant2(tokens);
        let bound = BoundParams::mount_frozen(&mut g, &store);
        let out = encode(&mut g, tv, &bound, &cfg).unwrap();
        assert_eq!(g.value2(out.joints3d).dim(), (14, 3));
        assert_eq!(g.value2(out.coarse_vertices).dim(), (48, 3));
        assert_eq!(g.value2(out.final_tokens).dim(), (62, 4));
    }

    #[test]
    fn paper_lineage_shapes() {
        let cfg = EncoderConfig::paper_lineage();
        let body = build_default_body(BodyPreset::PaperShape);
        let topo = build_topology(&body, 431).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        register_params(&mut store, &cfg, 2051, &topo.downsample, &mut rng).unwrap();
        let mut tokens = Array2::zeros((445, 2051));
        tokens.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        let mut g = Graph::new();
        let tv = g.constant2(tokens);
        let bound = BoundParams::mount_frozen(&mut g, &store);
        let out = encode(&mut g, tv, &bound, &cfg).unwrap();
        assert_eq!(g.value2(out.joints3d).dim(), (14, 3));
        assert_eq!(g.value2(out.coarse_vertices).dim(), (431, 3));
        let up = upsample_mesh(&mut g, out.coarse_vertices, &bound).unwrap();
        assert_eq!(g.value2(up).dim(), (6890, 3));
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let cfg = tiny_cfg();
        let store = build_store(&cfg, 19, 17);
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let mut tokens = Array2::zeros((62, 19));
        tokens.mapv_inplace(|_| rng.gen_range(-1.0..1.0));

        let run = |t: &Array2<f64>| -> Array2<f64> {
            let mut g = Graph::new();
            let tv = g.constant2(t.clone());
            let bound = BoundParams::mount_frozen(&mut g, &store);
            let out = encode(&mut g, tv, &bound, &cfg).unwrap();
            let coords = {
                let j = g.value2(out.joints3d).to_owned();
                let v = g.value2(out.coarse_vertices).to_owned();
                ndarray::concatenate(ndarray::Axis(0), &[j.view(), v.view()]).unwrap()
            };
            coords
        };
        let base = run(&tokens);

        // random permutation of the 62 rows
        let mut perm: Vec<usize> = (0..62).collect();
        for i in (1..62).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut permuted = Array2::zeros((62, 19));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..19 {
                permuted[[dst, c]] = tokens[[src, c]];
            }
        }
        let out_p = run(&permuted);
        let mut max = 0.0f64;
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                max = max.max((out_p[[dst, c]] - base[[src, c]]).abs());
            }
        }
        assert!(max < 1e-9, "equivariance violation {max}");
    }

    #[test]
    fn upsample_roundtrip_and_zero_behavior() {
        let body = build_default_body(BodyPreset::Desk);
        let topo = build_topology(&body, 48).unwrap();
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        register_params(&mut store, &cfg, 19, &topo.downsample, &mut rng).unwrap();

        let coarse_rest = topo.downsample.apply(&body.template_vertices);
        let mut g = Graph::new();
        let cv = g.constant2(coarse_rest);
        let bound = BoundParams::mount_frozen(&mut g, &store);
        let up = upsample_mesh(&mut g, cv, &bound).unwrap();
        let fine = g.value2(up).to_owned();
        assert_eq!(fine.dim(), (798, 3));
        let mean_dist: f64 = (0..798)
            .map(|i| {
                (0..3)
                    .map(|c| (fine[[i, c]] - body.template_vertices[[i, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 798.0;
        assert!(
            mean_dist < 0.1,
            "roundtrip mean distance {mean_dist} exceeds 0.1"
        );

        let zero = g.constant2(Array2::zeros((48, 3)));
        let up0 = upsample_mesh(&mut g, zero, &bound).unwrap();
        assert!(g.value2(up0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn camera_projection_examples() {
        let cfg = tiny_cfg();
        let store = build_store(&cfg, 19, 20);
        let mut g = Graph::new();
        let bound = BoundParams::mount_frozen(&mut g, &store);

        let mut joints = Array2::zeros((14, 3));
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        joints.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let jv = g.constant2(joints.clone());

        // identity camera
        let cam1 = g.constant1(ndarray::arr1(&[1.0, 0.0, 0.0]));
        let p1 = g.weak_perspective(jv, cam1);
        let got1 = g.value2(p1);
        for i in 0..14 {
            assert_eq!(got1[[i, 0]], joints[[i, 0]]);
            assert_eq!(got1[[i, 1]], joints[[i, 1]]);
        }

        // worked example
        let single = g.constant2(ndarray::arr2(&[[0.5, 0.5, 7.3]]));
        let cam2 = g.constant1(ndarray::arr1(&[2.0, 1.0, -1.0]));
        let p2 = g.weak_perspective(single, cam2);
        let got2 = g.value2(p2);
        assert_eq!(got2[[0, 0]], 2.0);
        assert_eq!(got2[[0, 1]], 0.0);

        // head output has 3 entries and projects all 14 joints
        let mut tokens = Array2::zeros((62, 19));
        tokens.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let tv = g.constant2(tokens);
        let out = encode(&mut g, tv, &bound, &cfg).unwrap();
        let (camera, joints2d) =
            camera_and_project(&mut g, out.joints3d, out.final_tokens, &bound).unwrap();
        assert_eq!(g.value1(camera).len(), 3);
        assert_eq!(g.value2(joints2d).dim(), (14, 2));
    }

    #[test]
    fn fresh_camera_head_starts_near_identity() {
        // final-layer bias carries (1,0,0); random fc weights shift it only
        // by the data-dependent perceptron output
        let cfg = tiny_cfg();
        let store = build_store(&cfg, 19, 22);
        let b2 = store.get("mte.camera.fc2.bias").unwrap();
        assert_eq!(b2[[0]], 1.0);
        assert_eq!(b2[[1]], 0.0);
        assert_eq!(b2[[2]], 0.0);
    }
}
