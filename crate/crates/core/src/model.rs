//! End-to-end model assembly. A forward pass runs the backbone once, feeds the
//! pooled features through the template regressor to get body parameters,
//! materializes the per-image template on the tape, tokenizes it together with
//! the image features, and runs the encoder, upsampler and camera heads.
//!
//! The template regressor's final layer starts at exactly zero so a fresh
//! model emits the rest-pose template for every image.

use std::sync::Arc;

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::body::{
    build_default_body, BodyParams, BodyPreset, RestBody, JOINT_COUNT, PARAM_DIM, POSE_DIM,
    SHAPE_DIM,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{GroundTruth, LossBreakdown, LossWeights, Prediction};
use crate::mte::{self, EncoderConfig};
use crate::nn::{he_init, zeros, BoundParams, ParamStore};
use crate::template::TemplateOutput;
use crate::tokenizer::{build_queries_graph, MvmPlan};
use crate::topology::{build_topology, Topology, KEYPOINT_COUNT};

const REGRESS_HIDDEN: [usize; 2] = [256, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: BodyPreset,
    pub coarse_count: usize,
    pub resolution: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: BodyPreset::Desk,
            coarse_count: 48,
            resolution: 112,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn paper_lineage() -> Self {
        ModelConfig {
            preset: BodyPreset::PaperShape,
            coarse_count: 431,
            resolution: 224,
            backbone: BackboneConfig::paper_width(),
            encoder: EncoderConfig::paper_lineage(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        backbone::validate_resolution(self.resolution, self.resolution)?;
        if self.coarse_count == 0 {
            return Err(Error::config("coarse_count must be positive"));
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        KEYPOINT_COUNT + self.coarse_count
    }

    pub fn feature_width(&self) -> usize {
        self.backbone.feature_channels()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub body: RestBody,
    pub topology: Topology,
    pub store: ParamStore,
}

fn register_regressor<R: Rng>(store: &mut ParamStore, features: usize, rng: &mut R) -> Result<()> {
    let [h1, h2] = REGRESS_HIDDEN;
    store.register("template.regress.fc1.weight", he_init(rng, h1, features))?;
    store.register("template.regress.fc1.bias", zeros(&[h1]))?;
    store.register("template.regress.fc2.weight", he_init(rng, h2, h1))?;
    store.register("template.regress.fc2.bias", zeros(&[h2]))?;
    // zero start: a fresh model regresses theta = 0 for every input
    store.register("template.regress.fc3.weight", zeros(&[PARAM_DIM, h2]))?;
    store.register("template.regress.fc3.bias", zeros(&[PARAM_DIM]))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let body = build_default_body(config.preset);
        let topology = build_topology(&body, config.coarse_count)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        backbone::register_params(&mut store, &config.backbone, &mut rng)?;
        register_regressor(&mut store, config.feature_width(), &mut rng)?;
        mte::register_params(
            &mut store,
            &config.encoder,
            config.feature_width() + 3,
            &topology.downsample,
            &mut rng,
        )?;
        Ok(Model {
            config,
            body,
            topology,
            store,
        })
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        image: Var,
        params: &BoundParams,
        plan: &MvmPlan,
    ) -> Result<ForwardGraph> {
        let features = backbone::extract_features(g, image, params, &self.config.backbone)?;
        let theta = regress_theta(g, features, params)?;
        let template = self.template_graph(g, theta)?;
        let coords = g.concat_rows(template.joints, template.coarse);
        let tokens = build_queries_graph(g, features, coords, plan)?;
        let enc = mte::encode(g, tokens, params, &self.config.encoder)?;
        let fine_vertices = mte::upsample_mesh(g, enc.coarse_vertices, params)?;
        let (camera, joints2d) =
            mte::camera_and_project(g, enc.joints3d, enc.final_tokens, params)?;
        Ok(ForwardGraph {
            theta,
            template,
            joints3d: enc.joints3d,
            coarse_vertices: enc.coarse_vertices,
            fine_vertices,
            camera,
            joints2d,
        })
    }

    /// Body model on the tape: split theta, shape the template, pose it.
    fn template_graph(&self, g: &mut Graph, theta: Var) -> Result<TemplateGraph> {
        let body = &self.body;
        let m = body.vertex_count();
        let column = g.reshape(theta, &[PARAM_DIM, 1]);
        let pose_flat = g.slice_rows(column, 0, POSE_DIM);
        let pose = g.reshape(pose_flat, &[JOINT_COUNT, 3]);
        let shape = g.slice_rows(column, POSE_DIM, SHAPE_DIM);
        let basis = g.constant2(body.shape_basis_flat());
        let rest_template = g.constant2(body.template_vertices.clone());
        let weights = g.constant2(body.skinning_weights.clone());
        let disp_flat = g.matmul(basis, shape);
        let disp = g.reshape(disp_flat, &[m, 3]);
        let shaped = g.add(rest_template, disp);
        let rot = g.rodrigues(pose);
        let parents = Arc::new(body.kinematic_tree.clone());
        let rest = Arc::new(body.rest_joints.clone());
        let chain = g.chain_transforms(rot, parents, rest.clone());
        let adj = g.skin_adjust(chain, rest);
        let per_vertex = g.matmul(weights, adj);
        let fine = g.apply_vertex_transforms(per_vertex, shaped);
        let down = Arc::new(self.topology.downsample.clone());
        let coarse = g.spmat_mul(down, fine);
        let regressor = g.constant2(self.topology.joint_regressor.clone());
        let joints = g.matmul(regressor, coarse);
        Ok(TemplateGraph {
            fine,
            coarse,
            joints,
        })
    }

    pub fn loss_graph(
        &self,
        g: &mut Graph,
        image: Var,
        params: &BoundParams,
        plan: &MvmPlan,
        gt: &GroundTruth,
        weights: &LossWeights,
    ) -> Result<LossGraph> {
        weights.validate()?;
        let f = self.forward_graph(g, image, params, plan)?;
        let gt_coarse = g.constant2(gt.coarse_vertices.clone());
        let gt_fine = g.constant2(gt.fine_vertices.clone());
        let gt_joints = g.constant2(gt.joints3d.clone());
        let gt_joints2d = g.constant2(gt.joints2d.clone());
        let lv_coarse = g.l1_mean(f.coarse_vertices, gt_coarse);
        let lv_fine = g.l1_mean(f.fine_vertices, gt_fine);
        let l_v = g.add(lv_coarse, lv_fine);
        let l_j = g.l1_mean(f.joints3d, gt_joints);
        let regressor = g.constant2(self.topology.joint_regressor.clone());
        let regressed = g.matmul(regressor, f.coarse_vertices);
        let l_j_reg = g.l1_mean(regressed, gt_joints);
        let l_v_temp = g.l1_mean(f.template.coarse, gt_coarse);
        let l_j_proj = g.l1_mean(f.joints2d, gt_joints2d);
        let pose_sum = g.add(l_v, l_j);
        let pose_sum = g.add(pose_sum, l_j_reg);
        let scaled = g.scale(pose_sum, weights.alpha);
        let with_temp = g.add_scaled(scaled, l_v_temp, weights.alpha_temp);
        let total = g.add_scaled(with_temp, l_j_proj, weights.beta);
        Ok(LossGraph {
            forward: f,
            l_v,
            l_j,
            l_j_reg,
            l_v_temp,
            l_j_proj,
            total,
        })
    }

    /// Inference path: no masking, parameters mounted as constants.
    pub fn forward_eval(&self, image: &Array3<f64>) -> Result<EvalOutput> {
        let mut g = Graph::new();
        let iv = g.constant(image.clone().into_dyn());
        let bound = BoundParams::mount_frozen(&mut g, &self.store);
        let plan = MvmPlan::none(self.config.token_count());
        let f = self.forward_graph(&mut g, iv, &bound, &plan)?;
        let prediction = extract_prediction(&g, &f);
        let template = extract_template(&g, &f)?;
        let camera = g.value1(f.camera).to_owned();
        Ok(EvalOutput {
            prediction,
            template,
            camera,
        })
    }
}

/// Pool the feature grid and regress the 82 body parameters.
pub fn regress_theta(g: &mut Graph, features: Var, params: &BoundParams) -> Result<Var> {
    let pooled = g.pool_spatial_mean(features);
    let w1 = params.var("template.regress.fc1.weight")?;
    let b1 = params.var("template.regress.fc1.bias")?;
    let w2 = params.var("template.regress.fc2.weight")?;
    let b2 = params.var("template.regress.fc2.bias")?;
    let w3 = params.var("template.regress.fc3.weight")?;
    let b3 = params.var("template.regress.fc3.bias")?;
    let h = g.affine_vec(w1, pooled, b1);
    let h = g.gelu(h);
    let h = g.affine_vec(w2, h, b2);
    let h = g.gelu(h);
    Ok(g.affine_vec(w3, h, b3))
}

/// Tape handles for the per-image template at every resolution.
pub struct TemplateGraph {
    pub fine: Var,
    pub coarse: Var,
    pub joints: Var,
}

pub struct ForwardGraph {
    pub theta: Var,
    pub template: TemplateGraph,
    pub joints3d: Var,
    pub coarse_vertices: Var,
    pub fine_vertices: Var,
    pub camera: Var,
    pub joints2d: Var,
}

pub struct LossGraph {
    pub forward: ForwardGraph,
    pub l_v: Var,
    pub l_j: Var,
    pub l_j_reg: Var,
    pub l_v_temp: Var,
    pub l_j_proj: Var,
    pub total: Var,
}

impl LossGraph {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_v: g.scalar(self.l_v),
            l_j: g.scalar(self.l_j),
            l_j_reg: g.scalar(self.l_j_reg),
            l_v_temp: g.scalar(self.l_v_temp),
            l_j_proj: g.scalar(self.l_j_proj),
            total: g.scalar(self.total),
        }
    }
}

pub struct EvalOutput {
    pub prediction: Prediction,
    pub template: TemplateOutput,
    pub camera: Array1<f64>,
}

pub fn extract_prediction(g: &Graph, f: &ForwardGraph) -> Prediction {
    Prediction {
        fine_vertices: g.value2(f.fine_vertices).to_owned(),
        coarse_vertices: g.value2(f.coarse_vertices).to_owned(),
        joints3d: g.value2(f.joints3d).to_owned(),
        joints2d: g.value2(f.joints2d).to_owned(),
    }
}

pub fn extract_template(g: &Graph, f: &ForwardGraph) -> Result<TemplateOutput> {
    let theta = BodyParams::from_flat(&g.value1(f.theta).to_vec())?;
    Ok(TemplateOutput {
        theta,
        template_fine: g.value2(f.template.fine).to_owned(),
        template_coarse: g.value2(f.template.coarse).to_owned(),
        template_joints: g.value2(f.template.joints).to_owned(),
    })
}
