//! Per-image learnable template: regressed body parameters are pushed through
//! the parametric body, then materialized at coarse resolution together with
//! the 14 regressed joints. The graph-side regressor lives in the model
//! module; this module owns the template data type and its plain construction.

use ndarray::Array2;

use crate::body::{forward, BodyParams, RestBody};
use crate::error::{Error, Result};
use crate::topology::{downsample, regress_joints, Topology, KEYPOINT_COUNT};

/// Template emitted for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateOutput {
    pub theta: BodyParams,
    pub template_fine: Array2<f64>,
    pub template_coarse: Array2<f64>,
    pub template_joints: Array2<f64>,
}

impl TemplateOutput {
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        let coarse = downsample(&self.template_fine, topo)?;
        let max_c = coarse
            .iter()
            .zip(self.template_coarse.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_c > 1e-9 {
            return Err(Error::contract(format!(
                "template_coarse inconsistent with downsampled fine mesh ({max_c})"
            )));
        }
        let joints = regress_joints(&self.template_coarse, topo)?;
        let max_j = joints
            .iter()
            .zip(self.template_joints.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_j > 1e-9 {
            return Err(Error::contract(format!(
                "template_joints inconsistent with regressed joints ({max_j})"
            )));
        }
        if self.template_joints.dim() != (KEYPOINT_COUNT, 3) {
            return Err(Error::contract("template_joints must be 14 x 3"));
        }
        Ok(())
    }
}

/// Run the body model for theta and materialize the template at all
/// resolutions.
pub fn build_template(
    theta: &BodyParams,
    body: &RestBody,
    topo: &Topology,
) -> Result<TemplateOutput> {
    if topo.fine_count() != body.vertex_count() {
        return Err(Error::contract(format!(
            "topology built for {} vertices, body has {}",
            topo.fine_count(),
            body.vertex_count()
        )));
    }
    let (fine, _joints) = forward(body, theta)?;
    let coarse = downsample(&fine, topo)?;
    let joints14 = regress_joints(&coarse, topo)?;
    Ok(TemplateOutput {
        theta: theta.clone(),
        template_fine: fine,
        template_coarse: coarse,
        template_joints: joints14,
    })
}
