//! Image feature extractor: four stride-2 convolution stages followed by an
//! adaptive average pool onto a 7x7 grid. The downstream pipeline only
//! depends on the C x 7 x 7 output contract, so the extractor stays small.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{he_init, zeros, BoundParams, ParamStore};

pub const FEATURE_GRID: usize = 7;
const STAGES: usize = 4;
const TOTAL_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel widths of the four stages; the last is the feature width C.
    pub widths: [usize; STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [16, 32, 64, 128],
        }
    }
}

impl BackboneConfig {
    pub fn paper_width() -> Self {
        BackboneConfig {
            widths: [16, 32, 64, 2048],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[STAGES - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        Ok(())
    }
}

/// Input resolutions must survive four halvings and still cover the 7x7 pool.
pub fn validate_resolution(h: usize, w: usize) -> Result<()> {
    for (name, v) in [("height", h), ("width", w)] {
        if v % TOTAL_STRIDE != 0 || v / TOTAL_STRIDE < FEATURE_GRID {
            return Err(Error::contract(format!(
                "image {name} {v} unsupported: must be a multiple of {TOTAL_STRIDE} and at least {}",
                TOTAL_STRIDE * FEATURE_GRID
            )));
        }
    }
    Ok(())
}

fn param_name(stage: usize, kind: &str) -> String {
    format!("backbone.conv{stage}.{kind}")
}

pub fn register_params<R: Rng>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut cin = 1usize;
    for (stage, &cout) in cfg.widths.iter().enumerate() {
        store.register(&param_name(stage, "weight"), he_init(rng, cout, cin * 9))?;
        store.register(&param_name(stage, "bias"), zeros(&[cout]))?;
        cin = cout;
    }
    Ok(())
}

/// Build the feature extractor on the tape: image (1,H,W) -> features (C,7,7).
pub fn extract_features(
    g: &mut Graph,
    image: Var,
    params: &BoundParams,
    cfg: &BackboneConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (c, h, w) = g.value3(image).dim();
    if c != 1 {
        return Err(Error::contract(format!("expected 1-channel image, got {c}")));
    }
    validate_resolution(h, w)?;
    let mut x = image;
    for stage in 0..STAGES {
        let wv = params.var(&param_name(stage, "weight"))?;
        let bv = params.var(&param_name(stage, "bias"))?;
        x = g.conv2d(x, wv, bv, 3, 2, 1);
        x = g.gelu(x);
    }
    Ok(g.avg_pool_grid(x, FEATURE_GRID, FEATURE_GRID))
}

/// Plain evaluation helper: run the extractor on a frozen tape and return the
/// feature grid values.
pub fn extract_features_eval(
    image: &Array3<f64>,
    store: &ParamStore,
    cfg: &BackboneConfig,
) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let x = g.constant(image.clone().into_dyn());
    let params = BoundParams::mount_frozen(&mut g, store);
    let out = extract_features(&mut g, x, &params, cfg)?;
    Ok(g.value3(out).to_owned())
}
