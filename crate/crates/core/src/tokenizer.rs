//! Query assembly: every joint/vertex query is the pooled image feature
//! vector with that query's template 3D coordinate appended, giving K + M_c
//! tokens of width C + 3. Masked Vertex Modeling zeroes the feature segment
//! of a seeded random subset of rows while keeping coordinates intact.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::template::TemplateOutput;
use crate::topology::KEYPOINT_COUNT;

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// (K + M_c) x (C + 3).
    pub tokens: Array2<f64>,
    pub feature_width: usize,
    pub mask_flags: Vec<bool>,
}

impl QuerySet {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn vertex_count(&self) -> usize {
        self.token_count() - KEYPOINT_COUNT
    }
}

/// Which rows MVM masks. Selection is uniform without replacement, exactly
/// floor(ratio * token_count) rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MvmPlan {
    pub masked: Vec<bool>,
}

impl MvmPlan {
    pub fn sample(token_count: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
            return Err(Error::contract(format!(
                "mask ratio must lie in [0,1], got {ratio}"
            )));
        }
        let count = (ratio * token_count as f64).floor() as usize;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // partial Fisher-Yates: first `count` entries are the selection
        let mut idx: Vec<usize> = (0..token_count).collect();
        for i in 0..count {
            let j = rng.gen_range(i..token_count);
            idx.swap(i, j);
        }
        let mut masked = vec![false; token_count];
        for &i in &idx[..count] {
            masked[i] = true;
        }
        Ok(MvmPlan { masked })
    }

    pub fn none(token_count: usize) -> Self {
        MvmPlan {
            masked: vec![false; token_count],
        }
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Pooled per-channel mean of the 7x7 feature grid, replicated once per
/// query row.
pub fn make_base_queries(features: &Array3<f64>, coarse_count: usize) -> Result<Array2<f64>> {
    let (c, h, w) = features.dim();
    if h != 7 || w != 7 {
        return Err(Error::contract(format!(
            "feature grid must be 7x7, got {h}x{w}"
        )));
    }
    let t = KEYPOINT_COUNT + coarse_count;
    let mut pooled = vec![0.0f64; c];
    for (ci, p) in pooled.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += features[[ci, i, j]];
            }
        }
        *p = acc / (h * w) as f64;
    }
    let mut out = Array2::zeros((t, c));
    for mut row in out.rows_mut() {
        for (ci, &p) in pooled.iter().enumerate() {
            row[ci] = p;
        }
    }
    Ok(out)
}

/// Append template coordinates: joint rows first, vertex rows after.
pub fn attach_coordinates(base: &Array2<f64>, template: &TemplateOutput) -> Result<QuerySet> {
    let t = base.nrows();
    let c = base.ncols();
    let m_c = template.template_coarse.nrows();
    if t != KEYPOINT_COUNT + m_c {
        return Err(Error::contract(format!(
            "base has {t} rows, template implies {}",
            KEYPOINT_COUNT + m_c
        )));
    }
    let mut tokens = Array2::zeros((t, c + 3));
    for i in 0..t {
        for j in 0..c {
            tokens[[i, j]] = base[[i, j]];
        }
        for k in 0..3 {
            tokens[[i, c + k]] = if i < KEYPOINT_COUNT {
                template.template_joints[[i, k]]
            } else {
                template.template_coarse[[i - KEYPOINT_COUNT, k]]
            };
        }
    }
    Ok(QuerySet {
        tokens,
        feature_width: c,
        mask_flags: vec![false; t],
    })
}

/// Zero the feature segment of the planned rows; coordinates are preserved.
pub fn apply_mvm(queries: &QuerySet, ratio: f64, seed: u64) -> Result<QuerySet> {
    let plan = MvmPlan::sample(queries.token_count(), ratio, seed)?;
    Ok(apply_plan(queries, &plan))
}

pub fn apply_plan(queries: &QuerySet, plan: &MvmPlan) -> QuerySet {
    let mut out = queries.clone();
    for (i, &m) in plan.masked.iter().enumerate() {
        if m {
            for j in 0..queries.feature_width {
                out.tokens[[i, j]] = 0.0;
            }
            out.mask_flags[i] = true;
        }
    }
    out
}

/// Tape-side assembly: pooled features replicated, masked by the plan, and
/// concatenated with the (differentiable) template coordinates.
pub fn build_queries_graph(
    g: &mut Graph,
    features: Var,
    coords: Var,
    plan: &MvmPlan,
) -> Result<Var> {
    let t = g.value2(coords).nrows();
    if g.value2(coords).ncols() != 3 {
        return Err(Error::contract("coords must be (t,3)"));
    }
    if plan.masked.len() != t {
        return Err(Error::contract(format!(
            "mask plan covers {} rows, token count is {t}",
            plan.masked.len()
        )));
    }
    let c = g.value3(features).dim().0;
    let pooled = g.pool_spatial_mean(features);
    let base = g.repeat_row(pooled, t);
    let mut mask = Array2::ones((t, c));
    for (i, &m) in plan.masked.iter().enumerate() {
        if m {
            for j in 0..c {
                mask[[i, j]] = 0.0;
            }
        }
    }
    let maskv = g.constant2(mask);
    let masked = g.mul_elem(base, maskv);
    Ok(g.concat_cols(masked, coords))
}
