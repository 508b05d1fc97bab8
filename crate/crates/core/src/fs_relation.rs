//! Foreground-scene relation gating.
//!
//! Each pyramid level is projected (`Q_i`, 1x1 conv-BN-ReLU), a scene vector
//! `SV` is pooled from the deepest level, and the per-pixel inner product
//! `r_i = <SV, Q_i>` gates a second re-encoding of the level:
//! `R_i = reencode(P_i) * sigmoid(r_i)`. One `SV` serves all four levels of
//! a branch.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{shape_mismatch, Result};
use crate::graph::Var;
use crate::nn::{ConvBn, Ctx, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectedFeatures {
    pub levels: [Var; 4],
}

/// Relation maps `r_1..r_4`, each `[n, 1, h_i, w_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationMaps {
    pub levels: [Var; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationEnhancedPyramid {
    pub levels: [Var; 4],
}

/// Every intermediate of one relation pass, for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationOutput {
    pub projected: ProjectedFeatures,
    /// `[n, d]`, one row per image.
    pub scene: Var,
    pub relations: RelationMaps,
    pub enhanced: RelationEnhancedPyramid,
}

#[derive(Debug, Clone)]
pub struct FsRelation {
    project: Vec<ConvBn>,
    reencode: Vec<ConvBn>,
    scene: Linear,
}

impl FsRelation {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Self {
        let project = (1..=4)
            .map(|i| ConvBn::new(store, &format!("relation.project{i}"), dim, dim, 1, 1, true, rng))
            .collect();
        let reencode = (1..=4)
            .map(|i| ConvBn::new(store, &format!("relation.reencode{i}"), dim, dim, 1, 1, true, rng))
            .collect();
        let scene = Linear::new(store, "relation.scene", dim, dim, rng);
        Self {
            project,
            reencode,
            scene,
        }
    }

    pub fn scene_projection(&self) -> &Linear {
        &self.scene
    }

    pub fn projection(&self, level: usize) -> &ConvBn {
        &self.project[level]
    }

    pub fn reencoder(&self, level: usize) -> &ConvBn {
        &self.reencode[level]
    }

    pub fn project_features<F: Scalar>(
        &self,
        cx: &mut Ctx<'_, F>,
        p: &FeaturePyramid,
    ) -> Result<ProjectedFeatures> {
        let mut levels = p.levels;
        for (i, proj) in self.project.iter().enumerate() {
            levels[i] = proj.forward(cx, p.levels[i])?;
        }
        Ok(ProjectedFeatures { levels })
    }

    /// Global average pool of the deepest level followed by a linear map.
    pub fn scene_vector<F: Scalar>(&self, cx: &mut Ctx<'_, F>, p4: Var) -> Result<Var> {
        let pooled = cx.graph.global_avg_pool(p4)?;
        self.scene.forward(cx, pooled)
    }

    pub fn relation_map<F: Scalar>(&self, cx: &mut Ctx<'_, F>, scene: Var, q: Var) -> Result<Var> {
        cx.graph.channel_dot(scene, q)
    }

    /// `reencode_level(p) * sigmoid(r)`, the gate broadcast over channels.
    pub fn enhance<F: Scalar>(
        &self,
        cx: &mut Ctx<'_, F>,
        level: usize,
        p: Var,
        r: Var,
    ) -> Result<Var> {
        let e = self.reencode[level].forward(cx, p)?;
        let (ev, rv) = (cx.graph.value(e), cx.graph.value(r));
        let (n, _, h, w) = ev.dims4();
        if rv.shape() != [n, 1, h, w] {
            return Err(shape_mismatch("enhance", rv.shape(), &[n, 1, h, w]));
        }
        let gate = cx.graph.sigmoid(r);
        cx.graph.gate(e, gate)
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, p: &FeaturePyramid) -> Result<RelationOutput> {
        let projected = self.project_features(cx, p)?;
        let scene = self.scene_vector(cx, p.levels[3])?;
        let mut relations = projected.levels;
        let mut enhanced = projected.levels;
        for i in 0..4 {
            relations[i] = self.relation_map(cx, scene, projected.levels[i])?;
            enhanced[i] = self.enhance(cx, i, p.levels[i], relations[i])?;
        }
        Ok(RelationOutput {
            projected,
            scene,
            relations: RelationMaps { levels: relations },
            enhanced: RelationEnhancedPyramid { levels: enhanced },
        })
    }
}
