//! The full Siamese change-detection network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, Deo, DiffPyramid, Prediction, PredictionHead};
use crate::encoder::{BackboneConfig, Encoder, FeaturePyramid};
use crate::error::{shape_mismatch, Error, Result};
use crate::fs_relation::{FsRelation, RelationEnhancedPyramid, RelationOutput};
use crate::graph::{Graph, Var};
use crate::nn::{self, Ctx, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Channel width of the upsampling/aggregation paths.
    pub decoder_dim: usize,
    /// Channel width of the fusion conv and first deconvolution.
    pub head_dim: usize,
    /// Running-statistics momentum of every batch norm.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder_dim: 64,
            head_dim: 64,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.decoder_dim == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig(
                "decoder_dim and head_dim must be positive".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidConfig("bn_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Handles to every intermediate of a forward pass. Branch tensors (pyramid,
/// relation output, aggregated features) stack the first image of each pair
/// in items `0..n` and the second in `n..2n`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub batch: usize,
    pub pyramid: FeaturePyramid,
    pub relation: RelationOutput,
    pub enhanced_t1: RelationEnhancedPyramid,
    pub enhanced_t2: RelationEnhancedPyramid,
    pub diff: DiffPyramid,
    /// `M^1` and `M^2` stacked.
    pub aggregated: Var,
    /// `t = |M^1 - M^2|`.
    pub change: Var,
    /// `deo(C)`.
    pub diff_decoded: Var,
    /// `T = [t, deo(C)]`.
    pub fused: Var,
    pub prediction: Prediction,
}

#[derive(Debug, Clone)]
pub struct HsoNet {
    cfg: ModelConfig,
    encoder: Encoder,
    relation: FsRelation,
    branch_deo: Deo,
    diff_deo: Deo,
    head: PredictionHead,
}

impl HsoNet {
    pub fn new<F: Scalar, R: rand::Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.backbone.pyramid_dim;
        let encoder = Encoder::new(store, &cfg.backbone, rng)?;
        let relation = FsRelation::new(store, d, rng);
        let branch_deo = Deo::new(store, "decoder.branch", d, cfg.decoder_dim, rng);
        let diff_deo = Deo::new(store, "decoder.diff", d, cfg.decoder_dim, rng);
        let head = PredictionHead::new(store, 2 * cfg.decoder_dim, cfg.head_dim, rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            relation,
            branch_deo,
            diff_deo,
            head,
        })
    }

    /// Builds the network with a fresh parameter store seeded by `seed`.
    pub fn init<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn relation(&self) -> &FsRelation {
        &self.relation
    }

    pub fn branch_decoder(&self) -> &Deo {
        &self.branch_deo
    }

    pub fn diff_decoder(&self) -> &Deo {
        &self.diff_deo
    }

    /// Full pass on `[n, 3, h, w]` image batches of the two dates.
    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, t1: Var, t2: Var) -> Result<ForwardOutput> {
        let (s1, s2) = (cx.graph.value(t1).shape(), cx.graph.value(t2).shape());
        if s1 != s2 {
            return Err(shape_mismatch("image pair", s1, s2));
        }
        let n = s1[0];
        let both = cx.graph.concat_batch(&[t1, t2])?;
        let pyramid = self.encoder.forward(cx, both)?;
        let relation = self.relation.forward(cx, &pyramid)?;
        let mut first = relation.enhanced.levels;
        let mut second = relation.enhanced.levels;
        for i in 0..4 {
            first[i] = cx.graph.slice_batch(relation.enhanced.levels[i], 0, n)?;
            second[i] = cx.graph.slice_batch(relation.enhanced.levels[i], n, 2 * n)?;
        }
        let enhanced_t1 = RelationEnhancedPyramid { levels: first };
        let enhanced_t2 = RelationEnhancedPyramid { levels: second };
        let diff = decoder::fuse_level_diff(cx, &enhanced_t1, &enhanced_t2)?;

        let aggregated = self.branch_deo.forward(cx, relation.enhanced.levels)?;
        let m1 = cx.graph.slice_batch(aggregated, 0, n)?;
        let m2 = cx.graph.slice_batch(aggregated, n, 2 * n)?;
        let change = decoder::branch_diff(cx, m1, m2)?;
        let diff_decoded = self.diff_deo.forward(cx, diff.levels)?;
        let fused = decoder::skip_concat(cx, change, diff_decoded)?;
        let prediction = self.head.forward(cx, fused)?;
        Ok(ForwardOutput {
            batch: n,
            pyramid,
            relation,
            enhanced_t1,
            enhanced_t2,
            diff,
            aggregated,
            change,
            diff_decoded,
            fused,
            prediction,
        })
    }

    /// Inference helper: change probabilities `[n, 1, h, w]` in eval mode.
    pub fn predict<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        t1: Tensor<F>,
        t2: Tensor<F>,
    ) -> Result<Tensor<F>> {
        let mut graph = Graph::new();
        let mut cx = Ctx::new(&mut graph, store, Mode::Eval);
        let a = cx.graph.input(t1);
        let b = cx.graph.input(t2);
        let out = self.forward(&mut cx, a, b)?;
        Ok(graph.value(out.prediction.probs).clone())
    }

    pub fn bn_momentum<F: Scalar>(&self) -> F {
        F::of(self.cfg.bn_momentum)
    }

    /// Folds the batch-norm statistics recorded in `graph` into `store`.
    pub fn commit_bn_stats<F: Scalar>(&self, graph: &mut Graph<F>, store: &mut ParamStore<F>) {
        let updates = graph.take_bn_updates();
        nn::apply_bn_updates(store, &updates, self.bn_momentum());
    }
}
