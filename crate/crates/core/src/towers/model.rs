use std::str::FromStr;

use super::layers::{lag_bucket, session_encode, EmbeddingTable, SessionEncoder, TargetAttention, UserHead};
use super::loss::{tower_loss, total_loss, CandidateScope};
use crate::data::BehaviorSequence;
use crate::diffusion::{reverse_infer, train_step, DiffusionTarget, NoiseSchedule, UNet};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Model variants compared in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// No diffusion module; the session encoder sees the session alone.
    MixedAttentionOnly,
    /// Diffusion reconstructs the shifted sequence instead of its drift.
    NoDriftPrep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::MixedAttentionOnly, Variant::NoDriftPrep];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MixedAttentionOnly => "mixed_attention_only",
            Variant::NoDriftPrep => "no_drift_prep",
        }
    }

    pub fn uses_diffusion(self) -> bool {
        self != Variant::MixedAttentionOnly
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub items: usize,
    pub dim: usize,
    /// Longest session; the encoder holds `k_max + 1` positions.
    pub k_max: usize,
    pub heads: usize,
    pub layers: usize,
    pub attention_hidden: usize,
    pub variant: Variant,
}

/// Item tower, diffusion module and user tower over one parameter store.
#[derive(Debug, Clone)]
pub struct T2DiffModel {
    pub config: ModelConfig,
    pub embedding: EmbeddingTable,
    pub unet: Option<UNet>,
    pub encoder: SessionEncoder,
    pub attention: TargetAttention,
    pub head: UserHead,
}

/// Graph handles produced for one training example.
#[derive(Debug, Clone)]
pub struct ExampleOutput {
    pub loss: Var,
    pub l_tower: Var,
    pub l_kl: Option<Var>,
    pub similarity: Option<f64>,
    pub user: Var,
}

impl T2DiffModel {
    /// Registers parameters in a fixed order so equal seeds give equal stores.
    pub fn new<F: Scalar>(config: ModelConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Self {
        let d = config.dim;
        let embedding = EmbeddingTable::new(store, config.items, d, rng);
        let unet = config.variant.uses_diffusion().then(|| UNet::new(store, d, rng));
        let encoder = SessionEncoder::new(store, d, config.k_max + 1, config.layers, config.heads, rng);
        let attention = TargetAttention::new(store, d, config.attention_hidden, rng);
        let head = UserHead::new(store, d, rng);
        Self {
            config,
            embedding,
            unet,
            encoder,
            attention,
            head,
        }
    }

    pub fn diffusion_target(&self) -> DiffusionTarget {
        match self.config.variant {
            Variant::NoDriftPrep => DiffusionTarget::Direct,
            _ => DiffusionTarget::Drift,
        }
    }

    pub fn frozen_rows(&self) -> Vec<(ParamId, usize)> {
        self.embedding.frozen_rows()
    }

    /// Time-lag buckets of the history relative to the last input behavior.
    pub fn history_lags(ex: &BehaviorSequence) -> Vec<usize> {
        let reference = ex.timestamps[ex.n() - 1];
        ex.timestamps[..ex.session_start]
            .iter()
            .map(|&t| lag_bucket(reference - t))
            .collect()
    }

    /// `e_u: [1, d]` from the example's inputs and an optional detached `x_hat`.
    pub fn user_tower<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ex: &BehaviorSequence,
        x_hat: Option<Var>,
    ) -> Result<Var> {
        if ex.n() == 0 {
            return Err(Error::Invalid(format!("user {} has no input behaviors", ex.user)));
        }
        let session = self.embedding.lookup(g, store, ex.session())?;
        let valid = vec![true; ex.k()];
        let h_s = session_encode(g, store, &self.encoder, session, x_hat, &valid)?;
        let history = if ex.session_start > 0 {
            Some(self.embedding.lookup(g, store, ex.history())?)
        } else {
            None
        };
        let h_l = self.attention.forward(g, store, history, h_s, &Self::history_lags(ex))?;
        self.head.forward(g, store, h_l, h_s)
    }

    /// Training objective for one example: one-shot diffusion pass on detached
    /// embeddings, then the tower on the detached estimate.
    pub fn example_loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ex: &BehaviorSequence,
        schedule: &NoiseSchedule,
        lambda: f64,
        scope: &CandidateScope,
        rng: &mut Rng,
    ) -> Result<ExampleOutput> {
        let (mut x_hat, mut l_kl, mut similarity) = (None, None, None);
        if let Some(unet) = &self.unet {
            let x = self.embedding.rows(store, ex.sequence())?;
            let next = self.embedding.rows(store, &[ex.target()])?;
            let step = train_step(g, store, unet, &x, &next, rng, schedule, self.diffusion_target())?;
            x_hat = Some(g.constant(step.x_hat));
            l_kl = Some(step.l_kl);
            similarity = step.similarity;
        }
        let user = self.user_tower(g, store, ex, x_hat)?;
        let table = g.param(store, self.embedding.id);
        let l_tower = tower_loss(g, user, table, ex.target(), scope)?;
        let loss = total_loss(g, l_tower, l_kl, lambda)?;
        Ok(ExampleOutput {
            loss,
            l_tower,
            l_kl,
            similarity,
            user,
        })
    }

    /// Inference-time user embedding with the full reverse loop.
    pub fn infer_user<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        ex: &BehaviorSequence,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Tensor<F>> {
        let x_hat = match &self.unet {
            Some(unet) => {
                let x = self.embedding.rows(store, ex.sequence())?;
                Some(reverse_infer(store, unet, &x, rng, schedule, self.diffusion_target())?)
            }
            None => None,
        };
        let mut g = Graph::inference();
        let x_hat = x_hat.map(|t| g.constant(t));
        let e_u = self.user_tower(&mut g, store, ex, x_hat)?;
        Ok(g.value(e_u).clone())
    }

    /// Inner-product scores of items `1..=items`, index `i - 1` for item `i`.
    pub fn score_items<F: Scalar>(&self, store: &ParamStore<F>, e_u: &Tensor<F>) -> Result<Vec<F>> {
        let table = store.value(self.embedding.id);
        let scores = table.matmul(&e_u.transpose()?)?;
        Ok(scores.data()[1..].to_vec())
    }
}
