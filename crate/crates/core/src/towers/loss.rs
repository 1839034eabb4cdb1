use crate::data::PADDING;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Items competing with the target in the tower softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateScope {
    /// Every item in the vocabulary.
    Full,
    /// The target plus these negatives.
    Sampled(Vec<u32>),
}

/// Softmax cross-entropy of `e_u: [1, d]` against the item table
/// `[items + 1, d]` (row 0 is padding and never a candidate).
pub fn tower_loss<F: Scalar>(g: &mut Graph<F>, e_u: Var, table: Var, target: u32, scope: &CandidateScope) -> Result<Var> {
    let items = g.shape(table)[0] - 1;
    if target == PADDING || target as usize > items {
        return Err(Error::Invalid(format!("target item {target} is not in the candidate scope")));
    }
    match scope {
        CandidateScope::Full => {
            let scores = g.matmul_nt(e_u, table)?;
            let logits = g.slice(scores, 1, 1, items + 1)?;
            g.cross_entropy(logits, target as usize - 1)
        }
        CandidateScope::Sampled(negatives) => {
            let mut idx = Vec::with_capacity(negatives.len() + 1);
            idx.push(target as usize);
            idx.extend(negatives.iter().map(|&n| n as usize));
            let cand = g.embedding(table, &idx, Some(PADDING as usize))?;
            let logits = g.matmul_nt(e_u, cand)?;
            g.cross_entropy(logits, 0)
        }
    }
}

/// Scalar values of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_tower: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn new(l_tower: f64, l_kl: f64, lambda: f64) -> Self {
        Self {
            l_tower,
            l_kl,
            l_total: l_tower + lambda * l_kl,
            lambda,
        }
    }
}

/// `l_tower + lambda * l_kl` on the graph; without `l_kl` it is `l_tower`.
pub fn total_loss<F: Scalar>(g: &mut Graph<F>, l_tower: Var, l_kl: Option<Var>, lambda: f64) -> Result<Var> {
    match l_kl {
        Some(kl) => {
            let weighted = g.scale(kl, F::of(lambda))?;
            g.add(l_tower, weighted)
        }
        None => Ok(l_tower),
    }
}
