//! Table-filling heads and their binary cross-entropy objective.

use rand::Rng;

use crate::coattention::TaskReps;
use crate::data::{entity_mask, relation_mask, LabelTables};
use crate::error::{Error, Result};
use crate::layers::Mlp2;
use crate::optim::ParamStore;
use crate::tape::{Graph, Var};
use crate::tensor::Real;

/// Per-cell sigmoid outputs, `[n, n, |E|]` and `[n, n, |R|]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLogits {
    pub entity_probs: Var,
    pub relation_probs: Var,
}

/// Entity head (`W_a, b_a, W_b, b_b`) and relation head (`W_c, b_c, W_d, b_d`),
/// each two affine layers with a ReLU between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHeads {
    pub entity: Mlp2,
    pub relation: Mlp2,
}

impl ClassifierHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        feature_width: usize,
        hidden: usize,
        n_entity: usize,
        n_relation: usize,
    ) -> Result<Self> {
        Ok(Self {
            entity: Mlp2::new(store, rng, "head.entity", feature_width, hidden, n_entity)?,
            relation: Mlp2::new(store, rng, "head.relation", feature_width, hidden, n_relation)?,
        })
    }
}

/// `u[i, j] = [g_i; g_j; h_ij^s]` for both streams; the shared slice is
/// left out when `shared` is `None`.
pub fn build_pair_features(g: &mut Graph, reps: TaskReps, shared: Option<Var>) -> Result<(Var, Var)> {
    let mut build = |stream: Var| -> Result<Var> {
        let rows = g.grid_rows(stream)?;
        let cols = g.grid_cols(stream)?;
        match shared {
            Some(s) => g.concat(&[rows, cols, s]),
            None => g.concat(&[rows, cols]),
        }
    };
    let ue = build(reps.ner)?;
    let ur = build(reps.re)?;
    Ok((ue, ur))
}

/// Sigmoid probabilities for every cell and label.
pub fn score_cells(g: &mut Graph, store: &ParamStore, heads: &ClassifierHeads, ue: Var, ur: Var) -> Result<PairLogits> {
    let e = heads.entity.forward(g, store, ue)?;
    let r = heads.relation.forward(g, store, ur)?;
    Ok(PairLogits {
        entity_probs: g.sigmoid(e),
        relation_probs: g.sigmoid(r),
    })
}

/// Entity loss over cells `i <= j`, relation loss over cells `i != j`.
pub fn bce_losses(g: &mut Graph, probs: PairLogits, gold: &LabelTables) -> Result<(Var, Var)> {
    let es = g.shape(probs.entity_probs).to_vec();
    let rs = g.shape(probs.relation_probs).to_vec();
    let ner = g.bce_sum(probs.entity_probs, &gold.entity, &entity_mask(es[0], es[2]))?;
    let re = g.bce_sum(probs.relation_probs, &gold.relation, &relation_mask(rs[0], rs[2]))?;
    Ok((ner, re))
}

/// Unweighted sum of the two task losses. Non-finite parts are an error.
pub fn total_loss(g: &mut Graph, ner: Var, re: Var) -> Result<Var> {
    let (ln, lr): (Real, Real) = (g.value(ner).item(), g.value(re).item());
    if !ln.is_finite() || !lr.is_finite() {
        return Err(Error::NonFiniteLoss { ner: ln, re: lr });
    }
    g.add(ner, re)
}
