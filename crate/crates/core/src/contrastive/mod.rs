//! Contrastive pretraining objective.
//!
//! Rows are corrupted by resampling feature cells from column marginals.
//! Three InfoNCE losses compare clean and corrupted embeddings: row level
//! (a node against its own corrupted view), link level (a foreign key edge
//! against unlinked sources) and context level (a node against the mean of
//! its transformed in-neighbors). Each anchor's loss is divided by
//! `ln(K + 1)` for `K` negatives; anchors without negatives are skipped.

mod corrupt;
mod loss;
mod negatives;

use rand::Rng;

pub use corrupt::{corrupt_rows, corrupt_rows_with, fit_marginals, Corrupted, CorruptionConfig, TableMarginals};
pub use loss::{
    combined_loss, combined_loss_with_plan, context_embedding, context_embeddings, context_loss, context_losses,
    link_loss, link_losses, norm_factor, row_loss, row_losses, ContextEmbeddings, LossTerms,
};
pub use negatives::{
    context_defined, forward_in_neighbors, plan_negatives, sample_negatives, Anchor, AnchorNegatives, NegativeConfig,
    NegativePlan, DEFAULT_N_MAX,
};

use crate::error::Result;
use crate::graph::{Direction, GraphSchema};
use crate::tensor::{ParamId, ParamStore};

pub const CONTRASTIVE_PREFIX: &str = "contrastive.";
const INIT_NOISE: f64 = 0.01;

/// Similarity matrices: one per node type for rows and for contexts, one
/// per forward edge type for links.
#[derive(Clone, Debug)]
pub struct ContrastiveParams {
    pub w_row: Vec<ParamId>,
    pub w_link: Vec<Option<ParamId>>,
    pub w_context: Vec<ParamId>,
}

impl ContrastiveParams {
    /// Identity plus uniform noise in `(-0.01, 0.01)`.
    pub fn new<R: Rng>(graph: &GraphSchema, d: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let w_row = graph
            .node_names
            .iter()
            .map(|n| store.near_identity(format!("contrastive.row.{n}"), d, INIT_NOISE, rng))
            .collect::<Result<_>>()?;
        let w_link = graph
            .edge_types
            .iter()
            .map(|e| match e.direction {
                Direction::Forward => store
                    .near_identity(format!("contrastive.link.{}", e.name), d, INIT_NOISE, rng)
                    .map(Some),
                Direction::Reverse => Ok(None),
            })
            .collect::<Result<_>>()?;
        let w_context = graph
            .node_names
            .iter()
            .map(|n| store.near_identity(format!("contrastive.context.{n}"), d, INIT_NOISE, rng))
            .collect::<Result<_>>()?;
        Ok(ContrastiveParams {
            w_row,
            w_link,
            w_context,
        })
    }
}
