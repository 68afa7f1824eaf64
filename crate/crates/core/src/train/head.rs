use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BatchNorm, BnUpdate, Linear, Mode};
use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Var};

use super::task::LabelKind;

pub const HEAD_PREFIX: &str = "head.";

/// `linear -> batch norm -> relu -> linear`, one raw output per entity.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub hidden: Linear,
    pub bn: BatchNorm,
    pub out: Linear,
}

impl TaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(TaskHead {
            hidden: Linear::new(store, "head.hidden", input, hidden, rng)?,
            bn: BatchNorm::new(store, "head.bn", hidden)?,
            out: Linear::new(store, "head.out", hidden, 1, rng)?,
        })
    }

    /// Logits (binary) or normalized predictions (regression), `n x 1`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let n = tape.value(x).rows();
        let y = self.hidden.forward(tape, store, Some(x), n)?;
        let y = self.bn.forward(tape, store, y, mode, updates)?;
        let y = tape.relu(y);
        self.out.forward(tape, store, Some(y), n)
    }
}

/// Task head description stored with fine-tuned checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub task: String,
    pub entity_table: String,
    pub label_kind: LabelKind,
    pub head_hidden: usize,
    /// Train-split statistics used to normalize regression targets.
    pub label_mean: f64,
    pub label_std: f64,
}
