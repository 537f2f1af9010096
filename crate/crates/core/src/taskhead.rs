//! Linear task predictor over the annotated concept scores.

use std::fmt::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{ParamStore, Var};
use crate::nn::{Ctx, Dense};

/// Affine map from the first `n_annotated` scores to `classes` logits,
/// registered as `head.h`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub h: Dense,
    pub n_annotated: usize,
    pub classes: usize,
}

impl TaskHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, n_annotated: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Invalid(format!("need at least two classes, got {classes}")));
        }
        Ok(Self {
            h: Dense::new(store, rng, "head.h", n_annotated, classes),
            n_annotated,
            classes,
        })
    }

    /// Logits from `scores (B, N)`; scores past `n_annotated` are not read.
    pub fn predict(&self, ctx: &mut Ctx, scores: Var) -> Result<Var> {
        let annotated = ctx.g.narrow(scores, 0, self.n_annotated)?;
        self.h.forward(ctx, annotated)
    }

    pub fn probs(&self, ctx: &mut Ctx, logits: Var) -> Result<Var> {
        ctx.g.softmax(logits)
    }

    /// Weights as CSV: one row per annotated concept plus a bias row.
    pub fn weights_csv(&self, store: &ParamStore, concept_names: &[String]) -> Result<String> {
        if concept_names.len() != self.n_annotated {
            return Err(Error::Invalid(format!(
                "{} concept names for {} annotated concepts",
                concept_names.len(),
                self.n_annotated
            )));
        }
        let w = store.get(self.h.w).data();
        let b = store.get(self.h.b).data();
        let mut out = String::from("concept");
        for c in 0..self.classes {
            write!(out, ",class_{c}").unwrap();
        }
        out.push('\n');
        for (i, name) in concept_names.iter().enumerate() {
            out.push_str(name);
            for c in 0..self.classes {
                write!(out, ",{}", w[c * self.n_annotated + i]).unwrap();
            }
            out.push('\n');
        }
        out.push_str("bias");
        for v in b {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
        Ok(out)
    }
}

/// Cross-entropy from logits, mean over the batch.
pub fn pred_loss(ctx: &mut Ctx, logits: Var, y: &[usize]) -> Result<Var> {
    ctx.g.cross_entropy(logits, y)
}
