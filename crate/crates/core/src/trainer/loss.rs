//! Composite segmentation loss.

use crate::error::Result;
use crate::numerics::{Graph, Scalar, Var};

/// Which terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub target: bool,
    pub general: bool,
    pub allocation: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        target: true,
        general: true,
        allocation: true,
    };
}

/// One supervised prediction: logits `[N, k]`, targets, optional per-row weights.
pub struct Supervision<'a, T> {
    pub logits: Var,
    pub targets: &'a [usize],
    pub weights: Option<&'a [T]>,
}

/// The individual terms (absent terms are `None`) and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub target: Option<Var>,
    pub general: Option<Var>,
    pub allocation: Option<Var>,
    pub total: Var,
}

/// `L_t + L_g + L_p`, each a mean pixelwise cross-entropy; disabled or missing terms
/// contribute nothing.
pub fn total_loss<T: Scalar>(
    graph: &mut Graph<T>,
    target: Supervision<'_, T>,
    general: Option<Supervision<'_, T>>,
    allocation: Option<Supervision<'_, T>>,
    toggles: LossToggles,
) -> Result<LossTerms> {
    let mut term = |s: Supervision<'_, T>, on: bool| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        graph.cross_entropy(s.logits, s.targets, s.weights).map(Some)
    };
    let lt = term(target, toggles.target)?;
    let lg = match general {
        Some(s) => term(s, toggles.general)?,
        None => None,
    };
    let lp = match allocation {
        Some(s) => term(s, toggles.allocation)?,
        None => None,
    };
    let mut total = None;
    for v in [lt, lg, lp].into_iter().flatten() {
        total = Some(match total {
            None => v,
            Some(acc) => graph.add(acc, v)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => graph.constant(crate::numerics::Tensor::scalar(T::zero())),
    };
    Ok(LossTerms {
        target: lt,
        general: lg,
        allocation: lp,
        total,
    })
}
