use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique handle identifying a parameter across tapes and optimizer
/// state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named, possibly frozen, model weight.
///
/// `grad` is only ever populated for unfrozen parameters.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing also drops any stored gradient.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            self.grad = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Gives the parameter a new identity, used when a model is duplicated
    /// and both copies must be tracked independently.
    pub fn renew_id(&mut self) {
        self.id = ParamId::fresh();
    }
}
