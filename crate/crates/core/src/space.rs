//! The finite set of action labels every module output is reduced to.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::canonical::{Canonical, CanonicalWriter, Digest};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("decision space has no labels")]
    Empty,
    #[error("duplicate label {0:?}")]
    Duplicate(String),
    #[error("safe default {0:?} is not a label of the decision space")]
    UnknownSafeDefault(String),
    #[error("label {0:?} is not in the decision space")]
    UnknownLabel(String),
}

/// A validated decision label. Only obtainable through [`DecisionSpace::value`].
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DecisionValue(Arc<str>);

impl DecisionValue {
    pub fn label(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for DecisionValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for DecisionValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Canonical for DecisionValue {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.str(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionSpace {
    labels: Vec<DecisionValue>,
    safe_default: usize,
    by_digest: BTreeMap<Digest, usize>,
}

impl DecisionSpace {
    pub fn new<S: AsRef<str>>(labels: &[S], safe_default: &str) -> Result<Self, SpaceError> {
        if labels.is_empty() {
            return Err(SpaceError::Empty);
        }
        let mut values = Vec::with_capacity(labels.len());
        let mut by_digest = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            let l = l.as_ref();
            if values.iter().any(|v: &DecisionValue| v.label() == l) {
                return Err(SpaceError::Duplicate(l.to_string()));
            }
            let v = DecisionValue(Arc::from(l));
            by_digest.insert(v.digest(), i);
            values.push(v);
        }
        let safe_default = values
            .iter()
            .position(|v| v.label() == safe_default)
            .ok_or_else(|| SpaceError::UnknownSafeDefault(safe_default.to_string()))?;
        Ok(Self {
            labels: values,
            safe_default,
            by_digest,
        })
    }

    pub fn value(&self, label: &str) -> Result<DecisionValue, SpaceError> {
        self.labels
            .iter()
            .find(|v| v.label() == label)
            .cloned()
            .ok_or_else(|| SpaceError::UnknownLabel(label.to_string()))
    }

    pub fn contains(&self, value: &DecisionValue) -> bool {
        self.labels.contains(value)
    }

    pub fn labels(&self) -> &[DecisionValue] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn safe_default(&self) -> &DecisionValue {
        &self.labels[self.safe_default]
    }

    /// Reverse lookup used when only a digest announcement was received.
    pub fn value_for_digest(&self, d: &Digest) -> Option<&DecisionValue> {
        self.by_digest.get(d).map(|&i| &self.labels[i])
    }
}
