//! Name-keyed registries for interchangeable strategies.
//!
//! Scene geometry families and NMS threshold policies are each selected at
//! runtime by name (from config files or CLI flags). A [`Registry`] maps
//! those names to shared trait objects.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A string-keyed collection of strategy objects of one kind.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `strategy` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, strategy: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Registered names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
