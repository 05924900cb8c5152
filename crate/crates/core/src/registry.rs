//! Name-keyed registries for interchangeable implementations.
//!
//! Recurrence kernels, fusion strategies, optimizers and benchmark workloads
//! are all chosen at run time from a config string through one of these.

use crate::error::{Error, Result};

pub struct Registry<F> {
    kind: &'static str,
    entries: Vec<(&'static str, F)>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Register `factory` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &'static str, factory: F) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name, factory)),
        }
        self
    }

    pub fn with(mut self, name: &'static str, factory: F) -> Self {
        self.register(name, factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replace_and_lookup() {
        let mut r: Registry<fn() -> u32> = Registry::new("widget");
        r.register("a", || 1)
            .register("b", || 2)
            .register("a", || 3);
        assert_eq!(r.names(), ["a", "b"]);
        assert_eq!((r.get("a").unwrap())(), 3);
        let err = r.get("zzz").err().unwrap().to_string();
        assert!(err.contains("widget") && err.contains("a, b"), "{err}");
    }
}
