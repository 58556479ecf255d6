//! Namespaced name → constructor catalog.
//!
//! Every buildable component (models, tasks, processors, dataset builders,
//! LR schedulers and runners) is registered under a name so configuration
//! files can refer to it. Handles are opaque: the registry stores them and
//! hands them back, it never calls them.

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    Model,
    Task,
    Processor,
    DatasetBuilder,
    LrScheduler,
    Runner,
}

impl Namespace {
    pub const ALL: [Namespace; 6] = [
        Namespace::Model,
        Namespace::Task,
        Namespace::Processor,
        Namespace::DatasetBuilder,
        Namespace::LrScheduler,
        Namespace::Runner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Model => "model",
            Namespace::Task => "task",
            Namespace::Processor => "processor",
            Namespace::DatasetBuilder => "dataset_builder",
            Namespace::LrScheduler => "lr_scheduler",
            Namespace::Runner => "runner",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Namespace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Namespace::ALL
            .into_iter()
            .find(|ns| ns.as_str() == s)
            .ok_or_else(|| Error::InvalidNamespace(s.to_string()))
    }
}

/// Opaque constructor handle.
pub type Handle = Arc<dyn Any + Send + Sync>;

#[derive(Default)]
pub struct Registry {
    tables: [BTreeMap<String, Handle>; 6],
    values: BTreeMap<String, String>,
    frozen: AtomicBool,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for ns in Namespace::ALL {
            m.entry(&ns.as_str(), &self.list_names(ns));
        }
        m.entry(&"values", &self.values).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<T: Any + Send + Sync>(
        &mut self,
        namespace: Namespace,
        name: &str,
        constructor: T,
    ) -> Result<()> {
        self.register_handle(namespace, name, Arc::new(constructor))
    }

    pub fn register_handle(&mut self, namespace: Namespace, name: &str, handle: Handle) -> Result<()> {
        if name.is_empty() {
            return Err(Error::EmptyName);
        }
        if self.frozen.load(Ordering::Relaxed) {
            return Err(Error::RegistryFrozen {
                namespace: namespace.to_string(),
                name: name.to_string(),
            });
        }
        let table = &mut self.tables[namespace.index()];
        if table.contains_key(name) {
            return Err(Error::DuplicateName {
                namespace: namespace.to_string(),
                name: name.to_string(),
            });
        }
        table.insert(name.to_string(), handle);
        Ok(())
    }

    /// String-namespace variant used by configuration and the CLI.
    pub fn register_in<T: Any + Send + Sync>(&mut self, namespace: &str, name: &str, constructor: T) -> Result<()> {
        self.register(namespace.parse()?, name, constructor)
    }

    pub fn lookup(&self, namespace: Namespace, name: &str) -> Result<Handle> {
        self.frozen.store(true, Ordering::Relaxed);
        match self.tables[namespace.index()].get(name) {
            Some(h) => Ok(Arc::clone(h)),
            None => Err(Error::NotFound {
                namespace: namespace.to_string(),
                name: name.to_string(),
                suggestions: self.suggest(namespace, name),
            }),
        }
    }

    /// Looks up `name` and downcasts the handle to its concrete constructor type.
    pub fn get<T: Any + Send + Sync>(&self, namespace: Namespace, name: &str) -> Result<Arc<T>> {
        self.lookup(namespace, name)?
            .downcast::<T>()
            .map_err(|_| Error::HandleType {
                namespace: namespace.to_string(),
                name: name.to_string(),
            })
    }

    pub fn contains(&self, namespace: Namespace, name: &str) -> bool {
        self.tables[namespace.index()].contains_key(name)
    }

    pub fn list_names(&self, namespace: Namespace) -> Vec<String> {
        self.tables[namespace.index()].keys().cloned().collect()
    }

    pub fn list_names_in(&self, namespace: &str) -> Result<Vec<String>> {
        Ok(self.list_names(namespace.parse()?))
    }

    pub fn register_value(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::EmptyName);
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get_value(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::KeyMissing(key.to_string()))
    }

    /// Up to three registered names closest to `name` by Levenshtein distance,
    /// ties broken lexicographically.
    fn suggest(&self, namespace: Namespace, name: &str) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> = self.tables[namespace.index()]
            .keys()
            .map(|k| (strsim::levenshtein(k, name), k))
            .collect();
        scored.sort();
        scored.into_iter().take(3).map(|(_, k)| k.clone()).collect()
    }
}
