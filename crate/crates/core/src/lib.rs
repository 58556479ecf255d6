//! Registry-driven toolkit for training, evaluating and serving small
//! image-text models.

pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod optim;
pub mod processors;
pub mod registry;
pub mod resources;
pub mod runners;
pub mod tasks;

pub use config::{build_run_config, build_run_config_from_tree, ConfigTree, RunConfig, Value};
pub use data::{build_dataset, load_dataset, DatasetSplits};
pub use error::{Error, Result};
pub use models::{load_model, FeatureBundle, FeatureMode, Model, ModelBundle};
pub use registry::{Namespace, Registry};

/// Environment variable overriding the dataset and checkpoint cache root.
pub const CACHE_ROOT_ENV: &str = "MMKIT_CACHE_ROOT";

impl Registry {
    /// A registry with every built-in component registered. The cache root
    /// comes from `MMKIT_CACHE_ROOT`, defaulting to `.cache/mmkit`.
    pub fn builtin() -> Result<Self> {
        let root = std::env::var(CACHE_ROOT_ENV).unwrap_or_else(|_| ".cache/mmkit".to_string());
        Self::builtin_with_cache(&root)
    }

    pub fn builtin_with_cache(cache_root: &str) -> Result<Self> {
        let mut r = Registry::new();
        r.register_value("library_default_config", &resources::builtin("configs/default.yaml"))?;
        r.register_value("cache_root", cache_root)?;
        processors::register_builtins(&mut r)?;
        data::register_builtins(&mut r)?;
        models::register_builtins(&mut r)?;
        optim::register_builtins(&mut r)?;
        tasks::register_builtins(&mut r)?;
        runners::register_builtins(&mut r)?;
        Ok(r)
    }
}
