//! Hierarchical configuration.
//!
//! A run configuration is assembled from five layers, lowest precedence first:
//! library defaults, the model's default config (by `model.arch` and
//! `model.model_type`), each dataset's default config, the user file, and
//! finally `--options dotted.path=value` overrides from the command line.
//! Mappings merge recursively; scalars and lists from the higher layer
//! replace the lower one wholesale.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::resources;

pub type Map = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(Map),
}

impl Value {
    pub fn as_map(&self) -> Option<&Map> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Integers widen to floats; nothing else converts.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "mapping",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => f.write_str(s),
            other => write!(f, "{}", serde_json::to_string(other).map_err(|_| fmt::Error)?),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}
impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}
impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}
impl From<f64> for Value {
    fn from(f: f64) -> Self {
        Value::Float(f)
    }
}
impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

/// Nested configuration mapping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigTree {
    root: Map,
}

impl ConfigTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(root: Map) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Map {
        &self.root
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_empty()
    }

    /// Parses YAML-subset text. `source` is only used in error messages.
    pub fn parse_str(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::new());
        }
        let raw: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| Error::ParseError {
            line: e.location().map(|l| l.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        match convert_yaml(&raw, text)? {
            Value::Map(root) => Ok(Self { root }),
            Value::Null => Ok(Self::new()),
            other => Err(Error::ParseError {
                line: 1,
                message: format!("top level must be a mapping, found {}", other.type_name()),
            }),
        }
    }

    pub fn get(&self, path: &str) -> Option<&Value> {
        let mut parts = path.split('.');
        let mut cur = self.root.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_map()?.get(p)?;
        }
        Some(cur)
    }

    pub fn get_str(&self, path: &str) -> Option<&str> {
        self.get(path).and_then(Value::as_str)
    }

    pub fn get_i64(&self, path: &str) -> Option<i64> {
        self.get(path).and_then(Value::as_i64)
    }

    pub fn get_f64(&self, path: &str) -> Option<f64> {
        self.get(path).and_then(Value::as_f64)
    }

    pub fn get_bool(&self, path: &str) -> Option<bool> {
        self.get(path).and_then(Value::as_bool)
    }

    pub fn get_usize_or(&self, path: &str, default: usize) -> usize {
        self.get_i64(path).map(|v| v.max(0) as usize).unwrap_or(default)
    }

    pub fn get_f64_or(&self, path: &str, default: f64) -> f64 {
        self.get_f64(path).unwrap_or(default)
    }

    pub fn get_str_list(&self, path: &str) -> Option<Vec<String>> {
        self.get(path)?
            .as_list()?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect()
    }

    /// Subtree at `path`, or an empty tree when the path is absent or not a mapping.
    pub fn section(&self, path: &str) -> ConfigTree {
        match self.get(path) {
            Some(Value::Map(m)) => ConfigTree::from_map(m.clone()),
            _ => ConfigTree::new(),
        }
    }

    /// Sets a leaf, creating intermediate mappings.
    pub fn set(&mut self, path: &str, value: Value) -> Result<()> {
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::MalformedOption(path.to_string()));
        }
        let (last, head) = parts.split_last().expect("split yields at least one part");
        let mut cur = &mut self.root;
        for (i, p) in head.iter().enumerate() {
            let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Map(Map::new()));
            cur = match entry {
                Value::Map(m) => m,
                _ => return Err(Error::TypeConflict(parts[..=i].join("."))),
            };
        }
        cur.insert(last.to_string(), value);
        Ok(())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&self.root).unwrap_or_default()
    }
}

fn convert_yaml(v: &serde_yaml::Value, text: &str) -> Result<Value> {
    use serde_yaml::Value as Y;
    Ok(match v {
        Y::Null => Value::Null,
        Y::Bool(b) => Value::Bool(*b),
        Y::Number(n) => match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
        },
        Y::String(s) => Value::Str(s.clone()),
        Y::Sequence(seq) => Value::List(seq.iter().map(|x| convert_yaml(x, text)).collect::<Result<_>>()?),
        Y::Mapping(m) => {
            let mut out = Map::new();
            for (k, val) in m {
                let key = match k {
                    Y::String(s) => s.clone(),
                    Y::Number(n) => n.to_string(),
                    Y::Bool(b) => b.to_string(),
                    _ => {
                        return Err(Error::ParseError {
                            line: 0,
                            message: "mapping keys must be scalars".into(),
                        })
                    }
                };
                if key.is_empty() || key.contains('.') {
                    return Err(Error::ParseError {
                        line: line_of_key(text, &key),
                        message: format!("invalid key `{key}` (keys must be non-empty and must not contain '.')"),
                    });
                }
                out.insert(key, convert_yaml(val, text)?);
            }
            Value::Map(out)
        }
        Y::Tagged(_) => {
            return Err(Error::ParseError {
                line: 0,
                message: "tagged values are not supported".into(),
            })
        }
    })
}

fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let t = l.trim_start().trim_start_matches("- ");
            t.starts_with(&format!("{key}:")) || t.starts_with(&format!("\"{key}\":"))
        })
        .map(|i| i + 1)
        .unwrap_or(0)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigTree> {
    let text = resources::read_text(path.as_ref())?;
    ConfigTree::parse_str(&text)
}

/// Deep merge: `over` wins for scalars and lists, mappings recurse.
pub fn merge(base: &ConfigTree, over: &ConfigTree) -> Result<ConfigTree> {
    let mut root = base.root.clone();
    merge_into(&mut root, &over.root, "")?;
    Ok(ConfigTree { root })
}

fn merge_into(dst: &mut Map, src: &Map, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (dst.get_mut(k), v) {
            (Some(Value::Map(d)), Value::Map(s)) => merge_into(d, s, &path)?,
            (Some(Value::Map(_)), _) | (Some(_), Value::Map(_)) => return Err(Error::TypeConflict(path)),
            _ => {
                dst.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(())
}

/// Literal-driven coercion: booleans, then integers, then floats, else string.
pub fn coerce_literal(raw: &str) -> Value {
    match raw {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Int(i);
    }
    let looks_numeric = raw.chars().any(|c| c.is_ascii_digit())
        && raw.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'));
    if looks_numeric {
        if let Ok(f) = raw.parse::<f64>() {
            return Value::Float(f);
        }
    }
    Value::Str(raw.to_string())
}

pub fn parse_option(option: &str) -> Result<(String, Value)> {
    let malformed = || Error::MalformedOption(option.to_string());
    if option.matches('=').count() != 1 {
        return Err(malformed());
    }
    let (path, raw) = option.split_once('=').ok_or_else(malformed)?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(malformed());
    }
    Ok((path.to_string(), coerce_literal(raw)))
}

pub fn apply_overrides<S: AsRef<str>>(tree: &ConfigTree, options: &[S]) -> Result<ConfigTree> {
    let mut out = tree.clone();
    for opt in options {
        let (path, value) = parse_option(opt.as_ref())?;
        out.set(&path, value)?;
    }
    Ok(out)
}

/// Validated, immutable run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    tree: ConfigTree,
}

impl RunConfig {
    /// Validates `tree` and wraps it.
    pub fn new(tree: ConfigTree) -> Result<Self> {
        let errors = validate(&tree);
        if errors.is_empty() {
            Ok(Self { tree })
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn tree(&self) -> &ConfigTree {
        &self.tree
    }

    pub fn run(&self) -> ConfigTree {
        self.tree.section("run")
    }

    pub fn model(&self) -> ConfigTree {
        self.tree.section("model")
    }

    pub fn task(&self) -> &str {
        self.tree.get_str("run.task").unwrap_or_default()
    }

    pub fn arch(&self) -> &str {
        self.tree.get_str("model.arch").unwrap_or_default()
    }

    pub fn model_type(&self) -> &str {
        self.tree.get_str("model.model_type").unwrap_or("base")
    }

    pub fn dataset_names(&self) -> Vec<String> {
        self.tree
            .get("datasets")
            .and_then(Value::as_map)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn dataset(&self, name: &str) -> ConfigTree {
        self.tree
            .get("datasets")
            .and_then(Value::as_map)
            .and_then(|m| m.get(name))
            .and_then(Value::as_map)
            .map(|m| ConfigTree::from_map(m.clone()))
            .unwrap_or_default()
    }

    pub fn max_epoch(&self) -> Option<usize> {
        self.tree.get_i64("run.max_epoch").map(|v| v as usize)
    }

    pub fn max_iters(&self) -> Option<usize> {
        self.tree.get_i64("run.max_iters").map(|v| v as usize)
    }

    /// Returns a copy with `options` applied and re-validated.
    pub fn with_options<S: AsRef<str>>(&self, options: &[S]) -> Result<Self> {
        Self::new(apply_overrides(&self.tree, options)?)
    }
}

/// Checks the run-config invariants; each message starts with the offending dotted path.
pub fn validate(tree: &ConfigTree) -> Vec<String> {
    let mut errors = Vec::new();
    for key in ["run.task", "model.arch"] {
        match tree.get(key) {
            Some(Value::Str(s)) if !s.is_empty() => {}
            Some(_) => errors.push(format!("{key}: must be a non-empty string")),
            None => errors.push(format!("{key}: required")),
        }
    }
    match tree.get("datasets") {
        Some(Value::Map(m)) if !m.is_empty() => {}
        _ => errors.push("datasets: at least one dataset entry is required".to_string()),
    }
    let epoch = tree.get("run.max_epoch");
    let iters = tree.get("run.max_iters");
    match (epoch, iters) {
        (Some(_), Some(_)) => {
            errors.push("run.max_epoch, run.max_iters: exactly one may be set".to_string());
        }
        (None, None) => {
            errors.push("run.max_epoch, run.max_iters: one of them is required".to_string());
        }
        _ => {}
    }
    let int_at_least = |errors: &mut Vec<String>, key: &str, min: i64| {
        if let Some(v) = tree.get(key) {
            match v.as_i64() {
                Some(i) if i >= min => {}
                _ => errors.push(format!("{key}: must be an integer >= {min}")),
            }
        }
    };
    int_at_least(&mut errors, "run.max_epoch", 0);
    int_at_least(&mut errors, "run.max_iters", 1);
    int_at_least(&mut errors, "run.warmup_steps", 0);
    int_at_least(&mut errors, "run.batch_size_train", 1);
    int_at_least(&mut errors, "run.batch_size_eval", 1);
    int_at_least(&mut errors, "run.seed", 0);
    if iters.is_some() {
        match tree.get("run.iters_per_inner_epoch").and_then(Value::as_i64) {
            Some(i) if i >= 1 => {}
            Some(_) => errors.push("run.iters_per_inner_epoch: must be an integer >= 1".to_string()),
            None => errors.push("run.iters_per_inner_epoch: required with run.max_iters".to_string()),
        }
    }
    for key in [
        "run.init_lr",
        "run.min_lr",
        "run.warmup_lr",
        "run.weight_decay",
        "run.grad_clip",
    ] {
        if let Some(v) = tree.get(key) {
            match v.as_f64() {
                Some(f) if f.is_finite() && f >= 0.0 => {}
                _ => errors.push(format!("{key}: must be a non-negative number")),
            }
        }
    }
    if let Some(rate) = tree.get("run.lr_decay_rate") {
        match rate.as_f64() {
            Some(r) if r > 0.0 && r <= 1.0 => {}
            _ => errors.push("run.lr_decay_rate: must lie in (0, 1]".to_string()),
        }
    }
    if let (Some(min), Some(init)) = (tree.get_f64("run.min_lr"), tree.get_f64("run.init_lr")) {
        if min > init {
            errors.push("run.min_lr: must not exceed run.init_lr".to_string());
        }
    }
    errors
}

/// Resolves the default-config paths a run needs from the registry.
pub trait DefaultConfigs {
    fn library_default(&self) -> Option<String>;
    fn model_default(&self, arch: &str, model_type: &str) -> Result<String>;
    fn dataset_default(&self, name: &str) -> Result<String>;
}

/// Assembles the five-layer configuration and validates it.
pub fn build_run_config<S: AsRef<str>>(
    registry: &Registry,
    user_cfg_path: impl AsRef<Path>,
    options: &[S],
) -> Result<RunConfig> {
    let user = load_config(user_cfg_path)?;
    build_run_config_from_tree(registry, &user, options)
}

pub fn build_run_config_from_tree<S: AsRef<str>>(
    registry: &Registry,
    user: &ConfigTree,
    options: &[S],
) -> Result<RunConfig> {
    let cli = apply_overrides(&ConfigTree::new(), options)?;
    let probe = merge(user, &cli)?;

    let mut layers = Vec::new();
    if let Some(path) = registry.library_default() {
        layers.push(load_config(path)?);
    }
    if let Some(arch) = probe.get_str("model.arch") {
        let model_type = probe.get_str("model.model_type").unwrap_or("base");
        layers.push(load_config(registry.model_default(arch, model_type)?)?);
    }
    if let Some(Value::Map(datasets)) = probe.get("datasets") {
        for name in datasets.keys() {
            layers.push(load_config(registry.dataset_default(name)?)?);
        }
    }
    layers.push(user.clone());
    layers.push(cli);

    let mut tree = ConfigTree::new();
    for layer in &layers {
        tree = merge(&tree, layer)?;
    }
    RunConfig::new(tree)
}
