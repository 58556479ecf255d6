//! `mmkit`: train, evaluate, download datasets and inspect the registry.
//!
//! Every successful command ends with one JSON record on stdout. Exit codes:
//! 0 on success, 1 for configuration errors, 2 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmkit::config::{apply_overrides, load_config, merge, DefaultConfigs};
use mmkit::data::{download_dataset, SplitStatus, UrlFetcher};
use mmkit::models::ModelEntry;
use mmkit::runners::{RunSummary, Runner};
use mmkit::{build_run_config, ConfigTree, Namespace, Registry};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mmkit", version, about = "Train, evaluate and inspect small image-text models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// User config file (YAML).
    #[arg(long)]
    cfg_path: PathBuf,
    /// Dotted-path overrides, e.g. `run.max_epoch=1`. Repeatable.
    #[arg(long, num_args = 1.., action = clap::ArgAction::Append)]
    options: Vec<String>,
    /// Shorthand for `run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn all_options(&self) -> Vec<String> {
        let mut opts = self.options.clone();
        if let Some(seed) = self.seed {
            opts.push(format!("run.seed={seed}"));
        }
        opts
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train with the runner named by the config.
    Train(RunArgs),
    /// Evaluate only (forces `run.evaluate=true`).
    Evaluate(RunArgs),
    /// Fetch and verify dataset annotations into the cache.
    Download {
        #[arg(required = true)]
        names: Vec<String>,
        /// Optional config whose `datasets.<name>` sections override the defaults.
        #[arg(long)]
        cfg_path: Option<PathBuf>,
        #[arg(long, num_args = 1.., action = clap::ArgAction::Append)]
        options: Vec<String>,
    },
    /// List registered names in a namespace.
    List { namespace: String },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(record) => {
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> mmkit::Result<Value> {
    let registry = Registry::builtin()?;
    match command {
        Command::Train(args) => train(&registry, &args, false),
        Command::Evaluate(args) => train(&registry, &args, true),
        Command::Download {
            names,
            cfg_path,
            options,
        } => download(&registry, &names, cfg_path.as_deref(), &options),
        Command::List { namespace } => list(&registry, &namespace),
    }
}

fn summary_record(command: &str, output_dir: &Path, s: &RunSummary) -> Value {
    let metrics = |m: &std::collections::BTreeMap<String, mmkit::tasks::EvalResult>| -> Value {
        m.iter()
            .map(|(k, r)| (k.clone(), json!({"metrics": r.metrics, "agg_metrics": r.agg_metrics})))
            .collect::<serde_json::Map<_, _>>()
            .into()
    };
    json!({
        "command": command,
        "status": if s.interrupted { "interrupted" } else { "ok" },
        "output_dir": output_dir,
        "best_epoch": s.best_epoch,
        "best_agg": s.best_agg,
        "agg_metrics": s.agg_metrics(),
        "val": metrics(&s.val),
        "test": metrics(&s.test),
    })
}

fn train(registry: &Registry, args: &RunArgs, evaluate: bool) -> mmkit::Result<Value> {
    let mut options = args.all_options();
    if evaluate {
        options.push("run.evaluate=true".into());
    }
    let cfg = build_run_config(registry, &args.cfg_path, &options)?;
    let resume = cfg.run().get_str("resume_ckpt_path").map(PathBuf::from);
    let mut runner = Runner::from_config(registry, cfg)?;
    if let Some(path) = resume.filter(|_| !evaluate) {
        runner.resume(&path)?;
    }
    let summary = runner.train()?;
    Ok(summary_record(
        if evaluate { "evaluate" } else { "train" },
        runner.output_dir(),
        &summary,
    ))
}

fn download(registry: &Registry, names: &[String], cfg_path: Option<&Path>, options: &[String]) -> mmkit::Result<Value> {
    let available = registry.list_names(Namespace::DatasetBuilder);
    if let Some(bad) = names.iter().find(|n| !available.contains(n)) {
        eprintln!("available dataset builders: {}", available.join(", "));
        // Surfaces the registry's NotFound with suggestions.
        registry.lookup(Namespace::DatasetBuilder, bad)?;
    }
    let user = match cfg_path {
        Some(p) => load_config(p)?,
        None => ConfigTree::new(),
    };
    let mut out = serde_json::Map::new();
    for name in names {
        let defaults = load_config(registry.dataset_default(name)?)?;
        let tree = apply_overrides(&merge(&defaults, &user)?, options)?;
        let (card, manifest) = download_dataset(registry, name, &tree.section(&format!("datasets.{name}")), &UrlFetcher)?;
        let mut splits = serde_json::Map::new();
        for (split, entry) in &manifest.entries {
            let status = match entry.status {
                SplitStatus::Fetched => "fetched",
                SplitStatus::Cached => "cached",
            };
            println!("{}/{split}: {status} {}", card.name, entry.path.display());
            splits.insert(split.clone(), json!({"status": status, "path": entry.path}));
        }
        out.insert(name.clone(), splits.into());
    }
    Ok(json!({"command": "download", "status": "ok", "datasets": out}))
}

fn list(registry: &Registry, namespace: &str) -> mmkit::Result<Value> {
    let names = registry.list_names_in(namespace)?;
    if namespace == Namespace::Model.as_str() {
        let mut entries = Vec::new();
        for arch in &names {
            let entry = registry.get::<ModelEntry>(Namespace::Model, arch)?;
            let types: Vec<&String> = entry.cards.keys().collect();
            println!("{arch}: {}", types.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "));
            entries.push(json!({"name": arch, "model_types": types}));
        }
        return Ok(json!({"command": "list", "namespace": namespace, "names": entries}));
    }
    for n in &names {
        println!("{n}");
    }
    Ok(json!({"command": "list", "namespace": namespace, "names": names}))
}
