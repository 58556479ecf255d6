//! Reference training recipes and a small pass/fail reporter shared by the
//! acceptance checks.

use std::path::Path;
use std::time::{Duration, Instant};

use mmkit::config::ConfigTree;
use mmkit::runners::{RunSummary, Runner};
use mmkit::{build_run_config_from_tree, Registry};

/// Dual encoder on the 64-pair shapes corpus: iteration runner, batch 16,
/// linear warmup then cosine decay.
pub fn retrieval_recipe(output_dir: &Path, seed: u64) -> ConfigTree {
    let yaml = format!(
        "model: {{arch: clip_toy, model_type: base}}
datasets:
  shapes_retrieval:
    build_info: {{num_samples: 64, seed: 7}}
run:
  task: retrieval
  runner: runner_iters
  lr_sched: linear_warmup_cosine_lr
  max_iters: 500
  iters_per_inner_epoch: 100
  batch_size_train: 16
  init_lr: 0.002
  warmup_steps: 50
  seed: {seed}
  output_dir: {}
",
        output_dir.display()
    );
    ConfigTree::parse_str(&yaml).expect("recipe is valid YAML")
}

/// Captioner on the 16 distinct shapes captions, trained without augmentation
/// and validated on its own training split.
pub fn caption_recipe(output_dir: &Path, seed: u64) -> ConfigTree {
    let yaml = format!(
        "model: {{arch: blip_toy, model_type: caption}}
datasets:
  shapes_caption:
    build_info: {{num_samples: 20, seed: 7}}
    vis_processor:
      train: {{name: image_eval, image_size: 64}}
run:
  task: captioning
  runner: runner_iters
  lr_sched: linear_warmup_cosine_lr
  max_iters: 300
  iters_per_inner_epoch: 100
  batch_size_train: 16
  init_lr: 0.001
  warmup_steps: 20
  weight_decay: 0.0
  num_beams: 1
  valid_splits: [train]
  test_splits: []
  seed: {seed}
  output_dir: {}
",
        output_dir.display()
    );
    ConfigTree::parse_str(&yaml).expect("recipe is valid YAML")
}

/// Builds the runner for `user`, trains it and reports the wall time.
/// On return the runner holds the best validation weights.
pub fn train(registry: &Registry, user: &ConfigTree) -> mmkit::Result<(Runner, RunSummary, Duration)> {
    let cfg = build_run_config_from_tree::<&str>(registry, user, &[])?;
    let start = Instant::now();
    let mut runner = Runner::from_config(registry, cfg)?;
    let summary = runner.train()?;
    Ok((runner, summary, start.elapsed()))
}

/// Outcome of one criterion.
pub struct Verdict {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!("{} {} {}", self.id, if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// Collects verdicts and prints each as it arrives.
#[derive(Default)]
pub struct Report {
    verdicts: Vec<Verdict>,
}

impl Report {
    pub fn record(&mut self, id: &str, passed: bool, detail: impl Into<String>) {
        let v = Verdict {
            id: id.to_string(),
            passed,
            detail: detail.into(),
        };
        println!("{}", v.line());
        self.verdicts.push(v);
    }

    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }
}
