use std::fs;
use std::path::Path;

use mmkit::config::ConfigTree;
use mmkit::data::Batch;
use mmkit::models::load_checkpoint;
use mmkit::optim::{AdamW, AdamWConfig};
use mmkit::runners::{Control, Runner};
use mmkit::{build_run_config_from_tree, load_dataset, load_model, Error, Registry};

fn registry(root: &Path) -> Registry {
    Registry::builtin_with_cache(&root.join("cache").to_string_lossy()).unwrap()
}

fn fixed_batch(reg: &Registry, dataset: &str) -> Batch {
    let splits = load_dataset(reg, dataset, None, None).unwrap();
    let train = &splits["train"];
    // records 0..8 carry 8 distinct captions
    Batch::collate((0..8).map(|i| train.get_item(i).unwrap()).collect()).unwrap()
}

/// 50 AdamW steps on one batch; returns (first loss, last loss).
fn overfit(reg: &Registry, arch: &str, model_type: &str, dataset: &str, task: &str) -> (f64, f64) {
    let batch = fixed_batch(reg, dataset);
    let bundle = load_model(reg, arch, model_type, false).unwrap();
    let user = ConfigTree::parse_str(&format!(
        "model: {{arch: {arch}, model_type: {model_type}}}\ndatasets: {{{dataset}: {{}}}}\nrun: {{task: {task}, max_epoch: 1}}"
    ))
    .unwrap();
    let cfg = build_run_config_from_tree::<&str>(reg, &user, &[]).unwrap();
    let task = mmkit::tasks::setup_task(reg, &cfg).unwrap();
    let model = bundle.model;
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            lr: 5e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    )
    .unwrap();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..50 {
        let losses = task.train_step(&model, &batch).unwrap();
        last = losses.total_f64().unwrap();
        first.get_or_insert(last);
        let grads = losses.total.backward().unwrap();
        opt.step(&grads, 0.0).unwrap();
        model.post_step().unwrap();
    }
    (first.unwrap(), last)
}

#[test]
fn itc_loss_drops_by_a_third_in_50_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = overfit(&registry(dir.path()), "clip_toy", "base", "shapes_retrieval", "retrieval");
    assert!(b <= 0.7 * a, "itc {a} -> {b}");
}

#[test]
fn itc_plus_itm_loss_drops_by_a_third_in_50_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = overfit(&registry(dir.path()), "albef_toy", "base", "shapes_retrieval", "retrieval");
    assert!(b <= 0.7 * a, "itc+itm {a} -> {b}");
}

#[test]
fn lm_loss_drops_by_a_third_in_50_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = overfit(&registry(dir.path()), "blip_toy", "caption", "shapes_caption", "captioning");
    assert!(b <= 0.7 * a, "lm {a} -> {b}");
}

fn small_run(out: &Path, run: &str) -> ConfigTree {
    ConfigTree::parse_str(&format!(
        "model: {{arch: clip_toy, model_type: base, vision_width: 32, text_width: 32, num_layers: 1, num_heads: 2}}
datasets:
  shapes_retrieval:
    build_info: {{num_samples: 40, seed: 3}}
run:
  task: retrieval
  batch_size_train: 8
  init_lr: 0.001
  seed: 5
  output_dir: {}
{run}",
        out.display()
    ))
    .unwrap()
}

fn runner(reg: &Registry, user: &ConfigTree) -> Runner {
    let cfg = build_run_config_from_tree::<&str>(reg, user, &[]).unwrap();
    Runner::from_config(reg, cfg).unwrap()
}

fn log_lines(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("log.txt"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn iteration_runner_evaluates_once_per_inner_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let out = dir.path().join("run");
    let user = small_run(&out, "  runner: runner_iters\n  max_iters: 20\n  iters_per_inner_epoch: 5\n");
    let mut r = runner(&reg, &user);
    r.train().unwrap();
    let evals = log_lines(&out).iter().filter(|l| l["split"] == "val").count();
    assert_eq!(evals, 4);
    assert_eq!(r.state().cur_iters, 20);
}

#[test]
fn iteration_loader_cycles_through_a_full_pass() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    // 32 training records, batch 8: a pass is 4 batches
    let user = small_run(&dir.path().join("run"), "  runner: runner_iters\n  max_iters: 12\n  iters_per_inner_epoch: 4\n");
    let r = runner(&reg, &user);
    for pass in 0..3 {
        let mut seen: Vec<usize> = (0..4).flat_map(|i| r.batch_indices(pass * 4 + i)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..32).collect::<Vec<_>>(), "pass {pass}");
    }
}

#[test]
fn epoch_runner_with_zero_epochs_and_evaluate_only_skips_training() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let out = dir.path().join("run");
    let user = small_run(&out, "  max_epoch: 0\n  evaluate: true\n");
    let mut r = runner(&reg, &user);
    let s = r.train().unwrap();
    assert!(s.test.contains_key("test"));
    assert!(!r.optimizer_built());
    assert!(!out.join("checkpoint_latest.ckpt").exists());
}

#[test]
fn non_finite_loss_reports_step_and_keeps_previous_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let out = dir.path().join("run");
    let user = small_run(&out, "  max_epoch: 3\n");
    let mut r = runner(&reg, &user);
    r.set_epoch_hook(Box::new(|epoch, model| {
        if epoch == 0 {
            let mut params = model.export_params()?;
            for (_, values) in params.values_mut() {
                values.iter_mut().for_each(|v| *v = f32::NAN);
            }
            model.import_params(&params)?;
        }
        Ok(Control::Continue)
    }));
    let err = r.train().unwrap_err();
    // 32 train records at batch 8: epoch 1 starts at step 4
    assert!(matches!(err, Error::NonFiniteLoss(4)), "{err:?}");
    let saved = load_checkpoint(&out.join("checkpoint_latest.ckpt")).unwrap();
    assert!(saved.params.values().all(|(_, v)| v.iter().all(|x| x.is_finite())));
}

#[test]
fn resume_restores_best_score_and_rejects_other_archs() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let out = dir.path().join("run");
    let user = small_run(&out, "  max_epoch: 2\n");
    let mut r = runner(&reg, &user);
    r.train().unwrap();
    let best = r.state().best_agg;
    let ckpt = out.join("checkpoint_latest.ckpt");

    let mut again = runner(&reg, &small_run(&dir.path().join("again"), "  max_epoch: 2\n"));
    again.resume(&ckpt).unwrap();
    assert_eq!(again.state().best_agg, best);
    assert_eq!(again.state().cur_epoch, 2);

    let other = ConfigTree::parse_str(&format!(
        "model: {{arch: blip_toy, model_type: caption}}
datasets: {{shapes_caption: {{build_info: {{num_samples: 20, seed: 3}}}}}}
run: {{task: captioning, max_epoch: 1, output_dir: {}}}",
        dir.path().join("cap").display()
    ))
    .unwrap();
    let mut cap = runner(&reg, &other);
    assert!(matches!(cap.resume(&ckpt), Err(Error::IncompatibleArch { .. })));
}

#[test]
fn best_checkpoint_follows_strict_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path());
    let out = dir.path().join("run");
    let mut r = runner(&reg, &small_run(&out, "  max_epoch: 3\n"));
    let s = r.train().unwrap();
    let aggs: Vec<f64> = log_lines(&out)
        .iter()
        .filter(|l| l["split"] == "val")
        .map(|l| l["agg_metrics"].as_f64().unwrap())
        .collect();
    assert_eq!(aggs.len(), 3);
    let mut best = (f64::NEG_INFINITY, -1i64);
    for (e, a) in aggs.iter().enumerate() {
        if *a > best.0 {
            best = (*a, e as i64);
        }
    }
    assert_eq!(s.best_epoch, best.1);
    assert_eq!(s.best_agg, Some(best.0));
}
