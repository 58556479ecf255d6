//! Learning-rate schedules and the AdamW optimizer.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::ConfigTree;
use crate::error::{Error, Result};
use crate::models::TensorMap;
use crate::nn::ParamStore;
use crate::registry::{Namespace, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub warmup_start_lr: f64,
    pub total_steps: usize,
    /// Per-epoch factor of the step schedule.
    pub decay_rate: f64,
}

impl SchedulerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadHyperparameter(m));
        if !(0.0 <= self.min_lr && self.min_lr <= self.init_lr) {
            return bad(format!("need 0 <= min_lr ({}) <= init_lr ({})", self.min_lr, self.init_lr));
        }
        if self.warmup_steps >= self.total_steps.max(1) && self.warmup_steps > 0 {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0 <= self.warmup_start_lr && self.warmup_start_lr <= self.init_lr) {
            return bad(format!(
                "need 0 <= warmup_lr ({}) <= init_lr ({})",
                self.warmup_start_lr, self.init_lr
            ));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("lr_decay_rate {} outside (0, 1]", self.decay_rate));
        }
        Ok(())
    }

    /// Reads `init_lr`, `min_lr`, `warmup_steps`, `warmup_lr` and
    /// `lr_decay_rate` from a `run:` section.
    pub fn from_run(run: &ConfigTree, total_steps: usize) -> Result<Self> {
        let spec = Self {
            init_lr: run.get_f64_or("init_lr", 1e-4),
            min_lr: run.get_f64_or("min_lr", 0.0),
            warmup_steps: run.get_usize_or("warmup_steps", 0),
            warmup_start_lr: run.get_f64_or("warmup_lr", 0.0),
            total_steps,
            decay_rate: run.get_f64_or("lr_decay_rate", 1.0),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn warmup(&self, step: usize) -> Option<f64> {
        (step < self.warmup_steps).then(|| {
            self.warmup_start_lr + (self.init_lr - self.warmup_start_lr) * step as f64 / self.warmup_steps as f64
        })
    }

    fn check(&self, step: usize) -> Result<()> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        Ok(())
    }
}

pub fn linear_warmup_cosine_lr(spec: &SchedulerSpec, step: usize) -> Result<f64> {
    spec.check(step)?;
    if let Some(lr) = spec.warmup(step) {
        return Ok(lr);
    }
    let span = spec.total_steps - spec.warmup_steps;
    if span == 0 {
        return Ok(spec.init_lr);
    }
    let progress = (step - spec.warmup_steps) as f64 / span as f64;
    Ok(spec.min_lr + 0.5 * (spec.init_lr - spec.min_lr) * (1.0 + (PI * progress).cos()))
}

pub fn linear_warmup_step_lr(spec: &SchedulerSpec, epoch: usize, steps_per_epoch: usize, step_in_epoch: usize) -> Result<f64> {
    let step = epoch * steps_per_epoch + step_in_epoch;
    spec.check(step)?;
    if let Some(lr) = spec.warmup(step) {
        return Ok(lr);
    }
    Ok((spec.init_lr * spec.decay_rate.powi(epoch as i32)).max(spec.min_lr))
}

/// Registry handle in the `lr_scheduler` namespace.
pub struct LrScheduler {
    pub lr_at: LrFn,
}

pub type LrFn = fn(spec: &SchedulerSpec, epoch: usize, steps_per_epoch: usize, step_in_epoch: usize) -> Result<f64>;

const SCHEDULERS: [(&str, LrFn); 2] = [
    ("linear_warmup_cosine_lr", |s, e, spe, i| linear_warmup_cosine_lr(s, e * spe + i)),
    ("linear_warmup_step_lr", linear_warmup_step_lr),
];

pub(crate) fn register_builtins(r: &mut Registry) -> Result<()> {
    for (name, lr_at) in SCHEDULERS {
        r.register(Namespace::LrScheduler, name, LrScheduler { lr_at })?;
    }
    Ok(())
}

/// Built-in schedule by name, for runners constructed without a registry.
pub fn scheduler_by_name(name: &str) -> Result<LrFn> {
    SCHEDULERS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| *f)
        .ok_or_else(|| Error::NotFound {
            namespace: Namespace::LrScheduler.as_str().into(),
            name: name.into(),
            suggestions: SCHEDULERS.iter().map(|(n, _)| n.to_string()).collect(),
        })
}

/// True for parameters that receive decoupled weight decay: matrices only,
/// never biases, LayerNorm gain/shift or the temperature.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.ends_with(".bias") && !name.ends_with(".gamma") && !name.ends_with(".beta") && name != "log_temp"
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadHyperparameter(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over a [`ParamStore`].
pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var, bool)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for (name, var) in store.vars() {
            params.push((name.clone(), var.clone(), decays(name, var.rank())));
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { cfg, params, m, v, t: 0 })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Global L2 norm of the gradients of the tracked parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var, _) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. With `clip > 0`, gradients are rescaled so their global
    /// norm is at most `clip`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore, clip: f64) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var, decay) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry op history; keeping it in the moments would pin every step's graph.
            let g = g.detach();
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g };
            let m = (self.m[name].affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (self.v[name].affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let update = (m.affine(1.0 / bc1, 0.0)? / v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?)?;
            let mut w = var.as_tensor().detach();
            if *decay && weight_decay > 0.0 {
                w = w.affine(1.0 - lr * weight_decay, 0.0)?;
            }
            var.set(&(w - update.affine(lr, 0.0)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Moments as `m/<name>` and `v/<name>`.
    pub fn export_state(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (prefix, map) in [("m/", &self.m), ("v/", &self.v)] {
            for (name, t) in map {
                out.insert(format!("{prefix}{name}"), (t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?));
            }
        }
        Ok(out)
    }

    pub fn import_state(&mut self, state: &TensorMap, t: u64) -> Result<()> {
        for (name, var, _) in &self.params {
            for (prefix, map) in [("m/", &mut self.m), ("v/", &mut self.v)] {
                let key = format!("{prefix}{name}");
                let (shape, data) = state
                    .get(&key)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing optimizer state `{key}`")))?;
                if shape.as_slice() != var.dims() {
                    return Err(Error::WeightShapeMismatch {
                        name: key,
                        expected: var.dims().to_vec(),
                        found: shape.clone(),
                    });
                }
                map.insert(name.clone(), Tensor::from_slice(data, shape.as_slice(), var.device())?);
            }
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn spec() -> SchedulerSpec {
        SchedulerSpec {
            init_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps: 100,
            warmup_start_lr: 1e-6,
            total_steps: 1100,
            decay_rate: 0.1,
        }
    }

    #[test]
    fn cosine_boundaries() {
        let s = spec();
        assert_eq!(linear_warmup_cosine_lr(&s, 0).unwrap(), 1e-6);
        assert!((linear_warmup_cosine_lr(&s, 100).unwrap() - 1e-4).abs() < 1e-15);
        assert!((linear_warmup_cosine_lr(&s, 600).unwrap() - 5.5e-5).abs() < 1e-12);
        assert_eq!(linear_warmup_cosine_lr(&s, 1100).unwrap(), 1e-5);
        assert!(matches!(linear_warmup_cosine_lr(&s, 1101), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn step_decay_and_floor() {
        let s = SchedulerSpec {
            init_lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 0,
            warmup_start_lr: 0.0,
            total_steps: 100,
            decay_rate: 0.1,
        };
        assert_eq!(linear_warmup_step_lr(&s, 0, 10, 3).unwrap(), 1e-3);
        assert!((linear_warmup_step_lr(&s, 2, 10, 0).unwrap() - 1e-5).abs() < 1e-18);
        let floored = SchedulerSpec { min_lr: 1e-4, ..s };
        assert_eq!(linear_warmup_step_lr(&floored, 5, 10, 0).unwrap(), 1e-4);
    }

    #[test]
    fn invalid_specs() {
        assert!(SchedulerSpec { min_lr: 1.0, ..spec() }.validate().is_err());
        assert!(SchedulerSpec { warmup_steps: 1100, ..spec() }.validate().is_err());
        assert!(SchedulerSpec { decay_rate: 0.0, ..spec() }.validate().is_err());
    }

    fn one_param(w0: f32) -> ParamStore {
        let mut ps = ParamStore::new(0);
        ps.param("w", &[1, 1], Init::Const(w0)).unwrap();
        ps
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // f(w) = w^2 at w = 1: g = 2, m̂ = 2, v̂ = 4, update = lr · 2 / (2 + eps)
        let ps = one_param(1.0);
        let mut opt = AdamW::new(&ps, cfg(0.1, 0.0)).unwrap();
        let w = ps.get("w").unwrap();
        let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.0).unwrap();
        let after = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0] as f64;
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((after - expected).abs() < 1e-6, "{after}");
    }

    #[test]
    fn decoupled_decay_shrinks_matrices_only() {
        let mut ps = ParamStore::new(0);
        ps.param("w", &[1, 1], Init::Const(1.0)).unwrap();
        ps.param("b.bias", &[1], Init::Const(1.0)).unwrap();
        let mut opt = AdamW::new(&ps, cfg(0.1, 0.5)).unwrap();
        // zero gradient: only decay can move parameters
        let zero = |n: &str| {
            let t = ps.get(n).unwrap().as_tensor();
            t.mul(&t.zeros_like().unwrap()).unwrap().sum_all().unwrap()
        };
        let loss = zero("w") + zero("b.bias");
        let grads = loss.unwrap().backward().unwrap();
        opt.step(&grads, 0.0).unwrap();
        let get = |n: &str| ps.get(n).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((get("w") - 0.95).abs() < 1e-6, "{}", get("w"));
        assert_eq!(get("b.bias"), 1.0);
    }

    #[test]
    fn bad_lr_rejected() {
        let ps = one_param(1.0);
        assert!(matches!(AdamW::new(&ps, cfg(-1.0, 0.0)), Err(Error::BadHyperparameter(_))));
    }

    #[test]
    fn clip_bounds_update_direction() {
        let ps = one_param(1.0);
        let mut opt = AdamW::new(&ps, cfg(0.1, 0.0)).unwrap();
        let w = ps.get("w").unwrap();
        let grads = (w.as_tensor().sum_all().unwrap() * 100.0).unwrap().backward().unwrap();
        let norm = opt.step(&grads, 1.0).unwrap();
        assert!((norm - 100.0).abs() < 1e-3);
    }
}
