//! Two-stage training: freeze masks, AdamW with cosine/warmup schedule,
//! batched gradient accumulation, and caption evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::SceneSample;
use crate::error::{config_err, numeric_err, Result};
use crate::math;
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::Tape;

/// Per-stage optimization plan. Defaults follow the published recipe,
/// with the step budget scaled to desk size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub stage: u8,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; zero or negative disables clipping.
    pub grad_clip: f64,
}

impl TrainPlan {
    pub fn stage1() -> Self {
        TrainPlan {
            stage: 1,
            base_lr: 1e-3,
            warmup_ratio: 0.06,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            eps: 1e-8,
            steps: 2000,
            batch_size: 8,
            seed: 1,
            grad_clip: 1.0,
        }
    }

    pub fn stage2() -> Self {
        TrainPlan {
            stage: 2,
            base_lr: 4e-5,
            warmup_ratio: 0.03,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            steps: 2000,
            batch_size: 8,
            seed: 2,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(config_err!("stage must be 1 or 2"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(config_err!("warmup ratio {} outside [0,1)", self.warmup_ratio));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(config_err!("steps and batch size must be positive"));
        }
        Ok(())
    }

    /// Which parameter groups this stage trains. Stage 1: the fusion stack
    /// (query grid, projections, projectors, decoder adapter). Stage 2:
    /// fusion plus realign maps plus the low-rank adapters. The pyramid and
    /// the decoder base never train.
    pub fn trainable(&self) -> impl Fn(ParamGroup) -> bool {
        let stage = self.stage;
        move |g| match g {
            ParamGroup::Fusion => true,
            ParamGroup::Realign | ParamGroup::Lora => stage == 2,
            ParamGroup::Pyramid | ParamGroup::Decoder => false,
        }
    }
}

/// Linear ramp to `base_lr` over `ceil(warmup_ratio·total)` steps, then
/// cosine decay to zero at `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (warmup_ratio * total_steps as f64 + 1.0 - 1e-12).floor() as usize; // ceil
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress))
}

/// First/second moment accumulators, allocated per trainable tensor only.
pub struct OptimState {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    pub step: usize,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        OptimState {
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
            step: 0,
        }
    }

    /// True if any optimizer state exists for the named tensor.
    pub fn has_state(&self, store: &ParamStore, name: &str) -> bool {
        store
            .find(name)
            .map(|id| self.m[id.index()].is_some())
            .unwrap_or(false)
    }
}

/// Bias-corrected AdamW with decoupled weight decay over every trainable
/// tensor in the store. Aborts without touching parameters if any gradient
/// is non-finite.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut OptimState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    eps: f64,
) -> Result<()> {
    let ids = store.trainable_ids();
    for &id in &ids {
        if let Some(g) = &store.get(id).grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(numeric_err!(
                    "non-finite gradient in {}",
                    store.name(id)
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = betas;
    let bc1 = 1.0 - math::powf(b1, t);
    let bc2 = 1.0 - math::powf(b2, t);
    for id in ids {
        let idx = id.index();
        let numel = store.get(id).numel();
        let m = state.m[idx].get_or_insert_with(|| alloc::vec![0.0; numel]);
        let v = state.v[idx].get_or_insert_with(|| alloc::vec![0.0; numel]);
        let tensor = store.get_mut(id);
        let grad = match &tensor.grad {
            Some(g) => g.clone(),
            None => alloc::vec![0.0; numel],
        };
        let data = tensor.data_mut();
        for i in 0..numel {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * (m_hat / (math::sqrt(v_hat) + eps) + weight_decay * data[i]);
        }
    }
    Ok(())
}

/// One metrics record per optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

/// Run one training stage in place. Returns the per-step metrics.
///
/// Deterministic for a fixed plan: data order, dropout draws and arithmetic
/// are all derived from `plan.seed`, single-threaded.
pub fn run_stage(model: &mut Model, plan: &TrainPlan, data: &[SceneSample]) -> Result<Vec<StepRecord>> {
    plan.validate()?;
    if data.is_empty() {
        return Err(config_err!("training data is empty"));
    }
    model.store.set_trainable(plan.trainable());
    let mut state = OptimState::new(&model.store);
    let mut order_rng = rng::seeded(plan.seed);
    let mut dropout_rng = rng::seeded(plan.seed ^ 0x9e3779b97f4a7c15);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(plan.steps);

    // pre-tokenize once
    let resolution = model.config.pyramid.input_resolution;
    let mut sequences = Vec::with_capacity(data.len());
    for sample in data {
        let image = crate::data::image_tensor(&sample.pixels, resolution)?;
        let (ids, mask) = model.stage_sequence(sample, plan.stage)?;
        sequences.push((image, ids, mask));
    }

    for step in 0..plan.steps {
        let mut batch = Vec::with_capacity(plan.batch_size);
        for _ in 0..plan.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                // Fisher-Yates from the order stream
                for i in (1..order.len()).rev() {
                    let j = order_rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            batch.push(order.pop().expect("refilled above"));
        }

        model.store.zero_grads();
        let mut tapes = Vec::with_capacity(batch.len());
        let mut total_count = 0usize;
        let mut weighted_loss = 0.0;
        for &idx in &batch {
            let (image, ids, mask) = &sequences[idx];
            let mut tape = Tape::new(&model.store);
            let (loss, count) =
                model.loss_graph(&mut tape, image, ids, mask, Some(&mut dropout_rng))?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(numeric_err!(
                    "non-finite loss at step {step} (stage {}, sample {idx})",
                    plan.stage
                ));
            }
            weighted_loss += value * count as f64;
            total_count += count;
            tapes.push((tape, loss, count));
        }
        let batch_loss = weighted_loss / total_count as f64;

        let mut harvests = Vec::with_capacity(tapes.len());
        for (mut tape, loss, count) in tapes {
            let weight = count as f64 / total_count as f64;
            tape.backward(loss, weight);
            harvests.push(tape.take_param_grads());
        }
        for grads in harvests {
            for (pid, g) in grads {
                model.store.get_mut(pid).accumulate_grad(&g, 1.0);
            }
        }

        if plan.grad_clip > 0.0 {
            let norm = model.store.grad_norm();
            if !norm.is_finite() {
                return Err(numeric_err!(
                    "non-finite gradient norm at step {step} (stage {}, lr {:.3e})",
                    plan.stage,
                    cosine_warmup_lr(step, plan.steps, plan.warmup_ratio, plan.base_lr)
                ));
            }
            if norm > plan.grad_clip {
                model.store.scale_grads(plan.grad_clip / norm);
            }
        }

        let lr = cosine_warmup_lr(step, plan.steps, plan.warmup_ratio, plan.base_lr);
        adamw_step(
            &mut model.store,
            &mut state,
            lr,
            plan.betas,
            plan.weight_decay,
            plan.eps,
        )?;
        records.push(StepRecord {
            step,
            stage: plan.stage,
            lr,
            loss: batch_loss,
        });
    }
    Ok(records)
}

/// Mean loss over all supervised positions of `samples` under the given
/// stage's sequence format.
pub fn evaluate_loss(model: &Model, samples: &[SceneSample], stage: u8) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let (loss, n) = model.sample_loss(sample, stage)?;
        total += loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(numeric_err!("no supervised positions in evaluation set"));
    }
    Ok(total / count as f64)
}

/// Fraction of samples whose greedy caption equals the reference exactly.
pub fn caption_exact_match(model: &Model, samples: &[SceneSample]) -> Result<f64> {
    let resolution = model.config.pyramid.input_resolution;
    let mut hits = 0usize;
    for sample in samples {
        let image = crate::data::image_tensor(&sample.pixels, resolution)?;
        if model.caption(&image)? == sample.caption {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Render the metrics records in the plain-text log format:
/// one `step,stage,lr,loss` line per step.
pub fn format_records(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&alloc::format!(
            "{},{},{:e},{:e}\n",
            r.step,
            r.stage,
            r.lr,
            r.loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let total = 200;
        assert_eq!(cosine_warmup_lr(0, total, 0.06, 1e-3), 0.0);
        let warmup = 12; // ceil(0.06·200)
        assert_eq!(cosine_warmup_lr(warmup, total, 0.06, 1e-3), 1e-3);
        let end = cosine_warmup_lr(total, total, 0.06, 1e-3);
        assert!(end.abs() <= 1e-12);
    }

    #[test]
    fn schedule_is_single_peaked() {
        let total = 333;
        let lrs: Vec<f64> = (0..=total)
            .map(|s| cosine_warmup_lr(s, total, 0.1, 2e-4))
            .collect();
        assert!(lrs.iter().all(|&x| x >= 0.0));
        let peak = lrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(lrs[..peak].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak..].windows(2).all(|w| w[0] >= w[1]));
    }

    fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let mut t = crate::tensor::Tensor::full(alloc::vec![1], value).with_grad();
        t.grad = grad.map(|g| alloc::vec![g]);
        store.register("w", ParamGroup::Fusion, t).unwrap();
        store
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut store = scalar_store(1.5, Some(0.0));
        let mut state = OptimState::new(&store);
        adamw_step(&mut store, &mut state, 0.1, (0.9, 0.95), 0.0, 1e-8).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()).data()[0], 1.5);
    }

    #[test]
    fn adamw_zero_grad_decay_scales_params() {
        let mut store = scalar_store(2.0, Some(0.0));
        let mut state = OptimState::new(&store);
        adamw_step(&mut store, &mut state, 0.1, (0.9, 0.95), 0.5, 1e-8).unwrap();
        let got = store.get(store.find("w").unwrap()).data()[0];
        assert!((got - 2.0 * (1.0 - 0.1 * 0.5)).abs() <= 1e-15, "{got}");
    }

    #[test]
    fn adamw_first_step_matches_hand_arithmetic() {
        // one step with constant grad g from zero state:
        // m̂ = g, v̂ = g² → θ -= lr·(g/(|g|+eps) + λθ)
        let (g, lr, lam, eps) = (0.25, 0.01, 0.2, 1e-8);
        let mut store = scalar_store(1.0, Some(g));
        let mut state = OptimState::new(&store);
        adamw_step(&mut store, &mut state, lr, (0.9, 0.95), lam, eps).unwrap();
        let expect = 1.0 - lr * (g / (g + eps) + lam * 1.0);
        let got = store.get(store.find("w").unwrap()).data()[0];
        assert!((got - expect).abs() <= 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn adamw_rejects_non_finite_grads() {
        let mut store = scalar_store(1.0, Some(f64::NAN));
        let mut state = OptimState::new(&store);
        assert!(adamw_step(&mut store, &mut state, 0.1, (0.9, 0.95), 0.0, 1e-8).is_err());
        // parameter untouched by the aborted step
        assert_eq!(store.get(store.find("w").unwrap()).data()[0], 1.0);
    }
}
