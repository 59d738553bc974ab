//! Mini-batch training: Adam with coupled L2 weight decay, a stepped
//! learning-rate schedule, the weighted multi-task loss, and periodic
//! validation with best-checkpoint tracking. Runs are bit-reproducible from
//! the config seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{AugmentationPolicy, DataError, ImageStore, Split};
use crate::eval::{predict_label, PredictionMode};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::model::{ModelError, Network, Parameter};
use crate::tensor::{Element, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {what} at iteration {iteration} in {name}")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        name: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Milestones at the 20/40/60/70% points of the run, the same shape as the
/// full-scale schedule (2000/4000/6000/7000 of 10000).
pub fn proportional_milestones(total_iterations: usize) -> Vec<usize> {
    [0.2, 0.4, 0.6, 0.7]
        .iter()
        .map(|f| ((total_iterations as f64) * f).round() as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub validation_interval: usize,
    /// Cap on validation samples used for history tracking; 0 means the
    /// whole validation split.
    pub validation_cap: usize,
    pub augmentation: AugmentationPolicy,
    /// Mode used for tracked validation accuracy and checkpoint selection.
    /// Runs that zero out the holistic loss should score their digit heads.
    pub eval_mode: PredictionMode,
}

impl Default for TrainConfig {
    /// The full-scale recipe: 10000 iterations, batch 100, Adam at 1e-3 with
    /// L2 weight decay 1e-3, decayed by 0.33 after 2000/4000/6000/7000.
    fn default() -> Self {
        TrainConfig {
            total_iterations: 10_000,
            batch_size: 100,
            base_lr: 1e-3,
            lr_decay_factor: 0.33,
            lr_milestones: vec![2000, 4000, 6000, 7000],
            weight_decay: 1e-3,
            loss_weights: LossWeights::multitask_best(),
            seed: 0,
            validation_interval: 500,
            validation_cap: 0,
            augmentation: AugmentationPolicy::default(),
            eval_mode: PredictionMode::MultiTaskDefault,
        }
    }
}

impl TrainConfig {
    /// Same recipe rescaled to a smaller iteration budget.
    pub fn with_total_iterations(total: usize) -> Self {
        TrainConfig {
            total_iterations: total,
            lr_milestones: proportional_milestones(total),
            validation_interval: (total / 10).max(1),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_iterations == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "total_iterations and batch_size must be positive".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.lr_decay_factor <= 0.0 || self.lr_decay_factor > 1.0 {
            return Err(TrainError::Config(format!(
                "bad lr {} / decay factor {}",
                self.base_lr, self.lr_decay_factor
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("negative weight decay".into()));
        }
        if self.validation_interval == 0 {
            return Err(TrainError::Config("validation_interval must be positive".into()));
        }
        let mut prev: Option<usize> = None;
        for &m in &self.lr_milestones {
            if m >= self.total_iterations {
                return Err(TrainError::Config(format!(
                    "milestone {m} not below total_iterations {}",
                    self.total_iterations
                )));
            }
            if let Some(p) = prev {
                if m <= p {
                    return Err(TrainError::Config("milestones must be strictly increasing".into()));
                }
            }
            prev = Some(m);
        }
        Ok(())
    }
}

/// Learning rate at `iteration`: base times decay per milestone reached.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .lr_milestones
        .iter()
        .filter(|&&m| m <= iteration)
        .count();
    cfg.base_lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<E: Element> AdamState<E> {
    pub fn new(params: &[Parameter<E>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![E::zero(); p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![E::zero(); p.value.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with coupled L2 decay: the decay term joins the gradient
/// before the moment updates. Rejects non-finite gradients, naming the
/// offending parameter.
pub fn adam_step<E: Element>(
    params: &mut [Parameter<E>],
    grads: &[Vec<E>],
    state: &mut AdamState<E>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(ADAM_BETA1);
    let b2 = E::from_f64(ADAM_BETA2);
    let one = E::one();
    let bc1 = E::from_f64(1.0 - ADAM_BETA1.powi(t));
    let bc2 = E::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = E::from_f64(ADAM_EPS);
    let lr_e = E::from_f64(lr);
    let wd = E::from_f64(weight_decay);

    for (pi, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "gradient",
                iteration: state.step as usize,
                name: param.name.clone(),
            });
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for (((p, &g), mi), vi) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g + wd * *p;
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p - lr_e * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One tracked validation point.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("iteration,lr,loss_total,loss_holistic,loss_digit1,loss_digit2,val_accuracy\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.10},{:.8},{:.8},{:.8},{:.8},{:.6}\n",
                r.iteration, r.lr, r.loss.total, r.loss.holistic, r.loss.digit1, r.loss.digit2,
                r.val_accuracy
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TrainError::Config("empty history csv".into()))?;
        if !header.starts_with("iteration,lr,loss_total") {
            return Err(TrainError::Config(format!("bad history header {header:?}")));
        }
        let mut records = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(TrainError::Config(format!("bad history row {line:?}")));
            }
            let parse = |s: &str| -> Result<f64, TrainError> {
                s.parse()
                    .map_err(|e| TrainError::Config(format!("bad number {s:?}: {e}")))
            };
            let (holistic, digit1, digit2) = (parse(f[3])?, parse(f[4])?, parse(f[5])?);
            records.push(HistoryRecord {
                iteration: f[0]
                    .parse()
                    .map_err(|e| TrainError::Config(format!("bad iteration: {e}")))?,
                lr: parse(f[1])?,
                loss: LossBreakdown {
                    holistic,
                    digit1,
                    digit2,
                    digitwise: 0.0,
                    total: parse(f[2])?,
                },
                val_accuracy: parse(f[6])?,
            });
        }
        Ok(TrainingHistory { records })
    }
}

/// A finished run: the final model, the best-validation snapshot, and the
/// tracked history.
pub struct TrainOutcome<E: Element> {
    pub final_model: Network<E>,
    pub best_model: Network<E>,
    pub best_iteration: u64,
    pub best_val_accuracy: f64,
    pub history: TrainingHistory,
}

/// Runs the full training loop over the manifest behind `store`.
///
/// Batches sample the train split uniformly with replacement from the config
/// seed; validation accuracy is recorded every `validation_interval`
/// iterations and the best-accuracy snapshot (ties to the earliest) is
/// returned alongside the final model.
pub fn train<E: Element>(
    model: Network<E>,
    store: &mut ImageStore,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<E>, TrainError> {
    cfg.validate()?;
    if model.classes() != &store.manifest().class_set {
        return Err(TrainError::Config(
            "model class set does not match the dataset manifest".into(),
        ));
    }
    let n_train = store.manifest().split_len(Split::Train);
    if n_train == 0 {
        return Err(TrainError::Config("empty train split".into()));
    }
    let n_val = store.manifest().split_len(Split::Val);
    if n_val == 0 {
        return Err(TrainError::Config("empty validation split".into()));
    }

    let mut model = model;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x85EB_CA6B));
    let mut subset_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC2B2_AE35));

    // Fixed validation subset for tracking (deterministic from the seed).
    let val_subset: Vec<usize> = if cfg.validation_cap > 0 && cfg.validation_cap < n_val {
        sample_without_replacement(n_val, cfg.validation_cap, &mut subset_rng)
    } else {
        (0..n_val).collect()
    };

    let mut adam = AdamState::new(model.params());
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, u64, Network<E>)> = None;

    let w = cfg.loss_weights;
    for iter in 0..cfg.total_iterations {
        let lr = lr_at(iter, cfg);
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..n_train))
            .collect();
        let (batch, targets) =
            store.load_batch::<E>(Split::Train, &indices, &cfg.augmentation, &mut aug_rng)?;

        let (breakdown, grads) = forward_backward(&model, &batch, &targets, w).map_err(|e| {
            match e {
                TrainError::NonFinite { what, name, .. } => TrainError::NonFinite {
                    what,
                    iteration: iter,
                    name,
                },
                other => other,
            }
        })?;
        adam_step(model.params_mut(), &grads, &mut adam, lr, cfg.weight_decay)?;

        let step = iter + 1;
        if step % cfg.validation_interval == 0 || step == cfg.total_iterations {
            let acc =
                accuracy_on_subset(&model, store, Split::Val, &val_subset, cfg.eval_mode)?;
            history.records.push(HistoryRecord {
                iteration: step as u64,
                lr,
                loss: breakdown,
                val_accuracy: acc,
            });
            let better = match &best {
                None => true,
                Some((best_acc, _, _)) => acc > *best_acc,
            };
            if better {
                best = Some((acc, step as u64, model.clone()));
            }
        }
    }

    let (best_val_accuracy, best_iteration, best_model) =
        best.expect("at least one validation point");
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_iteration,
        best_val_accuracy,
        history,
    })
}

/// One loss evaluation with gradients for a batch, computed as two
/// half-batches in parallel and recombined as an exact sample-count-weighted
/// mean. Both halves run identical kernels, so results are deterministic for
/// any thread count; per-head losses with weight zero contribute no gradient
/// at all, leaving gated heads' gradients exactly zero.
pub fn forward_backward<E: Element>(
    model: &Network<E>,
    batch: &Tensor<E>,
    targets: &[crate::codec::TargetTriple],
    w: LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<E>>), TrainError> {
    let n = batch.shape()[0];
    assert_eq!(targets.len(), n);
    let n_a = n / 2;

    let single = n_a == 0 || n_a == n;
    let run_half = |lo: usize, hi: usize| -> Result<Option<HalfResult<E>>, TrainError> {
        if lo == hi {
            return Ok(None);
        }
        let (h, wpx) = (batch.shape()[2], batch.shape()[3]);
        let plane = 3 * h * wpx;
        let slice = Tensor::new(
            vec![hi - lo, 3, h, wpx],
            batch.data()[lo * plane..hi * plane].to_vec(),
        )
        .expect("contiguous half batch");
        let mut tape = if single { Tape::new() } else { Tape::serial() };
        let ids = model.forward_on_tape(&mut tape, &slice, true)?;
        let t_hol: Vec<usize> = targets[lo..hi].iter().map(|t| t.holistic_idx).collect();
        let t_d1: Vec<usize> = targets[lo..hi].iter().map(|t| t.digit1_idx).collect();
        let t_d2: Vec<usize> = targets[lo..hi].iter().map(|t| t.digit2_idx).collect();
        let l_hol = tape.cross_entropy_mean(ids.logits_holistic, &t_hol)?;
        let l_d1 = tape.cross_entropy_mean(ids.logits_digit1, &t_d1)?;
        let l_d2 = tape.cross_entropy_mean(ids.logits_digit2, &t_d2)?;
        let total = tape.weighted_sum(&[
            (l_hol, E::from_f64(w.alpha())),
            (l_d1, E::from_f64(w.beta())),
            (l_d2, E::from_f64(w.gamma())),
        ])?;
        tape.backward(total)?;
        let grads: Vec<Option<Vec<E>>> = ids
            .params
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect();
        Ok(Some(HalfResult {
            count: hi - lo,
            holistic: tape.scalar_value(l_hol)?.as_f64(),
            digit1: tape.scalar_value(l_d1)?.as_f64(),
            digit2: tape.scalar_value(l_d2)?.as_f64(),
            grads,
        }))
    };

    let (ra, rb) = rayon::join(|| run_half(0, n_a), || run_half(n_a, n));
    let halves: Vec<HalfResult<E>> = [ra?, rb?].into_iter().flatten().collect();

    // Exact weighted recombination of per-half means.
    let inv_n = 1.0 / n as f64;
    let mut holistic = 0.0;
    let mut digit1 = 0.0;
    let mut digit2 = 0.0;
    let mut grads: Vec<Vec<E>> = model
        .params()
        .iter()
        .map(|p| vec![E::zero(); p.value.numel()])
        .collect();
    for half in &halves {
        let frac = half.count as f64 * inv_n;
        holistic += frac * half.holistic;
        digit1 += frac * half.digit1;
        digit2 += frac * half.digit2;
        let frac_e = E::from_f64(frac);
        for (acc, g) in grads.iter_mut().zip(&half.grads) {
            if let Some(g) = g {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a = *a + frac_e * v;
                }
            }
        }
    }
    let breakdown = total_loss(holistic, digit1, digit2, w);
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite {
            what: "loss",
            iteration: 0,
            name: "total".into(),
        });
    }
    Ok((breakdown, grads))
}

struct HalfResult<E: Element> {
    count: usize,
    holistic: f64,
    digit1: f64,
    digit2: f64,
    grads: Vec<Option<Vec<E>>>,
}

/// Accuracy of the default prediction mode over a whole split. Side-effect
/// free: the model is untouched and no augmentation is applied.
pub fn validate<E: Element>(
    model: &Network<E>,
    store: &mut ImageStore,
    split: Split,
) -> Result<f64, TrainError> {
    let n = store.manifest().split_len(split);
    if n == 0 {
        return Err(TrainError::Config(format!("empty split {}", split.tag())));
    }
    let indices: Vec<usize> = (0..n).collect();
    accuracy_on_subset(model, store, split, &indices, PredictionMode::MultiTaskDefault)
}

/// Accuracy of `mode` over the given subset of a split.
pub fn accuracy_on_subset<E: Element>(
    model: &Network<E>,
    store: &mut ImageStore,
    split: Split,
    subset: &[usize],
    mode: PredictionMode,
) -> Result<f64, TrainError> {
    if subset.is_empty() {
        return Err(TrainError::Config("empty evaluation subset".into()));
    }
    let classes = model.classes().clone();
    let split_records = store.manifest().split_indices(split);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: no augmentation
    let mut correct = 0usize;
    for chunk in subset.chunks(EVAL_CHUNK) {
        let (batch, _) =
            store.load_batch::<E>(split, chunk, &AugmentationPolicy::none(), &mut rng)?;
        let preds = model.forward(&batch)?;
        for (pred, &subset_idx) in preds.iter().zip(chunk) {
            let truth = store.manifest().records[split_records[subset_idx]].label;
            if predict_label(pred, mode, &classes) == truth {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / subset.len() as f64)
}

const EVAL_CHUNK: usize = 64;

fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // Partial Fisher-Yates over the index range.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Exports a training batch tensor for inspection; mainly a debugging hook.
pub fn batch_to_tensor<E: Element>(images: &[Vec<f64>], h: usize, w: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.iter().map(|&v| E::from_f64(v)));
    }
    Tensor::new(vec![images.len(), 3, h, w], data).expect("consistent image sizes")
}
