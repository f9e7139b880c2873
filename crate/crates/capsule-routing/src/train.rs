//! Training and evaluation.
//!
//! Classification uses a spread loss over class activations with a margin
//! scheduled linearly from 0.2 to 0.9 across training. The optimizer is
//! Adam (beta 0.9/0.999, eps 1e-8) at base rate 3e-3 under continuous
//! exponential decay. Batches split into fixed-size shards; each shard runs
//! forward/backward on its own tape (in parallel), and gradients,
//! batch-norm statistics and losses merge in shard order at a
//! synchronization point, so results do not depend on the worker count.
//! Checkpoints are written whenever validation accuracy improves; the final
//! report evaluates the best checkpoint on the test split.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::preprocess::{make_batch, Mode};
use crate::data::{Dataset, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::net::{checkpoint, Network};
use crate::tensor::params::{ParamId, ParamKind, ParamStore, Session};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Spread loss, summed over the batch: for each sample,
/// `sum_{i != target} max(0, margin - (a_target - a_i))^2`.
pub fn spread_loss<'g, T: Scalar>(
    activations: Var<'g, T>,
    targets: &[usize],
    margin: T,
) -> Result<Var<'g, T>> {
    let shape = activations.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "spread_loss",
            lhs: shape,
            rhs: vec![targets.len(), 0],
        });
    }
    let (b, o) = (shape[0], shape[1]);
    if margin <= T::zero() || margin >= T::one() {
        return Err(Error::InvalidArgument {
            what: format!("margin must lie in (0, 1), got {margin}"),
        });
    }
    let mut onehot = Tensor::<T>::zeros(&[b, o]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= o {
            return Err(Error::InvalidArgument {
                what: format!("target {t} out of range for {o} classes"),
            });
        }
        onehot.data_mut()[i * o + t] = T::one();
    }
    let tape = activations.tape();
    let mask = tape.constant(onehot.clone());
    let inv_mask = tape.constant(onehot.map(|x| T::one() - x));
    let a_target = activations.mul(mask)?.sum_axis(1)?; // [B]
    let z = activations
        .sub(a_target.expand_axis(1, o)?)?
        .add_const(margin)
        .relu();
    z.mul(z)?.mul(inv_mask)?.sum_all().mul(tape.scalar(T::one())) // no-op keeps type
        .map_err(Into::into)
}

/// Adam with bias correction and continuous exponential learning-rate decay.
pub struct Adam<T> {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    rejected: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradient: state untouched, incident counted.
    Rejected,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, base_lr: f64, decay_rate: f64, decay_steps: usize) -> Self {
        let moments: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        Adam {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate,
            decay_steps: decay_steps.max(1),
            step: 0,
            m: moments.clone(),
            v: moments,
            rejected: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    /// Learning rate for a given 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.base_lr * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }

    /// Rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    pub fn apply(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
    ) -> Result<StepOutcome> {
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                self.rejected += 1;
                return Ok(StepOutcome::Rejected);
            }
        }
        let lr = T::of(self.current_lr());
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let eps = T::of(self.eps);
        let bc1 = T::of(1.0 - self.beta1.powf(t));
        let bc2 = T::of(1.0 - self.beta2.powf(t));
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(idx);
            if store.get(id).kind != ParamKind::Param {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut value = store.value(id).clone();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                value.data_mut()[i] = value.data()[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            store.set_value(id, value);
        }
        Ok(StepOutcome::Applied)
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) {
    let mut total = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            let x = x.to_f64c();
            total += x * x;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per worker tape; fixed so results are independent of the
    /// worker count.
    pub shard_size: usize,
    pub workers: usize,
    pub base_lr: f64,
    pub decay_rate: f64,
    /// Steps per decay period; defaults to one epoch's step count.
    pub decay_steps: Option<usize>,
    pub margin_start: f64,
    pub margin_end: f64,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub eval_batch: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 1,
            batch_size: 32,
            shard_size: 2,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            base_lr: 3e-3,
            decay_rate: 0.96,
            decay_steps: None,
            margin_start: 0.2,
            margin_end: 0.9,
            clip_norm: 10.0,
            val_fraction: 0.1,
            train_subset: None,
            test_subset: None,
            eval_batch: 64,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// One metrics-log line: epoch, train loss, validation accuracy,
    /// learning rate, wall time.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6e}\t{:.3}",
            self.epoch, self.train_loss, self.val_accuracy, self.lr, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_confusion: Vec<Vec<usize>>,
    pub checkpoint_dir: Option<PathBuf>,
    pub final_losses: Vec<f64>,
}

/// Stratified fixed-seed split of `0..n` into (train, validation) indices.
pub fn stratified_val_split(
    labels: &[u8],
    indices: &[usize],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76616c); // "val"
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut group) in by_class {
        group.shuffle(&mut rng);
        let take = ((group.len() as f64) * val_fraction).round() as usize;
        let take = take.min(group.len());
        val.extend(group.drain(..take));
        train.extend(group);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct ShardResult<T> {
    loss_sum: f64,
    grads: Vec<(ParamId, Tensor<T>)>,
    stats: Vec<(ParamId, Tensor<T>)>,
}

fn run_shard<T: Scalar>(
    net: &Network<T>,
    kind: DatasetKind,
    split: &Split,
    indices: &[usize],
    margin: f64,
    seed: u64,
    epoch: u64,
) -> Result<ShardResult<T>> {
    let batch = make_batch::<T>(kind, split, indices, Mode::Train, seed, epoch)?;
    let tape = Tape::new();
    let sess = Session::new(&tape, &net.store, true);
    let images = tape.constant(batch.images);
    let out = net.forward(&sess, images)?;
    let loss = spread_loss(out.class_activations, &batch.labels, T::of(margin))?;
    let loss_sum = loss.value().item().to_f64c();
    let grads = tape.backward(loss)?;
    Ok(ShardResult {
        loss_sum,
        grads: sess.param_grads(&grads),
        stats: sess.take_batch_stats(),
    })
}

/// Train a network, tracking metrics and checkpointing on validation
/// improvement. Returns per-epoch metrics and the best checkpoint's test
/// accuracy; the network is left holding the best parameters.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_meta: &BTreeMap<String, String>,
) -> Result<TrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.shard_size == 0 {
        return Err(Error::InvalidArgument {
            what: "epochs, batch_size and shard_size must be positive".into(),
        });
    }
    let kind = dataset.kind;
    let all_train: Vec<usize> = match cfg.train_subset {
        Some(n) => (0..n.min(dataset.train.len())).collect(),
        None => (0..dataset.train.len()).collect(),
    };
    let (train_idx, val_idx) =
        stratified_val_split(&dataset.train.labels, &all_train, cfg.val_fraction, cfg.seed);
    let test_idx: Vec<usize> = match cfg.test_subset {
        Some(n) => (0..n.min(dataset.test.len())).collect(),
        None => (0..dataset.test.len()).collect(),
    };
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut optimizer = Adam::new(
        &net.store,
        cfg.base_lr,
        cfg.decay_rate,
        cfg.decay_steps.unwrap_or(steps_per_epoch),
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Training {
            detail: format!("worker pool: {e}"),
        })?;

    let mut epochs = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut final_losses = Vec::new();
    let checkpoint_dir = cfg.out_dir.as_ref().map(|d| d.join("checkpoint-best"));
    let started = Instant::now();
    let mut nonfinite_streak = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_samples = 0usize;

        for batch_indices in order.chunks(cfg.batch_size) {
            let step = optimizer.steps_taken();
            let margin = cfg.margin_start
                + (cfg.margin_end - cfg.margin_start)
                    * (step as f64 / total_steps as f64).min(1.0);
            let shards: Vec<&[usize]> = batch_indices.chunks(cfg.shard_size).collect();
            let results: Vec<Result<ShardResult<T>>> = pool.install(|| {
                use rayon::prelude::*;
                shards
                    .par_iter()
                    .map(|shard| {
                        run_shard(
                            net,
                            kind,
                            &dataset.train,
                            shard,
                            margin,
                            cfg.seed,
                            epoch as u64,
                        )
                    })
                    .collect()
            });
            let mut shard_results = Vec::with_capacity(results.len());
            for r in results {
                shard_results.push(r?);
            }
            let batch_n = batch_indices.len() as f64;
            let loss =
                shard_results.iter().map(|s| s.loss_sum).sum::<f64>() / batch_n;
            if !loss.is_finite() {
                nonfinite_streak += 1;
                if nonfinite_streak >= 3 {
                    return Err(Error::Training {
                        detail: format!(
                            "non-finite loss for {nonfinite_streak} consecutive batches at step {step}"
                        ),
                    });
                }
                continue;
            }
            nonfinite_streak = 0;
            epoch_loss += loss * batch_n;
            epoch_samples += batch_indices.len();
            final_losses.push(loss);

            // merge gradients in shard order, scale to a batch mean
            let shard_grads: Vec<Vec<(ParamId, Tensor<T>)>> =
                shard_results.iter().map(|s| s.grads.clone()).collect();
            let mut merged =
                crate::tensor::params::merge_grad_shards(&net.store, &shard_grads)?;
            let inv = T::of(1.0 / batch_n);
            for g in merged.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x = *x * inv;
                }
            }
            clip_global_norm(&mut merged, cfg.clip_norm);
            let outcome = optimizer.apply(&mut net.store, &merged)?;
            if outcome == StepOutcome::Rejected {
                eprintln!("step {step}: non-finite gradient, update rejected");
            }
            let stats: Vec<(ParamId, Tensor<T>)> = shard_results
                .into_iter()
                .flat_map(|s| s.stats)
                .collect();
            net.apply_batch_stats(&stats);
        }

        let val = evaluate_indices(net, kind, &dataset.train, &val_idx, cfg.eval_batch, &pool)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / epoch_samples.max(1) as f64,
            val_accuracy: val.accuracy,
            lr: optimizer.lr_at(optimizer.steps_taken().saturating_sub(1)),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        epochs.push(metrics);

        if val.accuracy > best_val {
            best_val = val.accuracy;
            if let Some(dir) = &checkpoint_dir {
                let mut meta = checkpoint_meta.clone();
                meta.insert("best_val_accuracy".into(), format!("{:.6}", val.accuracy));
                meta.insert("epoch".into(), epochs.len().to_string());
                checkpoint::save(dir, &net.store, &meta)?;
            }
        }
    }

    // evaluate the best recorded parameters on the test split
    if let Some(dir) = &checkpoint_dir {
        checkpoint::load_into(dir, &mut net.store)?;
    }
    let test = evaluate_indices(net, kind, &dataset.test, &test_idx, cfg.eval_batch, &pool)?;
    Ok(TrainReport {
        epochs,
        best_val_accuracy: best_val,
        test_accuracy: test.accuracy,
        test_confusion: test.confusion,
        checkpoint_dir,
        final_losses,
    })
}

fn evaluate_indices<T: Scalar>(
    net: &Network<T>,
    kind: DatasetKind,
    split: &Split,
    indices: &[usize],
    eval_batch: usize,
    pool: &rayon::ThreadPool,
) -> Result<EvalReport> {
    let classes = net.config.classes;
    let chunks: Vec<&[usize]> = indices.chunks(eval_batch.max(1)).collect();
    let partials: Vec<Result<Vec<Vec<usize>>>> = pool.install(|| {
        use rayon::prelude::*;
        chunks
            .par_iter()
            .map(|chunk| {
                let batch = make_batch::<T>(kind, split, chunk, Mode::Eval, 0, 0)?;
                let tape = Tape::new();
                let sess = Session::new(&tape, &net.store, false);
                let images = tape.constant(batch.images);
                let out = net.forward(&sess, images)?;
                let acts = out.class_activations.value();
                let mut confusion = vec![vec![0usize; classes]; classes];
                for (i, &label) in batch.labels.iter().enumerate() {
                    let row = &acts.data()[i * classes..(i + 1) * classes];
                    let mut arg = 0usize;
                    for (j, &a) in row.iter().enumerate() {
                        if a > row[arg] {
                            arg = j;
                        }
                    }
                    confusion[label][arg] += 1;
                }
                Ok(confusion)
            })
            .collect()
    });
    let mut confusion = vec![vec![0usize; classes]; classes];
    for p in partials {
        let p = p?;
        for (r, row) in p.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                confusion[r][c] += v;
            }
        }
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / indices.len().max(1) as f64,
        confusion,
        samples: indices.len(),
    })
}

/// Deterministic center-crop evaluation of a stored checkpoint-compatible
/// network over a full split (or subset).
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    dataset: &Dataset,
    subset: Option<usize>,
    eval_batch: usize,
    workers: usize,
) -> Result<EvalReport> {
    let indices: Vec<usize> = match subset {
        Some(n) => (0..n.min(dataset.test.len())).collect(),
        None => (0..dataset.test.len()).collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Training {
            detail: format!("worker pool: {e}"),
        })?;
    evaluate_indices(net, dataset.kind, &dataset.test, &indices, eval_batch, &pool)
}
