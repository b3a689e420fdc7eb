//! Loss, optimizer, scheduler, augmentation and the two-stage trainer.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{OBS_STEPS, PRED_STEPS};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::eval::{ade, fde, predict_all, MIN_OBSERVED};
use crate::features::{SocialMatrix, SOCIAL_COLS};
use crate::model::{Checkpoint, Model};
use crate::scalar::Scalar;
use crate::tensor::{relative_error, Tape, Tensor, Var};

/// Added under the square root of every loss distance.
pub const LOSS_SMOOTHING: f64 = 1e-12;
/// Samples per tape. Batches are split into fixed chunks whose gradients are
/// summed in order, so results do not depend on the thread count.
pub const GRAD_CHUNK: usize = 32;
/// Finite-difference steps used by [`audit_gradients`] in the test suites.
pub const AUDIT_STEPS: [f64; 3] = [3e-5, 1e-5, 3e-6];

/// Mean smoothed Euclidean distance between `[.., 2]` trajectories.
pub fn ade_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, truth: Var) -> Result<Var> {
    tape.displacement_mean(pred, truth, T::of(LOSS_SMOOTHING))
}

/// Loss of `model` (bound as `params`) on `batch`, using upsampled output.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    batch: &[&Instance],
) -> Result<Var> {
    let inputs: Vec<_> = batch.iter().map(|i| (&i.social, &i.map)).collect();
    let out = model.forward(tape, params, &inputs)?;
    let target = batch
        .iter()
        .flat_map(|i| i.target.iter().flatten())
        .map(|&v| T::of(v))
        .collect();
    let truth = tape.constant(Tensor::new(&[batch.len(), PRED_STEPS, 2], target)?);
    ade_loss(tape, out.full, truth)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with decoupled weight decay applied first.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::validation(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr_t, eps) = (T::of(lr), T::of(state.eps));
    let decay = T::of(1.0 - lr * weight_decay);
    let one = T::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in iter {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Reduce-on-plateau controller for the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Self {
        Plateau {
            factor,
            patience,
            min_delta,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one validation value and returns the multiplier to apply now
    /// (1 or `factor`). Only a drop larger than `min_delta` counts as
    /// improvement.
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(best) if !(best - value > self.min_delta) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.bad_epochs = 0;
                    return self.factor;
                }
            }
            _ => {
                self.best = Some(value);
                self.bad_epochs = 0;
            }
        }
        1.0
    }
}

/// Cumulative learning-rate multiplier after replaying `history`.
pub fn plateau_scheduler(history: &[f64], factor: f64, patience: usize, min_delta: f64) -> f64 {
    let mut p = Plateau::new(factor, patience, min_delta);
    history.iter().map(|&v| p.observe(v)).product()
}

/// Number of most recent steps kept by one stage-2 batch, uniform in 2..=10.
pub fn draw_keep_steps(rng: &mut impl Rng) -> usize {
    rng.gen_range(MIN_OBSERVED..=OBS_STEPS)
}

/// Zero-fills every position older than the `keep` most recent steps.
pub fn dropout_history(batch: &mut [SocialMatrix], keep: usize) -> Result<()> {
    if !(MIN_OBSERVED..=OBS_STEPS).contains(&keep) {
        return Err(Error::validation(format!(
            "keep_steps {keep} outside {MIN_OBSERVED}..={OBS_STEPS}"
        )));
    }
    for m in batch {
        m.truncate_history(keep);
    }
    Ok(())
}

/// Gaussian noise on positional entries of non-padding rows, leaving the
/// focal agent's current position at the origin.
pub fn add_noise(batch: &mut [SocialMatrix], std: f64, rng: &mut impl Rng) -> Result<()> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::validation(format!(
            "noise std {std} must be finite and non-negative"
        )));
    }
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::validation(e.to_string()))?;
    for m in batch {
        for r in 0..m.values.len() {
            if m.is_padding(r) {
                continue;
            }
            let first = if r == 0 { 3 } else { 1 };
            for v in &mut m.values[r][first..SOCIAL_COLS] {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs per stage.
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub min_lr: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Worker threads for gradient chunks and validation.
    pub threads: usize,
    /// Write wall-clock seconds into the metrics log (zero otherwise).
    pub record_seconds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 256,
            max_epochs: 60,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            min_lr: 1e-6,
            noise_std: 0.0,
            seed: 0,
            threads: 1,
            record_seconds: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("plateau_min_delta", self.plateau_min_delta),
            ("min_lr", self.min_lr),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::validation(format!(
                "plateau_factor {} outside (0, 1]",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs must be at least 1"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::validation("plateau_patience must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::validation("threads must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Full histories.
    One,
    /// Per-batch history dropout, continuing from existing weights.
    Two,
    /// Stage one, then stage two from the best stage-one weights.
    Both,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" | "one" | "stage1" => Some(Stage::One),
            "2" | "two" | "stage2" => Some(Stage::Two),
            "both" => Some(Stage::Both),
            _ => None,
        }
    }

    fn phases(self) -> &'static [u8] {
        match self {
            Stage::One => &[1],
            Stage::Two => &[2],
            Stage::Both => &[1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub val_ade: f64,
    pub val_fde: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,stage,train_loss,val_ade,val_fde,lr,seconds";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.stage, r.train_loss, r.val_ade, r.val_fde, r.lr, r.seconds
        );
    }
    out
}

/// Progress that, together with model and optimizer tensors, fully
/// determines the rest of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    stage: Stage,
    phase: usize,
    epoch_in_phase: usize,
    lr: f64,
    adam_step: u64,
    plateau: Plateau,
    best_val_ade: Option<f64>,
    log: Vec<EpochMetrics>,
    config: TrainConfig,
}

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";
const BEST: &str = "best.";

/// Runs stage 1, stage 2 or both over in-memory instances.
pub struct Trainer<'a, T: Scalar> {
    train: &'a [Instance],
    val: &'a [Instance],
    config: TrainConfig,
    model: Model<T>,
    best: Model<T>,
    opt: OptimizerState<T>,
    progress: Progress,
    pool: Option<rayon::ThreadPool>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Stage two alone continues from `model`, which should be trained.
    pub fn new(
        model: Model<T>,
        train: &'a [Instance],
        val: &'a [Instance],
        config: TrainConfig,
        stage: Stage,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        if val.is_empty() {
            return Err(Error::validation("validation set is empty"));
        }
        let pool = match config.threads {
            1 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::validation(format!("thread pool: {e}")))?,
            ),
        };
        let progress = Progress {
            stage,
            phase: 0,
            epoch_in_phase: 0,
            lr: config.lr,
            adam_step: 0,
            plateau: Plateau::new(
                config.plateau_factor,
                config.plateau_patience,
                config.plateau_min_delta,
            ),
            best_val_ade: None,
            log: Vec::new(),
            config: config.clone(),
        };
        Ok(Trainer {
            train,
            val,
            opt: OptimizerState::new(model.params()),
            best: model.clone(),
            model,
            config,
            progress,
            pool,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// Everything except the thread count comes from the checkpoint.
    pub fn resume(
        ck: Checkpoint<T>,
        train: &'a [Instance],
        val: &'a [Instance],
        threads: usize,
    ) -> Result<Self> {
        let Checkpoint {
            model,
            extra,
            training,
            ..
        } = ck;
        let progress: Progress = serde_json::from_value(training).map_err(|e| {
            Error::Corrupt(format!("checkpoint has no resumable training state: {e}"))
        })?;
        let config = TrainConfig {
            threads,
            ..progress.config.clone()
        };
        let mut t = Trainer::new(model, train, val, config, progress.stage)?;
        let names: Vec<String> = t.model.param_names().map(str::to_owned).collect();
        let fetch = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .map(|n| {
                    let key = format!("{prefix}{n}");
                    extra
                        .iter()
                        .find(|(k, _)| *k == key)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{key}`")))
                })
                .collect()
        };
        t.opt.m = fetch(MOMENT_M)?;
        t.opt.v = fetch(MOMENT_V)?;
        t.opt.step = progress.adam_step;
        let best = fetch(BEST)?;
        let pairs = names.into_iter().zip(best).collect();
        t.best = Model::from_tensors(t.model.hyper().clone(), pairs)?;
        t.progress = Progress {
            config: t.config.clone(),
            ..progress
        };
        Ok(t)
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    /// Best validation model of the current (or last) stage.
    pub fn best_model(&self) -> &Model<T> {
        &self.best
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.progress.log
    }

    pub fn lr(&self) -> f64 {
        self.progress.lr
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase >= self.progress.stage.phases().len()
    }

    /// Current weights with optimizer state and progress, for resuming.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.model.clone());
        let names: Vec<&str> = self.model.param_names().collect();
        for (prefix, tensors) in [
            (MOMENT_M, &self.opt.m),
            (MOMENT_V, &self.opt.v),
            (BEST, &self.best.params().to_vec()),
        ] {
            for (n, t) in names.iter().zip(tensors.iter()) {
                ck.extra.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        let progress = Progress {
            adam_step: self.opt.step,
            ..self.progress.clone()
        };
        ck.training = serde_json::to_value(progress).expect("progress serializes");
        ck
    }

    /// Best model with a summary of the run.
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.best.clone());
        ck.training = serde_json::json!({
            "stage": self.progress.stage,
            "epochs": self.progress.log.len(),
            "best_val_ade": self.progress.best_val_ade,
            "config": self.config,
        });
        ck
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    fn epoch_rng(&self, phase: u8, epoch: usize) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.config.seed.to_le_bytes());
        seed[8] = phase;
        seed[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Loss and gradients for one batch, chunked in a fixed order.
    fn gradients(&self, batch: &[Instance]) -> Result<(f64, Vec<Tensor<T>>)> {
        let n = batch.len();
        let refs: Vec<&Instance> = batch.iter().collect();
        let model = &self.model;
        let parts: Vec<(f64, Vec<Tensor<T>>)> = self.in_pool(|| {
            refs.par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut tape = Tape::new();
                    let p = model.bind(&mut tape, true);
                    let loss = batch_loss(model, &mut tape, &p, chunk)?;
                    let weighted = tape.scale(loss, T::of(chunk.len() as f64 / n as f64));
                    let grads = tape.backward(weighted)?;
                    Ok((
                        tape.value(weighted).item().to_f64_lossy(),
                        p.iter().map(|&v| grads.get(v)).collect(),
                    ))
                })
                .collect::<Result<_>>()
        })?;
        let mut iter = parts.into_iter();
        let (mut loss, mut total) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            for (acc, part) in total.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                    *a += *b;
                }
            }
        }
        Ok((loss, total))
    }

    fn validate_model(&self) -> Result<(f64, f64)> {
        let pred = self.in_pool(|| predict_all(&self.model, self.val))?;
        let gt: Vec<_> = self.val.iter().map(|i| i.target.clone()).collect();
        Ok((ade(&pred, &gt)?, fde(&pred, &gt)?))
    }

    /// Trains one epoch; `None` once every stage has finished.
    pub fn run_epoch(&mut self) -> Result<Option<EpochMetrics>> {
        if self.is_done() {
            return Ok(None);
        }
        let start = Instant::now();
        let phase = self.progress.stage.phases()[self.progress.phase];
        let epoch_in_phase = self.progress.epoch_in_phase;
        let mut rng = self.epoch_rng(phase, epoch_in_phase);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let batches_before: usize =
            self.progress.log.len() * self.train.len().div_ceil(self.config.batch_size);
        let lr = self.progress.lr;
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let mut batch: Vec<Instance> = idx.iter().map(|&i| self.train[i].clone()).collect();
            let mut socials: Vec<SocialMatrix> = batch.iter().map(|i| i.social).collect();
            add_noise(&mut socials, self.config.noise_std, &mut rng)?;
            if phase == 2 {
                let keep = draw_keep_steps(&mut rng);
                dropout_history(&mut socials, keep)?;
            }
            for (inst, s) in batch.iter_mut().zip(socials) {
                inst.social = s;
            }
            let (loss, grads) = self.gradients(&batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical {
                    batch: batches_before + b,
                    msg: format!(
                        "loss {loss} in stage {phase}, epoch {}",
                        self.progress.log.len() + 1
                    ),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(
                self.model.params_mut(),
                &grads,
                &mut self.opt,
                lr,
                self.config.weight_decay,
            )?;
        }
        let train_loss = loss_sum / self.train.len() as f64;
        let (val_ade, val_fde) = self.validate_model()?;
        if self.progress.best_val_ade.map_or(true, |b| val_ade < b) {
            self.progress.best_val_ade = Some(val_ade);
            self.best = self.model.clone();
        }
        let factor = self.progress.plateau.observe(val_ade);
        if factor < 1.0 && self.progress.lr > self.config.min_lr {
            self.progress.lr = (self.progress.lr * factor).max(self.config.min_lr);
        }
        let metrics = EpochMetrics {
            epoch: self.progress.log.len() + 1,
            stage: phase,
            train_loss,
            val_ade,
            val_fde,
            lr,
            seconds: if self.config.record_seconds {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.progress.log.push(metrics);
        self.progress.epoch_in_phase += 1;
        if self.progress.epoch_in_phase == self.config.max_epochs {
            self.finish_phase();
        }
        Ok(Some(metrics))
    }

    fn finish_phase(&mut self) {
        self.progress.phase += 1;
        self.progress.epoch_in_phase = 0;
        if self.is_done() {
            return;
        }
        self.model = self.best.clone();
        self.opt = OptimizerState::new(self.model.params());
        self.progress.lr = self.config.lr;
        self.progress.plateau = Plateau::new(
            self.config.plateau_factor,
            self.config.plateau_patience,
            self.config.plateau_min_delta,
        );
        self.progress.best_val_ade = None;
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<&[EpochMetrics]> {
        while self.run_epoch()?.is_some() {}
        Ok(self.log())
    }
}

/// Result of [`audit_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientAudit {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Sampled coordinates whose analytic gradient was below the floor.
    pub skipped: usize,
}

/// Compares backward-pass gradients of the training loss on `batch` with
/// central differences, for `per_tensor` random coordinates of every
/// parameter tensor whose analytic gradient magnitude is at least `min_grad`.
///
/// Each coordinate is scored by its best agreement over the steps in `eps`;
/// a step that straddles a leaky-ReLU kink is spoiled, the others are not.
pub fn audit_gradients(
    model: &Model<f64>,
    batch: &[&Instance],
    eps: &[f64],
    per_tensor: usize,
    min_grad: f64,
    seed: u64,
) -> Result<GradientAudit> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let loss = batch_loss(model, &mut tape, &p, batch)?;
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss_with = |k: usize, value: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut p = model.bind(&mut tape, false);
        p[k] = tape.constant(value.clone());
        let l = batch_loss(model, &mut tape, &p, batch)?;
        Ok(tape.value(l).item())
    };
    if eps.is_empty() || eps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::validation(
            "audit_gradients needs positive finite-difference steps",
        ));
    }
    let mut audit = GradientAudit {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, x) in model.params().iter().enumerate() {
        let g = grads.get(p[k]);
        for _ in 0..per_tensor {
            let i = rng.gen_range(0..x.numel());
            let analytic = g.data()[i];
            if analytic.abs() < min_grad {
                audit.skipped += 1;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut probe = x.clone();
            for &h in eps {
                probe.data_mut()[i] = x.data()[i] + h;
                let up = loss_with(k, &probe)?;
                probe.data_mut()[i] = x.data()[i] - h;
                let down = loss_with(k, &probe)?;
                best = best.min(relative_error(analytic, (up - down) / (2.0 * h)));
            }
            audit.max_relative_error = audit.max_relative_error.max(best);
            audit.checked += 1;
        }
    }
    Ok(audit)
}
