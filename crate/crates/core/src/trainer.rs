//! Training loop: AdamW with linear warmup and cosine decay, global-norm
//! gradient clipping, seeded window sampling, and per-step router balancing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::moe::{self, BalanceStrategy};
use crate::tensor::{no_grad, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub balance: BalanceStrategy,
    pub gamma: f64,
    pub alpha: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Fraction of the corpus held out (taken from the end) for validation.
    pub val_fraction: f64,
    /// Final CV is measured on loads accumulated over this trailing fraction of steps.
    pub cv_window: f64,
    /// Number of validation windows scored at the end of a run.
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 64,
            lr_peak: 3e-4,
            lr_floor: 1e-5,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            balance: BalanceStrategy::BiasDiff,
            gamma: moe::DEFAULT_GAMMA,
            alpha: moe::DEFAULT_ALPHA,
            checkpoint_every: 0,
            val_fraction: 0.1,
            cv_window: 0.1,
            eval_windows: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(config_err("steps, batch_size and seq_len must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(config_err(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(config_err(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if !(self.cv_window > 0.0 && self.cv_window <= 1.0) {
            return Err(config_err(format!("cv_window must lie in (0, 1], got {}", self.cv_window)));
        }
        if self.lr_peak < 0.0 || self.lr_floor < 0.0 || self.adam_eps <= 0.0 {
            return Err(config_err("learning rates must be non-negative and adam_eps positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("beta1 and beta2 must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_fraction * self.steps as f64).round() as u64).clamp(1, self.steps)
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_floor` at `steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps();
    if step <= warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    let span = cfg.steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over every populated gradient.
pub fn grad_norm<T: Float>(params: &[Tensor<T>]) -> f64 {
    params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.into_iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `clip_norm`;
/// returns the factor applied.
pub fn clip_gradients<T: Float>(params: &[Tensor<T>], clip_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm <= clip_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = clip_norm / norm;
    for p in params {
        p.with_grad_mut(|g| g.iter_mut().for_each(|v| *v *= T::lit(factor)));
    }
    factor
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update of a single tensor at 1-based `step`. Decay is applied as
/// `θ -= lr·wd·θ` before the bias-corrected Adam delta.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Float>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    hp: &AdamHyper,
    decay: bool,
) {
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let c1 = T::lit(1.0 - hp.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - hp.beta2.powi(step as i32));
    let lr_t = T::lit(lr);
    let eps = T::lit(hp.eps);
    let shrink = T::lit(lr * hp.weight_decay);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        if decay {
            theta[i] -= shrink * theta[i];
        }
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment buffers for a fixed list of parameters.
pub struct AdamW<T: Float> {
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    decay: Vec<bool>,
}

impl<T: Float> AdamW<T> {
    /// Weight decay applies to matrices only; gains, offsets and other
    /// vectors are left undecayed.
    pub fn new(params: &[Tensor<T>], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            decay: params.iter().map(|p| p.ndim() >= 2).collect(),
        }
    }

    pub fn update(&mut self, params: &[Tensor<T>], lr: f64) {
        self.step += 1;
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (step, hyper, decay) = (self.step, self.hyper, self.decay[i]);
            p.update_data(|theta| adamw_step(theta, &grad, m, v, step, lr, &hyper, decay));
        }
    }
}

/// Token stream split into disjoint training and validation slices.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Corpus {
    /// The last `val_fraction` of the tokens become the validation slice.
    pub fn split(tokens: Vec<usize>, val_fraction: f64) -> Self {
        let cut = tokens.len() - (tokens.len() as f64 * val_fraction).floor() as usize;
        let mut train = tokens;
        let val = train.split_off(cut);
        Self { train, val }
    }

    /// Uniformly random `(inputs, targets)` windows from the training slice.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, seq_len: usize) -> Result<Vec<Window>> {
        if self.train.len() < seq_len + 1 {
            return Err(config_err(format!(
                "training slice of {} tokens is shorter than seq_len + 1 = {}",
                self.train.len(),
                seq_len + 1
            )));
        }
        let starts = self.train.len() - seq_len;
        Ok((0..batch)
            .map(|_| Window::at(&self.train, rng.gen_range(0..starts), seq_len))
            .collect())
    }

    /// Up to `max` non-overlapping windows from the start of the validation slice.
    pub fn val_windows(&self, seq_len: usize, max: usize) -> Vec<Window> {
        (0..)
            .map(|i| i * seq_len)
            .take_while(|&s| s + seq_len < self.val.len())
            .take(max)
            .map(|s| Window::at(&self.val, s, seq_len))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Window {
    fn at(tokens: &[usize], start: usize, len: usize) -> Self {
        Self {
            inputs: tokens[start..start + len].to_vec(),
            targets: tokens[start + 1..start + len + 1].to_vec(),
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Load CV of this step, per expert layer.
    pub cv: Vec<f64>,
}

/// One line of the route-stats stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub step: u64,
    pub layer: usize,
    pub loads: Vec<f64>,
    pub cv: f64,
    pub bias_min: f64,
    pub bias_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub val_loss: Option<f64>,
    /// Per-layer CV of loads accumulated over the trailing window.
    pub final_cv: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Where a run writes its artefacts; any of them may be omitted.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub route_stats: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Trainer<T: Float = f32> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    opt: AdamW<T>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<T: Float> Trainer<T> {
    /// Puts `model` in training mode and applies the run's balancing strategy.
    pub fn new(mut model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.seq_len > model.config().max_seq_len {
            return Err(config_err(format!(
                "seq_len {} exceeds max_seq_len {}",
                cfg.seq_len,
                model.config().max_seq_len
            )));
        }
        model.set_training(true);
        model.set_balancing(cfg.balance, cfg.gamma, cfg.alpha);
        model.reseed_dropout(cfg.seed ^ 0xd20f_0a7e);
        let opt = AdamW::new(&model.parameters(), AdamHyper::from(&cfg));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            opt,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Forward, backward, clip, AdamW, then one bias update per expert layer
    /// from the loads of the whole batch.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let batch = corpus.sample_batch(&mut self.rng, self.cfg.batch_size, self.cfg.seq_len)?;
        let step = self.step + 1;
        let lr = lr_at(step, &self.cfg);
        let params = self.model.parameters();
        self.model.zero_grad();

        let n_layers = self.model.routers().len();
        let mut counts: Vec<Vec<u64>> = self
            .model
            .routers()
            .iter()
            .map(|r| vec![0; r.n_routed()])
            .collect();
        let scale = T::lit(1.0 / batch.len() as f64);
        let mut loss_sum = 0.0;
        for w in &batch {
            let (loss, routes) = self.model.loss(&w.inputs, &w.targets)?;
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFinite { step, loss: value });
            }
            loss_sum += value;
            loss.scale(scale).backward()?;
            for (acc, r) in counts.iter_mut().zip(&routes) {
                acc.iter_mut().zip(r.counts()).for_each(|(a, c)| *a += c);
            }
        }
        let norm = grad_norm(&params);
        if !norm.is_finite() {
            return Err(Error::NonFinite { step, loss: norm });
        }
        clip_gradients(&params, self.cfg.clip_norm);
        self.opt.update(&params, lr);

        let mut cv = Vec::with_capacity(n_layers);
        for (state, c) in self.model.routers_mut().iter_mut().zip(&counts) {
            moe::observe_counts(state, c)?;
            cv.push(moe::load_cv(&state.loads).unwrap_or(f64::NAN));
        }
        self.step = step;
        Ok(StepMetrics {
            step,
            loss: loss_sum / batch.len() as f64,
            lr,
            grad_norm: norm,
            cv,
        })
    }

    /// Mean validation loss over fixed windows, without dropout or balancing.
    pub fn evaluate(&mut self, windows: &[Window]) -> Result<Option<f64>> {
        if windows.is_empty() {
            return Ok(None);
        }
        self.model.set_training(false);
        let total = no_grad(|| -> Result<f64> {
            let mut total = 0.0;
            for w in windows {
                let logits = self.model.forward(&w.inputs)?;
                total += logits.cross_entropy(&w.targets)?.item().to_f64().unwrap_or(f64::NAN);
            }
            Ok(total)
        });
        self.model.set_training(true);
        Ok(Some(total? / windows.len() as f64))
    }

    /// Runs the remaining steps, streaming metrics and route stats as
    /// JSON lines and writing checkpoints.
    pub fn run(&mut self, corpus: &Corpus, out: &RunOutputs) -> Result<TrainSummary> {
        let mut metrics = open_sink(&out.metrics)?;
        let mut routes = open_sink(&out.route_stats)?;
        if let Some(dir) = &out.checkpoint_dir {
            fs::create_dir_all(dir)?;
        }
        let window_start = self.cfg.steps - ((self.cfg.cv_window * self.cfg.steps as f64).ceil() as u64).max(1);
        let mut window: Vec<Vec<u64>> = self.model.routers().iter().map(|r| vec![0; r.n_routed()]).collect();
        let mut initial = None;
        let mut last = f64::NAN;
        while self.step < self.cfg.steps {
            let before: Vec<Vec<u64>> = self.model.routers().iter().map(|r| r.totals.clone()).collect();
            let m = match self.train_step(corpus) {
                Ok(m) => m,
                Err(Error::NonFinite { step, loss }) => {
                    if let Some(w) = metrics.as_mut() {
                        let record = serde_json::json!({
                            "step": step,
                            "error": "non-finite loss",
                            "loss": loss.to_string(),
                        });
                        writeln!(w, "{record}")?;
                        w.flush()?;
                    }
                    return Err(Error::NonFinite { step, loss });
                }
                Err(e) => return Err(e),
            };
            initial.get_or_insert(m.loss);
            last = m.loss;
            if m.step > window_start {
                for ((acc, state), prev) in window.iter_mut().zip(self.model.routers()).zip(&before) {
                    for ((a, t), p) in acc.iter_mut().zip(&state.totals).zip(prev) {
                        *a += t - p;
                    }
                }
            }
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&m)?)?;
            }
            if let Some(w) = routes.as_mut() {
                for (layer, state) in self.model.routers().iter().enumerate() {
                    let record = RouteRecord {
                        step: m.step,
                        layer,
                        loads: state.loads.clone(),
                        cv: m.cv[layer],
                        bias_min: state.bias.iter().copied().fold(f64::INFINITY, f64::min),
                        bias_max: state.bias.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    };
                    writeln!(w, "{}", serde_json::to_string(&record)?)?;
                }
            }
            if let Some(dir) = &out.checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && m.step % self.cfg.checkpoint_every == 0 && m.step < self.cfg.steps {
                    checkpoint::save(&self.model, m.step, dir.join(format!("step-{:06}.mmr", m.step)))?;
                }
            }
        }
        for w in [metrics.as_mut(), routes.as_mut()].into_iter().flatten() {
            w.flush()?;
        }
        let checkpoint = match &out.checkpoint_dir {
            Some(dir) => {
                let path = dir.join("final.mmr");
                checkpoint::save(&self.model, self.step, &path)?;
                Some(path)
            }
            None => None,
        };
        let val_windows = corpus.val_windows(self.cfg.seq_len, self.cfg.eval_windows);
        let val_loss = self.evaluate(&val_windows)?;
        let final_cv = window
            .iter()
            .map(|c| moe::load_cv(&moe::fractions(c)).unwrap_or(f64::NAN))
            .collect();
        Ok(TrainSummary {
            steps: self.step,
            initial_loss: initial.unwrap_or(f64::NAN),
            final_loss: last,
            val_loss,
            final_cv,
            checkpoint,
        })
    }
}

fn open_sink(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Ok(Some(BufWriter::new(File::create(p)?)))
        }
        None => Ok(None),
    }
}
