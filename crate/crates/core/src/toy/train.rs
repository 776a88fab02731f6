use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward_batch, loss_and_grad, loss_value, Example, LossEval, Selections};
use super::{AuxMode, LossConfig, RouterMode, ToyConfig, ToyMoEParams};
use crate::error::{Error, Result};
use crate::mem::MemLossConfig;
use crate::trace::split_seed;

/// Synthetic token streams with uniform random inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Label at position `t` is the token at `t − 1`.
    #[default]
    Copy,
    /// The second half of each sequence is the first half reversed; the
    /// labels are next tokens over the second half.
    Reverse,
    /// Label at position `t` is the prefix sum of tokens mod vocab size.
    ModSum,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "modsum" | "mod_sum" => Ok(Self::ModSum),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

pub fn make_example<R: Rng + ?Sized>(task: Task, vocab: usize, len: usize, rng: &mut R) -> Example {
    match task {
        Task::Copy => {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
            let targets = (0..len).map(|t| t.checked_sub(1).map(|p| tokens[p])).collect();
            Example { tokens, targets }
        }
        Task::Reverse => {
            let half = len / 2;
            let first: Vec<usize> = (0..half).map(|_| rng.random_range(0..vocab)).collect();
            let mut tokens = first.clone();
            tokens.extend(first.iter().rev());
            while tokens.len() < len {
                tokens.push(rng.random_range(0..vocab));
            }
            let targets = (0..len)
                .map(|t| (t + 1 >= half && t + 1 < 2 * half).then(|| tokens[t + 1]))
                .collect();
            Example { tokens, targets }
        }
        Task::ModSum => {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
            let mut acc = 0;
            let targets = tokens
                .iter()
                .map(|&x| {
                    acc = (acc + x) % vocab;
                    Some(acc)
                })
                .collect();
            Example { tokens, targets }
        }
    }
}

/// Batch for training step `step`; a pure function of its arguments.
pub fn make_batch(task: Task, cfg: &ToyConfig, len: usize, batch: usize, seed: u64, step: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, step, 0));
    (0..batch).map(|_| make_example(task, cfg.vocab_size, len, &mut rng)).collect()
}

/// Held-out batch used for usage histograms.
pub fn eval_batch(task: Task, cfg: &ToyConfig, len: usize, batch: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, u64::MAX, 1));
    (0..batch).map(|_| make_example(task, cfg.vocab_size, len, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub aux_mode: AuxMode,
    pub aux_weight: f64,
    pub router_mode: RouterMode,
    pub mem: MemLossConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Training sequence length; the model's context length when `None`.
    pub seq_len: Option<usize>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_batch: usize,
    /// Global gradient-norm clip; disabled when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            aux_mode: AuxMode::None,
            aux_weight: 0.01,
            router_mode: RouterMode::LearnedTopk,
            mem: MemLossConfig::default(),
            lr: 3e-3,
            steps: 2000,
            batch: 8,
            seq_len: None,
            seed: 0,
            checkpoint_every: 200,
            eval_batch: 8,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            aux_mode: self.aux_mode,
            aux_weight: if self.aux_mode == AuxMode::None { 0.0 } else { self.aux_weight },
            router_mode: self.router_mode,
            mem: self.mem,
        }
    }

    pub fn validate(&self, model: &ToyConfig) -> Result<()> {
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux weight must be >= 0, got {}", self.aux_weight)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let len = self.seq_len.unwrap_or(model.context_length);
        if len < 2 || len > model.context_length {
            return Err(Error::Config(format!(
                "sequence length {len} outside 2..={}",
                model.context_length
            )));
        }
        if self.aux_mode == AuxMode::Mem {
            self.mem.validate()?;
        }
        Ok(())
    }

    fn len(&self, model: &ToyConfig) -> usize {
        self.seq_len.unwrap_or(model.context_length)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            w[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub cross_entropy: f64,
    pub aux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of optimizer steps taken before this snapshot.
    pub step: usize,
    /// Per layer, selections per expert over the held-out batch.
    pub usage: Vec<Vec<u64>>,
    /// Per layer usage entropy in nats.
    pub entropy: Vec<f64>,
    pub mean_entropy: f64,
    pub eval_cross_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyMoEParams,
    pub curve: Vec<StepRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least the initial checkpoint")
    }
}

/// Shannon entropy (nats) of a usage histogram; zero when empty.
pub fn usage_entropy(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn snapshot(params: &ToyMoEParams, cfg: &TrainConfig, eval: &[Example], step: usize) -> Result<Checkpoint> {
    let toy = &params.config;
    let tokens: Vec<Vec<usize>> = eval.iter().map(|e| e.tokens.clone()).collect();
    let outs = forward_batch(params, &tokens, 0, cfg.router_mode)?;
    let mut usage = vec![vec![0u64; toy.n_experts]; toy.n_layers];
    for out in &outs {
        for tr in &out.traces {
            for s in &tr.experts {
                for &e in s {
                    usage[tr.layer][e] += 1;
                }
            }
        }
    }
    let entropy: Vec<f64> = usage.iter().map(|h| usage_entropy(h)).collect();
    let mean_entropy = entropy.iter().sum::<f64>() / entropy.len() as f64;
    let ce = loss_value(params, eval, &LossConfig { router_mode: cfg.router_mode, ..LossConfig::default() }, None)?
        .cross_entropy;
    Ok(Checkpoint {
        step,
        usage,
        entropy,
        mean_entropy,
        eval_cross_entropy: ce,
    })
}

/// Adam on `cfg.task`. Deterministic given `params` and `cfg`.
pub fn train(params: ToyMoEParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(&params.config)?;
    let mut params = params;
    let loss_cfg = cfg.loss();
    let len = cfg.len(&params.config);
    let eval = eval_batch(cfg.task, &params.config, len, cfg.eval_batch, cfg.seed);
    let mut opt = Adam::new(params.data.len(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut checkpoints = vec![snapshot(&params, cfg, &eval, 0)?];
    for step in 0..cfg.steps {
        let batch = make_batch(cfg.task, &params.config, len, cfg.batch, cfg.seed, step as u64);
        let (ev, mut grad, _) = loss_and_grad(&params, &batch, &loss_cfg, None)?;
        if !ev.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {}", ev.total),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        opt.step(&mut params.data, &grad);
        curve.push(StepRecord {
            step,
            total: ev.total,
            cross_entropy: ev.cross_entropy,
            aux: ev.aux,
        });
        let done = step + 1;
        if ((cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps)
            && checkpoints.last().map(|c| c.step) != Some(done) {
                checkpoints.push(snapshot(&params, cfg, &eval, done)?);
            }
    }
    if let Some(bad) = params.data.iter().position(|w| !w.is_finite()) {
        return Err(Error::Training {
            step: cfg.steps,
            msg: format!("weight {bad} became non-finite"),
        });
    }
    Ok(TrainOutcome {
        params,
        curve,
        checkpoints,
    })
}

/// Smallest router margin below which a gradient check is tie-adjacent.
pub const TIE_MARGIN: f64 = 1e-3;
/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor of the elementwise relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum GradCheckStatus {
    Checked,
    /// Some routing decision is within [`TIE_MARGIN`] of flipping; the
    /// caller should draw another parameter point.
    TieAdjacent { margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub status: GradCheckStatus,
    /// `max_i |a_i − f_i| / max(‖a‖∞, ‖f‖∞)`.
    pub max_rel_error: f64,
    /// `max_i |a_i − f_i| / max(|a_i|, |f_i|, REL_FLOOR)`; dominated by
    /// near-zero components, where the step's truncation error is largest
    /// relative to the value.
    pub elementwise_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub loss: f64,
}

/// Compares the analytic gradient of the total loss with central finite
/// differences at [`FD_STEP`] over every parameter, with expert selections
/// held fixed.
pub fn grad_check(params: &ToyMoEParams, batch: &[Example], loss: &LossConfig) -> Result<GradCheckReport> {
    grad_check_with_step(params, batch, loss, FD_STEP)
}

pub fn grad_check_with_step(
    params: &ToyMoEParams,
    batch: &[Example],
    loss: &LossConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let (ev, grad, sel) = loss_and_grad(params, batch, loss, None)?;
    let status = if ev.min_margin < TIE_MARGIN {
        GradCheckStatus::TieAdjacent { margin: ev.min_margin }
    } else {
        GradCheckStatus::Checked
    };
    let forced: &[Selections] = &sel;
    let mut p = params.clone();
    let mut elementwise: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..p.data.len() {
        let w0 = p.data[i];
        p.data[i] = w0 + step;
        let up = loss_value(&p, batch, loss, Some(forced))?.total;
        p.data[i] = w0 - step;
        let down = loss_value(&p, batch, loss, Some(forced))?.total;
        p.data[i] = w0;
        let fd = (up - down) / (2.0 * step);
        let err = (grad[i] - fd).abs();
        let mag = grad[i].abs().max(fd.abs());
        scale = scale.max(mag);
        max_abs = max_abs.max(err);
        elementwise = elementwise.max(err / mag.max(REL_FLOOR));
    }
    Ok(GradCheckReport {
        status,
        max_rel_error: max_abs / scale.max(REL_FLOOR),
        elementwise_rel_error: elementwise,
        max_abs_error: max_abs,
        checked: p.data.len(),
        loss: ev.total,
    })
}

/// Loss on one batch without gradients.
pub fn evaluate(params: &ToyMoEParams, batch: &[Example], loss: &LossConfig) -> Result<LossEval> {
    loss_value(params, batch, loss, None)
}
