//! A desk-scale decoder-only transformer with rotary attention and a top-k
//! mixture-of-experts feed-forward block, trained with hand-written
//! backpropagation in `f64`.
//!
//! Every block is pre-norm (RMSNorm) attention followed by a pre-norm MoE
//! block. The router is a linear map from the normalized hidden state to one
//! logit per expert; each expert is a two-layer SiLU MLP.

mod ckpt;
mod model;
mod rope;
mod train;

pub use ckpt::{header_path, load_checkpoint, save_checkpoint};
pub use model::{
    forward, forward_batch, loss_and_grad, router_topk, static_subset, switch_aux_loss, Example, ForwardOutput, LossEval,
    Selections,
};
pub use rope::{pair_frequency, rope_rotate, RopeTable};
pub use train::{
    eval_batch, evaluate, grad_check, make_batch, make_example, train, usage_entropy, Adam, Checkpoint, GradCheckReport,
    GradCheckStatus, grad_check_with_step, StepRecord, Task, TrainConfig, TrainOutcome, FD_STEP, REL_FLOOR, TIE_MARGIN,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mem::MemLossConfig;
use crate::trace::RoutingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Softmax over the selected logits only.
    #[default]
    TopKSoftmax,
    /// Softmax over all logits, restricted to the selected experts without
    /// renormalization.
    FullSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StaticMap {
    /// Position range `[j·L/g, (j+1)·L/g)` uses experts `j·k .. j·k + k`,
    /// with `g = n / k` groups.
    #[default]
    ContiguousBlocks,
    /// Position `p` uses the k-subset of lexicographic rank `p mod C(n, k)`.
    CycledSubsets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RouterMode {
    #[default]
    LearnedTopk,
    StaticPositional { map: StaticMap },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    #[default]
    None,
    /// `N · Σ_i f_i P_i`, averaged over layers, `f` held constant.
    SwitchAux,
    /// Temperature-weighted KL of each token's k-subset distribution to
    /// uniform, summed over positions, averaged over the batch and layers.
    Mem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub k_active: usize,
    pub context_length: usize,
    pub expert_hidden: usize,
    pub rope_base: f64,
    pub gate_mode: GateMode,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 32,
            n_heads: 4,
            n_layers: 2,
            n_experts: 8,
            k_active: 2,
            context_length: 128,
            expert_hidden: 64,
            rope_base: 10000.0,
            gate_mode: GateMode::TopKSoftmax,
        }
    }
}

impl ToyConfig {
    pub fn routing(&self) -> RoutingConfig {
        RoutingConfig {
            n_experts: self.n_experts,
            k_active: self.k_active,
            n_layers: self.n_layers,
            context_length: self.context_length,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        self.routing().validate()?;
        if self.vocab_size == 0 || self.model_dim == 0 || self.n_heads == 0 || self.expert_hidden == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(2 * self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by 2 * n_heads = {}",
                self.model_dim,
                2 * self.n_heads
            )));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ExpertOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub norm1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm2: usize,
    pub router: usize,
    pub experts: Vec<ExpertOffsets>,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub norm_f: usize,
    pub head: usize,
}

/// Tensor table plus the offsets the forward pass uses.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub(crate) offsets: Offsets,
}

impl Layout {
    fn new(cfg: &ToyConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let (v, d, n, h) = (cfg.vocab_size, cfg.model_dim, cfg.n_experts, cfg.expert_hidden);
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                norm1: push(format!("layers.{l}.norm1"), vec![d]),
                wq: push(format!("layers.{l}.attn.wq"), vec![d, d]),
                wk: push(format!("layers.{l}.attn.wk"), vec![d, d]),
                wv: push(format!("layers.{l}.attn.wv"), vec![d, d]),
                wo: push(format!("layers.{l}.attn.wo"), vec![d, d]),
                norm2: push(format!("layers.{l}.norm2"), vec![d]),
                router: push(format!("layers.{l}.router"), vec![d, n]),
                experts: (0..n)
                    .map(|e| ExpertOffsets {
                        w1: push(format!("layers.{l}.experts.{e}.w1"), vec![d, h]),
                        b1: push(format!("layers.{l}.experts.{e}.b1"), vec![h]),
                        w2: push(format!("layers.{l}.experts.{e}.w2"), vec![h, d]),
                        b2: push(format!("layers.{l}.experts.{e}.b2"), vec![d]),
                    })
                    .collect(),
            })
            .collect();
        let norm_f = push("norm_f".into(), vec![d]);
        let head = push("head".into(), vec![d, v]);
        Self {
            tensors,
            total,
            offsets: Offsets {
                tok_emb,
                layers,
                norm_f,
                head,
            },
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All weights of the toy model in one flat buffer, addressed through
/// [`Layout`].
#[derive(Debug, Clone)]
pub struct ToyMoEParams {
    pub config: ToyConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl PartialEq for ToyMoEParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl ToyMoEParams {
    /// Gains start at one, biases at zero, matrices at `N(0, 1/fan_in)`.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &layout.tensors {
            let slot = &mut data[t.offset..t.offset + t.len()];
            let leaf = t.name.rsplit('.').next().unwrap_or("");
            if t.shape.len() == 1 {
                if leaf.starts_with("norm") {
                    slot.fill(1.0);
                }
                continue;
            }
            let std = if t.name == "tok_emb" { 1.0 } else { (1.0 / t.shape[0] as f64).sqrt() };
            let normal = Normal::new(0.0, std).expect("positive std");
            slot.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        Ok(Self { config, layout, data })
    }

    pub fn from_data(config: ToyConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Config(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        if data.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("non-finite weight".into()));
        }
        Ok(Self { config, layout, data })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.data[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.find(name)?.clone();
        Some(&mut self.data[t.offset..t.offset + t.len()])
    }

    /// Indices in `data` belonging to router matrices.
    pub fn router_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let d = self.config.model_dim;
        let n = self.config.n_experts;
        self.layout
            .offsets
            .layers
            .iter()
            .map(|l| l.router..l.router + d * n)
            .collect()
    }
}

/// Loss composition used for training and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub aux_mode: AuxMode,
    pub aux_weight: f64,
    pub router_mode: RouterMode,
    pub mem: MemLossConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            aux_mode: AuxMode::None,
            aux_weight: 0.0,
            router_mode: RouterMode::LearnedTopk,
            mem: MemLossConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let cfg = ToyConfig::default();
        let p = ToyMoEParams::init(cfg.clone(), 1).unwrap();
        let mut next = 0;
        for t in &p.layout.tensors {
            assert_eq!(t.offset, next);
            next += t.len();
        }
        assert_eq!(next, p.num_params());
        assert_eq!(p.tensor("layers.1.router").unwrap().len(), cfg.model_dim * cfg.n_experts);
        assert!(p.tensor("layers.0.norm1").unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn config_validation() {
        let bad = ToyConfig {
            model_dim: 12,
            n_heads: 4,
            ..ToyConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ToyConfig {
            k_active: 9,
            ..ToyConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
