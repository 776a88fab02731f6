//! Linear recoverability of token position from per-token embeddings.
//!
//! Targets are derived from the position `k` of each row: parity `k mod 2`,
//! block index `⌊k/n⌋`, or `k` itself. A multinomial logistic probe is fit
//! with stratified cross-validation over an L2 grid; metrics are reported in
//! percent with the standard deviation over folds.

mod cv;
mod io;
mod logreg;

pub use cv::{evaluate, stratified_folds, train_probe, FoldMetrics, Metric, ProbeOptions, ProbeReport, TrainedProbe};
pub use io::{read_embeddings, write_embeddings, EmbHeader};
pub use logreg::{fit_logreg, FitInfo, LogReg, LogRegOptions};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::RopeTable;

/// Default L2 grid: 7 points log-spaced over `1e-3 ..= 1e3`.
pub fn default_l2_grid() -> Vec<f64> {
    (0..7).map(|i| 10f64.powi(i - 3)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum TargetSpec {
    Parity,
    BlockIndex(usize),
    Exact,
}

impl TargetSpec {
    pub fn label(&self, position: usize) -> usize {
        match *self {
            TargetSpec::Parity => position % 2,
            TargetSpec::BlockIndex(n) => position / n,
            TargetSpec::Exact => position,
        }
    }

    /// Number of distinct labels over positions `0..seq_len`.
    pub fn num_classes(&self, seq_len: usize) -> usize {
        match *self {
            TargetSpec::Parity => seq_len.min(2),
            TargetSpec::BlockIndex(n) => seq_len.div_ceil(n),
            TargetSpec::Exact => seq_len,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            TargetSpec::Parity => "parity".into(),
            TargetSpec::BlockIndex(n) => format!("block_{n}"),
            TargetSpec::Exact => "exact".into(),
        }
    }
}

impl std::str::FromStr for TargetSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(Self::Parity),
            "exact" => Ok(Self::Exact),
            _ => s
                .strip_prefix("block")
                .map(|r| r.trim_start_matches(['_', ':', '=']))
                .and_then(|r| r.parse().ok())
                .map(Self::BlockIndex)
                .ok_or_else(|| Error::Param(format!("unknown target {s:?}; use parity, exact or block_<n>"))),
        }
    }
}

/// Labels for positions `0..seq_len`.
pub fn make_targets(seq_len: usize, spec: TargetSpec) -> Result<Vec<usize>> {
    if let TargetSpec::BlockIndex(n) = spec {
        if n == 0 || n > seq_len {
            return Err(Error::Param(format!("block size {n} outside 1..={seq_len}")));
        }
    }
    Ok((0..seq_len).map(|k| spec.label(k)).collect())
}

/// Rows of per-token features with their sequence and position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub features: Array2<f64>,
    pub sequences: Vec<u64>,
    pub positions: Vec<usize>,
    pub seq_len: usize,
}

impl ProbeDataset {
    pub fn new(features: Array2<f64>, sequences: Vec<u64>, positions: Vec<usize>, seq_len: usize) -> Result<Self> {
        let ds = Self {
            features,
            sequences,
            positions,
            seq_len,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.features.nrows();
        if self.positions.len() != rows || self.sequences.len() != rows {
            return Err(Error::Config(format!(
                "{rows} feature rows but {} positions and {} sequence ids",
                self.positions.len(),
                self.sequences.len()
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= self.seq_len) {
            return Err(Error::Schema(format!("position {p} >= sequence length {}", self.seq_len)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite feature".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// True when rows split into whole sequences of `seq_len` tokens.
    pub fn whole_sequences(&self) -> bool {
        self.len().is_multiple_of(self.seq_len)
    }

    pub fn labels(&self, spec: TargetSpec) -> Result<Vec<usize>> {
        if let TargetSpec::BlockIndex(n) = spec {
            make_targets(self.seq_len, TargetSpec::BlockIndex(n))?;
        }
        Ok(self.positions.iter().map(|&p| spec.label(p)).collect())
    }
}

/// Synthetic embeddings: a unit signal vector drawn once per seed, RoPE
/// rotated to each position, plus iid Gaussian noise of standard deviation
/// `noise` per coordinate. Rows are in `(sequence, position)` order.
pub fn synth_rope_features(
    seq_len: usize,
    dim: usize,
    base: f64,
    num_sequences: usize,
    noise: f64,
    seed: u64,
) -> Result<ProbeDataset> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Param(format!("noise scale must be >= 0, got {noise}")));
    }
    let rope = RopeTable::new(seq_len, dim, base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signal: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = signal.iter().map(|v| v * v).sum::<f64>().sqrt();
    signal.iter_mut().for_each(|v| *v /= norm);
    let rotated: Vec<Vec<f64>> = (0..seq_len)
        .map(|m| {
            let mut x = signal.clone();
            rope.apply(&mut x, m, false);
            x
        })
        .collect();
    let rows = num_sequences * seq_len;
    let mut features = Array2::zeros((rows, dim));
    let mut sequences = Vec::with_capacity(rows);
    let mut positions = Vec::with_capacity(rows);
    for s in 0..num_sequences {
        for (m, clean) in rotated.iter().enumerate() {
            let r = s * seq_len + m;
            for (j, &c) in clean.iter().enumerate() {
                let e: f64 = if noise > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                features[[r, j]] = c + noise * e;
            }
            sequences.push(s as u64);
            positions.push(m);
        }
    }
    ProbeDataset::new(features, sequences, positions, seq_len)
}
