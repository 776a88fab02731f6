//! One-dimensional n-state Potts chain, used as a surrogate for the chain of
//! experts along a token sequence.
//!
//! Energy of a configuration `s` with open boundaries:
//! `E(s) = -J Σ_i (2 δ(s_i, s_{i+1}) - 1) - Σ_i h[s_i]`, sampled from
//! `exp(-βE)`. Like neighbours contribute `-J`, unlike ones `+J`, so for two
//! states the chain is the Ising chain with coupling `J`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::mean_std;
use crate::trace::{split_seed, ActivationTrace, RoutingConfig, TraceHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinChainModel {
    pub n_states: usize,
    /// Nearest-neighbour coupling `J`; positive favours equal neighbours.
    pub coupling: f64,
    /// Per-state field `h`.
    pub field: Vec<f64>,
    pub beta: f64,
    pub length: usize,
}

impl SpinChainModel {
    /// Zero-field chain.
    pub fn potts(n_states: usize, coupling: f64, beta: f64, length: usize) -> Result<Self> {
        let m = Self {
            n_states,
            coupling,
            field: vec![0.0; n_states],
            beta,
            length,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(Error::Config(format!("need at least 2 states, got {}", self.n_states)));
        }
        if self.field.len() != self.n_states {
            return Err(Error::Config(format!(
                "field has {} components for {} states",
                self.field.len(),
                self.n_states
            )));
        }
        if self.length < 2 {
            return Err(Error::Config("chain length must be at least 2".into()));
        }
        if !self.coupling.is_finite() || !self.beta.is_finite() || self.field.iter().any(|h| !h.is_finite()) {
            return Err(Error::Config("model parameters must be finite".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn with_length(&self, length: usize) -> Self {
        Self { length, ..self.clone() }
    }

    fn zero_field(&self) -> bool {
        self.field.iter().all(|&h| h == 0.0)
    }

    pub fn energy(&self, states: &[usize]) -> f64 {
        let bonds: f64 = states
            .windows(2)
            .map(|w| if w[0] == w[1] { 1.0 } else { -1.0 })
            .sum();
        -self.coupling * bonds - states.iter().map(|&s| self.field[s]).sum::<f64>()
    }

    /// `T[a][b] = exp(β (J (2δ(a,b) - 1) + (h_a + h_b) / 2))`
    pub fn transfer_matrix(&self) -> DMatrix<f64> {
        let n = self.n_states;
        DMatrix::from_fn(n, n, |a, b| {
            let delta = if a == b { 1.0 } else { -1.0 };
            (self.beta * (self.coupling * delta + 0.5 * (self.field[a] + self.field[b]))).exp()
        })
    }
}

/// Ratios `|λ2| / λ1` below this count as a vanishing subleading eigenvalue.
const RATIO_FLOOR: f64 = 1e-12;

/// Bulk correlation length `1 / ln(λ1 / |λ2|)` from the two leading transfer
/// matrix eigenvalues (by magnitude).
///
/// Returns 0 when the subleading eigenvalue vanishes (independent sites) and
/// `f64::INFINITY` when the two leading eigenvalues coincide.
pub fn transfer_matrix_xi(model: &SpinChainModel) -> Result<f64> {
    model.validate()?;
    if model.beta == 0.0 {
        return Ok(0.0);
    }
    let eig = SymmetricEigen::new(model.transfer_matrix());
    let mut mags: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let ratio = mags[1] / mags[0];
    if ratio <= RATIO_FLOOR {
        return Ok(0.0);
    }
    let gap = -ratio.ln();
    if gap <= f64::EPSILON {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / gap)
}

/// Mean length of a run of identical states in a zero-field chain whose bulk
/// correlation length is `xi`.
///
/// With `r = exp(-1/ξ)`, neighbours agree with probability `1/n + (1 - 1/n) r`,
/// so runs are geometric with mean `n / ((n - 1)(1 - r))`.
pub fn mean_run_length(n_states: usize, xi: f64) -> f64 {
    let n = n_states as f64;
    let r = if xi == 0.0 { 0.0 } else { (-1.0 / xi).exp() };
    n / ((n - 1.0) * (1.0 - r))
}

/// Single-site Metropolis sampler with sequential sweeps.
pub struct MetropolisChain<'a> {
    model: &'a SpinChainModel,
    state: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> MetropolisChain<'a> {
    pub fn new(model: &'a SpinChainModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = (0..model.length).map(|_| rng.random_range(0..model.n_states)).collect();
        Self { model, state, rng }
    }

    pub fn state(&self) -> &[usize] {
        &self.state
    }

    /// One pass over every site in order. Proposals are uniform over all
    /// states, so the proposal is symmetric and β = 0 resamples each site
    /// independently.
    pub fn sweep(&mut self) {
        let m = self.model;
        let len = self.state.len();
        for i in 0..len {
            let old = self.state[i];
            let new = self.rng.random_range(0..m.n_states);
            if new == old {
                continue;
            }
            let mut bonds = 0.0;
            if i > 0 {
                let l = self.state[i - 1];
                bonds += (new == l) as u8 as f64 - (old == l) as u8 as f64;
            }
            if i + 1 < len {
                let r = self.state[i + 1];
                bonds += (new == r) as u8 as f64 - (old == r) as u8 as f64;
            }
            let delta_e = -2.0 * m.coupling * bonds - (m.field[new] - m.field[old]);
            let accept = delta_e <= 0.0 || self.rng.random::<f64>() < (-m.beta * delta_e).exp();
            if accept {
                self.state[i] = new;
            }
        }
    }
}

/// Burn-in length in sweeps for a chain of `length` sites.
pub fn burn_in_sweeps(length: usize) -> usize {
    10 * length
}

/// `num_samples` configurations from one chain, `sweeps` sweeps apart, after
/// [`burn_in_sweeps`] sweeps of burn-in.
pub fn sample_chain(model: &SpinChainModel, num_samples: usize, sweeps: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    model.validate()?;
    if sweeps == 0 {
        return Err(Error::Param("sweeps between samples must be at least 1".into()));
    }
    let mut chain = MetropolisChain::new(model, seed);
    for _ in 0..burn_in_sweeps(model.length) {
        chain.sweep();
    }
    let mut out = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        for _ in 0..sweeps {
            chain.sweep();
        }
        out.push(chain.state().to_vec());
    }
    Ok(out)
}

/// Excess frequency of the most common state, rescaled to `[0, 1]`:
/// `(max_freq - 1/n) / (1 - 1/n)`.
pub fn magnetization(states: &[usize], n_states: usize) -> f64 {
    let mut counts = vec![0usize; n_states];
    for &s in states {
        counts[s] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64 / states.len() as f64;
    let uniform = 1.0 / n_states as f64;
    (max - uniform) / (1.0 - uniform)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub length: usize,
    pub mean_abs_m: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Sweeps between samples used by [`order_check`].
pub const ORDER_CHECK_SWEEPS: usize = 10;

/// Mean |m| over samples for each chain length. Long-range order would keep
/// it bounded away from zero as the chain grows; a disordered chain decays
/// like `L^{-1/2}`.
pub fn order_check(model: &SpinChainModel, lengths: &[usize], num_samples: usize, seed: u64) -> Result<Vec<OrderRow>> {
    if !model.zero_field() {
        return Err(Error::Precondition("order check requires zero field".into()));
    }
    if num_samples == 0 {
        return Err(Error::Param("num_samples must be at least 1".into()));
    }
    lengths
        .iter()
        .map(|&len| {
            let m = model.with_length(len);
            let samples = sample_chain(&m, num_samples, ORDER_CHECK_SWEEPS, split_seed(seed, len as u64, 0))?;
            let mags: Vec<f64> = samples.iter().map(|s| magnetization(s, m.n_states)).collect();
            let (mean, std) = mean_std(&mags);
            Ok(OrderRow {
                length: len,
                mean_abs_m: mean,
                std_err: std / (mags.len() as f64).sqrt(),
                samples: mags.len(),
            })
        })
        .collect()
}

/// Chain samples as a single-layer top-1 trace collection.
pub fn samples_to_traces(model_name: &str, n_states: usize, samples: &[Vec<usize>]) -> Result<(TraceHeader, Vec<ActivationTrace>)> {
    let len = samples.first().map(Vec::len).unwrap_or(0);
    let routing = RoutingConfig::new(n_states, 1, 1, len)?;
    let traces = samples
        .iter()
        .enumerate()
        .map(|(i, s)| ActivationTrace {
            sequence_id: i as u64,
            layer: 0,
            experts: s.iter().map(|&e| vec![e]).collect(),
            logits: None,
        })
        .collect();
    Ok((
        TraceHeader {
            model_name: model_name.to_string(),
            routing,
            num_sequences: samples.len(),
        },
        traces,
    ))
}
