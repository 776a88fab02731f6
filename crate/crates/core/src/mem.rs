//! Maximum-entropy auxiliary loss over router states.
//!
//! A router state is the set of `k` experts active for a token. Router logits
//! `z` induce a Gibbs distribution over all `C(n, k)` subsets,
//! `p(S) ∝ exp(β Σ_{e∈S} z_e)`, which reduces to `softmax(β z)` at `k = 1`.
//! The loss is the temperature-weighted KL divergence from `p` to the uniform
//! distribution `q = 1 / C(n, k)`, summed over tokens; minimising it maximises
//! the entropy of every token's state distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of subsets enumerated exactly.
pub const MAX_STATES: u128 = 1_000_000;
/// Largest expert count accepted for exact enumeration.
pub const MAX_EXPERTS: usize = 30;

/// Exact binomial coefficient, `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `ln C(n, k)` computed in floating point, valid beyond `u128` range.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Probability of one state under the uniform distribution over k-subsets.
pub fn uniform_state_probability(n: usize, k: usize) -> f64 {
    (-ln_binomial(n, k)).exp()
}

/// Lexicographic rank of a sorted k-subset of `0..n`.
pub fn rank_subset(subset: &[usize], n: usize) -> usize {
    let k = subset.len();
    let mut rank = 0u128;
    let mut prev = 0usize;
    for (i, &e) in subset.iter().enumerate() {
        for skipped in prev..e {
            rank += binomial(n - skipped - 1, k - i - 1).unwrap_or(0);
        }
        prev = e + 1;
    }
    rank as usize
}

/// Inverse of [`rank_subset`].
pub fn unrank_subset(mut rank: usize, n: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut e = 0;
    while out.len() < k {
        let remaining = k - out.len() - 1;
        let block = binomial(n - e - 1, remaining).unwrap_or(0) as usize;
        if rank < block {
            out.push(e);
        } else {
            rank -= block;
        }
        e += 1;
    }
    out
}

/// All k-subsets of `0..n` in lexicographic order.
#[derive(Debug, Clone)]
pub struct Subsets {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Subsets {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Subsets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        // rightmost position that can still advance
        let pivot = (0..k).rev().find(|&i| next[i] < self.n - k + i);
        self.current = pivot.map(|i| {
            next[i] += 1;
            for j in i + 1..k {
                next[j] = next[j - 1] + 1;
            }
            next
        });
        Some(out)
    }
}

fn check_capacity(n: usize, k: usize) -> Result<usize> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    let states = binomial(n, k).unwrap_or(u128::MAX);
    if n > MAX_EXPERTS || states > MAX_STATES {
        return Err(Error::Capacity(format!(
            "exact enumeration of C({n},{k}) = {} states exceeds the limit (n <= {MAX_EXPERTS}, at most {MAX_STATES} states); \
             a per-expert marginal approximation is not provided",
            if states == u128::MAX { "overflow".to_string() } else { states.to_string() }
        )));
    }
    Ok(states as usize)
}

/// Exact distribution over the k-subsets of `n` experts, indexed by
/// lexicographic rank.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    pub n_experts: usize,
    pub k_active: usize,
    pub probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl StateDistribution {
    pub fn uniform(n: usize, k: usize) -> Result<Self> {
        let states = check_capacity(n, k)?;
        let lp = -(states as f64).ln();
        Ok(Self {
            n_experts: n,
            k_active: k,
            probs: vec![1.0 / states as f64; states],
            log_probs: vec![lp; states],
        })
    }

    /// Builds a distribution from nonnegative weights over states in rank order.
    pub fn from_probs(n: usize, k: usize, probs: Vec<f64>) -> Result<Self> {
        let states = check_capacity(n, k)?;
        if probs.len() != states {
            return Err(Error::Param(format!("expected {states} probabilities, got {}", probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Param("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Param("probabilities sum to zero".into()));
        }
        let probs: Vec<f64> = probs.into_iter().map(|p| p / total).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            n_experts: n,
            k_active: k,
            probs,
            log_probs,
        })
    }

    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn prob_of(&self, subset: &[usize]) -> f64 {
        self.probs[rank_subset(subset, self.n_experts)]
    }

    /// `P(e ∈ S)` for every expert.
    pub fn marginals(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_experts];
        for (p, s) in self.probs.iter().zip(Subsets::new(self.n_experts, self.k_active)) {
            for e in s {
                m[e] += p;
            }
        }
        m
    }
}

/// `p(S) = exp(β Σ_{e∈S} z_e) / Z`, normalized with log-sum-exp.
pub fn state_distribution(logits: &[f64], k: usize, beta: f64) -> Result<StateDistribution> {
    let n = logits.len();
    let states = check_capacity(n, k)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Param("logits must be finite".into()));
    }
    let mut scores = Vec::with_capacity(states);
    for s in Subsets::new(n, k) {
        scores.push(beta * s.iter().map(|&e| logits[e]).sum::<f64>());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = scores.iter().map(|s| s - log_z).collect();
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(StateDistribution {
        n_experts: n,
        k_active: k,
        probs,
        log_probs,
    })
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(dist: &StateDistribution) -> f64 {
    -dist
        .probs
        .iter()
        .zip(&dist.log_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lp)| p * lp)
        .sum::<f64>()
}

/// `D_KL(p ‖ q)` with `q` uniform over the `C(n, k)` states.
pub fn kl_to_uniform(dist: &StateDistribution) -> f64 {
    let ln_states = (dist.num_states() as f64).ln();
    dist.probs
        .iter()
        .zip(&dist.log_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lp)| p * (lp + ln_states))
        .sum()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogitLine {
    Bare(Vec<f64>),
    Object { logits: Vec<f64> },
}

/// Router logits, one token per NDJSON line: either a bare array or an
/// object with a `logits` array. Blank lines are skipped; all rows must have
/// the same length.
pub fn read_logits(path: impl AsRef<std::path::Path>) -> Result<Vec<Vec<f64>>> {
    use std::io::BufRead;
    let path = path.as_ref();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in crate::trace::open_reader(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = match serde_json::from_str::<LogitLine>(&line) {
            Ok(LogitLine::Bare(v)) | Ok(LogitLine::Object { logits: v }) => v,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        };
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Schema(format!(
                    "line {}: {} logits, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemLossConfig {
    pub temperature: f64,
    pub beta: f64,
}

impl Default for MemLossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            beta: 1.0,
        }
    }
}

impl MemLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Param(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Param(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// KL of one token and its gradient with respect to that token's logits,
/// both unweighted by temperature.
///
/// `∂D/∂z_e = β (E_p[1{e∈S} ln p(S)] − P(e∈S) E_p[ln p(S)])`
pub fn token_kl_grad(logits: &[f64], k: usize, beta: f64) -> Result<(f64, Vec<f64>)> {
    let dist = state_distribution(logits, k, beta)?;
    let n = logits.len();
    let mut weighted = vec![0.0; n];
    let mut marg = vec![0.0; n];
    let mut mean_log = 0.0;
    for ((p, lp), s) in dist.probs.iter().zip(&dist.log_probs).zip(Subsets::new(n, k)) {
        mean_log += p * lp;
        for e in s {
            weighted[e] += p * lp;
            marg[e] += p;
        }
    }
    let grad = weighted
        .iter()
        .zip(&marg)
        .map(|(w, m)| beta * (w - m * mean_log))
        .collect();
    Ok((kl_to_uniform(&dist), grad))
}

/// `T · Σ_tokens D_KL(p(s_i) ‖ q)`.
pub fn mem_loss(logit_sequence: &[Vec<f64>], k: usize, config: &MemLossConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for row in logit_sequence {
        total += kl_to_uniform(&state_distribution(row, k, config.beta)?);
    }
    Ok(config.temperature * total)
}

/// Gradient of [`mem_loss`] with respect to every logit.
pub fn mem_loss_grad(logit_sequence: &[Vec<f64>], k: usize, config: &MemLossConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    logit_sequence
        .iter()
        .map(|row| {
            let (_, mut g) = token_kl_grad(row, k, config.beta)?;
            g.iter_mut().for_each(|v| *v *= config.temperature);
            Ok(g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force oracle: enumerate subsets by bitmask, independent of
    /// `Subsets` and the log-sum-exp path.
    fn brute_probs(logits: &[f64], k: usize, beta: f64) -> Vec<(Vec<usize>, f64)> {
        let n = logits.len();
        let mut raw = Vec::new();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..n).filter(|&e| mask & (1 << e) != 0).collect();
            let w = (beta * set.iter().map(|&e| logits[e]).sum::<f64>()).exp();
            raw.push((set, w));
        }
        let z: f64 = raw.iter().map(|r| r.1).sum();
        raw.into_iter().map(|(s, w)| (s, w / z)).collect()
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(6, 2), Some(15));
        assert_eq!(binomial(64, 8), Some(4_426_165_368));
        assert_eq!(binomial(3, 5), Some(0));
        assert!((ln_binomial(64, 8) - (4_426_165_368f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn olmoe_uniform_probability() {
        let q = uniform_state_probability(64, 8);
        assert!((q / 2.26e-10 - 1.0).abs() < 5e-3, "{q}");
        assert!(matches!(state_distribution(&[0.0; 64], 8, 1.0), Err(Error::Capacity(_))));
    }

    #[test]
    fn rank_unrank_bijection() {
        for (n, k) in [(5, 2), (7, 3), (6, 6), (9, 1)] {
            for (r, s) in Subsets::new(n, k).enumerate() {
                assert_eq!(rank_subset(&s, n), r);
                assert_eq!(unrank_subset(r, n, k), s);
            }
            assert_eq!(Subsets::new(n, k).count() as u128, binomial(n, k).unwrap());
        }
    }

    #[test]
    fn uniform_logits_uniform_states() {
        let d = state_distribution(&[0.3; 4], 2, 1.0).unwrap();
        assert_eq!(d.num_states(), 6);
        for p in &d.probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!((entropy(&d) - 6f64.ln()).abs() < 1e-12);
        assert!(kl_to_uniform(&d).abs() < 1e-12);
    }

    #[test]
    fn ln2_example() {
        let d = state_distribution(&[2f64.ln(), 0.0, 0.0, 0.0], 2, 1.0).unwrap();
        for s in Subsets::new(4, 2) {
            let expect = if s.contains(&0) { 2.0 / 9.0 } else { 1.0 / 9.0 };
            assert!((d.prob_of(&s) - expect).abs() < 1e-15);
        }
        // oracle: direct summation over the six subsets
        let h_oracle = -(3.0 * (2.0 / 9.0) * (2f64 / 9.0).ln() + 3.0 * (1.0 / 9.0) * (1f64 / 9.0).ln());
        let kl_oracle = 3.0 * (2.0 / 9.0) * (6.0 * 2f64 / 9.0).ln() + 3.0 * (1.0 / 9.0) * (6.0 * 1f64 / 9.0).ln();
        assert!((entropy(&d) - h_oracle).abs() < 1e-12);
        assert!((entropy(&d) - (9f64.ln() - 2.0 / 3.0 * 2f64.ln())).abs() < 1e-12);
        assert!((entropy(&d) - 1.73512).abs() < 1e-5);
        assert!((kl_to_uniform(&d) - kl_oracle).abs() < 1e-12);
        assert!((kl_to_uniform(&d) - 0.05664).abs() < 1e-5);

        let seq = vec![vec![2f64.ln(), 0.0, 0.0, 0.0]; 3];
        let loss = mem_loss(&seq, 2, &MemLossConfig::default()).unwrap();
        assert!((loss - 3.0 * kl_oracle).abs() < 1e-12);
        assert!((loss - 0.16990).abs() < 1e-5);
    }

    #[test]
    fn point_mass_limits() {
        let d = StateDistribution::from_probs(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy(&d), 0.0);
        assert!((kl_to_uniform(&d) - 6f64.ln()).abs() < 1e-15);
        // z = 50 on k experts approximates a point mass
        let loss = mem_loss(&[vec![50.0, 50.0, 0.0, 0.0, 0.0]], 2, &MemLossConfig::default()).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let t2 = MemLossConfig {
            temperature: 2.0,
            beta: 1.0,
        };
        let loss2 = mem_loss(&[vec![50.0, 50.0, 0.0, 0.0, 0.0]], 2, &t2).unwrap();
        assert!((loss2 - 2.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_zero_gradient() {
        let g = mem_loss_grad(&[vec![1.5; 6], vec![-2.0; 6]], 3, &MemLossConfig::default()).unwrap();
        for row in g {
            for v in row {
                assert!(v.abs() < 1e-9);
            }
        }
        assert!(mem_loss(&[vec![0.0; 5]], 2, &MemLossConfig::default()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = MemLossConfig {
            temperature: 0.0,
            beta: 1.0,
        };
        assert!(mem_loss(&[vec![0.0; 3]], 1, &bad).is_err());
        let bad = MemLossConfig {
            temperature: 1.0,
            beta: -1.0,
        };
        assert!(mem_loss_grad(&[vec![0.0; 3]], 1, &bad).is_err());
    }

    #[test]
    fn monotone_in_own_logit() {
        let base = [0.3, -0.2, 0.8, 0.1, -1.0, 0.5];
        for k in 1..=3 {
            for e in 0..base.len() {
                let before = state_distribution(&base, k, 1.0).unwrap().marginals()[e];
                let mut bumped = base;
                bumped[e] += 0.25;
                let after = state_distribution(&bumped, k, 1.0).unwrap().marginals()[e];
                assert!(after > before, "k={k} e={e}");
            }
        }
    }

    proptest! {
        #[test]
        fn matches_bitmask_oracle(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..8),
            beta in 0.1f64..3.0,
            kf in 0.0f64..1.0,
        ) {
            let n = logits.len();
            let k = 1 + ((n - 1) as f64 * kf) as usize;
            let d = state_distribution(&logits, k, beta).unwrap();
            for (s, p) in brute_probs(&logits, k, beta) {
                prop_assert!((d.prob_of(&s) - p).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_at_extremes(logits in proptest::collection::vec(-50.0f64..50.0, 3..9), k in 1usize..3) {
            let d = state_distribution(&logits, k, 1.0).unwrap();
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let ident = entropy(&d) + kl_to_uniform(&d) - (d.num_states() as f64).ln();
            prop_assert!(ident.abs() < 1e-10);
        }

        #[test]
        fn gradient_translation_invariant(
            logits in proptest::collection::vec(-3.0f64..3.0, 3..7),
            shift in -10.0f64..10.0,
        ) {
            let k = 2;
            let cfg = MemLossConfig::default();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let (a, ga) = token_kl_grad(&logits, k, cfg.beta).unwrap();
            let (b, gb) = token_kl_grad(&shifted, k, cfg.beta).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(ga.iter().sum::<f64>().abs() < 1e-9);
            for (x, y) in ga.iter().zip(&gb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn logits_file_accepts_both_line_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.ndjson");
        std::fs::write(&p, "[0.5,0,0,0]\n\n{\"logits\":[1,2,3,4]}\n").unwrap();
        let rows = read_logits(&p).unwrap();
        assert_eq!(rows, vec![vec![0.5, 0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0, 4.0]]);
        std::fs::write(&p, "[0.5,0]\n[1,2,3]\n").unwrap();
        assert!(matches!(read_logits(&p), Err(Error::Schema(_))));
        std::fs::write(&p, "nope\n").unwrap();
        assert!(matches!(read_logits(&p), Err(Error::Parse { line: 1, .. })));
    }
}
