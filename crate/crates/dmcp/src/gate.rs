//! Per-layer architecture parameters and the channel-group retention chain.
//!
//! Each prunable layer owns a gate of `num_groups` channel groups. Group 1 is
//! always retained; group k+1 is retained with transition probability
//! sigmoid(alpha_{k+1}) given group k is retained, so any sampled structure
//! keeps a prefix of groups. Marginal retention probabilities (products of
//! transitions) double as soft scaling factors during fused forwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logit, sigmoid};

/// How the architecture parameters are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Chain of conditional retentions; structures are channel prefixes.
    Markov,
    /// Independent per-group retention; kept for the ablation path.
    Bernoulli,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::Markov => "markov",
            GateMode::Bernoulli => "bernoulli",
        }
    }
}

/// Architecture parameters for one prunable layer: one learnable scalar per
/// channel group beyond the first. Never receives weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateParams {
    alpha: Vec<f64>,
    grad: Vec<f64>,
    group_size: usize,
    num_groups: usize,
    mode: GateMode,
}

impl GateParams {
    /// Gate initialized near full retention: every transition starts at
    /// sigmoid(alpha) ~ init_keep_prob plus uniform noise in [-0.1, 0.1].
    pub fn init<R: Rng>(num_groups: usize, group_size: usize, init_keep_prob: f64, mode: GateMode, rng: &mut R) -> Self {
        assert!(num_groups >= 1 && group_size >= 1);
        let base = logit(init_keep_prob);
        let alpha = (0..num_groups.saturating_sub(1))
            .map(|_| base + rng.gen_range(-0.1..0.1))
            .collect::<Vec<_>>();
        let grad = vec![0.0; alpha.len()];
        GateParams { alpha, grad, group_size, num_groups, mode }
    }

    /// Gate whose transitions all round to exactly 1.0 in f64, so marginal
    /// scaling is the identity and expected counts are exact integers.
    pub fn saturated(num_groups: usize, group_size: usize, mode: GateMode) -> Self {
        GateParams::with_alpha(vec![40.0; num_groups - 1], group_size, mode)
    }

    /// Gate saturated to retain exactly `keep` groups: transitions up to
    /// `keep` are 1, the next transition is ~0.
    pub fn saturated_at(num_groups: usize, group_size: usize, keep: usize, mode: GateMode) -> Self {
        assert!(keep >= 1 && keep <= num_groups);
        let alpha = (0..num_groups - 1).map(|i| if i + 2 <= keep { 40.0 } else { -40.0 }).collect();
        GateParams::with_alpha(alpha, group_size, mode)
    }

    pub fn with_alpha(alpha: Vec<f64>, group_size: usize, mode: GateMode) -> Self {
        let num_groups = alpha.len() + 1;
        let grad = vec![0.0; alpha.len()];
        GateParams { alpha, grad, group_size, num_groups, mode }
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn max_channels(&self) -> usize {
        self.num_groups * self.group_size
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Transition probabilities p_1..p_G; p_1 is exactly 1.
    pub fn transition_probs(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_groups);
        p.push(1.0);
        p.extend(self.alpha.iter().map(|&a| sigmoid(a)));
        p
    }

    /// Marginal retention probabilities m_k = prod_{i<=k} p_i under the
    /// chain. Requires Markov mode.
    pub fn marginal_probs(&self) -> Result<Vec<f64>> {
        if self.mode != GateMode::Markov {
            return Err(Error::GateMode { expected: "markov", got: self.mode.name() });
        }
        Ok(self.markov_marginals_unchecked())
    }

    fn markov_marginals_unchecked(&self) -> Vec<f64> {
        let p = self.transition_probs();
        let mut m = Vec::with_capacity(self.num_groups);
        let mut acc = 1.0;
        for pk in p {
            acc *= pk;
            m.push(acc);
        }
        m
    }

    /// Independent retention probabilities m_1 = 1, m_k = sigmoid(alpha_k).
    /// Requires Bernoulli mode.
    pub fn bernoulli_marginals(&self) -> Result<Vec<f64>> {
        if self.mode != GateMode::Bernoulli {
            return Err(Error::GateMode { expected: "bernoulli", got: self.mode.name() });
        }
        let mut m = Vec::with_capacity(self.num_groups);
        m.push(1.0);
        m.extend(self.alpha.iter().map(|&a| sigmoid(a)));
        Ok(m)
    }

    /// Mode-dispatched marginals used by fuse, budget, and sampling.
    pub fn marginals(&self) -> Vec<f64> {
        match self.mode {
            GateMode::Markov => self.markov_marginals_unchecked(),
            GateMode::Bernoulli => self.bernoulli_marginals().expect("mode checked"),
        }
    }

    /// Expected retained group count: sum of marginals. Real-valued.
    pub fn expected_groups(&self) -> f64 {
        self.marginals().iter().sum()
    }

    /// Simulates the retention chain: starts at group 1, advances to group
    /// k+1 with probability p_{k+1}, stops otherwise. Returns the retained
    /// group count in [1, G]; the retained set is always the prefix 1..=k.
    pub fn run_markov_sampling<R: Rng>(&self, rng: &mut R) -> usize {
        let p = self.transition_probs();
        let mut k = 1;
        while k < self.num_groups {
            if rng.gen::<f64>() < p[k] {
                k += 1;
            } else {
                break;
            }
        }
        k
    }

    /// Independent retention draw: a boolean mask over groups, group 1
    /// always retained. Unlike the chain, the mask may have gaps.
    pub fn run_bernoulli_sampling<R: Rng>(&self, rng: &mut R) -> Result<Vec<bool>> {
        let m = self.bernoulli_marginals()?;
        let mut mask = vec![true];
        mask.extend(m[1..].iter().map(|&p| rng.gen::<f64>() < p));
        Ok(mask)
    }

    /// Draws a retained-group count under the current mode. In Bernoulli
    /// mode the count is the number of retained groups in the mask (the
    /// prefix of that length is what a sliced forward trains).
    pub fn sample_group_count<R: Rng>(&self, rng: &mut R) -> usize {
        match self.mode {
            GateMode::Markov => self.run_markov_sampling(rng),
            GateMode::Bernoulli => {
                let mask = self.run_bernoulli_sampling(rng).expect("mode checked");
                mask.iter().filter(|&&b| b).count()
            }
        }
    }

    /// Closed-form distribution of the chain's retained count:
    /// P(retain exactly k) = m_k * (1 - p_{k+1}), with p_{G+1} = 0.
    pub fn retain_count_distribution(&self) -> Vec<f64> {
        let p = self.transition_probs();
        let m = self.marginals();
        (0..self.num_groups)
            .map(|i| {
                let p_next = if i + 1 < self.num_groups { p[i + 1] } else { 0.0 };
                m[i] * (1.0 - p_next)
            })
            .collect()
    }
}

/// Default initial keep probability for fresh gates; the network starts
/// near-unpruned and the budget term prunes it down.
pub const DEFAULT_INIT_KEEP_PROB: f64 = 0.9;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_transition_is_always_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GateParams::init(10, 4, 0.5, GateMode::Markov, &mut rng);
        assert_eq!(g.transition_probs()[0], 1.0);
    }

    #[test]
    fn zero_alpha_gives_half_transitions() {
        let g = GateParams::with_alpha(vec![0.0, 0.0], 4, GateMode::Markov);
        let p = g.transition_probs();
        assert_eq!(p, vec![1.0, 0.5, 0.5]);
        let m = g.marginal_probs().unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert!((m[1] - 0.5).abs() < 1e-15);
        assert!((m[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn large_alpha_saturates_monotonically() {
        let g = GateParams::with_alpha(vec![50.0, 50.0], 1, GateMode::Markov);
        assert_eq!(g.transition_probs(), vec![1.0, 1.0, 1.0]);
        assert_eq!(g.marginal_probs().unwrap(), vec![1.0, 1.0, 1.0]);

        let lo = GateParams::with_alpha(vec![-1.0, -1.0], 1, GateMode::Markov);
        let hi = GateParams::with_alpha(vec![1.0, -1.0], 1, GateMode::Markov);
        let (mlo, mhi) = (lo.marginal_probs().unwrap(), hi.marginal_probs().unwrap());
        for k in 0..3 {
            assert!(mhi[k] >= mlo[k]);
        }
    }

    #[test]
    fn marginals_are_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = GateParams::init(12, 2, 0.6, GateMode::Markov, &mut rng);
            let m = g.marginal_probs().unwrap();
            for k in 1..m.len() {
                assert!(m[k] <= m[k - 1]);
            }
        }
    }

    #[test]
    fn chain_always_full_when_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GateParams::saturated(8, 2, GateMode::Markov);
        for _ in 0..200 {
            assert_eq!(g.run_markov_sampling(&mut rng), 8);
        }
    }

    #[test]
    fn chain_stops_at_one_when_second_transition_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = GateParams::with_alpha(vec![-800.0, 3.0], 2, GateMode::Markov);
        for _ in 0..200 {
            assert_eq!(g.run_markov_sampling(&mut rng), 1);
        }
    }

    #[test]
    fn retain_distribution_sums_to_one_and_matches_expectation() {
        let g = GateParams::with_alpha(vec![0.3, -0.7, 1.2, 0.0], 2, GateMode::Markov);
        let dist = g.retain_count_distribution();
        let total: f64 = dist.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mean: f64 = dist.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        assert!((mean - g.expected_groups()).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_mode_gates_marginal_access() {
        let markov = GateParams::with_alpha(vec![0.0; 3], 1, GateMode::Markov);
        assert!(matches!(markov.bernoulli_marginals(), Err(Error::GateMode { .. })));

        let bern = GateParams::with_alpha(vec![0.0; 3], 1, GateMode::Bernoulli);
        assert!(matches!(bern.marginal_probs(), Err(Error::GateMode { .. })));
        let m = bern.bernoulli_marginals().unwrap();
        assert_eq!(m, vec![1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn bernoulli_saturated_marginals_approach_one() {
        let bern = GateParams::with_alpha(vec![60.0; 3], 1, GateMode::Bernoulli);
        assert_eq!(bern.bernoulli_marginals().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn bernoulli_sampling_can_skip_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bern = GateParams::with_alpha(vec![0.0; 4], 1, GateMode::Bernoulli);
        let mut saw_gap = false;
        for _ in 0..1000 {
            let mask = bern.run_bernoulli_sampling(&mut rng).unwrap();
            assert!(mask[0]);
            let retained: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let prefix = (0..retained.len()).collect::<Vec<_>>();
            if retained != prefix {
                saw_gap = true;
                break;
            }
        }
        assert!(saw_gap, "independent draws should produce a non-prefix subset");
    }
}
