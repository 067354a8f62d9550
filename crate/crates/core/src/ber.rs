//! Bit error rate: Monte Carlo measurement and the semi-analytical estimate.
//!
//! The semi-analytical BER treats the slot count as Gaussian with
//! `mu_k = sum p_i n_{k-i}` and `sigma_k^2 = sum p_i (1 - p_i) n_{k-i}`,
//! enumerates every equiprobable history of the ISI window together with
//! the current bit, and sums the resulting tail probabilities.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelProfile;
use crate::error::{Error, Result};
use crate::geometry::{normal_cdf, EnvironmentConfig};
use crate::link::ArrivalModel;
use crate::modulation::{encode, BitSequence, ModulationConfig};
use crate::runner;

/// Largest ISI window the history enumeration accepts.
pub const MAX_ENUMERATED_WINDOW: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSlotParams {
    pub mean: f64,
    pub variance: f64,
}

/// Gaussian moments of the count in slot `k` for emissions `counts`.
pub fn gaussian_slot_params(
    counts: &[f64],
    profile: &ChannelProfile,
    k: usize,
) -> GaussianSlotParams {
    let (mut mean, mut variance) = (0.0, 0.0);
    for i in 0..=profile.isi_window.min(k) {
        let p = profile.fraction(i);
        let n = counts[k - i];
        mean += p * n;
        variance += p * (1.0 - p) * n;
    }
    GaussianSlotParams { mean, variance }
}

/// Probability of deciding wrongly on a slot that carries `bit`, with the
/// count approximated by `params` and the threshold continuity-corrected
/// to `lambda - 1/2`. A zero-variance count is decided deterministically.
pub fn slot_error_probability(params: GaussianSlotParams, bit: u8, threshold: u32) -> f64 {
    let lambda = threshold as f64;
    if params.variance <= 0.0 {
        let decided_one = params.mean >= lambda;
        return if decided_one == (bit == 1) { 0.0 } else { 1.0 };
    }
    let z = (lambda - 0.5 - params.mean) / params.variance.sqrt();
    if bit == 0 {
        normal_cdf(-z)
    } else {
        normal_cdf(z)
    }
}

/// One equiprobable (history, current bit) combination of the ISI window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryTerm {
    pub bit: u8,
    pub params: GaussianSlotParams,
}

/// Gaussian slot moments for all `2^m` histories and both current bits.
/// Histories before the window are silent.
pub fn history_terms(cfg: &ModulationConfig, profile: &ChannelProfile) -> Result<Vec<HistoryTerm>> {
    let m = profile.isi_window;
    if m > MAX_ENUMERATED_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ISI window {m} exceeds the enumeration limit {MAX_ENUMERATED_WINDOW}"
        )));
    }
    let mut terms = Vec::with_capacity(2 << m);
    let mut seq = vec![0u8; m + 1];
    for history in 0u64..(1 << m) {
        // seq[m - 1 - i] is the bit i + 1 slots back
        for i in 0..m {
            seq[m - 1 - i] = ((history >> i) & 1) as u8;
        }
        for bit in [0u8, 1] {
            seq[m] = bit;
            let bits = BitSequence::new(seq.clone())?;
            let counts: Vec<f64> = encode(&bits, cfg, profile)?
                .counts
                .iter()
                .map(|&c| c as f64)
                .collect();
            terms.push(HistoryTerm {
                bit,
                params: gaussian_slot_params(&counts, profile, m),
            });
        }
    }
    Ok(terms)
}

/// Average error probability of `terms` at threshold `threshold`.
pub fn ber_from_terms(terms: &[HistoryTerm], threshold: u32) -> f64 {
    let total: f64 = terms
        .iter()
        .map(|t| slot_error_probability(t.params, t.bit, threshold))
        .sum();
    total / terms.len().max(1) as f64
}

/// Error probability averaged over all `2^m` histories and both current bits.
pub fn semi_analytical_ber(cfg: &ModulationConfig, profile: &ChannelProfile) -> Result<f64> {
    cfg.validate()?;
    Ok(ber_from_terms(&history_terms(cfg, profile)?, cfg.threshold))
}

/// Threshold in `1..=max(n1, 1)` with the lowest semi-analytical BER (the
/// smallest such threshold on ties), and that BER.
pub fn semi_optimal_threshold(
    cfg: &ModulationConfig,
    profile: &ChannelProfile,
) -> Result<(u32, f64)> {
    let terms = history_terms(cfg, profile)?;
    let mut best = (1, ber_from_terms(&terms, 1));
    for lambda in 2..=cfg.n1.max(1) {
        let b = ber_from_terms(&terms, lambda);
        if b < best.1 {
            best = (lambda, b);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerResult {
    pub simulated_ber: f64,
    pub semi_analytical_ber: f64,
    pub bits_tested: u64,
    pub errors_observed: u64,
}

impl BerResult {
    pub fn from_counts(errors_observed: u64, bits_tested: u64, semi_analytical_ber: f64) -> Self {
        Self {
            simulated_ber: errors_observed as f64 / bits_tested.max(1) as f64,
            semi_analytical_ber,
            bits_tested,
            errors_observed,
        }
    }

    /// Binomial standard error of the simulated BER.
    pub fn standard_error(&self) -> f64 {
        let p = self.simulated_ber;
        (p * (1.0 - p) / self.bits_tested.max(1) as f64).sqrt()
    }
}

/// Monte Carlo BER over `n_reps` independent random sequences of `n_bits`.
pub fn simulate_ber(
    cfg: &ModulationConfig,
    env: &EnvironmentConfig,
    profile: &ChannelProfile,
    n_bits: usize,
    n_reps: u64,
    master_seed: u64,
    model: ArrivalModel,
) -> Result<BerResult> {
    if n_bits == 0 || n_reps == 0 {
        return Err(Error::InvalidArgument(
            "n_bits and n_reps must be >= 1".into(),
        ));
    }
    let point = runner::simulate_point(&runner::PointJob {
        modulation: *cfg,
        env: *env,
        profile,
        n_bits,
        reps: 0..n_reps,
        master_seed,
        sweep_index: 0,
        model,
        keep_eye: false,
    })?;
    Ok(point.ber)
}

/// Pick the threshold that minimizes errors over `(bit, received)` pairs.
/// Among equally good thresholds the middle of the first best run wins.
pub fn best_threshold(observations: &[(u8, u32)]) -> u32 {
    let top = observations.iter().map(|&(_, n)| n).max().unwrap_or(0) as usize + 2;
    let mut zeros_at = vec![0u64; top];
    let mut ones_at = vec![0u64; top];
    for &(bit, n) in observations {
        if bit == 0 {
            zeros_at[n as usize] += 1;
        } else {
            ones_at[n as usize] += 1;
        }
    }
    // errors(l) = #{bit-0 with n >= l} + #{bit-1 with n < l}
    let mut zeros_at_or_above: u64 = zeros_at.iter().sum();
    let mut ones_below = 0u64;
    let mut errors = Vec::with_capacity(top);
    for l in 0..top {
        if l >= 1 {
            errors.push((l as u32, zeros_at_or_above + ones_below));
        }
        zeros_at_or_above -= zeros_at[l];
        ones_below += ones_at[l];
    }
    let best = errors.iter().map(|&(_, e)| e).min().unwrap_or(0);
    let first = errors.iter().position(|&(_, e)| e == best).unwrap_or(0);
    let run = errors[first..]
        .iter()
        .take_while(|&&(_, e)| e == best)
        .count();
    errors[first + (run - 1) / 2].0
}

/// Threshold sweep on a training run whose seeds are disjoint from the
/// evaluation runs.
pub fn train_threshold(
    cfg: &ModulationConfig,
    env: &EnvironmentConfig,
    profile: &ChannelProfile,
    n_bits: usize,
    n_reps: u64,
    master_seed: u64,
    model: ArrivalModel,
) -> Result<u32> {
    let obs = runner::collect_observations(
        cfg,
        env,
        profile,
        n_bits,
        n_reps,
        master_seed ^ TRAINING_SALT,
        model,
    )?;
    Ok(best_threshold(&obs))
}

const TRAINING_SALT: u64 = 0x7472_6169_6e69_6e67;
