//! Binary concentration shift keying, with and without consecutive power
//! adjustment (CPA), and threshold demodulation.
//!
//! Under CPA the transmitter tracks only the length `z_k` of the run of 1s
//! immediately before slot `k` (capped at the memory `m`). A bit-1 then emits
//!
//! ```text
//! n_k = n1 - (sum_{i=1}^{z_k} p_i n_{k-i}) / p_0
//! ```
//!
//! molecules, where `n_{k-i}` are the counts actually emitted, so that every
//! bit-1 of a run is expected to deliver `p_0 n1` molecules in its own slot.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "bcsk")]
    Bcsk,
    #[serde(rename = "bcsk-cpa")]
    BcskCpa,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Bcsk, Scheme::BcskCpa];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Bcsk => "bcsk",
            Scheme::BcskCpa => "bcsk-cpa",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bcsk" => Ok(Scheme::Bcsk),
            "bcsk-cpa" | "bcsk_cpa" | "cpa" => Ok(Scheme::BcskCpa),
            other => Err(Error::Parse(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    pub scheme: Scheme,
    /// Molecules for an isolated bit-1.
    pub n1: u32,
    /// Molecules for a bit-0; always 0.
    pub n0: u32,
    pub symbol_duration: f64,
    /// Decision threshold `lambda`.
    pub threshold: u32,
    /// CPA memory `m`.
    pub memory: usize,
}

impl ModulationConfig {
    pub fn new(
        scheme: Scheme,
        n1: u32,
        symbol_duration: f64,
        threshold: u32,
        memory: usize,
    ) -> Self {
        Self {
            scheme,
            n1,
            n0: 0,
            symbol_duration,
            threshold,
            memory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 != 0 {
            return Err(Error::config(
                "modulation.n0",
                "bit-0 emits no molecules; n0 must be 0",
            ));
        }
        if self.threshold < 1 {
            return Err(Error::config("modulation.threshold", "must be >= 1"));
        }
        if !(self.symbol_duration > 0.0) {
            return Err(Error::config("modulation.symbol_duration", "must be > 0"));
        }
        if self.scheme == Scheme::BcskCpa && self.memory < 1 {
            return Err(Error::config("modulation.memory", "CPA needs memory >= 1"));
        }
        Ok(())
    }
}

/// Midpoint between the silent level and the equalized bit-1 level,
/// `round(p_0 n1 / 2)`, never below 1.
pub fn default_threshold(p0: f64, n1: u32) -> u32 {
    ((p0 * n1 as f64 / 2.0).round() as u32).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitSequence(Vec<u8>);

impl BitSequence {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument(
                "bit sequence must be non-empty".into(),
            ));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "bit value {b} is not 0 or 1"
            )));
        }
        Ok(Self(bits))
    }

    /// Uniform i.i.d. bits.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..len).map(|_| rng.random_range(0..=1u8)).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    /// Positions where `self` and `other` differ.
    pub fn errors_against(&self, other: &BitSequence) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl FromStr for BitSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Parse(format!("bit string contains `{other}`"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }
}

impl fmt::Display for BitSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Per-slot emission counts `n_Tx[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmissionSchedule {
    pub counts: Vec<u32>,
}

impl EmissionSchedule {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// CSV with header `slot_index,bit,emitted_count`.
    pub fn write_csv<W: Write>(&self, bits: &BitSequence, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot_index", "bit", "emitted_count"])?;
        for (k, (c, b)) in self.counts.iter().zip(bits.bits()).enumerate() {
            w.write_record([k.to_string(), b.to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<schedule csv>", e))?;
        Ok(())
    }
}

/// Length of the run of 1s immediately before index `k`, capped at `m`.
pub fn cpa_history(bits: &BitSequence, k: usize, m: usize) -> Result<usize> {
    if k >= bits.len() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: bits.len(),
        });
    }
    Ok(bits.0[..k]
        .iter()
        .rev()
        .take(m)
        .take_while(|&&b| b == 1)
        .count())
}

/// The CPA transmitter as a state machine.
///
/// State is the run length `z` plus the last `min(z, m)` emitted counts;
/// there is no per-history table.
#[derive(Debug, Clone)]
pub struct CpaEncoder<'a> {
    n1: f64,
    memory: usize,
    fractions: &'a [f64],
    /// Most recent first.
    recent: VecDeque<f64>,
    round: bool,
}

impl<'a> CpaEncoder<'a> {
    pub fn new(n1: u32, memory: usize, profile: &'a ChannelProfile) -> Result<Self> {
        if profile.p0() <= 0.0 {
            return Err(Error::ZeroSameSlotFraction);
        }
        if profile.slot_fractions.len() < memory + 1 {
            return Err(Error::InvalidArgument(format!(
                "profile covers {} slots but CPA memory {memory} needs {}",
                profile.slot_fractions.len(),
                memory + 1
            )));
        }
        Ok(Self {
            n1: n1 as f64,
            memory,
            fractions: &profile.slot_fractions,
            recent: VecDeque::with_capacity(memory),
            round: true,
        })
    }

    /// Keep fractional counts instead of rounding to whole molecules.
    pub fn exact(mut self) -> Self {
        self.round = false;
        self
    }

    /// Current run length `z_k`.
    pub fn run_length(&self) -> usize {
        self.recent.len()
    }

    /// Number of values the encoder holds: the run length and the counts
    /// that feed the residual.
    pub fn state_size(&self) -> usize {
        1 + self.recent.len()
    }

    /// Emission for the next bit; advances the state.
    pub fn push(&mut self, bit: u8) -> f64 {
        if bit == 0 {
            self.recent.clear();
            return 0.0;
        }
        let residual: f64 = self
            .recent
            .iter()
            .enumerate()
            .map(|(i, &n)| self.fractions[i + 1] * n)
            .sum();
        let mut count = (self.n1 - residual / self.fractions[0]).max(0.0);
        if self.round {
            count = count.round();
        }
        self.recent.push_front(count);
        self.recent.truncate(self.memory);
        count
    }
}

/// Map bits to per-slot emission counts.
pub fn encode(
    bits: &BitSequence,
    cfg: &ModulationConfig,
    profile: &ChannelProfile,
) -> Result<EmissionSchedule> {
    let counts = match cfg.scheme {
        Scheme::Bcsk => bits.bits().iter().map(|&b| b as u32 * cfg.n1).collect(),
        Scheme::BcskCpa => {
            let mut enc = CpaEncoder::new(cfg.n1, cfg.memory, profile)?;
            bits.bits().iter().map(|&b| enc.push(b) as u32).collect()
        }
    };
    Ok(EmissionSchedule { counts })
}

/// Real-valued CPA counts (clamped at 0, not rounded).
pub fn encode_exact(
    bits: &BitSequence,
    cfg: &ModulationConfig,
    profile: &ChannelProfile,
) -> Result<Vec<f64>> {
    Ok(match cfg.scheme {
        Scheme::Bcsk => bits
            .bits()
            .iter()
            .map(|&b| (b as u32 * cfg.n1) as f64)
            .collect(),
        Scheme::BcskCpa => {
            let mut enc = CpaEncoder::new(cfg.n1, cfg.memory, profile)?.exact();
            bits.bits().iter().map(|&b| enc.push(b)).collect()
        }
    })
}

/// Threshold detector: 1 iff `n_Rx[k] >= lambda`.
pub fn decode(slot_counts: &[u32], threshold: u32) -> BitSequence {
    BitSequence(
        slot_counts
            .iter()
            .map(|&n| (n >= threshold) as u8)
            .collect(),
    )
}

/// Expected arrivals in slot `k`: `sum_{i=0}^{m} p_i n_Tx[k - i]`.
pub fn expected_arrivals(counts: &[f64], profile: &ChannelProfile, k: usize) -> f64 {
    (0..=profile.isi_window.min(k))
        .map(|i| profile.fraction(i) * counts[k - i])
        .sum()
}

/// Expected arrivals in slot `k` from the run of 1s that ends at `k`
/// (current slot plus the `z_k` preceding ones), the quantity CPA equalizes.
pub fn run_arrivals(
    counts: &[f64],
    bits: &BitSequence,
    profile: &ChannelProfile,
    memory: usize,
    k: usize,
) -> Result<f64> {
    let z = cpa_history(bits, k, memory)?;
    Ok((0..=z).map(|i| profile.fraction(i) * counts[k - i]).sum())
}
