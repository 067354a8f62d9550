//! End-to-end transmission of a bit sequence over the simulated channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{bins_per_slot, right_closed_bin, ChannelProfile};
use crate::error::Result;
use crate::geometry::{self, EnvironmentConfig, HitRecord};
use crate::modulation::{self, BitSequence, EmissionSchedule, ModulationConfig};
use crate::moleye::{self, EyeDiagram};

/// Where a molecule's arrival time comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalModel {
    /// Draw each molecule's absorption bin from the channel profile's
    /// empirical hit-time histogram. Molecules do not interact, so this has
    /// the same law as stepping them, at the histogram's resolution.
    #[default]
    Resampled,
    /// Step every emitted molecule through the vessel.
    Particle,
}

/// Absolute arrival times for every molecule of `schedule`. Slot `k` emits
/// at `k t_s`; each molecule is followed for the profile horizon
/// `(m + 1) t_s`. `emission_index` is the emitting slot.
pub fn transmit<R: Rng + ?Sized>(
    schedule: &EmissionSchedule,
    profile: &ChannelProfile,
    env: &EnvironmentConfig,
    model: ArrivalModel,
    rng: &mut R,
) -> Result<Vec<HitRecord>> {
    let t_s = profile.symbol_duration;
    let mut hits = Vec::new();
    match model {
        ArrivalModel::Resampled => {
            let sampler = profile.arrival_sampler()?;
            let per_slot = profile.bins_per_slot();
            for (k, &count) in schedule.counts.iter().enumerate() {
                for _ in 0..count {
                    if let Some(b) = sampler.sample_bin(rng) {
                        let global = k * per_slot + b;
                        hits.push(HitRecord {
                            hit_time: (global + 1) as f64 * profile.bin_width,
                            emission_index: k as u64,
                        });
                    }
                }
            }
        }
        ArrivalModel::Particle => {
            let horizon = (profile.isi_window + 1) as f64 * t_s;
            for (k, &count) in schedule.counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let start = k as f64 * t_s;
                hits.extend(
                    geometry::simulate_emission(count as u64, env, horizon, rng)?
                        .into_iter()
                        .map(|h| HitRecord {
                            hit_time: start + h.hit_time,
                            emission_index: k as u64,
                        }),
                );
            }
        }
    }
    Ok(hits)
}

/// Molecules received in each of the first `n_slots` slots, using the same
/// fine-bin assignment as the eye diagram.
pub fn slot_counts(
    hits: &[HitRecord],
    n_slots: usize,
    symbol_duration: f64,
    bin_width: f64,
) -> Result<Vec<u32>> {
    let per_slot = bins_per_slot(symbol_duration, bin_width)?;
    let mut counts = vec![0u32; n_slots];
    for h in hits {
        let slot = right_closed_bin(h.hit_time, bin_width) / per_slot;
        if let Some(c) = counts.get_mut(slot) {
            *c += 1;
        }
    }
    Ok(counts)
}

/// Everything observed in one transmitted sequence.
#[derive(Debug, Clone)]
pub struct LinkRun {
    pub bits: BitSequence,
    pub schedule: EmissionSchedule,
    pub received: Vec<u32>,
    pub decoded: BitSequence,
    pub eye: EyeDiagram,
}

impl LinkRun {
    pub fn errors(&self) -> usize {
        self.bits.errors_against(&self.decoded)
    }
}

/// Encode, transmit, receive and decode one bit sequence.
pub fn run_sequence<R: Rng + ?Sized>(
    bits: BitSequence,
    cfg: &ModulationConfig,
    profile: &ChannelProfile,
    env: &EnvironmentConfig,
    model: ArrivalModel,
    rng: &mut R,
) -> Result<LinkRun> {
    let schedule = modulation::encode(&bits, cfg, profile)?;
    let hits = transmit(&schedule, profile, env, model, rng)?;
    let bin_width = if profile.histogram.is_empty() {
        profile.symbol_duration
    } else {
        profile.bin_width
    };
    let mut eye = moleye::build_eye_diagram(&hits, &bits, profile.symbol_duration, bin_width)?;
    eye.attach_emissions(&schedule.counts);
    let received: Vec<u32> = eye.traces.iter().map(|t| t.total()).collect();
    let decoded = modulation::decode(&received, cfg.threshold);
    Ok(LinkRun {
        bits,
        schedule,
        received,
        decoded,
        eye,
    })
}
