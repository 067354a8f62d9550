//! Channel characterization: per-slot absorption fractions `p_0..p_m` and a
//! fine hit-time histogram, estimated from a single Monte Carlo emission.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, EnvironmentConfig, HitRecord};
use crate::rng;

/// Smallest emission accepted for profile estimation.
pub const MIN_PROFILE_SAMPLES: u64 = 10_000;
pub const DEFAULT_PROFILE_SAMPLES: u64 = 100_000;
pub const DEFAULT_ISI_WINDOW: usize = 5;
/// Fine bins per symbol slot.
pub const DEFAULT_BINS_PER_SLOT: usize = 100;
/// Particles per parallel work unit.
const BATCH: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    /// `p_i` for slots `0..=isi_window` after release.
    pub slot_fractions: Vec<f64>,
    pub symbol_duration: f64,
    pub isi_window: usize,
    /// Hits per fine bin over `(0, (m + 1) t_s]`; bin `b` covers
    /// `(b w, (b + 1) w]`.
    pub histogram: Vec<u64>,
    pub bin_width: f64,
    pub samples: u64,
}

/// Index of the right-closed bin `(b w, (b + 1) w]` holding `t`.
pub(crate) fn right_closed_bin(t: f64, width: f64) -> usize {
    let scaled = t / width;
    ((scaled - 1e-9).ceil() as i64 - 1).max(0) as usize
}

pub(crate) fn bins_per_slot(symbol_duration: f64, bin_width: f64) -> Result<usize> {
    if !(symbol_duration > 0.0 && bin_width > 0.0) {
        return Err(Error::InvalidArgument(
            "symbol duration and bin width must be positive".into(),
        ));
    }
    let ratio = symbol_duration / bin_width;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-6 * rounded {
        return Err(Error::InvalidArgument(format!(
            "bin width {bin_width} does not divide symbol duration {symbol_duration}"
        )));
    }
    Ok(rounded as usize)
}

impl ChannelProfile {
    /// Bin absorption times from an emission of `samples` molecules.
    pub fn from_hits(
        hits: &[HitRecord],
        samples: u64,
        symbol_duration: f64,
        isi_window: usize,
        bin_width: f64,
    ) -> Result<Self> {
        let per_slot = bins_per_slot(symbol_duration, bin_width)?;
        let mut histogram = vec![0u64; per_slot * (isi_window + 1)];
        for hit in hits {
            let b = right_closed_bin(hit.hit_time, bin_width);
            if let Some(slot) = histogram.get_mut(b) {
                *slot += 1;
            }
        }
        Ok(Self::from_histogram(
            histogram,
            samples,
            symbol_duration,
            isi_window,
            bin_width,
        ))
    }

    fn from_histogram(
        histogram: Vec<u64>,
        samples: u64,
        symbol_duration: f64,
        isi_window: usize,
        bin_width: f64,
    ) -> Self {
        let per_slot = histogram.len() / (isi_window + 1);
        let slot_fractions = histogram
            .chunks(per_slot)
            .map(|c| c.iter().sum::<u64>() as f64 / samples as f64)
            .collect();
        Self {
            slot_fractions,
            symbol_duration,
            isi_window,
            histogram,
            bin_width,
            samples,
        }
    }

    /// A profile carrying only the given fractions (no histogram), for
    /// analytical work.
    pub fn synthetic(slot_fractions: &[f64], symbol_duration: f64) -> Result<Self> {
        if slot_fractions.is_empty() {
            return Err(Error::InvalidArgument("need at least p_0".into()));
        }
        if slot_fractions.iter().any(|p| !(0.0..=1.0).contains(p))
            || slot_fractions.iter().sum::<f64>() > 1.0 + 1e-12
        {
            return Err(Error::InvalidArgument(
                "slot fractions must lie in [0,1] and sum to at most 1".into(),
            ));
        }
        Ok(Self {
            slot_fractions: slot_fractions.to_vec(),
            symbol_duration,
            isi_window: slot_fractions.len() - 1,
            histogram: Vec::new(),
            bin_width: symbol_duration,
            samples: 0,
        })
    }

    pub fn p0(&self) -> f64 {
        self.slot_fractions[0]
    }

    /// `p_i`, zero beyond the window.
    pub fn fraction(&self, i: usize) -> f64 {
        self.slot_fractions.get(i).copied().unwrap_or(0.0)
    }

    pub fn bins_per_slot(&self) -> usize {
        if self.histogram.is_empty() {
            1
        } else {
            self.histogram.len() / (self.isi_window + 1)
        }
    }

    pub fn absorbed(&self) -> u64 {
        self.histogram.iter().sum()
    }

    /// Binomial standard error of `p_i`.
    pub fn standard_error(&self, i: usize) -> f64 {
        let p = self.fraction(i);
        (p * (1.0 - p) / self.samples.max(1) as f64).sqrt()
    }

    /// Sampler of per-molecule arrival delays drawn from this profile's
    /// empirical hit-time distribution. A synthetic profile samples whole
    /// slots from its fractions.
    pub fn arrival_sampler(&self) -> Result<ArrivalSampler> {
        if self.histogram.is_empty() || self.samples == 0 {
            const SCALE: f64 = (1u64 << 48) as f64;
            let mut acc = 0.0;
            let cumulative = self
                .slot_fractions
                .iter()
                .map(|p| {
                    acc += p;
                    (acc * SCALE).round() as u64
                })
                .collect();
            return Ok(ArrivalSampler {
                cumulative,
                samples: SCALE as u64,
            });
        }
        let mut cumulative = Vec::with_capacity(self.histogram.len());
        let mut acc = 0u64;
        for &c in &self.histogram {
            acc += c;
            cumulative.push(acc);
        }
        Ok(ArrivalSampler {
            cumulative,
            samples: self.samples,
        })
    }

    /// Flat CSV: a parameter header, the slot fractions, then the histogram.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["t_s", "m", "bin_width", "samples"])?;
        w.write_record([
            self.symbol_duration.to_string(),
            self.isi_window.to_string(),
            self.bin_width.to_string(),
            self.samples.to_string(),
        ])?;
        w.write_record(["slot", "fraction"])?;
        for (i, p) in self.slot_fractions.iter().enumerate() {
            w.write_record([i.to_string(), p.to_string()])?;
        }
        w.write_record(["bin_start", "count"])?;
        for (b, c) in self.histogram.iter().enumerate() {
            w.write_record([(b as f64 * self.bin_width).to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<profile csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_reader(input);
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        let bad = |what: &str| Error::Parse(format!("profile csv: {what}"));
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("bad number `{s}`")))
        };
        if rows.len() < 3 || &rows[0][0] != "t_s" || &rows[2][0] != "slot" {
            return Err(bad("missing header rows"));
        }
        let symbol_duration = num(&rows[1][0])?;
        let isi_window = num(&rows[1][1])? as usize;
        let bin_width = num(&rows[1][2])?;
        let samples = num(&rows[1][3])? as u64;
        let split = rows
            .iter()
            .position(|r| &r[0] == "bin_start")
            .ok_or_else(|| bad("missing histogram header"))?;
        let slot_fractions = rows[3..split]
            .iter()
            .map(|r| num(&r[1]))
            .collect::<Result<Vec<_>>>()?;
        let histogram = rows[split + 1..]
            .iter()
            .map(|r| num(&r[1]).map(|c| c as u64))
            .collect::<Result<Vec<_>>>()?;
        if slot_fractions.len() != isi_window + 1 {
            return Err(bad("slot count does not match m"));
        }
        Ok(Self {
            slot_fractions,
            symbol_duration,
            isi_window,
            histogram,
            bin_width,
            samples,
        })
    }
}

/// Draws arrival delays for individual molecules from an empirical profile.
#[derive(Debug, Clone)]
pub struct ArrivalSampler {
    cumulative: Vec<u64>,
    samples: u64,
}

impl ArrivalSampler {
    /// Fine bin of absorption for one molecule, or `None` if it is not
    /// absorbed within the profile horizon.
    #[inline]
    pub fn sample_bin<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let u = rng.random_range(0..self.samples);
        let b = self.cumulative.partition_point(|&c| c <= u);
        (b < self.cumulative.len()).then_some(b)
    }
}

/// Settings for [`estimate_channel_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRequest {
    pub symbol_duration: f64,
    pub isi_window: usize,
    pub samples: u64,
    pub bin_width: f64,
}

impl ProfileRequest {
    pub fn new(symbol_duration: f64, isi_window: usize, samples: u64) -> Self {
        Self {
            symbol_duration,
            isi_window,
            samples,
            bin_width: symbol_duration / DEFAULT_BINS_PER_SLOT as f64,
        }
    }

    pub fn horizon(&self) -> f64 {
        (self.isi_window + 1) as f64 * self.symbol_duration
    }

    fn validate(&self) -> Result<()> {
        if self.samples < MIN_PROFILE_SAMPLES {
            return Err(Error::config(
                "profile.samples",
                format!(
                    "at least {MIN_PROFILE_SAMPLES} samples required, got {}",
                    self.samples
                ),
            ));
        }
        if !(self.symbol_duration > 0.0) {
            return Err(Error::config("profile.symbol_duration", "must be > 0"));
        }
        bins_per_slot(self.symbol_duration, self.bin_width)?;
        Ok(())
    }
}

/// Run `one` for every particle `0..samples`, particle `i` drawing from
/// stream `i` of `seed`. Two runs that differ only in the environment then
/// drive each particle with the same noise.
fn per_particle<T: Send>(
    samples: u64,
    seed: u64,
    one: impl Fn(&mut rng::RandomSource) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let per_batch: Vec<Vec<T>> = (0..samples.div_ceil(BATCH))
        .into_par_iter()
        .map(|b| {
            (b * BATCH..samples.min((b + 1) * BATCH))
                .map(|i| one(&mut rng::stream(seed, i)))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

/// Emit `req.samples` molecules at `t = 0` and measure `p_0..p_m`.
///
/// Molecules are tracked for `(m + 1) t_s`; later arrivals are excluded.
/// Every particle has its own stream of `env.rng_seed`, so the
/// result does not depend on the thread count.
pub fn estimate_channel_profile(
    env: &EnvironmentConfig,
    req: &ProfileRequest,
) -> Result<ChannelProfile> {
    req.validate()?;
    env.validate()?;
    let horizon = req.horizon();
    let hits: Vec<HitRecord> = per_particle(req.samples, env.rng_seed, |r| {
        geometry::simulate_emission(1, env, horizon, r)
    })?
    .into_iter()
    .flatten()
    .collect();
    ChannelProfile::from_hits(
        &hits,
        req.samples,
        req.symbol_duration,
        req.isi_window,
        req.bin_width,
    )
}

/// Profiles of the same Brownian paths at `dt` and `dt / 2`, for checking
/// time-step convergence.
pub fn estimate_profile_pair_halved(
    env: &EnvironmentConfig,
    req: &ProfileRequest,
) -> Result<(ChannelProfile, ChannelProfile)> {
    req.validate()?;
    env.validate()?;
    let horizon = req.horizon();
    let pairs = per_particle(req.samples, env.rng_seed, |r| {
        geometry::simulate_emission_halved(1, env, horizon, r)
    })?;
    let (mut coarse, mut fine) = (Vec::new(), Vec::new());
    for (c, f) in pairs {
        coarse.extend(c);
        fine.extend(f);
    }
    let build = |hits: &[HitRecord]| {
        ChannelProfile::from_hits(
            hits,
            req.samples,
            req.symbol_duration,
            req.isi_window,
            req.bin_width,
        )
    };
    Ok((build(&coarse)?, build(&fine)?))
}
