//! Experiment orchestration: specs, sweeps, replications and output files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ber::{self, BerResult};
use crate::channel::{self, ChannelProfile, ProfileRequest};
use crate::error::{Error, Result};
use crate::geometry::{EnvironmentConfig, HitDetection, DESK_TIME_STEP, TABLE1_TIME_STEP};
use crate::link::{self, ArrivalModel, LinkRun};
use crate::modulation::{default_threshold, BitSequence, ModulationConfig, Scheme};
use crate::moleye::{
    self, EyeDiagram, EyeMetrics, HeightMode, MetricModes, Normalization, StdMode,
};
use crate::rng::{self, RandomSource};

/// Salt mixed into the master seed for channel profile estimation.
pub const PROFILE_SEED_SALT: u64 = 0x5052_4f46;

/// Replication groups used for the batch-means standard error of CSNR.
pub const CSNR_BATCHES: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Good,
    Moderate,
    Harsh,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Good, Preset::Moderate, Preset::Harsh];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Good => "good",
            Preset::Moderate => "moderate",
            Preset::Harsh => "harsh",
        }
    }

    /// `(distance, diffusion_coeff, flow_velocity)` in um, um^2/s, um/s.
    pub fn parameters(&self) -> (f64, f64, f64) {
        match self {
            Preset::Good => (4.0, 150.0, 5.0),
            Preset::Moderate => (5.0, 100.0, 2.5),
            Preset::Harsh => (6.0, 50.0, 0.0),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fidelity {
    /// Time step 1e-4 s.
    #[default]
    Desk,
    /// Time step 0.1 us.
    Table1,
}

impl Fidelity {
    pub fn time_step(&self) -> f64 {
        match self {
            Fidelity::Desk => DESK_TIME_STEP,
            Fidelity::Table1 => TABLE1_TIME_STEP,
        }
    }
}

impl FromStr for Fidelity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Fidelity::Desk),
            "table1" => Ok(Fidelity::Table1),
            other => Err(Error::Parse(format!("unknown fidelity `{other}`"))),
        }
    }
}

/// Environment section of a spec: an optional preset plus overrides.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_velocity: Option<f64>,
    /// Overrides the fidelity's time step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_detection: Option<HitDetection>,
}

impl EnvironmentSpec {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset: Some(preset),
            ..Self::default()
        }
    }

    pub fn resolve(&self, fidelity: Fidelity, seed: u64) -> EnvironmentConfig {
        let base = EnvironmentConfig::default();
        let (d, diff, v) = match self.preset {
            Some(p) => p.parameters(),
            None => (base.distance, base.diffusion_coeff, base.flow_velocity),
        };
        EnvironmentConfig {
            channel_radius: self.channel_radius.unwrap_or(base.channel_radius),
            receiver_radius: self.receiver_radius.unwrap_or(base.receiver_radius),
            distance: self.distance.unwrap_or(d),
            diffusion_coeff: self.diffusion_coeff.unwrap_or(diff),
            flow_velocity: self.flow_velocity.unwrap_or(v),
            time_step: self.time_step.unwrap_or(fidelity.time_step()),
            rng_seed: seed,
            hit_detection: self.hit_detection.unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `round(p_0 n1 / 2)`.
    Midpoint,
    /// Minimum-error threshold on a separate training run.
    Trained,
    /// Minimum of the semi-analytical BER over all thresholds.
    SemiOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSpec {
    Fixed(u32),
    Rule(ThresholdRule),
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::Rule(ThresholdRule::Midpoint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationSpec {
    #[serde(default = "all_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_n1")]
    pub n1: u32,
    #[serde(default = "default_symbol_duration")]
    pub symbol_duration: f64,
    #[serde(default)]
    pub threshold: ThresholdSpec,
    #[serde(default = "default_window")]
    pub memory: usize,
}

fn all_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}
fn default_n1() -> u32 {
    300
}
fn default_symbol_duration() -> f64 {
    0.5
}
fn default_window() -> usize {
    channel::DEFAULT_ISI_WINDOW
}

impl Default for ModulationSpec {
    fn default() -> Self {
        Self {
            schemes: all_schemes(),
            n1: default_n1(),
            symbol_duration: default_symbol_duration(),
            threshold: ThresholdSpec::default(),
            memory: default_window(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub samples: u64,
    pub bins_per_slot: usize,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            samples: channel::DEFAULT_PROFILE_SAMPLES,
            bins_per_slot: channel::DEFAULT_BINS_PER_SLOT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Preset,
    Distance,
    DiffusionCoeff,
    FlowVelocity,
    N1,
    SymbolDuration,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Preset => "preset",
            SweepParameter::Distance => "distance",
            SweepParameter::DiffusionCoeff => "diffusion_coeff",
            SweepParameter::FlowVelocity => "flow_velocity",
            SweepParameter::N1 => "n1",
            SweepParameter::SymbolDuration => "symbol_duration",
        }
    }

    /// Simulation ranges of the reference parameter table.
    fn range(&self) -> Option<(f64, f64)> {
        match self {
            SweepParameter::Preset => None,
            SweepParameter::Distance => Some((4.0, 6.0)),
            SweepParameter::DiffusionCoeff => Some((50.0, 150.0)),
            SweepParameter::FlowVelocity => Some((0.0, 5.0)),
            SweepParameter::N1 => Some((50.0, 300.0)),
            SweepParameter::SymbolDuration => Some((0.4, 0.5)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Preset(Preset),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(x) => write!(f, "{x}"),
            SweepValue::Preset(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    pub values: Vec<SweepValue>,
    #[serde(default)]
    pub allow_out_of_range: bool,
}

impl SweepAxis {
    pub fn numbers(parameter: SweepParameter, values: &[f64]) -> Self {
        Self {
            parameter,
            values: values.iter().map(|&v| SweepValue::Number(v)).collect(),
            allow_out_of_range: false,
        }
    }

    pub fn presets(values: &[Preset]) -> Self {
        Self {
            parameter: SweepParameter::Preset,
            values: values.iter().map(|&p| SweepValue::Preset(p)).collect(),
            allow_out_of_range: false,
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let field = |what: &str| format!("sweep[{i}].{what}");
        if self.values.is_empty() {
            return Err(Error::config(field("values"), "must not be empty"));
        }
        for (j, v) in self.values.iter().enumerate() {
            match (self.parameter, v) {
                (SweepParameter::Preset, SweepValue::Preset(_)) => {}
                (SweepParameter::Preset, SweepValue::Number(_)) => {
                    return Err(Error::config(
                        field(&format!("values[{j}]")),
                        "expected a preset name",
                    ));
                }
                (_, SweepValue::Preset(_)) => {
                    return Err(Error::config(
                        field(&format!("values[{j}]")),
                        "expected a number",
                    ));
                }
                (p, SweepValue::Number(x)) => {
                    if !x.is_finite() {
                        return Err(Error::config(
                            field(&format!("values[{j}]")),
                            "must be finite",
                        ));
                    }
                    let (lo, hi) = p.range().unwrap_or((f64::MIN, f64::MAX));
                    if !self.allow_out_of_range && !(lo..=hi).contains(x) {
                        return Err(Error::config(
                            field(&format!("values[{j}]")),
                            format!(
                                "{x} outside [{lo}, {hi}]; set allow_out_of_range = true to permit"
                            ),
                        ));
                    }
                    if p == SweepParameter::N1 && (x.fract() != 0.0 || *x < 0.0) {
                        return Err(Error::config(
                            field(&format!("values[{j}]")),
                            "n1 must be a whole number",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    BerCsv,
    MetricsCsv,
    EyeCsv,
    EyeSvg,
    ProfileCsv,
}

/// A complete experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_bits")]
    pub n_bits: usize,
    #[serde(default = "default_n_reps")]
    pub n_reps: u64,
    #[serde(default)]
    pub fidelity: Fidelity,
    #[serde(default)]
    pub arrival_model: ArrivalModel,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub modulation: ModulationSpec,
    #[serde(default)]
    pub profile: ProfileSpec,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<OutputKind>,
    #[serde(default)]
    pub metrics: MetricModes,
    /// Replications drawn in eye CSV/SVG files.
    #[serde(default = "default_eye_plot_reps")]
    pub eye_plot_reps: u64,
    /// Seed every sweep point with sweep index 0, so all points see the
    /// same bit sequences and uniforms (common random numbers).
    #[serde(default)]
    pub paired_seeds: bool,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_n_bits() -> usize {
    100
}
fn default_n_reps() -> u64 {
    250
}
fn default_outputs() -> Vec<OutputKind> {
    vec![OutputKind::BerCsv, OutputKind::MetricsCsv]
}
fn default_eye_plot_reps() -> u64 {
    1
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: default_name(),
            seed: 0,
            n_bits: default_n_bits(),
            n_reps: default_n_reps(),
            fidelity: Fidelity::Desk,
            arrival_model: ArrivalModel::Resampled,
            environment: EnvironmentSpec::default(),
            modulation: ModulationSpec::default(),
            profile: ProfileSpec::default(),
            sweep: Vec::new(),
            outputs: default_outputs(),
            metrics: MetricModes::default(),
            eye_plot_reps: default_eye_plot_reps(),
            paired_seeds: false,
        }
    }
}

/// One resolved sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub index: u64,
    pub label: String,
    pub environment: EnvironmentConfig,
    pub n1: u32,
    pub symbol_duration: f64,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Read a TOML spec, or the spec embedded in a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            Ok(manifest.spec)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bits == 0 {
            return Err(Error::config("n_bits", "must be >= 1"));
        }
        if self.n_reps == 0 {
            return Err(Error::config("n_reps", "must be >= 1"));
        }
        if self.modulation.schemes.is_empty() {
            return Err(Error::config("modulation.schemes", "must not be empty"));
        }
        if self.profile.samples < channel::MIN_PROFILE_SAMPLES {
            return Err(Error::config(
                "profile.samples",
                format!("at least {} samples required", channel::MIN_PROFILE_SAMPLES),
            ));
        }
        if self.profile.bins_per_slot == 0 {
            return Err(Error::config("profile.bins_per_slot", "must be >= 1"));
        }
        if let ThresholdSpec::Fixed(0) = self.modulation.threshold {
            return Err(Error::config("modulation.threshold", "must be >= 1"));
        }
        let mut seen = Vec::new();
        for (i, axis) in self.sweep.iter().enumerate() {
            axis.validate(i)?;
            if seen.contains(&axis.parameter) {
                return Err(Error::config(
                    format!("sweep[{i}].parameter"),
                    "swept twice",
                ));
            }
            seen.push(axis.parameter);
        }
        for point in self.points() {
            point
                .environment
                .validate()
                .map_err(|e| prefix_field(e, "environment"))?;
            self.modulation_for(&point, self.modulation.schemes[0], 1)
                .validate()
                .map_err(|e| prefix_field(e, ""))?;
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes, the first axis varying slowest.
    pub fn points(&self) -> Vec<SweepPoint> {
        let profile_seed = rng::splitmix64(self.seed ^ PROFILE_SEED_SALT);
        let base_env = self.environment.resolve(self.fidelity, profile_seed);
        let mut points = vec![(
            Vec::<String>::new(),
            self.environment,
            self.modulation.n1,
            self.modulation.symbol_duration,
        )];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(points.len() * axis.values.len());
            for (labels, env, n1, t_s) in &points {
                for value in &axis.values {
                    let (mut env, mut n1, mut t_s) = (*env, *n1, *t_s);
                    match (axis.parameter, *value) {
                        (SweepParameter::Preset, SweepValue::Preset(p)) => {
                            env.preset = Some(p);
                            env.distance = None;
                            env.diffusion_coeff = None;
                            env.flow_velocity = None;
                        }
                        (SweepParameter::Distance, SweepValue::Number(x)) => env.distance = Some(x),
                        (SweepParameter::DiffusionCoeff, SweepValue::Number(x)) => {
                            env.diffusion_coeff = Some(x)
                        }
                        (SweepParameter::FlowVelocity, SweepValue::Number(x)) => {
                            env.flow_velocity = Some(x)
                        }
                        (SweepParameter::N1, SweepValue::Number(x)) => n1 = x as u32,
                        (SweepParameter::SymbolDuration, SweepValue::Number(x)) => t_s = x,
                        _ => {}
                    }
                    let mut labels = labels.clone();
                    labels.push(match value {
                        SweepValue::Preset(p) => p.name().to_string(),
                        SweepValue::Number(x) => format!("{}={x}", axis.parameter.name()),
                    });
                    next.push((labels, env, n1, t_s));
                }
            }
            points = next;
        }
        points
            .into_iter()
            .enumerate()
            .map(|(i, (labels, env, n1, t_s))| {
                let label = if labels.is_empty() {
                    self.environment
                        .preset
                        .map_or("base".to_string(), |p| p.name().to_string())
                } else {
                    labels.join(",")
                };
                SweepPoint {
                    index: i as u64,
                    label,
                    environment: env.resolve(self.fidelity, base_env.rng_seed),
                    n1,
                    symbol_duration: t_s,
                }
            })
            .collect()
    }

    pub fn profile_request(&self, point: &SweepPoint) -> ProfileRequest {
        ProfileRequest {
            symbol_duration: point.symbol_duration,
            isi_window: self.modulation.memory,
            samples: self.profile.samples,
            bin_width: point.symbol_duration / self.profile.bins_per_slot as f64,
        }
    }

    fn modulation_for(
        &self,
        point: &SweepPoint,
        scheme: Scheme,
        threshold: u32,
    ) -> ModulationConfig {
        ModulationConfig::new(
            scheme,
            point.n1,
            point.symbol_duration,
            threshold,
            self.modulation.memory,
        )
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidConfig { field, reason } if !prefix.is_empty() => Error::InvalidConfig {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

/// Named figure and table reproductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Table3,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Fig3,
        Target::Fig4,
        Target::Fig5,
        Target::Fig6,
        Target::Table3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Target::Fig3 => "fig3",
            Target::Fig4 => "fig4",
            Target::Fig5 => "fig5",
            Target::Fig6 => "fig6",
            Target::Table3 => "table3",
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown target `{s}` (expected fig3, fig4, fig5, fig6 or table3)"
                ))
            })
    }
}

/// Flow velocities of the flow sweeps, 0 to 5 um/s in steps of 0.5.
pub fn flow_sweep_values() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.5).collect()
}

/// Diffusion coefficients of the two-curve flow sweep.
pub const FLOW_SWEEP_DIFFUSION: [f64; 2] = [50.0, 100.0];

pub fn reproduce_spec(target: Target, seed: u64) -> ExperimentSpec {
    let flow_env = EnvironmentSpec {
        distance: Some(6.0),
        ..EnvironmentSpec::default()
    };
    let flow_modulation = ModulationSpec {
        n1: 300,
        symbol_duration: 0.4,
        threshold: ThresholdSpec::Rule(ThresholdRule::SemiOptimal),
        ..ModulationSpec::default()
    };
    let base = ExperimentSpec {
        name: target.name().to_string(),
        seed,
        paired_seeds: target != Target::Table3,
        ..ExperimentSpec::default()
    };
    let flow_sweep = vec![
        SweepAxis::numbers(SweepParameter::DiffusionCoeff, &FLOW_SWEEP_DIFFUSION),
        SweepAxis::numbers(SweepParameter::FlowVelocity, &flow_sweep_values()),
    ];
    match target {
        Target::Fig3 => ExperimentSpec {
            environment: flow_env,
            modulation: flow_modulation,
            sweep: flow_sweep,
            outputs: vec![OutputKind::BerCsv],
            ..base
        },
        Target::Fig4 => ExperimentSpec {
            environment: EnvironmentSpec {
                flow_velocity: Some(0.0),
                ..flow_env
            },
            modulation: flow_modulation,
            sweep: vec![
                SweepAxis::numbers(SweepParameter::DiffusionCoeff, &[50.0, 100.0, 150.0]),
                SweepAxis::numbers(
                    SweepParameter::N1,
                    &[50.0, 100.0, 150.0, 200.0, 250.0, 300.0],
                ),
            ],
            outputs: vec![OutputKind::BerCsv],
            ..base
        },
        Target::Fig5 | Target::Fig6 => ExperimentSpec {
            environment: flow_env,
            modulation: flow_modulation,
            sweep: vec![
                SweepAxis::numbers(SweepParameter::DiffusionCoeff, &[50.0, 100.0, 150.0]),
                SweepAxis::numbers(SweepParameter::FlowVelocity, &flow_sweep_values()),
            ],
            outputs: vec![OutputKind::BerCsv, OutputKind::MetricsCsv],
            ..base
        },
        Target::Table3 => ExperimentSpec {
            modulation: ModulationSpec {
                n1: 300,
                symbol_duration: 0.5,
                ..ModulationSpec::default()
            },
            sweep: vec![SweepAxis::presets(&Preset::ALL)],
            metrics: MetricModes {
                std: StdMode::PooledSamples,
                height: HeightMode::WorstCase,
                normalization: Normalization::PerSlotEmission,
            },
            outputs: vec![
                OutputKind::BerCsv,
                OutputKind::MetricsCsv,
                OutputKind::EyeCsv,
                OutputKind::EyeSvg,
            ],
            ..base
        },
    }
}

/// Run `unit` once per replication in `reps` on the worker pool and fold the
/// results in replication order, so the aggregate does not depend on
/// scheduling. Each unit receives its own generator seeded from
/// `(master, sweep_index, replication)`.
pub fn replicate_and_aggregate<T, A, F, G>(
    reps: Range<u64>,
    master: u64,
    sweep_index: u64,
    unit: F,
    init: A,
    mut fold: G,
) -> Result<A>
where
    T: Send,
    F: Fn(u64, &mut RandomSource) -> Result<T> + Sync,
    G: FnMut(&mut A, T),
{
    if reps.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one replication is required".into(),
        ));
    }
    let results: Vec<(u64, Result<T>)> = reps
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(rng::derive_seed(master, sweep_index, r), 0);
            (r, unit(r, &mut rng))
        })
        .collect();
    let mut acc = init;
    for (r, res) in results {
        match res {
            Ok(t) => fold(&mut acc, t),
            Err(e) => {
                return Err(Error::Replication {
                    index: r,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(acc)
}

/// Inputs for simulating one (sweep point, scheme) combination.
#[derive(Debug, Clone)]
pub struct PointJob<'a> {
    pub modulation: ModulationConfig,
    pub env: EnvironmentConfig,
    pub profile: &'a ChannelProfile,
    pub n_bits: usize,
    pub reps: Range<u64>,
    pub master_seed: u64,
    pub sweep_index: u64,
    pub model: ArrivalModel,
    /// Keep the pooled eye diagram of every replication.
    pub keep_eye: bool,
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub ber: BerResult,
    pub errors_per_rep: Vec<u64>,
    /// Traces of all replications in order; empty unless requested.
    pub eye: EyeDiagram,
}

/// Aggregate of consecutive replications; `merge` concatenates in order.
#[derive(Debug, Clone)]
struct PointAggregate {
    errors: u64,
    bits: u64,
    errors_per_rep: Vec<u64>,
    eye: EyeDiagram,
}

impl PointAggregate {
    fn absorb(&mut self, run: LinkRun, keep_eye: bool) {
        let e = run.errors() as u64;
        self.errors += e;
        self.bits += run.bits.len() as u64;
        self.errors_per_rep.push(e);
        if keep_eye {
            self.eye.extend(run.eye);
        }
    }
}

fn one_sequence(job: &PointJob<'_>, rng: &mut RandomSource) -> Result<LinkRun> {
    let bits = BitSequence::random(job.n_bits, rng)?;
    link::run_sequence(bits, &job.modulation, job.profile, &job.env, job.model, rng)
}

/// Simulate `job.reps` replications of fresh random sequences.
pub fn simulate_point(job: &PointJob<'_>) -> Result<PointOutcome> {
    let semi = ber::semi_analytical_ber(&job.modulation, job.profile)?;
    let bin_width = if job.profile.histogram.is_empty() {
        job.profile.symbol_duration
    } else {
        job.profile.bin_width
    };
    let init = PointAggregate {
        errors: 0,
        bits: 0,
        errors_per_rep: Vec::new(),
        eye: EyeDiagram::empty(job.profile.symbol_duration, bin_width),
    };
    let agg = replicate_and_aggregate(
        job.reps.clone(),
        job.master_seed,
        job.sweep_index,
        |_, rng| one_sequence(job, rng),
        init,
        |acc, run| acc.absorb(run, job.keep_eye),
    )?;
    Ok(PointOutcome {
        ber: BerResult::from_counts(agg.errors, agg.bits, semi),
        errors_per_rep: agg.errors_per_rep,
        eye: agg.eye,
    })
}

/// `(bit, received count)` for every slot of `n_reps` random sequences.
pub fn collect_observations(
    cfg: &ModulationConfig,
    env: &EnvironmentConfig,
    profile: &ChannelProfile,
    n_bits: usize,
    n_reps: u64,
    master_seed: u64,
    model: ArrivalModel,
) -> Result<Vec<(u8, u32)>> {
    let job = PointJob {
        modulation: *cfg,
        env: *env,
        profile,
        n_bits,
        reps: 0..n_reps,
        master_seed,
        sweep_index: 0,
        model,
        keep_eye: false,
    };
    replicate_and_aggregate(
        0..n_reps,
        master_seed,
        0,
        |_, rng| one_sequence(&job, rng),
        Vec::new(),
        |acc: &mut Vec<(u8, u32)>, run| {
            acc.extend(
                run.bits
                    .bits()
                    .iter()
                    .copied()
                    .zip(run.received.iter().copied()),
            );
        },
    )
}

/// Channel profiles keyed by environment and profile request.
#[derive(Debug, Default)]
pub struct ProfileCache {
    entries: Mutex<HashMap<String, Arc<ChannelProfile>>>,
}

impl ProfileCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_estimate(
        &self,
        env: &EnvironmentConfig,
        req: &ProfileRequest,
    ) -> Result<Arc<ChannelProfile>> {
        let key = serde_json::to_string(&(env, req)).map_err(|e| Error::Parse(e.to_string()))?;
        if let Some(p) = self.entries.lock().ok().and_then(|m| m.get(&key).cloned()) {
            return Ok(p);
        }
        let profile = Arc::new(channel::estimate_channel_profile(env, req)?);
        if let Ok(mut m) = self.entries.lock() {
            m.entry(key).or_insert_with(|| profile.clone());
        }
        Ok(profile)
    }
}

/// Result for one (sweep point, scheme) combination.
#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    pub sweep_index: u64,
    pub label: String,
    pub scheme: Scheme,
    pub environment: EnvironmentConfig,
    pub modulation: ModulationConfig,
    pub p0: f64,
    pub ber: BerResult,
    /// Absent when the eye is degenerate.
    pub metrics: Option<EyeMetrics>,
    /// Batch-means standard error of CSNR over replication groups.
    pub csnr_se: Option<f64>,
    pub metrics_note: Option<String>,
    #[serde(skip)]
    pub plot_eye: EyeDiagram,
    #[serde(skip)]
    pub profile: Arc<ChannelProfile>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResults {
    pub spec: ExperimentSpec,
    pub points: Vec<SweepPoint>,
    pub results: Vec<PointResult>,
}

impl ExperimentResults {
    pub fn find(&self, label: &str, scheme: Scheme) -> Option<&PointResult> {
        self.results
            .iter()
            .find(|r| r.label == label && r.scheme == scheme)
    }
}

fn batch_csnr_se(eye: &EyeDiagram, n_reps: u64, n_bits: usize) -> Option<f64> {
    let groups = CSNR_BATCHES.min(n_reps);
    if groups < 2 {
        return None;
    }
    let per_group = (n_reps / groups) as usize * n_bits;
    let values: Vec<f64> = (0..groups as usize)
        .filter_map(|g| {
            let part = EyeDiagram {
                traces: eye.traces[g * per_group..(g + 1) * per_group].to_vec(),
                ..EyeDiagram::empty(eye.symbol_duration, eye.bin_width)
            };
            moleye::csnr(&part).ok()
        })
        .collect();
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // full-run CSNR averages `n` batches
    Some((var / n).sqrt())
}

/// Run every sweep point and scheme without writing files.
pub fn execute(spec: &ExperimentSpec, cache: &ProfileCache) -> Result<ExperimentResults> {
    spec.validate()?;
    let points = spec.points();
    let wants_metrics = spec.outputs.iter().any(|o| {
        matches!(
            o,
            OutputKind::MetricsCsv | OutputKind::EyeCsv | OutputKind::EyeSvg
        )
    });
    let mut results = Vec::new();
    for point in &points {
        let seed_index = if spec.paired_seeds { 0 } else { point.index };
        let profile = cache.get_or_estimate(&point.environment, &spec.profile_request(point))?;
        for &scheme in &spec.modulation.schemes {
            let probe = spec.modulation_for(point, scheme, 1);
            let threshold = match spec.modulation.threshold {
                ThresholdSpec::Fixed(l) => l,
                ThresholdSpec::Rule(ThresholdRule::Midpoint) => {
                    default_threshold(profile.p0(), point.n1)
                }
                ThresholdSpec::Rule(ThresholdRule::Trained) => ber::train_threshold(
                    &probe,
                    &point.environment,
                    &profile,
                    spec.n_bits,
                    spec.n_reps,
                    rng::derive_seed(spec.seed, seed_index, u64::MAX),
                    spec.arrival_model,
                )?,
                ThresholdSpec::Rule(ThresholdRule::SemiOptimal) => {
                    ber::semi_optimal_threshold(&probe, &profile)?.0
                }
            };
            let modulation = spec.modulation_for(point, scheme, threshold);
            let outcome = simulate_point(&PointJob {
                modulation,
                env: point.environment,
                profile: &profile,
                n_bits: spec.n_bits,
                reps: 0..spec.n_reps,
                master_seed: spec.seed,
                sweep_index: seed_index,
                model: spec.arrival_model,
                keep_eye: wants_metrics,
            })?;
            let (metrics, metrics_note, csnr_se) = if wants_metrics {
                match moleye::eye_metrics(&outcome.eye, point.n1, &spec.metrics) {
                    Ok(m) => (
                        Some(m),
                        None,
                        batch_csnr_se(&outcome.eye, spec.n_reps, spec.n_bits),
                    ),
                    Err(e) => (None, Some(e.to_string()), None),
                }
            } else {
                (None, None, None)
            };
            let keep = (spec.eye_plot_reps.min(spec.n_reps) as usize) * spec.n_bits;
            let mut plot_eye = outcome.eye;
            plot_eye.traces.truncate(keep);
            results.push(PointResult {
                sweep_index: point.index,
                label: point.label.clone(),
                scheme,
                environment: point.environment,
                modulation,
                p0: profile.p0(),
                ber: outcome.ber,
                metrics,
                csnr_se,
                metrics_note,
                plot_eye,
                profile: profile.clone(),
            });
        }
    }
    Ok(ExperimentResults {
        spec: spec.clone(),
        points,
        results,
    })
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed_scheme: String,
    pub assumptions: Vec<String>,
    pub spec: ExperimentSpec,
    pub points: Vec<ManifestPoint>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPoint {
    pub sweep_index: u64,
    pub label: String,
    pub scheme: Scheme,
    pub environment: EnvironmentConfig,
    pub modulation: ModulationConfig,
    pub p0: f64,
}

pub const ASSUMPTIONS: [&str; 4] = [
    "every replication draws a fresh uniform random bit sequence",
    "molecule arrival slots are drawn from the channel profile's hit-time histogram unless arrival_model = particle",
    "pre-sequence history is all zeros",
    "the decision threshold applies to the count received within each slot",
];

fn csv_file(dir: &Path, name: &str) -> Result<(PathBuf, csv::Writer<fs::File>)> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, csv::Writer::from_writer(file)))
}

fn file_stem(r: &PointResult) -> String {
    let label: String = r
        .label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{}_{}", label, r.scheme.name())
}

/// Write the requested outputs and `manifest.json`; returns the file names.
pub fn write_outputs(results: &ExperimentResults, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = &results.spec;
    let mut files = Vec::new();
    let mut outputs = spec.outputs.clone();
    outputs.sort();
    outputs.dedup();
    for kind in outputs {
        match kind {
            OutputKind::BerCsv => {
                let (_, mut w) = csv_file(dir, "ber.csv")?;
                w.write_record([
                    "scheme",
                    "d",
                    "D",
                    "v_f",
                    "n1",
                    "t_s",
                    "lambda",
                    "m",
                    "ber_sim",
                    "ber_semi",
                    "bits_tested",
                ])?;
                for r in &results.results {
                    w.write_record([
                        r.scheme.name().to_string(),
                        r.environment.distance.to_string(),
                        r.environment.diffusion_coeff.to_string(),
                        r.environment.flow_velocity.to_string(),
                        r.modulation.n1.to_string(),
                        r.modulation.symbol_duration.to_string(),
                        r.modulation.threshold.to_string(),
                        r.modulation.memory.to_string(),
                        r.ber.simulated_ber.to_string(),
                        r.ber.semi_analytical_ber.to_string(),
                        r.ber.bits_tested.to_string(),
                    ])?;
                }
                w.flush().map_err(|e| Error::io(dir.join("ber.csv"), e))?;
                files.push("ber.csv".to_string());
            }
            OutputKind::MetricsCsv => {
                let (_, mut w) = csv_file(dir, "metrics.csv")?;
                w.write_record([
                    "environment",
                    "scheme",
                    "d",
                    "D",
                    "v_f",
                    "n1",
                    "t_s",
                    "std_bit0",
                    "std_bit1",
                    "max_eye_height",
                    "csnr",
                    "csnr_se",
                    "delta_mean",
                    "delta_std",
                ])?;
                let nan = || "NaN".to_string();
                for r in &results.results {
                    let mut row = vec![
                        r.label.clone(),
                        r.scheme.name().to_string(),
                        r.environment.distance.to_string(),
                        r.environment.diffusion_coeff.to_string(),
                        r.environment.flow_velocity.to_string(),
                        r.modulation.n1.to_string(),
                        r.modulation.symbol_duration.to_string(),
                    ];
                    match &r.metrics {
                        Some(m) => row.extend([
                            m.std_bit0.to_string(),
                            m.std_bit1.to_string(),
                            m.max_eye_height.to_string(),
                            m.csnr.to_string(),
                            r.csnr_se.map_or_else(nan, |s| s.to_string()),
                            m.delta_mean.to_string(),
                            m.delta_std.to_string(),
                        ]),
                        None => row.extend((0..7).map(|_| nan())),
                    }
                    w.write_record(&row)?;
                }
                w.flush()
                    .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
                files.push("metrics.csv".to_string());
            }
            OutputKind::EyeCsv => {
                for r in &results.results {
                    let name = format!("eye_{}.csv", file_stem(r));
                    let path = dir.join(&name);
                    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    r.plot_eye.write_csv(file)?;
                    files.push(name);
                }
            }
            OutputKind::EyeSvg => {
                for r in &results.results {
                    let name = format!("eye_{}.svg", file_stem(r));
                    let path = dir.join(&name);
                    let title = format!("{} {}", r.label, r.scheme.name());
                    fs::write(&path, r.plot_eye.to_svg(&title)).map_err(|e| Error::io(&path, e))?;
                    files.push(name);
                }
            }
            OutputKind::ProfileCsv => {
                let mut done = Vec::new();
                for r in &results.results {
                    if done.contains(&r.sweep_index) {
                        continue;
                    }
                    done.push(r.sweep_index);
                    let name = format!(
                        "profile_{}.csv",
                        file_stem(r)
                            .trim_end_matches(r.scheme.name())
                            .trim_end_matches('_')
                    );
                    let path = dir.join(&name);
                    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    r.profile.write_csv(file)?;
                    files.push(name);
                }
            }
        }
    }
    let manifest = Manifest {
        tool: "mcvd".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed_scheme: rng::SEED_SCHEME.into(),
        assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        spec: spec.clone(),
        points: results
            .results
            .iter()
            .map(|r| ManifestPoint {
                sweep_index: r.sweep_index,
                label: r.label.clone(),
                scheme: r.scheme,
                environment: r.environment,
                modulation: r.modulation,
                p0: r.p0,
            })
            .collect(),
        files: files.clone(),
    };
    let path = dir.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| Error::Parse(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    files.push("manifest.json".into());
    Ok(files)
}

/// Execute `spec` and write its outputs into `dir`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    dir: &Path,
    cache: &ProfileCache,
) -> Result<ExperimentResults> {
    let results = execute(spec, cache)?;
    write_outputs(&results, dir)?;
    Ok(results)
}
