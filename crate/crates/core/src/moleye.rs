//! MOL-Eye diagrams and their metrics.
//!
//! Every symbol slot contributes one trace: the cumulative number of
//! molecules received since the slot started, sampled at the end of each
//! fine bin, labeled by the bit sent in that slot. Arrivals left over from
//! earlier slots are part of the trace. Overlaying the traces gives the eye.
//!
//! Metrics:
//! - curve standard deviation per bit class,
//! - MaxEH, the largest opening between the bit-1 and bit-0 families,
//! - CSNR, `mean(dc) / std(dc)` over the integral differences
//!   `dc(i, j) = integral over the slot of c1_i - c0_j`.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::{bins_per_slot, right_closed_bin};
use crate::error::{Error, Result};
use crate::geometry::HitRecord;
use crate::modulation::BitSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTrace {
    pub bit: u8,
    /// Cumulative arrivals at the end of each fine bin of the slot.
    pub samples: Vec<u32>,
    pub slot_index: usize,
    /// Molecules emitted in this slot (used by per-slot normalization).
    pub emitted: u32,
}

impl SlotTrace {
    pub fn total(&self) -> u32 {
        self.samples.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeDiagram {
    pub traces: Vec<SlotTrace>,
    pub symbol_duration: f64,
    pub bin_width: f64,
}

impl EyeDiagram {
    pub fn empty(symbol_duration: f64, bin_width: f64) -> Self {
        Self {
            traces: Vec::new(),
            symbol_duration,
            bin_width,
        }
    }

    pub fn bins(&self) -> usize {
        self.traces.first().map_or(0, |t| t.samples.len())
    }

    pub fn traces_for(&self, bit: u8) -> impl Iterator<Item = &SlotTrace> + Clone {
        self.traces.iter().filter(move |t| t.bit == bit)
    }

    /// Append another diagram's traces, renumbering their slots to follow ours.
    pub fn extend(&mut self, other: EyeDiagram) {
        let offset = self.traces.len();
        self.traces.extend(other.traces.into_iter().map(|mut t| {
            t.slot_index += offset;
            t
        }));
    }

    /// Record the per-slot emission counts on the traces.
    pub fn attach_emissions(&mut self, counts: &[u32]) {
        for t in &mut self.traces {
            t.emitted = counts.get(t.slot_index).copied().unwrap_or(0);
        }
    }

    /// Long-format CSV: `slot_index,bit,bin_index,cumulative_count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot_index", "bit", "bin_index", "cumulative_count"])?;
        for t in &self.traces {
            for (b, c) in t.samples.iter().enumerate() {
                w.write_record([
                    t.slot_index.to_string(),
                    t.bit.to_string(),
                    b.to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<eye csv>", e))?;
        Ok(())
    }

    /// Render the overlaid traces as SVG. Bit-1 traces use class `bit1`,
    /// bit-0 traces class `bit0`; x in seconds, y in molecules.
    pub fn to_svg(&self, title: &str) -> String {
        const W: f64 = 640.0;
        const H: f64 = 420.0;
        const LEFT: f64 = 60.0;
        const RIGHT: f64 = 20.0;
        const TOP: f64 = 36.0;
        const BOTTOM: f64 = 48.0;
        let plot_w = W - LEFT - RIGHT;
        let plot_h = H - TOP - BOTTOM;
        let y_max = self
            .traces
            .iter()
            .map(|t| t.total())
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let y_top = nice_ceiling(y_max);
        let px = |t: f64| LEFT + t / self.symbol_duration * plot_w;
        let py = |c: f64| TOP + plot_h - c / y_top * plot_h;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(
            s,
            "<style>.bit1{{stroke:#08306b;fill:none;stroke-width:0.8;stroke-opacity:0.5}}\
             .bit0{{stroke:#6baed6;fill:none;stroke-width:0.8;stroke-opacity:0.5}}\
             .axis{{stroke:#000;stroke-width:1}}text{{font-family:sans-serif;font-size:12px}}</style>"
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        // traces: bit-0 first so bit-1 draws on top
        for bit in [0u8, 1] {
            for t in self.traces_for(bit) {
                let mut pts = format!("{:.2},{:.2}", px(0.0), py(0.0));
                for (b, &c) in t.samples.iter().enumerate() {
                    let _ = write!(
                        pts,
                        " {:.2},{:.2}",
                        px((b + 1) as f64 * self.bin_width),
                        py(c as f64)
                    );
                }
                let _ = writeln!(s, r#"<polyline class="bit{bit}" points="{pts}"/>"#);
            }
        }
        let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
        let _ = writeln!(
            s,
            r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#
        );
        for i in 0..=5 {
            let t = self.symbol_duration * i as f64 / 5.0;
            let c = y_top * i as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<line class="axis" x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"#,
                px(t),
                y0,
                y0 + 4.0,
                y0 + 18.0,
                trim_float(t)
            );
            let _ = writeln!(
                s,
                r#"<line class="axis" x1="{0}" y1="{1:.2}" x2="{2}" y2="{1:.2}"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"#,
                x0 - 4.0,
                py(c),
                x0,
                x0 - 6.0,
                py(c) + 4.0,
                trim_float(c)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">time in slot (s)</text>"#,
            LEFT + plot_w / 2.0,
            H - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">received molecules</text>"#,
            TOP + plot_h / 2.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn nice_ceiling(v: f64) -> f64 {
    let mag = 10f64.powf(v.log10().floor());
    for step in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if step * mag >= v {
            return step * mag;
        }
    }
    10.0 * mag
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Cut absolute arrival times into per-slot cumulative traces.
pub fn build_eye_diagram(
    hits: &[HitRecord],
    bits: &BitSequence,
    symbol_duration: f64,
    bin_width: f64,
) -> Result<EyeDiagram> {
    if bits.is_empty() {
        return Err(Error::InvalidArgument(
            "bit sequence must be non-empty".into(),
        ));
    }
    let per_slot = bins_per_slot(symbol_duration, bin_width)?;
    let n_slots = bits.len();
    let mut fine = vec![0u32; per_slot * n_slots];
    for h in hits {
        let g = right_closed_bin(h.hit_time, bin_width);
        if let Some(c) = fine.get_mut(g) {
            *c += 1;
        }
    }
    let traces = fine
        .chunks(per_slot)
        .zip(bits.bits())
        .enumerate()
        .map(|(k, (chunk, &bit))| {
            let mut acc = 0u32;
            let samples = chunk
                .iter()
                .map(|&c| {
                    acc += c;
                    acc
                })
                .collect();
            SlotTrace {
                bit,
                samples,
                slot_index: k,
                emitted: 0,
            }
        })
        .collect();
    Ok(EyeDiagram {
        traces,
        symbol_duration,
        bin_width,
    })
}

/// How the curve standard deviation aggregates a bit class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdMode {
    /// Spread of the end-of-slot totals (the decision statistic).
    #[default]
    SlotTotals,
    /// Spread of every sample of every trace in the class.
    PooledSamples,
}

/// How the eye opening is read off the two curve families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeightMode {
    /// Lowest bit-1 curve minus highest bit-0 curve.
    #[default]
    WorstCase,
    /// Mean bit-1 curve minus mean bit-0 curve.
    MeanCurves,
}

/// Count normalization applied before computing MaxEH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Scale every trace by `n1 / mean(bit-1 slot totals)`.
    #[default]
    MeanBit1Total,
    /// Scale each bit-1 trace by `n1 / emitted`, its own emission count.
    PerSlotEmission,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricModes {
    pub std: StdMode,
    pub height: HeightMode,
    pub normalization: Normalization,
}

impl Default for MetricModes {
    fn default() -> Self {
        Self {
            std: StdMode::SlotTotals,
            height: HeightMode::WorstCase,
            normalization: Normalization::MeanBit1Total,
        }
    }
}

fn bit_name(bit: u8) -> &'static str {
    if bit == 0 {
        "bit-0"
    } else {
        "bit-1"
    }
}

fn sample_std(values: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let (n, sum) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n < 2 {
        return None;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    Some((ss / (n - 1) as f64).sqrt())
}

/// Sample standard deviation of the curves labeled `bit`.
pub fn curve_std(eye: &EyeDiagram, bit: u8, mode: StdMode) -> Result<f64> {
    let result = match mode {
        StdMode::SlotTotals => sample_std(eye.traces_for(bit).map(|t| t.total() as f64)),
        StdMode::PooledSamples => {
            if eye.traces_for(bit).count() < 2 {
                None
            } else {
                sample_std(
                    eye.traces_for(bit)
                        .flat_map(|t| t.samples.iter().map(|&c| c as f64)),
                )
            }
        }
    };
    result
        .ok_or_else(|| Error::InvalidArgument(format!("need at least 2 {} traces", bit_name(bit))))
}

fn require_both(eye: &EyeDiagram) -> Result<()> {
    for bit in [0u8, 1] {
        if eye.traces_for(bit).next().is_none() {
            return Err(Error::MissingBitClass(bit_name(bit)));
        }
    }
    Ok(())
}

/// Per-trace scale factors for MaxEH normalization.
fn scales(eye: &EyeDiagram, n1: u32, normalization: Normalization) -> Vec<f64> {
    match normalization {
        Normalization::None => vec![1.0; eye.traces.len()],
        Normalization::MeanBit1Total => {
            let (n, sum) = eye
                .traces_for(1)
                .fold((0usize, 0.0), |(n, s), t| (n + 1, s + t.total() as f64));
            let mean = sum / n.max(1) as f64;
            let k = if mean > 0.0 { n1 as f64 / mean } else { 1.0 };
            vec![k; eye.traces.len()]
        }
        Normalization::PerSlotEmission => eye
            .traces
            .iter()
            .map(|t| {
                if t.bit == 1 && t.emitted > 0 {
                    n1 as f64 / t.emitted as f64
                } else {
                    1.0
                }
            })
            .collect(),
    }
}

/// Largest opening between the bit-1 and bit-0 families over the slot.
/// Negative when the eye is closed everywhere.
pub fn max_eye_height(
    eye: &EyeDiagram,
    n1: u32,
    height: HeightMode,
    normalization: Normalization,
) -> Result<f64> {
    require_both(eye)?;
    let k = scales(eye, n1, normalization);
    let bins = eye.bins();
    let mut best = f64::NEG_INFINITY;
    for b in 0..bins {
        let opening = match height {
            HeightMode::WorstCase => {
                let mut low1 = f64::INFINITY;
                let mut high0 = f64::NEG_INFINITY;
                for (t, &s) in eye.traces.iter().zip(&k) {
                    let v = t.samples[b] as f64 * s;
                    if t.bit == 1 {
                        low1 = low1.min(v);
                    } else {
                        high0 = high0.max(v);
                    }
                }
                low1 - high0
            }
            HeightMode::MeanCurves => {
                let (mut s1, mut n1c, mut s0, mut n0c) = (0.0, 0usize, 0.0, 0usize);
                for (t, &s) in eye.traces.iter().zip(&k) {
                    let v = t.samples[b] as f64 * s;
                    if t.bit == 1 {
                        s1 += v;
                        n1c += 1;
                    } else {
                        s0 += v;
                        n0c += 1;
                    }
                }
                s1 / n1c as f64 - s0 / n0c as f64
            }
        };
        best = best.max(opening);
    }
    Ok(best)
}

/// `integral_0^{t_s} c(t) dt` for each trace of class `bit` (left Riemann
/// sum at the bin width).
pub fn trace_integrals(eye: &EyeDiagram, bit: u8) -> Vec<f64> {
    eye.traces_for(bit)
        .map(|t| t.samples.iter().map(|&c| c as f64).sum::<f64>() * eye.bin_width)
        .collect()
}

/// The full matrix `dc(i, j)` over bit-1 traces `i` and bit-0 traces `j`,
/// in molecule-seconds.
pub fn integral_diffs(eye: &EyeDiagram) -> Result<Vec<Vec<f64>>> {
    require_both(eye)?;
    let ones: Vec<&SlotTrace> = eye.traces_for(1).collect();
    let zeros: Vec<&SlotTrace> = eye.traces_for(0).collect();
    Ok(ones
        .iter()
        .map(|c1| {
            zeros
                .iter()
                .map(|c0| {
                    c1.samples
                        .iter()
                        .zip(&c0.samples)
                        .map(|(&a, &b)| a as f64 - b as f64)
                        .sum::<f64>()
                        * eye.bin_width
                })
                .collect()
        })
        .collect())
}

/// Mean and sample standard deviation of all `dc(i, j)`.
///
/// Since `dc(i, j) = I1_i - I0_j`, the pair statistics follow from the
/// per-class integrals in linear time:
/// `sum (dc - mean)^2 = N0 * SS1 + N1 * SS0`.
pub fn delta_stats(eye: &EyeDiagram) -> Result<(f64, f64)> {
    require_both(eye)?;
    let ones = trace_integrals(eye, 1);
    let zeros = trace_integrals(eye, 0);
    let (n1, n0) = (ones.len() as f64, zeros.len() as f64);
    let pairs = n1 * n0;
    if pairs < 2.0 {
        return Err(Error::DegenerateEye(
            "fewer than 2 integral differences".into(),
        ));
    }
    let m1 = ones.iter().sum::<f64>() / n1;
    let m0 = zeros.iter().sum::<f64>() / n0;
    let ss1: f64 = ones.iter().map(|v| (v - m1).powi(2)).sum();
    let ss0: f64 = zeros.iter().map(|v| (v - m0).powi(2)).sum();
    let var = (n0 * ss1 + n1 * ss0) / (pairs - 1.0);
    Ok((m1 - m0, var.sqrt()))
}

/// Counting SNR, `mean(dc) / std(dc)`.
pub fn csnr(eye: &EyeDiagram) -> Result<f64> {
    let (mean, std) = delta_stats(eye)?;
    if std == 0.0 {
        return Err(Error::DegenerateEye(
            "all integral differences are equal; CSNR is undefined".into(),
        ));
    }
    Ok(mean / std)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeMetrics {
    pub std_bit0: f64,
    pub std_bit1: f64,
    pub max_eye_height: f64,
    pub csnr: f64,
    pub delta_mean: f64,
    pub delta_std: f64,
}

pub fn eye_metrics(eye: &EyeDiagram, n1: u32, modes: &MetricModes) -> Result<EyeMetrics> {
    let (delta_mean, delta_std) = delta_stats(eye)?;
    Ok(EyeMetrics {
        std_bit0: curve_std(eye, 0, modes.std)?,
        std_bit1: curve_std(eye, 1, modes.std)?,
        max_eye_height: max_eye_height(eye, n1, modes.height, modes.normalization)?,
        csnr: csnr(eye)?,
        delta_mean,
        delta_std,
    })
}
