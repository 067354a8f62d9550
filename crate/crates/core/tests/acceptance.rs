//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion outside `KNOWN_RED` fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use mcvd::ber::semi_analytical_ber;
use mcvd::channel::{estimate_profile_pair_halved, ChannelProfile, ProfileRequest};
use mcvd::geometry::{first_passage_cdf_1d, EnvironmentConfig};
use mcvd::modulation::{encode, run_arrivals, BitSequence, ModulationConfig, Scheme};
use mcvd::moleye::{eye_metrics, HeightMode, MetricModes, Normalization, StdMode};
use mcvd::rng;
use mcvd::runner::{
    execute, reproduce_spec, run_experiment, simulate_point, ExperimentResults, PointJob,
    PointResult, Preset, ProfileCache, Target,
};
use rand::Rng;

/// Criteria expected to fail; see README.
const KNOWN_RED: &[u32] = &[2];

const TOLERANCE: f64 = 0.15;

// (good, moderate, harsh) x (CPA, no CPA)
const REF_CSNR: [[f64; 2]; 3] = [[14.5762, 11.6322], [8.5072, 6.6060], [3.6683, 2.8110]];
const REF_MAXEH: [[f64; 2]; 3] = [[127.6994, 118.0], [68.0454, 65.0], [38.3462, 36.0]];
const REF_STD0: [[f64; 2]; 3] = [[11.0948, 11.5592], [13.8048, 15.1311], [16.0739, 19.7512]];
const REF_STD1: [[f64; 2]; 3] = [[29.3192, 29.8338], [27.2424, 29.1996], [22.7202, 27.6683]];

const SCHEMES: [Scheme; 2] = [Scheme::BcskCpa, Scheme::Bcsk];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: u32, name: &str, o: &Outcome, failed: &mut Vec<u32>) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let note = if !o.pass && KNOWN_RED.contains(&n) {
        " (known red)"
    } else {
        ""
    };
    println!("criterion {n} {verdict}{note} {name}: {}", o.detail);
    std::io::stdout().flush().ok();
    if !o.pass {
        failed.push(n);
    }
}

fn combined_se(a: &PointResult, b: &PointResult) -> f64 {
    a.ber.standard_error().hypot(b.ber.standard_error())
}

/// `later` is no worse than `earlier` at the 3-combined-standard-error level.
fn ber_not_above(later: &PointResult, earlier: &PointResult) -> bool {
    later.ber.simulated_ber <= earlier.ber.simulated_ber + 3.0 * combined_se(later, earlier)
}

/// Results keyed by (D, scheme), each sorted by `key`.
fn curves(
    res: &ExperimentResults,
    key: impl Fn(&PointResult) -> f64,
) -> BTreeMap<(u64, &'static str), Vec<&PointResult>> {
    let mut out: BTreeMap<(u64, &'static str), Vec<&PointResult>> = BTreeMap::new();
    for r in &res.results {
        out.entry((r.environment.diffusion_coeff as u64, r.scheme.name()))
            .or_default()
            .push(r);
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| key(a).total_cmp(&key(b)));
    }
    out
}

fn counterpart<'a>(res: &'a ExperimentResults, r: &PointResult) -> &'a PointResult {
    let other = if r.scheme == Scheme::Bcsk {
        Scheme::BcskCpa
    } else {
        Scheme::Bcsk
    };
    res.find(&r.label, other).expect("both schemes simulated")
}

fn channel_oracle() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut worst_dp: f64 = 0.0;
    for (i, &d_coeff) in [50.0, 100.0, 150.0].iter().enumerate() {
        for (j, &v) in [0.0, 2.5, 5.0].iter().enumerate() {
            let env =
                EnvironmentConfig::vessel(6.0, d_coeff, v).with_seed(100 + 3 * i as u64 + j as u64);
            let req = ProfileRequest::new(0.4, 5, 100_000);
            let (coarse, fine) = estimate_profile_pair_halved(&env, &req).expect("profile");
            let mut acc = 0u64;
            for (b, &h) in coarse.histogram.iter().enumerate() {
                acc += h;
                let t = (b + 1) as f64 * coarse.bin_width;
                let exact = first_passage_cdf_1d(6.0, d_coeff, v, t).expect("cdf");
                worst_gap = worst_gap.max((acc as f64 / coarse.samples as f64 - exact).abs());
            }
            for (a, b) in coarse.slot_fractions.iter().zip(&fine.slot_fractions) {
                worst_dp = worst_dp.max((a - b).abs());
            }
        }
    }
    Outcome {
        pass: worst_gap < 0.01 && worst_dp < 0.005,
        detail: format!(
            "max CDF gap {worst_gap:.4} (< 0.01), max |dp_i| under dt/2 {worst_dp:.4} (< 0.005)"
        ),
    }
}

fn env_index(r: &PointResult) -> usize {
    Preset::ALL
        .iter()
        .position(|p| p.name() == r.label)
        .expect("preset label")
}

fn scheme_index(s: Scheme) -> usize {
    SCHEMES.iter().position(|&x| x == s).unwrap()
}

fn within(ours: f64, reference: f64) -> bool {
    ((ours - reference) / reference).abs() <= TOLERANCE
}

fn worst_cell(table: &[[f64; 2]; 3], reference: &[[f64; 2]; 3]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for e in 0..3 {
        for s in 0..2 {
            let dev = (table[e][s] - reference[e][s]) / reference[e][s];
            if dev.abs() >= worst.0 {
                worst = (
                    dev.abs(),
                    format!(
                        "{} {} {:.2} vs {:.2}",
                        Preset::ALL[e].name(),
                        SCHEMES[s].name(),
                        table[e][s],
                        reference[e][s]
                    ),
                );
            }
        }
    }
    worst
}

fn table3_values(res: &ExperimentResults) -> Outcome {
    let spec = &res.spec;
    let mut eyes = Vec::new();
    for r in &res.results {
        let outcome = simulate_point(&PointJob {
            modulation: r.modulation,
            env: r.environment,
            profile: &r.profile,
            n_bits: spec.n_bits,
            reps: 0..spec.n_reps,
            master_seed: spec.seed,
            sweep_index: r.sweep_index,
            model: spec.arrival_model,
            keep_eye: true,
        })
        .expect("table point");
        eyes.push((
            env_index(r),
            scheme_index(r.scheme),
            r.modulation.n1,
            outcome.eye,
        ));
    }
    let table = |modes: MetricModes, pick: fn(&mcvd::moleye::EyeMetrics) -> f64| {
        let mut t = [[0.0; 2]; 3];
        for (e, s, n1, eye) in &eyes {
            t[*e][*s] = pick(&eye_metrics(eye, *n1, &modes).expect("metrics"));
        }
        t
    };
    let all_within = |t: &[[f64; 2]; 3], p: &[[f64; 2]; 3]| {
        (0..3).all(|e| (0..2).all(|s| within(t[e][s], p[e][s])))
    };
    let base = spec.metrics;

    let csnr = table(base, |m| m.csnr);
    let csnr_ok = all_within(&csnr, &REF_CSNR);
    let (csnr_dev, csnr_cell) = worst_cell(&csnr, &REF_CSNR);

    let mut std_pass = Vec::new();
    let mut std_worst = Vec::new();
    for mode in [StdMode::SlotTotals, StdMode::PooledSamples] {
        let modes = MetricModes { std: mode, ..base };
        let s0 = table(modes, |m| m.std_bit0);
        let s1 = table(modes, |m| m.std_bit1);
        if all_within(&s0, &REF_STD0) && all_within(&s1, &REF_STD1) {
            std_pass.push(format!("{mode:?}"));
        }
        let (d0, c0) = worst_cell(&s0, &REF_STD0);
        let (d1, c1) = worst_cell(&s1, &REF_STD1);
        std_worst.push(format!(
            "{mode:?} worst |dev| bit0 {:.0}% ({c0}), bit1 {:.0}% ({c1})",
            100.0 * d0,
            100.0 * d1
        ));
    }

    let mut eh_pass = Vec::new();
    let mut eh_worst = Vec::new();
    for height in [HeightMode::WorstCase, HeightMode::MeanCurves] {
        for normalization in [
            Normalization::None,
            Normalization::MeanBit1Total,
            Normalization::PerSlotEmission,
        ] {
            let modes = MetricModes {
                height,
                normalization,
                ..base
            };
            let t = table(modes, |m| m.max_eye_height);
            if all_within(&t, &REF_MAXEH) {
                eh_pass.push(format!("{height:?}/{normalization:?}"));
            }
            let (d, c) = worst_cell(&t, &REF_MAXEH);
            eh_worst.push(format!(
                "{height:?}/{normalization:?} {:.0}% ({c})",
                100.0 * d
            ));
        }
    }

    let pass = csnr_ok && !std_pass.is_empty() && !eh_pass.is_empty();
    let detail = format!(
        "CSNR {} worst {:.1}% ({csnr_cell}); std passing modes {:?}; MaxEH passing modes {:?}\n    {}\n    MaxEH worst |dev|: {}",
        if csnr_ok { "ok" } else { "out of tolerance" },
        100.0 * csnr_dev,
        std_pass,
        eh_pass,
        std_worst.join("\n    "),
        eh_worst.join(", ")
    );
    Outcome { pass, detail }
}

fn table3_orderings(res: &ExperimentResults) -> Outcome {
    let mut m = [[None; 2]; 3];
    for r in &res.results {
        m[env_index(r)][scheme_index(r.scheme)] = r.metrics;
    }
    let m = m.map(|row| row.map(|x| x.expect("table metrics")));
    let mut broken = Vec::new();
    for (e, row) in m.iter().enumerate() {
        let name = Preset::ALL[e].name();
        if !(row[0].csnr > row[1].csnr) {
            broken.push(format!(
                "{name}: CSNR cpa {:.3} <= bcsk {:.3}",
                row[0].csnr, row[1].csnr
            ));
        }
        if !(row[0].max_eye_height > row[1].max_eye_height) {
            broken.push(format!(
                "{name}: MaxEH cpa {:.2} <= bcsk {:.2}",
                row[0].max_eye_height, row[1].max_eye_height
            ));
        }
    }
    for (s, scheme) in SCHEMES.iter().enumerate() {
        for e in 0..2 {
            if !(m[e][s].csnr > m[e + 1][s].csnr) {
                broken.push(format!(
                    "{scheme}: CSNR not decreasing at {}",
                    Preset::ALL[e + 1].name()
                ));
            }
            if !(m[e][s].std_bit0 < m[e + 1][s].std_bit0) {
                broken.push(format!(
                    "{scheme}: std_bit0 not increasing at {}",
                    Preset::ALL[e + 1].name()
                ));
            }
        }
    }
    let csnr: Vec<String> = m
        .iter()
        .map(|row| format!("{:.2}/{:.2}", row[0].csnr, row[1].csnr))
        .collect();
    let eh: Vec<String> = m
        .iter()
        .map(|row| format!("{:.1}/{:.1}", row[0].max_eye_height, row[1].max_eye_height))
        .collect();
    Outcome {
        pass: broken.is_empty(),
        detail: if broken.is_empty() {
            format!(
                "CSNR cpa/bcsk {}; MaxEH cpa/bcsk {}",
                csnr.join(" > "),
                eh.join(", ")
            )
        } else {
            broken.join("; ")
        },
    }
}

fn coherence(res: &ExperimentResults) -> (bool, f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for r in &res.results {
        if r.ber.errors_observed >= 10 {
            checked += 1;
            let gap = (r.ber.simulated_ber.log10() - r.ber.semi_analytical_ber.log10()).abs();
            worst = worst.max(gap);
        }
    }
    (worst < 0.3, worst, checked)
}

fn fig3_trends(res: &ExperimentResults) -> Outcome {
    let mut broken = Vec::new();
    for ((d, scheme), c) in curves(res, |r| r.environment.flow_velocity) {
        for w in c.windows(2) {
            if !ber_not_above(w[1], w[0]) {
                broken.push(format!(
                    "D={d} {scheme}: BER rises at v_f={}",
                    w[1].environment.flow_velocity
                ));
            }
        }
    }
    for r in res.results.iter().filter(|r| r.scheme == Scheme::BcskCpa) {
        let b = counterpart(res, r);
        if !ber_not_above(r, b) || r.ber.semi_analytical_ber > b.ber.semi_analytical_ber {
            broken.push(format!("{}: CPA above BCSK", r.label));
        }
    }
    let (ok, worst, checked) = coherence(res);
    if !ok {
        broken.push(format!("sim/semi log10 gap {worst:.3}"));
    }
    Outcome {
        pass: broken.is_empty(),
        detail: if broken.is_empty() {
            format!("monotone in v_f, CPA <= BCSK at all {} points, max log10 sim/semi gap {worst:.3} over {checked} points", res.points.len())
        } else {
            broken.join("; ")
        },
    }
}

/// Mean over the curve of `log10(BER_BCSK / BER_CPA)`, semi-analytical.
fn mean_log_gap(res: &ExperimentResults, d: u64) -> f64 {
    let gaps: Vec<f64> = res
        .results
        .iter()
        .filter(|r| r.scheme == Scheme::BcskCpa && r.environment.diffusion_coeff as u64 == d)
        .map(|r| {
            let b = counterpart(res, r);
            b.ber.semi_analytical_ber.max(f64::MIN_POSITIVE).log10()
                - r.ber.semi_analytical_ber.max(f64::MIN_POSITIVE).log10()
        })
        .collect();
    gaps.iter().sum::<f64>() / gaps.len() as f64
}

fn fig4_trends(res: &ExperimentResults) -> Outcome {
    let mut broken = Vec::new();
    for ((d, scheme), c) in curves(res, |r| r.modulation.n1 as f64) {
        for w in c.windows(2) {
            if !ber_not_above(w[1], w[0]) {
                broken.push(format!(
                    "D={d} {scheme}: BER rises at n1={}",
                    w[1].modulation.n1
                ));
            }
        }
    }
    let mut by_n1: BTreeMap<(u32, &str), Vec<&PointResult>> = BTreeMap::new();
    for r in &res.results {
        by_n1
            .entry((r.modulation.n1, r.scheme.name()))
            .or_default()
            .push(r);
    }
    for ((n1, scheme), mut c) in by_n1 {
        c.sort_by(|a, b| {
            a.environment
                .diffusion_coeff
                .total_cmp(&b.environment.diffusion_coeff)
        });
        for w in c.windows(2) {
            if !ber_not_above(w[1], w[0]) {
                broken.push(format!(
                    "n1={n1} {scheme}: BER rises at D={}",
                    w[1].environment.diffusion_coeff
                ));
            }
        }
    }
    let (low, high) = (mean_log_gap(res, 50), mean_log_gap(res, 150));
    if !(high > low) {
        broken.push(format!(
            "CPA gain at D=150 ({high:.2} decades) not above D=50 ({low:.2})"
        ));
    }
    Outcome {
        pass: broken.is_empty(),
        detail: if broken.is_empty() {
            format!(
                "monotone in n1 and D; mean CPA gain {low:.2} decades at D=50, {high:.2} at D=150"
            )
        } else {
            broken.join("; ")
        },
    }
}

fn fig56_properties(res: &ExperimentResults) -> Outcome {
    let mut broken = Vec::new();
    let mut resolvable = 0;
    let mut curves_checked = 0;
    for ((d, scheme), c) in curves(res, |r| r.environment.flow_velocity) {
        curves_checked += 1;
        let stats: Vec<(f64, f64, f64)> = c
            .iter()
            .map(|r| {
                (
                    r.metrics.expect("eye metrics").csnr,
                    r.csnr_se.expect("csnr standard error"),
                    r.ber.semi_analytical_ber,
                )
            })
            .collect();
        for (i, w) in stats.windows(2).enumerate() {
            if w[1].0 < w[0].0 - 3.0 * w[0].1.hypot(w[1].1) {
                broken.push(format!(
                    "D={d} {scheme}: CSNR falls at v_f={}",
                    c[i + 1].environment.flow_velocity
                ));
            }
        }
        for i in 0..stats.len() {
            for j in 0..stats.len() {
                let (a, b) = (stats[i], stats[j]);
                if b.0 - a.0 > 3.0 * a.1.hypot(b.1) {
                    resolvable += 1;
                    if !(b.2 < a.2) {
                        broken.push(format!(
                            "D={d} {scheme}: CSNR {:.3} > {:.3} but BER {:.3e} >= {:.3e}",
                            b.0, a.0, b.2, a.2
                        ));
                    }
                }
            }
        }
    }
    Outcome {
        pass: broken.is_empty(),
        detail: if broken.is_empty() {
            format!("CSNR nondecreasing in v_f on {curves_checked} curves; {resolvable} resolvable (CSNR, BER) pairs all strictly opposed")
        } else {
            broken.join("; ")
        },
    }
}

fn cpa_equalization(profile: &ChannelProfile) -> Outcome {
    let n1 = 300;
    let memory = profile.isi_window;
    let cfg = ModulationConfig::new(Scheme::BcskCpa, n1, profile.symbol_duration, 1, memory);
    let target = profile.p0() * n1 as f64;
    let mut rng = rng::stream(2024, 0);
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for _ in 0..1000 {
        let bits: Vec<u8> = (0..100).map(|_| rng.random_range(0..2u8)).collect();
        let bits = BitSequence::new(bits).expect("bits");
        let counts: Vec<f64> = encode(&bits, &cfg, profile)
            .expect("encode")
            .counts
            .iter()
            .map(|&c| c as f64)
            .collect();
        for k in 0..bits.len() {
            if bits.bits()[k] == 1 && counts[k] > 0.0 {
                let arrivals = run_arrivals(&counts, &bits, profile, memory, k).expect("run");
                worst = worst.max((arrivals - target).abs());
                checked += 1;
            }
        }
    }
    Outcome {
        pass: worst <= 1.0,
        detail: format!("max |run arrivals - p0 n1| = {worst:.3} over {checked} unclamped bit-1 slots (p0 = {:.4})", profile.p0()),
    }
}

fn semi_oracle() -> Outcome {
    let mut rng = rng::stream(8, 0);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for trial in 0..300 {
        let m = 1 + trial % 3;
        let mut p = vec![rng.random_range(0.05..0.9)];
        for _ in 0..m {
            let room: f64 = (1.0 - p.iter().sum::<f64>()).max(0.0);
            p.push(rng.random_range(0.0..=room));
        }
        let profile = ChannelProfile::synthetic(&p, 0.4).expect("profile");
        let n1 = rng.random_range(1..500u32);
        let lambda = rng.random_range(1..=n1);
        for (scheme, cpa) in [(Scheme::Bcsk, false), (Scheme::BcskCpa, true)] {
            let cfg = ModulationConfig::new(scheme, n1, 0.4, lambda, m);
            let ours = semi_analytical_ber(&cfg, &profile).expect("semi");
            let reference = common::brute_force_ber(&p, n1, lambda, cpa, m);
            let rel = if ours == reference {
                0.0
            } else {
                (ours - reference).abs() / ours.abs().max(reference.abs())
            };
            worst = worst.max(rel);
            cases += 1;
        }
    }
    Outcome {
        pass: worst < 1e-10,
        detail: format!("max relative error {worst:.2e} over {cases} cases with m <= 3"),
    }
}

fn file_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| {
            let e = e.expect("dir entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).expect("read output"),
            )
        })
        .collect()
}

fn determinism(first: &Path) -> Outcome {
    let second = tempfile::tempdir().expect("tempdir");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool");
    pool.install(|| {
        run_experiment(
            &reproduce_spec(Target::Table3, 42),
            second.path(),
            &ProfileCache::new(),
        )
    })
    .expect("serial rerun");
    let (a, b) = (file_bytes(first), file_bytes(second.path()));
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    Outcome {
        pass: differing.is_empty() && !a.is_empty(),
        detail: if differing.is_empty() {
            format!(
                "{} files byte-identical between a 4-thread and a 1-thread run",
                a.len()
            )
        } else {
            format!("differing files: {differing:?}")
        },
    }
}

fn main() {
    let mut failed = Vec::new();
    report(
        1,
        "channel oracle equivalence",
        &channel_oracle(),
        &mut failed,
    );

    let table_dir = tempfile::tempdir().expect("tempdir");
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .expect("pool");
    let table = parallel
        .install(|| {
            run_experiment(
                &reproduce_spec(Target::Table3, 42),
                table_dir.path(),
                &ProfileCache::new(),
            )
        })
        .expect("table3");
    report(2, "table3 values", &table3_values(&table), &mut failed);
    report(
        3,
        "table3 orderings",
        &table3_orderings(&table),
        &mut failed,
    );

    let cache = ProfileCache::new();
    let fig5 = execute(&reproduce_spec(Target::Fig5, 42), &cache).expect("fig5");
    let fig3 = execute(&reproduce_spec(Target::Fig3, 42), &cache).expect("fig3");
    report(4, "fig3 trends", &fig3_trends(&fig3), &mut failed);
    let fig4 = execute(&reproduce_spec(Target::Fig4, 42), &cache).expect("fig4");
    report(5, "fig4 trends", &fig4_trends(&fig4), &mut failed);
    report(
        6,
        "fig5/fig6 CSNR-BER properties",
        &fig56_properties(&fig5),
        &mut failed,
    );

    let measured = fig5
        .results
        .iter()
        .find(|r| r.environment.diffusion_coeff == 100.0 && r.environment.flow_velocity == 2.5)
        .expect("D=100, v_f=2.5 point");
    report(
        7,
        "CPA equalization",
        &cpa_equalization(&measured.profile),
        &mut failed,
    );
    report(8, "semi-analytical oracle", &semi_oracle(), &mut failed);
    report(
        9,
        "determinism",
        &determinism(table_dir.path()),
        &mut failed,
    );

    let unexpected: Vec<u32> = failed
        .iter()
        .copied()
        .filter(|n| !KNOWN_RED.contains(n))
        .collect();
    println!(
        "acceptance: {} of 9 criteria pass; known red {:?}",
        9 - failed.len(),
        KNOWN_RED
    );
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
