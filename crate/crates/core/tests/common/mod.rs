//! Reference implementations written independently of the library code.
#![allow(dead_code)]

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// erfc from a positive-term series below 2 and a continued fraction above.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        // erf x = 2/sqrt(pi) e^{-x^2} sum 2^n x^{2n+1} / (2n+1)!!
        let mut term = x;
        let mut terms = vec![term];
        let mut n = 0.0;
        while term > 1e-18 * terms[0].max(1e-300) {
            n += 1.0;
            term *= 2.0 * x * x / (2.0 * n + 1.0);
            terms.push(term);
        }
        let erf = FRAC_2_SQRT_PI * (-x * x).exp() * compensated_sum(terms);
        return 1.0 - erf;
    }
    // modified Lentz on erfc x = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..5000 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Emission counts for `bits` under BCSK (`cpa = false`) or CPA with
/// memory `memory`, rounding adjusted counts and clamping at zero.
pub fn emissions(bits: &[u8], p: &[f64], n1: u32, cpa: bool, memory: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(bits.len());
    for k in 0..bits.len() {
        if bits[k] == 0 {
            out.push(0.0);
            continue;
        }
        if !cpa {
            out.push(n1 as f64);
            continue;
        }
        let mut z = 0;
        while z < memory && z < k && bits[k - 1 - z] == 1 {
            z += 1;
        }
        let mut residual = 0.0;
        for i in 1..=z {
            residual += p[i] * out[k - i];
        }
        let raw = n1 as f64 - residual / p[0];
        out.push(if raw > 0.0 { raw.round() } else { 0.0 });
    }
    out
}

/// Brute-force Gaussian BER over every history of length `p.len() - 1`.
pub fn brute_force_ber(p: &[f64], n1: u32, lambda: u32, cpa: bool, memory: usize) -> f64 {
    let m = p.len() - 1;
    let mut terms = Vec::new();
    for h in 0..(1u32 << m) {
        for current in 0..2u8 {
            // oldest first
            let mut bits: Vec<u8> = (0..m).rev().map(|i| ((h >> i) & 1) as u8).collect();
            bits.push(current);
            let n = emissions(&bits, p, n1, cpa, memory);
            let mu = compensated_sum((0..=m).map(|i| p[i] * n[m - i]));
            let var = compensated_sum((0..=m).map(|i| p[i] * (1.0 - p[i]) * n[m - i]));
            let e = if var == 0.0 {
                let says_one = mu >= lambda as f64;
                if says_one == (current == 1) {
                    0.0
                } else {
                    1.0
                }
            } else {
                let z = (lambda as f64 - 0.5 - mu) / var.sqrt();
                if current == 1 {
                    phi(z)
                } else {
                    phi(-z)
                }
            };
            terms.push(e);
        }
    }
    compensated_sum(terms) / (2u64 << m) as f64
}

/// Integral over `[0, n w]` of the difference of two step functions whose
/// value on `[b w, (b + 1) w)` is `a[b]` and `c[b]`, by composite midpoint
/// quadrature with `per_bin` nodes per bin.
pub fn step_integral_diff(a: &[u32], c: &[u32], w: f64, per_bin: usize) -> f64 {
    let h = w / per_bin as f64;
    let n = a.len();
    let value = |t: f64| {
        let b = ((t / w).floor() as usize).min(n - 1);
        a[b] as f64 - c[b] as f64
    };
    compensated_sum((0..n * per_bin).map(|j| value((j as f64 + 0.5) * h) * h))
}
