//! Statistical battery: ordinary least squares with confidence intervals,
//! Spearman rank correlation, Benjamini-Hochberg, paired t and Wilcoxon
//! signed-rank tests, and percentiles.
//!
//! The Student-t and normal distribution functions are evaluated through the
//! regularized incomplete beta function and an erf series so the layer has
//! no external dependencies; absolute error is well below 1e-10.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

/// Lanczos approximation of ln Gamma(x), x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta function I_x(a, b) via Lentz's continued
/// fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&x), "beta args a={a} b={b} x={x}");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln())
        .exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 400;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Error function via its Maclaurin series (small x) or the regularized
/// incomplete gamma continued fraction (large x).
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        // sum_{k} (-1)^k x^(2k+1) / (k! (2k+1)) * 2/sqrt(pi)
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        for k in 1..200 {
            let k = k as f64;
            term *= -x2 / k;
            let add = term / (2.0 * k + 1.0);
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function by continued fraction, x >= 2.
fn erfc_cf(x: f64) -> f64 {
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/(2x + 2/(x + 3/(2x + ...))))
    let mut f = 0.0;
    for k in (1..=60).rev() {
        let k = k as f64;
        f = if k % 2.0 == 1.0 { k / (2.0 * x + f) } else { k / (x + f) };
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Student-t CDF with `dof` degrees of freedom.
pub fn t_cdf(t: f64, dof: f64) -> f64 {
    assert!(dof > 0.0);
    let x = dof / (dof + t * t);
    let p = 0.5 * reg_inc_beta(0.5 * dof, 0.5, x);
    if t >= 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// Student-t quantile by bisection on the CDF.
pub fn t_quantile(p: f64, dof: f64) -> f64 {
    assert!((0.0..1.0).contains(&p) && p > 0.0);
    let (mut lo, mut hi) = (-1e10, 1e10);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Ordinary least squares with confidence intervals
// ---------------------------------------------------------------------------

/// Lower bound, point estimate, upper bound of a 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiTriple {
    pub lo: f64,
    pub point: f64,
    pub hi: f64,
}

impl CiTriple {
    pub fn contains_zero(&self) -> bool {
        self.lo <= 0.0 && 0.0 <= self.hi
    }
}

/// Straight-line fit of atrophy over time with 95% confidence intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: CiTriple,
    pub intercept: CiTriple,
    pub n: usize,
}

/// OLS fit y = slope * t + intercept with 95% CIs from standard errors and
/// the Student-t quantile at n - 2 degrees of freedom.
pub fn linfit_ci(points: &[(f64, f64)]) -> Result<FitResult> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!("linear fit needs n >= 3, got {n}")));
    }
    let nf = n as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateInput("all time values equal".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_t;
    let ssr: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let s2 = ssr / (nf - 2.0);
    let se_slope = (s2 / sxx).sqrt();
    let se_intercept = (s2 * (1.0 / nf + mean_t * mean_t / sxx)).sqrt();
    let tq = t_quantile(0.975, nf - 2.0);
    Ok(FitResult {
        slope: CiTriple { lo: slope - tq * se_slope, point: slope, hi: slope + tq * se_slope },
        intercept: CiTriple {
            lo: intercept - tq * se_intercept,
            point: intercept,
            hi: intercept + tq * se_intercept,
        },
        n,
    })
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

/// Ranks (1-based) with average ranks for ties.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of ranks i+1 ..= j+1
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank-order correlation with a two-sided p-value from the
/// t-statistic approximation (approximate for n < 10).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch("spearman inputs".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!("spearman needs n >= 3, got {n}")));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let nf = n as f64;
    let mx = rx.iter().sum::<f64>() / nf;
    let my = ry.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant input to spearman".into()));
    }
    let rho = sxy / (sxx * syy).sqrt();
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((nf - 2.0) / (1.0 - rho * rho)).sqrt();
        2.0 * (1.0 - t_cdf(t.abs(), nf - 2.0))
    };
    Ok((rho, p))
}

/// Benjamini-Hochberg procedure at false discovery rate q: flags the
/// hypotheses that survive.
pub fn benjamini_hochberg(pvals: &[f64], q: f64) -> Vec<bool> {
    let n = pvals.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pvals[i].partial_cmp(&pvals[j]).expect("finite p-values"));
    let mut threshold = f64::NEG_INFINITY;
    for (k, &idx) in order.iter().enumerate() {
        if pvals[idx] <= (k + 1) as f64 * q / n as f64 {
            threshold = pvals[idx];
        }
    }
    pvals.iter().map(|&p| p <= threshold).collect()
}

/// Paired t-test; returns (t, one-sided p) where p = P(T >= t) under the
/// null of zero mean difference. Identical inputs give (0, 0.5); a nonzero
/// constant difference has no variance to test against and is an error.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("paired t-test inputs".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::DegenerateInput("paired t-test needs n >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        if mean == 0.0 {
            return Ok((0.0, 0.5));
        }
        return Err(Error::DegenerateInput("zero variance with nonzero mean difference".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    Ok((t, 1.0 - t_cdf(t, n as f64 - 1.0)))
}

/// Wilcoxon signed-rank test; returns (W+, one-sided p) where W+ is the sum
/// of ranks of positive differences a - b and p = P(W+ <= w) under the
/// normal approximation with continuity correction (alternative: a below b).
/// Zero differences are dropped; all-zero input is an error.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("wilcoxon inputs".into()));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::DegenerateInput("no nonzero differences".into()));
    }
    let n = d.len() as f64;
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 =
        d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let mu = n * (n + 1.0) / 4.0;
    let mut sigma2 = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Tie correction over groups of equal |d|.
    let mut sorted = abs.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        sigma2 -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    if sigma2 <= 0.0 {
        return Err(Error::DegenerateInput("degenerate rank variance".into()));
    }
    let z = (w_plus - mu + 0.5) / sigma2.sqrt();
    Ok((w_plus, normal_cdf(z)))
}

// ---------------------------------------------------------------------------
// Percentiles
// ---------------------------------------------------------------------------

/// Percentiles (0..=100) with linear interpolation between order statistics.
pub fn percentiles(values: &[f64], which: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentiles of empty data".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    Ok(which
        .iter()
        .map(|&p| {
            let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        })
        .collect())
}

/// Indices of the highest `fraction` of entries by absolute value,
/// descending.
pub fn top_fraction_by_magnitude(values: &[f64], fraction: f64) -> Vec<usize> {
    let keep = ((values.len() as f64 * fraction).ceil() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .partial_cmp(&values[i].abs())
            .expect("finite values")
            .then(i.cmp(&j))
    });
    order.truncate(keep);
    order
}
