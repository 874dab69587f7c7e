//! Statistical kernel: paired t-test, Cohen's d, exact binomial test,
//! Clopper–Pearson bound and temperature-scaled softmax.
//!
//! Student-t tails come from the regularized incomplete beta function
//! (Lentz continued fraction), so small p-values keep full relative precision.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("invalid binomial arguments: k={k}, n={n}, null_p={null_p}")]
    InvalidBinomial { k: u64, n: u64, null_p: f64 },
    #[error("temperature must be positive and finite (got {0})")]
    InvalidTemperature(f64),
    #[error("softmax of an empty score list")]
    EmptyScores,
    #[error("non-finite input")]
    NonFinite,
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = f64::from(m);
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    }
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `P(T <= t)` for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    #[default]
    Two,
    /// Alternative: mean difference greater than zero.
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// `None` when the differences have zero variance.
    pub t_stat: Option<f64>,
    pub df: usize,
    pub p_value: Option<f64>,
    pub sidedness: Sidedness,
    pub degenerate: bool,
}

/// Sample mean and sd (n - 1 denominator). Constant input has sd exactly 0
/// even when the computed mean carries rounding.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One-sample t-test on paired differences, `t = mean / (sd / sqrt(n))`.
pub fn paired_t(differences: &[f64], sidedness: Sidedness) -> Result<PairedTestResult, StatsError> {
    let n = differences.len();
    if n < 2 {
        return Err(StatsError::TooFewObservations { needed: 2, got: n });
    }
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (mean, sd) = mean_sd(differences);
    let df = n - 1;
    let degenerate = sd == 0.0;
    let (t_stat, p_value) = if degenerate {
        (None, None)
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let p = match sidedness {
            Sidedness::Two => (2.0 * student_t_sf(t.abs(), df as f64)).min(1.0),
            Sidedness::Greater => student_t_sf(t, df as f64),
        };
        (Some(t), Some(p))
    };
    Ok(PairedTestResult {
        n,
        mean,
        sd,
        t_stat,
        df,
        p_value,
        sidedness,
        degenerate,
    })
}

/// Paired-samples effect size `mean / sd` of the differences.
pub fn cohens_d_paired(differences: &[f64]) -> Result<f64, StatsError> {
    let n = differences.len();
    if n < 2 {
        return Err(StatsError::TooFewObservations { needed: 2, got: n });
    }
    let (mean, sd) = mean_sd(differences);
    if sd == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(mean / sd)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinomialTestResult {
    pub successes: u64,
    pub trials: u64,
    pub null_p: f64,
    pub p_value: f64,
    pub alternative: Alternative,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Exact upper-tail binomial test `P(X >= k)`, summed in log space.
pub fn binomial_test(
    k: u64,
    n: u64,
    null_p: f64,
    alternative: Alternative,
) -> Result<BinomialTestResult, StatsError> {
    if k > n || !(null_p > 0.0 && null_p < 1.0) {
        return Err(StatsError::InvalidBinomial { k, n, null_p });
    }
    let p_value = if k == 0 {
        1.0
    } else {
        let (lp, lq) = (null_p.ln(), (1.0 - null_p).ln());
        let terms: Vec<f64> = (k..=n)
            .map(|i| ln_choose(n, i) + i as f64 * lp + (n - i) as f64 * lq)
            .collect();
        log_sum_exp(&terms).exp().min(1.0)
    };
    Ok(BinomialTestResult {
        successes: k,
        trials: n,
        null_p,
        p_value,
        alternative,
    })
}

/// One-sided Clopper–Pearson lower confidence bound for a binomial
/// proportion: the `p` at which `P(X >= k | p) = 1 - confidence`.
pub fn clopper_pearson_lower(k: u64, n: u64, confidence: f64) -> Result<f64, StatsError> {
    if k > n || n == 0 || !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::InvalidBinomial {
            k,
            n,
            null_p: confidence,
        });
    }
    if k == 0 {
        return Ok(0.0);
    }
    let alpha = 1.0 - confidence;
    // P(X >= k | p) = I_p(k, n - k + 1), increasing in p.
    let (a, b) = (k as f64, (n - k + 1) as f64);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if incomplete_beta(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `p_i = exp((s_i - max s) / T) / sum_j exp((s_j - max s) / T)`.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>, StatsError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(StatsError::InvalidTemperature(temperature));
    }
    if scores.is_empty() {
        return Err(StatsError::EmptyScores);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
