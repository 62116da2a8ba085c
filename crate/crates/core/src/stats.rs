//! Small statistics helpers: moments, least squares, autocorrelation, KS test.

use crate::error::{invalid, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    // Shifting by the first sample keeps constant inputs exactly at zero.
    let x0 = xs[0];
    let mu = xs.iter().map(|x| x - x0).sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - x0 - mu) * (x - x0 - mu)).sum::<f64>() / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("linear fit needs two or more paired points"));
    }
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("linear fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_stderr = if n > 2.0 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(LinearFit { slope, intercept, slope_stderr, r2 })
}

/// Normalized autocorrelation averaged over several equal-length series,
/// centred on the pooled mean.
pub fn autocorrelation(series: &[Vec<f64>], max_lag: usize) -> Vec<f64> {
    let all: Vec<f64> = series.iter().flatten().copied().collect();
    if all.is_empty() {
        return Vec::new();
    }
    let mu = mean(&all);
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let max_lag = max_lag.min(len.saturating_sub(1));
    let mut c = vec![0.0; max_lag + 1];
    for (lag, slot) in c.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for s in series {
            for t in 0..len - lag {
                acc += (s[t] - mu) * (s[t + lag] - mu);
            }
            cnt += len - lag;
        }
        *slot = acc / cnt as f64;
    }
    let c0 = c[0];
    if c0 > 0.0 {
        c.iter_mut().for_each(|x| *x /= c0);
    }
    c
}

/// Jackknife standard error from leave-one-group-out estimates.
pub fn jackknife_stderr(leave_one_out: &[f64]) -> f64 {
    let g = leave_one_out.len() as f64;
    let mu = mean(leave_one_out);
    ((g - 1.0) / g * leave_one_out.iter().map(|x| (x - mu).powi(2)).sum::<f64>()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic distribution.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    KsResult { statistic: d, p_value: kolmogorov_q(lambda) }
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
