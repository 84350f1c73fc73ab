//! Correlation inference, correlation comparison and FDR control.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile used for Fisher-Z intervals.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub n: usize,
    pub r: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Sample Pearson correlation, clamped to [-1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(format!("correlation needs n >= 2, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("correlation input".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InsufficientData("correlation undefined for zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson r with a two-sided t-test p-value and a Fisher-Z 95% interval.
pub fn pearson_with_ci(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    if x.len() < 4 {
        return Err(Error::InsufficientData(format!("confidence interval needs n >= 4, got {}", x.len())));
    }
    let r = pearson(x, y)?;
    let n = x.len();
    let (ci_low, ci_high) = fisher_ci(r, n);
    Ok(PearsonResult {
        n,
        r,
        p: correlation_p_value(r, n),
        ci_low,
        ci_high,
    })
}

pub fn fisher_ci(r: f64, n: usize) -> (f64, f64) {
    let z = r.atanh();
    let se = 1.0 / ((n - 3) as f64).sqrt();
    ((z - Z_95 * se).tanh(), (z + Z_95 * se).tanh())
}

/// Two-sided p-value of `t = r sqrt((n-2)/(1-r^2))` on `n - 2` degrees of
/// freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus;
    student_t_two_sided(t2.sqrt(), df)
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// `P(|Z| >= |z|)` for the standard normal.
pub fn normal_two_sided(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
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

/// Fisher-Z test of `r1` against `r2` at sample size `n`.
pub fn fisher_z_compare(r1: f64, r2: f64, n: usize) -> Result<(f64, f64)> {
    if n < 4 {
        return Err(Error::InsufficientData(format!("correlation comparison needs n >= 4, got {n}")));
    }
    if !(r1.abs() < 1.0 && r2.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("correlations must satisfy |r| < 1, got {r1} and {r2}")));
    }
    let z = (r1.atanh() - r2.atanh()) / (2.0 / (n - 3) as f64).sqrt();
    Ok((z, normal_two_sided(z)))
}

/// Benjamini-Hochberg step-up rejections at level `q`.
pub fn bh_fdr(pvalues: &[f64], q: f64) -> Vec<bool> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let k_star = (1..=m).rev().find(|&k| pvalues[order[k - 1]] <= k as f64 * q / m as f64);
    let mut out = vec![false; m];
    if let Some(k) = k_star {
        let cut = pvalues[order[k - 1]];
        for (o, p) in out.iter_mut().zip(pvalues) {
            *o = *p <= cut;
        }
    }
    out
}

/// Ordinary least squares with intercept; returns `[intercept, coefs..]`.
pub fn ols(features: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    ridge(features, y, 0.0)
}

/// Ridge regression with an unpenalized intercept; returns
/// `[intercept, coefs..]`. Solved through an SVD so rank-deficient designs
/// still give the minimum-norm solution.
pub fn ridge(features: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = features.len();
    if n == 0 || n != y.len() {
        return Err(Error::ShapeMismatch {
            op: "regression",
            left: vec![n],
            right: vec![y.len()],
        });
    }
    let p = features[0].len();
    if features.iter().any(|f| f.len() != p) {
        return Err(Error::InvalidArgument("regression rows have differing widths".into()));
    }
    let means: Vec<f64> = (0..p).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let ym = mean(y);
    let x = nalgebra::DMatrix::from_fn(n, p, |i, j| features[i][j] - means[j]);
    let yv = nalgebra::DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let mut gram = x.transpose() * &x;
    for j in 0..p {
        gram[(j, j)] += alpha;
    }
    let rhs = x.transpose() * yv;
    let svd = gram.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    let beta = svd
        .solve(&rhs, tol)
        .map_err(|e| Error::InvalidArgument(format!("regression solve failed: {e}")))?;
    let intercept = ym - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let mut out = vec![intercept];
    out.extend(beta.iter());
    Ok(out)
}

pub fn predict_linear(coef: &[f64], features: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(features).map(|(c, f)| c * f).sum::<f64>()
}
