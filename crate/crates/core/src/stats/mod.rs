//! Two-sample comparison battery for per-episode smoothness scores:
//! Welch's t-test, Shapiro–Wilk normality, Levene's variance test and Q–Q
//! points.

pub mod special;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use special::{beta_reg, f_sf, ln_gamma, norm_cdf, norm_ppf, t_cdf, t_two_tailed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    /// Degrees of freedom (numerator df for F tests).
    pub df: Option<f64>,
    /// Denominator degrees of freedom for F tests.
    pub df2: Option<f64>,
    pub p: f64,
}

/// Mean, sample standard deviation (N − 1) and size of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl GroupSummary {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::Usage(format!("a group needs at least 2 values, got {}", xs.len())));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("sample contains a non-finite value".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        Ok(Self { mean, sd: (ss / (n - 1.0)).sqrt(), n: xs.len() })
    }
}

/// Welch's unequal-variance t-test on raw samples.
pub fn welch(a: &[f64], b: &[f64]) -> Result<TestResult> {
    welch_summary(&GroupSummary::of(a)?, &GroupSummary::of(b)?)
}

/// Welch's t-test from per-group summaries; two-tailed p.
pub fn welch_summary(a: &GroupSummary, b: &GroupSummary) -> Result<TestResult> {
    for g in [a, b] {
        if g.n < 2 {
            return Err(Error::Usage(format!("a group needs at least 2 values, got {}", g.n)));
        }
        if !(g.sd >= 0.0) || !g.sd.is_finite() || !g.mean.is_finite() {
            return Err(Error::Domain(format!("invalid group summary {g:?}")));
        }
    }
    let va = a.sd * a.sd / a.n as f64;
    let vb = b.sd * b.sd / b.n as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        return Err(Error::Degenerate("both groups have zero variance".into()));
    }
    let t = (a.mean - b.mean) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    Ok(TestResult {
        test: "welch".into(),
        statistic: t,
        df: Some(df),
        df2: None,
        p: t_two_tailed(t, df)?,
    })
}

/// Levene's test, centred on the group means: one-way ANOVA on absolute
/// deviations.
pub fn levene(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let groups = [a, b];
    let mut devs: Vec<Vec<f64>> = Vec::with_capacity(2);
    for g in groups {
        let s = GroupSummary::of(g)?;
        devs.push(g.iter().map(|x| (x - s.mean).abs()).collect());
    }
    let n_total: usize = devs.iter().map(Vec::len).sum();
    let grand = devs.iter().flatten().sum::<f64>() / n_total as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for d in &devs {
        let m = d.iter().sum::<f64>() / d.len() as f64;
        between += d.len() as f64 * (m - grand) * (m - grand);
        within += d.iter().map(|z| (z - m) * (z - m)).sum::<f64>();
    }
    if within == 0.0 {
        return Err(Error::Degenerate(
            "absolute deviations are constant within every group; Levene's F is undefined".into(),
        ));
    }
    let (df1, df2) = ((devs.len() - 1) as f64, (n_total - devs.len()) as f64);
    let f = (between / df1) / (within / df2);
    Ok(TestResult {
        test: "levene".into(),
        statistic: f,
        df: Some(df1),
        df2: Some(df2),
        p: f_sf(f, df1, df2)?,
    })
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Shapiro–Wilk W with Royston's approximation for coefficients and p-value
/// (algorithm AS R94), valid for 3 ≤ N ≤ 5000.
pub fn shapiro_wilk(sample: &[f64]) -> Result<TestResult> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Range(format!("Shapiro-Wilk needs 3 <= N <= 5000, got {n}")));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("sample contains a non-finite value".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] == 0.0 {
        return Err(Error::Degenerate("constant sample has zero variance".into()));
    }

    let nn2 = n / 2;
    let nf = n as f64;
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let an25 = nf + 0.25;
        let m: Vec<f64> = (1..=nn2)
            .map(|i| norm_ppf((i as f64 - 0.375) / an25))
            .collect::<Result<_>>()?;
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..nn2 {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / nf;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = (0..nn2).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ssq).min(1.0);

    let p = if n == 3 {
        const PI6: f64 = 6.0 / std::f64::consts::PI;
        const STQR: f64 = std::f64::consts::FRAC_PI_3;
        (PI6 * (w.sqrt().asin() - STQR)).clamp(0.0, 1.0)
    } else {
        let w1 = (1.0 - w).ln();
        let (y, m, s) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], nf);
            if w1 >= gamma {
                return Ok(sw_result(w, 1e-99));
            }
            let y = -(gamma - w1).ln();
            let m = poly(&[0.544, -0.39978, 0.025054, -6.714e-4], nf);
            let s = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], nf).exp();
            (y, m, s)
        } else {
            let ln_n = nf.ln();
            let m = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n);
            let s = poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp();
            (w1, m, s)
        };
        1.0 - norm_cdf((y - m) / s)
    };
    Ok(sw_result(w, p))
}

fn sw_result(w: f64, p: f64) -> TestResult {
    TestResult {
        test: "shapiro_wilk".into(),
        statistic: w,
        df: None,
        df2: None,
        p: p.clamp(0.0, 1.0),
    }
}

/// Sorted sample paired with standard-normal quantiles at plotting positions
/// `(i − 0.375)/(N + 0.25)`.
pub fn qq_points(sample: &[f64]) -> Result<Vec<(f64, f64)>> {
    if sample.is_empty() {
        return Err(Error::Usage("Q-Q plot of an empty sample".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.into_iter()
        .enumerate()
        .map(|(i, v)| Ok((norm_ppf((i as f64 + 1.0 - 0.375) / (n + 0.25))?, v)))
        .collect()
}

/// A deterministic sample of size `n` with exactly the given mean and sample
/// standard deviation (up to rounding): standardized normal plotting-position
/// quantiles, rescaled.
pub fn sample_with_moments(mean: f64, sd: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Usage("need n >= 2 to fix a standard deviation".into()));
    }
    let z: Vec<f64> = qq_points(&vec![0.0; n])?.into_iter().map(|(q, _)| q).collect();
    let s = GroupSummary::of(&z)?;
    Ok(z.iter().map(|q| mean + sd * (q - s.mean) / s.sd).collect())
}

/// The full battery on two samples: Welch, Levene, and Shapiro–Wilk on each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub format_version: u32,
    pub a: GroupSummary,
    pub b: GroupSummary,
    pub welch: TestResult,
    pub levene: TestResult,
    pub shapiro_a: TestResult,
    pub shapiro_b: TestResult,
}

pub fn battery(a: &[f64], b: &[f64]) -> Result<StatsReport> {
    Ok(StatsReport {
        format_version: 1,
        a: GroupSummary::of(a)?,
        b: GroupSummary::of(b)?,
        welch: welch(a, b)?,
        levene: levene(a, b)?,
        shapiro_a: shapiro_wilk(a)?,
        shapiro_b: shapiro_wilk(b)?,
    })
}
