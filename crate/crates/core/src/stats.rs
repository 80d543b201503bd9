//! Small-sample statistics shared by the estimators: bivariate OLS and
//! just-identified 2SLS with HC1 errors, a joint F test, and a few
//! distribution-free helpers.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample covariance with `n − 1` denominator.
pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (x.len() as f64 - 1.0)
}

pub fn variance(x: &[f64]) -> f64 {
    covariance(x, x)
}

pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    covariance(x, y) / (variance(x) * variance(y)).sqrt()
}

/// Two-sided p-value of a z statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - std.cdf(z.abs()))
}

pub fn chi_squared_sf(stat: f64, df: f64) -> f64 {
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

pub fn f_sf(stat: f64, df1: f64, df2: f64) -> f64 {
    let dist = FisherSnedecor::new(df1, df2).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// HC1 standard error of the slope.
    pub se_slope: f64,
    pub se_intercept: f64,
    pub n: usize,
}

impl LinearFit {
    pub fn t_slope(&self) -> f64 {
        self.slope / self.se_slope
    }
}

fn check_lengths(n: usize, lens: &[usize], min: usize) -> Result<()> {
    if lens.iter().any(|&l| l != n) {
        return Err(Error::Dimension(format!("regression inputs have lengths {lens:?}")));
    }
    if n < min {
        return Err(Error::InsufficientData(format!(
            "{n} observations, need at least {min}"
        )));
    }
    Ok(())
}

/// `y = a + b·x` by least squares with HC1 standard errors.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = y.len();
    check_lengths(n, &[x.len(), y.len()], 3)?;
    let mx = mean(x);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("regressor has zero variance".into()));
    }
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let (se_intercept, se_slope) = hc1_bivariate(x, x, &resid);
    Ok(LinearFit {
        intercept,
        slope,
        se_slope,
        se_intercept,
        n,
    })
}

/// Sandwich `(Z'X)⁻¹ Z'ΩZ (X'Z)⁻¹ · n/(n−2)` for one regressor plus a
/// constant; OLS is the special case `z = x`.
fn hc1_bivariate(x: &[f64], z: &[f64], resid: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sz, szx) = (
        x.iter().sum::<f64>(),
        z.iter().sum::<f64>(),
        z.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
    );
    // Z'X = [[n, Σx], [Σz, Σzx]]
    let det = n * szx - sx * sz;
    let inv = [[szx / det, -sx / det], [-sz / det, n / det]];
    let mut meat = [[0.0; 2]; 2];
    for (zi, ui) in z.iter().zip(resid) {
        let u2 = ui * ui;
        meat[0][0] += u2;
        meat[0][1] += u2 * zi;
        meat[1][1] += u2 * zi * zi;
    }
    meat[1][0] = meat[0][1];
    // bread = (Z'X)^-1, cov = bread · meat · bread'
    let mut tmp = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            tmp[i][j] = (0..2).map(|k| inv[i][k] * meat[k][j]).sum();
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cov[i][j] = (0..2).map(|k| tmp[i][k] * inv[j][k]).sum();
        }
    }
    let scale = n / (n - 2.0);
    (
        (cov[0][0] * scale).max(0.0).sqrt(),
        (cov[1][1] * scale).max(0.0).sqrt(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvFit {
    pub second_stage: LinearFit,
    pub first_stage: LinearFit,
    /// Robust first-stage F, the squared HC1 t statistic of the instrument.
    pub first_stage_f: f64,
}

/// Just-identified 2SLS of `y` on endogenous `x` with instrument `z`.
pub fn iv_2sls(y: &[f64], x: &[f64], z: &[f64]) -> Result<IvFit> {
    let n = y.len();
    check_lengths(n, &[x.len(), z.len()], 3)?;
    let first_stage = ols(z, x)?;
    let czx = covariance(z, x);
    if czx == 0.0 {
        return Err(Error::InsufficientData("instrument is uncorrelated with the regressor".into()));
    }
    let slope = covariance(z, y) / czx;
    let intercept = mean(y) - slope * mean(x);
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let (se_intercept, se_slope) = hc1_bivariate(x, z, &resid);
    Ok(IvFit {
        second_stage: LinearFit {
            intercept,
            slope,
            se_slope,
            se_intercept,
            n,
        },
        first_stage,
        first_stage_f: first_stage.t_slope().powi(2),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFTest {
    pub f_stat: f64,
    pub p_value: f64,
    pub df_num: usize,
    pub df_den: usize,
    /// Indices of covariates dropped as collinear with earlier ones.
    pub dropped: Vec<usize>,
}

/// Classical F test that every slope is zero in a regression of `y` on a
/// constant and `covariates` (one inner vec per covariate).
pub fn joint_f_test(y: &[f64], covariates: &[Vec<f64>]) -> Result<JointFTest> {
    let n = y.len();
    let mut kept: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    let mut dropped = Vec::new();
    for (idx, c) in covariates.iter().enumerate() {
        if c.len() != n {
            return Err(Error::Dimension(format!("covariate {idx} has length {} (expected {n})", c.len())));
        }
        let v = DVector::from_column_slice(c);
        let resid = residualize(&v, &kept);
        if resid.norm() <= 1e-9 * v.norm().max(1.0) {
            log::warn!("covariate {idx} is collinear with earlier columns and was dropped");
            dropped.push(idx);
        } else {
            kept.push(v);
        }
    }
    let k = kept.len() - 1;
    if k == 0 {
        return Err(Error::InsufficientData("no usable covariates".into()));
    }
    if n <= k + 1 {
        return Err(Error::InsufficientData(format!("{n} observations for {k} covariates")));
    }
    let yv = DVector::from_column_slice(y);
    let ssr_full = residualize(&yv, &kept).norm_squared();
    let ssr_null = residualize(&yv, &kept[..1]).norm_squared();
    let df_den = n - k - 1;
    let f_stat = ((ssr_null - ssr_full) / k as f64) / (ssr_full / df_den as f64);
    Ok(JointFTest {
        f_stat,
        p_value: f_sf(f_stat, k as f64, df_den as f64),
        df_num: k,
        df_den,
        dropped,
    })
}

fn residualize(v: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let x = DMatrix::from_columns(basis);
    let xtx = x.transpose() * &x;
    let xtv = x.transpose() * v;
    match xtx.cholesky() {
        Some(ch) => v - &x * ch.solve(&xtv),
        None => v.clone(),
    }
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    correlation(&ranks(x), &ranks(y))
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1).
/// Returns `(D, asymptotic p-value)`.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_sf(lambda))
}

fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
