//! Recovering the influence weight θ from an experiment panel.
//!
//! Users start in a steady state where the toxic share of what they share
//! equals what they see. When treated users' exposure is moved to the
//! population mean, the change in their sharing share is approximately
//! `κ − θ·v₀`, so θ is minus the slope of that change on baseline exposure.
//! Baseline exposure is a binomial proportion, so plain OLS is attenuated;
//! the split-half IV and the reliability correction undo that.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::recommender::csv_err;
use crate::simulator::{Arm, Panel, PanelRecord};
use crate::stats;

/// Fewest usable treated users an estimator accepts.
pub const MIN_OBS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ols,
    Iv2sls,
    Reliability,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Iv2sls => "iv2sls",
            Method::Reliability => "reliability",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Functional form of the steady-state regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Specification {
    /// Differences of proportions on proportions; keeps zero shares usable.
    #[default]
    Linear,
    /// Differences of logs on logs; drops users with any zero proportion.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub method: Method,
    pub theta_hat: f64,
    pub se: f64,
    /// Constant of the regression (absorbs the control-group change and the
    /// exposure level of the treated feed).
    pub intercept: f64,
    pub n_obs: usize,
    /// Robust first-stage F; IV only.
    pub first_stage_f: Option<f64>,
}

impl ThetaEstimate {
    /// 95% normal confidence interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.theta_hat - 1.96 * self.se, self.theta_hat + 1.96 * self.se)
    }

    pub fn covers(&self, theta: f64) -> bool {
        let (lo, hi) = self.ci95();
        lo <= theta && theta <= hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvDiagnostics {
    pub first_stage_coef: f64,
    pub first_stage_f: f64,
    /// Spearman–Brown reliability of full-sample baseline exposure implied by
    /// the correlation of the two halves.
    pub reliability_ratio: f64,
    pub weak_instrument: bool,
}

/// Regression inputs for treated users with every needed proportion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimationSample {
    /// Change in the toxic share of shares, net of the control mean change.
    pub y: Vec<f64>,
    pub v0: Vec<f64>,
    pub half1: Vec<f64>,
    pub half2: Vec<f64>,
    pub control_mean_change: f64,
}

fn transform(spec: Specification, v: f64) -> Option<f64> {
    match spec {
        Specification::Linear => Some(v),
        Specification::Log => (v > 0.0).then(|| v.ln()),
    }
}

struct Row {
    dy: f64,
    v0: f64,
    h1: f64,
    h2: f64,
}

fn row(spec: Specification, b: &PanelRecord, i: &PanelRecord) -> Option<Row> {
    let t = |v: Option<f64>| v.and_then(|x| transform(spec, x));
    Some(Row {
        dy: t(i.s_t)? - t(b.s_t)?,
        v0: t(b.v_t)?,
        h1: t(b.v_half1)?,
        h2: t(b.v_half2)?,
    })
}

/// Build the estimation sample from users selected by `keep`.
pub fn estimation_sample(
    panel: &Panel,
    spec: Specification,
    keep: impl Fn(usize) -> bool,
) -> Result<EstimationSample> {
    let mut control = Vec::new();
    let mut out = EstimationSample::default();
    for (idx, (b, i)) in panel.baseline.iter().zip(&panel.intervention).enumerate() {
        let Some(r) = row(spec, b, i) else { continue };
        match b.arm {
            Arm::Control => control.push(r.dy),
            Arm::Treated if keep(idx) => {
                out.y.push(r.dy);
                out.v0.push(r.v0);
                out.half1.push(r.h1);
                out.half2.push(r.h2);
            }
            Arm::Treated => {}
        }
    }
    if out.y.len() < MIN_OBS {
        return Err(Error::InsufficientData(format!(
            "{} usable treated users, need at least {MIN_OBS} who shared in both periods and viewed at least 2 posts at baseline",
            out.y.len()
        )));
    }
    if control.is_empty() {
        return Err(Error::InsufficientData("no usable control users".into()));
    }
    out.control_mean_change = stats::mean(&control);
    for y in &mut out.y {
        *y -= out.control_mean_change;
    }
    Ok(out)
}

fn from_fit(method: Method, fit: &stats::LinearFit, first_stage_f: Option<f64>) -> ThetaEstimate {
    ThetaEstimate {
        method,
        theta_hat: -fit.slope,
        se: fit.se_slope,
        intercept: fit.intercept,
        n_obs: fit.n,
        first_stage_f,
    }
}

pub fn ols_on(sample: &EstimationSample) -> Result<ThetaEstimate> {
    Ok(from_fit(Method::Ols, &stats::ols(&sample.v0, &sample.y)?, None))
}

pub fn iv_on(sample: &EstimationSample) -> Result<(ThetaEstimate, IvDiagnostics)> {
    let fit = stats::iv_2sls(&sample.y, &sample.half1, &sample.half2)?;
    let weak = fit.first_stage_f < 10.0;
    if weak {
        log::warn!("weak instrument: first-stage F = {:.2}", fit.first_stage_f);
    }
    let diag = IvDiagnostics {
        first_stage_coef: fit.first_stage.slope,
        first_stage_f: fit.first_stage_f,
        reliability_ratio: spearman_brown(stats::correlation(&sample.half1, &sample.half2)).clamp(0.0, 1.0),
        weak_instrument: weak,
    };
    Ok((from_fit(Method::Iv2sls, &fit.second_stage, Some(fit.first_stage_f)), diag))
}

/// Reliability of a test twice as long as each half.
pub fn spearman_brown(r: f64) -> f64 {
    2.0 * r / (1.0 + r)
}

pub fn reliability_on(sample: &EstimationSample) -> Result<ThetaEstimate> {
    let r = stats::correlation(&sample.half1, &sample.half2);
    if !(r > 0.0) {
        return Err(Error::InsufficientData(format!(
            "split-half correlation {r} is not positive; reliability undefined"
        )));
    }
    correct_for_reliability(ols_on(sample)?, spearman_brown(r))
}

/// Divide an attenuated OLS estimate by a reliability ratio in (0, 1].
pub fn correct_for_reliability(ols: ThetaEstimate, reliability: f64) -> Result<ThetaEstimate> {
    if !(reliability > 0.0) {
        return Err(Error::InsufficientData(format!("reliability {reliability} must be positive")));
    }
    Ok(ThetaEstimate {
        method: Method::Reliability,
        theta_hat: ols.theta_hat / reliability,
        se: ols.se / reliability,
        ..ols
    })
}

pub fn estimate_theta_ols(panel: &Panel) -> Result<ThetaEstimate> {
    ols_on(&estimation_sample(panel, Specification::Linear, |_| true)?)
}

pub fn estimate_theta_iv(panel: &Panel) -> Result<(ThetaEstimate, IvDiagnostics)> {
    iv_on(&estimation_sample(panel, Specification::Linear, |_| true)?)
}

pub fn estimate_theta_reliability(panel: &Panel) -> Result<ThetaEstimate> {
    reliability_on(&estimation_sample(panel, Specification::Linear, |_| true)?)
}

/// All three estimators on one sample.
pub fn estimate_all(panel: &Panel, spec: Specification) -> Result<(Vec<ThetaEstimate>, IvDiagnostics)> {
    let sample = estimation_sample(panel, spec, |_| true)?;
    let (iv, diag) = iv_on(&sample)?;
    Ok((vec![ols_on(&sample)?, iv, reliability_on(&sample)?], diag))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateCheck {
    /// Uncorrected slope of intervention-period on baseline sharing share.
    pub delta_raw: f64,
    /// Slope with baseline sharing share instrumented by baseline exposure.
    pub delta: f64,
    pub se: f64,
    /// Two-sided p-value for a slope of one.
    pub p_value: f64,
    pub n_obs: usize,
}

/// Regress control users' period-1 sharing share on their period-0 share.
/// Sampling error in the period-0 share is handled by instrumenting it with
/// baseline exposure, which in steady state measures the same taste with
/// independent noise.
pub fn steady_state_check(panel: &Panel) -> Result<SteadyStateCheck> {
    let (mut s0, mut s1, mut v0) = (Vec::new(), Vec::new(), Vec::new());
    for (b, i) in panel.baseline.iter().zip(&panel.intervention) {
        if b.arm != Arm::Control {
            continue;
        }
        if let (Some(a), Some(c), Some(v)) = (b.s_t, i.s_t, b.v_t) {
            s0.push(a);
            s1.push(c);
            v0.push(v);
        }
    }
    if s0.len() < MIN_OBS {
        return Err(Error::InsufficientData(format!(
            "{} control users shared in both periods, need {MIN_OBS}",
            s0.len()
        )));
    }
    let raw = stats::ols(&s0, &s1)?;
    let iv = stats::iv_2sls(&s1, &s0, &v0)?;
    let fit = iv.second_stage;
    Ok(SteadyStateCheck {
        delta_raw: raw.slope,
        delta: fit.slope,
        se: fit.se_slope,
        p_value: stats::normal_two_sided_p((fit.slope - 1.0) / fit.se_slope),
        n_obs: fit.n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupEstimates {
    /// One entry per group; `None` when the group was too small to estimate.
    pub estimates: Vec<Option<ThetaEstimate>>,
    /// Wald statistic for equal θ across estimated groups.
    pub wald: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Group labels by quantile of the second-half baseline exposure. Sorting on
/// the instrument leaves the first half's sampling error independent of the
/// group, so the IV stays consistent within each group.
pub fn exposure_groups(panel: &Panel, n_groups: usize) -> Result<Vec<Option<usize>>> {
    if n_groups == 0 {
        return Err(Error::InvalidParams("need at least one group".into()));
    }
    let mut ranked: Vec<(f64, u64, usize)> = panel
        .baseline
        .iter()
        .enumerate()
        .filter(|(_, r)| r.arm.is_treated())
        .filter_map(|(i, r)| r.v_half2.map(|v| (v, r.user_id, i)))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ranked.len();
    let mut labels = vec![None; panel.len()];
    for (rank, &(_, _, i)) in ranked.iter().enumerate() {
        labels[i] = Some(rank * n_groups / n.max(1));
    }
    Ok(labels)
}

/// IV estimate within each group and a Wald test that they are equal.
pub fn estimate_theta_by_group(panel: &Panel, groups: &[Option<usize>]) -> Result<GroupEstimates> {
    if groups.len() != panel.len() {
        return Err(Error::Dimension("one group label per user required".into()));
    }
    let n_groups = groups.iter().flatten().max().map_or(0, |g| g + 1);
    let estimates: Vec<Option<ThetaEstimate>> = (0..n_groups)
        .map(|g| {
            match estimation_sample(panel, Specification::Linear, |i| groups[i] == Some(g)).and_then(|s| iv_on(&s)) {
                Ok((est, _)) => Some(est),
                Err(e) => {
                    log::warn!("group {g}: {e}");
                    None
                }
            }
        })
        .collect();
    let used: Vec<&ThetaEstimate> = estimates.iter().flatten().filter(|e| e.se > 0.0).collect();
    if used.len() < 2 {
        return Err(Error::InsufficientData("fewer than 2 groups could be estimated".into()));
    }
    let w: Vec<f64> = used.iter().map(|e| 1.0 / (e.se * e.se)).collect();
    let pooled = used.iter().zip(&w).map(|(e, w)| e.theta_hat * w).sum::<f64>() / w.iter().sum::<f64>();
    let wald: f64 = used.iter().zip(&w).map(|(e, w)| (e.theta_hat - pooled).powi(2) * w).sum();
    let df = used.len() - 1;
    Ok(GroupEstimates {
        estimates,
        wald,
        df,
        p_value: stats::chi_squared_sf(wald, df as f64),
    })
}

pub const RESULTS_HEADER: [&str; 6] = ["method", "theta_hat", "se", "intercept", "first_stage_F", "n_obs"];

pub fn write_results_csv<W: Write>(w: W, estimates: &[ThetaEstimate]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for e in estimates {
        out.write_record([
            e.method.to_string(),
            e.theta_hat.to_string(),
            e.se.to_string(),
            e.intercept.to_string(),
            e.first_stage_f.map(|f| f.to_string()).unwrap_or_default(),
            e.n_obs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
