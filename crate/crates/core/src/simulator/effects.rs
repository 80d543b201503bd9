//! Treatment-effect read-outs on experiment panels.

use std::fmt;
use std::str::FromStr;

use super::panel::{Arm, Panel, PanelRecord};
use crate::error::{Error, Result};
use crate::stats;

/// Per-user outcome measured in the intervention period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Views,
    Shares,
    ToxicViews,
    ToxicShares,
    /// Toxic share of views, `v_t`.
    ViewShare,
    /// Toxic share of shares, `s_t`.
    ShareShare,
    /// Toxic shares per toxic view, with the denominator floored at one.
    ToxicShareRatio,
}

impl Outcome {
    pub const ALL: [Outcome; 7] = [
        Outcome::Views,
        Outcome::Shares,
        Outcome::ToxicViews,
        Outcome::ToxicShares,
        Outcome::ViewShare,
        Outcome::ShareShare,
        Outcome::ToxicShareRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Views => "views",
            Outcome::Shares => "shares",
            Outcome::ToxicViews => "toxic_views",
            Outcome::ToxicShares => "toxic_shares",
            Outcome::ViewShare => "v_t",
            Outcome::ShareShare => "s_t",
            Outcome::ToxicShareRatio => "toxic_share_ratio",
        }
    }

    pub fn of(self, r: &PanelRecord) -> Option<f64> {
        match self {
            Outcome::Views => Some(r.views as f64),
            Outcome::Shares => Some(r.shares as f64),
            Outcome::ToxicViews => Some(r.toxic_views as f64),
            Outcome::ToxicShares => Some(r.toxic_shares as f64),
            Outcome::ViewShare => r.v_t,
            Outcome::ShareShare => r.s_t,
            Outcome::ToxicShareRatio => Some(r.toxic_shares as f64 / r.toxic_views.max(1) as f64),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown outcome `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub effect: f64,
    /// HC1 standard error of the treatment dummy.
    pub se: f64,
    pub control_mean: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Difference in means between arms of `y`, via the bivariate regression on a
/// treatment dummy.
pub fn ate_from(y: &[f64], treated: &[bool]) -> Result<AteResult> {
    if y.len() != treated.len() {
        return Err(Error::Dimension("outcome and arm vectors differ in length".into()));
    }
    let n_treated = treated.iter().filter(|&&t| t).count();
    let n_control = y.len() - n_treated;
    if n_treated == 0 || n_control == 0 {
        return Err(Error::InsufficientData("both arms must be present".into()));
    }
    let d: Vec<f64> = treated.iter().map(|&t| f64::from(u8::from(t))).collect();
    let fit = stats::ols(&d, y)?;
    if fit.se_slope == 0.0 {
        log::warn!("outcome has zero variance within arms; standard error is 0");
    }
    Ok(AteResult {
        effect: fit.slope,
        se: fit.se_slope,
        control_mean: fit.intercept,
        n_treated,
        n_control,
    })
}

fn collect<'a>(
    records: impl Iterator<Item = &'a PanelRecord>,
    outcome: Outcome,
) -> (Vec<f64>, Vec<bool>) {
    records
        .filter_map(|r| outcome.of(r).map(|y| (y, r.arm.is_treated())))
        .unzip()
}

/// Intervention-period treatment effect on `outcome`. Users whose outcome is
/// undefined (a zero denominator) are left out.
pub fn ate(panel: &Panel, outcome: Outcome) -> Result<AteResult> {
    let (y, t) = collect(panel.intervention.iter(), outcome);
    ate_from(&y, &t)
}

pub const N_QUANTILES: usize = 5;

/// Baseline-exposure quintile (0..5) of each user, ordered by `v_t` with ties
/// broken by user id. Users without baseline views get `None`.
pub fn assign_quantiles(baseline: &[PanelRecord]) -> Result<Vec<Option<usize>>> {
    let mut ranked: Vec<(f64, u64, usize)> = baseline
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.v_t.map(|v| (v, r.user_id, i)))
        .collect();
    if ranked.len() < N_QUANTILES {
        return Err(Error::InsufficientData(format!(
            "{} users with baseline views, need at least {N_QUANTILES}",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ranked.len();
    let mut labels = vec![None; baseline.len()];
    for (rank, &(_, _, i)) in ranked.iter().enumerate() {
        labels[i] = Some(rank * N_QUANTILES / n);
    }
    Ok(labels)
}

/// Treatment effect within each baseline quintile. A cell missing an arm is
/// reported as `None`.
pub fn hte_by_quantile(panel: &Panel, outcome: Outcome) -> Result<Vec<Option<AteResult>>> {
    let labels = assign_quantiles(&panel.baseline)?;
    Ok((0..N_QUANTILES)
        .map(|k| {
            let (y, t) = collect(
                panel
                    .intervention
                    .iter()
                    .zip(&labels)
                    .filter(|(_, l)| **l == Some(k))
                    .map(|(r, _)| r),
                outcome,
            );
            match ate_from(&y, &t) {
                Ok(a) => Some(a),
                Err(e) => {
                    log::warn!("quantile {}: {e}", k + 1);
                    None
                }
            }
        })
        .collect())
}

/// Aggregate counts for one arm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmTotals {
    pub views: f64,
    pub toxic_views: f64,
    pub shares: f64,
    pub toxic_shares: f64,
}

impl ArmTotals {
    pub fn new(views: f64, toxic_views: f64, shares: f64, toxic_shares: f64) -> Self {
        Self {
            views,
            toxic_views,
            shares,
            toxic_shares,
        }
    }

    pub fn from_records<'a>(records: impl Iterator<Item = &'a PanelRecord>) -> Self {
        records.fold(Self::default(), |acc, r| Self {
            views: acc.views + r.views as f64,
            toxic_views: acc.toxic_views + r.toxic_views as f64,
            shares: acc.shares + r.shares as f64,
            toxic_shares: acc.toxic_shares + r.toxic_shares as f64,
        })
    }

    pub fn toxic_view_share(&self) -> f64 {
        self.toxic_views / self.views
    }

    pub fn toxic_share_share(&self) -> f64 {
        self.toxic_shares / self.shares
    }

    /// Toxic shares per toxic view.
    pub fn conditional_share_rate(&self) -> f64 {
        self.toxic_shares / self.toxic_views
    }

    /// `(N^t/N) · S · (s^t / v^t)`, which equals the toxic share count.
    pub fn identity_product(&self) -> f64 {
        self.toxic_view_share() * self.shares * (self.toxic_share_share() / self.toxic_view_share())
    }
}

/// Log-difference decomposition of toxic shares between two arms:
/// `Δlog S^t = Δlog v + Δlog S + Δlog(s/v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalDecomposition {
    pub control: ArmTotals,
    pub treated: ArmTotals,
    /// Change in the toxic share of views.
    pub exposure: f64,
    /// Change in total shares.
    pub disengagement: f64,
    /// Change in the toxic share of shares relative to views.
    pub behavior: f64,
    pub total: f64,
    pub residual: f64,
    /// Percent change in toxic shares over percent change in toxic views.
    pub responsiveness: f64,
}

pub fn decompose_totals(control: ArmTotals, treated: ArmTotals) -> Result<EmpiricalDecomposition> {
    for (arm, t) in [("control", control), ("treated", treated)] {
        if [t.views, t.toxic_views, t.shares, t.toxic_shares].iter().any(|&v| v <= 0.0) {
            return Err(Error::InsufficientData(format!(
                "{arm} arm has an empty cell; decomposition undefined"
            )));
        }
    }
    let dlog = |f: fn(&ArmTotals) -> f64| (f(&treated) / f(&control)).ln();
    let exposure = dlog(ArmTotals::toxic_view_share);
    let disengagement = dlog(|t| t.shares);
    let behavior = dlog(|t| t.toxic_share_share() / t.toxic_view_share());
    let total = dlog(|t| t.toxic_shares);
    let pct_shares = treated.toxic_shares / control.toxic_shares - 1.0;
    let pct_views = treated.toxic_views / control.toxic_views - 1.0;
    Ok(EmpiricalDecomposition {
        control,
        treated,
        exposure,
        disengagement,
        behavior,
        total,
        residual: total - (exposure + disengagement + behavior),
        responsiveness: pct_shares / pct_views,
    })
}

/// Decomposition of intervention-period totals, treated against control.
pub fn empirical_decomposition(panel: &Panel) -> Result<EmpiricalDecomposition> {
    let by_arm = |arm: Arm| ArmTotals::from_records(panel.intervention.iter().filter(move |r| r.arm == arm));
    decompose_totals(by_arm(Arm::Control), by_arm(Arm::Treated))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Responsiveness {
    pub ratio: f64,
    pub se: f64,
    /// Two-sided p-value for a ratio of one.
    pub p_value_vs_one: f64,
    /// The percent change in toxic views is within two standard errors of
    /// zero, so the ratio is not informative.
    pub unstable: bool,
}

/// Ratio of percent changes in mean toxic shares and mean toxic views between
/// arms, over the users for which `keep(i)` holds, with a delta-method SE.
pub fn responsiveness_in(panel: &Panel, keep: impl Fn(usize) -> bool) -> Result<Responsiveness> {
    let mut arms: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for (i, r) in panel.intervention.iter().enumerate() {
        if keep(i) {
            let slot = &mut arms[usize::from(r.arm.is_treated())];
            slot.0.push(r.toxic_shares as f64);
            slot.1.push(r.toxic_views as f64);
        }
    }
    let [(cs, cv), (ts, tv)] = arms;
    if cs.len() < 2 || ts.len() < 2 {
        return Err(Error::InsufficientData("each arm needs at least 2 users".into()));
    }
    let (m_cs, m_cv, m_ts, m_tv) = (stats::mean(&cs), stats::mean(&cv), stats::mean(&ts), stats::mean(&tv));
    if m_cs <= 0.0 || m_cv <= 0.0 {
        return Err(Error::InsufficientData("control means must be positive".into()));
    }
    let a = m_ts / m_cs - 1.0;
    let b = m_tv / m_cv - 1.0;
    let ratio = a / b;
    // Gradient with respect to (m_ts, m_tv) and (m_cs, m_cv).
    let g_t = [1.0 / (m_cs * b), -a / (b * b * m_cv)];
    let g_c = [-m_ts / (m_cs * m_cs * b), a * m_tv / (b * b * m_cv * m_cv)];
    let quad = |g: [f64; 2], x: &[f64], y: &[f64]| {
        let n = x.len() as f64;
        (g[0] * g[0] * stats::variance(x) + 2.0 * g[0] * g[1] * stats::covariance(x, y) + g[1] * g[1] * stats::variance(y))
            / n
    };
    let se = (quad(g_t, &ts, &tv) + quad(g_c, &cs, &cv)).max(0.0).sqrt();
    let se_b = ((stats::variance(&tv) / tv.len() as f64) / (m_cv * m_cv)
        + (stats::variance(&cv) / cv.len() as f64) * m_tv * m_tv / m_cv.powi(4))
    .sqrt();
    let unstable = b.abs() < 2.0 * se_b;
    if unstable {
        log::warn!("toxic views barely move between arms; responsiveness is unstable");
    }
    Ok(Responsiveness {
        ratio,
        se,
        p_value_vs_one: stats::normal_two_sided_p((ratio - 1.0) / se),
        unstable,
    })
}

pub fn responsiveness(panel: &Panel) -> Result<Responsiveness> {
    responsiveness_in(panel, |_| true)
}

/// Rule deciding which intervention-period users leave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttritionRule {
    None,
    /// Users with fewer intervention-period views than the floor leave.
    ViewsBelow(u64),
}

/// Zero out and flag the intervention-period records the rule removes.
pub fn simulate_attrition(panel: &Panel, rule: AttritionRule) -> Panel {
    let mut out = panel.clone();
    if let AttritionRule::ViewsBelow(floor) = rule {
        for r in &mut out.intervention {
            if r.views < floor {
                *r = PanelRecord::exited(r.user_id, r.arm, r.period);
            }
        }
    }
    out
}

/// Share of each arm that exited in the intervention period, `(control, treated)`.
pub fn attrition_rates(panel: &Panel) -> (f64, f64) {
    let rate = |arm: Arm| {
        let recs: Vec<_> = panel.intervention.iter().filter(|r| r.arm == arm).collect();
        recs.iter().filter(|r| r.exited).count() as f64 / recs.len().max(1) as f64
    };
    (rate(Arm::Control), rate(Arm::Treated))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeeBounds {
    pub lower: f64,
    pub upper: f64,
    /// Untrimmed difference in means among stayers.
    pub naive: f64,
    /// Share of the less-attrited arm's stayers that was trimmed.
    pub trim_share: f64,
}

/// Lee bounds from stayers' outcomes in each arm and the arms' retention
/// rates.
pub fn lee_bounds_from(
    treated: &[f64],
    control: &[f64],
    retention_treated: f64,
    retention_control: f64,
) -> Result<LeeBounds> {
    if treated.is_empty() || control.is_empty() {
        return Err(Error::InsufficientData("each arm needs at least one stayer".into()));
    }
    let naive = stats::mean(treated) - stats::mean(control);
    let trim_treated = retention_treated > retention_control;
    let (keep, other) = if trim_treated {
        (retention_treated, retention_control)
    } else {
        (retention_control, retention_treated)
    };
    let trim_share = if keep > 0.0 { (keep - other) / keep } else { 0.0 };
    let arm = if trim_treated { treated } else { control };
    let mut sorted = arm.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (trim_share * sorted.len() as f64).round() as usize;
    if k >= sorted.len() {
        return Err(Error::InsufficientData("trimming would remove every observation".into()));
    }
    let low_mean = stats::mean(&sorted[..sorted.len() - k]);
    let high_mean = stats::mean(&sorted[k..]);
    let (lower, upper) = if trim_treated {
        (low_mean - stats::mean(control), high_mean - stats::mean(control))
    } else {
        (stats::mean(treated) - high_mean, stats::mean(treated) - low_mean)
    };
    Ok(LeeBounds {
        lower,
        upper,
        naive,
        trim_share,
    })
}

/// Lee bounds for an intervention-period outcome on a panel with exits.
pub fn lee_bounds(panel: &Panel, outcome: Outcome) -> Result<LeeBounds> {
    let (rc, rt) = attrition_rates(panel);
    let stayers = |arm: Arm| -> Vec<f64> {
        panel
            .intervention
            .iter()
            .filter(|r| r.arm == arm && !r.exited)
            .filter_map(|r| outcome.of(r))
            .collect()
    };
    lee_bounds_from(&stayers(Arm::Treated), &stayers(Arm::Control), 1.0 - rt, 1.0 - rc)
}

/// Joint F test that baseline covariates do not predict treatment.
pub fn balance_test(covariates: &[Vec<f64>], treated: &[bool]) -> Result<stats::JointFTest> {
    if covariates.len() < 2 {
        return Err(Error::InsufficientData("balance test needs at least 2 covariates".into()));
    }
    let d: Vec<f64> = treated.iter().map(|&t| f64::from(u8::from(t))).collect();
    stats::joint_f_test(&d, covariates)
}

/// Balance on the four baseline counts.
pub fn balance_check(panel: &Panel) -> Result<stats::JointFTest> {
    let b = &panel.baseline;
    let col = |f: fn(&PanelRecord) -> u64| b.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
    let covariates = vec![
        col(|r| r.views),
        col(|r| r.shares),
        col(|r| r.toxic_views),
        col(|r| r.toxic_shares),
    ];
    let treated: Vec<bool> = b.iter().map(|r| r.arm.is_treated()).collect();
    balance_test(&covariates, &treated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn worked_example_decomposes() {
        let d = decompose_totals(ArmTotals::new(15.0, 5.0, 9.0, 2.0), ArmTotals::new(9.0, 2.0, 4.0, 1.0)).unwrap();
        assert_abs_diff_eq!(d.control.toxic_share_share(), 2.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.treated.toxic_share_share(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(d.control.conditional_share_rate(), 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(d.treated.conditional_share_rate(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.responsiveness, 5.0 / 6.0, epsilon = 1e-15);
        assert!(d.residual.abs() < 1e-12);
    }

    #[test]
    fn identical_arms_have_zero_components() {
        let t = ArmTotals::new(100.0, 10.0, 30.0, 4.0);
        let d = decompose_totals(t, t).unwrap();
        assert_eq!((d.exposure, d.disengagement, d.behavior, d.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_cell_is_flagged() {
        let t = ArmTotals::new(100.0, 10.0, 30.0, 4.0);
        assert!(decompose_totals(t, ArmTotals::new(10.0, 0.0, 3.0, 0.0)).is_err());
    }

    #[test]
    fn ate_is_difference_in_means_with_hc1() {
        let y = [1.0, 2.0, 4.0, 3.0, 7.0, 5.0];
        let t = [false, false, false, true, true, true];
        let a = ate_from(&y, &t).unwrap();
        assert_abs_diff_eq!(a.effect, 5.0 - 7.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.control_mean, 7.0 / 3.0, epsilon = 1e-12);
        // HC1 with a dummy: sqrt(n/(n-k) · (Σ_t e²/n_t² + Σ_c e²/n_c²)).
        let ssr_c: f64 = [1.0, 2.0, 4.0].iter().map(|v| (v - 7.0 / 3.0f64).powi(2)).sum();
        let ssr_t: f64 = [3.0, 7.0, 5.0].iter().map(|v| (v - 5.0f64).powi(2)).sum();
        let se = (6.0 / 4.0 * (ssr_c / 9.0 + ssr_t / 9.0)).sqrt();
        assert_abs_diff_eq!(a.se, se, epsilon = 1e-12);
    }

    #[test]
    fn identical_arms_have_zero_effect() {
        let a = ate_from(&[1.0, 2.0, 1.0, 2.0], &[false, false, true, true]).unwrap();
        assert_eq!(a.effect, 0.0);
    }

    fn rec(id: u64, v: f64) -> PanelRecord {
        PanelRecord {
            user_id: id,
            arm: Arm::Control,
            period: 0,
            views: 100,
            shares: 0,
            toxic_views: (v * 100.0) as u64,
            toxic_shares: 0,
            v_t: Some(v),
            s_t: None,
            v_half1: None,
            v_half2: None,
            exited: false,
        }
    }

    #[test]
    fn quantiles_follow_baseline_exposure() {
        let recs: Vec<_> = [0.05, 0.01, 0.04, 0.02, 0.03].iter().enumerate().map(|(i, &v)| rec(i as u64, v)).collect();
        let q = assign_quantiles(&recs).unwrap();
        assert_eq!(q, vec![Some(4), Some(0), Some(3), Some(1), Some(2)]);
        let ties: Vec<_> = (0..10).rev().map(|i| rec(i, 0.1)).collect();
        let q = assign_quantiles(&ties).unwrap();
        // ids 9..0 in input order; id 0 and 1 land in the first quintile.
        assert_eq!(q[9], Some(0));
        assert_eq!(q[0], Some(4));
        assert!(assign_quantiles(&ties[..4]).is_err());
    }

    #[test]
    fn lee_bounds_hand_instance() {
        // Treated retention 0.9, control 1.0: trim 10% of 10 control stayers.
        let control: Vec<f64> = (1..=10).map(f64::from).collect();
        let treated = [4.0, 6.0, 8.0, 5.0, 7.0, 9.0, 3.0, 6.0, 6.0];
        let b = lee_bounds_from(&treated, &control, 0.9, 1.0).unwrap();
        let mt = treated.iter().sum::<f64>() / 9.0;
        assert_abs_diff_eq!(b.trim_share, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(b.lower, mt - 6.0, epsilon = 1e-12); // drop the 1
        assert_abs_diff_eq!(b.upper, mt - 5.0, epsilon = 1e-12); // drop the 10
        let none = lee_bounds_from(&treated, &control, 1.0, 1.0).unwrap();
        assert_eq!((none.lower, none.upper), (none.naive, none.naive));
    }
}
