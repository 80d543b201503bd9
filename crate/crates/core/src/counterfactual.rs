//! Feed-diversification counterfactuals.
//!
//! A policy mixes each targeted user's personalized assignment with the
//! population mean, `q = a·q̄ + (1−a)·p`, and behavior is evaluated under a
//! chosen influence regime. The change in toxic shares is split exactly into
//! an engagement part (views and shares per view) and a behavior part (the
//! toxic share of shares).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::behavior::Exposure;
use crate::error::{Error, Result};
use crate::recommender::csv_err;
use crate::rng::Stream;
use crate::simulator::{self, ArmTotals, FeedPolicy, PanelRecord, SimConfig, UserState};

/// Which users a policy applies to.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetRule {
    All,
    /// Users whose taste strictly exceeds the mean control assignment.
    AboveMean,
    /// Users in the listed taste quintiles (0-based).
    Quantiles(Vec<usize>),
}

impl fmt::Display for TargetRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetRule::All => f.write_str("all"),
            TargetRule::AboveMean => f.write_str("above_mean"),
            TargetRule::Quantiles(q) => {
                let s: Vec<String> = q.iter().map(|k| (k + 1).to_string()).collect();
                write!(f, "quantiles:{}", s.join(","))
            }
        }
    }
}

impl FromStr for TargetRule {
    type Err = Error;

    /// `all`, `above_mean` or `quantiles:4,5` (1-based quintiles).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TargetRule::All),
            "above_mean" => Ok(TargetRule::AboveMean),
            _ => {
                let list = s
                    .strip_prefix("quantiles:")
                    .ok_or_else(|| Error::Config(format!("unknown target rule `{s}`")))?;
                let q = list
                    .split(',')
                    .map(|k| match k.trim().parse::<usize>() {
                        Ok(k @ 1..=5) => Ok(k - 1),
                        _ => Err(Error::Config(format!("bad quintile `{k}` in `{s}`"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TargetRule::Quantiles(q))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub mix_a: f64,
    pub target: TargetRule,
    pub description: String,
}

impl PolicySpec {
    pub fn new(mix_a: f64, target: TargetRule) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix_a) {
            return Err(Error::InvalidParams(format!("mixing weight {mix_a} outside [0, 1]")));
        }
        let description = format!("a={mix_a} target={target}");
        Ok(Self {
            mix_a,
            target,
            description,
        })
    }
}

/// Influence regime under which behavior is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegimeSpec {
    /// θ = 0: sharing ignores the feed.
    Mechanical,
    Estimated(f64),
    /// θ = 1: sharing follows the feed entirely.
    FullyMalleable,
}

impl RegimeSpec {
    pub fn theta(&self) -> f64 {
        match *self {
            RegimeSpec::Mechanical => 0.0,
            RegimeSpec::Estimated(t) => t,
            RegimeSpec::FullyMalleable => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let t = self.theta();
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("regime theta {t} outside [0, 1]")))
        }
    }
}

/// `a·q̄ + (1−a)·q`.
pub fn mixed_assignment(a: f64, q_bar: Exposure, q_user: Exposure) -> Result<Exposure> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain(format!("mixing weight {a} outside [0, 1]")));
    }
    Exposure::new(a * q_bar.value() + (1.0 - a) * q_user.value())
}

/// Mean control assignment probability of the population.
pub fn q_bar(users: &[UserState]) -> Result<f64> {
    let pool = simulator::control_pool(users);
    if pool.is_empty() {
        return Err(Error::InsufficientData("population has no control users".into()));
    }
    Ok(pool.iter().sum::<f64>() / pool.len() as f64)
}

/// Which users the rule targets.
pub fn targeted(users: &[UserState], rule: &TargetRule, q_bar: f64) -> Vec<bool> {
    match rule {
        TargetRule::All => vec![true; users.len()],
        TargetRule::AboveMean => users.iter().map(|u| u.taste.value() > q_bar).collect(),
        TargetRule::Quantiles(qs) => {
            let mut order: Vec<usize> = (0..users.len()).collect();
            order.sort_by(|&a, &b| {
                users[a]
                    .taste
                    .value()
                    .total_cmp(&users[b].taste.value())
                    .then(users[a].id.cmp(&users[b].id))
            });
            let n = users.len().max(1);
            let mut out = vec![false; users.len()];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = qs.contains(&(rank * 5 / n));
            }
            out
        }
    }
}

/// One period of behavior under the policy. Every policy for the same
/// configuration uses the same random streams, so differences between
/// policies are not blurred by independent noise.
pub fn simulate_policy(
    users: &[UserState],
    policy: &PolicySpec,
    regime: RegimeSpec,
    config: &SimConfig,
) -> Result<Vec<PanelRecord>> {
    regime.validate()?;
    let qb = Exposure::new(q_bar(users)?)?;
    let mask = targeted(users, &policy.target, qb.value());
    let q = users
        .iter()
        .zip(&mask)
        .map(|(u, &t)| {
            let own = Exposure::new(u.taste.value())?;
            Ok(if t { mixed_assignment(policy.mix_a, qb, own)?.value() } else { own.value() })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut cfg = config.clone();
    cfg.params = config.params.with_theta(regime.theta())?;
    simulator::run_period_with_stream(users, 1, FeedPolicy::Fixed(&q), &cfg, config.seed, Stream::Policy)
}

/// Log-additive split of the change in toxic shares between two scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionResult {
    pub pct_change_n: f64,
    pub pct_change_share_rate: f64,
    pub pct_change_s_t: f64,
    pub pct_change_toxic_shares: f64,
    /// `Δlog N + Δlog(S/N)`.
    pub engagement: f64,
    /// `Δlog s^t`.
    pub behavior: f64,
    /// `Δlog S^t − engagement − behavior`.
    pub residual: f64,
}

impl DecompositionResult {
    /// Engagement part as a share of the total log change.
    pub fn engagement_share(&self) -> f64 {
        self.engagement / (self.engagement + self.behavior)
    }
}

/// Decompose scenario totals against baseline totals.
pub fn decompose(policy: ArmTotals, baseline: ArmTotals) -> Result<DecompositionResult> {
    for (name, t) in [("policy", policy), ("baseline", baseline)] {
        if !(t.views > 0.0 && t.shares > 0.0 && t.toxic_shares > 0.0) {
            return Err(Error::InsufficientData(format!("{name} totals have an empty cell")));
        }
    }
    let dlog = |f: fn(&ArmTotals) -> f64| (f(&policy) / f(&baseline)).ln();
    let log_n = dlog(|t| t.views);
    let log_rate = dlog(|t| t.shares / t.views);
    let log_s = dlog(|t| t.toxic_shares / t.shares);
    let total = dlog(|t| t.toxic_shares);
    let pct = |x: f64| x.exp_m1();
    Ok(DecompositionResult {
        pct_change_n: pct(log_n),
        pct_change_share_rate: pct(log_rate),
        pct_change_s_t: pct(log_s),
        pct_change_toxic_shares: pct(total),
        engagement: log_n + log_rate,
        behavior: log_s,
        residual: total - (log_n + log_rate + log_s),
    })
}

/// Decomposition over the users selected by `group`, records matched by
/// position.
pub fn model_decomposition(
    policy: &[PanelRecord],
    baseline: &[PanelRecord],
    group: &[bool],
) -> Result<DecompositionResult> {
    if policy.len() != baseline.len() || group.len() != policy.len() {
        return Err(Error::Dimension("scenarios must cover the same users".into()));
    }
    if policy.iter().zip(baseline).any(|(a, b)| a.user_id != b.user_id) {
        return Err(Error::DataContract("scenarios list users in different orders".into()));
    }
    let pick = |recs: &[PanelRecord]| {
        ArmTotals::from_records(recs.iter().zip(group).filter(|(_, &g)| g).map(|(r, _)| r))
    };
    decompose(pick(policy), pick(baseline))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierRow {
    pub a: f64,
    pub total_views: f64,
    pub total_shares: f64,
    pub toxic_shares: f64,
    pub decomposition: DecompositionResult,
}

/// Totals and decomposition over the targeted users for each mixing weight,
/// against the pure-personalization scenario.
pub fn policy_frontier(
    users: &[UserState],
    a_grid: &[f64],
    target: &TargetRule,
    regime: RegimeSpec,
    config: &SimConfig,
) -> Result<Vec<FrontierRow>> {
    let qb = q_bar(users)?;
    let group = targeted(users, target, qb);
    let baseline = simulate_policy(users, &PolicySpec::new(0.0, target.clone())?, regime, config)?;
    a_grid
        .par_iter()
        .map(|&a| {
            let recs = simulate_policy(users, &PolicySpec::new(a, target.clone())?, regime, config)?;
            let totals = ArmTotals::from_records(recs.iter().zip(&group).filter(|(_, &g)| g).map(|(r, _)| r));
            Ok(FrontierRow {
                a,
                total_views: totals.views,
                total_shares: totals.shares,
                toxic_shares: totals.toxic_shares,
                decomposition: model_decomposition(&recs, &baseline, &group)?,
            })
        })
        .collect()
}

pub const FRONTIER_HEADER: [&str; 7] = [
    "a",
    "total_views",
    "total_shares",
    "toxic_shares",
    "pct_N",
    "pct_share_rate",
    "pct_s_t",
];

pub fn write_frontier_csv<W: Write>(w: W, rows: &[FrontierRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FRONTIER_HEADER).map_err(csv_err)?;
    for r in rows {
        let d = &r.decomposition;
        out.write_record([
            r.a.to_string(),
            r.total_views.to_string(),
            r.total_shares.to_string(),
            r.toxic_shares.to_string(),
            d.pct_change_n.to_string(),
            d.pct_change_share_rate.to_string(),
            d.pct_change_s_t.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
