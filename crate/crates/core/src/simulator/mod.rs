//! Two-period experiment simulator.
//!
//! Period 0 is the baseline: every user sees a personalized feed (`q = p`).
//! In period 1 treated users instead get a randomized feed whose toxic share
//! is drawn each day from the control users' assignment probabilities.
//! Continuous closed-form behavior is converted to integer counts and
//! binomially thinned, which is the measurement error the estimators have to
//! deal with.

mod effects;
mod panel;

pub use effects::*;
pub use panel::{Arm, Panel, PanelRecord, PANEL_HEADER};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, Hypergeometric, StandardNormal};
use rayon::prelude::*;

use crate::behavior::{self, Exposure, UserTaste, UtilityParams};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream, StreamRng};
use panel::ratio;

/// Bounds applied to sampled tastes so every logarithm stays finite.
pub const TASTE_MIN: f64 = 0.005;
pub const TASTE_MAX: f64 = 0.6;

/// Guard for share fractions after the multiplicative shock.
const SHARE_FRAC_GUARD: f64 = 1e-9;

/// Population distribution of the toxic taste `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TasteDist {
    /// Every user has the same taste.
    Point(f64),
    /// `floor + Gamma(shape, scale)`, clamped to `[TASTE_MIN, TASTE_MAX]`.
    ShiftedGamma { floor: f64, shape: f64, scale: f64 },
    /// `Beta(a, b)` rescaled linearly onto `[lo, hi]`.
    ScaledBeta { a: f64, b: f64, lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for TasteDist {
    /// Mean 0.074 with a right tail.
    fn default() -> Self {
        TasteDist::ShiftedGamma {
            floor: 0.04,
            shape: 4.0,
            scale: 0.0085,
        }
    }
}

impl TasteDist {
    fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        let ok = match *self {
            TasteDist::Point(p) => open(p),
            TasteDist::ShiftedGamma { floor, shape, scale } => {
                floor >= 0.0 && floor < TASTE_MAX && shape > 0.0 && scale > 0.0
            }
            TasteDist::ScaledBeta { a, b, lo, hi } => a > 0.0 && b > 0.0 && open(lo) && open(hi) && lo < hi,
            TasteDist::Uniform { lo, hi } => open(lo) && open(hi) && lo < hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid taste distribution {self}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TasteDist::Point(p) => p,
            TasteDist::ShiftedGamma { floor, shape, scale } => {
                let g: f64 = Gamma::new(shape, scale).expect("validated").sample(rng);
                (floor + g).clamp(TASTE_MIN, TASTE_MAX)
            }
            TasteDist::ScaledBeta { a, b, lo, hi } => {
                let x: f64 = Beta::new(a, b).expect("validated").sample(rng);
                lo + (hi - lo) * x
            }
            TasteDist::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }

    /// Mean before any clamping.
    pub fn nominal_mean(&self) -> f64 {
        match *self {
            TasteDist::Point(p) => p,
            TasteDist::ShiftedGamma { floor, shape, scale } => floor + shape * scale,
            TasteDist::ScaledBeta { a, b, lo, hi } => lo + (hi - lo) * a / (a + b),
            TasteDist::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }
}

impl fmt::Display for TasteDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TasteDist::Point(p) => write!(f, "point:{p}"),
            TasteDist::ShiftedGamma { floor, shape, scale } => write!(f, "gamma:{floor},{shape},{scale}"),
            TasteDist::ScaledBeta { a, b, lo, hi } => write!(f, "beta:{a},{b},{lo},{hi}"),
            TasteDist::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
        }
    }
}

impl FromStr for TasteDist {
    type Err = Error;

    /// `point:P`, `gamma:FLOOR,SHAPE,SCALE`, `beta:A,B,LO,HI` or `uniform:LO,HI`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse taste distribution `{s}`"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let dist = match (kind.trim(), nums.as_slice()) {
            ("point", &[p]) => TasteDist::Point(p),
            ("gamma", &[floor, shape, scale]) => TasteDist::ShiftedGamma { floor, shape, scale },
            ("beta", &[a, b, lo, hi]) => TasteDist::ScaledBeta { a, b, lo, hi },
            ("uniform", &[lo, hi]) => TasteDist::Uniform { lo, hi },
            _ => return Err(bad()),
        };
        dist.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(dist)
    }
}

/// Which closed form maps exposure to behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conformity {
    /// Penalty in log ratios; `s = q^θ p^(1−θ)`.
    #[default]
    Log,
    /// Penalty in levels; `s = θq + (1−θ)p`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_users: usize,
    pub treat_frac: f64,
    pub days_per_period: usize,
    pub params: UtilityParams,
    pub taste_dist: TasteDist,
    /// Posts per unit of the continuous view count `N`.
    pub posts_per_view_unit: f64,
    pub conformity: Conformity,
    /// Optional second influence weight for high-taste users.
    pub theta_split: Option<ThetaSplit>,
    pub seed: u64,
}

/// Users whose taste exceeds `taste_cutoff` behave with `theta_high` instead
/// of the configured θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaSplit {
    pub taste_cutoff: f64,
    pub theta_high: f64,
}

impl SimConfig {
    pub fn new(n_users: usize, params: UtilityParams, seed: u64) -> Self {
        Self {
            n_users,
            treat_frac: 0.5,
            days_per_period: 30,
            params,
            taste_dist: TasteDist::default(),
            posts_per_view_unit: 120.0,
            conformity: Conformity::Log,
            theta_split: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::InvalidParams("need at least 2 users".into()));
        }
        if self.n_users < 100 {
            log::warn!("{} users is too few for meaningful tests", self.n_users);
        }
        if !(self.treat_frac > 0.0 && self.treat_frac < 1.0) {
            return Err(Error::InvalidParams(format!("treat_frac must lie in (0, 1), got {}", self.treat_frac)));
        }
        if self.days_per_period == 0 {
            return Err(Error::InvalidParams("days_per_period must be positive".into()));
        }
        if !(self.posts_per_view_unit.is_finite() && self.posts_per_view_unit > 0.0) {
            return Err(Error::InvalidParams("posts_per_view_unit must be positive".into()));
        }
        if let Some(split) = self.theta_split {
            self.params.with_theta(split.theta_high)?;
        }
        self.taste_dist.validate()
    }
}

/// Default behavioral constants used throughout the toolkit.
pub fn default_params() -> UtilityParams {
    UtilityParams::new(1.0, 2.0, 1.0, 16.0, 0.16, 0.1).expect("defaults are valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserState {
    pub id: u64,
    pub taste: UserTaste,
    pub arm: Arm,
}

/// Draw tastes and arms. User `i` uses its own streams, so the population
/// does not depend on scheduling.
pub fn draw_population(config: &SimConfig) -> Result<Vec<UserState>> {
    config.validate()?;
    (0..config.n_users as u64)
        .into_par_iter()
        .map(|id| {
            let p = config.taste_dist.sample(&mut substream(config.seed, Stream::Population, id));
            let treated = substream(config.seed, Stream::Assignment, id).random::<f64>() < config.treat_frac;
            Ok(UserState {
                id,
                taste: UserTaste::new(p)?,
                arm: if treated { Arm::Treated } else { Arm::Control },
            })
        })
        .collect()
}

/// How each user's feed is set in a period.
#[derive(Debug, Clone, Copy)]
pub enum FeedPolicy<'a> {
    /// Everyone sees `q = p`.
    Personalized,
    /// Treated users draw a toxic share uniformly from `pool` each day; the
    /// period exposure is the average. Control users stay personalized.
    RandomizedTreatment { pool: &'a [f64] },
    /// Exposure given per user, aligned with the population.
    Fixed(&'a [f64]),
}

/// Control-arm assignment probabilities, the pool treated feeds draw from.
pub fn control_pool(users: &[UserState]) -> Vec<f64> {
    users
        .iter()
        .filter(|u| u.arm == Arm::Control)
        .map(|u| behavior::equilibrium_assignment(u.taste).value())
        .collect()
}

fn period_stream(period: u8) -> Stream {
    if period == 0 {
        Stream::Period0
    } else {
        Stream::Period1
    }
}

/// Simulate one period for every user.
pub fn run_period(
    users: &[UserState],
    period: u8,
    policy: FeedPolicy<'_>,
    config: &SimConfig,
) -> Result<Vec<PanelRecord>> {
    run_period_with_stream(users, period, policy, config, config.seed, period_stream(period))
}

pub(crate) fn run_period_with_stream(
    users: &[UserState],
    period: u8,
    policy: FeedPolicy<'_>,
    config: &SimConfig,
    seed: u64,
    stream: Stream,
) -> Result<Vec<PanelRecord>> {
    config.validate()?;
    if let FeedPolicy::Fixed(q) = policy {
        if q.len() != users.len() {
            return Err(Error::Dimension(format!("{} exposures for {} users", q.len(), users.len())));
        }
    }
    if let FeedPolicy::RandomizedTreatment { pool } = policy {
        if pool.is_empty() {
            return Err(Error::InsufficientData("empty control pool".into()));
        }
    }
    users
        .par_iter()
        .enumerate()
        .map(|(idx, user)| {
            let mut rng = substream(seed, stream, user.id);
            let p = user.taste.value();
            let q = match policy {
                FeedPolicy::Personalized => p,
                FeedPolicy::RandomizedTreatment { pool } if user.arm.is_treated() => {
                    let total: f64 = (0..config.days_per_period)
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .sum();
                    total / config.days_per_period as f64
                }
                FeedPolicy::RandomizedTreatment { .. } => p,
                FeedPolicy::Fixed(qs) => qs[idx],
            };
            simulate_user_period(user, q, period, config, &mut rng)
        })
        .collect()
}

/// Behavior and counts of one user facing exposure `q`.
fn simulate_user_period(
    user: &UserState,
    q: f64,
    period: u8,
    config: &SimConfig,
    rng: &mut StreamRng,
) -> Result<PanelRecord> {
    let exposure = Exposure::new(q)?;
    let params = match config.theta_split {
        Some(split) if user.taste.value() > split.taste_cutoff => config.params.with_theta(split.theta_high)?,
        _ => config.params,
    };
    let outcome = match config.conformity {
        Conformity::Log => behavior::solve_user(&params, exposure, user.taste),
        Conformity::Quadratic => behavior::solve_user_quadratic(&params, exposure, user.taste),
    };
    // The shock is drawn even for leavers so that stream positions do not
    // depend on the outcome.
    let w: f64 = StandardNormal.sample(rng);
    if outcome.exited {
        return Ok(PanelRecord::exited(user.id, user.arm, period));
    }
    let ppu = config.posts_per_view_unit;
    let views = (outcome.n_views * ppu).round() as u64;
    let shares = ((outcome.n_shares * ppu).round() as u64).min(views);
    // Marked clamp site: the shocked fraction must stay a probability.
    let s = (outcome.share_frac_toxic * (config.params.mu() * w).exp())
        .clamp(SHARE_FRAC_GUARD, 1.0 - SHARE_FRAC_GUARD);
    // Shares are drawn before views: with common random numbers a change in
    // exposure alone then leaves the share draws untouched.
    let toxic_shares = binomial(rng, shares, s);
    let toxic_views = binomial(rng, views, q);
    // Split the view events in random order: the first half holds
    // ceil(views/2) of them.
    let first = views.div_ceil(2);
    let toxic_first = if views == 0 {
        0
    } else {
        Hypergeometric::new(views, toxic_views, first)
            .map_err(|e| Error::Domain(format!("half split: {e}")))?
            .sample(rng)
    };
    Ok(PanelRecord {
        user_id: user.id,
        arm: user.arm,
        period,
        views,
        shares,
        toxic_views,
        toxic_shares,
        v_t: ratio(toxic_views, views),
        s_t: ratio(toxic_shares, shares),
        v_half1: ratio(toxic_first, first),
        v_half2: ratio(toxic_views - toxic_first, views - first),
        exited: views == 0,
    })
}

fn binomial(rng: &mut StreamRng, n: u64, p: f64) -> u64 {
    if n == 0 {
        return 0;
    }
    Binomial::new(n, p).expect("probability in [0, 1]").sample(rng)
}

/// Population plus both periods of the randomized experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub users: Vec<UserState>,
    pub panel: Panel,
    /// Mean control assignment probability, the treated feeds' expected
    /// toxic share.
    pub q_bar: f64,
}

pub fn simulate_experiment(config: &SimConfig) -> Result<Experiment> {
    let users = draw_population(config)?;
    let pool = control_pool(&users);
    if pool.is_empty() || pool.len() == users.len() {
        return Err(Error::InsufficientData("both arms need at least one user".into()));
    }
    let q_bar = pool.iter().sum::<f64>() / pool.len() as f64;
    let baseline = run_period(&users, 0, FeedPolicy::Personalized, config)?;
    let intervention = run_period(&users, 1, FeedPolicy::RandomizedTreatment { pool: &pool }, config)?;
    Ok(Experiment {
        users,
        panel: Panel::new(baseline, intervention)?,
        q_bar,
    })
}
