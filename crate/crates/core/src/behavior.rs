//! Closed-form user optimization and the platform's best response.
//!
//! A user with taste `p` for toxic content, shown a feed whose toxic share is
//! `q`, chooses how many posts to view (`N`), how many to share (`S`) and the
//! toxic fraction of those shares (`s`) to maximize
//!
//! ```text
//! u = βN − α(N−S)² − ηS² − δS[(1−θ)·ln²(s/p) + θ·ln²(s/q)]
//! ```
//!
//! [`utility`] evaluates that objective directly and is the oracle the closed
//! forms are checked against in tests.

use crate::error::{Error, Result};

/// Behavioral constants of the utility function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityParams {
    alpha: f64,
    beta: f64,
    eta: f64,
    delta: f64,
    theta: f64,
    mu: f64,
}

impl UtilityParams {
    pub fn new(alpha: f64, beta: f64, eta: f64, delta: f64, theta: f64, mu: f64) -> Result<Self> {
        let params = Self {
            alpha,
            beta,
            eta,
            delta,
            theta,
            mu,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta", self.eta),
            ("delta", self.delta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParams(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::InvalidParams(format!("mu must be >= 0, got {}", self.mu)));
        }
        // Own-equilibrium point q = p: mismatch term vanishes.
        let n = self.equilibrium_views();
        let s = 2.0 * n * self.alpha / (2.0 * (self.eta + self.alpha));
        if !(n > 0.0 && (0.0..=n).contains(&s)) {
            return Err(Error::InvalidParams(format!(
                "parameters give no interior equilibrium (N = {n}, S = {s})"
            )));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(self.alpha, self.beta, self.eta, self.delta, theta, self.mu)
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        Self::new(self.alpha, self.beta, self.eta, self.delta, self.theta, mu)
    }

    /// Views at q = p: `β(α+η)/(2αη)`.
    pub fn equilibrium_views(&self) -> f64 {
        self.beta * (self.alpha + self.eta) / (2.0 * self.alpha * self.eta)
    }

    /// Shares at q = p: `β/(2η)`.
    pub fn equilibrium_shares(&self) -> f64 {
        self.beta / (2.0 * self.eta)
    }
}

fn check_open_unit(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(Error::Domain(format!("{name} must lie strictly inside (0, 1), got {v}")))
    }
}

/// A user's taste for toxic content.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserTaste {
    p: f64,
    /// Opaque social-group id. Carried through but never enters a closed form.
    pub category: Option<u32>,
}

impl UserTaste {
    pub fn new(p: f64) -> Result<Self> {
        Ok(Self {
            p: check_open_unit("taste p", p)?,
            category: None,
        })
    }

    pub fn with_category(p: f64, category: u32) -> Result<Self> {
        Ok(Self {
            p: check_open_unit("taste p", p)?,
            category: Some(category),
        })
    }

    pub fn value(&self) -> f64 {
        self.p
    }
}

/// Toxic share of the feed assigned to a user.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Exposure(f64);

impl Exposure {
    pub fn new(q: f64) -> Result<Self> {
        check_open_unit("exposure q", q).map(Self)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Raw value of a closed-form count before truncation. Non-positive values
/// mark the region where the user stops using the platform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlaggedCount {
    pub raw: f64,
}

impl FlaggedCount {
    pub fn is_exit(&self) -> bool {
        self.raw <= 0.0
    }

    pub fn truncated(&self) -> f64 {
        self.raw.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorOutcome {
    pub n_views: f64,
    pub n_shares: f64,
    pub share_frac_toxic: f64,
    pub toxic_shares: f64,
    pub toxic_views: f64,
    pub exited: bool,
}

impl BehaviorOutcome {
    /// Toxic fraction of viewed posts, `N^t / N`.
    pub fn view_frac_toxic(&self) -> Option<f64> {
        (self.n_views > 0.0).then(|| self.toxic_views / self.n_views)
    }
}

/// `θ(1−θ)·ln²(q/p)`, the conformity cost per shared post at the optimal `s`.
fn log_mismatch(theta: f64, q: f64, p: f64) -> f64 {
    let l = (q / p).ln();
    theta * (1.0 - theta) * l * l
}

/// Optimal toxic fraction of shares: the weighted geometric mean `q^θ·p^(1−θ)`.
pub fn optimal_share_fraction(q: Exposure, p: UserTaste, theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Domain(format!("theta must lie in [0, 1], got {theta}")));
    }
    Ok(q.0.powf(theta) * p.p.powf(1.0 - theta))
}

/// Optimal number of views. The result is unclamped; callers decide how to
/// treat the exit region.
pub fn optimal_views(params: &UtilityParams, q: Exposure, p: UserTaste) -> FlaggedCount {
    views_given_mismatch(params, log_mismatch(params.theta, q.0, p.p))
}

fn views_given_mismatch(params: &UtilityParams, m: f64) -> FlaggedCount {
    let UtilityParams {
        alpha,
        beta,
        eta,
        delta,
        ..
    } = *params;
    FlaggedCount {
        raw: (beta * (alpha + eta) - delta * alpha * m) / (2.0 * alpha * eta),
    }
}

/// Optimal number of shares given the number of views.
pub fn optimal_shares(
    params: &UtilityParams,
    n_views: f64,
    q: Exposure,
    p: UserTaste,
) -> Result<FlaggedCount> {
    if !(n_views.is_finite() && n_views > 0.0) {
        return Err(Error::Domain(format!("n_views must be > 0, got {n_views}")));
    }
    Ok(shares_given_mismatch(
        params,
        n_views,
        log_mismatch(params.theta, q.0, p.p),
    ))
}

fn shares_given_mismatch(params: &UtilityParams, n_views: f64, m: f64) -> FlaggedCount {
    FlaggedCount {
        raw: (2.0 * n_views * params.alpha - params.delta * m) / (2.0 * (params.eta + params.alpha)),
    }
}

/// The engagement-maximizing assignment is the user's own taste.
pub fn equilibrium_assignment(p: UserTaste) -> Exposure {
    Exposure(p.p)
}

/// The user's objective evaluated at an arbitrary choice `(s, S, N)`.
pub fn utility(
    params: &UtilityParams,
    s_frac: f64,
    shares: f64,
    views: f64,
    q: Exposure,
    p: UserTaste,
) -> Result<f64> {
    check_open_unit("share fraction s", s_frac)?;
    if shares > views {
        return Err(Error::Domain(format!(
            "shares ({shares}) exceed views ({views})"
        )));
    }
    let UtilityParams {
        alpha,
        beta,
        eta,
        delta,
        theta,
        ..
    } = *params;
    let own = (s_frac / p.p).ln();
    let norm = (s_frac / q.0).ln();
    Ok(beta * views
        - alpha * (views - shares).powi(2)
        - eta * shares * shares
        - delta * shares * ((1.0 - theta) * own * own + theta * norm * norm))
}

fn compose(params: &UtilityParams, q: f64, s: f64, m: f64) -> BehaviorOutcome {
    let n = views_given_mismatch(params, m);
    let exited_on_views = n.is_exit();
    let shares = if exited_on_views {
        FlaggedCount { raw: 0.0 }
    } else {
        shares_given_mismatch(params, n.raw, m)
    };
    if exited_on_views || shares.is_exit() {
        return BehaviorOutcome {
            n_views: 0.0,
            n_shares: 0.0,
            share_frac_toxic: s,
            toxic_shares: 0.0,
            toxic_views: 0.0,
            exited: true,
        };
    }
    BehaviorOutcome {
        n_views: n.raw,
        n_shares: shares.raw,
        share_frac_toxic: s,
        toxic_shares: s * shares.raw,
        toxic_views: q * n.raw,
        exited: false,
    }
}

/// Full best response under the log conformity penalty.
///
/// A non-positive view or share count means the user leaves: every count is
/// reported as zero and `exited` is set.
pub fn solve_user(params: &UtilityParams, q: Exposure, p: UserTaste) -> BehaviorOutcome {
    let s = q.0.powf(params.theta) * p.p.powf(1.0 - params.theta);
    compose(params, q.0, s, log_mismatch(params.theta, q.0, p.p))
}

/// Best response when the conformity penalty is quadratic in levels,
/// `(s−p)²` and `(s−q)²`. The optimal fraction becomes the arithmetic mean
/// `θq + (1−θ)p` and the residual mismatch is `θ(1−θ)(q−p)²`.
pub fn solve_user_quadratic(params: &UtilityParams, q: Exposure, p: UserTaste) -> BehaviorOutcome {
    let theta = params.theta;
    let s = theta * q.0 + (1.0 - theta) * p.p;
    let m = theta * (1.0 - theta) * (q.0 - p.p).powi(2);
    compose(params, q.0, s, m)
}

/// Quadratic-penalty objective, the oracle for [`solve_user_quadratic`].
pub fn utility_quadratic(
    params: &UtilityParams,
    s_frac: f64,
    shares: f64,
    views: f64,
    q: Exposure,
    p: UserTaste,
) -> f64 {
    let UtilityParams {
        alpha,
        beta,
        eta,
        delta,
        theta,
        ..
    } = *params;
    beta * views
        - alpha * (views - shares).powi(2)
        - eta * shares * shares
        - delta * shares * ((1.0 - theta) * (s_frac - p.p).powi(2) + theta * (s_frac - q.0).powi(2))
}

/// Comparative statics of the equilibrium with respect to the taste `p` and
/// the average assignment `q̄` imposed by the treatment.
pub mod statics {
    use super::UtilityParams;

    /// Change in exposure when personalization is replaced by the average feed.
    pub fn exposure_effect(p: f64, q_bar: f64) -> f64 {
        q_bar - p
    }

    /// `∂²N/∂p∂q̄ = δθ(1−θ)/(η·p·q̄)`.
    pub fn views_cross_partial(params: &UtilityParams, p: f64, q_bar: f64) -> f64 {
        let th = params.theta();
        params.delta() * th * (1.0 - th) / (params.eta() * p * q_bar)
    }

    /// `∂²s/∂p∂q̄ = θ(1−θ)·q̄^(θ−1)·p^(−θ)`.
    pub fn share_cross_partial(theta: f64, p: f64, q_bar: f64) -> f64 {
        theta * (1.0 - theta) * q_bar.powf(theta - 1.0) * p.powf(-theta)
    }

    /// `∂²(s/q̄)/∂p∂q̄ = −(1−θ)²·q̄^(θ−2)·p^(−θ)`.
    pub fn share_ratio_cross_partial(theta: f64, p: f64, q_bar: f64) -> f64 {
        -(1.0 - theta).powi(2) * q_bar.powf(theta - 2.0) * p.powf(-theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(alpha: f64, beta: f64, eta: f64, delta: f64, theta: f64) -> UtilityParams {
        UtilityParams::new(alpha, beta, eta, delta, theta, 0.0).unwrap()
    }

    fn q(v: f64) -> Exposure {
        Exposure::new(v).unwrap()
    }

    fn p(v: f64) -> UserTaste {
        UserTaste::new(v).unwrap()
    }

    #[test]
    fn share_fraction_examples() {
        assert_abs_diff_eq!(optimal_share_fraction(q(0.3), p(0.3), 0.7).unwrap(), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(optimal_share_fraction(q(0.04), p(0.16), 0.5).unwrap(), 0.08, epsilon = 1e-15);
        assert_abs_diff_eq!(optimal_share_fraction(q(0.9), p(0.1), 0.0).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn boundary_inputs_are_rejected() {
        assert!(Exposure::new(0.0).is_err());
        assert!(Exposure::new(1.0).is_err());
        assert!(UserTaste::new(0.0).is_err());
        assert!(UserTaste::new(f64::NAN).is_err());
        assert!(optimal_share_fraction(q(0.2), p(0.2), 1.5).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(UtilityParams::new(0.0, 1.0, 1.0, 1.0, 0.5, 0.0).is_err());
        assert!(UtilityParams::new(1.0, -1.0, 1.0, 1.0, 0.5, 0.0).is_err());
        assert!(UtilityParams::new(1.0, 1.0, 1.0, 1.0, 1.2, 0.0).is_err());
        assert!(UtilityParams::new(1.0, 1.0, 1.0, 1.0, 0.5, -0.1).is_err());
        assert!(UtilityParams::new(1.0, 1.0, 1.0, 1.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn views_examples() {
        let pr = params(1.0, 2.0, 1.0, 1.0, 0.5);
        assert_abs_diff_eq!(optimal_views(&pr, q(0.2), p(0.2)).raw, 2.0, epsilon = 1e-15);

        let mech = params(1.3, 2.0, 0.7, 3.0, 0.0);
        let expected = 2.0 * (1.3 + 0.7) / (2.0 * 1.3 * 0.7);
        assert_abs_diff_eq!(optimal_views(&mech, q(0.05), p(0.4)).raw, expected, epsilon = 1e-12);

        let pr = params(1.0, 2.0, 1.0, 4.0, 0.5);
        let n = optimal_views(&pr, q(0.05), p(0.25)).raw;
        let ln5 = 5f64.ln();
        assert_abs_diff_eq!(n, 2.0 - 0.5 * ln5 * ln5, epsilon = 1e-12);
        assert_abs_diff_eq!(n, 0.7048, epsilon = 1e-4);
    }

    #[test]
    fn shares_examples() {
        let pr = params(1.0, 2.0, 1.0, 1.0, 0.5);
        assert_abs_diff_eq!(optimal_shares(&pr, 2.0, q(0.1), p(0.1)).unwrap().raw, 1.0, epsilon = 1e-15);

        let mech = params(1.0, 2.0, 1.0, 5.0, 0.0);
        assert_abs_diff_eq!(optimal_shares(&mech, 2.0, q(0.02), p(0.6)).unwrap().raw, 1.0, epsilon = 1e-15);

        let pr = params(1.0, 2.0, 1.0, 4.0, 0.5);
        let n = 2.0 - 0.5 * 5f64.ln().powi(2);
        let s = optimal_shares(&pr, n, q(0.05), p(0.25)).unwrap();
        assert_abs_diff_eq!(s.raw, n / 2.0 - 0.25 * 5f64.ln().powi(2), epsilon = 1e-12);
        // Exact value is -0.29515; the rounded figure agrees at display precision.
        assert_abs_diff_eq!(s.raw, -0.2954, epsilon = 5e-4);
        assert!(s.is_exit());
        assert!(optimal_shares(&pr, 0.0, q(0.05), p(0.25)).is_err());
    }

    #[test]
    fn equilibrium_assignment_is_taste() {
        assert_eq!(equilibrium_assignment(p(0.074)).value(), 0.074);
        assert_eq!(equilibrium_assignment(p(0.5)).value(), 0.5);
    }

    #[test]
    fn views_peak_at_own_taste_on_grid() {
        let pr = params(0.8, 1.7, 1.2, 3.0, 0.4);
        for &taste in &[0.03, 0.11, 0.37, 0.8] {
            let best = (1..1000)
                .map(|i| i as f64 / 1000.0)
                .max_by(|a, b| {
                    let na = optimal_views(&pr, q(*a), p(taste)).raw;
                    let nb = optimal_views(&pr, q(*b), p(taste)).raw;
                    na.partial_cmp(&nb).unwrap()
                })
                .unwrap();
            assert!((best - taste).abs() <= 1e-3, "argmax {best} vs taste {taste}");
        }
    }

    #[test]
    fn solve_user_composes_closed_forms() {
        let pr = params(1.0, 2.0, 1.0, 1.0, 0.5);
        let out = solve_user(&pr, q(0.1), p(0.1));
        assert_abs_diff_eq!(out.n_views, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.n_shares, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.share_frac_toxic, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(out.toxic_shares, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(out.toxic_views, 0.2, epsilon = 1e-12);
        assert!(!out.exited);
    }

    #[test]
    fn solve_user_flags_exit() {
        let pr = params(1.0, 2.0, 1.0, 4.0, 0.5);
        let out = solve_user(&pr, q(0.05), p(0.25));
        assert!(out.exited);
        assert_eq!(out.n_views, 0.0);
        assert_eq!(out.n_shares, 0.0);
        assert_eq!(out.toxic_shares, 0.0);
    }

    #[test]
    fn quadratic_variant_examples() {
        let pr = params(1.0, 2.0, 1.0, 1.0, 0.5);
        assert_abs_diff_eq!(solve_user_quadratic(&pr, q(0.2), p(0.4)).share_frac_toxic, 0.3, epsilon = 1e-15);
        let mech = params(1.0, 2.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(solve_user_quadratic(&mech, q(0.2), p(0.4)).share_frac_toxic, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn mechanical_user_share_fraction_has_zero_elasticity() {
        let base = optimal_share_fraction(q(0.1), p(0.3), 0.0).unwrap();
        let bumped = optimal_share_fraction(q(0.11), p(0.3), 0.0).unwrap();
        let elasticity = ((bumped - base) / base) / (0.01 / 0.1);
        assert_eq!(elasticity, 0.0);
    }

    #[test]
    fn closed_form_is_local_max_of_utility() {
        let pr = params(0.9, 2.2, 1.1, 2.5, 0.3);
        let (qq, pp) = (q(0.12), p(0.2));
        let out = solve_user(&pr, qq, pp);
        let u0 = utility(&pr, out.share_frac_toxic, out.n_shares, out.n_views, qq, pp).unwrap();
        for ds in [-1e-3, 1e-3] {
            let u = utility(&pr, out.share_frac_toxic + ds, out.n_shares, out.n_views, qq, pp).unwrap();
            assert!(u < u0);
        }
        // Central-difference gradient vanishes at the optimum.
        let h = 1e-6;
        let f = |s: f64, sh: f64, n: f64| utility(&pr, s, sh, n, qq, pp).unwrap();
        let (s, sh, n) = (out.share_frac_toxic, out.n_shares, out.n_views);
        let grads = [
            (f(s + h, sh, n) - f(s - h, sh, n)) / (2.0 * h),
            (f(s, sh + h, n) - f(s, sh - h, n)) / (2.0 * h),
            (f(s, sh, n + h) - f(s, sh, n - h)) / (2.0 * h),
        ];
        for g in grads {
            assert!(g.abs() < 1e-6, "gradient component {g}");
        }
    }

    #[test]
    fn near_mechanical_limit_shares_own_taste() {
        // θ, β, η close to zero: the optimal s collapses to p.
        let pr = UtilityParams::new(1.0, 1e-9, 1e-9, 1.0, 1e-12, 0.0).unwrap();
        let s = solve_user(&pr, q(0.7), p(0.2)).share_frac_toxic;
        assert_abs_diff_eq!(s, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn statics_closed_forms_match_finite_differences() {
        let pr = params(1.0, 2.0, 1.0, 4.0, 0.3);
        let (pp, qb) = (0.2, 0.08);
        let h = 1e-4;
        let s = |p: f64, q: f64| q.powf(0.3) * p.powf(0.7);
        let fd = |f: &dyn Fn(f64, f64) -> f64| {
            (f(pp + h, qb + h) - f(pp + h, qb - h) - f(pp - h, qb + h) + f(pp - h, qb - h)) / (4.0 * h * h)
        };
        assert_abs_diff_eq!(fd(&s), statics::share_cross_partial(0.3, pp, qb), epsilon = 1e-6);
        let ratio = |p: f64, q: f64| s(p, q) / q;
        approx::assert_relative_eq!(fd(&ratio), statics::share_ratio_cross_partial(0.3, pp, qb), max_relative = 1e-5);
        let views = |p: f64, q: f64| optimal_views(&pr, Exposure(q), UserTaste { p, category: None }).raw;
        assert_abs_diff_eq!(fd(&views), statics::views_cross_partial(&pr, pp, qb), epsilon = 1e-4);
    }
}
