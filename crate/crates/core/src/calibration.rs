//! Method of simulated moments for the utility weights given θ.
//!
//! Six moments are matched: the mean toxic share of shares, views and shares
//! of treated users in the intervention period, separately for users below
//! and above the median baseline exposure. Model moments integrate the
//! closed-form best responses against a Gumbel density for exposure.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;

use crate::behavior::{self, Exposure, UserTaste, UtilityParams};
use crate::error::{Error, Result};
use crate::recommender::csv_err;
use crate::rng::{substream, Stream};
use crate::simulator::{Arm, Panel};
use crate::stats;

pub const MOMENT_NAMES: [&str; 6] = [
    "below_s_t",
    "below_views",
    "below_shares",
    "above_s_t",
    "above_views",
    "above_shares",
];

/// `[E[s], E[N], E[S]]` for the below-median group followed by the same
/// three for the above-median group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentVector(pub [f64; 6]);

impl MomentVector {
    pub fn below(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn above(&self) -> [f64; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }

    /// Largest relative deviation from `reference`, over its nonzero entries.
    pub fn max_rel_error(&self, reference: &MomentVector) -> f64 {
        self.0
            .iter()
            .zip(&reference.0)
            .filter(|(_, r)| **r != 0.0)
            .map(|(a, r)| (a / r - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Group means for users already split into below/above. `s` entries are
/// `None` for users with no shares.
fn group_moments(rows: &[(Option<f64>, f64, f64)]) -> Result<[f64; 3]> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("empty moment group".into()));
    }
    let s: Vec<f64> = rows.iter().filter_map(|r| r.0).collect();
    if s.is_empty() {
        return Err(Error::InsufficientData("no user in the group shared anything".into()));
    }
    let n: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let sh: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok([stats::mean(&s), stats::mean(&n), stats::mean(&sh)])
}

/// Empirical moments of treated users in the intervention period. Counts are
/// divided by `posts_per_view_unit` to put them in model units. Users are
/// split at the median of baseline `v_t` (lower half by rank, ties broken by
/// user id); users without baseline views are skipped.
pub fn empirical_moments(panel: &Panel, posts_per_view_unit: f64) -> Result<MomentVector> {
    let mut ranked: Vec<(f64, u64, usize)> = panel
        .baseline
        .iter()
        .enumerate()
        .filter(|(_, r)| r.arm == Arm::Treated)
        .filter_map(|(i, r)| r.v_t.map(|v| (v, r.user_id, i)))
        .collect();
    if ranked.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 treated users with baseline views".into()));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let half = ranked.len() / 2;
    let rows = |range: &[(f64, u64, usize)]| -> Vec<(Option<f64>, f64, f64)> {
        range
            .iter()
            .map(|&(_, _, i)| {
                let r = &panel.intervention[i];
                (
                    r.s_t,
                    r.views as f64 / posts_per_view_unit,
                    r.shares as f64 / posts_per_view_unit,
                )
            })
            .collect()
    };
    let b = group_moments(&rows(&ranked[..half]))?;
    let a = group_moments(&rows(&ranked[half..]))?;
    Ok(MomentVector([b[0], b[1], b[2], a[0], a[1], a[2]]))
}

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Gumbel (maximum) density for exposure, truncated to (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelExposure {
    pub location: f64,
    pub scale: f64,
}

impl GumbelExposure {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !(location.is_finite() && scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParams(format!("bad Gumbel location {location} / scale {scale}")));
        }
        Ok(Self { location, scale })
    }

    /// Match the untruncated mean and variance.
    pub fn from_mean_var(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::InsufficientData(format!("exposure variance {var} must be positive")));
        }
        let scale = (6.0 * var).sqrt() / PI;
        Self::new(mean - EULER_GAMMA * scale, scale)
    }

    /// Fit to baseline exposure of all users. The variance is the covariance
    /// of the two half-sample proportions, which strips out binomial noise.
    pub fn fit(panel: &Panel) -> Result<Self> {
        let v: Vec<f64> = panel.baseline.iter().filter_map(|r| r.v_t).collect();
        let (h1, h2): (Vec<f64>, Vec<f64>) = panel
            .baseline
            .iter()
            .filter_map(|r| Some((r.v_half1?, r.v_half2?)))
            .unzip();
        if v.len() < 2 || h1.len() < 2 {
            return Err(Error::InsufficientData("too few users with baseline views".into()));
        }
        Self::from_mean_var(stats::mean(&v), stats::covariance(&h1, &h2))
    }

    fn cdf_raw(&self, x: f64) -> f64 {
        (-(-(x - self.location) / self.scale).exp()).exp()
    }

    fn pdf_raw(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        (-z - (-z).exp()).exp() / self.scale
    }

    fn mass(&self) -> (f64, f64) {
        (self.cdf_raw(0.0), self.cdf_raw(1.0))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let (f0, f1) = self.mass();
        self.pdf_raw(x) / (f1 - f0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (f0, f1) = self.mass();
        ((self.cdf_raw(x.clamp(0.0, 1.0)) - f0) / (f1 - f0)).clamp(0.0, 1.0)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let (f0, f1) = self.mass();
        let target = f0 + u * (f1 - f0);
        (self.location - self.scale * (-target.ln()).ln()).clamp(0.0, 1.0)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

pub const QUADRATURE_NODES: usize = 256;

/// Everything the model moments depend on besides the utility weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSetup {
    pub theta: f64,
    /// Exposure of treated feeds in the intervention period.
    pub q_bar: f64,
    pub exposure: GumbelExposure,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl MomentSetup {
    pub fn new(theta: f64, q_bar: f64, exposure: GumbelExposure) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidParams(format!("theta {theta} outside [0, 1]")));
        }
        Exposure::new(q_bar)?;
        let (nodes, weights) = gauss_legendre(QUADRATURE_NODES);
        Ok(Self {
            theta,
            q_bar,
            exposure,
            nodes,
            weights,
        })
    }

    /// Setup matching a panel: Gumbel fit to baseline exposure and `q̄` the
    /// mean baseline exposure of control users.
    pub fn from_panel(panel: &Panel, theta: f64) -> Result<Self> {
        let control: Vec<f64> = panel
            .baseline
            .iter()
            .filter(|r| r.arm == Arm::Control)
            .filter_map(|r| r.v_t)
            .collect();
        if control.is_empty() {
            return Err(Error::InsufficientData("no control users with baseline views".into()));
        }
        Self::new(theta, stats::mean(&control), GumbelExposure::fit(panel)?)
    }
}

/// The utility weights being calibrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub delta: f64,
}

impl Weights {
    pub fn params(&self, theta: f64) -> Result<UtilityParams> {
        UtilityParams::new(self.alpha, self.beta, self.eta, self.delta, theta, 0.0)
    }

    pub fn of(params: &UtilityParams) -> Self {
        Self {
            alpha: params.alpha(),
            beta: params.beta(),
            eta: params.eta(),
            delta: params.delta(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            alpha: self.alpha * c,
            beta: self.beta * c,
            eta: self.eta * c,
            delta: self.delta * c,
        }
    }
}

/// Model outcome for a user with taste `p` facing `q̄`: `(s, N, S, stayed)`.
fn point_outcome(params: &UtilityParams, q_bar: f64, p: f64) -> Result<(f64, f64, f64, bool)> {
    let o = behavior::solve_user(params, Exposure::new(q_bar)?, UserTaste::new(p)?);
    Ok((o.share_frac_toxic, o.n_views, o.n_shares, !o.exited && o.n_shares > 0.0))
}

/// Accumulates the conditional means of one group. `s` is averaged over users
/// who share, as in the data.
#[derive(Default)]
struct GroupAcc {
    mass: f64,
    share_mass: f64,
    s: f64,
    n: f64,
    sh: f64,
}

impl GroupAcc {
    fn add(&mut self, w: f64, (s, n, sh, shares): (f64, f64, f64, bool)) {
        self.mass += w;
        self.n += w * n;
        self.sh += w * sh;
        if shares {
            self.share_mass += w;
            self.s += w * s;
        }
    }

    fn finish(&self) -> [f64; 3] {
        let s = if self.share_mass > 0.0 { self.s / self.share_mass } else { 0.0 };
        [s, self.n / self.mass, self.sh / self.mass]
    }
}

/// Model moments by Gauss–Legendre quadrature over each half of the
/// truncated exposure density.
pub fn simulated_moments(weights: &Weights, setup: &MomentSetup) -> Result<MomentVector> {
    let params = weights.params(setup.theta)?;
    let m = setup.exposure.median();
    let mut out = [0.0; 6];
    for (g, (lo, hi)) in [(0.0, m), (m, 1.0)].into_iter().enumerate() {
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut acc = GroupAcc::default();
        for (x, w) in setup.nodes.iter().zip(&setup.weights) {
            let p = mid + half * x;
            let dens = setup.exposure.pdf(p);
            if dens <= 0.0 {
                continue;
            }
            acc.add(w * half * dens, point_outcome(&params, setup.q_bar, p)?);
        }
        out[3 * g..3 * g + 3].copy_from_slice(&acc.finish());
    }
    Ok(MomentVector(out))
}

/// Same moments by Monte Carlo over inverse-CDF draws; the quadrature's
/// reference.
pub fn simulated_moments_mc(weights: &Weights, setup: &MomentSetup, draws: usize, seed: u64) -> Result<MomentVector> {
    let params = weights.params(setup.theta)?;
    let m = setup.exposure.median();
    let mut rng = substream(seed, Stream::Replication, 0);
    let mut groups = [GroupAcc::default(), GroupAcc::default()];
    for _ in 0..draws {
        let u: f64 = rng.random();
        let p = setup.exposure.quantile(u);
        if p <= 0.0 || p >= 1.0 {
            continue;
        }
        groups[usize::from(p >= m)].add(1.0, point_outcome(&params, setup.q_bar, p)?);
    }
    let (b, a) = (groups[0].finish(), groups[1].finish());
    Ok(MomentVector([b[0], b[1], b[2], a[0], a[1], a[2]]))
}

/// Sum of squared relative deviations. Moments whose empirical value is zero
/// are skipped.
pub fn msm_objective(simulated: &MomentVector, empirical: &MomentVector) -> f64 {
    let mut total = 0.0;
    for (i, (s, e)) in simulated.0.iter().zip(&empirical.0).enumerate() {
        if *e == 0.0 {
            log::warn!("empirical moment {} is zero and was dropped", MOMENT_NAMES[i]);
            continue;
        }
        total += (s / e - 1.0).powi(2);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Offset of each initial simplex vertex from `x0` along one axis.
    pub initial_step: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.25,
            tolerance: 1e-8,
            max_iterations: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub best_trace: Vec<f64>,
}

/// Nelder–Mead simplex with reflection 1, expansion 2, contraction 0.5 and
/// shrink 0.5. Stops when both the objective spread and the largest vertex
/// distance from the best vertex drop below the tolerance.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    options: NelderMeadOptions,
) -> Result<NelderMeadResult> {
    let n = x0.len();
    if n == 0 || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("x0 must be a non-empty finite vector".into()));
    }
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += options.initial_step;
        let v = eval(&x);
        simplex.push((x, v));
    }
    let point = |c: &[f64], x: &[f64], t: f64| -> Vec<f64> { c.iter().zip(x).map(|(c, x)| c + t * (x - c)).collect() };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let f_spread = simplex.iter().map(|v| (v.1 - best).abs()).fold(0.0, f64::max);
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.0.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread < options.tolerance && x_spread < options.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v.0[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let second_worst = simplex[n - 1].1;
        let xr = point(&centroid, &worst.0, -1.0);
        let fr = eval(&xr);
        if fr < best {
            let xe = point(&centroid, &worst.0, -2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < second_worst {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = point(&centroid, &xr, 0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = point(&centroid, &worst.0, 0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let x = point(&x_best, &v.0, 0.5);
                    let fx = eval(&x);
                    *v = (x, fx);
                }
            }
        }
        trace.push(simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min));
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Ok(NelderMeadResult {
        x,
        value,
        iterations,
        converged,
        best_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedParams {
    pub weights: Weights,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub empirical: MomentVector,
    pub fitted: MomentVector,
}

/// Calibration options. The utility is unchanged when all four weights are
/// multiplied by the same constant, so `alpha` is held at a normalizing value
/// and the other three are searched in logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub alpha: f64,
    /// Starting values for `(β, η, δ)`.
    pub start: [f64; 3],
    pub nelder_mead: NelderMeadOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            start: [1.0, 1.0, 1.0],
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

/// Fit `(β, η, δ)` to given empirical moments.
pub fn calibrate_to(empirical: &MomentVector, setup: &MomentSetup, options: &CalibrationOptions) -> Result<CalibratedParams> {
    if options.start.iter().any(|v| !(*v > 0.0)) || !(options.alpha > 0.0) {
        return Err(Error::InvalidParams("calibration start values must be positive".into()));
    }
    let weights_at = |x: &[f64]| Weights {
        alpha: options.alpha,
        beta: x[0].exp(),
        eta: x[1].exp(),
        delta: x[2].exp(),
    };
    let objective = |x: &[f64]| match simulated_moments(&weights_at(x), setup) {
        Ok(m) => msm_objective(&m, empirical),
        Err(_) => f64::INFINITY,
    };
    let x0: Vec<f64> = options.start.iter().map(|v| v.ln()).collect();
    let res = nelder_mead(objective, &x0, options.nelder_mead)?;
    let weights = weights_at(&res.x);
    if !res.converged {
        log::warn!("calibration stopped after {} iterations without converging", res.iterations);
    }
    Ok(CalibratedParams {
        weights,
        objective_value: res.value,
        iterations: res.iterations,
        converged: res.converged,
        empirical: *empirical,
        fitted: simulated_moments(&weights, setup)?,
    })
}

/// Calibrate on a panel given θ.
pub fn calibrate(
    panel: &Panel,
    theta: f64,
    posts_per_view_unit: f64,
    options: &CalibrationOptions,
) -> Result<CalibratedParams> {
    let empirical = empirical_moments(panel, posts_per_view_unit)?;
    let setup = MomentSetup::from_panel(panel, theta)?;
    calibrate_to(&empirical, &setup, options)
}

/// Objective along the ray `c·(α, β, η, δ)`; flat when only ratios of the
/// weights are identified.
pub fn scale_profile(fit: &CalibratedParams, setup: &MomentSetup, scales: &[f64]) -> Result<Vec<(f64, f64)>> {
    scales
        .iter()
        .map(|&c| {
            let m = simulated_moments(&fit.weights.scaled(c), setup)?;
            Ok((c, msm_objective(&m, &fit.empirical)))
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 5] = ["item", "value", "empirical", "fitted", "rel_error"];

pub fn write_report_csv<W: Write>(w: W, fit: &CalibratedParams, profile: &[(f64, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER).map_err(csv_err)?;
    let scalar = |name: &str, v: String| [name.to_string(), v, String::new(), String::new(), String::new()];
    let wts = fit.weights;
    for (name, v) in [("alpha", wts.alpha), ("beta", wts.beta), ("eta", wts.eta), ("delta", wts.delta)] {
        out.write_record(scalar(name, v.to_string())).map_err(csv_err)?;
    }
    out.write_record(scalar("objective", fit.objective_value.to_string())).map_err(csv_err)?;
    out.write_record(scalar("iterations", fit.iterations.to_string())).map_err(csv_err)?;
    out.write_record(scalar("converged", u8::from(fit.converged).to_string())).map_err(csv_err)?;
    for (i, name) in MOMENT_NAMES.iter().enumerate() {
        let (e, f) = (fit.empirical.0[i], fit.fitted.0[i]);
        let rel = if e != 0.0 { (f / e - 1.0).to_string() } else { String::new() };
        out.write_record([name.to_string(), String::new(), e.to_string(), f.to_string(), rel])
            .map_err(csv_err)?;
    }
    for (c, obj) in profile {
        out.write_record(scalar(&format!("profile_scale_{c}"), obj.to_string())).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
