//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [simulation]
//! n_users = 100000
//! taste_dist = gamma:0.04,4,0.0085
//!
//! [params]
//! theta = 0.16
//! ```
//!
//! Every section and key is optional, but anything not listed in the schema
//! is rejected before any work starts.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::behavior::UtilityParams;
use crate::calibration::{CalibrationOptions, NelderMeadOptions};
use crate::counterfactual::{RegimeSpec, TargetRule};
use crate::error::{Error, Result};
use crate::estimation::Specification;
use crate::measurement::DEFAULT_THRESHOLDS;
use crate::simulator::{default_params, AttritionRule, Conformity, SimConfig, TasteDist};

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "simulation",
        &[
            "n_users",
            "treat_frac",
            "days_per_period",
            "posts_per_view_unit",
            "taste_dist",
            "conformity",
            "attrition_floor",
        ],
    ),
    ("params", &["alpha", "beta", "eta", "delta", "theta", "mu"]),
    ("estimation", &["panel", "specification", "groups"]),
    (
        "calibration",
        &[
            "panel",
            "theta",
            "alpha",
            "start_beta",
            "start_eta",
            "start_delta",
            "max_iterations",
            "tolerance",
        ],
    ),
    (
        "counterfactual",
        &["a_grid", "target", "regime", "theta", "n_users", "revenue_per_1000_views"],
    ),
    ("classify", &["scores", "thresholds"]),
];

/// Raw `section -> key -> value` map after schema validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<(String, String), String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| at(format!("key `{key}` appears before any [section]")))?;
            let keys = SCHEMA.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !keys.contains(&key) {
                return Err(at(format!("unknown key `{key}` in [{sec}]")));
            }
            if values.insert((sec.to_string(), key.to_string()), value.to_string()).is_some() {
                return Err(at(format!("duplicate key `{key}` in [{sec}]")));
            }
        }
        Ok(Self { values })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("[{section}] {key} = `{v}`: {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Config(format!("[{section}] {key}: `{x}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Stable text form, hashed into the run manifest.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .map(|((s, k), v)| format!("{s}.{k}={v}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegimeChoice {
    Mechanical,
    Estimated,
    Malleable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualConfig {
    pub a_grid: Vec<f64>,
    pub target: TargetRule,
    pub regime: RegimeChoice,
    /// θ for the estimated regime; the pipeline's estimate when absent.
    pub theta: Option<f64>,
    pub n_users: Option<usize>,
    pub revenue_per_1000_views: Option<f64>,
}

impl CounterfactualConfig {
    pub fn regime(&self, estimated_theta: f64) -> RegimeSpec {
        match self.regime {
            RegimeChoice::Mechanical => RegimeSpec::Mechanical,
            RegimeChoice::Malleable => RegimeSpec::FullyMalleable,
            RegimeChoice::Estimated => RegimeSpec::Estimated(self.theta.unwrap_or(estimated_theta)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Simulation settings; `seed` is filled in from the command line.
    pub sim: SimConfig,
    pub attrition: AttritionRule,
    pub estimation_panel: Option<PathBuf>,
    pub specification: Specification,
    pub groups: usize,
    pub calibration_panel: Option<PathBuf>,
    pub calibration_theta: Option<f64>,
    pub calibration: CalibrationOptions,
    pub counterfactual: CounterfactualConfig,
    pub scores: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    /// Canonical text of the parsed configuration.
    pub canonical: String,
}

impl RunConfig {
    pub fn from_text(text: &str, seed: u64) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?, seed)
    }

    pub fn from_raw(raw: &RawConfig, seed: u64) -> Result<Self> {
        let d = default_params();
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let params = UtilityParams::new(
            raw.or("params", "alpha", d.alpha())?,
            raw.or("params", "beta", d.beta())?,
            raw.or("params", "eta", d.eta())?,
            raw.or("params", "delta", d.delta())?,
            raw.or("params", "theta", d.theta())?,
            raw.or("params", "mu", d.mu())?,
        )
        .map_err(cfg_err)?;
        let mut sim = SimConfig::new(raw.or("simulation", "n_users", 100_000usize)?, params, seed);
        sim.treat_frac = raw.or("simulation", "treat_frac", sim.treat_frac)?;
        sim.days_per_period = raw.or("simulation", "days_per_period", sim.days_per_period)?;
        sim.posts_per_view_unit = raw.or("simulation", "posts_per_view_unit", sim.posts_per_view_unit)?;
        if let Some(t) = raw.get("simulation", "taste_dist") {
            sim.taste_dist = t.parse::<TasteDist>()?;
        }
        sim.conformity = match raw.get("simulation", "conformity") {
            None | Some("log") => Conformity::Log,
            Some("quadratic") => Conformity::Quadratic,
            Some(other) => return Err(Error::Config(format!("unknown conformity `{other}`"))),
        };
        sim.validate().map_err(cfg_err)?;
        let attrition = match raw.parsed::<u64>("simulation", "attrition_floor")? {
            None | Some(0) => AttritionRule::None,
            Some(f) => AttritionRule::ViewsBelow(f),
        };

        let specification = match raw.get("estimation", "specification") {
            None | Some("linear") => Specification::Linear,
            Some("log") => Specification::Log,
            Some(other) => return Err(Error::Config(format!("unknown specification `{other}`"))),
        };

        let defaults = CalibrationOptions::default();
        let nm = NelderMeadOptions::default();
        let calibration = CalibrationOptions {
            alpha: raw.or("calibration", "alpha", defaults.alpha)?,
            start: [
                raw.or("calibration", "start_beta", defaults.start[0])?,
                raw.or("calibration", "start_eta", defaults.start[1])?,
                raw.or("calibration", "start_delta", defaults.start[2])?,
            ],
            nelder_mead: NelderMeadOptions {
                max_iterations: raw.or("calibration", "max_iterations", nm.max_iterations)?,
                tolerance: raw.or("calibration", "tolerance", nm.tolerance)?,
                ..nm
            },
        };
        if calibration.alpha <= 0.0 || calibration.start.iter().any(|v| *v <= 0.0) {
            return Err(Error::Config("calibration alpha and start values must be positive".into()));
        }

        let a_grid = raw
            .list("counterfactual", "a_grid")?
            .unwrap_or_else(|| vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        if a_grid.is_empty() || a_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("a_grid entries must lie in [0, 1]".into()));
        }
        let target = raw.get("counterfactual", "target").unwrap_or("above_mean").parse()?;
        let regime = match raw.get("counterfactual", "regime") {
            None | Some("estimated") => RegimeChoice::Estimated,
            Some("mechanical") => RegimeChoice::Mechanical,
            Some("malleable") => RegimeChoice::Malleable,
            Some(other) => return Err(Error::Config(format!("unknown regime `{other}`"))),
        };
        let theta_ok = |t: Option<f64>, what: &str| -> Result<Option<f64>> {
            match t {
                Some(v) if !(0.0..=1.0).contains(&v) => Err(Error::Config(format!("{what} {v} outside [0, 1]"))),
                other => Ok(other),
            }
        };
        let counterfactual = CounterfactualConfig {
            a_grid,
            target,
            regime,
            theta: theta_ok(raw.parsed("counterfactual", "theta")?, "counterfactual theta")?,
            n_users: raw.parsed("counterfactual", "n_users")?,
            revenue_per_1000_views: raw.parsed("counterfactual", "revenue_per_1000_views")?,
        };

        let thresholds = raw
            .list("classify", "thresholds")?
            .unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
        if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }

        Ok(Self {
            sim,
            attrition,
            estimation_panel: raw.get("estimation", "panel").map(PathBuf::from),
            specification,
            groups: raw.or("estimation", "groups", 0usize)?,
            calibration_panel: raw.get("calibration", "panel").map(PathBuf::from),
            calibration_theta: theta_ok(raw.parsed("calibration", "theta")?, "calibration theta")?,
            calibration,
            counterfactual,
            scores: raw.get("classify", "scores").map(PathBuf::from),
            thresholds,
            canonical: raw.canonical(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = RunConfig::from_text("", 7).unwrap();
        assert_eq!(c.sim.n_users, 100_000);
        assert_eq!(c.sim.seed, 7);
        assert_eq!(c.sim.params, default_params());
        assert_eq!(c.thresholds, DEFAULT_THRESHOLDS.to_vec());
    }

    #[test]
    fn values_are_read() {
        let text = "# demo\n[simulation]\nn_users = 500 # small\ntaste_dist = point:0.1\n[params]\ntheta=0.3\n[counterfactual]\na_grid = 0, 0.5, 1\ntarget = quantiles:5\n";
        let c = RunConfig::from_text(text, 1).unwrap();
        assert_eq!(c.sim.n_users, 500);
        assert_eq!(c.sim.taste_dist, TasteDist::Point(0.1));
        assert_eq!(c.sim.params.theta(), 0.3);
        assert_eq!(c.counterfactual.a_grid, vec![0.0, 0.5, 1.0]);
        assert_eq!(c.counterfactual.target, TargetRule::Quantiles(vec![4]));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        for bad in [
            "[simulation]\nn_user = 5\n",
            "[simulaton]\n",
            "n_users = 5\n",
            "[params]\ntheta = 0.1\ntheta = 0.2\n",
            "[params]\ntheta = 1.5\n",
            "[simulation]\nn_users = many\n",
        ] {
            assert!(matches!(RunConfig::from_text(bad, 0), Err(Error::Config(_))), "{bad}");
        }
    }
}
