//! Per-user per-period aggregates and their CSV form.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::recommender::csv_err;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Treated => "treated",
        }
    }

    pub fn is_treated(self) -> bool {
        self == Arm::Treated
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(Arm::Control),
            "treated" => Ok(Arm::Treated),
            other => Err(Error::DataContract(format!("unknown arm `{other}`"))),
        }
    }
}

/// Observed counts for one user in one period. Proportions are `None` when
/// their denominator is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub user_id: u64,
    pub arm: Arm,
    pub period: u8,
    pub views: u64,
    pub shares: u64,
    pub toxic_views: u64,
    pub toxic_shares: u64,
    pub v_t: Option<f64>,
    pub s_t: Option<f64>,
    pub v_half1: Option<f64>,
    pub v_half2: Option<f64>,
    pub exited: bool,
}

pub(crate) fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl PanelRecord {
    /// A user-period with no activity.
    pub fn exited(user_id: u64, arm: Arm, period: u8) -> Self {
        Self {
            user_id,
            arm,
            period,
            views: 0,
            shares: 0,
            toxic_views: 0,
            toxic_shares: 0,
            v_t: None,
            s_t: None,
            v_half1: None,
            v_half2: None,
            exited: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::DataContract(format!(
                "user {} period {}: {what}",
                self.user_id, self.period
            )))
        };
        if self.period > 1 {
            return bad("period must be 0 or 1");
        }
        if self.toxic_views > self.views || self.toxic_shares > self.shares {
            return bad("toxic count exceeds total");
        }
        if self.v_t.is_some() != (self.views > 0) || self.s_t.is_some() != (self.shares > 0) {
            return bad("proportion present exactly when its denominator is positive");
        }
        for v in [self.v_t, self.s_t, self.v_half1, self.v_half2].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return bad("proportion outside [0, 1]");
            }
        }
        Ok(())
    }
}

/// A two-period experiment panel. `baseline[i]` and `intervention[i]` belong
/// to the same user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Panel {
    pub baseline: Vec<PanelRecord>,
    pub intervention: Vec<PanelRecord>,
}

pub const PANEL_HEADER: [&str; 12] = [
    "user_id",
    "arm",
    "period",
    "views",
    "shares",
    "toxic_views",
    "toxic_shares",
    "v_t",
    "s_t",
    "v_half1",
    "v_half2",
    "exited",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Panel {
    pub fn new(baseline: Vec<PanelRecord>, intervention: Vec<PanelRecord>) -> Result<Self> {
        let panel = Self {
            baseline,
            intervention,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline.len() != self.intervention.len() {
            return Err(Error::DataContract(format!(
                "{} baseline rows but {} intervention rows",
                self.baseline.len(),
                self.intervention.len()
            )));
        }
        for (b, i) in self.baseline.iter().zip(&self.intervention) {
            b.validate()?;
            i.validate()?;
            if b.period != 0 || i.period != 1 {
                return Err(Error::DataContract(format!("user {}: periods out of place", b.user_id)));
            }
            if b.user_id != i.user_id || b.arm != i.arm {
                return Err(Error::DataContract(format!(
                    "user {} has inconsistent id or arm across periods",
                    b.user_id
                )));
            }
        }
        Ok(())
    }

    pub fn arms(&self) -> impl Iterator<Item = Arm> + '_ {
        self.baseline.iter().map(|r| r.arm)
    }

    pub fn n_treated(&self) -> usize {
        self.arms().filter(|a| a.is_treated()).count()
    }

    /// Rows ordered by user, baseline before intervention.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(PANEL_HEADER).map_err(csv_err)?;
        for (b, i) in self.baseline.iter().zip(&self.intervention) {
            for r in [b, i] {
                out.write_record([
                    r.user_id.to_string(),
                    r.arm.to_string(),
                    r.period.to_string(),
                    r.views.to_string(),
                    r.shares.to_string(),
                    r.toxic_views.to_string(),
                    r.toxic_shares.to_string(),
                    fmt_opt(r.v_t),
                    fmt_opt(r.s_t),
                    fmt_opt(r.v_half1),
                    fmt_opt(r.v_half2),
                    u8::from(r.exited).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parse a panel CSV. Every user must appear exactly once in each period.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let header = input.headers().map_err(csv_err)?.clone();
        if header.iter().ne(PANEL_HEADER.iter().copied()) {
            return Err(Error::DataContract(format!(
                "panel header must be `{}`",
                PANEL_HEADER.join(",")
            )));
        }
        let mut rows: [Vec<PanelRecord>; 2] = [Vec::new(), Vec::new()];
        for (line, rec) in input.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let ctx = |col: &str, e: &dyn fmt::Display| {
                Error::DataContract(format!("row {}: column {col}: {e}", line + 2))
            };
            let int = |idx: usize| -> Result<u64> {
                rec[idx].parse::<u64>().map_err(|e| ctx(PANEL_HEADER[idx], &e))
            };
            let opt = |idx: usize| -> Result<Option<f64>> {
                let f = &rec[idx];
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|e| ctx(PANEL_HEADER[idx], &e))
                }
            };
            let period = int(2)?;
            if period > 1 {
                return Err(ctx("period", &"must be 0 or 1"));
            }
            let exited = match &rec[11] {
                "0" => false,
                "1" => true,
                other => return Err(ctx("exited", &format!("expected 0 or 1, got `{other}`"))),
            };
            let record = PanelRecord {
                user_id: int(0)?,
                arm: rec[1].parse()?,
                period: period as u8,
                views: int(3)?,
                shares: int(4)?,
                toxic_views: int(5)?,
                toxic_shares: int(6)?,
                v_t: opt(7)?,
                s_t: opt(8)?,
                v_half1: opt(9)?,
                v_half2: opt(10)?,
                exited,
            };
            rows[period as usize].push(record);
        }
        let [baseline, intervention] = rows;
        let index: HashMap<u64, usize> = intervention
            .iter()
            .enumerate()
            .map(|(i, r)| (r.user_id, i))
            .collect();
        if index.len() != intervention.len() {
            return Err(Error::DataContract("duplicate user in intervention period".into()));
        }
        let mut slots: Vec<Option<PanelRecord>> = intervention.into_iter().map(Some).collect();
        let mut matched = Vec::with_capacity(baseline.len());
        for b in &baseline {
            let slot = index
                .get(&b.user_id)
                .and_then(|&i| slots[i].take())
                .ok_or_else(|| {
                    Error::DataContract(format!("user {} lacks a unique intervention row", b.user_id))
                })?;
            matched.push(slot);
        }
        if slots.iter().any(Option::is_some) {
            return Err(Error::DataContract("intervention rows without a baseline row".into()));
        }
        Panel::new(baseline, matched)
    }
}
