//! Plot-ready long-format tables.

use std::io::Write;

use crate::counterfactual::FrontierRow;
use crate::error::Result;
use crate::recommender::csv_err;
use crate::simulator::{hte_by_quantile, Outcome, Panel, N_QUANTILES};

pub const N_BINS: usize = 20;

pub const QUANTILE_HEADER: [&str; 7] = ["outcome", "quantile", "effect", "se", "control_mean", "n_treated", "n_control"];
pub const BINSCATTER_HEADER: [&str; 5] = ["series", "bin", "n", "x_mean", "y_mean"];
pub const FRONTIER_PLOT_HEADER: [&str; 3] = ["a", "series", "value"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub n: usize,
    pub x_mean: f64,
    pub y_mean: f64,
}

/// Means of `x` and `y` within equal-count bins of `x`. Bin `k` holds the
/// points ranked `[k·n/B, (k+1)·n/B)`; empty bins are skipped.
pub fn binscatter(x: &[f64], y: &[f64], n_bins: usize) -> Vec<Bin> {
    let n = x.len().min(y.len());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    (0..n_bins)
        .filter_map(|k| {
            let idx = &order[k * n / n_bins..(k + 1) * n / n_bins];
            if idx.is_empty() {
                return None;
            }
            let m = idx.len() as f64;
            Some(Bin {
                n: idx.len(),
                x_mean: idx.iter().map(|&i| x[i]).sum::<f64>() / m,
                y_mean: idx.iter().map(|&i| y[i]).sum::<f64>() / m,
            })
        })
        .collect()
}

/// Treatment effects by baseline-exposure quintile, five rows per outcome.
/// Cells that cannot be estimated are written with empty fields; an empty
/// panel gives the header alone.
pub fn write_quantile_table<W: Write>(w: W, panel: &Panel) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(QUANTILE_HEADER).map_err(csv_err)?;
    if !panel.is_empty() {
        for outcome in Outcome::ALL {
            let cells = hte_by_quantile(panel, outcome)?;
            for q in 0..N_QUANTILES {
                let mut row = vec![outcome.name().to_string(), (q + 1).to_string()];
                match cells.get(q).copied().flatten() {
                    Some(c) => row.extend([
                        c.effect.to_string(),
                        c.se.to_string(),
                        c.control_mean.to_string(),
                        c.n_treated.to_string(),
                        c.n_control.to_string(),
                    ]),
                    None => row.extend(std::iter::repeat_n(String::new(), 5)),
                }
                out.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// The two diagnostic scatters over treated users:
/// `delta_s_t_vs_v0` (change in sharing share against baseline exposure) and
/// `delta_shares_vs_baseline_views`.
pub fn panel_binscatters(panel: &Panel) -> Vec<(&'static str, Vec<Bin>)> {
    let treated = || {
        panel
            .baseline
            .iter()
            .zip(&panel.intervention)
            .filter(|(b, _)| b.arm.is_treated())
    };
    let (x1, y1): (Vec<f64>, Vec<f64>) = treated()
        .filter_map(|(b, i)| Some((b.v_t?, i.s_t? - b.s_t?)))
        .unzip();
    let (x2, y2): (Vec<f64>, Vec<f64>) = treated()
        .map(|(b, i)| (b.views as f64, i.shares as f64 - b.shares as f64))
        .unzip();
    vec![
        ("delta_s_t_vs_v0", binscatter(&x1, &y1, N_BINS)),
        ("delta_shares_vs_baseline_views", binscatter(&x2, &y2, N_BINS)),
    ]
}

pub fn write_binscatter<W: Write>(w: W, series: &[(&str, Vec<Bin>)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BINSCATTER_HEADER).map_err(csv_err)?;
    for (name, bins) in series {
        for (k, b) in bins.iter().enumerate() {
            out.write_record([
                name.to_string(),
                (k + 1).to_string(),
                b.n.to_string(),
                b.x_mean.to_string(),
                b.y_mean.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Frontier in long form. `revenue_per_1000_views` adds a `revenue` series.
pub fn write_frontier_plot<W: Write>(w: W, rows: &[FrontierRow], revenue_per_1000_views: Option<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FRONTIER_PLOT_HEADER).map_err(csv_err)?;
    for r in rows {
        let d = &r.decomposition;
        let mut series = vec![
            ("total_views", r.total_views),
            ("total_shares", r.total_shares),
            ("toxic_shares", r.toxic_shares),
            ("pct_N", d.pct_change_n),
            ("pct_share_rate", d.pct_change_share_rate),
            ("pct_s_t", d.pct_change_s_t),
            ("engagement", d.engagement),
            ("behavior", d.behavior),
        ];
        if let Some(price) = revenue_per_1000_views {
            series.push(("revenue", r.total_views / 1000.0 * price));
        }
        for (name, v) in series {
            out.write_record([r.a.to_string(), name.to_string(), v.to_string()]).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn bins_match_groupby() {
        let x: Vec<f64> = (0..103).map(|i| ((i * 37) % 103) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 1.0).collect();
        let bins = binscatter(&x, &y, N_BINS);
        assert_eq!(bins.len(), N_BINS);
        // x is a permutation of 0..103, so the rank of each point is its value.
        let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for (&xi, &yi) in x.iter().zip(&y) {
            let rank = xi as usize;
            let k = (0..N_BINS).find(|k| rank < (k + 1) * 103 / N_BINS).unwrap();
            groups.entry(k).or_default().push((xi, yi));
        }
        for (b, (_, pts)) in bins.iter().zip(groups) {
            let m = pts.len() as f64;
            assert_eq!(b.n, pts.len());
            assert!((b.x_mean - pts.iter().map(|p| p.0).sum::<f64>() / m).abs() < 1e-12);
            assert!((b.y_mean - pts.iter().map(|p| p.1).sum::<f64>() / m).abs() < 1e-12);
        }
        assert_eq!(bins.iter().map(|b| b.n).sum::<usize>(), 103);
    }

    #[test]
    fn few_points_fill_fewer_bins() {
        assert_eq!(binscatter(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], N_BINS).len(), 3);
        assert!(binscatter(&[], &[], N_BINS).is_empty());
    }

    #[test]
    fn empty_panel_writes_headers_only() {
        let panel = Panel::new(vec![], vec![]).unwrap();
        let mut q = Vec::new();
        write_quantile_table(&mut q, &panel).unwrap();
        assert_eq!(String::from_utf8(q).unwrap(), QUANTILE_HEADER.join(",") + "\n");
        let mut b = Vec::new();
        write_binscatter(&mut b, &panel_binscatters(&panel)).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), BINSCATTER_HEADER.join(",") + "\n");
    }
}
