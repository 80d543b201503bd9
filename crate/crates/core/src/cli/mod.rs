//! Batch command-line front end.

pub mod plot;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::calibration::{self, CalibratedParams, MomentSetup, Weights, MOMENT_NAMES};
use crate::config::RunConfig;
use crate::counterfactual::{self, FrontierRow};
use crate::error::{Error, Result};
use crate::estimation::{self, IvDiagnostics, ThetaEstimate};
use crate::measurement;
use crate::simulator::{self, Panel};

#[derive(Debug, Parser)]
#[command(name = "feedsim", version, about = "Recommender-influence simulation and estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file (`[section]` headers and `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Required by every command that draws random numbers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "feedsim-out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the two-period experiment and write the panel.
    Simulate,
    /// Estimate θ from a panel.
    Estimate,
    /// Fit the utility weights to panel moments.
    Calibrate,
    /// Trace the policy frontier.
    Counterfactual,
    /// Threshold toxicity scores.
    Classify,
    /// Simulate, estimate, calibrate and run counterfactuals in one go.
    FullPipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Calibrate => "calibrate",
            Command::Counterfactual => "counterfactual",
            Command::Classify => "classify",
            Command::FullPipeline => "full-pipeline",
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_DATA_CONTRACT: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParams(_) => EXIT_CONFIG,
        Error::NonConvergence(_) => EXIT_NON_CONVERGENCE,
        Error::DataContract(_) | Error::InsufficientData(_) => EXIT_DATA_CONTRACT,
        Error::Domain(_) | Error::Dimension(_) | Error::Io(_) => EXIT_FAILURE,
    }
}

/// Parse `argv` (program name first), run the command and return the exit
/// code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("feedsim {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Files written by the current run; removed again if the run fails.
struct Outputs {
    dir: PathBuf,
    force: bool,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
        }
        let file = File::create(&path)?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    fn remove_all(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

/// Flat `key=value` lines, in insertion order.
#[derive(Default)]
struct KeyValues(String);

impl KeyValues {
    fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.0, "{key}={value}");
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let config_text = match &cli.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg = RunConfig::from_text(&config_text, cli.seed.unwrap_or(0))?;
    if needs_seed(cli.command, &cfg) && cli.seed.is_none() {
        return Err(Error::Config(format!("`{}` draws random numbers and needs --seed", cli.command.name())));
    }
    fs::create_dir_all(&cli.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut out = Outputs {
        dir: cli.out.clone(),
        force: cli.force,
        written: Vec::new(),
    };
    let mut manifest = KeyValues::default();
    manifest.push("command", cli.command.name());
    manifest.push("version", env!("CARGO_PKG_VERSION"));
    manifest.push("seed", cli.seed.map_or_else(|| "none".to_string(), |s| s.to_string()));
    manifest.push("config_path", cli.config.as_deref().map_or_else(|| "none".into(), |p| p.display().to_string()));
    manifest.push("config_sha256", hex(&Sha256::digest(config_text.as_bytes())));
    manifest.push("config_canonical_sha256", hex(&Sha256::digest(cfg.canonical.as_bytes())));
    manifest.push("workers", cli.workers);

    let result = pool.install(|| match cli.command {
        Command::Simulate => cmd_simulate(&cfg, &mut out, &mut manifest),
        Command::Estimate => cmd_estimate(&cfg, &mut out, &mut manifest).map(|_| ()),
        Command::Calibrate => cmd_calibrate(&cfg, &mut out, &mut manifest),
        Command::Counterfactual => cmd_counterfactual(&cfg, &mut out, &mut manifest),
        Command::Classify => cmd_classify(&cfg, &mut out, &mut manifest),
        Command::FullPipeline => cmd_full_pipeline(&cfg, &mut out, &mut manifest),
    });
    let result = result.and_then(|()| {
        manifest.push("outputs", out.names().join(","));
        manifest.push("wall_time_s", format!("{:.3}", started.elapsed().as_secs_f64()));
        let text = std::mem::take(&mut manifest.0);
        out.write_with("manifest.txt", |w| Ok(w.write_all(text.as_bytes())?))
    });
    if result.is_err() {
        out.remove_all();
    }
    result
}

fn needs_seed(command: Command, cfg: &RunConfig) -> bool {
    match command {
        Command::Classify => false,
        Command::Estimate => cfg.estimation_panel.is_none(),
        Command::Calibrate => cfg.calibration_panel.is_none(),
        _ => true,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn simulate_panel(cfg: &RunConfig) -> Result<Panel> {
    let exp = simulator::simulate_experiment(&cfg.sim)?;
    Ok(simulator::simulate_attrition(&exp.panel, cfg.attrition))
}

fn load_panel(path: &Path) -> Result<Panel> {
    let file = File::open(path).map_err(|e| Error::DataContract(format!("cannot open panel {}: {e}", path.display())))?;
    Panel::read_csv(std::io::BufReader::new(file))
}

fn panel_for(path: Option<&Path>, cfg: &RunConfig, manifest: &mut KeyValues) -> Result<Panel> {
    match path {
        Some(p) => {
            manifest.push("panel", p.display());
            load_panel(p)
        }
        None => {
            manifest.push("panel", "simulated");
            simulate_panel(cfg)
        }
    }
}

fn cmd_simulate(cfg: &RunConfig, out: &mut Outputs, manifest: &mut KeyValues) -> Result<()> {
    let panel = simulate_panel(cfg)?;
    write_panel_outputs(&panel, out)?;
    manifest.push("n_users", panel.len());
    manifest.push("n_treated", panel.n_treated());
    Ok(())
}

fn write_panel_outputs(panel: &Panel, out: &mut Outputs) -> Result<()> {
    out.write_with("panel.csv", |w| panel.write_csv(w))?;
    out.write_with("quantile_effects.csv", |w| plot::write_quantile_table(w, panel))
}

struct EstimateOutput {
    estimates: Vec<ThetaEstimate>,
    diagnostics: IvDiagnostics,
}

impl EstimateOutput {
    fn iv(&self) -> &ThetaEstimate {
        &self.estimates[1]
    }
}

fn cmd_estimate(cfg: &RunConfig, out: &mut Outputs, manifest: &mut KeyValues) -> Result<EstimateOutput> {
    let panel = panel_for(cfg.estimation_panel.as_deref(), cfg, manifest)?;
    estimate_panel(&panel, cfg, out)
}

fn estimate_panel(panel: &Panel, cfg: &RunConfig, out: &mut Outputs) -> Result<EstimateOutput> {
    let (estimates, diagnostics) = estimation::estimate_all(panel, cfg.specification)?;
    out.write_with("results.csv", |w| estimation::write_results_csv(w, &estimates))?;

    let mut diag = KeyValues::default();
    diag.push("first_stage_coef", diagnostics.first_stage_coef);
    diag.push("first_stage_F", diagnostics.first_stage_f);
    diag.push("reliability_ratio", diagnostics.reliability_ratio);
    diag.push("weak_instrument", diagnostics.weak_instrument);
    match estimation::steady_state_check(panel) {
        Ok(ss) => {
            diag.push("steady_state_delta_raw", ss.delta_raw);
            diag.push("steady_state_delta", ss.delta);
            diag.push("steady_state_se", ss.se);
            diag.push("steady_state_p_value", ss.p_value);
        }
        Err(e) => log::warn!("steady-state check skipped: {e}"),
    }
    if cfg.groups > 0 {
        let groups = estimation::exposure_groups(panel, cfg.groups)?;
        let by_group = estimation::estimate_theta_by_group(panel, &groups)?;
        for (g, est) in by_group.estimates.iter().enumerate() {
            if let Some(e) = est {
                diag.push(&format!("group_{}_theta_hat", g + 1), e.theta_hat);
                diag.push(&format!("group_{}_se", g + 1), e.se);
            }
        }
        diag.push("group_wald", by_group.wald);
        diag.push("group_df", by_group.df);
        diag.push("group_p_value", by_group.p_value);
    }
    let text = diag.0;
    out.write_with("diagnostics.txt", |w| Ok(w.write_all(text.as_bytes())?))?;
    out.write_with("binscatter.csv", |w| plot::write_binscatter(w, &plot::panel_binscatters(panel)))?;
    Ok(EstimateOutput { estimates, diagnostics })
}

fn cmd_calibrate(cfg: &RunConfig, out: &mut Outputs, manifest: &mut KeyValues) -> Result<()> {
    let panel = panel_for(cfg.calibration_panel.as_deref(), cfg, manifest)?;
    let theta = match cfg.calibration_theta {
        Some(t) => t,
        None => estimation::estimate_theta_iv(&panel)?.0.theta_hat.clamp(0.0, 1.0),
    };
    manifest.push("calibration_theta", theta);
    let (fit, _) = calibrate_panel(&panel, theta, cfg, out)?;
    manifest.push("objective", fit.objective_value);
    manifest.push("iterations", fit.iterations);
    Ok(())
}

fn calibrate_panel(panel: &Panel, theta: f64, cfg: &RunConfig, out: &mut Outputs) -> Result<(CalibratedParams, MomentSetup)> {
    let empirical = calibration::empirical_moments(panel, cfg.sim.posts_per_view_unit)?;
    let setup = MomentSetup::from_panel(panel, theta)?;
    let fit = calibration::calibrate_to(&empirical, &setup, &cfg.calibration)?;
    if !fit.converged {
        let w = fit.weights;
        return Err(Error::NonConvergence(format!(
            "Nelder-Mead stopped after {} iterations (objective {:.3e}, beta {:.4}, eta {:.4}, delta {:.4})",
            fit.iterations, fit.objective_value, w.beta, w.eta, w.delta
        )));
    }
    let profile = calibration::scale_profile(&fit, &setup, &[0.5, 1.0, 2.0])?;
    out.write_with("calibration.csv", |w| calibration::write_report_csv(w, &fit, &profile))?;
    Ok((fit, setup))
}

fn frontier_for(cfg: &RunConfig, theta: f64, out: &mut Outputs, manifest: &mut KeyValues) -> Result<Vec<FrontierRow>> {
    let cf = &cfg.counterfactual;
    let mut sim = cfg.sim.clone();
    if let Some(n) = cf.n_users {
        sim.n_users = n;
    }
    let regime = cf.regime(theta);
    manifest.push("counterfactual_theta", regime.theta());
    let users = simulator::draw_population(&sim)?;
    let rows = counterfactual::policy_frontier(&users, &cf.a_grid, &cf.target, regime, &sim)?;
    out.write_with("frontier.csv", |w| counterfactual::write_frontier_csv(w, &rows))?;
    out.write_with("frontier_plot.csv", |w| plot::write_frontier_plot(w, &rows, cf.revenue_per_1000_views))?;
    Ok(rows)
}

fn cmd_counterfactual(cfg: &RunConfig, out: &mut Outputs, manifest: &mut KeyValues) -> Result<()> {
    frontier_for(cfg, cfg.sim.params.theta(), out, manifest)?;
    let panel = simulate_panel(cfg)?;
    out.write_with("binscatter.csv", |w| plot::write_binscatter(w, &plot::panel_binscatters(&panel)))
}

fn cmd_classify(cfg: &RunConfig, out: &mut Outputs, manifest: &mut KeyValues) -> Result<()> {
    let path = cfg
        .scores
        .as_deref()
        .ok_or_else(|| Error::Config("classify needs `scores` in [classify]".into()))?;
    let file = File::open(path).map_err(|e| Error::DataContract(format!("cannot open scores {}: {e}", path.display())))?;
    let items = measurement::read_scores_csv(std::io::BufReader::new(file))?;
    let (best, sweep) = measurement::select_threshold(&items, &cfg.thresholds)?;
    out.write_with("threshold_report.csv", |w| measurement::write_report_csv(w, &sweep))?;
    manifest.push("selected_threshold", best.threshold);
    manifest.push("selected_recall", best.recall);
    manifest.push("selected_f1", best.f1);
    Ok(())
}

fn cmd_full_pipeline(cfg: &RunConfig, out: &mut Outputs, manifest: &mut KeyValues) -> Result<()> {
    let truth = cfg.sim.params;
    let panel = simulate_panel(cfg)?;
    write_panel_outputs(&panel, out)?;
    let est = estimate_panel(&panel, cfg, out)?;
    let iv = *est.iv();
    let theta_hat = iv.theta_hat.clamp(0.0, 1.0);
    let (fit, setup) = calibrate_panel(&panel, theta_hat, cfg, out)?;
    let rows = frontier_for(cfg, theta_hat, out, manifest)?;

    let mut s = KeyValues::default();
    let (lo, hi) = iv.ci95();
    s.push("theta_true", truth.theta());
    s.push("theta_iv", iv.theta_hat);
    s.push("theta_iv_se", iv.se);
    s.push("theta_iv_ci_low", lo);
    s.push("theta_iv_ci_high", hi);
    s.push("theta_true_in_ci", iv.covers(truth.theta()));
    s.push("first_stage_F", est.diagnostics.first_stage_f);
    for e in &est.estimates {
        s.push(&format!("theta_{}", e.method.name()), e.theta_hat);
    }
    // Only ratios of the weights are identified, so both sides are put on
    // the calibrated alpha.
    let true_w = Weights::of(&truth).scaled(fit.weights.alpha / truth.alpha());
    for (name, fitted, t) in [
        ("beta", fit.weights.beta, true_w.beta),
        ("eta", fit.weights.eta, true_w.eta),
        ("delta", fit.weights.delta, true_w.delta),
    ] {
        s.push(&format!("{name}_fitted"), fitted);
        s.push(&format!("{name}_true"), t);
    }
    let at_truth = calibration::simulated_moments(&true_w, &setup)?;
    for (i, name) in MOMENT_NAMES.iter().enumerate() {
        s.push(&format!("moment_{name}_empirical"), fit.empirical.0[i]);
        s.push(&format!("moment_{name}_fitted"), fit.fitted.0[i]);
        s.push(&format!("moment_{name}_at_truth"), at_truth.0[i]);
    }
    s.push("moment_max_rel_error", fit.fitted.max_rel_error(&fit.empirical));
    s.push("calibration_iterations", fit.iterations);
    if let Some(last) = rows.last() {
        s.push("frontier_max_a", last.a);
        s.push("frontier_engagement_share", last.decomposition.engagement_share());
    }
    let text = s.0;
    out.write_with("summary.txt", |w| Ok(w.write_all(text.as_bytes())?))?;
    manifest.push("theta_iv", iv.theta_hat);
    Ok(())
}
